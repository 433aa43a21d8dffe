#include "deprl/engine.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "deprl/errors.hpp"
#include "deprl/parallel.hpp"
#include "deprl/rng.hpp"

namespace deprl {

void RunConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw InvalidArgument("step sizes must be non-negative");
  if (tau < 1) throw InvalidArgument("tau must be >= 1");
  if (rounds < 0) throw InvalidArgument("rounds must be >= 0");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (schedule == ScheduleKind::kDecay && !(decay > 0.0 && decay <= 1.0)) {
    throw InvalidArgument("decay rate must lie in (0, 1]");
  }
  if (diagnostic_stride < 1) throw InvalidArgument("diagnostic_stride must be >= 1");
  if (feature_dim < 1) throw InvalidArgument("feature_dim must be >= 1");
  if (representation == RepresentationKind::kOneHiddenTanh && hidden_dim < 1) {
    throw InvalidArgument("nonlinear representation needs hidden_dim >= 1");
  }
}

StepSizes corollary_rates(std::size_t n_workers, long rounds, int tau) {
  if (n_workers < 1 || rounds < 1 || tau < 1) throw InvalidArgument("corollary rates need positive N, K, tau");
  const double k = static_cast<double>(rounds);
  return {1.0 / (static_cast<double>(tau) * std::sqrt(k)), std::sqrt(static_cast<double>(n_workers) / k)};
}

double corollary_k_floor(std::size_t n_workers, double big_c, double q, double lipschitz_l) {
  const double n = static_cast<double>(n_workers);
  const double l2 = lipschitz_l * lipschitz_l;
  const double first = 18.0 * big_c * big_c * l2 * n * n * n / ((1.0 - q) * (1.0 - q));
  const double second = (2.0 * l2 + 2.0) * (2.0 * l2 + 2.0) / (n * l2 * l2);
  const double third = n * l2;
  return std::max({first, second, third});
}

StepSizes step_sizes_at(const RunConfig& cfg, long round, std::size_t n_workers) {
  switch (cfg.schedule) {
    case ScheduleKind::kConstant:
      return {cfg.alpha, cfg.beta};
    case ScheduleKind::kDecay: {
      const double f = std::pow(cfg.decay, static_cast<double>(round));
      return {cfg.alpha * f, cfg.beta * f};
    }
    case ScheduleKind::kCorollary:
      return corollary_rates(n_workers, std::max(1L, cfg.rounds), cfg.tau);
  }
  return {cfg.alpha, cfg.beta};
}

int head_steps_for_epochs(std::span<const Shard> shards, Index batch_size, int epochs) {
  if (batch_size < 1 || epochs < 1) throw InvalidArgument("batch_size and epochs must be positive");
  Index largest = 0;
  for (const auto& s : shards) largest = std::max(largest, s.train.size());
  return static_cast<int>((largest + batch_size - 1) / batch_size) * epochs;
}

Index output_dim_of(const Shard& shard) {
  if (shard.train.is_classification()) {
    if (!shard.class_histogram.empty()) return static_cast<Index>(shard.class_histogram.size());
    int top = 0;
    for (int l : shard.train.labels) top = std::max(top, l);
    return top + 1;
  }
  return shard.train.targets.cols();
}

std::vector<WorkerState> initialize_states(const RunConfig& cfg, std::size_t n_workers, Index input_dim,
                                           Index output_dim, bool shared_head) {
  Rng phi_rng = substream(cfg.seed, 0, 0, Phase::kInitRepresentation);
  const Representation phi0 =
      Representation::random_init(cfg.representation, input_dim, cfg.feature_dim, cfg.hidden_dim, phi_rng);
  std::vector<WorkerState> states;
  states.reserve(n_workers);
  for (std::size_t i = 0; i < n_workers; ++i) {
    Rng head_rng = substream(cfg.seed, shared_head ? 0 : i, 0, Phase::kInitHead);
    states.push_back({i, phi0, Head::random_init(output_dim, cfg.feature_dim, head_rng)});
  }
  return states;
}

namespace {

void check_round_inputs(std::span<const WorkerState> states, const ConsensusMatrix& p_mat,
                        std::span<const Shard> shards) {
  if (states.empty()) throw InvalidArgument("no workers");
  if (states.size() != shards.size() || states.size() != p_mat.size()) {
    throw InvalidArgument("worker count mismatch: " + std::to_string(states.size()) + " states, " +
                          std::to_string(shards.size()) + " shards, " + std::to_string(p_mat.size()) +
                          "x" + std::to_string(p_mat.size()) + " consensus matrix");
  }
  for (const auto& s : states) {
    if (!s.phi.same_shape(states.front().phi)) {
      throw InvalidArgument("worker " + std::to_string(s.worker_id) + " has a differently shaped representation");
    }
  }
}

Examples draw_batch(const Examples& train, Index batch_size, Rng rng) {
  const auto rows = sample_without_replacement(train.size(), batch_size, rng);
  return train.subset(rows);
}

void require_finite(const Eigen::VectorXd& v, std::size_t worker, long round, const char* what) {
  if (!v.allFinite()) throw RunAborted(worker, round, std::string("non-finite ") + what);
}

// phi_i <- sum_j P(i,j) phi_j over the nonzero weights of row i, j ascending,
// evaluated as h_i + sum_{j != i} P(i,j) (h_j - h_i). Rows sum to one, so the
// two agree; this form leaves identical inputs bit-exactly unchanged.
void consensus_step(std::vector<WorkerState>& next, std::span<const Eigen::VectorXd> half,
                    const ConsensusMatrix& p_mat, long round, unsigned threads,
                    const std::function<Eigen::VectorXd&(WorkerState&)>& target) {
  parallel_for(next.size(), threads, [&](std::size_t i) {
    Eigen::VectorXd acc = half[i];
    for (std::size_t j = 0; j < half.size(); ++j) {
      const double w = p_mat(i, j);
      if (j != i && w != 0.0) acc += w * (half[j] - half[i]);
    }
    require_finite(acc, i, round, "parameter after consensus");
    target(next[i]) = std::move(acc);
  });
}

}  // namespace

std::vector<WorkerState> deprl_round(std::span<const WorkerState> states, const ConsensusMatrix& p_mat,
                                     std::span<const Shard> shards, const RunConfig& cfg, long round,
                                     unsigned threads) {
  check_round_inputs(states, p_mat, shards);
  const StepSizes lr = step_sizes_at(cfg, round, states.size());
  std::vector<WorkerState> next(states.begin(), states.end());
  std::vector<Eigen::VectorXd> half(states.size());

  // Each task reads and writes only worker i's own head.
  parallel_for(states.size(), threads, [&](std::size_t i) {
    WorkerState& w = next[i];
    const Examples& train = shards[i].train;
    for (int s = 0; s < cfg.tau; ++s) {
      const Examples batch = draw_batch(train, cfg.batch_size,
                                        substream(cfg.seed, w.worker_id, static_cast<std::uint64_t>(round),
                                                  static_cast<std::uint64_t>(s)));
      const Head g = grad_theta(w.phi, w.theta, batch, cfg.loss);
      w.theta.flat() -= lr.alpha * g.flat();
      require_finite(w.theta.flat(), i, round, "head after local step");
    }
    const Examples batch = draw_batch(
        train, cfg.batch_size,
        substream(cfg.seed, w.worker_id, static_cast<std::uint64_t>(round), Phase::kRepresentationStep));
    const Representation g = grad_phi(w.phi, w.theta, batch, cfg.loss);
    half[i] = w.phi.flat() - lr.beta * g.flat();
    require_finite(half[i], i, round, "representation after local step");
  });

  consensus_step(next, half, p_mat, round, threads,
                 [](WorkerState& w) -> Eigen::VectorXd& { return w.phi.flat(); });
  return next;
}

std::vector<WorkerState> dpsgd_round(std::span<const WorkerState> states, const ConsensusMatrix& p_mat,
                                     std::span<const Shard> shards, const RunConfig& cfg, long round,
                                     unsigned threads) {
  check_round_inputs(states, p_mat, shards);
  for (const auto& s : states) {
    if (!s.theta.same_shape(states.front().theta)) throw InvalidArgument("D-PSGD needs congruent heads");
  }
  const StepSizes lr = step_sizes_at(cfg, round, states.size());
  std::vector<WorkerState> next(states.begin(), states.end());
  std::vector<Eigen::VectorXd> half_phi(states.size());
  std::vector<Eigen::VectorXd> half_theta(states.size());

  parallel_for(states.size(), threads, [&](std::size_t i) {
    const WorkerState& w = states[i];
    const Examples batch =
        draw_batch(shards[i].train, cfg.batch_size,
                   substream(cfg.seed, w.worker_id, static_cast<std::uint64_t>(round), Phase::kDpsgdStep));
    const Gradients g = loss_and_gradients(w.phi, w.theta, batch, cfg.loss);
    half_phi[i] = w.phi.flat() - lr.beta * g.phi.flat();
    half_theta[i] = w.theta.flat() - lr.beta * g.theta.flat();
    require_finite(half_phi[i], i, round, "representation after local step");
    require_finite(half_theta[i], i, round, "head after local step");
  });

  consensus_step(next, half_phi, p_mat, round, threads,
                 [](WorkerState& w) -> Eigen::VectorXd& { return w.phi.flat(); });
  consensus_step(next, half_theta, p_mat, round, threads,
                 [](WorkerState& w) -> Eigen::VectorXd& { return w.theta.flat(); });
  return next;
}

namespace {

using RoundFn = std::vector<WorkerState> (*)(std::span<const WorkerState>, const ConsensusMatrix&,
                                             std::span<const Shard>, const RunConfig&, long, unsigned);

enum class HeadInit { kIndependent, kShared };

void warn_if_infeasible(const RunConfig& cfg, const ConsensusMatrix& p_mat, std::size_t n, double l_est) {
  if (!(l_est > 0.0)) return;
  MixingParams mix;
  try {
    mix = mixing_params(p_mat);
  } catch (const InvalidArgument&) {
    return;
  }
  const StepSizeLimits lim = step_size_limits(l_est, mix, n, cfg.tau);
  const StepSizes lr = step_sizes_at(cfg, 0, n);
  if (lr.alpha > lim.alpha_max) {
    spdlog::warn("alpha={} exceeds the convergence condition {} for L~{}", lr.alpha, lim.alpha_max, l_est);
  }
  if (lr.beta > lim.beta_max) {
    spdlog::warn("beta={} exceeds the convergence condition {} for L~{}", lr.beta, lim.beta_max, l_est);
  }
}

RunResult run_loop(const Graph& graph, std::span<const Shard> shards, const RunConfig& cfg,
                   const RunOptions& options, RoundFn round_fn, HeadInit head_init) {
  cfg.validate();
  if (shards.empty()) throw InvalidArgument("no shards");
  if (graph.size() != shards.size()) {
    throw InvalidArgument("graph has " + std::to_string(graph.size()) + " workers but there are " +
                          std::to_string(shards.size()) + " shards");
  }
  const auto start = std::chrono::steady_clock::now();
  const ConsensusMatrix p_mat = metropolis_weights(graph);
  const std::size_t n = shards.size();

  RunResult result;
  long first_round = 0;
  std::size_t recorded = 0;
  double m_sum = 0.0;
  if (options.resume) {
    result.initial_states = options.resume->states;
    first_round = options.resume->next_round;
    recorded = options.resume->records;
    m_sum = options.resume->m_k_sum;
    if (result.initial_states.size() != n) throw InvalidArgument("checkpoint worker count does not match shards");
  } else {
    result.initial_states =
        initialize_states(cfg, n, shards.front().train.input_dim(), output_dim_of(shards.front()),
                          head_init == HeadInit::kShared);
  }
  if (options.lipschitz_estimate) warn_if_infeasible(cfg, p_mat, n, *options.lipschitz_estimate);

  const bool classification = cfg.loss == LossKind::kCrossEntropy;
  MetricsTrace& trace = result.trace;
  trace.summary.initial_avg_train_loss = average_train_loss(result.initial_states, shards, cfg.loss);

  std::vector<WorkerState> states = result.initial_states;
  for (long k = first_round; k < cfg.rounds; ++k) {
    std::vector<WorkerState> next = round_fn(states, p_mat, shards, cfg, k, options.threads);

    if (k % cfg.diagnostic_stride == 0) {
      std::vector<Head> heads_after;
      heads_after.reserve(n);
      for (const auto& w : next) heads_after.push_back(w.theta);
      const PartialGradNorms g = global_partial_grads(states, heads_after, shards, cfg.loss, cfg.head_grad_norm);
      const StepSizes lr = step_sizes_at(cfg, k, n);
      MetricsRecord rec;
      rec.round = k;
      rec.grad_phi_sq = g.grad_phi_sq;
      rec.grad_theta_sq = g.grad_theta_sq;
      rec.consensus_err = consensus_error(states);
      rec.m_k = lr.beta > 0.0 ? m_of_k(rec.grad_phi_sq, rec.grad_theta_sq, rec.consensus_err, lr.alpha, cfg.tau, lr.beta)
                              : rec.grad_phi_sq + rec.consensus_err;
      m_sum += rec.m_k;
      ++recorded;
      rec.running_avg_m = m_sum / static_cast<double>(recorded);
      rec.avg_train_loss = average_train_loss(next, shards, cfg.loss);
      if (classification) rec.avg_test_accuracy = accuracy(next, shards, cfg.loss).average;
      trace.records.push_back(rec);
    }
    states = std::move(next);

    if (options.checkpoint_every > 0 && options.on_checkpoint && (k + 1) % options.checkpoint_every == 0) {
      options.on_checkpoint(Checkpoint{k + 1, recorded, m_sum, states});
    }
  }

  TraceSummary& sum = trace.summary;
  sum.rounds = std::max(0L, cfg.rounds - first_round);
  sum.running_avg_m = recorded ? m_sum / static_cast<double>(recorded) : 0.0;
  sum.final_avg_train_loss = average_train_loss(states, shards, cfg.loss);
  sum.final_avg_test_loss = average_test_loss(states, shards, cfg.loss);
  if (classification) sum.final_avg_test_accuracy = accuracy(states, shards, cfg.loss).average;
  sum.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.final_states = std::move(states);
  return result;
}

}  // namespace

RunResult run_deprl(const Graph& graph, std::span<const Shard> shards, const RunConfig& cfg,
                    const RunOptions& options) {
  return run_loop(graph, shards, cfg, options, &deprl_round, HeadInit::kIndependent);
}

RunResult run_dpsgd(const Graph& graph, std::span<const Shard> shards, const RunConfig& cfg,
                    const RunOptions& options) {
  return run_loop(graph, shards, cfg, options, &dpsgd_round, HeadInit::kShared);
}

GeneralizationResult generalize_to_new_workers(const Representation& frozen_phi, std::span<const Shard> new_shards,
                                               int head_steps, double alpha, Index batch_size, LossKind loss,
                                               std::uint64_t seed) {
  if (head_steps < 0) throw InvalidArgument("head_steps must be non-negative");
  if (batch_size < 1) throw InvalidArgument("batch_size must be positive");
  GeneralizationResult out;
  double loss_sum = 0.0;
  double acc_sum = 0.0;
  for (std::size_t i = 0; i < new_shards.size(); ++i) {
    const Shard& shard = new_shards[i];
    if (shard.train.input_dim() != frozen_phi.input_dim()) {
      throw InvalidArgument("new worker " + std::to_string(i) + " has input dim " +
                            std::to_string(shard.train.input_dim()) + ", representation expects " +
                            std::to_string(frozen_phi.input_dim()));
    }
    Rng init = substream(seed, i, 0, Phase::kGeneralizeInit);
    Head head = Head::random_init(output_dim_of(shard), frozen_phi.feature_dim(), init);
    for (int s = 0; s < head_steps; ++s) {
      const Examples batch = draw_batch(shard.train, batch_size,
                                        substream(seed, i, static_cast<std::uint64_t>(s), Phase::kGeneralizeStep));
      head.flat() -= alpha * grad_theta(frozen_phi, head, batch, loss).flat();
    }
    const double test_loss = shard.test.size() ? deprl::loss(frozen_phi, head, shard.test, loss) : 0.0;
    out.per_worker_test_loss.push_back(test_loss);
    loss_sum += test_loss;
    if (loss == LossKind::kCrossEntropy && shard.test.size() > 0) {
      const auto pred = predict_labels(frozen_phi, head, shard.test.inputs);
      std::size_t hits = 0;
      for (std::size_t r = 0; r < pred.size(); ++r) hits += pred[r] == shard.test.labels[r] ? 1 : 0;
      const double acc = static_cast<double>(hits) / static_cast<double>(pred.size());
      out.per_worker_accuracy.push_back(acc);
      acc_sum += acc;
    }
    out.heads.push_back(std::move(head));
  }
  if (!new_shards.empty()) {
    out.average_test_loss = loss_sum / static_cast<double>(new_shards.size());
    if (!out.per_worker_accuracy.empty()) {
      out.average_accuracy = acc_sum / static_cast<double>(out.per_worker_accuracy.size());
    }
  }
  return out;
}

}  // namespace deprl
