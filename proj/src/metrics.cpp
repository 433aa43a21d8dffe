#include "deprl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deprl/errors.hpp"
#include "deprl/rng.hpp"

namespace deprl {

namespace {

void check_congruent(std::span<const WorkerState> states) {
  if (states.empty()) throw InvalidArgument("need at least one worker");
  for (const auto& s : states) {
    if (!s.phi.same_shape(states.front().phi)) {
      throw InvalidArgument("worker " + std::to_string(s.worker_id) + " has a differently shaped representation");
    }
  }
}

void check_shards(std::span<const WorkerState> states, std::span<const Shard> shards) {
  if (states.size() != shards.size()) {
    throw InvalidArgument("have " + std::to_string(states.size()) + " workers but " +
                          std::to_string(shards.size()) + " shards");
  }
}

}  // namespace

Representation mean_representation(std::span<const WorkerState> states) {
  check_congruent(states);
  Representation mean = states.front().phi;
  Eigen::VectorXd offset = Eigen::VectorXd::Zero(mean.parameter_count());
  for (std::size_t i = 1; i < states.size(); ++i) offset += states[i].phi.flat() - states.front().phi.flat();
  mean.flat() += offset / static_cast<double>(states.size());
  return mean;
}

double consensus_error(std::span<const Representation> phis) {
  if (phis.empty()) throw InvalidArgument("need at least one representation");
  // Mean taken relative to the first vector, so identical inputs give an
  // exactly zero error.
  const Eigen::VectorXd& anchor = phis.front().flat();
  Eigen::VectorXd offset = Eigen::VectorXd::Zero(anchor.size());
  for (std::size_t i = 1; i < phis.size(); ++i) {
    if (!phis[i].same_shape(phis.front())) throw InvalidArgument("representations differ in shape");
    offset += phis[i].flat() - anchor;
  }
  const Eigen::VectorXd mean = anchor + offset / static_cast<double>(phis.size());
  double total = 0.0;
  for (const auto& p : phis) total += (p.flat() - mean).squaredNorm();
  return total / static_cast<double>(phis.size());
}

double consensus_error(std::span<const WorkerState> states) {
  check_congruent(states);
  std::vector<Representation> phis;
  phis.reserve(states.size());
  for (const auto& s : states) phis.push_back(s.phi);
  return consensus_error(phis);
}

PartialGradNorms global_partial_grads(std::span<const WorkerState> states, std::span<const Head> heads_after,
                                      std::span<const Shard> shards, LossKind loss, HeadGradNorm mode) {
  check_shards(states, shards);
  if (heads_after.size() != states.size()) throw InvalidArgument("need one post-update head per worker");
  const Head& first = states.front().theta;
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (!states[i].theta.same_shape(first) || !heads_after[i].same_shape(first)) {
      throw InvalidArgument("worker " + std::to_string(i) +
                            " has a differently shaped head; head gradients cannot be averaged");
    }
  }
  const Representation phi_bar = mean_representation(states);
  const double inv_n = 1.0 / static_cast<double>(states.size());

  Eigen::VectorXd phi_sum = Eigen::VectorXd::Zero(phi_bar.parameter_count());
  Eigen::VectorXd theta_sum = Eigen::VectorXd::Zero(first.parameter_count());
  double theta_norms = 0.0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const Examples& train = shards[i].train;
    phi_sum += loss_and_gradients(phi_bar, heads_after[i], train, loss).phi.flat();
    const Eigen::VectorXd g_theta = loss_and_gradients(phi_bar, states[i].theta, train, loss).theta.flat();
    theta_sum += g_theta;
    theta_norms += g_theta.squaredNorm();
  }
  PartialGradNorms out;
  out.grad_phi_sq = (phi_sum * inv_n).squaredNorm();
  out.grad_theta_sq = mode == HeadGradNorm::kNormOfMean ? (theta_sum * inv_n).squaredNorm() : theta_norms * inv_n;
  return out;
}

PartialGradNorms global_partial_grads(std::span<const WorkerState> states, std::span<const Shard> shards,
                                      LossKind loss, HeadGradNorm mode) {
  std::vector<Head> heads;
  heads.reserve(states.size());
  for (const auto& s : states) heads.push_back(s.theta);
  return global_partial_grads(states, heads, shards, loss, mode);
}

double m_of_k(double grad_phi_sq, double grad_theta_sq, double consensus_err, double alpha, int tau, double beta) {
  if (!(beta > 0.0)) throw InvalidArgument("M(k) needs beta > 0");
  return grad_phi_sq + (alpha * static_cast<double>(tau) / beta) * grad_theta_sq + consensus_err;
}

BoundBreakdown theorem_bound(double f0, double fstar, const TheoryConstants& constants, const MixingParams& /*mix*/,
                             std::size_t n_workers, long k_rounds, double alpha, double beta, int tau) {
  if (!(beta > 0.0)) throw InvalidArgument("bound needs beta > 0");
  if (k_rounds < 1) throw InvalidArgument("bound needs K >= 1");
  if (n_workers < 1) throw InvalidArgument("bound needs N >= 1");
  const double l = constants.lipschitz_l;
  const double s2 = constants.sigma * constants.sigma;
  const double v2 = constants.varsigma * constants.varsigma;
  const double n = static_cast<double>(n_workers);
  const double t = static_cast<double>(tau);
  // (1 + 1/L^2) x, with x == 0 short-circuiting so L == 0 cannot produce 0 * inf.
  auto inflate = [l](double x) { return x == 0.0 ? 0.0 : (1.0 + 1.0 / (l * l)) * x; };

  BoundBreakdown b;
  b.vanishing = 4.0 * (f0 - fstar) / (static_cast<double>(k_rounds) * beta);
  b.sampling_phi = 2.0 * beta * l / n * s2;
  b.local_drift = 12.0 * alpha * alpha * alpha * l * l * t / beta * (t - 1.0) * (6.0 * t + 1.0) * s2;
  b.head_noise = 2.0 * alpha * alpha * t * l / beta * s2;
  b.consensus_noise = 2.0 * beta / (3.0 * n) * inflate(s2);
  b.heterogeneity = 2.0 * beta / n * inflate(v2);
  b.total = b.vanishing + b.sampling_phi + b.local_drift + b.head_noise + b.consensus_noise + b.heterogeneity;
  b.indicative_only = constants.source == ConstantSource::kEmpiricallyEstimated;
  return b;
}

StepSizeLimits step_size_limits(double lipschitz_l, const MixingParams& mix, std::size_t n_workers, int tau) {
  const double l = lipschitz_l;
  const double n = static_cast<double>(n_workers);
  const double t = static_cast<double>(tau);
  StepSizeLimits out;
  out.alpha_max = 1.0 / (t * l * (1.0 + 36.0 * t * t));
  out.beta_max = std::min({1.0 / l, n * l * l / (2.0 * l * l + 2.0),
                           (1.0 - mix.q) / (3.0 * std::sqrt(2.0) * mix.big_c * l * n)});
  return out;
}

TheoryConstants estimate_constants(std::span<const WorkerState> states, std::span<const Shard> shards, LossKind loss,
                                   Index batch_size, int probes, std::uint64_t seed) {
  if (probes < 2) throw InvalidArgument("estimate_constants needs probes >= 2");
  if (batch_size < 1) throw InvalidArgument("batch_size must be positive");
  check_shards(states, shards);
  check_congruent(states);
  const std::size_t n = states.size();

  TheoryConstants out;
  out.source = ConstantSource::kEmpiricallyEstimated;

  // L: gradient-difference ratios against small random perturbations.
  double l_est = 0.0;
  for (int r = 0; r < probes; ++r) {
    Rng rng = substream(seed, static_cast<std::uint64_t>(r), 0, Phase::kProbe);
    const std::size_t w = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    const WorkerState& s = states[w];
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd dphi(s.phi.parameter_count());
    Eigen::VectorXd dtheta(s.theta.parameter_count());
    for (auto& v : dphi) v = normal(rng);
    for (auto& v : dtheta) v = normal(rng);
    const double scale = 1e-4 * std::max(1.0, std::sqrt(s.phi.flat().squaredNorm() + s.theta.flat().squaredNorm())) /
                         std::sqrt(dphi.squaredNorm() + dtheta.squaredNorm());
    dphi *= scale;
    dtheta *= scale;

    Representation phi2 = s.phi;
    phi2.flat() += dphi;
    Head theta2 = s.theta;
    theta2.flat() += dtheta;
    const Gradients g1 = loss_and_gradients(s.phi, s.theta, shards[w].train, loss);
    const Gradients g2 = loss_and_gradients(phi2, theta2, shards[w].train, loss);
    const double denom = dphi.norm() + dtheta.norm();
    l_est = std::max(l_est, (g1.phi.flat() - g2.phi.flat()).norm() / denom);
    l_est = std::max(l_est, (g1.theta.flat() - g2.theta.flat()).norm() / denom);
  }
  out.lipschitz_l = l_est;

  // sigma^2: minibatch gradient variance around the full-batch gradient.
  double sigma2 = 0.0;
  for (std::size_t w = 0; w < n; ++w) {
    const Examples& train = shards[w].train;
    const Gradients full = loss_and_gradients(states[w].phi, states[w].theta, train, loss);
    double var_phi = 0.0;
    double var_theta = 0.0;
    for (int r = 0; r < probes; ++r) {
      Rng rng = substream(seed, w, static_cast<std::uint64_t>(r) + 1, Phase::kProbe);
      const auto rows = sample_without_replacement(train.size(), batch_size, rng);
      const Gradients g = loss_and_gradients(states[w].phi, states[w].theta, train.subset(rows), loss);
      var_phi += (g.phi.flat() - full.phi.flat()).squaredNorm();
      var_theta += (g.theta.flat() - full.theta.flat()).squaredNorm();
    }
    sigma2 = std::max({sigma2, var_phi / probes, var_theta / probes});
  }
  out.sigma = std::sqrt(sigma2);

  // varsigma^2: spread of local phi-gradients at the mean representation.
  const Representation phi_bar = mean_representation(states);
  std::vector<Eigen::VectorXd> local(n);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(phi_bar.parameter_count());
  for (std::size_t w = 0; w < n; ++w) {
    local[w] = loss_and_gradients(phi_bar, states[w].theta, shards[w].train, loss).phi.flat();
    mean += local[w];
  }
  mean /= static_cast<double>(n);
  double spread = 0.0;
  for (const auto& g : local) spread += (g - mean).squaredNorm();
  out.varsigma = std::sqrt(spread / static_cast<double>(n));
  return out;
}

Eigen::MatrixXd cosine_similarity_matrix(std::span<const Eigen::VectorXd> vectors) {
  const auto n = static_cast<Index>(vectors.size());
  std::vector<double> norms(vectors.size());
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].size() != vectors.front().size()) {
      throw InvalidArgument("vector " + std::to_string(i) + " has a different length");
    }
    norms[i] = vectors[i].norm();
    if (norms[i] == 0.0) throw InvalidArgument("vector " + std::to_string(i) + " is zero");
  }
  Eigen::MatrixXd out(n, n);
  for (Index i = 0; i < n; ++i) {
    out(i, i) = 1.0;
    for (Index j = i + 1; j < n; ++j) {
      const auto a = static_cast<std::size_t>(i);
      const auto b = static_cast<std::size_t>(j);
      const double v = vectors[a].dot(vectors[b]) / (norms[a] * norms[b]);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

std::optional<long> rounds_to_threshold(const MetricsTrace& trace, double epsilon, TraceField field) {
  if (!(epsilon > 0.0)) throw InvalidArgument("epsilon must be positive");
  double sum = 0.0;
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    const auto& r = trace.records[i];
    sum += field == TraceField::kMK ? r.m_k : r.avg_train_loss;
    if (sum / static_cast<double>(i + 1) <= epsilon) return r.round;
  }
  return std::nullopt;
}

AccuracyReport accuracy(std::span<const WorkerState> states, std::span<const Shard> shards, LossKind loss) {
  if (loss != LossKind::kCrossEntropy) {
    throw InvalidArgument("accuracy is defined for classification only; use test loss for regression");
  }
  check_shards(states, shards);
  AccuracyReport out;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const Examples& test = shards[i].test;
    if (test.size() == 0) throw InvalidArgument("worker " + std::to_string(i) + " has an empty test set");
    const auto pred = predict_labels(states[i].phi, states[i].theta, test.inputs);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < pred.size(); ++r) hits += pred[r] == test.labels[r] ? 1 : 0;
    out.per_worker.push_back(static_cast<double>(hits) / static_cast<double>(pred.size()));
  }
  double sum = 0.0;
  for (double a : out.per_worker) sum += a;
  out.average = sum / static_cast<double>(out.per_worker.size());
  return out;
}

double average_train_loss(std::span<const WorkerState> states, std::span<const Shard> shards, LossKind kind) {
  check_shards(states, shards);
  double sum = 0.0;
  for (std::size_t i = 0; i < states.size(); ++i) sum += loss(states[i].phi, states[i].theta, shards[i].train, kind);
  return sum / static_cast<double>(states.size());
}

double average_test_loss(std::span<const WorkerState> states, std::span<const Shard> shards, LossKind kind) {
  check_shards(states, shards);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (shards[i].test.size() == 0) continue;
    sum += loss(states[i].phi, states[i].theta, shards[i].test, kind);
    ++counted;
  }
  return counted ? sum / static_cast<double>(counted) : 0.0;
}

}  // namespace deprl
