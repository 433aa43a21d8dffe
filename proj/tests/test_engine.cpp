#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "deprl/checkpoint.hpp"
#include "deprl/engine.hpp"
#include "deprl/errors.hpp"
#include "deprl/experiment.hpp"

using namespace deprl;

namespace {

PlantedTask planted(std::size_t n, std::uint64_t seed, double noise = 0.05, Index d = 6, Index z = 2) {
  PlantedTaskOptions o;
  o.n_workers = n;
  o.input_dim = d;
  o.feature_dim = z;
  o.samples_per_worker = 30;
  o.noise_std = noise;
  o.seed = seed;
  return generate_planted(o);
}

RunConfig small_config() {
  RunConfig cfg;
  cfg.alpha = 0.05;
  cfg.beta = 0.05;
  cfg.tau = 2;
  cfg.rounds = 20;
  cfg.batch_size = 8;
  cfg.feature_dim = 2;
  cfg.seed = 3;
  return cfg;
}

// Worker states with distinct representations, to exercise consensus.
std::vector<WorkerState> scattered_states(std::size_t n, std::uint64_t seed) {
  RunConfig cfg = small_config();
  std::vector<WorkerState> states = initialize_states(cfg, n, 6, 1);
  Rng rng(seed);
  for (auto& s : states) s.phi = Representation::random_init(RepresentationKind::kLinear, 6, 2, 0, rng);
  return states;
}

double max_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST_CASE("corollary step sizes") {
  const StepSizes a = corollary_rates(16, 400, 2);
  CHECK(a.alpha == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(a.beta == doctest::Approx(0.2).epsilon(1e-15));
  const StepSizes b = corollary_rates(1, 1, 1);
  CHECK(b.alpha == 1.0);
  CHECK(b.beta == 1.0);
  const StepSizes c = corollary_rates(4, 10000, 5);
  CHECK(c.alpha == doctest::Approx(0.002).epsilon(1e-15));
  CHECK(c.beta == doctest::Approx(0.02).epsilon(1e-15));
}

TEST_CASE("corollary round floor") {
  CHECK(corollary_k_floor(1, 1.0, 0.5, 1.0) == 72.0);
  CHECK(corollary_k_floor(1, 0.0, 1e-300, 1.0) == 16.0);
  // Large C makes the N^3 term dominate at both sizes.
  CHECK(corollary_k_floor(4, 100.0, 0.5, 1.0) == 8.0 * corollary_k_floor(2, 100.0, 0.5, 1.0));
}

TEST_CASE("step-size schedules") {
  RunConfig cfg = small_config();
  cfg.alpha = 0.2;
  cfg.beta = 0.1;
  CHECK(step_sizes_at(cfg, 7, 4).alpha == 0.2);
  CHECK(step_sizes_at(cfg, 7, 4).beta == 0.1);
  cfg.schedule = ScheduleKind::kDecay;
  cfg.decay = 0.96;
  for (long k = 1; k < 20; ++k) {
    const StepSizes now = step_sizes_at(cfg, k, 4);
    const StepSizes before = step_sizes_at(cfg, k - 1, 4);
    CHECK(now.alpha == doctest::Approx(0.96 * before.alpha).epsilon(1e-14));
    CHECK(now.beta == doctest::Approx(0.96 * before.beta).epsilon(1e-14));
  }
  cfg.schedule = ScheduleKind::kCorollary;
  cfg.rounds = 400;
  cfg.tau = 2;
  CHECK(step_sizes_at(cfg, 123, 16).beta == doctest::Approx(0.2));
}

TEST_CASE("run configuration validation") {
  RunConfig cfg = small_config();
  cfg.tau = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = small_config();
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = small_config();
  cfg.schedule = ScheduleKind::kDecay;
  cfg.decay = 1.5;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = small_config();
  cfg.representation = RepresentationKind::kOneHiddenTanh;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("head epochs convert to steps using the largest shard") {
  const PlantedTask t = planted(3, 1);
  CHECK(head_steps_for_epochs(t.shards, 8, 2) == 2 * 3);  // 24 train rows, batches of 8
  CHECK(head_steps_for_epochs(t.shards, 5, 1) == 5);
}

TEST_CASE("initial states share phi but not theta") {
  const std::vector<WorkerState> s = initialize_states(small_config(), 5, 6, 2);
  for (const auto& w : s) CHECK(w.phi == s.front().phi);
  CHECK_FALSE(s[1].theta == s[0].theta);
  const std::vector<WorkerState> shared = initialize_states(small_config(), 5, 6, 2, true);
  for (const auto& w : shared) CHECK(w.theta == shared.front().theta);
}

TEST_CASE("zero step sizes leave every state unchanged") {
  const PlantedTask t = planted(5, 2);
  RunConfig cfg = small_config();
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  const ConsensusMatrix p = metropolis_weights(build_ring(5));
  const std::vector<WorkerState> start = initialize_states(cfg, 5, 6, 1);
  std::vector<WorkerState> s = start;
  for (long k = 0; k < 5; ++k) s = deprl_round(s, p, t.shards, cfg, k);
  CHECK(s == start);

  const std::vector<WorkerState> shared = initialize_states(cfg, 5, 6, 1, true);
  s = shared;
  for (long k = 0; k < 5; ++k) s = dpsgd_round(s, p, t.shards, cfg, k);
  CHECK(s == shared);

  cfg.rounds = 6;
  const RunResult r = run_dpsgd(build_ring(5), t.shards, cfg);
  for (const auto& rec : r.trace.records) {
    CHECK(rec.avg_train_loss == r.trace.records.front().avg_train_loss);
    CHECK(rec.m_k == r.trace.records.front().m_k);
  }
}

TEST_CASE("complete graph with uniform weights equalizes representations") {
  const PlantedTask t = planted(4, 3);
  RunConfig cfg = small_config();
  cfg.batch_size = 1000;  // full batch, so half steps are reproducible here
  const std::vector<WorkerState> start = scattered_states(4, 5);
  const std::vector<WorkerState> next = deprl_round(start, metropolis_weights(build_complete(4)), t.shards, cfg, 0);

  Eigen::VectorXd mean_half = Eigen::VectorXd::Zero(start[0].phi.parameter_count());
  for (std::size_t i = 0; i < 4; ++i) {
    Head theta = start[i].theta;
    for (int s = 0; s < cfg.tau; ++s) {
      theta.flat() -= cfg.alpha * grad_theta(start[i].phi, theta, t.shards[i].train, cfg.loss).flat();
    }
    CHECK(next[i].theta == theta);
    mean_half += (start[i].phi.flat() - cfg.beta * grad_phi(start[i].phi, theta, t.shards[i].train, cfg.loss).flat()) / 4.0;
  }
  for (const auto& w : next) {
    CHECK(max_abs(w.phi.flat() - next[0].phi.flat()) <= 1e-15);
    CHECK(max_abs(w.phi.flat() - mean_half) <= 1e-12);
  }
}

TEST_CASE("consensus preserves the network mean of half steps") {
  const PlantedTask t = planted(7, 4);
  RunConfig cfg = small_config();
  cfg.batch_size = 1000;
  for (const Graph& g : {build_ring(7), build_random_connected(7, 0.4, 9)}) {
    const std::vector<WorkerState> start = scattered_states(7, 6);
    const std::vector<WorkerState> next = deprl_round(start, metropolis_weights(g), t.shards, cfg, 0);
    Eigen::VectorXd half_mean = Eigen::VectorXd::Zero(start[0].phi.parameter_count());
    Eigen::VectorXd new_mean = half_mean;
    for (std::size_t i = 0; i < 7; ++i) {
      half_mean += (start[i].phi.flat() - cfg.beta * grad_phi(start[i].phi, next[i].theta, t.shards[i].train, cfg.loss).flat()) / 7.0;
      new_mean += next[i].phi.flat() / 7.0;
    }
    CHECK(max_abs(new_mean - half_mean) <= 1e-10);
  }
}

TEST_CASE("a single worker runs plain alternating SGD") {
  const PlantedTask t = planted(1, 5);
  RunConfig cfg = small_config();
  cfg.rounds = 15;
  const RunResult r = run_deprl(Graph(1, {}), t.shards, cfg);

  // Same substream keys as the engine: head step s uses phase s, the
  // representation step its own phase.
  WorkerState w = initialize_states(cfg, 1, 6, 1).front();
  const Examples& train = t.shards[0].train;
  for (long k = 0; k < cfg.rounds; ++k) {
    for (int s = 0; s < cfg.tau; ++s) {
      Rng rng = substream(cfg.seed, 0, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(s));
      const Examples batch = train.subset(sample_without_replacement(train.size(), cfg.batch_size, rng));
      w.theta.flat() -= cfg.alpha * grad_theta(w.phi, w.theta, batch, cfg.loss).flat();
    }
    Rng rng = substream(cfg.seed, 0, static_cast<std::uint64_t>(k), Phase::kRepresentationStep);
    const Examples batch = train.subset(sample_without_replacement(train.size(), cfg.batch_size, rng));
    w.phi.flat() -= cfg.beta * grad_phi(w.phi, w.theta, batch, cfg.loss).flat();
  }
  CHECK(r.final_states.front() == w);
}

TEST_CASE("heads stay local to their worker within a round") {
  const PlantedTask t = planted(5, 6);
  const RunConfig cfg = small_config();
  const ConsensusMatrix p = metropolis_weights(build_complete(5));
  const std::vector<WorkerState> start = scattered_states(5, 7);
  const std::vector<WorkerState> base = deprl_round(start, p, t.shards, cfg, 0, 3);

  // Changing another worker's head or data never changes worker 2's head.
  std::vector<WorkerState> other_heads = start;
  for (std::size_t j : {0, 1, 3, 4}) other_heads[j].theta.flat().setConstant(1e3);
  std::vector<Shard> other_data = t.shards;
  other_data[4].train.targets.array() += 50.0;
  CHECK(deprl_round(other_heads, p, t.shards, cfg, 0, 3)[2].theta == base[2].theta);
  CHECK(deprl_round(start, p, other_data, cfg, 0, 3)[2].theta == base[2].theta);
}

TEST_CASE("traces do not depend on the thread count") {
  const PlantedTask t = planted(9, 7);
  RunConfig cfg = small_config();
  cfg.rounds = 25;
  const Graph g = build_random_connected(9, 0.4, 2);
  for (auto run : {&run_deprl, &run_dpsgd}) {
    RunOptions one, many;
    one.threads = 1;
    many.threads = 8;
    const RunResult a = run(g, t.shards, cfg, one);
    const RunResult b = run(g, t.shards, cfg, many);
    CHECK(metrics_csv(a.trace) == metrics_csv(b.trace));
    CHECK(a.final_states == b.final_states);
    const RunResult again = run(g, t.shards, cfg, one);
    CHECK(metrics_csv(again.trace) == metrics_csv(a.trace));
  }
}

TEST_CASE("trace bookkeeping") {
  const PlantedTask t = planted(4, 8);
  RunConfig cfg = small_config();

  SUBCASE("zero rounds") {
    cfg.rounds = 0;
    const RunResult r = run_deprl(build_ring(4), t.shards, cfg);
    CHECK(r.trace.records.empty());
    CHECK(r.trace.summary.rounds == 0);
    CHECK(r.final_states == r.initial_states);
    CHECK(r.trace.summary.final_avg_train_loss == r.trace.summary.initial_avg_train_loss);
  }
  SUBCASE("records are recomposable and start at exact consensus") {
    cfg.rounds = 30;
    const RunResult r = run_deprl(build_ring(4), t.shards, cfg);
    REQUIRE(r.trace.records.size() == 30);
    CHECK(r.trace.records.front().consensus_err == 0.0);
    double sum = 0.0;
    for (std::size_t k = 0; k < r.trace.records.size(); ++k) {
      const MetricsRecord& rec = r.trace.records[k];
      CHECK(rec.round == static_cast<long>(k));
      CHECK(rec.m_k == m_of_k(rec.grad_phi_sq, rec.grad_theta_sq, rec.consensus_err, cfg.alpha, cfg.tau, cfg.beta));
      sum += rec.m_k;
      CHECK(rec.running_avg_m == sum / static_cast<double>(k + 1));
      CHECK(rec.grad_phi_sq >= 0.0);
      CHECK(rec.consensus_err >= 0.0);
      CHECK_FALSE(rec.avg_test_accuracy);
    }
    CHECK(r.trace.summary.running_avg_m == r.trace.records.back().running_avg_m);
  }
  SUBCASE("diagnostic stride keeps true round indices") {
    cfg.rounds = 10;
    cfg.diagnostic_stride = 4;
    const RunResult r = run_deprl(build_ring(4), t.shards, cfg);
    REQUIRE(r.trace.records.size() == 3);
    CHECK(r.trace.records[1].round == 4);
    CHECK(r.trace.records[2].round == 8);
  }
  SUBCASE("graph and shard counts must agree") {
    CHECK_THROWS_AS(run_deprl(build_ring(5), t.shards, cfg), InvalidArgument);
  }
}

TEST_CASE("non-finite parameters abort the run with the worker and round") {
  const PlantedTask t = planted(3, 9);
  RunConfig cfg = small_config();
  cfg.alpha = 1e200;
  cfg.beta = 1e200;
  cfg.rounds = 50;
  try {
    run_deprl(build_ring(3), t.shards, cfg);
    FAIL("expected the run to abort");
  } catch (const RunAborted& e) {
    CHECK(e.round() < 50);
    CHECK(e.worker() < 3);
    CHECK(std::string(e.what()).find("round " + std::to_string(e.round())) != std::string::npos);
  }
}

TEST_CASE("both algorithms fit a noiseless planted task") {
  PlantedTaskOptions o;
  o.n_workers = 1;
  o.input_dim = 10;
  o.feature_dim = 2;
  o.samples_per_worker = 60;
  o.seed = 10;
  const PlantedTask t = generate_planted(o);
  RunConfig cfg;
  cfg.alpha = 0.1;
  cfg.beta = 0.1;
  cfg.tau = 1;
  cfg.rounds = 5000;
  cfg.batch_size = 16;
  cfg.feature_dim = 2;
  cfg.diagnostic_stride = 1000;
  const RunResult a = run_deprl(Graph(1, {}), t.shards, cfg);
  const RunResult b = run_dpsgd(Graph(1, {}), t.shards, cfg);
  CHECK(a.trace.summary.final_avg_train_loss < 1e-3);
  CHECK(b.trace.summary.final_avg_train_loss < 1e-3);
}

TEST_CASE("checkpoints resume with an identical continuation") {
  const PlantedTask t = planted(4, 11);
  RunConfig cfg = small_config();
  cfg.rounds = 24;
  cfg.schedule = ScheduleKind::kDecay;
  const Graph g = build_ring(4);
  const RunResult full = run_deprl(g, t.shards, cfg);

  std::vector<Checkpoint> saved;
  RunOptions opts;
  opts.checkpoint_every = 10;
  opts.on_checkpoint = [&](const Checkpoint& c) { saved.push_back(c); };
  run_deprl(g, t.shards, cfg, opts);
  REQUIRE(saved.size() == 2);
  CHECK(saved[0].next_round == 10);

  const auto path = std::filesystem::temp_directory_path() / "deprl_test_checkpoint.txt";
  save_checkpoint(saved[0], path.string());
  const Checkpoint loaded = load_checkpoint(path.string());
  CHECK(loaded == saved[0]);

  RunOptions resume;
  resume.resume = loaded;
  const RunResult tail = run_deprl(g, t.shards, cfg, resume);
  CHECK(tail.final_states == full.final_states);
  REQUIRE(tail.trace.records.size() == 14);
  for (std::size_t i = 0; i < 14; ++i) CHECK(tail.trace.records[i] == full.trace.records[i + 10]);
}

TEST_CASE("checkpoint loading rejects damaged files") {
  const auto path = std::filesystem::temp_directory_path() / "deprl_test_bad_checkpoint.txt";
  Checkpoint c;
  c.next_round = 3;
  c.states = scattered_states(2, 1);
  save_checkpoint(c, path.string());
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  CHECK_THROWS_AS(load_checkpoint(path.string()), MalformedFile);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/checkpoint.txt"), IoError);
}

TEST_CASE("new workers fit heads on a frozen representation") {
  PlantedTaskOptions o;
  o.n_workers = 3;
  o.input_dim = 8;
  o.feature_dim = 2;
  o.samples_per_worker = 80;
  o.seed = 12;
  const PlantedTask t = generate_planted(o);

  SUBCASE("no steps keeps the initial heads") {
    const GeneralizationResult none = generalize_to_new_workers(t.truth_phi, t.shards, 0, 0.1, 8, LossKind::kSquared, 4);
    const GeneralizationResult frozen =
        generalize_to_new_workers(t.truth_phi, t.shards, 40, 0.0, 8, LossKind::kSquared, 4);
    CHECK(none.heads == frozen.heads);
  }
  SUBCASE("exact representation recovers noiseless heads") {
    const GeneralizationResult r =
        generalize_to_new_workers(t.truth_phi, t.shards, 3000, 0.1, 16, LossKind::kSquared, 4);
    for (std::size_t i = 0; i < t.shards.size(); ++i) {
      const Eigen::MatrixXd pred = forward_batch(t.truth_phi, r.heads[i], t.shards[i].test.inputs);
      const double mse = (pred - t.shards[i].test.targets).squaredNorm() / static_cast<double>(pred.size());
      CHECK(mse < 1e-4);
    }
    CHECK_FALSE(r.average_accuracy);
  }
  SUBCASE("input width must match") {
    const Representation narrow = Representation::zeros(RepresentationKind::kLinear, 4, 2);
    CHECK_THROWS_AS(generalize_to_new_workers(narrow, t.shards, 1, 0.1, 8, LossKind::kSquared, 1), InvalidArgument);
  }
}
