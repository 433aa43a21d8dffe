#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "deprl/data.hpp"
#include "deprl/metrics.hpp"
#include "deprl/state.hpp"
#include "deprl/topology.hpp"

namespace deprl {

enum class ScheduleKind {
  kConstant,   // alpha, beta fixed
  kDecay,      // both multiplied by `decay` after every round
  kCorollary,  // alpha = 1/(tau sqrt K), beta = sqrt(N/K)
};

struct RunConfig {
  double alpha = 0.01;  // head step size
  double beta = 0.01;   // representation step size
  int tau = 1;          // head steps per round
  long rounds = 1;      // K
  Index batch_size = 16;
  LossKind loss = LossKind::kSquared;
  ScheduleKind schedule = ScheduleKind::kConstant;
  double decay = 0.96;
  std::uint64_t seed = 1;

  RepresentationKind representation = RepresentationKind::kLinear;
  Index feature_dim = 3;  // z
  Index hidden_dim = 0;   // nonlinear only

  long diagnostic_stride = 1;
  HeadGradNorm head_grad_norm = HeadGradNorm::kNormOfMean;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

struct StepSizes {
  double alpha = 0.0;
  double beta = 0.0;
};

StepSizes corollary_rates(std::size_t n_workers, long rounds, int tau);

// max(18 C^2 L^2 N^3 / (1-q)^2, (2 L^2 + 2)^2 / (N L^4), N L^2)
double corollary_k_floor(std::size_t n_workers, double big_c, double q, double lipschitz_l);

StepSizes step_sizes_at(const RunConfig& cfg, long round, std::size_t n_workers);

// ceil(|D_i| / batch) * epochs, using the largest train shard.
int head_steps_for_epochs(std::span<const Shard> shards, Index batch_size, int epochs);

// Shared phi(0) for every worker. Heads are independent per worker, or all
// copies of worker 0's draw when `shared_head` is set (single-model baseline).
std::vector<WorkerState> initialize_states(const RunConfig& cfg, std::size_t n_workers, Index input_dim,
                                           Index output_dim, bool shared_head = false);

// One synchronous round: tau head steps, one representation step, then
// consensus over the frozen half-step representations.
std::vector<WorkerState> deprl_round(std::span<const WorkerState> states, const ConsensusMatrix& p_mat,
                                     std::span<const Shard> shards, const RunConfig& cfg, long round,
                                     unsigned threads = 1);

// One D-PSGD round: a single SGD step (step size beta) on the whole model,
// then consensus over the whole model, heads included. run_dpsgd starts
// every worker from the same (phi, theta).
std::vector<WorkerState> dpsgd_round(std::span<const WorkerState> states, const ConsensusMatrix& p_mat,
                                     std::span<const Shard> shards, const RunConfig& cfg, long round,
                                     unsigned threads = 1);

struct Checkpoint {
  long next_round = 0;
  std::size_t records = 0;   // diagnostics recorded before next_round
  double m_k_sum = 0.0;      // their running sum, for the running average
  std::vector<WorkerState> states;

  bool operator==(const Checkpoint&) const = default;
};

struct RunOptions {
  unsigned threads = 1;
  long checkpoint_every = 0;  // 0 disables
  std::function<void(const Checkpoint&)> on_checkpoint;
  std::optional<Checkpoint> resume;
  // Enables the step-size feasibility warning.
  std::optional<double> lipschitz_estimate;
};

struct RunResult {
  MetricsTrace trace;
  std::vector<WorkerState> initial_states;
  std::vector<WorkerState> final_states;
};

RunResult run_deprl(const Graph& graph, std::span<const Shard> shards, const RunConfig& cfg,
                    const RunOptions& options = {});
RunResult run_dpsgd(const Graph& graph, std::span<const Shard> shards, const RunConfig& cfg,
                    const RunOptions& options = {});

struct GeneralizationResult {
  std::vector<Head> heads;
  std::vector<double> per_worker_test_loss;
  std::vector<double> per_worker_accuracy;  // classification only
  double average_test_loss = 0.0;
  std::optional<double> average_accuracy;
};

// Fits a fresh head per new worker with `head_steps` SGD steps while phi
// stays frozen, then evaluates on each worker's test set.
GeneralizationResult generalize_to_new_workers(const Representation& frozen_phi, std::span<const Shard> new_shards,
                                               int head_steps, double alpha, Index batch_size, LossKind loss,
                                               std::uint64_t seed);

// Number of outputs a shard's targets imply: classes or regression width.
Index output_dim_of(const Shard& shard);

}  // namespace deprl
