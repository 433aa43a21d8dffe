#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "deprl/data.hpp"
#include "deprl/state.hpp"
#include "deprl/topology.hpp"

namespace deprl {

struct MetricsRecord {
  long round = 0;
  double grad_phi_sq = 0.0;    // ||grad_phi f(phi_bar(k), {theta_i(k+1)})||^2
  double grad_theta_sq = 0.0;  // ||grad_theta f(phi_bar(k), {theta_i(k)})||^2
  double consensus_err = 0.0;  // (1/N) sum ||phi_i(k) - phi_bar(k)||^2
  double m_k = 0.0;
  double running_avg_m = 0.0;  // mean of m_k over records so far
  double avg_train_loss = 0.0;
  std::optional<double> avg_test_accuracy;  // classification only

  bool operator==(const MetricsRecord&) const = default;
};

struct TraceSummary {
  long rounds = 0;
  double running_avg_m = 0.0;
  double initial_avg_train_loss = 0.0;
  double final_avg_train_loss = 0.0;
  double final_avg_test_loss = 0.0;
  std::optional<double> final_avg_test_accuracy;
  double wall_seconds = 0.0;
};

struct MetricsTrace {
  std::vector<MetricsRecord> records;
  TraceSummary summary;
};

// How the per-worker head gradients are folded into one number.
enum class HeadGradNorm {
  kNormOfMean,    // ||(1/N) sum_i grad_theta F_i||^2
  kMeanOfNorms,   // (1/N) sum_i ||grad_theta F_i||^2
};

Representation mean_representation(std::span<const WorkerState> states);

double consensus_error(std::span<const WorkerState> states);
double consensus_error(std::span<const Representation> phis);

struct PartialGradNorms {
  double grad_phi_sq = 0.0;
  double grad_theta_sq = 0.0;
};

// Full-batch partial gradients of the global loss at the mean
// representation. The theta term uses the heads in `states` (round start);
// the phi term uses `heads_after` (after the round's head update).
PartialGradNorms global_partial_grads(std::span<const WorkerState> states,
                                      std::span<const Head> heads_after, std::span<const Shard> shards,
                                      LossKind loss, HeadGradNorm mode = HeadGradNorm::kNormOfMean);
PartialGradNorms global_partial_grads(std::span<const WorkerState> states, std::span<const Shard> shards,
                                      LossKind loss, HeadGradNorm mode = HeadGradNorm::kNormOfMean);

double m_of_k(double grad_phi_sq, double grad_theta_sq, double consensus_err, double alpha, int tau,
              double beta);

enum class ConstantSource { kUserSupplied, kEmpiricallyEstimated };

struct TheoryConstants {
  double lipschitz_l = 0.0;
  double sigma = 0.0;
  double varsigma = 0.0;
  ConstantSource source = ConstantSource::kUserSupplied;
};

struct BoundBreakdown {
  double vanishing = 0.0;        // 4 (f0 - f*) / (K beta)
  double sampling_phi = 0.0;     // 2 beta L sigma^2 / N
  double local_drift = 0.0;      // 12 alpha^3 L^2 tau (tau-1)(6 tau+1) sigma^2 / beta
  double head_noise = 0.0;       // 2 alpha^2 tau L sigma^2 / beta
  double consensus_noise = 0.0;  // 2 beta (1 + 1/L^2) sigma^2 / (3N)
  double heterogeneity = 0.0;    // 2 beta (1 + 1/L^2) varsigma^2 / N
  double total = 0.0;
  bool indicative_only = false;  // constants were estimated, not certified
};

// Right-hand side of the convergence bound on (1/K) sum_k E[M(k)].
// The mixing constants do not enter the expression; they only gate the
// step-size conditions reported by step_size_limits().
BoundBreakdown theorem_bound(double f0, double fstar, const TheoryConstants& constants,
                             const MixingParams& mix, std::size_t n_workers, long k_rounds, double alpha,
                             double beta, int tau);

struct StepSizeLimits {
  double alpha_max = 0.0;
  double beta_max = 0.0;
};

// alpha <= 1 / (tau L (1 + 36 tau^2));
// beta <= min(1/L, N L^2 / (2 L^2 + 2), (1 - q) / (3 sqrt(2) C L N)).
StepSizeLimits step_size_limits(double lipschitz_l, const MixingParams& mix, std::size_t n_workers, int tau);

// Empirical lower bounds on L, sigma and varsigma at the given states.
TheoryConstants estimate_constants(std::span<const WorkerState> states, std::span<const Shard> shards,
                                   LossKind loss, Index batch_size, int probes, std::uint64_t seed);

Eigen::MatrixXd cosine_similarity_matrix(std::span<const Eigen::VectorXd> vectors);

enum class TraceField { kMK, kAvgTrainLoss };

// Round index of the first record whose running average of `field` is
// <= epsilon, or nullopt.
std::optional<long> rounds_to_threshold(const MetricsTrace& trace, double epsilon, TraceField field);

struct AccuracyReport {
  std::vector<double> per_worker;
  double average = 0.0;
};

// Each worker evaluated with its own (phi_i, theta_i) on its own test set.
AccuracyReport accuracy(std::span<const WorkerState> states, std::span<const Shard> shards, LossKind loss);

// Unweighted mean over workers of the full train (or test) loss at their own parameters.
double average_train_loss(std::span<const WorkerState> states, std::span<const Shard> shards, LossKind loss);
double average_test_loss(std::span<const WorkerState> states, std::span<const Shard> shards, LossKind loss);

}  // namespace deprl
