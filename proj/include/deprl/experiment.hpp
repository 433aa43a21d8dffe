#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "deprl/data.hpp"
#include "deprl/engine.hpp"
#include "deprl/metrics.hpp"
#include "deprl/topology.hpp"

namespace deprl {

inline constexpr int kSchemaVersion = 1;

enum class Algorithm { kDeprl, kDpsgd };
enum class TopologyKind { kRing, kComplete, kRandom };
enum class TaskKind { kPlanted, kShardFile };

// Everything one experiment needs. Parsed from the flat `key = value`
// format described in docs/spec_format.md.
struct ExperimentSpec {
  Algorithm algorithm = Algorithm::kDeprl;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "out";

  TopologyKind topology = TopologyKind::kRing;
  double edge_prob = 0.5;
  std::optional<std::uint64_t> topology_seed;  // defaults to the run seed

  TaskKind task = TaskKind::kPlanted;
  std::string shard_path;
  PlantedTaskOptions planted;
  std::optional<std::uint64_t> task_seed;  // defaults to the run seed

  RunConfig train;
  std::optional<Index> model_z;  // defaults to task.z for planted tasks
  std::optional<int> head_epochs;

  std::optional<double> theory_lipschitz;
  std::optional<double> theory_sigma;
  std::optional<double> theory_varsigma;
  bool estimate_constants = false;
  int probes = 16;
  double fstar = 0.0;

  long checkpoint_every = 0;

  std::vector<std::size_t> sweep_worker_counts;
  double sweep_epsilon = 0.1;
  TraceField sweep_field = TraceField::kMK;

  std::size_t new_workers = 8;
  int head_steps = 200;
  double generalize_alpha = 0.1;

  bool operator==(const ExperimentSpec&) const = default;
};

// Invalid spec text or values. line() is 0 when the problem is not tied to
// one line (e.g. a missing referenced file).
class SpecError : public std::runtime_error {
 public:
  SpecError(int line, std::string field, const std::string& detail);
  int line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  int line_;
  std::string field_;
};

ExperimentSpec parse_spec(std::string_view text);
ExperimentSpec load_spec(const std::string& path);
std::string serialize_spec(const ExperimentSpec& spec);

// Materialized inputs for one seed.
struct PreparedRun {
  RunConfig config;
  Graph graph{1, {}};
  std::vector<Shard> shards;
  std::vector<Shard> held_out;  // new workers for the generalization protocol
};

PreparedRun prepare_run(const ExperimentSpec& spec, std::uint64_t seed, std::size_t held_out_workers = 0);

struct OutputSettings {
  std::string out_dir;  // empty: use spec.output_dir
  unsigned threads = 1;
  long checkpoint_every = -1;  // negative: use spec.checkpoint_every
};

struct TheoryReport {
  TheoryConstants constants;
  BoundBreakdown bound;
  BoundBreakdown bound_double_k;
  double k_floor = 0.0;
  StepSizeLimits limits;
  double measured_running_avg_m = 0.0;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  RunResult result;
  std::optional<MixingParams> mixing;
  std::optional<TheoryReport> theory;
  std::string csv_file;
};

struct ExperimentReport {
  std::vector<SeedOutcome> seeds;
  std::string summary_file;
};

// Trains every seed, writing metrics_seed<S>.csv, summary.json and optional
// checkpoints into the output directory.
ExperimentReport run_experiment(const ExperimentSpec& spec, const OutputSettings& settings);

std::string metrics_csv(const MetricsTrace& trace);

struct SpeedupRow {
  std::size_t n_workers = 0;
  std::vector<std::optional<long>> rounds_per_seed;
  std::optional<double> median_rounds;
  std::optional<double> speedup;  // median rounds at the smallest N / median rounds here
};

// Runs each worker count with corollary step sizes and the per-worker data
// budget held fixed. Writes speedup.csv.
std::vector<SpeedupRow> sweep_speedup(const ExperimentSpec& spec, const std::vector<std::size_t>& worker_counts,
                                      double epsilon, const OutputSettings& settings);

struct GradcheckReport {
  int checks = 0;
  double worst_error = 0.0;
  int worst_instance = -1;
  std::uint64_t worst_seed = 0;
  std::string worst_case;  // "<kind>/<loss>"
  std::vector<std::uint64_t> failing_seeds;
};

// Central finite differences (step 1e-5) against the analytic gradients for
// both representation kinds and both losses on each random instance.
GradcheckReport gradcheck(std::uint64_t seed, int instances, double tolerance);

struct GeneralizeSeed {
  std::uint64_t seed = 0;
  double learned_accuracy = 0.0;  // or test loss for regression
  double random_accuracy = 0.0;
  bool classification = true;
};

// Trains on the spec's workers, then fits heads for held-out workers on the
// learned (frozen) representation and on a random one. Writes generalize.json.
std::vector<GeneralizeSeed> generalize(const ExperimentSpec& spec, const OutputSettings& settings);

}  // namespace deprl
