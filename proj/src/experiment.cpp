#include "deprl/experiment.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <json.hpp>
#include <set>
#include <sstream>

#include "deprl/checkpoint.hpp"
#include "deprl/errors.hpp"
#include "deprl/numfmt.hpp"
#include "deprl/rng.hpp"

namespace deprl {

namespace fs = std::filesystem;
using nlohmann::json;

SpecError::SpecError(int line, std::string field, const std::string& detail)
    : std::runtime_error((line > 0 ? "line " + std::to_string(line) + ": " : std::string()) +
                         (field.empty() ? std::string() : "field '" + field + "': ") + detail),
      line_(line),
      field_(std::move(field)) {}

// ---------------------------------------------------------------------------
// Spec grammar

namespace {

struct Context {
  int line;
  const std::string& key;
  [[noreturn]] void fail(const std::string& detail) const { throw SpecError(line, key, detail); }
};

double as_real(const std::string& v, const Context& ctx) {
  auto r = parse_double(v);
  if (!r || !std::isfinite(*r)) ctx.fail("expected a finite real number, got '" + v + "'");
  return *r;
}

long long as_int(const std::string& v, const Context& ctx, long long min_value) {
  auto r = parse_int(v);
  if (!r) ctx.fail("expected an integer, got '" + v + "'");
  if (*r < min_value) ctx.fail("must be >= " + std::to_string(min_value));
  return *r;
}

std::uint64_t as_seed(const std::string& v, const Context& ctx) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size() || v.empty()) ctx.fail("expected an unsigned integer seed");
  return out;
}

bool as_bool(const std::string& v, const Context& ctx) {
  if (v == "true") return true;
  if (v == "false") return false;
  ctx.fail("expected true or false");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? std::string() : item.substr(b, e - b + 1));
  }
  return out;
}

template <typename E>
E as_enum(const std::string& v, const Context& ctx, const std::vector<std::pair<const char*, E>>& names) {
  std::string options;
  for (const auto& [name, value] : names) {
    if (v == name) return value;
    options += options.empty() ? name : std::string(", ") + name;
  }
  ctx.fail("unknown value '" + v + "' (expected one of: " + options + ")");
}

template <typename E>
std::string enum_name(E value, const std::vector<std::pair<const char*, E>>& names) {
  for (const auto& [name, v] : names) {
    if (v == value) return name;
  }
  return "?";
}

const std::vector<std::pair<const char*, Algorithm>> kAlgorithms{{"deprl", Algorithm::kDeprl},
                                                                 {"dpsgd", Algorithm::kDpsgd}};
const std::vector<std::pair<const char*, TopologyKind>> kTopologies{
    {"ring", TopologyKind::kRing}, {"complete", TopologyKind::kComplete}, {"random", TopologyKind::kRandom}};
const std::vector<std::pair<const char*, TaskKind>> kTasks{{"planted", TaskKind::kPlanted},
                                                           {"shard_file", TaskKind::kShardFile}};
const std::vector<std::pair<const char*, TargetKind>> kTargets{{"regression", TargetKind::kRegression},
                                                               {"classification", TargetKind::kClassification}};
const std::vector<std::pair<const char*, RepresentationKind>> kRepresentations{
    {"linear", RepresentationKind::kLinear}, {"nonlinear", RepresentationKind::kOneHiddenTanh}};
const std::vector<std::pair<const char*, LossKind>> kLosses{{"squared", LossKind::kSquared},
                                                            {"cross_entropy", LossKind::kCrossEntropy}};
const std::vector<std::pair<const char*, ScheduleKind>> kSchedules{
    {"constant", ScheduleKind::kConstant}, {"decay", ScheduleKind::kDecay}, {"corollary", ScheduleKind::kCorollary}};
const std::vector<std::pair<const char*, HeadGradNorm>> kHeadNorms{{"norm_of_mean", HeadGradNorm::kNormOfMean},
                                                                   {"mean_of_norms", HeadGradNorm::kMeanOfNorms}};
const std::vector<std::pair<const char*, TraceField>> kFields{{"m_k", TraceField::kMK},
                                                              {"avg_train_loss", TraceField::kAvgTrainLoss}};

struct Field {
  const char* key;
  std::function<void(ExperimentSpec&, const std::string&, const Context&)> set;
  std::function<std::optional<std::string>(const ExperimentSpec&)> get;
};

std::string real_str(double v) { return format_double(v); }

template <typename T>
std::optional<std::string> opt_str(const std::optional<T>& v) {
  if (!v) return std::nullopt;
  if constexpr (std::is_floating_point_v<T>) {
    return format_double(*v);
  } else {
    return std::to_string(*v);
  }
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      {"schema_version",
       [](ExperimentSpec&, const std::string& v, const Context& c) {
         if (as_int(v, c, 0) != kSchemaVersion) c.fail("unsupported schema_version (expected 1)");
       },
       [](const ExperimentSpec&) { return std::optional<std::string>(std::to_string(kSchemaVersion)); }},
      {"algorithm", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.algorithm = as_enum(v, c, kAlgorithms); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.algorithm, kAlgorithms)); }},
      {"seeds",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.seeds.clear();
         for (const auto& item : split_list(v)) s.seeds.push_back(as_seed(item, c));
         if (s.seeds.empty()) c.fail("at least one seed is required");
       },
       [](const ExperimentSpec& s) {
         std::string out;
         for (auto seed : s.seeds) out += (out.empty() ? "" : ", ") + std::to_string(seed);
         return std::optional(out);
       }},
      {"output.dir", [](ExperimentSpec& s, const std::string& v, const Context& c) {
         if (v.empty()) c.fail("must not be empty");
         s.output_dir = v;
       },
       [](const ExperimentSpec& s) { return std::optional(s.output_dir); }},
      {"topology.kind", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.topology = as_enum(v, c, kTopologies); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.topology, kTopologies)); }},
      {"topology.edge_prob",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.edge_prob = as_real(v, c);
         if (!(s.edge_prob > 0.0 && s.edge_prob <= 1.0)) c.fail("must lie in (0, 1]");
       },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.edge_prob)); }},
      {"topology.seed", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.topology_seed = as_seed(v, c); },
       [](const ExperimentSpec& s) { return opt_str(s.topology_seed); }},
      {"task.kind", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.task = as_enum(v, c, kTasks); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.task, kTasks)); }},
      {"task.path", [](ExperimentSpec& s, const std::string& v, const Context&) { s.shard_path = v; },
       [](const ExperimentSpec& s) { return s.shard_path.empty() ? std::nullopt : std::optional(s.shard_path); }},
      {"task.n_workers",
       [](ExperimentSpec& s, const std::string& v, const Context& c) { s.planted.n_workers = static_cast<std::size_t>(as_int(v, c, 2)); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.planted.n_workers)); }},
      {"task.d", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.planted.input_dim = as_int(v, c, 1); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.planted.input_dim)); }},
      {"task.z", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.planted.feature_dim = as_int(v, c, 1); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.planted.feature_dim)); }},
      {"task.samples_per_worker",
       [](ExperimentSpec& s, const std::string& v, const Context& c) { s.planted.samples_per_worker = as_int(v, c, 2); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.planted.samples_per_worker)); }},
      {"task.noise_std",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.planted.noise_std = as_real(v, c);
         if (s.planted.noise_std < 0.0) c.fail("must be non-negative");
       },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.planted.noise_std)); }},
      {"task.heterogeneity",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.planted.heterogeneity = as_real(v, c);
         if (s.planted.heterogeneity < 0.0 || s.planted.heterogeneity > 1.0) c.fail("must lie in [0, 1]");
       },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.planted.heterogeneity)); }},
      {"task.target", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.planted.target = as_enum(v, c, kTargets); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.planted.target, kTargets)); }},
      {"task.outputs", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.planted.output_dim = as_int(v, c, 1); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.planted.output_dim)); }},
      {"task.seed", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.task_seed = as_seed(v, c); },
       [](const ExperimentSpec& s) { return opt_str(s.task_seed); }},
      {"model.kind",
       [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.representation = as_enum(v, c, kRepresentations); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.train.representation, kRepresentations)); }},
      {"model.z", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.model_z = as_int(v, c, 1); },
       [](const ExperimentSpec& s) { return opt_str(s.model_z); }},
      {"model.hidden", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.hidden_dim = as_int(v, c, 0); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.train.hidden_dim)); }},
      {"train.alpha",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.train.alpha = as_real(v, c);
         if (s.train.alpha < 0.0) c.fail("must be non-negative");
       },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.train.alpha)); }},
      {"train.beta",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.train.beta = as_real(v, c);
         if (s.train.beta < 0.0) c.fail("must be non-negative");
       },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.train.beta)); }},
      {"train.tau", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.tau = static_cast<int>(as_int(v, c, 1)); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.train.tau)); }},
      {"train.head_epochs", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.head_epochs = static_cast<int>(as_int(v, c, 1)); },
       [](const ExperimentSpec& s) { return opt_str(s.head_epochs); }},
      {"train.rounds", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.rounds = static_cast<long>(as_int(v, c, 0)); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.train.rounds)); }},
      {"train.batch_size", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.batch_size = as_int(v, c, 1); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.train.batch_size)); }},
      {"train.loss", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.loss = as_enum(v, c, kLosses); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.train.loss, kLosses)); }},
      {"train.schedule", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.schedule = as_enum(v, c, kSchedules); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.train.schedule, kSchedules)); }},
      {"train.decay",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.train.decay = as_real(v, c);
         if (!(s.train.decay > 0.0 && s.train.decay <= 1.0)) c.fail("must lie in (0, 1]");
       },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.train.decay)); }},
      {"train.diagnostic_stride",
       [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.diagnostic_stride = static_cast<long>(as_int(v, c, 1)); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.train.diagnostic_stride)); }},
      {"train.head_grad_norm",
       [](ExperimentSpec& s, const std::string& v, const Context& c) { s.train.head_grad_norm = as_enum(v, c, kHeadNorms); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.train.head_grad_norm, kHeadNorms)); }},
      {"theory.lipschitz",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.theory_lipschitz = as_real(v, c);
         if (*s.theory_lipschitz <= 0.0) c.fail("must be positive");
       },
       [](const ExperimentSpec& s) { return opt_str(s.theory_lipschitz); }},
      {"theory.sigma",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.theory_sigma = as_real(v, c);
         if (*s.theory_sigma < 0.0) c.fail("must be non-negative");
       },
       [](const ExperimentSpec& s) { return opt_str(s.theory_sigma); }},
      {"theory.varsigma",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.theory_varsigma = as_real(v, c);
         if (*s.theory_varsigma < 0.0) c.fail("must be non-negative");
       },
       [](const ExperimentSpec& s) { return opt_str(s.theory_varsigma); }},
      {"theory.estimate", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.estimate_constants = as_bool(v, c); },
       [](const ExperimentSpec& s) { return std::optional<std::string>(s.estimate_constants ? "true" : "false"); }},
      {"theory.probes", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.probes = static_cast<int>(as_int(v, c, 2)); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.probes)); }},
      {"theory.fstar", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.fstar = as_real(v, c); },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.fstar)); }},
      {"checkpoint.every",
       [](ExperimentSpec& s, const std::string& v, const Context& c) { s.checkpoint_every = static_cast<long>(as_int(v, c, 0)); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.checkpoint_every)); }},
      {"sweep.worker_counts",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.sweep_worker_counts.clear();
         for (const auto& item : split_list(v)) {
           if (item.empty()) continue;
           s.sweep_worker_counts.push_back(static_cast<std::size_t>(as_int(item, c, 2)));
         }
       },
       [](const ExperimentSpec& s) -> std::optional<std::string> {
         if (s.sweep_worker_counts.empty()) return std::nullopt;
         std::string out;
         for (auto n : s.sweep_worker_counts) out += (out.empty() ? "" : ", ") + std::to_string(n);
         return out;
       }},
      {"sweep.epsilon",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.sweep_epsilon = as_real(v, c);
         if (s.sweep_epsilon <= 0.0) c.fail("must be positive");
       },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.sweep_epsilon)); }},
      {"sweep.field", [](ExperimentSpec& s, const std::string& v, const Context& c) { s.sweep_field = as_enum(v, c, kFields); },
       [](const ExperimentSpec& s) { return std::optional(enum_name(s.sweep_field, kFields)); }},
      {"generalize.new_workers",
       [](ExperimentSpec& s, const std::string& v, const Context& c) { s.new_workers = static_cast<std::size_t>(as_int(v, c, 1)); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.new_workers)); }},
      {"generalize.head_steps",
       [](ExperimentSpec& s, const std::string& v, const Context& c) { s.head_steps = static_cast<int>(as_int(v, c, 0)); },
       [](const ExperimentSpec& s) { return std::optional(std::to_string(s.head_steps)); }},
      {"generalize.alpha",
       [](ExperimentSpec& s, const std::string& v, const Context& c) {
         s.generalize_alpha = as_real(v, c);
         if (s.generalize_alpha < 0.0) c.fail("must be non-negative");
       },
       [](const ExperimentSpec& s) { return std::optional(real_str(s.generalize_alpha)); }},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void validate_spec(const ExperimentSpec& s) {
  if (s.seeds.empty()) throw SpecError(0, "seeds", "at least one seed is required");
  if (s.task == TaskKind::kShardFile) {
    if (s.shard_path.empty()) throw SpecError(0, "task.path", "shard_file tasks need a path");
    if (!fs::exists(s.shard_path)) throw SpecError(0, "task.path", "file does not exist: " + s.shard_path);
  } else {
    const Index z = s.planted.feature_dim;
    if (z > s.planted.input_dim) throw SpecError(0, "task.z", "must not exceed task.d");
    if (s.planted.target == TargetKind::kClassification && s.planted.output_dim < 2) {
      throw SpecError(0, "task.outputs", "classification needs at least 2 classes");
    }
    if (s.planted.target == TargetKind::kClassification && s.train.loss != LossKind::kCrossEntropy) {
      throw SpecError(0, "train.loss", "classification tasks need cross_entropy");
    }
    if (s.planted.target == TargetKind::kRegression && s.train.loss != LossKind::kSquared) {
      throw SpecError(0, "train.loss", "regression tasks need squared loss");
    }
    if (s.model_z && *s.model_z > s.planted.input_dim) throw SpecError(0, "model.z", "must not exceed task.d");
  }
  if (s.train.representation == RepresentationKind::kOneHiddenTanh && s.train.hidden_dim < 1) {
    throw SpecError(0, "model.hidden", "nonlinear representations need model.hidden >= 1");
  }
}

}  // namespace

ExperimentSpec parse_spec(std::string_view text) {
  ExperimentSpec spec;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SpecError(line_no, "", "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
    if (it == table.end()) throw SpecError(line_no, key, "unknown field");
    if (!seen.insert(key).second) throw SpecError(line_no, key, "duplicate field");
    it->set(spec, value, Context{line_no, key});
  }
  validate_spec(spec);
  return spec;
}

ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open spec");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str());
}

std::string serialize_spec(const ExperimentSpec& spec) {
  std::string out;
  for (const auto& f : fields()) {
    if (auto v = f.get(spec)) out += std::string(f.key) + " = " + *v + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration

PreparedRun prepare_run(const ExperimentSpec& spec, std::uint64_t seed, std::size_t held_out_workers) {
  PreparedRun run;
  run.config = spec.train;
  run.config.seed = seed;

  if (spec.task == TaskKind::kPlanted) {
    PlantedTaskOptions opts = spec.planted;
    opts.seed = spec.task_seed.value_or(seed);
    opts.n_workers += held_out_workers;
    PlantedTask task = generate_planted(opts);
    run.shards.assign(task.shards.begin(), task.shards.begin() + static_cast<std::ptrdiff_t>(spec.planted.n_workers));
    run.held_out.assign(task.shards.begin() + static_cast<std::ptrdiff_t>(spec.planted.n_workers), task.shards.end());
    run.config.feature_dim = spec.model_z.value_or(spec.planted.feature_dim);
  } else {
    auto all = load_shards(spec.shard_path);
    if (all.size() < held_out_workers + 2) throw SpecError(0, "task.path", "not enough shards in file");
    run.shards.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(held_out_workers));
    run.held_out.assign(all.end() - static_cast<std::ptrdiff_t>(held_out_workers), all.end());
    run.config.feature_dim = spec.model_z.value_or(std::min<Index>(3, run.shards.front().train.input_dim()));
  }
  if (spec.head_epochs) run.config.tau = head_steps_for_epochs(run.shards, run.config.batch_size, *spec.head_epochs);

  const std::size_t n = run.shards.size();
  const std::uint64_t topo_seed = spec.topology_seed.value_or(seed);
  switch (spec.topology) {
    case TopologyKind::kRing:
      run.graph = build_ring(n);
      break;
    case TopologyKind::kComplete:
      run.graph = build_complete(n);
      break;
    case TopologyKind::kRandom:
      run.graph = build_random_connected(n, spec.edge_prob, topo_seed);
      break;
  }
  run.config.validate();
  return run;
}

namespace {

std::string csv_field(double v) { return format_double(v); }

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << content;
  out.flush();
  if (!out) throw IoError(path.string(), "write failed");
}

fs::path ensure_dir(const ExperimentSpec& spec, const OutputSettings& settings) {
  const fs::path dir = settings.out_dir.empty() ? fs::path(spec.output_dir) : fs::path(settings.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create output directory: " + ec.message());
  return dir;
}

json json_real(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json json_opt(const std::optional<double>& v) { return v ? json_real(*v) : json(nullptr); }

json graph_json(const Graph& g, const ConsensusMatrix& p) {
  json edges = json::array();
  for (const auto& [i, j] : g.edges()) edges.push_back({i, j});
  json weights = json::array();
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p.size(); ++j) weights.push_back(p(i, j));
  }
  return {{"n_workers", g.size()}, {"edges", edges}, {"weights", weights}};
}

json bound_json(const BoundBreakdown& b) {
  return {{"vanishing", json_real(b.vanishing)},
          {"sampling_phi", json_real(b.sampling_phi)},
          {"local_drift", json_real(b.local_drift)},
          {"head_noise", json_real(b.head_noise)},
          {"consensus_noise", json_real(b.consensus_noise)},
          {"heterogeneity", json_real(b.heterogeneity)},
          {"total", json_real(b.total)},
          {"indicative_only", b.indicative_only}};
}

json config_json(const ExperimentSpec& spec) {
  json out = json::object();
  std::istringstream in(serialize_spec(spec));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

std::pair<double, double> mean_and_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

std::optional<TheoryReport> theory_report(const ExperimentSpec& spec, const PreparedRun& run, const RunResult& result,
                                          const std::optional<MixingParams>& mix) {
  const bool supplied = spec.theory_lipschitz && spec.theory_sigma && spec.theory_varsigma;
  if (!supplied && !spec.estimate_constants) return std::nullopt;
  TheoryReport rep;
  if (supplied) {
    rep.constants = {*spec.theory_lipschitz, *spec.theory_sigma, *spec.theory_varsigma, ConstantSource::kUserSupplied};
  } else {
    rep.constants = estimate_constants(result.initial_states, run.shards, run.config.loss, run.config.batch_size,
                                       spec.probes, run.config.seed);
  }
  const std::size_t n = run.shards.size();
  const long k = std::max(1L, run.config.rounds);
  const StepSizes lr = step_sizes_at(run.config, 0, n);
  const MixingParams m = mix.value_or(MixingParams{});
  const double f0 = result.trace.summary.initial_avg_train_loss;
  rep.bound = theorem_bound(f0, spec.fstar, rep.constants, m, n, k, lr.alpha, lr.beta, run.config.tau);
  rep.bound_double_k = theorem_bound(f0, spec.fstar, rep.constants, m, n, 2 * k, lr.alpha, lr.beta, run.config.tau);
  if (mix) {
    rep.k_floor = corollary_k_floor(n, m.big_c, m.q, rep.constants.lipschitz_l);
    rep.limits = step_size_limits(rep.constants.lipschitz_l, m, n, run.config.tau);
  }
  rep.measured_running_avg_m = result.trace.summary.running_avg_m;
  return rep;
}

}  // namespace

std::string metrics_csv(const MetricsTrace& trace) {
  std::string out = "# schema_version: " + std::to_string(kSchemaVersion) + "\n";
  out += "k,grad_phi_sq,grad_theta_sq,consensus_err,m_k,running_avg_m,avg_train_loss,avg_test_accuracy\n";
  for (const auto& r : trace.records) {
    out += std::to_string(r.round) + ',' + csv_field(r.grad_phi_sq) + ',' + csv_field(r.grad_theta_sq) + ',' +
           csv_field(r.consensus_err) + ',' + csv_field(r.m_k) + ',' + csv_field(r.running_avg_m) + ',' +
           csv_field(r.avg_train_loss) + ',' + (r.avg_test_accuracy ? csv_field(*r.avg_test_accuracy) : "") + '\n';
  }
  return out;
}

ExperimentReport run_experiment(const ExperimentSpec& spec, const OutputSettings& settings) {
  const fs::path dir = ensure_dir(spec, settings);
  const long checkpoint_every = settings.checkpoint_every >= 0 ? settings.checkpoint_every : spec.checkpoint_every;

  ExperimentReport report;
  json seeds_json = json::array();
  std::map<std::string, std::vector<double>> columns;

  for (std::uint64_t seed : spec.seeds) {
    const PreparedRun run = prepare_run(spec, seed);
    const ConsensusMatrix p_mat = metropolis_weights(run.graph);

    SeedOutcome outcome;
    outcome.seed = seed;
    try {
      outcome.mixing = mixing_params(p_mat);
    } catch (const InvalidArgument&) {
      outcome.mixing.reset();
    }

    RunOptions opts;
    opts.threads = settings.threads;
    opts.checkpoint_every = checkpoint_every;
    opts.lipschitz_estimate = spec.theory_lipschitz;
    opts.on_checkpoint = [&](const Checkpoint& cp) {
      save_checkpoint(cp, (dir / ("checkpoint_seed" + std::to_string(seed) + "_round" +
                                  std::to_string(cp.next_round) + ".txt"))
                              .string());
    };
    spdlog::info("seed {}: {} workers, {} rounds", seed, run.shards.size(), run.config.rounds);
    outcome.result = spec.algorithm == Algorithm::kDeprl ? run_deprl(run.graph, run.shards, run.config, opts)
                                                         : run_dpsgd(run.graph, run.shards, run.config, opts);
    outcome.theory = theory_report(spec, run, outcome.result, outcome.mixing);

    outcome.csv_file = "metrics_seed" + std::to_string(seed) + ".csv";
    write_file(dir / outcome.csv_file, metrics_csv(outcome.result.trace));

    const TraceSummary& s = outcome.result.trace.summary;
    json entry = {{"seed", seed},
                  {"metrics_csv", outcome.csv_file},
                  {"rounds", s.rounds},
                  {"running_avg_m", json_real(s.running_avg_m)},
                  {"initial_avg_train_loss", json_real(s.initial_avg_train_loss)},
                  {"final_avg_train_loss", json_real(s.final_avg_train_loss)},
                  {"final_avg_test_loss", json_real(s.final_avg_test_loss)},
                  {"final_avg_test_accuracy", json_opt(s.final_avg_test_accuracy)},
                  {"wall_seconds", s.wall_seconds},
                  {"graph", graph_json(run.graph, p_mat)}};
    entry["mixing"] = outcome.mixing ? json{{"p", outcome.mixing->p}, {"q", outcome.mixing->q}, {"C", json_real(outcome.mixing->big_c)}}
                                     : json(nullptr);
    if (outcome.theory) {
      const TheoryReport& t = *outcome.theory;
      entry["theory"] = {
          {"constants",
           {{"lipschitz_l", t.constants.lipschitz_l},
            {"sigma", t.constants.sigma},
            {"varsigma", t.constants.varsigma},
            {"source", t.constants.source == ConstantSource::kUserSupplied ? "user-supplied" : "empirically-estimated"}}},
          {"bound", bound_json(t.bound)},
          {"bound_double_k", bound_json(t.bound_double_k)},
          {"k_floor", json_real(t.k_floor)},
          {"alpha_max", json_real(t.limits.alpha_max)},
          {"beta_max", json_real(t.limits.beta_max)},
          {"measured_running_avg_m", json_real(t.measured_running_avg_m)},
          {"bound_holds", t.measured_running_avg_m <= t.bound.total}};
    } else {
      entry["theory"] = nullptr;
    }
    seeds_json.push_back(entry);

    columns["running_avg_m"].push_back(s.running_avg_m);
    columns["final_avg_train_loss"].push_back(s.final_avg_train_loss);
    columns["final_avg_test_loss"].push_back(s.final_avg_test_loss);
    if (s.final_avg_test_accuracy) columns["final_avg_test_accuracy"].push_back(*s.final_avg_test_accuracy);
    report.seeds.push_back(std::move(outcome));
  }

  json aggregate = json::object();
  for (const auto& [name, values] : columns) {
    const auto [mean, sd] = mean_and_std(values);
    aggregate[name] = {{"mean", json_real(mean)}, {"std", json_real(sd)}};
  }
  json summary = {{"schema_version", kSchemaVersion},
                  {"algorithm", enum_name(spec.algorithm, kAlgorithms)},
                  {"config", config_json(spec)},
                  {"seed_count", spec.seeds.size()},
                  {"seeds", seeds_json},
                  {"aggregate", aggregate}};
  report.summary_file = (dir / "summary.json").string();
  write_file(report.summary_file, summary.dump(2) + "\n");
  return report;
}

std::vector<SpeedupRow> sweep_speedup(const ExperimentSpec& spec, const std::vector<std::size_t>& worker_counts,
                                      double epsilon, const OutputSettings& settings) {
  if (worker_counts.empty()) throw SpecError(0, "sweep.worker_counts", "at least one worker count is required");
  if (!(epsilon > 0.0)) throw SpecError(0, "sweep.epsilon", "must be positive");
  if (spec.task != TaskKind::kPlanted) throw SpecError(0, "task.kind", "sweep-speedup needs a planted task");
  const fs::path dir = ensure_dir(spec, settings);

  std::vector<SpeedupRow> rows;
  for (std::size_t n : worker_counts) {
    ExperimentSpec s = spec;
    s.planted.n_workers = n;
    s.train.schedule = ScheduleKind::kCorollary;
    SpeedupRow row;
    row.n_workers = n;
    std::vector<double> reached;
    for (std::uint64_t seed : spec.seeds) {
      const PreparedRun run = prepare_run(s, seed);
      RunOptions opts;
      opts.threads = settings.threads;
      const RunResult r = s.algorithm == Algorithm::kDeprl ? run_deprl(run.graph, run.shards, run.config, opts)
                                                           : run_dpsgd(run.graph, run.shards, run.config, opts);
      const auto k = rounds_to_threshold(r.trace, epsilon, spec.sweep_field);
      row.rounds_per_seed.push_back(k);
      spdlog::info("N={} seed={} rounds_to_threshold={}", n, seed, k ? std::to_string(*k) : "absent");
    }
    // Median with "never reached" ordered above every finite value.
    std::vector<double> sorted;
    for (const auto& k : row.rounds_per_seed) {
      sorted.push_back(k ? static_cast<double>(*k) : std::numeric_limits<double>::infinity());
    }
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    const double median = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    if (std::isfinite(median)) row.median_rounds = median;
    rows.push_back(std::move(row));
  }
  const auto base = rows.front().median_rounds;
  for (auto& row : rows) {
    if (base && row.median_rounds) {
      // Round indices are zero-based; convergence time counts rounds.
      row.speedup = (*base + 1.0) / (*row.median_rounds + 1.0);
    }
  }

  std::string csv = "# schema_version: " + std::to_string(kSchemaVersion) + "\n";
  csv += "n_workers,median_rounds_to_threshold,speedup";
  for (std::size_t i = 0; i < spec.seeds.size(); ++i) csv += ",rounds_seed" + std::to_string(spec.seeds[i]);
  csv += '\n';
  for (const auto& row : rows) {
    csv += std::to_string(row.n_workers) + ',' + (row.median_rounds ? csv_field(*row.median_rounds) : "") + ',' +
           (row.speedup ? csv_field(*row.speedup) : "");
    for (const auto& k : row.rounds_per_seed) csv += ',' + (k ? std::to_string(*k) : std::string());
    csv += '\n';
  }
  write_file(dir / "speedup.csv", csv);
  return rows;
}

GradcheckReport gradcheck(std::uint64_t seed, int instances, double tolerance) {
  if (instances < 1) throw InvalidArgument("gradcheck needs instances >= 1");
  constexpr double kStep = 1e-5;
  GradcheckReport rep;

  for (int inst = 0; inst < instances; ++inst) {
    const std::uint64_t inst_seed = derive_seed(seed, static_cast<std::uint64_t>(inst), 0, Phase::kProbe);
    for (RepresentationKind kind : {RepresentationKind::kLinear, RepresentationKind::kOneHiddenTanh}) {
      for (LossKind lk : {LossKind::kSquared, LossKind::kCrossEntropy}) {
        Rng rng(inst_seed ^ (static_cast<std::uint64_t>(kind) << 8) ^ static_cast<std::uint64_t>(lk));
        auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
        const Index d = pick(2, 6);
        const Index z = pick(1, d);
        const Index h = pick(1, 5);
        const Index c = lk == LossKind::kCrossEntropy ? pick(2, 4) : pick(1, 3);
        const Index m = pick(1, 5);
        std::normal_distribution<double> normal(0.0, 1.0);

        Representation phi = Representation::zeros(kind, d, z, h);
        for (auto& v : phi.flat()) v = 0.7 * normal(rng);
        Head theta = Head::zeros(c, z);
        for (auto& v : theta.flat()) v = 0.7 * normal(rng);
        Examples batch;
        batch.inputs.resize(m, d);
        for (Index r = 0; r < m; ++r) {
          for (Index k = 0; k < d; ++k) batch.inputs(r, k) = normal(rng);
        }
        if (lk == LossKind::kSquared) {
          batch.targets.resize(m, c);
          for (Index r = 0; r < m; ++r) {
            for (Index k = 0; k < c; ++k) batch.targets(r, k) = normal(rng);
          }
        } else {
          for (Index r = 0; r < m; ++r) batch.labels.push_back(static_cast<int>(pick(0, c - 1)));
        }

        const Gradients g = loss_and_gradients(phi, theta, batch, lk);
        double worst = 0.0;
        auto check = [&](Eigen::VectorXd& params, const Eigen::VectorXd& analytic) {
          for (Index i = 0; i < params.size(); ++i) {
            const double saved = params[i];
            params[i] = saved + kStep;
            const double up = loss(phi, theta, batch, lk);
            params[i] = saved - kStep;
            const double down = loss(phi, theta, batch, lk);
            params[i] = saved;
            const double fd = (up - down) / (2.0 * kStep);
            worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i])));
          }
        };
        check(phi.flat(), g.phi.flat());
        check(theta.flat(), g.theta.flat());
        ++rep.checks;

        if (worst > rep.worst_error || rep.worst_instance < 0) {
          rep.worst_error = worst;
          rep.worst_instance = inst;
          rep.worst_seed = inst_seed;
          rep.worst_case = to_string(kind) + "/" + to_string(lk);
        }
        if (worst > tolerance &&
            (rep.failing_seeds.empty() || rep.failing_seeds.back() != inst_seed)) {
          rep.failing_seeds.push_back(inst_seed);
        }
      }
    }
  }
  return rep;
}

std::vector<GeneralizeSeed> generalize(const ExperimentSpec& spec, const OutputSettings& settings) {
  if (spec.new_workers < 1) throw SpecError(0, "generalize.new_workers", "must be >= 1");
  const fs::path dir = ensure_dir(spec, settings);
  std::vector<GeneralizeSeed> out;
  json seeds_json = json::array();
  for (std::uint64_t seed : spec.seeds) {
    const PreparedRun run = prepare_run(spec, seed, spec.new_workers);
    RunOptions opts;
    opts.threads = settings.threads;
    const RunResult trained = spec.algorithm == Algorithm::kDeprl ? run_deprl(run.graph, run.shards, run.config, opts)
                                                                  : run_dpsgd(run.graph, run.shards, run.config, opts);
    const Representation learned = mean_representation(trained.final_states);
    Rng rng = substream(seed, 1ull << 41, 0, Phase::kGeneralizeInit);
    const Representation random = Representation::random_init(learned.kind(), learned.input_dim(),
                                                               learned.feature_dim(), learned.hidden_dim(), rng);
    const auto with_learned = generalize_to_new_workers(learned, run.held_out, spec.head_steps, spec.generalize_alpha,
                                                        run.config.batch_size, run.config.loss, seed);
    const auto with_random = generalize_to_new_workers(random, run.held_out, spec.head_steps, spec.generalize_alpha,
                                                       run.config.batch_size, run.config.loss, seed);
    GeneralizeSeed g;
    g.seed = seed;
    g.classification = with_learned.average_accuracy.has_value();
    g.learned_accuracy = g.classification ? *with_learned.average_accuracy : with_learned.average_test_loss;
    g.random_accuracy = g.classification ? *with_random.average_accuracy : with_random.average_test_loss;
    out.push_back(g);
    seeds_json.push_back({{"seed", seed},
                          {"metric", g.classification ? "test_accuracy" : "test_loss"},
                          {"learned_phi", json_real(g.learned_accuracy)},
                          {"random_phi", json_real(g.random_accuracy)},
                          {"per_worker_learned", g.classification ? json(with_learned.per_worker_accuracy)
                                                                  : json(with_learned.per_worker_test_loss)},
                          {"per_worker_random", g.classification ? json(with_random.per_worker_accuracy)
                                                                 : json(with_random.per_worker_test_loss)}});
  }
  json doc = {{"schema_version", kSchemaVersion},
              {"new_workers", spec.new_workers},
              {"head_steps", spec.head_steps},
              {"alpha", spec.generalize_alpha},
              {"seeds", seeds_json}};
  write_file(dir / "generalize.json", doc.dump(2) + "\n");
  return out;
}

}  // namespace deprl
