#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "deprl/experiment.hpp"

using namespace deprl;
namespace fs = std::filesystem;

namespace {

const char* kMinimalSpec = R"(# minimal planted run
schema_version = 1
algorithm = deprl
seeds = 1
task.kind = planted
task.n_workers = 4
task.d = 6
task.z = 2
task.samples_per_worker = 20
train.rounds = 10
train.batch_size = 4
)";

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "deprl_test_experiment" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + DEPRL_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n' ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("spec parsing reads every section") {
  const ExperimentSpec s = parse_spec(R"(
algorithm = dpsgd
seeds = 1, 12, 123
output.dir = results
topology.kind = random
topology.edge_prob = 0.4
topology.seed = 77
task.n_workers = 5
task.d = 9
task.z = 3
task.target = classification
task.outputs = 4
model.kind = nonlinear
model.hidden = 6
train.loss = cross_entropy
train.alpha = 0.2
train.beta = 0.05
train.tau = 3
train.schedule = decay
train.decay = 0.9
theory.lipschitz = 2.5
theory.sigma = 0.1
theory.varsigma = 0.2
sweep.worker_counts = 4, 8
sweep.field = avg_train_loss
generalize.new_workers = 3
)");
  CHECK(s.algorithm == Algorithm::kDpsgd);
  CHECK(s.seeds == std::vector<std::uint64_t>{1, 12, 123});
  CHECK(s.output_dir == "results");
  CHECK(s.topology == TopologyKind::kRandom);
  CHECK(s.edge_prob == 0.4);
  CHECK(s.topology_seed == 77u);
  CHECK(s.planted.target == TargetKind::kClassification);
  CHECK(s.train.representation == RepresentationKind::kOneHiddenTanh);
  CHECK(s.train.hidden_dim == 6);
  CHECK(s.train.schedule == ScheduleKind::kDecay);
  CHECK(s.theory_varsigma == 0.2);
  CHECK(s.sweep_worker_counts == std::vector<std::size_t>{4, 8});
  CHECK(s.sweep_field == TraceField::kAvgTrainLoss);
  CHECK(s.new_workers == 3);
}

TEST_CASE("spec round-trips through serialization") {
  ExperimentSpec s;
  s.algorithm = Algorithm::kDpsgd;
  s.seeds = {3, 1, 4};
  s.topology = TopologyKind::kComplete;
  s.task_seed = 9;
  s.planted.n_workers = 6;
  s.planted.noise_std = 0.1 + 0.2;  // not exactly representable as written
  s.train.alpha = 1.0 / 3.0;
  s.train.rounds = 17;
  s.train.head_grad_norm = HeadGradNorm::kMeanOfNorms;
  s.model_z = 2;
  s.head_epochs = 2;
  s.theory_lipschitz = 1e-7;
  s.estimate_constants = true;
  s.sweep_worker_counts = {2, 4};
  s.sweep_epsilon = 0.125;
  CHECK(parse_spec(serialize_spec(s)) == s);
  const ExperimentSpec defaults;
  CHECK(parse_spec(serialize_spec(defaults)) == defaults);
}

TEST_CASE("spec errors name the line and field") {
  auto error_of = [](const std::string& text) -> SpecError {
    try {
      parse_spec(text);
    } catch (const SpecError& e) {
      return e;
    }
    FAIL("expected a spec error");
    return SpecError(0, "", "");
  };
  SpecError e = error_of("seeds = 1\ntrain.gamma = 3\n");
  CHECK(e.line() == 2);
  CHECK(e.field() == "train.gamma");
  CHECK(std::string(e.what()).find("train.gamma") != std::string::npos);

  e = error_of("train.tau = 2\ntrain.tau = 3\n");
  CHECK(e.line() == 2);
  CHECK(std::string(e.what()).find("duplicate") != std::string::npos);

  CHECK(error_of("train.alpha = fast\n").field() == "train.alpha");
  CHECK(error_of("topology.kind = torus\n").field() == "topology.kind");
  CHECK(error_of("seeds = \n").field() == "seeds");
  CHECK(error_of("just some words\n").line() == 1);
  CHECK(error_of("schema_version = 2\n").field() == "schema_version");
  CHECK(error_of("task.kind = shard_file\ntask.path = /nonexistent/shards.txt\n").field() == "task.path");
  CHECK(error_of("task.d = 3\ntask.z = 4\n").field() == "task.z");
}

TEST_CASE("runs write metrics and a summary into the output directory") {
  const fs::path root = fresh_dir("run");
  const fs::path out = root / "out";
  ExperimentSpec spec = parse_spec(kMinimalSpec);
  spec.seeds = {1, 12};
  spec.estimate_constants = true;
  OutputSettings settings;
  settings.out_dir = out.string();
  const ExperimentReport report = run_experiment(spec, settings);

  // Output hygiene: nothing lands beside the output directory.
  std::set<std::string> root_entries;
  for (const auto& e : fs::directory_iterator(root)) root_entries.insert(e.path().filename().string());
  CHECK(root_entries == std::set<std::string>{"out"});
  std::set<std::string> files;
  for (const auto& e : fs::directory_iterator(out)) files.insert(e.path().filename().string());
  CHECK(files == std::set<std::string>{"metrics_seed1.csv", "metrics_seed12.csv", "summary.json"});

  const std::string csv = read_file(out / "metrics_seed1.csv");
  CHECK(count_lines(csv) == 12);  // schema line, header, 10 rows
  CHECK(csv.rfind("# schema_version: 1\nk,grad_phi_sq,grad_theta_sq,consensus_err,m_k,running_avg_m,avg_train_loss,"
                  "avg_test_accuracy\n0,",
                  0) == 0);

  const auto summary = nlohmann::json::parse(read_file(out / "summary.json"));
  CHECK(summary["schema_version"] == 1);
  CHECK(summary["seeds"].size() == 2);
  CHECK(summary["seed_count"] == 2);
  CHECK(summary["seeds"][0]["graph"]["edges"].size() == 4);
  CHECK(summary["seeds"][0]["mixing"]["p"].get<double>() == doctest::Approx(1.0 / 3.0));
  CHECK(summary["seeds"][0]["theory"]["constants"]["source"] == "empirically-estimated");
  CHECK(summary["aggregate"]["running_avg_m"].contains("std"));
  CHECK(summary["config"]["train.rounds"] == "10");
  CHECK(report.seeds.size() == 2);

  // Rerunning the same spec reproduces the CSV bytes.
  const fs::path again = root / "again";
  settings.out_dir = again.string();
  run_experiment(spec, settings);
  CHECK(read_file(again / "metrics_seed1.csv") == csv);
}

TEST_CASE("checkpoints are written per seed and round") {
  const fs::path out = fresh_dir("checkpoints");
  const ExperimentSpec spec = parse_spec(kMinimalSpec);
  OutputSettings settings;
  settings.out_dir = out.string();
  settings.checkpoint_every = 4;
  run_experiment(spec, settings);
  CHECK(fs::exists(out / "checkpoint_seed1_round4.txt"));
  CHECK(fs::exists(out / "checkpoint_seed1_round8.txt"));
}

TEST_CASE("shard-file tasks train like planted ones") {
  const fs::path out = fresh_dir("shard_file");
  PlantedTaskOptions o;
  o.n_workers = 3;
  o.input_dim = 5;
  o.samples_per_worker = 20;
  save_shards(generate_planted(o).shards, (out / "shards.txt").string());
  const ExperimentSpec spec = parse_spec("task.kind = shard_file\ntask.path = " + (out / "shards.txt").string() +
                                         "\nmodel.z = 2\ntrain.rounds = 3\n");
  const PreparedRun run = prepare_run(spec, 1);
  CHECK(run.shards.size() == 3);
  CHECK(run.config.feature_dim == 2);
  OutputSettings settings;
  settings.out_dir = (out / "run").string();
  CHECK(run_experiment(spec, settings).seeds.size() == 1);
}

TEST_CASE("a single-count sweep reports unit speedup") {
  const fs::path out = fresh_dir("sweep");
  ExperimentSpec spec = parse_spec(kMinimalSpec);
  spec.train.rounds = 50;
  OutputSettings settings;
  settings.out_dir = out.string();
  const auto rows = sweep_speedup(spec, {4}, 10.0, settings);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].speedup == 1.0);
  CHECK(fs::exists(out / "speedup.csv"));
  CHECK_THROWS_AS(sweep_speedup(spec, {}, 1.0, settings), SpecError);
}

TEST_CASE("unreached thresholds are reported as absent") {
  const fs::path out = fresh_dir("sweep_absent");
  ExperimentSpec spec = parse_spec(kMinimalSpec);
  OutputSettings settings;
  settings.out_dir = out.string();
  const auto rows = sweep_speedup(spec, {4, 8}, 1e-30, settings);
  CHECK_FALSE(rows[0].median_rounds);
  CHECK_FALSE(rows[1].speedup);
}

TEST_CASE("gradcheck is reproducible") {
  const GradcheckReport a = gradcheck(5, 1, 1e-5);
  const GradcheckReport b = gradcheck(5, 1, 1e-5);
  CHECK(a.checks == 4);
  CHECK(a.worst_error == b.worst_error);
  CHECK(a.failing_seeds.empty());
  CHECK_FALSE(gradcheck(5, 3, 1e-15).failing_seeds.empty());
  CHECK_THROWS(gradcheck(5, 0, 1e-5));
}

TEST_CASE("generalization report compares learned and random representations") {
  const fs::path out = fresh_dir("generalize");
  ExperimentSpec spec = parse_spec(kMinimalSpec);
  spec.new_workers = 2;
  spec.head_steps = 20;
  OutputSettings settings;
  settings.out_dir = out.string();
  const auto rows = generalize(spec, settings);
  REQUIRE(rows.size() == 1);
  CHECK_FALSE(rows[0].classification);
  const auto doc = nlohmann::json::parse(read_file(out / "generalize.json"));
  CHECK(doc["seeds"][0]["per_worker_learned"].size() == 2);
}

TEST_CASE("command-line exit codes") {
  const fs::path dir = fresh_dir("cli");
  write_file(dir / "ok.spec", kMinimalSpec);
  write_file(dir / "unknown.spec", std::string(kMinimalSpec) + "train.momentum = 0.9\n");
  write_file(dir / "diverge.spec", std::string(kMinimalSpec) + "train.alpha = 1e200\ntrain.beta = 1e200\n");

  SUBCASE("run succeeds") {
    const CliResult r = run_cli("run --spec \"" + (dir / "ok.spec").string() + "\" --out \"" +
                                    (dir / "out").string() + "\" --threads 2",
                                dir);
    CHECK(r.code == 0);
    CHECK(fs::exists(dir / "out" / "metrics_seed1.csv"));
    CHECK(fs::exists(dir / "out" / "summary.json"));
  }
  SUBCASE("unknown field") {
    const CliResult r = run_cli("run --spec \"" + (dir / "unknown.spec").string() + "\"", dir);
    CHECK(r.code == 2);
    CHECK(r.err.find("train.momentum") != std::string::npos);
    CHECK(r.err.find("line 12") != std::string::npos);
  }
  SUBCASE("diverging run") {
    const CliResult r = run_cli("run --spec \"" + (dir / "diverge.spec").string() + "\" --out \"" +
                                    (dir / "diverge").string() + "\"",
                                dir);
    CHECK(r.code == 3);
    CHECK(r.err.find("worker") != std::string::npos);
  }
  SUBCASE("sweep without worker counts") {
    const CliResult r = run_cli("sweep-speedup --spec \"" + (dir / "ok.spec").string() + "\" --out \"" +
                                    (dir / "sweep").string() + "\"",
                                dir);
    CHECK(r.code == 2);
  }
  SUBCASE("gradcheck") {
    const CliResult ok = run_cli("gradcheck --seed 3 --instances 20", dir);
    CHECK(ok.code == 0);
    CHECK(ok.out.find("worst_relative_error") != std::string::npos);
    const CliResult strict = run_cli("gradcheck --seed 3 --instances 2 --tolerance 1e-12", dir);
    CHECK(strict.code == 1);
    CHECK(strict.out.find("failing_seeds") != std::string::npos);
  }
  SUBCASE("missing spec file") {
    CHECK(run_cli("run --spec \"" + (dir / "absent.spec").string() + "\"", dir).code == 2);
  }
}
