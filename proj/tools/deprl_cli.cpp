#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

#include "deprl/errors.hpp"
#include "deprl/experiment.hpp"
#include "deprl/numfmt.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInvalidSpec = 2;
constexpr int kExitAborted = 3;

void configure_logging() {
  spdlog::set_level(spdlog::level::warn);
  if (const char* level = std::getenv("DEPRL_LOG_LEVEL")) {
    spdlog::set_level(spdlog::level::from_str(level));
  }
}

std::string optional_text(const std::optional<double>& v) { return v ? deprl::format_double(*v) : "-"; }

}  // namespace

int main(int argc, char** argv) {
  configure_logging();

  CLI::App app{"Decentralized training with shared representations and personal heads"};
  app.require_subcommand(1);

  std::string spec_path;
  std::string out_dir;
  unsigned threads = 1;
  long checkpoint_every = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--spec", spec_path, "Experiment spec file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "Output directory (overrides output.dir)");
    sub->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  };

  auto* run = app.add_subcommand("run", "Train every seed and write metrics, summary and checkpoints");
  add_common(run);
  run->add_option("--checkpoint-every", checkpoint_every, "Checkpoint period in rounds (0 disables)")
      ->check(CLI::NonNegativeNumber);

  auto* sweep = app.add_subcommand("sweep-speedup", "Rounds-to-threshold across worker counts");
  add_common(sweep);

  auto* gen = app.add_subcommand("generalize", "Fit heads for new workers on the learned representation");
  add_common(gen);

  std::uint64_t gc_seed = 1;
  int gc_instances = 200;
  double gc_tolerance = 1e-5;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gc->add_option("--seed", gc_seed, "Master seed");
  gc->add_option("--instances", gc_instances, "Random instances")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_tolerance, "Largest accepted relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalidSpec;
  }

  try {
    if (gc->parsed()) {
      const auto rep = deprl::gradcheck(gc_seed, gc_instances, gc_tolerance);
      std::cout << "checks " << rep.checks << "\nworst_relative_error " << deprl::format_double(rep.worst_error)
                << "\nworst_instance " << rep.worst_instance << " seed " << rep.worst_seed << " case "
                << rep.worst_case << '\n';
      if (!rep.failing_seeds.empty()) {
        std::cout << "failing_seeds";
        for (auto s : rep.failing_seeds) std::cout << ' ' << s;
        std::cout << '\n';
        return kExitFailure;
      }
      return kExitOk;
    }

    const deprl::ExperimentSpec spec = deprl::load_spec(spec_path);
    deprl::OutputSettings settings;
    settings.out_dir = out_dir;
    settings.threads = threads;
    settings.checkpoint_every = checkpoint_every;

    if (run->parsed()) {
      const auto report = deprl::run_experiment(spec, settings);
      for (const auto& s : report.seeds) {
        const auto& sum = s.result.trace.summary;
        std::cout << "seed " << s.seed << " rounds " << sum.rounds
                  << " running_avg_m " << deprl::format_double(sum.running_avg_m)
                  << " final_train_loss " << deprl::format_double(sum.final_avg_train_loss)
                  << " final_test_accuracy " << optional_text(sum.final_avg_test_accuracy) << '\n';
      }
      std::cout << "summary " << report.summary_file << '\n';
    } else if (sweep->parsed()) {
      if (spec.sweep_worker_counts.empty()) {
        throw deprl::SpecError(0, "sweep.worker_counts", "at least one worker count is required");
      }
      const auto rows = deprl::sweep_speedup(spec, spec.sweep_worker_counts, spec.sweep_epsilon, settings);
      for (const auto& r : rows) {
        std::cout << "n_workers " << r.n_workers << " median_rounds " << optional_text(r.median_rounds)
                  << " speedup " << optional_text(r.speedup) << '\n';
      }
    } else if (gen->parsed()) {
      for (const auto& g : deprl::generalize(spec, settings)) {
        std::cout << "seed " << g.seed << (g.classification ? " accuracy" : " test_loss") << " learned "
                  << deprl::format_double(g.learned_accuracy) << " random "
                  << deprl::format_double(g.random_accuracy) << '\n';
      }
    }
    return kExitOk;
  } catch (const deprl::SpecError& e) {
    std::cerr << "invalid spec: " << e.what() << '\n';
    return kExitInvalidSpec;
  } catch (const deprl::InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kExitInvalidSpec;
  } catch (const deprl::RunAborted& e) {
    std::cerr << "run aborted: " << e.what() << '\n';
    return kExitAborted;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
