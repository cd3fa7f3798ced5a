// ngkf: run experiment configs and list the available experiment kinds.

#include "config.hpp"
#include "experiments.hpp"
#include "output.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <thread>
#include <vector>

namespace {

using namespace ngkf::app;

struct RunRequest {
  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::string out_dir;
  int jobs = 1;
};

struct JobResult {
  int exit_code = kExitError;
  std::string message;
};

std::string resolve(const std::string& out_dir, const std::string& file) {
  const std::filesystem::path p(file);
  return p.is_absolute() ? file : (std::filesystem::path(out_dir) / p).string();
}

JobResult run_one(const std::string& path, const RunRequest& req) {
  JobResult result;
  try {
    ExperimentConfig config = load_config(path);
    if (req.seed) config.seed = *req.seed;
    if (req.steps) config.steps = *req.steps;
    const RunOutput out = run_experiment(config);
    const std::string trace = config.output.trace.empty() ? config.name + ".csv" : config.output.trace;
    const std::string report =
        config.output.report.empty() ? config.name + ".json" : config.output.report;
    write_text(resolve(req.out_dir, trace), to_csv(out.trace));
    write_text(resolve(req.out_dir, report), to_report_text(out.report));
    result.exit_code = out.exit_code;
    result.message = out.summary;
  } catch (const ngkf::LockstepAbort& e) {
    result.message = path + ": numerical abort at " + e.what();
  } catch (const std::exception& e) {
    result.message = std::string("error: ") + e.what();
  }
  return result;
}

int run_command(const RunRequest& req) {
  std::vector<JobResult> results(req.configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < req.configs.size(); i = next++)
      results[i] = run_one(req.configs[i], req);
  };
  const int threads = std::max(1, std::min<int>(req.jobs, static_cast<int>(req.configs.size())));
  std::vector<std::thread> pool;
  for (int k = 1; k < threads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  int code = kExitOk;
  for (const auto& r : results) {
    (r.exit_code == kExitOk ? std::cout : std::cerr) << r.message << "\n";
    if (r.exit_code == kExitError) code = kExitError;
    else if (r.exit_code == kExitToleranceBreach && code == kExitOk) code = kExitToleranceBreach;
  }
  return code;
}

int list_command(bool as_json) {
  if (as_json) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const auto& e : experiment_catalog()) {
      doc.push_back({{"experiment", e.name},
                     {"summary", e.summary},
                     {"required", e.required},
                     {"optional", e.optional}});
    }
    std::cout << doc.dump(2) << "\n";
    return 0;
  }
  for (const auto& e : experiment_catalog()) {
    std::cout << e.name << "\n    " << e.summary << "\n    required:";
    for (const char* f : e.required) std::cout << ' ' << f;
    std::cout << "\n    optional:";
    for (const char* f : e.optional) std::cout << ' ' << f;
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Extended Kalman filter and online natural gradient, side by side"};
  app.require_subcommand(1);

  RunRequest req;
  auto* run = app.add_subcommand("run", "run one or more experiment configs (JSON)");
  run->add_option("configs", req.configs, "config files")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", req.seed, "override the seed of every config");
  run->add_option("--steps", req.steps, "override the step count of every config")
      ->check(CLI::NonNegativeNumber);
  run->add_option("--out-dir", req.out_dir,
                  "directory for traces and reports (default: $NGKF_OUT_DIR, else ./out)");
  run->add_option("--jobs", req.jobs, "configs to run in parallel")->check(CLI::PositiveNumber);

  bool as_json = false;
  auto* list = app.add_subcommand("list", "list experiment kinds and their fields");
  list->add_flag("--json", as_json, "machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "ngkf: " << e.what() << "\n\n" << app.help();
    return kExitError;
  }

  if (*list) return list_command(as_json);

  if (req.out_dir.empty()) {
    const char* env = std::getenv("NGKF_OUT_DIR");
    req.out_dir = env && *env ? env : "out";
  }
  return run_command(req);
}
