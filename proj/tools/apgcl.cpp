// Command-line front-end: dataset generation, incremental-training runs,
// the seven-config ablation sweep, and report rendering.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "apgcl/experiment.hpp"

using namespace apgcl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig load_and_override(const std::string& config_path, std::int64_t* seed,
                                   const std::string& ablation, const std::string& out) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) cfg.train.seed = static_cast<std::uint64_t>(*seed);
  if (!ablation.empty()) cfg.ablation = ablation;
  if (!out.empty()) cfg.out_dir = out;
  return cfg;
}

RunResult dispatch_run(const ExperimentConfig& cfg, int precision, bool overwrite) {
  if (precision == 64) return run_experiment<double>(cfg, overwrite);
  return run_experiment<float>(cfg, overwrite);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"class-incremental learning with adaptive prompt generation"};
  app.require_subcommand(1);

  std::string config_path, ablation, out;
  std::int64_t seed = 0;
  bool seed_given = false, overwrite = false;
  int precision = 32;
  std::vector<std::string> results_files;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* c = cmd->add_option("--config", config_path, "path to a JSON experiment config");
    if (needs_config) c->required();
    cmd->add_option("--seed", seed, "override the training seed")
        ->each([&](const std::string&) { seed_given = true; });
    cmd->add_flag("--overwrite", overwrite, "replace existing outputs");
    cmd->add_option("--out", out, "output directory override");
  };

  CLI::App* gen = app.add_subcommand("generate-data", "write a synthetic dataset to disk");
  add_common(gen, true);

  CLI::App* run = app.add_subcommand("run", "train and evaluate one configuration");
  add_common(run, true);
  run->add_option("--ablation", ablation, "loss configuration: c-1..c-6 or full")
      ->check(CLI::IsMember({"c-1", "c-2", "c-3", "c-4", "c-5", "c-6", "full"}));
  run->add_option("--precision", precision, "numeric precision")
      ->check(CLI::IsMember({32, 64}));

  CLI::App* ablate = app.add_subcommand("ablate", "run all seven loss configurations");
  add_common(ablate, true);
  ablate->add_option("--precision", precision, "numeric precision")
      ->check(CLI::IsMember({32, 64}));

  CLI::App* rep = app.add_subcommand("report", "render a comparison table and plots");
  rep->add_option("files", results_files, "results.jsonl files")->required();
  rep->add_option("--out", out, "report output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      ExperimentConfig cfg =
          load_and_override(config_path, seed_given ? &seed : nullptr, "", out);
      if (!cfg.has_synthetic)
        throw std::runtime_error("generate-data: config has no dataset.synthetic section");
      if (seed_given) cfg.synthetic.seed = static_cast<std::uint64_t>(seed);
      fs::path dir = out.empty() ? fs::path(cfg.dataset_dir) : fs::path(out);
      generate_synthetic_dataset(cfg.synthetic, dir, overwrite);
      std::cout << "wrote dataset to " << dir.string() << "\n";
      return 0;
    }
    if (run->parsed()) {
      ExperimentConfig cfg =
          load_and_override(config_path, seed_given ? &seed : nullptr, ablation, out);
      RunResult r = dispatch_run(cfg, precision, overwrite);
      std::cout << "run " << r.run_id << ": avg_acc " << r.avg_acc << ", forgetting "
                << r.forgetting << " (config " << r.hash << ")\n";
      return 0;
    }
    if (ablate->parsed()) {
      ExperimentConfig base =
          load_and_override(config_path, seed_given ? &seed : nullptr, "", out);
      std::string base_id = base.run_id;
      std::vector<fs::path> produced;
      for (const std::string& name : ablation_names()) {
        ExperimentConfig cfg = base;
        cfg.ablation = name;
        cfg.run_id = base_id + "-" + name;
        RunResult r = dispatch_run(cfg, precision, overwrite);
        std::cout << "run " << r.run_id << ": avg_acc " << r.avg_acc << ", forgetting "
                  << r.forgetting << "\n";
        produced.push_back(fs::path(cfg.out_dir) / cfg.run_id / "results.jsonl");
      }
      report(produced, fs::path(base.out_dir) / "report");
      std::cout << "report written to " << (fs::path(base.out_dir) / "report").string()
                << "\n";
      return 0;
    }
    if (rep->parsed()) {
      std::vector<fs::path> files(results_files.begin(), results_files.end());
      fs::path dir = out.empty() ? fs::path("report") : fs::path(out);
      auto rows = report(files, dir);
      std::ifstream txt(dir / "report.txt");
      std::cout << txt.rdbuf();
      std::cout << "report written to " << dir.string() << " (" << rows.size() << " runs)\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
