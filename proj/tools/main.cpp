// vitprobe: layerwise probing and causal interventions on ViT encoders.
#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vitprobe/errors.hpp"
#include "vitprobe/fixtures.hpp"
#include "vitprobe/pipeline.hpp"

namespace fs = std::filesystem;
using namespace vitprobe;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::uint64_t> master_seed;
  std::optional<std::size_t> workers;
  std::string cache_dir, results_dir, weights, boundary_root, depth_root;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config, "Experiment TOML file");
  cmd->add_option("--set", o.set, "Override a config field: section.key=value (repeatable)");
  cmd->add_option("--master-seed", o.master_seed, "Master seed (required for ablate/dose/patch)");
  cmd->add_option("-j,--workers", o.workers, "Worker threads (1 = strict serial mode)");
  cmd->add_option("--cache-dir", o.cache_dir, "Cache directory");
  cmd->add_option("--results-dir", o.results_dir, "Results directory (default <cache>/results)");
  cmd->add_option("--weights", o.weights, "Pretrained safetensors container");
  cmd->add_option("--boundary-root", o.boundary_root, "BSDS500-layout dataset root");
  cmd->add_option("--depth-root", o.depth_root, "NYU-layout dataset root");
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig c = o.config.empty() ? parse_experiment_config("", fs::current_path(), o.set)
                                        : load_experiment_config(o.config, o.set);
  if (o.master_seed) c.master_seed = o.master_seed;
  if (o.workers) c.workers = *o.workers;
  if (!o.cache_dir.empty()) c.cache_dir = o.cache_dir;
  if (!o.results_dir.empty()) c.results_dir = o.results_dir;
  if (!o.weights.empty()) c.weights = o.weights;
  if (!o.boundary_root.empty()) c.boundary_root = fs::path(o.boundary_root);
  if (!o.depth_root.empty()) c.depth_root = fs::path(o.depth_root);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layerwise probing and causal interventions on vision-transformer encoders"};
  app.require_subcommand(1);

  CommonOptions common;
  struct Stage {
    const char* name;
    const char* help;
    void (*fn)(const ExperimentConfig&);
  };
  const Stage stages[] = {
      {"extract", "Encode every dataset image under every init into the feature cache", stage_extract},
      {"labels", "Build per-patch boundary and depth label caches", stage_labels},
      {"train-grid", "Train the layer x probe-kind x init grid and write metric tables", stage_train_grid},
      {"ablate", "Probe-direction ablation with random-direction controls", stage_ablate},
      {"dose", "Dose-response of probe-direction ablation over alpha", stage_dose},
      {"patch", "Targeted patching over contrast pairs; causal influence matrix", stage_patch},
      {"run", "Every enabled stage, then the report", run_all},
  };
  std::vector<std::pair<CLI::App*, const Stage*>> stage_cmds;
  for (const auto& s : stages) {
    CLI::App* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, common);
    stage_cmds.emplace_back(cmd, &s);
  }

  CLI::App* report = app.add_subcommand("report", "Regenerate tables and summary.md from stage outputs");
  std::string report_dir;
  add_common(report, common);
  report->add_option("dir", report_dir, "Results directory (default from config)");

  CLI::App* fixture = app.add_subcommand("fixture", "Write a deterministic synthetic fixture");
  std::string fixture_kind = "tiny-encoder";
  std::uint64_t fixture_seed = 1;
  std::string fixture_out;
  fixture->add_option("-k,--kind", fixture_kind, "planted-regression | identity-carry | tiny-encoder")
      ->check(CLI::IsMember({"planted-regression", "identity-carry", "tiny-encoder"}));
  fixture->add_option("-s,--seed", fixture_seed, "Fixture seed");
  fixture->add_option("-o,--out", fixture_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    for (const auto& [cmd, stage] : stage_cmds) {
      if (cmd->parsed()) stage->fn(resolve(common));
    }
    if (report->parsed()) {
      const fs::path dir = !report_dir.empty() ? fs::path(report_dir) : resolve(common).results();
      const ReportSummary summary = stage_report(dir);
      std::cout << summary.markdown;
    }
    if (fixture->parsed()) {
      const FixtureFiles files = make_fixture(parse_fixture_kind(fixture_kind), fixture_seed, fixture_out);
      std::cout << "fixture written to " << files.root.string() << "\n";
      if (!files.config.empty()) std::cout << "config: " << files.config.string() << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
