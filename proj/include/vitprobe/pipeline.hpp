#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vitprobe/labels.hpp"
#include "vitprobe/metrics.hpp"
#include "vitprobe/probe.hpp"

namespace vitprobe {

/// Everything a run needs. Relative paths in a config file resolve against the
/// file's directory.
struct ExperimentConfig {
  // [model]
  std::filesystem::path weights;
  std::optional<std::filesystem::path> sidecar;
  std::vector<std::uint64_t> random_seeds{0};
  double random_init_std = 0.02;

  // [data]
  std::optional<std::filesystem::path> boundary_root;
  std::optional<std::filesystem::path> depth_root;
  std::size_t dilation_radius = 1;
  TieRule tie = TieRule::strict_majority;
  double max_depth_m = 10.0;

  // [run]
  std::filesystem::path cache_dir = "cache";
  std::filesystem::path results_dir;  // empty: <cache_dir>/results
  std::vector<Task> tasks{Task::boundary, Task::depth};
  std::optional<std::uint64_t> master_seed;
  std::size_t workers = 0;  // 0: available parallelism
  bool grid = true;
  bool ablate = true;
  bool dose = true;
  bool patch = true;

  // [probe]
  ProbeConfig probe;
  Pooling pooling = Pooling::pooled;
  std::vector<ProbeKind> kinds{ProbeKind::linear, ProbeKind::mlp};

  // [interventions]
  std::vector<std::size_t> ablation_layers;  // empty: every tap
  std::vector<std::size_t> dose_layers;      // empty: every tap
  std::vector<std::size_t> patch_layers;     // empty: every tap
  std::size_t random_directions = 10;
  std::size_t contrast_pairs = 20;
  double guard_epsilon = 1e-3;
  bool per_position = false;

  std::filesystem::path results() const {
    return results_dir.empty() ? cache_dir / "results" : results_dir;
  }
  std::size_t worker_count() const;
  bool has_task(Task task) const;
};

/// Parses TOML text. Each override is "section.key=value" with a TOML value
/// (bare words are taken as strings) and wins over the file.
ExperimentConfig parse_experiment_config(const std::string& toml_text,
                                         const std::filesystem::path& base_dir,
                                         const std::vector<std::string>& overrides = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

// Stages. Each is idempotent: outputs whose inputs are unchanged are reused.
void stage_extract(const ExperimentConfig& config);
void stage_labels(const ExperimentConfig& config);
void stage_train_grid(const ExperimentConfig& config);
// The intervention stages throw ContractError without a master seed.
void stage_ablate(const ExperimentConfig& config);
void stage_dose(const ExperimentConfig& config);
void stage_patch(const ExperimentConfig& config);
// Every enabled stage in order, then the report.
void run_all(const ExperimentConfig& config);

struct ReportSummary {
  bool empty = true;
  std::string markdown;
  std::vector<std::string> written;  // files (re)written under the results dir
};

/// Regenerates the tables from the stage outputs found in `results_dir` and
/// writes summary.md. An empty or missing directory yields empty = true and the
/// text "nothing to report".
ReportSummary stage_report(const std::filesystem::path& results_dir);

// Summary helpers shared with tests.
std::optional<std::size_t> boundary_peak_layer(const std::vector<MetricRow>& rows);
std::optional<std::size_t> depth_peak_layer(const std::vector<MetricRow>& rows);

}  // namespace vitprobe
