#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "vitprobe/cache.hpp"
#include "vitprobe/labels.hpp"
#include "vitprobe/probe.hpp"

namespace vitprobe {

// Features of every patch of every image in `split`, stacked in label-cache
// order, with the matching targets. Throws DataError if the cache lacks a stack
// or the layer.
ProbeData load_split(const FeatureCache& features, const LabelCache& labels,
                     const InitKind& init, std::size_t layer, Split split);

// Seed of a probe run. It does not depend on the layer or the init, so two
// layers with identical features train identical probes.
std::uint64_t probe_seed(std::uint64_t master_seed, Task task, ProbeKind kind);

struct GridOptions {
  std::vector<std::size_t> layers;  // empty: every tap in the cache
  std::vector<ProbeKind> kinds{ProbeKind::linear, ProbeKind::mlp};
  std::vector<InitKind> inits;
  ProbeConfig base;  // kind, task, layer, width and seed are filled per run
  std::uint64_t master_seed = 0;
  std::size_t workers = 1;
  EvalOptions eval;
  // When set, checkpoints are written to <dir>/<init>/<kind>-L<layer>.ckpt and
  // an existing checkpoint with the same config is reused instead of retrained.
  std::optional<std::filesystem::path> checkpoint_dir;
};

struct GridResult {
  std::vector<ProbeCheckpoint> checkpoints;
  std::vector<MetricRow> rows;  // ordered by init, kind, layer
};

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, const InitKind& init,
                                      ProbeKind kind, std::size_t layer);

GridResult run_grid(Task task, const FeatureCache& features, const LabelCache& labels,
                    const GridOptions& options);

}  // namespace vitprobe
