#include "vitprobe/grid.hpp"

#include <algorithm>
#include <cstring>

#include "vitprobe/errors.hpp"
#include "vitprobe/parallel.hpp"
#include "vitprobe/rng.hpp"

namespace vitprobe {

namespace fs = std::filesystem;

ProbeData load_split(const FeatureCache& features, const LabelCache& labels,
                     const InitKind& init, std::size_t layer, Split split) {
  const auto sets = labels.in_split(split);
  const Shape& shape = features.stack_shape();
  if (shape.size() != 3) throw DataError("feature cache at " + features.root().string() + " is empty");
  if (layer >= shape[0]) {
    throw DataError("feature cache has no layer " + std::to_string(layer) + " (taps: " +
                    std::to_string(shape[0]) + ")");
  }
  const std::size_t patches = shape[1], width = shape[2];
  ProbeData data;
  if (sets.empty()) {
    // An empty split is reported by train_probe; keep the width for messages.
    return data;
  }
  std::vector<float> values;
  values.reserve(sets.size() * patches * width);
  for (const PatchLabelSet* set : sets) {
    if (set->labels.size() != patches) {
      throw DataError("image '" + set->image_id + "' has " + std::to_string(set->labels.size()) +
                      " labels but " + std::to_string(patches) + " patches");
    }
    const Tensor rows = features.layer(set->image_id, init, layer);
    values.insert(values.end(), rows.values().begin(), rows.values().end());
    data.labels.insert(data.labels.end(), set->labels.begin(), set->labels.end());
  }
  data.features = Tensor({sets.size() * patches, width}, std::move(values));
  return data;
}

std::uint64_t probe_seed(std::uint64_t master_seed, Task task, ProbeKind kind) {
  return derive_seed(master_seed, "probe/" + to_string(task) + "/" + to_string(kind));
}

fs::path checkpoint_path(const fs::path& dir, const InitKind& init, ProbeKind kind,
                         std::size_t layer) {
  return dir / init.label() / (to_string(kind) + "-L" + std::to_string(layer) + ".ckpt");
}

GridResult run_grid(Task task, const FeatureCache& features, const LabelCache& labels,
                    const GridOptions& options) {
  if (labels.task != task) {
    throw DataError("label cache holds " + to_string(labels.task) + " labels, grid is " +
                    to_string(task));
  }
  const Shape& shape = features.stack_shape();
  if (shape.size() != 3) throw DataError("feature cache at " + features.root().string() + " is empty");
  std::vector<std::size_t> layers = options.layers;
  if (layers.empty()) {
    for (std::size_t l = 0; l < shape[0]; ++l) layers.push_back(l);
  }
  for (std::size_t l : layers) {
    if (l >= shape[0]) {
      throw DataError("feature cache has no layer " + std::to_string(l) + " (taps: " +
                      std::to_string(shape[0]) + ")");
    }
  }
  if (options.inits.empty()) throw ContractError("grid needs at least one init kind");

  struct Job {
    std::size_t init, layer;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < options.inits.size(); ++i) {
    for (std::size_t l : layers) jobs.push_back({i, l});
  }
  const std::size_t nk = options.kinds.size();
  std::vector<ProbeCheckpoint> ckpts(jobs.size() * nk);
  std::vector<MetricRow> rows(jobs.size() * nk);

  EvalOptions eval = options.eval;
  eval.patches_per_image = shape[1];

  parallel_for(jobs.size(), options.workers, [&](std::size_t j) {
    const InitKind& init = options.inits[jobs[j].init];
    const std::size_t layer = jobs[j].layer;
    const ProbeData train = load_split(features, labels, init, layer, Split::train);
    const ProbeData val = load_split(features, labels, init, layer, Split::val);
    const ProbeData test = load_split(features, labels, init, layer, Split::test);
    for (std::size_t k = 0; k < nk; ++k) {
      ProbeConfig cfg = options.base;
      cfg.kind = options.kinds[k];
      cfg.task = task;
      cfg.layer = layer;
      cfg.input_width = shape[2];
      cfg.seed = probe_seed(options.master_seed, task, cfg.kind);

      ProbeCheckpoint ckpt;
      bool reused = false;
      std::optional<fs::path> path;
      if (options.checkpoint_dir) {
        path = checkpoint_path(*options.checkpoint_dir, init, cfg.kind, layer);
        if (fs::exists(*path)) {
          ckpt = read_checkpoint(*path);
          reused = ckpt.config == cfg;
        }
      }
      if (!reused) {
        ckpt = train_probe(train, val, cfg);
        if (path) write_checkpoint(*path, ckpt);
      }
      // Grouped by init, then kind, then layer.
      const std::size_t slot =
          (jobs[j].init * nk + k) * layers.size() +
          static_cast<std::size_t>(std::find(layers.begin(), layers.end(), layer) - layers.begin());
      if (test.labels.empty()) throw DataError("test split is empty");
      MetricRow row = evaluate_probe(ckpt, test, eval);
      row.init = init.label();
      rows[slot] = std::move(row);
      ckpts[slot] = std::move(ckpt);
    }
  });
  return {std::move(ckpts), std::move(rows)};
}

}  // namespace vitprobe
