#include "vitprobe/pipeline.hpp"

#include <toml.hpp>

#include <algorithm>
#include <ctime>
#include <iostream>
#include <json.hpp>
#include <mutex>
#include <set>
#include <sstream>

#include "vitprobe/cache.hpp"
#include "vitprobe/encoder.hpp"
#include "vitprobe/errors.hpp"
#include "vitprobe/grid.hpp"
#include "vitprobe/image.hpp"
#include "vitprobe/interventions.hpp"
#include "vitprobe/parallel.hpp"

namespace vitprobe {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::size_t ExperimentConfig::worker_count() const {
  return workers == 0 ? default_workers() : workers;
}

bool ExperimentConfig::has_task(Task task) const {
  return std::find(tasks.begin(), tasks.end(), task) != tasks.end();
}

// ---- config --------------------------------------------------------------------

namespace {

[[noreturn]] void bad_value(const std::string& key, const char* expected) {
  throw DataError("config: " + key + " must be " + expected);
}

std::int64_t as_int(const toml::node& n, const std::string& key) {
  const auto v = n.value<std::int64_t>();
  if (!v) bad_value(key, "an integer");
  return *v;
}

std::size_t as_size(const toml::node& n, const std::string& key) {
  const auto v = as_int(n, key);
  if (v < 0) bad_value(key, "non-negative");
  return static_cast<std::size_t>(v);
}

double as_double(const toml::node& n, const std::string& key) {
  const auto v = n.value<double>();
  if (!v) bad_value(key, "a number");
  return *v;
}

bool as_bool(const toml::node& n, const std::string& key) {
  const auto v = n.value<bool>();
  if (!v) bad_value(key, "true or false");
  return *v;
}

std::string as_string(const toml::node& n, const std::string& key) {
  const auto v = n.value<std::string>();
  if (!v) bad_value(key, "a string");
  return *v;
}

fs::path as_path(const toml::node& n, const std::string& key, const fs::path& base) {
  const fs::path p = as_string(n, key);
  return p.is_absolute() || base.empty() ? p : base / p;
}

template <typename Fn>
void each(const toml::node& n, const std::string& key, Fn&& fn) {
  const auto* arr = n.as_array();
  if (!arr) bad_value(key, "an array");
  for (const auto& item : *arr) fn(item);
}

std::vector<std::size_t> as_sizes(const toml::node& n, const std::string& key) {
  std::vector<std::size_t> out;
  each(n, key, [&](const toml::node& item) { out.push_back(as_size(item, key)); });
  return out;
}

void set_field(ExperimentConfig& c, const std::string& section, const std::string& name,
               const toml::node& n, const fs::path& base) {
  const std::string key = section + "." + name;
  if (section == "model") {
    if (name == "weights") return void(c.weights = as_path(n, key, base));
    if (name == "sidecar") return void(c.sidecar = as_path(n, key, base));
    if (name == "random_seeds") {
      c.random_seeds.clear();
      each(n, key, [&](const toml::node& item) { c.random_seeds.push_back(as_size(item, key)); });
      return;
    }
    if (name == "random_init_std") return void(c.random_init_std = as_double(n, key));
  } else if (section == "data") {
    if (name == "boundary_root") return void(c.boundary_root = as_path(n, key, base));
    if (name == "depth_root") return void(c.depth_root = as_path(n, key, base));
    if (name == "dilation_radius") return void(c.dilation_radius = as_size(n, key));
    if (name == "max_depth_m") return void(c.max_depth_m = as_double(n, key));
    if (name == "tie") {
      const auto v = as_string(n, key);
      if (v == "strict") return void(c.tie = TieRule::strict_majority);
      if (v == "half-or-more") return void(c.tie = TieRule::half_or_more);
      bad_value(key, "\"strict\" or \"half-or-more\"");
    }
  } else if (section == "run") {
    if (name == "cache_dir") return void(c.cache_dir = as_path(n, key, base));
    if (name == "results_dir") return void(c.results_dir = as_path(n, key, base));
    if (name == "master_seed") return void(c.master_seed = as_size(n, key));
    if (name == "workers") return void(c.workers = as_size(n, key));
    if (name == "grid") return void(c.grid = as_bool(n, key));
    if (name == "ablate") return void(c.ablate = as_bool(n, key));
    if (name == "dose") return void(c.dose = as_bool(n, key));
    if (name == "patch") return void(c.patch = as_bool(n, key));
    if (name == "tasks") {
      c.tasks.clear();
      each(n, key, [&](const toml::node& item) { c.tasks.push_back(parse_task(as_string(item, key))); });
      return;
    }
  } else if (section == "probe") {
    ProbeConfig& p = c.probe;
    if (name == "lr") return void(p.lr = as_double(n, key));
    if (name == "weight_decay") return void(p.weight_decay = as_double(n, key));
    if (name == "beta1") return void(p.beta1 = as_double(n, key));
    if (name == "beta2") return void(p.beta2 = as_double(n, key));
    if (name == "adam_eps") return void(p.adam_eps = as_double(n, key));
    if (name == "batch_size") return void(p.batch_size = as_size(n, key));
    if (name == "max_epochs") return void(p.max_epochs = as_size(n, key));
    if (name == "patience") return void(p.patience = as_size(n, key));
    if (name == "hidden_width") return void(p.hidden_width = as_size(n, key));
    if (name == "standardize") return void(p.standardize = as_bool(n, key));
    if (name == "kinds") {
      c.kinds.clear();
      each(n, key, [&](const toml::node& item) { c.kinds.push_back(parse_probe_kind(as_string(item, key))); });
      return;
    }
    if (name == "pooling") {
      const auto v = as_string(n, key);
      if (v == "pooled") return void(c.pooling = Pooling::pooled);
      if (v == "per-image") return void(c.pooling = Pooling::per_image);
      bad_value(key, "\"pooled\" or \"per-image\"");
    }
  } else if (section == "interventions") {
    if (name == "ablation_layers") return void(c.ablation_layers = as_sizes(n, key));
    if (name == "dose_layers") return void(c.dose_layers = as_sizes(n, key));
    if (name == "patch_layers") return void(c.patch_layers = as_sizes(n, key));
    if (name == "random_directions") return void(c.random_directions = as_size(n, key));
    if (name == "contrast_pairs") return void(c.contrast_pairs = as_size(n, key));
    if (name == "guard_epsilon") return void(c.guard_epsilon = as_double(n, key));
    if (name == "per_position") return void(c.per_position = as_bool(n, key));
  }
  throw DataError("config: unknown setting " + key);
}

toml::table parse_toml(const std::string& text, const std::string& where) {
  try {
    return toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << where << ": " << e.description() << " (line " << e.source().begin.line << ")";
    throw FormatError(msg.str());
  }
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& toml_text, const fs::path& base_dir,
                                         const std::vector<std::string>& overrides) {
  ExperimentConfig c;
  const toml::table root = parse_toml(toml_text, "config");
  for (const auto& [section, node] : root) {
    const auto* table = node.as_table();
    if (!table) throw DataError("config: top-level key " + std::string(section.str()) + " is not a section");
    for (const auto& [name, value] : *table) {
      set_field(c, std::string(section.str()), std::string(name.str()), value, base_dir);
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw DataError("override '" + o + "' is not section.key=value");
    }
    const std::string section = o.substr(0, dot);
    const std::string name = o.substr(dot + 1, eq - dot - 1);
    const std::string value = o.substr(eq + 1);
    toml::table parsed;
    try {
      parsed = toml::parse("v = " + value);
    } catch (const toml::parse_error&) {
      parsed = toml::table{{"v", value}};
    }
    set_field(c, section, name, *parsed.get("v"), fs::current_path());
  }
  if (c.probe.batch_size == 0 || c.probe.max_epochs == 0) {
    throw DataError("config: probe.batch_size and probe.max_epochs must be positive");
  }
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path,
                                        const std::vector<std::string>& overrides) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
  return parse_experiment_config(read_text_file(path), fs::absolute(path).parent_path(),
                                 overrides);
}

// ---- stage bookkeeping -----------------------------------------------------------

namespace {

std::mutex log_mutex;

void log_stage(const std::string& stage, const std::string& message) {
  std::lock_guard lock(log_mutex);
  std::cerr << "[" << stage << "] " << message << "\n";
}

fs::path feature_dir(const ExperimentConfig& c, Task task) {
  return c.cache_dir / "features" / to_string(task);
}
fs::path label_dir(const ExperimentConfig& c, Task task) {
  return c.cache_dir / "labels" / to_string(task);
}
fs::path probe_dir(const ExperimentConfig& c, Task task) {
  return c.cache_dir / "probes" / to_string(task);
}

std::optional<fs::path> dataset_root(const ExperimentConfig& c, Task task) {
  return task == Task::boundary ? c.boundary_root : c.depth_root;
}

std::vector<Task> active_tasks(const ExperimentConfig& c) {
  std::vector<Task> out;
  for (Task t : {Task::boundary, Task::depth}) {
    if (c.has_task(t) && dataset_root(c, t)) out.push_back(t);
  }
  return out;
}

std::vector<InitKind> inits(const ExperimentConfig& c) {
  std::vector<InitKind> out{InitKind::pretrained()};
  for (auto s : c.random_seeds) out.push_back(InitKind::random_seed(s));
  return out;
}

fs::path stage_record(const ExperimentConfig& c, const std::string& name) {
  return c.cache_dir / "stages" / (name + ".json");
}

// A stage is current when its recorded input key matches and every recorded
// output still has the recorded checksum.
bool stage_current(const ExperimentConfig& c, const std::string& name, const std::string& key) {
  const fs::path rec = stage_record(c, name);
  if (!fs::exists(rec)) return false;
  const json r = json::parse(read_text_file(rec));
  if (r.value("key", std::string()) != key) return false;
  for (const auto& [file, digest] : r.at("outputs").items()) {
    if (!fs::exists(file) || sha256_file(file) != digest.get<std::string>()) return false;
  }
  return true;
}

void record_stage(const ExperimentConfig& c, const std::string& name, const std::string& key,
                  const std::vector<fs::path>& outputs) {
  json out = json::object();
  for (const auto& p : outputs) out[fs::absolute(p).string()] = sha256_file(p);
  const json r = {{"stage", name}, {"key", key}, {"outputs", out}};
  write_text_file(stage_record(c, name), r.dump(2) + "\n");
}

std::string file_digest_or_empty(const fs::path& p) {
  return fs::exists(p) ? sha256_file(p) : std::string();
}

NamedTensorStore load_pretrained(const ExperimentConfig& c) {
  if (c.weights.empty()) throw DataError("config: model.weights is not set");
  return load_weights(c.weights, c.sidecar);
}

std::string config_digest(const NamedTensorStore& store) {
  std::string text;
  for (const auto& [k, v] : store.metadata) {
    if (k == "init" || k == "seed") continue;
    text += k + "=" + v + ";";
  }
  return text;
}

json probe_json(const ExperimentConfig& c) {
  const ProbeConfig& p = c.probe;
  json kinds = json::array();
  for (auto k : c.kinds) kinds.push_back(to_string(k));
  return {{"lr", p.lr},           {"weight_decay", p.weight_decay}, {"beta1", p.beta1},
          {"beta2", p.beta2},     {"adam_eps", p.adam_eps},         {"batch_size", p.batch_size},
          {"max_epochs", p.max_epochs}, {"patience", p.patience},   {"hidden_width", p.hidden_width},
          {"standardize", p.standardize}, {"kinds", kinds},
          {"pooling", c.pooling == Pooling::pooled ? "pooled" : "per-image"}};
}

std::string grid_key(const ExperimentConfig& c, Task task) {
  json seeds = json::array();
  for (auto s : c.random_seeds) seeds.push_back(s);
  const json k = {{"features", file_digest_or_empty(feature_dir(c, task) / "manifest.json")},
                  {"labels", file_digest_or_empty(label_dir(c, task) / "manifest.json")},
                  {"probe", probe_json(c)},
                  {"random_seeds", seeds},
                  {"master_seed", c.master_seed.value_or(0)}};
  return sha256_hex(k.dump());
}

std::uint64_t require_master_seed(const ExperimentConfig& c, const char* stage) {
  if (!c.master_seed) {
    throw ContractError(std::string(stage) + " needs a master seed (--master-seed or run.master_seed)");
  }
  return *c.master_seed;
}

std::size_t tap_count(const ExperimentConfig& c) {
  const FeatureCache cache(feature_dir(c, Task::depth));
  if (cache.stack_shape().size() != 3) throw DataError("no depth features; run extract first");
  return cache.stack_shape()[0];
}

std::vector<std::size_t> layers_or_all(const std::vector<std::size_t>& layers, std::size_t taps) {
  if (!layers.empty()) {
    for (auto l : layers) {
      if (l >= taps) throw DataError("layer " + std::to_string(l) + " exceeds the " + std::to_string(taps) + " taps");
    }
    return layers;
  }
  std::vector<std::size_t> all(taps);
  for (std::size_t i = 0; i < taps; ++i) all[i] = i;
  return all;
}

// Pretrained linear depth probes, one per tap.
std::vector<ProbeCheckpoint> depth_probes(const ExperimentConfig& c, std::size_t taps) {
  std::vector<ProbeCheckpoint> probes;
  for (std::size_t l = 0; l < taps; ++l) {
    const fs::path p = checkpoint_path(probe_dir(c, Task::depth), InitKind::pretrained(),
                                       ProbeKind::linear, l);
    if (!fs::exists(p)) throw DataError("missing probe " + p.string() + "; run train-grid first");
    probes.push_back(read_checkpoint(p));
  }
  return probes;
}

EvalOptions eval_options(const ExperimentConfig& c, std::size_t patches) {
  return {c.pooling, patches};
}

}  // namespace

// ---- stages ----------------------------------------------------------------------

void stage_extract(const ExperimentConfig& c) {
  const auto tasks = active_tasks(c);
  if (tasks.empty()) throw DataError("extract: no dataset roots configured");
  const NamedTensorStore pretrained = load_pretrained(c);
  const EncoderConfig enc = infer_config(pretrained);
  const std::string arch = config_digest(pretrained);
  std::vector<std::string> failures;

  for (Task task : tasks) {
    const DatasetIndex index = assign_splits(task, *dataset_root(c, task));
    if (!index.warning.empty()) log_stage("extract", "warning: " + index.warning);
    FeatureCache cache(feature_dir(c, task));

    for (const InitKind& init : inits(c)) {
      std::string digest;
      std::optional<VisionEncoder> encoder;
      if (init.random) {
        digest = sha256_hex("random|" + std::to_string(init.seed) + "|" +
                            std::to_string(c.random_init_std) + "|" + arch);
      } else {
        digest = sha256_hex(sha256_file(c.weights) + "|" + arch);
      }
      if (cache.source_digest(init) != digest) {
        if (!cache.source_digest(init).empty()) log_stage("extract", "weights changed; dropping " + init.label());
        cache.drop(init);
        cache.set_source_digest(init, digest);
      }
      std::vector<const DatasetItem*> todo;
      for (const auto& item : index.items) {
        if (!cache.contains(item.image_id, init)) todo.push_back(&item);
      }
      log_stage("extract", to_string(task) + " " + init.label() + ": " + std::to_string(todo.size()) +
                         " of " + std::to_string(index.items.size()) + " images to encode");
      if (todo.empty()) continue;
      encoder.emplace(init.random ? random_init(enc, init.seed, {c.random_init_std}) : pretrained);

      std::vector<std::string> errors(todo.size());
      parallel_for(todo.size(), c.worker_count(), [&](std::size_t i) {
        const DatasetItem& item = *todo[i];
        try {
          const Tensor image = preprocess(read_image(item.image), encoder->config());
          HiddenStateStack stack = encoder->forward(image, {}, item.image_id);
          stack.init = init;
          cache.put(stack);
        } catch (const Error& e) {
          errors[i] = e.what();
        }
      });
      cache.save();
      for (std::size_t i = 0; i < errors.size(); ++i) {
        if (errors[i].empty()) continue;
        const std::string msg = todo[i]->image.string() + ": " + errors[i];
        log_stage("extract", "error: " + msg);
        failures.push_back(msg);
      }
    }
    cache.save();
  }
  if (!failures.empty()) {
    std::string all = std::to_string(failures.size()) + " image(s) failed to encode:";
    for (const auto& f : failures) all += "\n  " + f;
    throw IoError(all);
  }
}

void stage_labels(const ExperimentConfig& c) {
  const auto tasks = active_tasks(c);
  if (tasks.empty()) throw DataError("labels: no dataset roots configured");
  EncoderConfig enc;
  if (!c.weights.empty() && fs::exists(c.weights)) enc = infer_config(load_pretrained(c));
  LabelOptions options;
  options.consensus.dilation_radius = c.dilation_radius;
  options.consensus.tie = c.tie;
  options.depth.geometry = {enc.image_size, enc.patch_size};
  options.depth.max_depth_m = c.max_depth_m;

  for (Task task : tasks) {
    const DatasetIndex index = assign_splits(task, *dataset_root(c, task));
    if (!index.warning.empty()) log_stage("labels", "warning: " + index.warning);

    json sources = json::array();
    for (const auto& item : index.items) {
      json files = json::array();
      for (const auto& a : item.annotations) files.push_back(sha256_file(a));
      if (!item.depth.empty()) files.push_back(sha256_file(item.depth));
      sources.push_back({item.image_id, to_string(item.split), files});
    }
    const json key_json = {{"task", to_string(task)},
                           {"image_size", enc.image_size},
                           {"patch_size", enc.patch_size},
                           {"dilation", c.dilation_radius},
                           {"tie", c.tie == TieRule::strict_majority ? "strict" : "half-or-more"},
                           {"max_depth_m", c.max_depth_m},
                           {"sources", sources}};
    const std::string key = sha256_hex(key_json.dump());
    const std::string stage = "labels-" + to_string(task);
    const fs::path dir = label_dir(c, task);
    if (stage_current(c, stage, key)) {
      log_stage("labels", to_string(task) + ": up to date");
      continue;
    }

    LabelCache cache;
    cache.task = task;
    cache.geometry = options.depth.geometry;
    cache.sets.resize(index.items.size());
    parallel_for(index.items.size(), c.worker_count(), [&](std::size_t i) {
      try {
        cache.sets[i] = make_patch_labels(index.items[i], task, options);
      } catch (const Error& e) {
        throw DataError(index.items[i].image_id + ": " + e.what());
      }
    });
    write_label_cache(dir, cache);
    record_stage(c, stage, key, {dir / "labels.bin", dir / "manifest.json"});
    log_stage("labels", to_string(task) + ": " + std::to_string(cache.sets.size()) + " images labelled");
  }
}

namespace {

void emit_grid_tables(const fs::path& results, std::vector<std::string>* written = nullptr) {
  auto emit = [&](const fs::path& p, const std::string& text) {
    write_text_file(p, text);
    if (written) written->push_back(p.filename().string());
  };
  std::optional<std::vector<MetricRow>> boundary, depth;
  if (fs::exists(results / "boundary_metrics.csv")) {
    boundary = parse_metric_rows_csv(read_text_file(results / "boundary_metrics.csv"));
    emit(results / "boundary_table.csv", boundary_table_csv(*boundary));
    emit(results / "boundary_curves.json", layer_curves_json(*boundary));
  }
  if (fs::exists(results / "depth_metrics.csv")) {
    depth = parse_metric_rows_csv(read_text_file(results / "depth_metrics.csv"));
    emit(results / "depth_table.csv", depth_table_csv(*depth));
    emit(results / "depth_curves.json", layer_curves_json(*depth));
  }
  if (boundary && depth) emit(results / "cross_task.csv", cross_task_table_csv(*boundary, *depth));
}

}  // namespace

void stage_train_grid(const ExperimentConfig& c) {
  const auto tasks = active_tasks(c);
  if (tasks.empty()) throw DataError("train-grid: no dataset roots configured");
  const fs::path results = c.results();
  for (Task task : tasks) {
    const std::string key = grid_key(c, task);
    const std::string stage = "grid-" + to_string(task);
    const fs::path out = results / (to_string(task) + "_metrics.csv");
    if (stage_current(c, stage, key)) {
      log_stage("train-grid", to_string(task) + ": up to date");
      continue;
    }
    const FeatureCache features(feature_dir(c, task));
    if (features.stack_shape().empty()) {
      throw DataError("train-grid: no " + to_string(task) + " features; run extract first");
    }
    const LabelCache labels = read_label_cache(label_dir(c, task));
    GridOptions options;
    options.kinds = c.kinds;
    options.inits = inits(c);
    options.base = c.probe;
    options.master_seed = c.master_seed.value_or(0);
    options.workers = c.worker_count();
    options.eval.pooling = c.pooling;
    options.checkpoint_dir = probe_dir(c, task);
    log_stage("train-grid", to_string(task) + ": " +
                          std::to_string(features.stack_shape()[0] * options.kinds.size() *
                                         options.inits.size()) + " probe runs");
    const GridResult grid = run_grid(task, features, labels, options);
    write_text_file(out, metric_rows_csv(grid.rows));
    record_stage(c, stage, key, {out});
  }
  emit_grid_tables(results);
}

void stage_ablate(const ExperimentConfig& c) {
  const std::uint64_t seed = require_master_seed(c, "ablate");
  const std::size_t taps = tap_count(c);
  const auto layers = layers_or_all(c.ablation_layers, taps);
  json k = {{"grid", grid_key(c, Task::depth)}, {"layers", layers},
            {"random_directions", c.random_directions}, {"master_seed", seed}};
  const fs::path out = c.results() / "ablation.csv";
  if (stage_current(c, "ablate", sha256_hex(k.dump()))) {
    log_stage("ablate", "up to date");
    return;
  }
  const FeatureCache features(feature_dir(c, Task::depth));
  const LabelCache labels = read_label_cache(label_dir(c, Task::depth));
  const auto probes = depth_probes(c, taps);
  std::vector<AblationResult> results(layers.size());
  parallel_for(layers.size(), c.worker_count(), [&](std::size_t i) {
    const ProbeData test = load_split(features, labels, InitKind::pretrained(), layers[i], Split::test);
    results[i] = ablation_experiment(layers[i], probes[layers[i]], test, seed, c.random_directions,
                                     eval_options(c, features.stack_shape()[1]));
  });
  write_text_file(out, ablation_table_csv(results));
  record_stage(c, "ablate", sha256_hex(k.dump()), {out});
  log_stage("ablate", std::to_string(layers.size()) + " layers");
}

void stage_dose(const ExperimentConfig& c) {
  const std::uint64_t seed = require_master_seed(c, "dose");
  const std::size_t taps = tap_count(c);
  const auto layers = layers_or_all(c.dose_layers, taps);
  json k = {{"grid", grid_key(c, Task::depth)}, {"layers", layers}, {"master_seed", seed}};
  const fs::path out = c.results() / "dose_response.json";
  if (stage_current(c, "dose", sha256_hex(k.dump()))) {
    log_stage("dose", "up to date");
    return;
  }
  const FeatureCache features(feature_dir(c, Task::depth));
  const LabelCache labels = read_label_cache(label_dir(c, Task::depth));
  const auto probes = depth_probes(c, taps);
  const auto alphas = default_alphas();
  std::vector<DoseResponseCurve> curves(layers.size());
  parallel_for(layers.size(), c.worker_count(), [&](std::size_t i) {
    const ProbeData test = load_split(features, labels, InitKind::pretrained(), layers[i], Split::test);
    curves[i] = dose_response(layers[i], probes[layers[i]], test, alphas,
                              eval_options(c, features.stack_shape()[1]));
  });
  write_text_file(out, dose_response_json(curves));
  record_stage(c, "dose", sha256_hex(k.dump()), {out});
  log_stage("dose", std::to_string(layers.size()) + " layers");
}

void stage_patch(const ExperimentConfig& c) {
  const std::uint64_t seed = require_master_seed(c, "patch");
  if (!c.depth_root) throw DataError("patch: data.depth_root is not set");
  const std::size_t taps = tap_count(c);
  const auto layers = layers_or_all(c.patch_layers, taps);
  json k = {{"grid", grid_key(c, Task::depth)},
            {"weights", sha256_file(c.weights)},
            {"layers", layers},
            {"pairs", c.contrast_pairs},
            {"guard_epsilon", c.guard_epsilon},
            {"per_position", c.per_position},
            {"master_seed", seed}};
  const fs::path results = c.results();
  const std::vector<fs::path> outs{results / "contrast_pairs.csv", results / "influence_matrix.csv",
                                   results / "influence_matrix.json"};
  if (stage_current(c, "patch", sha256_hex(k.dump()))) {
    log_stage("patch", "up to date");
    return;
  }
  const LabelCache labels = read_label_cache(label_dir(c, Task::depth));
  const auto pairs = select_contrast_pairs(labels, Split::test, c.contrast_pairs);
  const DatasetIndex index = assign_splits(Task::depth, *c.depth_root);
  const VisionEncoder encoder(load_pretrained(c));
  std::map<std::string, Tensor> images;
  for (const auto& p : pairs) {
    for (const auto& id : {p.src_image_id, p.dst_image_id}) {
      const auto it = std::find_if(index.items.begin(), index.items.end(),
                                   [&](const DatasetItem& item) { return item.image_id == id; });
      if (it == index.items.end()) throw DataError("no image for '" + id + "'");
      images.emplace(id, preprocess(read_image(it->image), encoder.config()));
    }
  }
  InfluenceOptions options;
  options.guard_epsilon = c.guard_epsilon;
  options.intervention_layers = layers;
  options.per_position = c.per_position;
  options.workers = c.worker_count();
  const InfluenceMatrix m = influence_matrix(pairs, depth_probes(c, taps), encoder, images, options);
  write_text_file(outs[0], contrast_pairs_csv(pairs));
  write_text_file(outs[1], influence_matrix_csv(m));
  write_text_file(outs[2], influence_matrix_json(m));
  record_stage(c, "patch", sha256_hex(k.dump()), outs);
  log_stage("patch", std::to_string(pairs.size()) + " pairs, " + std::to_string(layers.size()) +
                   " intervention layers");
}

void run_all(const ExperimentConfig& c) {
  const bool interventions = c.has_task(Task::depth) && c.depth_root && (c.ablate || c.dose || c.patch);
  if (interventions) require_master_seed(c, "the intervention stages");
  stage_extract(c);
  stage_labels(c);
  if (c.grid) stage_train_grid(c);
  if (interventions) {
    if (c.ablate) stage_ablate(c);
    if (c.dose) stage_dose(c);
    if (c.patch) stage_patch(c);
  }
  const ReportSummary report = stage_report(c.results());
  log_stage("report", report.empty ? "nothing to report" : "wrote summary.md");
}

// ---- report ------------------------------------------------------------------------

std::optional<std::size_t> boundary_peak_layer(const std::vector<MetricRow>& rows) {
  std::optional<std::size_t> best;
  double best_ap = -1.0;
  for (const auto& r : rows) {
    if (r.is_random() || r.kind != "linear" || !r.ap) continue;
    if (*r.ap > best_ap || (*r.ap == best_ap && r.layer < *best)) {
      best_ap = *r.ap;
      best = r.layer;
    }
  }
  return best;
}

std::optional<std::size_t> depth_peak_layer(const std::vector<MetricRow>& rows) {
  std::optional<std::size_t> best;
  double best_mae = 0.0;
  for (const auto& r : rows) {
    if (r.is_random() || r.kind != "linear" || !r.mae) continue;
    if (!best || *r.mae < best_mae || (*r.mae == best_mae && r.layer < *best)) {
      best_mae = *r.mae;
      best = r.layer;
    }
  }
  return best;
}

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text_file(p));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

const MetricRow* row_at(const std::vector<MetricRow>& rows, std::size_t layer, bool random) {
  for (const auto& r : rows) {
    if (r.layer == layer && r.kind == "linear" && r.is_random() == random) return &r;
  }
  return nullptr;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%d %H:%M:%S UTC", std::gmtime(&t));
  return buf;
}

}  // namespace

ReportSummary stage_report(const fs::path& results) {
  ReportSummary report;
  const bool has_boundary = fs::exists(results / "boundary_metrics.csv");
  const bool has_depth = fs::exists(results / "depth_metrics.csv");
  const bool has_ablation = fs::exists(results / "ablation.csv");
  const bool has_dose = fs::exists(results / "dose_response.json");
  const bool has_patch = fs::exists(results / "influence_matrix.csv");
  if (!has_boundary && !has_depth && !has_ablation && !has_dose && !has_patch) {
    report.markdown = "nothing to report\n";
    return report;
  }
  report.empty = false;
  emit_grid_tables(results, &report.written);

  std::ostringstream md;
  md << "# Probe summary\n\nGenerated " << utc_now() << ".\n\n";
  std::optional<std::size_t> bpeak, dpeak;
  if (has_boundary) {
    const auto rows = parse_metric_rows_csv(read_text_file(results / "boundary_metrics.csv"));
    bpeak = boundary_peak_layer(rows);
    md << "## Boundary\n\n";
    if (bpeak) {
      const MetricRow* p = row_at(rows, *bpeak, false);
      const MetricRow* r = row_at(rows, *bpeak, true);
      md << "- Peak layer (pretrained linear AP): L" << *bpeak << ", AP " << format_metric(p->ap)
         << ", F1 " << format_metric(p->f1) << "\n";
      if (r && r->ap) md << "- Random-init AP at that layer: " << format_metric(r->ap)
                         << " (gap " << format_metric(*p->ap - *r->ap) << ")\n";
    }
    md << "\n";
  }
  if (has_depth) {
    const auto rows = parse_metric_rows_csv(read_text_file(results / "depth_metrics.csv"));
    dpeak = depth_peak_layer(rows);
    md << "## Depth\n\n";
    if (dpeak) {
      const MetricRow* p = row_at(rows, *dpeak, false);
      const MetricRow* r = row_at(rows, *dpeak, true);
      md << "- Best layer (pretrained linear MAE): L" << *dpeak << ", MAE " << format_metric(p->mae)
         << ", RMSE " << format_metric(p->rmse) << "\n";
      if (r && r->mae) md << "- Random-init MAE at that layer: " << format_metric(r->mae) << "\n";
    }
    md << "\n";
  }
  if (bpeak && dpeak) {
    md << "## Cross-task\n\n- Depth peak minus boundary peak: "
       << static_cast<long>(*dpeak) - static_cast<long>(*bpeak) << " layers\n\n";
  }
  md << "## Interventions\n\n";
  if (has_ablation) {
    const auto rows = read_csv(results / "ablation.csv");
    md << "- Ablation (probe-direction gap %, worst random-direction gap %):";
    for (std::size_t i = 1; i < rows.size(); ++i) {
      md << (i == 1 ? " " : ", ") << "L" << rows[i][0] << " " << rows[i][3] << " / " << rows[i][6];
    }
    md << "\n";
  } else {
    md << "- Ablation: absent\n";
  }
  if (has_dose) {
    const json curves = json::parse(read_text_file(results / "dose_response.json"));
    std::size_t monotone = 0;
    for (const auto& cv : curves) {
      const auto mae = cv.at("mae").get<std::vector<double>>();
      if (std::is_sorted(mae.begin(), mae.end())) ++monotone;
    }
    md << "- Dose-response: " << monotone << " of " << curves.size()
       << " layer curves are non-decreasing in alpha\n";
  } else {
    md << "- Dose-response: absent\n";
  }
  if (has_patch) {
    const auto rows = read_csv(results / "influence_matrix.csv");
    md << "- Patching, effect at T = L+1:";
    bool first = true;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const std::size_t l = std::stoul(rows[i][0]);
      if (l + 2 < rows[i].size() && !rows[i][l + 2].empty()) {
        md << (first ? " " : ", ") << "L" << l << " " << rows[i][l + 2];
        first = false;
      }
    }
    md << (first ? " none\n" : "\n");
  } else {
    md << "- Patching: absent\n";
  }
  report.markdown = md.str();
  write_text_file(results / "summary.md", report.markdown);
  report.written.push_back("summary.md");
  return report;
}

}  // namespace vitprobe
