#include "vitprobe/fixtures.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "vitprobe/cache.hpp"
#include "vitprobe/errors.hpp"
#include "vitprobe/image.hpp"
#include "vitprobe/rng.hpp"
#include "vitprobe/safetensors.hpp"

namespace vitprobe {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string to_string(FixtureKind kind) {
  switch (kind) {
    case FixtureKind::planted_regression: return "planted-regression";
    case FixtureKind::identity_carry: return "identity-carry";
    case FixtureKind::tiny_encoder: return "tiny-encoder";
  }
  return "?";
}

FixtureKind parse_fixture_kind(std::string_view text) {
  if (text == "planted-regression") return FixtureKind::planted_regression;
  if (text == "identity-carry") return FixtureKind::identity_carry;
  if (text == "tiny-encoder") return FixtureKind::tiny_encoder;
  throw DataError("unknown fixture kind '" + std::string(text) + "'");
}

// ---- planted regression ----------------------------------------------------------

PlantedRegression make_planted_regression(std::uint64_t seed, const PlantedOptions& o) {
  if (o.train + o.val >= o.samples) throw ContractError("planted fixture leaves no test samples");
  PlantedRegression f;
  f.options = o;
  f.seed = seed;
  const std::size_t d = o.width;

  Rng dir_rng(derive_seed(seed, "planted/direction"));
  f.w_star.resize(d);
  double n2 = 0.0;
  for (auto& x : f.w_star) {
    x = dir_rng.normal();
    n2 += x * x;
  }
  for (auto& x : f.w_star) x /= std::sqrt(n2);

  Rng rng(derive_seed(seed, "planted/samples"));
  const double label_std = 1.0 / std::sqrt(o.signal_to_noise);
  std::vector<float> features(o.samples * d);
  std::vector<double> targets(o.samples);
  std::vector<double> noise(d);
  for (std::size_t i = 0; i < o.samples; ++i) {
    const double s = rng.normal();
    double along = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      noise[k] = o.orthogonal_std * rng.normal();
      along += noise[k] * f.w_star[k];
    }
    for (std::size_t k = 0; k < d; ++k) {
      features[i * d + k] = static_cast<float>(s * f.w_star[k] + noise[k] - along * f.w_star[k]);
    }
    targets[i] = s + label_std * rng.normal();
  }

  auto slice = [&](std::size_t begin, std::size_t count) {
    ProbeData data;
    data.features = Tensor({count, d}, std::vector<float>(features.begin() + static_cast<std::ptrdiff_t>(begin * d),
                                                          features.begin() + static_cast<std::ptrdiff_t>((begin + count) * d)));
    data.labels.assign(targets.begin() + static_cast<std::ptrdiff_t>(begin),
                       targets.begin() + static_cast<std::ptrdiff_t>(begin + count));
    return data;
  };
  f.train = slice(0, o.train);
  f.val = slice(o.train, o.val);
  f.test = slice(o.train + o.val, o.samples - o.train - o.val);
  return f;
}

void write_planted_regression(const fs::path& dir, const PlantedRegression& f) {
  std::vector<float> features, targets;
  for (const ProbeData* part : {&f.train, &f.val, &f.test}) {
    features.insert(features.end(), part->features.values().begin(), part->features.values().end());
    for (double y : part->labels) targets.push_back(static_cast<float>(y));
  }
  write_file_bytes(dir / "features.f32", as_bytes(features));
  write_file_bytes(dir / "targets.f32", as_bytes(targets));
  const json meta = {{"seed", f.seed},
                     {"width", f.options.width},
                     {"samples", f.options.samples},
                     {"splits", {{"train", f.options.train}, {"val", f.options.val},
                                 {"test", f.test.labels.size()}}},
                     {"signal_to_noise", f.options.signal_to_noise},
                     {"orthogonal_std", f.options.orthogonal_std},
                     {"w_star", f.w_star}};
  write_text_file(dir / "planted.json", meta.dump(2) + "\n");
}

// ---- encoders --------------------------------------------------------------------

EncoderConfig tiny_encoder_config(std::size_t layers) {
  EncoderConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.width = 16;
  c.layers = layers;
  c.heads = 2;
  c.mlp_dim = 64;
  return c;
}

namespace {

NamedTensorStore as_pretrained(NamedTensorStore store, const std::string& fixture) {
  store.metadata["init"] = "pretrained";
  store.metadata.erase("seed");
  store.metadata["fixture"] = fixture;
  return store;
}

}  // namespace

NamedTensorStore make_tiny_encoder(std::uint64_t seed, std::size_t layers) {
  return as_pretrained(random_init(tiny_encoder_config(layers), seed, {kTinyInitStd}),
                       "tiny-encoder");
}

NamedTensorStore make_identity_carry_encoder(std::uint64_t seed, std::size_t layers) {
  const EncoderConfig config = tiny_encoder_config(layers);
  NamedTensorStore store = random_init(config, seed, {kTinyInitStd});
  for (std::size_t i = 0; i < layers; ++i) {
    for (const char* suffix : {"attention.output.dense.weight", "attention.output.dense.bias",
                               "output.dense.weight", "output.dense.bias"}) {
      auto& t = store.entries.at(tensor_names::block(i, suffix));
      std::fill(t.values().begin(), t.values().end(), 0.0f);
    }
  }
  return as_pretrained(std::move(store), "identity-carry");
}

// ---- synthetic datasets ------------------------------------------------------------

namespace {

struct Scene {
  std::size_t size = 0;
  std::vector<double> depth;       // metres
  std::vector<std::uint8_t> label; // 0 background, k for rectangle k
  RgbImage rgb;
};

Scene make_scene(Rng& rng, std::size_t size) {
  Scene s;
  s.size = size;
  s.depth.resize(size * size);
  s.label.assign(size * size, 0);
  const double far = 4.0 + 4.0 * rng.uniform();
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      s.depth[y * size + x] = far - 2.5 * static_cast<double>(y) / static_cast<double>(size - 1);
    }
  }
  const std::size_t rects = 1 + rng.uniform_index(2);
  std::vector<std::array<double, 3>> tints{{0.8 + 0.2 * rng.uniform(), 0.8 + 0.2 * rng.uniform(),
                                            0.8 + 0.2 * rng.uniform()}};
  for (std::size_t r = 1; r <= rects; ++r) {
    const std::size_t w = 6 + rng.uniform_index(size / 2 - 5);
    const std::size_t h = 6 + rng.uniform_index(size / 2 - 5);
    const std::size_t x0 = 1 + rng.uniform_index(size - w - 1);
    const std::size_t y0 = 1 + rng.uniform_index(size - h - 1);
    const double d = 1.0 + 2.0 * rng.uniform();
    tints.push_back({0.5 + 0.5 * rng.uniform(), 0.5 + 0.5 * rng.uniform(), 0.5 + 0.5 * rng.uniform()});
    for (std::size_t y = y0; y < y0 + h; ++y) {
      for (std::size_t x = x0; x < x0 + w; ++x) {
        s.depth[y * size + x] = d;
        s.label[y * size + x] = static_cast<std::uint8_t>(r);
      }
    }
  }
  s.rgb.width = s.rgb.height = size;
  s.rgb.pixels.resize(size * size * 3);
  for (std::size_t i = 0; i < size * size; ++i) {
    const double shade = 235.0 - 20.0 * s.depth[i];
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = shade * tints[s.label[i]][c] + 6.0 * (rng.uniform() - 0.5);
      s.rgb.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return s;
}

// Region contours as seen by one annotator: shifted by up to one pixel, with
// some regions skipped.
GrayImage annotate(const Scene& s, Rng& rng) {
  const std::size_t n = s.size;
  const std::size_t dx = rng.uniform_index(2), dy = rng.uniform_index(2);
  std::vector<char> skip(256, 0);
  for (auto& v : skip) v = rng.uniform() < 0.2 ? 1 : 0;
  GrayImage g;
  g.width = g.height = n;
  g.bit_depth = 8;
  g.pixels.assign(n * n, 0);
  for (std::size_t y = 0; y + 1 < n; ++y) {
    for (std::size_t x = 0; x + 1 < n; ++x) {
      const std::uint8_t l = s.label[y * n + x];
      const bool edge = l != s.label[y * n + x + 1] || l != s.label[(y + 1) * n + x];
      if (!edge) continue;
      const std::uint8_t region = std::max({l, s.label[y * n + x + 1], s.label[(y + 1) * n + x]});
      if (skip[region]) continue;
      g.pixels[std::min(n - 1, y + dy) * n + std::min(n - 1, x + dx)] = 255;
    }
  }
  return g;
}

std::string make_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
  return buf;
}

void write_expected(const fs::path& root, const SplitCounts& c) {
  const json j = {{"expected_splits", {{"train", c.train}, {"val", c.val}, {"test", c.test}}}};
  write_text_file(root / "dataset.json", j.dump(2) + "\n");
}

}  // namespace

void write_synthetic_boundary_dataset(const fs::path& root, std::uint64_t seed,
                                      const SyntheticDatasetOptions& o) {
  Rng rng(derive_seed(seed, "synthetic/boundary"));
  std::size_t index = 0;
  const std::pair<const char*, std::size_t> splits[] = {
      {"train", o.boundary.train}, {"val", o.boundary.val}, {"test", o.boundary.test}};
  for (const auto& [split, count] : splits) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::string id = make_id("b", ++index);
      const Scene scene = make_scene(rng, o.source_size);
      fs::create_directories(root / "images" / split);
      write_png(root / "images" / split / (id + ".png"), scene.rgb);
      const fs::path gt = root / "groundTruth" / split / id;
      fs::create_directories(gt);
      for (std::size_t a = 0; a < o.annotators; ++a) {
        write_png(gt / (std::to_string(a) + ".png"), annotate(scene, rng));
      }
    }
  }
  write_expected(root, o.boundary);
}

void write_synthetic_depth_dataset(const fs::path& root, std::uint64_t seed,
                                   const SyntheticDatasetOptions& o) {
  Rng rng(derive_seed(seed, "synthetic/depth"));
  fs::create_directories(root / "images");
  fs::create_directories(root / "depth");
  std::size_t index = 0;
  const std::pair<const char*, std::size_t> splits[] = {
      {"train", o.depth.train}, {"val", o.depth.val}, {"test", o.depth.test}};
  for (const auto& [split, count] : splits) {
    std::ostringstream list;
    for (std::size_t i = 0; i < count; ++i) {
      const std::string id = make_id("n", ++index);
      const Scene scene = make_scene(rng, o.source_size);
      write_png(root / "images" / (id + ".png"), scene.rgb);
      GrayImage depth;
      depth.width = depth.height = o.source_size;
      depth.bit_depth = 16;
      depth.pixels.resize(scene.depth.size());
      for (std::size_t k = 0; k < scene.depth.size(); ++k) {
        // A few missing measurements, as in Kinect captures.
        const bool missing = rng.uniform() < 0.03;
        depth.pixels[k] = missing ? 0 : static_cast<std::uint16_t>(std::lround(scene.depth[k] * 1000.0));
      }
      write_png(root / "depth" / (id + ".png"), depth);
      list << id << '\n';
    }
    write_text_file(root / "splits" / (std::string(split) + ".txt"), list.str());
  }
  write_expected(root, o.depth);
}

// ---- fixture bundles -----------------------------------------------------------------

FixtureFiles make_fixture(FixtureKind kind, std::uint64_t seed, const fs::path& dir) {
  FixtureFiles files;
  files.root = dir;
  fs::create_directories(dir);
  if (kind == FixtureKind::planted_regression) {
    write_planted_regression(dir, make_planted_regression(seed));
    return files;
  }

  const NamedTensorStore weights = kind == FixtureKind::tiny_encoder
                                       ? make_tiny_encoder(seed)
                                       : make_identity_carry_encoder(seed);
  files.weights = dir / "weights" / "model.safetensors";
  fs::create_directories(files.weights.parent_path());
  write_safetensors(files.weights, weights);
  write_synthetic_boundary_dataset(dir / "bsds", seed);
  write_synthetic_depth_dataset(dir / "nyu", seed);

  files.config = dir / "experiment.toml";
  std::ostringstream toml;
  toml << "# " << to_string(kind) << " fixture, seed " << seed << "\n"
       << "[model]\n"
       << "weights = \"weights/model.safetensors\"\n"
       << "random_seeds = [" << derive_seed(seed, "fixture/random-init") % 1000 << "]\n"
       << "random_init_std = " << kTinyInitStd << "\n\n"
       << "[data]\n"
       << "boundary_root = \"bsds\"\n"
       << "depth_root = \"nyu\"\n\n"
       << "[run]\n"
       << "cache_dir = \"cache\"\n"
       << "master_seed = " << seed << "\n"
       << "workers = 1\n\n"
       << "[probe]\n"
       << "batch_size = 8\n"
       << "lr = 0.01\n\n"
       << "[interventions]\n"
       << "contrast_pairs = 4\n";
  write_text_file(files.config, toml.str());
  return files;
}

}  // namespace vitprobe
