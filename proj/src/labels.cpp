#include "vitprobe/labels.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <limits>

#include "vitprobe/cache.hpp"
#include "vitprobe/errors.hpp"
#include "vitprobe/rng.hpp"

namespace vitprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Task task) { return task == Task::boundary ? "boundary" : "depth"; }

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Task parse_task(std::string_view text) {
  if (text == "boundary") return Task::boundary;
  if (text == "depth") return Task::depth;
  throw DataError("unknown task '" + std::string(text) + "'");
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw DataError("unknown split '" + std::string(text) + "'");
}

DepthMap DepthMap::from_millimetres(const GrayImage& image, std::string image_id) {
  DepthMap d;
  d.image_id = std::move(image_id);
  d.height = image.height;
  d.width = image.width;
  d.meters.resize(image.pixels.size());
  d.valid.resize(image.pixels.size());
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    d.meters[i] = static_cast<float>(image.pixels[i] / 1000.0);
    d.valid[i] = image.pixels[i] > 0;
  }
  return d;
}

BinaryMap resize_nearest(const BinaryMap& map, std::size_t height, std::size_t width) {
  BinaryMap out(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const auto sy = std::min(map.height - 1, (2 * y + 1) * map.height / (2 * height));
    for (std::size_t x = 0; x < width; ++x) {
      const auto sx = std::min(map.width - 1, (2 * x + 1) * map.width / (2 * width));
      out.at(y, x) = map.at(sy, sx);
    }
  }
  return out;
}

BinaryMap dilate(const BinaryMap& map, std::size_t radius) {
  if (radius == 0) return map;
  BinaryMap out(map.height, map.width);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto h = static_cast<std::ptrdiff_t>(map.height);
  const auto w = static_cast<std::ptrdiff_t>(map.width);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      if (!map.pixels[static_cast<std::size_t>(y * w + x)]) continue;
      for (auto yy = std::max<std::ptrdiff_t>(0, y - r); yy <= std::min(h - 1, y + r); ++yy)
        for (auto xx = std::max<std::ptrdiff_t>(0, x - r); xx <= std::min(w - 1, x + r); ++xx)
          out.pixels[static_cast<std::size_t>(yy * w + xx)] = 1;
    }
  }
  return out;
}

BinaryMap read_binary_map(const fs::path& path) {
  const GrayImage g = read_gray_png(path);
  BinaryMap m(g.height, g.width);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) m.pixels[i] = g.pixels[i] != 0;
  return m;
}

BinaryMap consensus_boundaries(const BoundaryAnnotationSet& anns,
                               const ConsensusOptions& options) {
  if (anns.annotations.empty()) {
    throw DataError("image '" + anns.image_id + "' has no boundary annotations");
  }
  const std::size_t n = options.target_size;
  const auto& first = anns.annotations.front();
  std::vector<std::size_t> votes(n * n, 0);
  for (const auto& a : anns.annotations) {
    if (a.height != first.height || a.width != first.width) {
      throw DimensionError("annotations of '" + anns.image_id + "' differ in resolution");
    }
    const BinaryMap m = resize_nearest(dilate(a, options.dilation_radius), n, n);
    for (std::size_t i = 0; i < votes.size(); ++i) votes[i] += m.pixels[i];
  }
  const std::size_t k = anns.annotations.size();
  BinaryMap out(n, n);
  for (std::size_t i = 0; i < votes.size(); ++i) {
    out.pixels[i] = options.tie == TieRule::strict_majority ? 2 * votes[i] > k
                                                            : 2 * votes[i] >= k;
  }
  return out;
}

std::vector<float> boundary_patch_labels(const BinaryMap& consensus,
                                         const PatchGeometry& geometry) {
  const std::size_t s = geometry.image_size, p = geometry.patch_size, g = geometry.grid();
  if (consensus.height != s || consensus.width != s) {
    throw DimensionError("boundary map is " + std::to_string(consensus.height) + "x" +
                         std::to_string(consensus.width) + ", expected " +
                         std::to_string(s) + "x" + std::to_string(s));
  }
  std::vector<float> labels(geometry.patches(), 0.0f);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      if (consensus.at(y, x)) labels[(y / p) * g + x / p] = 1.0f;
    }
  }
  return labels;
}

std::vector<float> depth_patch_labels(const DepthMap& depth, const DepthLabelOptions& options) {
  const std::size_t s = options.geometry.image_size, p = options.geometry.patch_size;
  const std::size_t g = options.geometry.grid();
  if (depth.height == 0 || depth.width == 0 ||
      depth.meters.size() != depth.height * depth.width ||
      depth.valid.size() != depth.meters.size()) {
    throw DimensionError("depth map '" + depth.image_id + "' has inconsistent dimensions");
  }
  if (std::none_of(depth.valid.begin(), depth.valid.end(), [](auto v) { return v != 0; })) {
    throw DataError("depth map '" + depth.image_id + "' has no valid pixels");
  }

  // Bilinear weights renormalised over valid source pixels; with a fully valid
  // map this is the ordinary bilinear resize.
  const auto ty = bilinear_taps(depth.height, s);
  const auto tx = bilinear_taps(depth.width, s);
  std::vector<double> sum(g * g, 0.0);
  std::vector<std::size_t> count(g * g, 0);
  for (std::size_t y = 0; y < s; ++y) {
    const std::size_t ys[2] = {ty[y].lo, ty[y].hi};
    const double wy[2] = {1.0 - ty[y].frac, ty[y].frac};
    for (std::size_t x = 0; x < s; ++x) {
      const std::size_t xs[2] = {tx[x].lo, tx[x].hi};
      const double wx[2] = {1.0 - tx[x].frac, tx[x].frac};
      double num = 0.0, den = 0.0;
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          const std::size_t idx = ys[a] * depth.width + xs[b];
          const double wgt = wy[a] * wx[b];
          if (wgt > 0.0 && depth.valid[idx]) {
            num += wgt * depth.meters[idx];
            den += wgt;
          }
        }
      }
      if (den > 0.0) {
        const std::size_t patch = (y / p) * g + x / p;
        sum[patch] += num / den;
        ++count[patch];
      }
    }
  }

  std::vector<float> labels(g * g);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (count[i] == 0) continue;
    const double v = sum[i] / static_cast<double>(count[i]) / options.max_depth_m;
    labels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (count[i] != 0) continue;
    std::size_t best = labels.size();
    std::size_t best_dist = std::numeric_limits<std::size_t>::max();
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (count[j] == 0) continue;
      const auto dy = static_cast<std::ptrdiff_t>(i / g) - static_cast<std::ptrdiff_t>(j / g);
      const auto dx = static_cast<std::ptrdiff_t>(i % g) - static_cast<std::ptrdiff_t>(j % g);
      const auto dist = static_cast<std::size_t>(dy * dy + dx * dx);
      if (dist < best_dist) {
        best_dist = dist;
        best = j;
      }
    }
    labels[i] = labels[best];
  }
  return labels;
}

// ---- dataset layouts -----------------------------------------------------------

SplitCounts published_split_counts(Task task) {
  return task == Task::boundary ? SplitCounts{200, 100, 200} : SplitCounts{675, 120, 654};
}

namespace {

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> sorted_entries(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> read_id_list(const fs::path& file) {
  std::ifstream in(file);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

fs::path find_image(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".png", ".jpg", ".jpeg", ".PNG", ".JPG"}) {
    fs::path p = dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  return {};
}

void scan_boundary(DatasetIndex& index) {
  for (Split split : {Split::train, Split::val, Split::test}) {
    const auto name = to_string(split);
    for (const auto& img : sorted_entries(index.root / "images" / name)) {
      if (!is_image_file(img)) continue;
      DatasetItem item;
      item.image_id = img.stem().string();
      item.split = split;
      item.image = img;
      for (const auto& ann : sorted_entries(index.root / "groundTruth" / name / item.image_id)) {
        if (ann.extension() == ".png") item.annotations.push_back(ann);
      }
      if (item.annotations.empty()) {
        throw DataError("no ground-truth annotations for " + img.string());
      }
      index.items.push_back(std::move(item));
    }
  }
}

void scan_depth(DatasetIndex& index) {
  const fs::path splits = index.root / "splits";
  std::vector<std::string> train = read_id_list(splits / "train.txt");
  std::vector<std::string> val = read_id_list(splits / "val.txt");
  const std::vector<std::string> test = read_id_list(splits / "test.txt");
  if (val.empty() && !fs::exists(splits / "val.txt") && !train.empty()) {
    std::vector<std::string> shuffled = train;
    std::sort(shuffled.begin(), shuffled.end());
    Rng rng(derive_seed(0, "nyu-val-carve"));
    rng.shuffle(shuffled);
    const std::size_t n_val = std::min(index.expected.val, shuffled.size() / 2);
    val.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_val), shuffled.end());
  }
  auto add = [&](std::vector<std::string> ids, Split split) {
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) {
      DatasetItem item;
      item.image_id = id;
      item.split = split;
      item.image = find_image(index.root / "images", id);
      item.depth = index.root / "depth" / (id + ".png");
      if (item.image.empty()) throw DataError("missing RGB image for NYU id '" + id + "'");
      if (!fs::exists(item.depth)) throw DataError("missing depth map " + item.depth.string());
      index.items.push_back(std::move(item));
    }
  };
  add(train, Split::train);
  add(val, Split::val);
  add(test, Split::test);
}

}  // namespace

DatasetIndex assign_splits(Task task, const fs::path& root) {
  DatasetIndex index;
  index.task = task;
  index.root = root;
  index.expected = published_split_counts(task);
  if (!fs::is_directory(root)) throw DataError("dataset directory not found: " + root.string());

  if (fs::exists(root / "dataset.json")) {
    std::ifstream in(root / "dataset.json");
    const json j = json::parse(in);
    if (j.contains("expected_splits")) {
      const auto& e = j["expected_splits"];
      index.expected = {e.value("train", std::size_t{0}), e.value("val", std::size_t{0}),
                        e.value("test", std::size_t{0})};
    }
  }

  if (task == Task::boundary) {
    scan_boundary(index);
  } else {
    scan_depth(index);
  }
  if (index.items.empty()) {
    throw DataError("no " + to_string(task) + " images found under " + root.string());
  }
  for (const auto& item : index.items) {
    switch (item.split) {
      case Split::train: ++index.observed.train; break;
      case Split::val: ++index.observed.val; break;
      case Split::test: ++index.observed.test; break;
    }
  }
  if (index.observed != index.expected) {
    const auto& o = index.observed;
    const auto& e = index.expected;
    index.warning = to_string(task) + " split counts " + std::to_string(o.train) + "/" +
                    std::to_string(o.val) + "/" + std::to_string(o.test) +
                    " differ from expected " + std::to_string(e.train) + "/" +
                    std::to_string(e.val) + "/" + std::to_string(e.test);
  }
  return index;
}

PatchLabelSet make_patch_labels(const DatasetItem& item, Task task,
                                const LabelOptions& options) {
  PatchLabelSet set;
  set.image_id = item.image_id;
  set.task = task;
  set.split = item.split;
  if (task == Task::boundary) {
    BoundaryAnnotationSet anns{item.image_id, {}};
    for (const auto& path : item.annotations) anns.annotations.push_back(read_binary_map(path));
    ConsensusOptions consensus = options.consensus;
    consensus.target_size = options.depth.geometry.image_size;
    set.labels = boundary_patch_labels(consensus_boundaries(anns, consensus),
                                       options.depth.geometry);
  } else {
    const DepthMap depth = DepthMap::from_millimetres(read_gray_png(item.depth), item.image_id);
    set.labels = depth_patch_labels(depth, options.depth);
  }
  return set;
}

// ---- label cache ---------------------------------------------------------------

const PatchLabelSet& LabelCache::find(const std::string& image_id) const {
  for (const auto& s : sets) {
    if (s.image_id == image_id) return s;
  }
  throw DataError("no " + to_string(task) + " labels for image '" + image_id + "'");
}

std::vector<const PatchLabelSet*> LabelCache::in_split(Split split) const {
  std::vector<const PatchLabelSet*> out;
  for (const auto& s : sets) {
    if (s.split == split) out.push_back(&s);
  }
  return out;
}

void write_label_cache(const fs::path& dir, const LabelCache& cache) {
  const std::size_t np = cache.geometry.patches();
  std::vector<std::uint8_t> blob;
  json entries = json::array();
  for (const auto& s : cache.sets) {
    if (s.labels.size() != np) {
      throw DimensionError("label set '" + s.image_id + "' has " +
                           std::to_string(s.labels.size()) + " labels, expected " +
                           std::to_string(np));
    }
    if (cache.task == Task::boundary) {
      for (float v : s.labels) blob.push_back(v > 0.5f ? 1 : 0);
    } else {
      const auto* bytes = reinterpret_cast<const std::uint8_t*>(s.labels.data());
      blob.insert(blob.end(), bytes, bytes + np * sizeof(float));
    }
    entries.push_back({{"image_id", s.image_id}, {"split", to_string(s.split)}});
  }
  json manifest = {{"task", to_string(cache.task)},
                   {"image_size", cache.geometry.image_size},
                   {"patch_size", cache.geometry.patch_size},
                   {"patches", np},
                   {"dtype", cache.task == Task::boundary ? "uint8" : "float32"},
                   {"file", "labels.bin"},
                   {"sha256", sha256_hex(blob)},
                   {"entries", entries}};
  write_file_bytes(dir / "labels.bin", blob);
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

LabelCache read_label_cache(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw DataError("no label cache at " + dir.string());
  std::ifstream in(manifest_path);
  const json m = json::parse(in);
  LabelCache cache;
  cache.task = parse_task(m.at("task").get<std::string>());
  cache.geometry = {m.at("image_size").get<std::size_t>(), m.at("patch_size").get<std::size_t>()};
  const auto blob = read_file_bytes(dir / m.at("file").get<std::string>());
  if (sha256_hex(blob) != m.at("sha256").get<std::string>()) {
    throw DataError("label cache " + dir.string() + " fails its checksum");
  }
  const std::size_t np = cache.geometry.patches();
  const std::size_t width = cache.task == Task::boundary ? 1 : sizeof(float);
  const auto& entries = m.at("entries");
  if (blob.size() != entries.size() * np * width) {
    throw DataError("label cache " + dir.string() + " has the wrong size");
  }
  std::size_t offset = 0;
  for (const auto& e : entries) {
    PatchLabelSet s;
    s.image_id = e.at("image_id").get<std::string>();
    s.task = cache.task;
    s.split = parse_split(e.at("split").get<std::string>());
    s.labels.resize(np);
    if (cache.task == Task::boundary) {
      for (std::size_t i = 0; i < np; ++i) s.labels[i] = blob[offset + i];
    } else {
      std::memcpy(s.labels.data(), blob.data() + offset, np * sizeof(float));
    }
    offset += np * width;
    cache.sets.push_back(std::move(s));
  }
  return cache;
}

}  // namespace vitprobe
