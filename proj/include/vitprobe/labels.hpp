#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "vitprobe/image.hpp"

namespace vitprobe {

enum class Task { boundary, depth };
enum class Split { train, val, test };

std::string to_string(Task task);
std::string to_string(Split split);
Task parse_task(std::string_view text);
Split parse_split(std::string_view text);

struct BinaryMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // 0 or 1, row-major

  BinaryMap() = default;
  BinaryMap(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}
  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }

  friend bool operator==(const BinaryMap&, const BinaryMap&) = default;
};

struct BoundaryAnnotationSet {
  std::string image_id;
  std::vector<BinaryMap> annotations;  // one per annotator, same resolution
};

struct DepthMap {
  std::string image_id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> meters;
  std::vector<std::uint8_t> valid;

  // 16-bit depth export in millimetres; zero marks a missing measurement.
  static DepthMap from_millimetres(const GrayImage& image, std::string image_id = {});
};

// Model-resolution patch grid the labels are aligned with.
struct PatchGeometry {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patches() const { return grid() * grid(); }
};

enum class TieRule { strict_majority, half_or_more };

struct ConsensusOptions {
  std::size_t target_size = 224;
  // Square dilation applied to each annotation at source resolution before
  // nearest-neighbour resizing; keeps 1px contours from vanishing.
  std::size_t dilation_radius = 1;
  TieRule tie = TieRule::strict_majority;
};

struct PatchLabelSet {
  std::string image_id;
  Task task = Task::boundary;
  std::vector<float> labels;  // row-major patch order, same as encoder tokens
  Split split = Split::train;
};

BinaryMap resize_nearest(const BinaryMap& map, std::size_t height, std::size_t width);
BinaryMap dilate(const BinaryMap& map, std::size_t radius);
BinaryMap read_binary_map(const std::filesystem::path& path);  // nonzero -> 1

BinaryMap consensus_boundaries(const BoundaryAnnotationSet& anns,
                               const ConsensusOptions& options = {});

// Label 1 iff any pixel of the patch is set. Throws DimensionError unless the
// map is image_size x image_size.
std::vector<float> boundary_patch_labels(const BinaryMap& consensus,
                                         const PatchGeometry& geometry = {});

struct DepthLabelOptions {
  PatchGeometry geometry;
  double max_depth_m = 10.0;
};

/// Masked bilinear resize to model resolution, mean over each patch's valid
/// pixels, divide by max depth, clamp to [0, 1]. A patch without any valid
/// pixel takes the label of the nearest patch that has one.
std::vector<float> depth_patch_labels(const DepthMap& depth,
                                      const DepthLabelOptions& options = {});

// ---- dataset layouts ---------------------------------------------------------

struct DatasetItem {
  std::string image_id;
  Split split = Split::train;
  std::filesystem::path image;
  std::vector<std::filesystem::path> annotations;  // boundary task
  std::filesystem::path depth;                     // depth task
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;

  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

struct DatasetIndex {
  Task task = Task::boundary;
  std::filesystem::path root;
  std::vector<DatasetItem> items;  // grouped train, val, test; ids sorted within
  SplitCounts observed;
  SplitCounts expected;
  std::string warning;  // non-empty when observed != expected
};

SplitCounts published_split_counts(Task task);

/// Scans a dataset directory and assigns splits.
///
/// Boundary (BSDS500 export):
///   images/{train,val,test}/<id>.{jpg,png}
///   groundTruth/{train,val,test}/<id>/<annotator>.png
/// Depth (NYU Depth V2 export):
///   images/<id>.{png,jpg}, depth/<id>.png (uint16 millimetres)
///   splits/{train,val,test}.txt (one id per line; without val.txt, the
///   validation ids are carved from train by a fixed seeded shuffle)
/// An optional dataset.json {"expected_splits": {"train":..,"val":..,"test":..}}
/// overrides the published counts used for the mismatch warning.
DatasetIndex assign_splits(Task task, const std::filesystem::path& root);

struct LabelOptions {
  ConsensusOptions consensus;
  DepthLabelOptions depth;
};

PatchLabelSet make_patch_labels(const DatasetItem& item, Task task,
                                const LabelOptions& options);

// ---- label cache -------------------------------------------------------------

struct LabelCache {
  Task task = Task::boundary;
  PatchGeometry geometry;
  std::vector<PatchLabelSet> sets;

  const PatchLabelSet& find(const std::string& image_id) const;
  std::vector<const PatchLabelSet*> in_split(Split split) const;
};

// labels.bin (uint8 boundary / float32 depth, little-endian) + manifest.json.
void write_label_cache(const std::filesystem::path& dir, const LabelCache& cache);
LabelCache read_label_cache(const std::filesystem::path& dir);

}  // namespace vitprobe
