#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "test_support.hpp"
#include "vitprobe/errors.hpp"
#include "vitprobe/fixtures.hpp"
#include "vitprobe/labels.hpp"

using namespace vitprobe;
using testing::TempDir;
using testing::constant_depth;
using testing::naive_depth_labels;

namespace {

ConsensusOptions at_model_res() {
  ConsensusOptions o;
  o.dilation_radius = 0;
  return o;
}

}  // namespace

TEST_CASE("consensus vote") {
  BinaryMap marked(224, 224), blank(224, 224);
  marked.at(10, 20) = 1;

  SUBCASE("one annotator is its own consensus") {
    BoundaryAnnotationSet s{"a", {marked}};
    CHECK(consensus_boundaries(s, at_model_res()) == marked);
  }
  SUBCASE("2 of 4 is not a strict majority") {
    BoundaryAnnotationSet s{"a", {marked, marked, blank, blank}};
    CHECK(consensus_boundaries(s, at_model_res()).at(10, 20) == 0);
    ConsensusOptions half = at_model_res();
    half.tie = TieRule::half_or_more;
    CHECK(consensus_boundaries(s, half).at(10, 20) == 1);
  }
  SUBCASE("3 of 5 is") {
    BoundaryAnnotationSet s{"a", {marked, marked, marked, blank, blank}};
    CHECK(consensus_boundaries(s, at_model_res()).at(10, 20) == 1);
  }
  SUBCASE("no annotations") {
    CHECK_THROWS(consensus_boundaries(BoundaryAnnotationSet{"a", {}}, at_model_res()));
  }
  SUBCASE("mismatched resolutions") {
    BoundaryAnnotationSet s{"a", {marked, BinaryMap(100, 100)}};
    CHECK_THROWS_AS(consensus_boundaries(s), DimensionError);
  }
}

TEST_CASE("dilation keeps thin contours through downsampling") {
  // A 1px vertical contour at an even column of a 448 map falls between the
  // nearest-neighbour samples (odd columns) of a 224 resize unless dilated first.
  BinaryMap src(448, 448);
  for (std::size_t y = 0; y < 448; ++y) src.at(y, 100) = 1;
  BoundaryAnnotationSet s{"a", {src}};
  ConsensusOptions thin;
  thin.dilation_radius = 0;
  const BinaryMap lost = consensus_boundaries(s, thin);
  CHECK(std::count(lost.pixels.begin(), lost.pixels.end(), 1) == 0);
  const BinaryMap kept = consensus_boundaries(s);  // default radius 1
  CHECK(std::count(kept.pixels.begin(), kept.pixels.end(), 1) == 2 * 224);  // columns 99 and 101
}

TEST_CASE("nearest resize and dilate") {
  BinaryMap m(2, 2);
  m.at(0, 1) = 1;
  const BinaryMap up = resize_nearest(m, 4, 4);
  CHECK(up.at(0, 2) == 1);
  CHECK(up.at(1, 3) == 1);
  CHECK(up.at(2, 2) == 0);
  BinaryMap dot(5, 5);
  dot.at(2, 2) = 1;
  const BinaryMap d = dilate(dot, 1);
  CHECK(std::count(d.pixels.begin(), d.pixels.end(), 1) == 9);
  CHECK(d.at(1, 1) == 1);
  CHECK(d.at(0, 0) == 0);
}

TEST_CASE("boundary patch labels") {
  BinaryMap m(224, 224);
  auto labels = boundary_patch_labels(m);
  REQUIRE(labels.size() == 196);
  CHECK(std::all_of(labels.begin(), labels.end(), [](float v) { return v == 0.0f; }));

  m.at(0, 0) = 1;
  labels = boundary_patch_labels(m);
  CHECK(labels[0] == 1.0f);
  CHECK(std::accumulate(labels.begin(), labels.end(), 0.0f) == 1.0f);

  BinaryMap n(224, 224);
  n.at(16 * 3 + 15, 16 * 5) = 1;  // last row of patch row 3, first column of patch col 5
  labels = boundary_patch_labels(n);
  CHECK(labels[3 * 14 + 5] == 1.0f);
  CHECK(std::accumulate(labels.begin(), labels.end(), 0.0f) == 1.0f);

  CHECK_THROWS_AS(boundary_patch_labels(BinaryMap(100, 224)), DimensionError);
}

TEST_CASE("boundary labels are monotone under pixel additions") {
  Rng rng(21);
  BinaryMap m(224, 224);
  auto prev = boundary_patch_labels(m);
  for (int i = 0; i < 1000; ++i) {
    m.at(rng.uniform_index(224), rng.uniform_index(224)) = 1;
    const auto next = boundary_patch_labels(m);
    for (std::size_t p = 0; p < 196; ++p) REQUIRE(next[p] >= prev[p]);
    prev = next;
  }
}

TEST_CASE("depth patch labels") {
  SUBCASE("constant maps") {
    for (auto v : depth_patch_labels(constant_depth(48, 64, 5.0f))) CHECK(v == doctest::Approx(0.5));
    for (auto v : depth_patch_labels(constant_depth(48, 64, 12.0f))) CHECK(v == 1.0f);
  }
  SUBCASE("left-right ramp matches the analytic oracle") {
    // Bilinear interpolation of a linear ramp is exact, so each output pixel
    // is the ramp at its clamped source coordinate.
    const std::size_t h = 30, w = 50;
    DepthMap d = constant_depth(h, w, 0.0f);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) d.meters[y * w + x] = 10.0f * x / (w - 1);
    const auto got = depth_patch_labels(d);
    for (std::size_t px = 0; px < 14; ++px) {
      double mean = 0;
      for (std::size_t x = px * 16; x < px * 16 + 16; ++x) {
        const double u = std::clamp((x + 0.5) * double(w) / 224.0 - 0.5, 0.0, double(w - 1));
        mean += 10.0 * u / (w - 1);
      }
      mean /= 16.0 * 10.0;
      for (std::size_t py = 0; py < 14; ++py) CHECK(std::abs(got[py * 14 + px] - mean) < 1e-6);
    }
  }
  SUBCASE("random map matches the naive bilinear+mean oracle") {
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t h = 20 + rng.uniform_index(300), w = 20 + rng.uniform_index(300);
      DepthMap d = constant_depth(h, w, 0.0f);
      for (auto& v : d.meters) v = static_cast<float>(rng.uniform(0.5, 11.0));
      const auto got = depth_patch_labels(d);
      const auto want = naive_depth_labels(d);
      for (std::size_t i = 0; i < 196; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);
    }
  }
  SUBCASE("scaling commutes below the clamp") {
    Rng rng(8);
    DepthMap d = constant_depth(40, 40, 0.0f);
    for (auto& v : d.meters) v = static_cast<float>(rng.uniform(0.5, 4.0));
    DepthMap scaled = d;
    for (auto& v : scaled.meters) v *= 2.0f;
    const auto a = depth_patch_labels(d), b = depth_patch_labels(scaled);
    for (std::size_t i = 0; i < 196; ++i) CHECK(std::abs(b[i] - 2.0 * a[i]) < 1e-6);
  }
  SUBCASE("invalid pixels are excluded and empty patches borrow a neighbour") {
    DepthMap d = constant_depth(224, 224, 3.0f);
    for (std::size_t y = 0; y < 224; ++y)
      for (std::size_t x = 0; x < 224; ++x) {
        if (x >= 112) d.meters[y * 224 + x] = 7.0f;
        if (x < 16 && y < 16) {
          d.meters[y * 224 + x] = 0.0f;
          d.valid[y * 224 + x] = 0;
        }
      }
    const auto got = depth_patch_labels(d);
    CHECK(got[0] == doctest::Approx(0.3));  // inherited from patch 1 (distance 1, lowest index)
    CHECK(got[1] == doctest::Approx(0.3));
    CHECK(got[13] == doctest::Approx(0.7));
  }
  SUBCASE("entirely invalid map") {
    DepthMap d = constant_depth(10, 10, 0.0f);
    std::fill(d.valid.begin(), d.valid.end(), 0);
    CHECK_THROWS_AS(depth_patch_labels(d), DataError);
  }
}

TEST_CASE("depth from millimetres") {
  GrayImage g{3, 1, 16, {0, 5000, 12000}};
  const DepthMap d = DepthMap::from_millimetres(g, "x");
  CHECK(d.valid == std::vector<std::uint8_t>{0, 1, 1});
  CHECK(d.meters[1] == doctest::Approx(5.0));
  CHECK(d.meters[2] == doctest::Approx(12.0));
}

TEST_CASE("published split counts") {
  CHECK(published_split_counts(Task::boundary) == SplitCounts{200, 100, 200});
  CHECK(published_split_counts(Task::depth) == SplitCounts{675, 120, 654});
}

TEST_CASE("assign_splits on synthetic layouts") {
  TempDir tmp;
  SyntheticDatasetOptions opt;
  write_synthetic_boundary_dataset(tmp / "bsds", 3, opt);
  write_synthetic_depth_dataset(tmp / "nyu", 3, opt);

  const DatasetIndex b = assign_splits(Task::boundary, tmp / "bsds");
  CHECK(b.observed == opt.boundary);
  CHECK(b.warning.empty());
  CHECK(b.items.size() == 30);
  CHECK(b.items.front().annotations.size() == opt.annotators);

  const DatasetIndex d = assign_splits(Task::depth, tmp / "nyu");
  CHECK(d.observed == opt.depth);
  CHECK(d.warning.empty());
  for (std::size_t i = 1; i < d.items.size(); ++i) {
    if (d.items[i].split == d.items[i - 1].split) CHECK(d.items[i - 1].image_id < d.items[i].image_id);
    else CHECK(d.items[i - 1].split < d.items[i].split);
  }

  SUBCASE("count mismatch warns with observed counts") {
    std::filesystem::remove(tmp / "bsds" / "dataset.json");
    const DatasetIndex w = assign_splits(Task::boundary, tmp / "bsds");
    CHECK(w.expected == SplitCounts{200, 100, 200});
    CHECK(w.warning.find("12") != std::string::npos);
  }
  SUBCASE("val is carved deterministically when val.txt is absent") {
    std::filesystem::remove(tmp / "nyu" / "splits" / "val.txt");
    const DatasetIndex a = assign_splits(Task::depth, tmp / "nyu");
    const DatasetIndex again = assign_splits(Task::depth, tmp / "nyu");
    CHECK(a.observed.train + a.observed.val == opt.depth.train);
    CHECK(a.observed.val > 0);
    REQUIRE(a.items.size() == again.items.size());
    for (std::size_t i = 0; i < a.items.size(); ++i) {
      CHECK(a.items[i].image_id == again.items[i].image_id);
      CHECK(a.items[i].split == again.items[i].split);
    }
  }
}

TEST_CASE("assign_splits on an empty directory") {
  TempDir tmp;
  CHECK_THROWS_AS(assign_splits(Task::boundary, tmp.path()), DataError);
  CHECK_THROWS_AS(assign_splits(Task::depth, tmp.path()), DataError);
  CHECK_THROWS_AS(assign_splits(Task::depth, tmp / "missing"), DataError);
}

TEST_CASE("label sets and cache round trip") {
  TempDir tmp;
  write_synthetic_boundary_dataset(tmp / "bsds", 5);
  write_synthetic_depth_dataset(tmp / "nyu", 5);
  LabelOptions opt;
  for (Task task : {Task::boundary, Task::depth}) {
    const DatasetIndex idx = assign_splits(task, tmp / (task == Task::boundary ? "bsds" : "nyu"));
    LabelCache cache;
    cache.task = task;
    for (const auto& item : idx.items) cache.sets.push_back(make_patch_labels(item, task, opt));
    for (const auto& s : cache.sets) {
      REQUIRE(s.labels.size() == 196);
      for (float v : s.labels) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        if (task == Task::boundary) CHECK((v == 0.0f || v == 1.0f));
      }
    }
    write_label_cache(tmp / ("cache-" + to_string(task)), cache);
    const LabelCache back = read_label_cache(tmp / ("cache-" + to_string(task)));
    REQUIRE(back.sets.size() == cache.sets.size());
    for (std::size_t i = 0; i < back.sets.size(); ++i) {
      CHECK(back.sets[i].image_id == cache.sets[i].image_id);
      CHECK(back.sets[i].split == cache.sets[i].split);
      CHECK(back.sets[i].labels == cache.sets[i].labels);
    }
    CHECK_THROWS_AS(back.find("no-such-id"), DataError);
  }
}
