#include <doctest.h>

#include <atomic>

#include "test_support.hpp"
#include "vitprobe/cache.hpp"
#include "vitprobe/errors.hpp"
#include "vitprobe/parallel.hpp"

using namespace vitprobe;
using testing::TempDir;
using testing::random_tensor;

namespace {

HiddenStateStack make_stack(const std::string& id, InitKind init, std::uint64_t seed) {
  Rng rng(seed);
  return {random_tensor({3, 4, 5}, rng), id, init};
}

}  // namespace

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex(std::string_view("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex(std::string_view("")) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  TempDir tmp;
  write_text_file(tmp / "nested/dir/a.txt", "abc");
  CHECK(read_text_file(tmp / "nested/dir/a.txt") == "abc");
  CHECK(sha256_file(tmp / "nested/dir/a.txt") == sha256_hex(std::string_view("abc")));
  CHECK_THROWS_AS(read_text_file(tmp / "missing.txt"), IoError);
}

TEST_CASE("mapped file") {
  TempDir tmp;
  const std::vector<float> v{1.5f, -2.0f, 3.25f};
  write_file_bytes(tmp / "v.f32", as_bytes(v));
  MappedFile m(tmp / "v.f32");
  CHECK(m.bytes().size() == 12);
  CHECK(std::vector<float>(m.floats().begin(), m.floats().end()) == v);
  MappedFile moved = std::move(m);
  CHECK(moved.floats()[2] == 3.25f);
  CHECK_THROWS_AS(MappedFile(tmp / "nope"), IoError);
}

TEST_CASE("feature cache round trip and integrity") {
  TempDir tmp;
  const InitKind pre = InitKind::pretrained(), rnd = InitKind::random_seed(3);
  {
    FeatureCache cache(tmp.path());
    CHECK(cache.stack_shape().empty());
    cache.put(make_stack("img1", pre, 1));
    cache.put(make_stack("img2", pre, 2));
    cache.put(make_stack("img1", rnd, 3));
    cache.set_source_digest(pre, "digest-a");
    CHECK_THROWS_AS(cache.put({Tensor({2, 4, 5}), "bad", pre}), DimensionError);
    cache.save();
  }
  FeatureCache cache(tmp.path());
  CHECK(cache.stack_shape() == Shape{3, 4, 5});
  CHECK(cache.contains("img1", rnd));
  CHECK(!cache.contains("img2", rnd));
  CHECK(cache.source_digest(pre) == "digest-a");
  CHECK(cache.source_digest(rnd).empty());
  CHECK(cache.get("img2", pre).values == make_stack("img2", pre, 2).values);
  CHECK(cache.layer("img1", rnd, 2) == make_stack("img1", rnd, 3).values.slice(2));
  CHECK_THROWS_AS(cache.get("img3", pre), DataError);
  CHECK_THROWS_AS(cache.layer("img1", pre, 3), DataError);
  CHECK(cache.entries().size() == 3);
  for (const auto& e : cache.entries()) CHECK(sha256_file(tmp.path() / e.file) == e.sha256);
  CHECK(cache.verify().empty());

  // Flip one byte of one blob.
  const auto path = tmp.path() / (rnd.label() + "/img1.f32");
  std::string raw = testing::read_text(path);
  raw[7] ^= 0x20;
  std::ofstream(path, std::ios::binary) << raw;
  const auto bad = cache.verify();
  REQUIRE(bad.size() == 1);
  CHECK(bad[0].find("img1") != std::string::npos);

  cache.drop(rnd);
  CHECK(!cache.contains("img1", rnd));
  CHECK(cache.contains("img1", pre));
}

TEST_CASE("concurrent puts") {
  TempDir tmp;
  FeatureCache cache(tmp.path());
  parallel_for(40, 4, [&](std::size_t i) {
    cache.put(make_stack("img" + std::to_string(i), InitKind::pretrained(), i));
  });
  cache.save();
  CHECK(FeatureCache(tmp.path()).entries().size() == 40);
  CHECK(cache.verify().empty());
}

TEST_CASE("parallel_for") {
  std::vector<int> out(100, 0);
  parallel_for(100, 7, [&](std::size_t i) { out[i] = int(i * i); });
  for (int i = 0; i < 100; ++i) CHECK(out[i] == i * i);

  std::atomic<int> calls{0};
  parallel_for(0, 4, [&](std::size_t) { ++calls; });
  CHECK(calls == 0);

  // The lowest failing index wins, whatever the scheduling.
  for (std::size_t workers : {1u, 3u, 8u}) {
    try {
      parallel_for(50, workers, [](std::size_t i) {
        if (i == 13 || i == 31) throw DataError("item " + std::to_string(i));
      });
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()) == "item 13");
    }
  }
  CHECK(default_workers() >= 1);
}
