#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "test_support.hpp"
#include "vitprobe/errors.hpp"
#include "vitprobe/fixtures.hpp"
#include "vitprobe/interventions.hpp"

using namespace vitprobe;
using testing::random_tensor;

namespace {

DirectionSpec random_unit(std::size_t width, Rng& rng) {
  DirectionSpec d;
  d.unit.resize(width);
  double n = 0;
  for (auto& v : d.unit) {
    v = rng.normal();
    n += v * v;
  }
  for (auto& v : d.unit) v /= std::sqrt(n);
  return d;
}

double dot_unit(std::span<const float> h, const DirectionSpec& d) {
  double s = 0;
  for (std::size_t i = 0; i < h.size(); ++i) s += h[i] * d.unit[i];
  return s;
}

ProbeCheckpoint random_linear_probe(std::size_t width, std::uint64_t seed, std::size_t layer = 0) {
  Rng rng(seed);
  ProbeCheckpoint c;
  c.config.kind = ProbeKind::linear;
  c.config.task = Task::depth;
  c.config.layer = layer;
  c.config.input_width = width;
  for (std::size_t i = 0; i < width; ++i) c.params.push_back(float(rng.uniform(-1, 1)));
  c.params.push_back(float(rng.uniform(-0.5, 0.5)));
  return c;
}

ProbeData random_test_set(std::size_t n, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  ProbeData d{random_tensor({n, width}, rng), std::vector<double>(n)};
  for (auto& y : d.labels) y = rng.uniform();
  return d;
}

// Repeatedly takes the largest-gap unused pair; ties go to the smaller
// (lower id, higher id) pair.
std::vector<ContrastPair> greedy_oracle(std::vector<std::pair<std::string, double>> items,
                                        std::size_t n) {
  std::vector<ContrastPair> out;
  std::vector<bool> used(items.size(), false);
  while (out.size() < n) {
    int bi = -1, bj = -1;
    double best = -1;
    std::pair<std::string, std::string> best_ids;
    for (std::size_t i = 0; i < items.size(); ++i) {
      for (std::size_t j = 0; j < items.size(); ++j) {
        if (i == j || used[i] || used[j]) continue;
        if (items[i].first > items[j].first) continue;
        const double gap = std::abs(items[i].second - items[j].second);
        const std::pair<std::string, std::string> ids{items[i].first, items[j].first};
        if (gap > best || (gap == best && ids < best_ids)) {
          best = gap;
          best_ids = ids;
          bi = int(i);
          bj = int(j);
        }
      }
    }
    used[bi] = used[bj] = true;
    const bool i_shallow = items[bi].second <= items[bj].second;
    const auto& s = i_shallow ? items[bi] : items[bj];
    const auto& d = i_shallow ? items[bj] : items[bi];
    out.push_back({s.first, d.first, best});
  }
  return out;
}

}  // namespace

TEST_CASE("ablate_direction") {
  Rng rng(1);
  const DirectionSpec d = random_unit(12, rng);
  const Tensor h = random_tensor({5, 12}, rng, -3, 3);

  CHECK(ablate_direction(h, d, 0.0) == h);

  Tensor w({1, 12});
  for (std::size_t i = 0; i < 12; ++i) w[i] = float(d.unit[i]);
  const Tensor gone = ablate_direction(w, d, 1.0);
  for (float v : gone.values()) CHECK(std::abs(v) < 1e-6);

  const Tensor a = ablate_direction(h, d, 1.0);
  for (std::size_t r = 0; r < 5; ++r) CHECK(std::abs(dot_unit(a.row(r), d)) < 1e-6);

  const Tensor twice = ablate_direction(a, d, 1.0);
  CHECK(testing::max_abs_diff(twice.values(), a.values()) < 1e-6);

  const Tensor half = ablate_direction(h, d, 0.5);
  for (std::size_t r = 0; r < 5; ++r)
    CHECK(dot_unit(half.row(r), d) == doctest::Approx(0.5 * dot_unit(h.row(r), d)).epsilon(1e-5));

  DirectionSpec bad = d;
  bad.unit[0] += 1e-3;
  CHECK_THROWS_AS(ablate_direction(h, bad, 1.0), ContractError);
  CHECK_THROWS_AS(ablate_direction(h, d, 1.5), ContractError);
  CHECK_THROWS_AS(ablate_direction(h, d, -0.1), ContractError);
}

TEST_CASE("direction specs") {
  const DirectionSpec a = DirectionSpec::random(3, 64, 7, 0);
  const DirectionSpec b = DirectionSpec::random(3, 64, 7, 0);
  const DirectionSpec c = DirectionSpec::random(3, 64, 7, 1);
  CHECK(a.unit == b.unit);
  CHECK(a.unit != c.unit);
  CHECK(a.source == DirectionSpec::Source::random);
  CHECK_NOTHROW(require_unit(a));
  CHECK(std::abs(std::inner_product(a.unit.begin(), a.unit.end(), a.unit.begin(), 0.0) - 1) < 1e-7);

  const ProbeCheckpoint p = random_linear_probe(8, 3, 4);
  const DirectionSpec d = DirectionSpec::from_probe(p);
  CHECK(d.layer == 4);
  CHECK_NOTHROW(require_unit(d));
  double cos = 0, n = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    cos += d.unit[i] * p.weight()[i];
    n += double(p.weight()[i]) * p.weight()[i];
  }
  CHECK(cos / std::sqrt(n) == doctest::Approx(1.0));

  ProbeCheckpoint zero = p;
  std::fill(zero.params.begin(), zero.params.end() - 1, 0.0f);
  CHECK_THROWS_AS(DirectionSpec::from_probe(zero), ContractError);
}

TEST_CASE("ablation self-null: predictions collapse to the bias") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ProbeCheckpoint p = random_linear_probe(32, seed);
    const ProbeData test = random_test_set(50, 32, seed + 100);
    const Tensor ablated = ablate_direction(test.features, DirectionSpec::from_probe(p), 1.0);
    for (double y : predict(p, ablated)) CHECK(std::abs(y - p.bias()) < 1e-5);
  }
}

TEST_CASE("ablation experiment") {
  const ProbeCheckpoint p = random_linear_probe(16, 2);
  const ProbeData test = random_test_set(40, 16, 3);
  const EvalOptions eval{Pooling::pooled, 4};
  const AblationResult r = ablation_experiment(5, p, test, 11, 10, eval);
  CHECK(r.layer == 5);
  REQUIRE(r.random_maes.size() == 10);
  CHECK(r.gap_percent == doctest::Approx(100.0 * (r.ablated_mae - r.orig_mae) / r.orig_mae));
  const double mean = std::accumulate(r.random_maes.begin(), r.random_maes.end(), 0.0) / 10;
  double ss = 0;
  for (double m : r.random_maes) ss += (m - mean) * (m - mean);
  CHECK(r.random_mae_mean == doctest::Approx(mean));
  CHECK(r.random_mae_std == doctest::Approx(std::sqrt(ss / 9)));
  for (std::size_t i = 0; i < 10; ++i)
    CHECK(r.random_gap_percents[i] == doctest::Approx(100.0 * (r.random_maes[i] - r.orig_mae) / r.orig_mae));

  const AblationResult again = ablation_experiment(5, p, test, 11, 10, eval);
  CHECK(again.random_maes == r.random_maes);
  const AblationResult other = ablation_experiment(5, p, test, 12, 10, eval);
  CHECK(other.random_maes != r.random_maes);
  CHECK(other.ablated_mae == r.ablated_mae);

  const std::string csv = ablation_table_csv({r});
  CHECK(csv.rfind("layer,orig_mae,ablated_mae,gap_percent,random_mae_mean,random_mae_std,"
                  "random_gap_percent_max\n", 0) == 0);
}

TEST_CASE("dose response is affine per patch") {
  const ProbeCheckpoint p = random_linear_probe(24, 5);
  const ProbeData test = random_test_set(30, 24, 6);
  const DirectionSpec d = DirectionSpec::from_probe(p);
  const auto alphas = default_alphas();
  REQUIRE(alphas.size() == 11);
  CHECK(alphas.front() == 0.0);
  CHECK(alphas.back() == 1.0);

  std::vector<std::vector<double>> preds;
  for (double a : alphas) preds.push_back(predict(p, ablate_direction(test.features, d, a)));
  for (std::size_t i = 0; i < 30; ++i) {
    std::vector<double> y;
    for (const auto& pk : preds) y.push_back(pk[i]);
    CHECK(testing::line_fit_relative_residual(alphas, y) <= 1e-6);
  }

  const EvalOptions eval{Pooling::pooled, 1};
  const auto curve = dose_response(2, p, test, alphas, eval);
  const auto orig = evaluate_probe(p, test, eval);
  CHECK(std::abs(curve.mae_at_alpha[0] - *orig.mae) < 1e-7);
  CHECK(dose_response(2, p, test, alphas, eval).mae_at_alpha == curve.mae_at_alpha);
  CHECK(dose_response_json({curve}).find("\"alphas\"") != std::string::npos);
}

TEST_CASE("targeted patch") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const DirectionSpec d = random_unit(20, rng);
    const Tensor src = random_tensor({1, 20}, rng), dst = random_tensor({1, 20}, rng);
    CHECK(testing::max_abs_diff(targeted_patch(src.values(), src.values(), d), src.values()) < 1e-6);
    const auto out = targeted_patch(src.values(), dst.values(), d);
    CHECK(std::abs(dot_unit(out, d) - dot_unit(dst.values(), d)) < 1e-6);
    // Orthogonal parts agree with src.
    const double ps = dot_unit(src.values(), d), po = dot_unit(out, d);
    for (std::size_t i = 0; i < 20; ++i)
      CHECK(std::abs((out[i] - po * d.unit[i]) - (src[i] - ps * d.unit[i])) < 1e-6);
  }

  const DirectionSpec d = random_unit(6, rng);
  const Tensor src = random_tensor({3, 6}, rng), dst = random_tensor({3, 6}, rng);
  const Tensor one = targeted_patch(src, dst, d, 1);
  CHECK(one.slice(0) == src.slice(0));
  CHECK(one.slice(2) == src.slice(2));
  CHECK(std::abs(dot_unit(one.row(1), d) - dot_unit(dst.row(1), d)) < 1e-6);
  CHECK_THROWS(targeted_patch(src, Tensor({2, 6}), d));
}

TEST_CASE("contrast pair selection") {
  SUBCASE("two images") {
    const auto p = select_contrast_pairs({{"b", 0.9}, {"a", 0.1}}, 1);
    REQUIRE(p.size() == 1);
    CHECK(p[0] == ContrastPair{"a", "b", p[0].mean_depth_gap});
    CHECK(p[0].mean_depth_gap == doctest::Approx(0.8));
  }
  SUBCASE("identical depths fall back to id order") {
    const auto p = select_contrast_pairs({{"d", 0.5}, {"b", 0.5}, {"c", 0.5}, {"a", 0.5}}, 2);
    REQUIRE(p.size() == 2);
    CHECK(p[0].src_image_id == "a");
    CHECK(p[0].dst_image_id == "b");
    CHECK(p[1].src_image_id == "c");
    CHECK(p[1].dst_image_id == "d");
    CHECK(p[0].mean_depth_gap == 0.0);
  }
  SUBCASE("matches the exhaustive greedy oracle") {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<std::pair<std::string, double>> items;
      for (int i = 0; i < 50; ++i) {
        // Coarse depths so gap ties are common.
        items.emplace_back("img" + std::to_string(1000 + rng.uniform_index(9000)) + "_" +
                               std::to_string(i),
                           double(rng.uniform_index(8)) / 8.0);
      }
      const auto got = select_contrast_pairs(items, 20);
      const auto want = greedy_oracle(items, 20);
      CHECK(got == want);
      for (const auto& p : got) CHECK(p.src_image_id != p.dst_image_id);
    }
  }
  SUBCASE("too few images") {
    CHECK_THROWS_AS(select_contrast_pairs({{"a", 0.1}, {"b", 0.2}, {"c", 0.3}}, 2), DataError);
  }
}

TEST_CASE("influence matrix") {
  std::map<std::string, Tensor> images;
  Rng rng(8);
  for (const char* id : {"a", "b", "c", "d"}) images[id] = random_tensor({3, 16, 16}, rng);
  const std::vector<ContrastPair> pairs{{"a", "b", 0.5}, {"c", "d", 0.3}};

  SUBCASE("diagonal is one on the tiny encoder") {
    const VisionEncoder enc(make_tiny_encoder(3, 3));
    std::vector<ProbeCheckpoint> probes;
    for (std::size_t t = 0; t < 4; ++t) probes.push_back(random_linear_probe(16, 40 + t, t));
    const InfluenceMatrix m = influence_matrix(pairs, probes, enc, images);
    CHECK(m.taps == 4);
    for (std::size_t l = 0; l < 4; ++l) {
      CHECK(m.at(l, l) == doctest::Approx(1.0).epsilon(1e-4));
      for (std::size_t t = l; t < 4; ++t) CHECK(std::isfinite(m.at(l, t)));
      for (std::size_t t = 0; t < l; ++t) CHECK(m.effects.count({l, t}) == 0);
    }
    InfluenceOptions par;
    par.workers = 3;
    CHECK(influence_matrix(pairs, probes, enc, images, par).effects == m.effects);

    const std::string csv = influence_matrix_csv(m);
    CHECK(csv.rfind("L,T0,T1,T2,T3\n", 0) == 0);
    CHECK(csv.find("\n3,,,,1.000000") != std::string::npos);
  }

  SUBCASE("per-position patching keeps the diagonal") {
    const VisionEncoder enc(make_tiny_encoder(3, 2));
    std::vector<ProbeCheckpoint> probes;
    for (std::size_t t = 0; t < 3; ++t) probes.push_back(random_linear_probe(16, 60 + t, t));
    InfluenceOptions opt;
    opt.per_position = true;
    const InfluenceMatrix m = influence_matrix(pairs, probes, enc, images, opt);
    for (std::size_t l = 0; l < 3; ++l) CHECK(m.at(l, l) == doctest::Approx(1.0).epsilon(1e-4));
  }

  SUBCASE("identity blocks carry the patch unchanged") {
    const VisionEncoder enc(make_identity_carry_encoder(5, 3));
    const ProbeCheckpoint shared = random_linear_probe(16, 77);
    std::vector<ProbeCheckpoint> probes(4, shared);
    const InfluenceMatrix m = influence_matrix(pairs, probes, enc, images);
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t t = l; t < 4; ++t) CHECK(m.at(l, t) == doctest::Approx(1.0).epsilon(1e-4));
  }

  SUBCASE("identical pair is degenerate") {
    const VisionEncoder enc(make_tiny_encoder(3, 1));
    std::vector<ProbeCheckpoint> probes{random_linear_probe(16, 1), random_linear_probe(16, 2)};
    auto twins = images;
    twins["e"] = twins["a"];
    CHECK_THROWS_AS(influence_matrix({{"a", "e", 0.0}}, probes, enc, twins), DegeneratePairError);
  }

  SUBCASE("input errors") {
    const VisionEncoder enc(make_tiny_encoder(3, 1));
    std::vector<ProbeCheckpoint> probes{random_linear_probe(16, 1)};
    CHECK_THROWS_AS(influence_matrix(pairs, probes, enc, images), DataError);
    probes.push_back(random_linear_probe(16, 2));
    CHECK_THROWS_AS(influence_matrix({{"a", "zz", 1.0}}, probes, enc, images), DataError);
  }
}
