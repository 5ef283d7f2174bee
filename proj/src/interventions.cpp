#include "vitprobe/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <sstream>

#include "vitprobe/errors.hpp"
#include "vitprobe/metrics.hpp"
#include "vitprobe/parallel.hpp"
#include "vitprobe/rng.hpp"

namespace vitprobe {

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void require_width(std::size_t width, const DirectionSpec& d) {
  if (width != d.unit.size()) {
    throw DimensionError("direction has width " + std::to_string(d.unit.size()) +
                         ", activations have " + std::to_string(width));
  }
}

double probe_mae(const ProbeCheckpoint& probe, const Tensor& features,
                 std::span<const double> labels, const EvalOptions& eval) {
  const auto preds = predict(probe, features);
  return regression_stats(preds, labels, eval.pooling, eval.patches_per_image).mae;
}

void require_linear(const ProbeCheckpoint& probe, const char* what) {
  if (probe.config.kind != ProbeKind::linear) {
    throw ContractError(std::string(what) + " needs a linear probe");
  }
}

}  // namespace

DirectionSpec DirectionSpec::from_probe(const ProbeCheckpoint& probe) {
  require_linear(probe, "a probe direction");
  const auto w = probe.weight();
  DirectionSpec d;
  d.layer = probe.config.layer;
  d.unit.assign(w.begin(), w.end());
  const double n = norm(d.unit);
  if (n == 0.0) throw ContractError("probe at layer " + std::to_string(d.layer) + " has zero weight");
  for (auto& x : d.unit) x /= n;
  return d;
}

DirectionSpec DirectionSpec::random(std::size_t layer, std::size_t width, std::uint64_t master_seed,
                                    std::size_t index) {
  DirectionSpec d;
  d.layer = layer;
  d.source = Source::random;
  d.seed = derive_seed(master_seed, "random-direction", index);
  Rng rng(d.seed);
  d.unit.resize(width);
  for (auto& x : d.unit) x = rng.normal();
  const double n = norm(d.unit);
  for (auto& x : d.unit) x /= n;
  return d;
}

void require_unit(const DirectionSpec& d) {
  const double n = norm(d.unit);
  if (!(std::abs(n - 1.0) <= 1e-7)) {
    throw ContractError("direction at layer " + std::to_string(d.layer) + " has norm " +
                        std::to_string(n) + ", expected 1");
  }
}

Tensor ablate_direction(const Tensor& h, const DirectionSpec& d, double alpha) {
  require_unit(d);
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ContractError("ablation strength " + std::to_string(alpha) + " is outside [0, 1]");
  }
  require_width(h.cols(), d);
  Tensor out = h;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double c = alpha * dot(h.row(r), d.unit);
    for (std::size_t k = 0; k < row.size(); ++k) {
      row[k] = static_cast<float>(static_cast<double>(row[k]) - c * d.unit[k]);
    }
  }
  return out;
}

std::vector<float> targeted_patch(std::span<const float> h_src, std::span<const float> h_dst,
                                  const DirectionSpec& d) {
  require_unit(d);
  require_width(h_src.size(), d);
  require_width(h_dst.size(), d);
  const double shift = dot(h_dst, d.unit) - dot(h_src, d.unit);
  std::vector<float> out(h_src.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = static_cast<float>(static_cast<double>(h_src[k]) + shift * d.unit[k]);
  }
  return out;
}

Tensor targeted_patch(const Tensor& h_src, const Tensor& h_dst, const DirectionSpec& d,
                      std::optional<std::size_t> position) {
  if (h_src.shape() != h_dst.shape()) {
    throw DimensionError("patching needs matching shapes, got " + shape_string(h_src.shape()) +
                         " and " + shape_string(h_dst.shape()));
  }
  Tensor out = h_src;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    if (position && *position != r) continue;
    const auto patched = targeted_patch(h_src.row(r), h_dst.row(r), d);
    std::copy(patched.begin(), patched.end(), out.row(r).begin());
  }
  return out;
}

AblationResult ablation_experiment(std::size_t layer, const ProbeCheckpoint& probe,
                                   const ProbeData& test, std::uint64_t master_seed,
                                   std::size_t random_directions, const EvalOptions& eval) {
  require_linear(probe, "ablation");
  AblationResult r;
  r.layer = layer;
  r.orig_mae = probe_mae(probe, test.features, test.labels, eval);
  const DirectionSpec own = DirectionSpec::from_probe(probe);
  r.ablated_mae = probe_mae(probe, ablate_direction(test.features, own, 1.0), test.labels, eval);
  r.gap_percent = 100.0 * (r.ablated_mae - r.orig_mae) / r.orig_mae;
  for (std::size_t i = 0; i < random_directions; ++i) {
    const auto d = DirectionSpec::random(layer, test.features.cols(), master_seed, i);
    const double mae = probe_mae(probe, ablate_direction(test.features, d, 1.0), test.labels, eval);
    r.random_maes.push_back(mae);
    r.random_gap_percents.push_back(100.0 * (mae - r.orig_mae) / r.orig_mae);
  }
  if (!r.random_maes.empty()) {
    double sum = 0.0;
    for (double m : r.random_maes) sum += m;
    r.random_mae_mean = sum / static_cast<double>(r.random_maes.size());
    if (r.random_maes.size() > 1) {
      double sq = 0.0;
      for (double m : r.random_maes) sq += (m - r.random_mae_mean) * (m - r.random_mae_mean);
      r.random_mae_std = std::sqrt(sq / static_cast<double>(r.random_maes.size() - 1));
    }
  }
  return r;
}

std::vector<double> default_alphas() {
  std::vector<double> a;
  for (int i = 0; i <= 10; ++i) a.push_back(i / 10.0);
  return a;
}

DoseResponseCurve dose_response(std::size_t layer, const ProbeCheckpoint& probe,
                                const ProbeData& test, std::span<const double> alphas,
                                const EvalOptions& eval) {
  require_linear(probe, "dose-response");
  const DirectionSpec d = DirectionSpec::from_probe(probe);
  DoseResponseCurve curve;
  curve.layer = layer;
  for (double alpha : alphas) {
    curve.alphas.push_back(alpha);
    curve.mae_at_alpha.push_back(
        probe_mae(probe, ablate_direction(test.features, d, alpha), test.labels, eval));
  }
  return curve;
}

std::vector<ContrastPair> select_contrast_pairs(
    const std::vector<std::pair<std::string, double>>& mean_depths, std::size_t n) {
  if (mean_depths.size() < 2 * n) {
    throw DataError("contrast pairs: " + std::to_string(n) + " pairs need " +
                    std::to_string(2 * n) + " images, have " +
                    std::to_string(mean_depths.size()));
  }
  auto items = mean_depths;
  std::sort(items.begin(), items.end());
  struct Candidate {
    std::size_t a, b;  // a < b, so ids[a] < ids[b]
    double gap;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(items.size() * (items.size() - 1) / 2);
  for (std::size_t a = 0; a < items.size(); ++a) {
    for (std::size_t b = a + 1; b < items.size(); ++b) {
      candidates.push_back({a, b, std::abs(items[a].second - items[b].second)});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& x, const Candidate& y) {
    if (x.gap != y.gap) return x.gap > y.gap;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });
  std::vector<bool> used(items.size(), false);
  std::vector<ContrastPair> pairs;
  for (const auto& c : candidates) {
    if (pairs.size() == n) break;
    if (used[c.a] || used[c.b]) continue;
    used[c.a] = used[c.b] = true;
    const bool a_shallower = items[c.a].second <= items[c.b].second;
    const auto& src = a_shallower ? items[c.a] : items[c.b];
    const auto& dst = a_shallower ? items[c.b] : items[c.a];
    pairs.push_back({src.first, dst.first, c.gap});
  }
  return pairs;
}

std::vector<ContrastPair> select_contrast_pairs(const LabelCache& labels, Split split,
                                                std::size_t n) {
  if (labels.task != Task::depth) throw DataError("contrast pairs need depth labels");
  std::vector<std::pair<std::string, double>> means;
  for (const PatchLabelSet* s : labels.in_split(split)) {
    double sum = 0.0;
    for (float v : s->labels) sum += v;
    means.emplace_back(s->image_id, sum / static_cast<double>(s->labels.size()));
  }
  return select_contrast_pairs(means, n);
}

// ---- influence matrix ----------------------------------------------------------

namespace {

struct PairEffects {
  // Per (L, T): sum of per-patch effects and surviving patch count.
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> cells;
};

std::vector<double> layer_predictions(const ProbeCheckpoint& probe, const HiddenStateStack& s,
                                      std::size_t tap) {
  return predict(probe, s.layer(tap));
}

}  // namespace

InfluenceMatrix influence_matrix(const std::vector<ContrastPair>& pairs,
                                 const std::vector<ProbeCheckpoint>& probes,
                                 const VisionEncoder& encoder,
                                 const std::map<std::string, Tensor>& images,
                                 const InfluenceOptions& options) {
  const std::size_t taps = encoder.config().layers + 1;
  if (probes.size() != taps) {
    throw DataError("influence matrix needs a probe for each of " + std::to_string(taps) +
                    " taps, have " + std::to_string(probes.size()));
  }
  for (const auto& p : probes) require_linear(p, "the influence matrix");
  std::vector<std::size_t> layers = options.intervention_layers;
  if (layers.empty()) {
    for (std::size_t l = 0; l < taps; ++l) layers.push_back(l);
  }
  std::vector<DirectionSpec> directions;
  for (const auto& p : probes) directions.push_back(DirectionSpec::from_probe(p));

  auto image = [&](const std::string& id) -> const Tensor& {
    const auto it = images.find(id);
    if (it == images.end()) throw DataError("no input image for '" + id + "'");
    return it->second;
  };

  std::vector<PairEffects> per_pair(pairs.size());
  parallel_for(pairs.size(), options.workers, [&](std::size_t i) {
    const auto& pair = pairs[i];
    const HiddenStateStack src = encoder.forward(image(pair.src_image_id), {}, pair.src_image_id);
    const HiddenStateStack dst = encoder.forward(image(pair.dst_image_id), {}, pair.dst_image_id);
    std::vector<std::vector<double>> p_src(taps), p_dst(taps);
    for (std::size_t t = 0; t < taps; ++t) {
      p_src[t] = layer_predictions(probes[t], src, t);
      p_dst[t] = layer_predictions(probes[t], dst, t);
    }
    const std::size_t patches = src.values.dim(1);
    for (std::size_t l : layers) {
      if (l >= taps) throw DataError("no tap " + std::to_string(l));
      const Tensor dst_l = dst.layer(l);
      auto record = [&](const HiddenStateStack& patched, std::optional<std::size_t> only) {
        for (std::size_t t = l; t < taps; ++t) {
          const auto p_patch = layer_predictions(probes[t], patched, t);
          auto& cell = per_pair[i].cells[{l, t}];
          for (std::size_t k = 0; k < patches; ++k) {
            if (only && *only != k) continue;
            const double denom = p_dst[t][k] - p_src[t][k];
            if (std::abs(denom) < options.guard_epsilon) continue;
            cell.first += (p_patch[k] - p_src[t][k]) / denom;
            ++cell.second;
          }
        }
      };
      const std::size_t runs = options.per_position ? patches : 1;
      for (std::size_t pos = 0; pos < runs; ++pos) {
        std::optional<std::size_t> position;
        if (options.per_position) position = pos;
        const InterventionHook hook{
            l, [&, position](const Tensor& x) { return targeted_patch(x, dst_l, directions[l], position); }};
        const HiddenStateStack patched =
            encoder.forward(image(pair.src_image_id), std::span(&hook, 1), pair.src_image_id);
        record(patched, position);
      }
    }
  });

  InfluenceMatrix m;
  m.taps = taps;
  m.pairs = pairs;
  m.guard_epsilon = options.guard_epsilon;
  for (std::size_t l : layers) {
    for (std::size_t t = l; t < taps; ++t) {
      double sum = 0.0;
      std::size_t used = 0;
      for (const auto& pe : per_pair) {
        const auto it = pe.cells.find({l, t});
        if (it == pe.cells.end() || it->second.second == 0) continue;
        sum += it->second.first / static_cast<double>(it->second.second);
        ++used;
      }
      if (used == 0) {
        throw DegeneratePairError("every patch of every pair falls under the guard at L=" +
                                  std::to_string(l) + ", T=" + std::to_string(t));
      }
      m.effects[{l, t}] = sum / static_cast<double>(used);
      m.pairs_used[{l, t}] = used;
    }
  }
  return m;
}

// ---- emission ------------------------------------------------------------------

std::string ablation_table_csv(const std::vector<AblationResult>& results) {
  std::ostringstream out;
  out << "layer,orig_mae,ablated_mae,gap_percent,random_mae_mean,random_mae_std,"
         "random_gap_percent_max\n";
  for (const auto& r : results) {
    double worst = 0.0;
    for (double g : r.random_gap_percents) worst = std::max(worst, g);
    out << r.layer << ',' << format_metric(r.orig_mae) << ',' << format_metric(r.ablated_mae)
        << ',' << format_metric(r.gap_percent) << ',' << format_metric(r.random_mae_mean) << ','
        << format_metric(r.random_mae_std) << ',' << format_metric(worst) << '\n';
  }
  return out.str();
}

std::string dose_response_json(const std::vector<DoseResponseCurve>& curves) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& c : curves) {
    std::vector<double> mae;
    for (double v : c.mae_at_alpha) mae.push_back(std::stod(format_metric(v)));
    out.push_back({{"layer", c.layer}, {"alphas", c.alphas}, {"mae", mae}});
  }
  return out.dump(2) + "\n";
}

std::string contrast_pairs_csv(const std::vector<ContrastPair>& pairs) {
  std::ostringstream out;
  out << "src_image_id,dst_image_id,mean_depth_gap\n";
  for (const auto& p : pairs) {
    out << p.src_image_id << ',' << p.dst_image_id << ',' << format_metric(p.mean_depth_gap) << '\n';
  }
  return out.str();
}

std::string influence_matrix_csv(const InfluenceMatrix& m) {
  std::ostringstream out;
  out << "L";
  for (std::size_t t = 0; t < m.taps; ++t) out << ",T" << t;
  out << '\n';
  std::vector<std::size_t> rows;
  for (const auto& [key, v] : m.effects) {
    if (rows.empty() || rows.back() != key.first) rows.push_back(key.first);
  }
  for (std::size_t l : rows) {
    out << l;
    for (std::size_t t = 0; t < m.taps; ++t) {
      out << ',';
      const auto it = m.effects.find({l, t});
      if (it != m.effects.end()) out << format_metric(it->second);
    }
    out << '\n';
  }
  return out.str();
}

std::string influence_matrix_json(const InfluenceMatrix& m) {
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const auto& [key, v] : m.effects) {
    cells.push_back({{"L", key.first},
                     {"T", key.second},
                     {"effect", std::stod(format_metric(v))},
                     {"pairs", m.pairs_used.at(key)}});
  }
  nlohmann::ordered_json pairs = nlohmann::ordered_json::array();
  for (const auto& p : m.pairs) {
    pairs.push_back({{"src", p.src_image_id}, {"dst", p.dst_image_id}, {"gap", p.mean_depth_gap}});
  }
  nlohmann::ordered_json out = {
      {"taps", m.taps}, {"guard_epsilon", m.guard_epsilon}, {"pairs", pairs}, {"cells", cells}};
  return out.dump(2) + "\n";
}

}  // namespace vitprobe
