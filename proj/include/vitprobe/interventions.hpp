#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vitprobe/encoder.hpp"
#include "vitprobe/labels.hpp"
#include "vitprobe/probe.hpp"

namespace vitprobe {

struct DirectionSpec {
  enum class Source { probe, random };

  std::size_t layer = 0;
  std::vector<double> unit;  // unit norm within 1e-7
  Source source = Source::probe;
  std::uint64_t seed = 0;    // random directions only

  // ŵ = w / ‖w‖ of a linear probe. Throws ContractError for a zero weight.
  static DirectionSpec from_probe(const ProbeCheckpoint& probe);
  // Standard normal in R^width, normalized; seeded by master seed and index.
  static DirectionSpec random(std::size_t layer, std::size_t width, std::uint64_t master_seed,
                              std::size_t index);
};

// Throws ContractError unless ‖ŵ‖ = 1 within 1e-7.
void require_unit(const DirectionSpec& d);

/// h' = h - alpha (h·ŵ) ŵ for every row of h. alpha must lie in [0, 1].
Tensor ablate_direction(const Tensor& h, const DirectionSpec& d, double alpha = 1.0);

/// h' = h_src - (h_src·ŵ)ŵ + (h_dst·ŵ)ŵ.
std::vector<float> targeted_patch(std::span<const float> h_src, std::span<const float> h_dst,
                                  const DirectionSpec& d);
// Row-wise over (patches x width) activations. With `position`, only that row
// is patched and the others are returned unchanged.
Tensor targeted_patch(const Tensor& h_src, const Tensor& h_dst, const DirectionSpec& d,
                      std::optional<std::size_t> position = std::nullopt);

struct AblationResult {
  std::size_t layer = 0;
  double orig_mae = 0.0;
  double ablated_mae = 0.0;
  double gap_percent = 0.0;
  double random_mae_mean = 0.0;
  double random_mae_std = 0.0;  // sample standard deviation
  std::vector<double> random_maes;
  std::vector<double> random_gap_percents;
};

AblationResult ablation_experiment(std::size_t layer, const ProbeCheckpoint& probe,
                                   const ProbeData& test, std::uint64_t master_seed,
                                   std::size_t random_directions = 10,
                                   const EvalOptions& eval = {});

struct DoseResponseCurve {
  std::size_t layer = 0;
  std::vector<double> alphas;
  std::vector<double> mae_at_alpha;
};

// 0.0, 0.1, ..., 1.0
std::vector<double> default_alphas();

DoseResponseCurve dose_response(std::size_t layer, const ProbeCheckpoint& probe,
                                const ProbeData& test, std::span<const double> alphas,
                                const EvalOptions& eval = {});

struct ContrastPair {
  std::string src_image_id;  // the shallower image (smaller mean depth)
  std::string dst_image_id;
  double mean_depth_gap = 0.0;

  friend bool operator==(const ContrastPair&, const ContrastPair&) = default;
};

/// Greedy selection over all candidate pairs ranked by |mean depth gap|,
/// ties broken by lexicographic id order; no image is used twice. Throws
/// DataError with fewer than 2n images.
std::vector<ContrastPair> select_contrast_pairs(
    const std::vector<std::pair<std::string, double>>& mean_depths, std::size_t n = 20);
std::vector<ContrastPair> select_contrast_pairs(const LabelCache& labels, Split split = Split::test,
                                                std::size_t n = 20);

struct InfluenceOptions {
  double guard_epsilon = 1e-3;
  std::vector<std::size_t> intervention_layers;  // empty: every tap
  bool per_position = false;  // one run per patch position, effect read at that position
  std::size_t workers = 1;
};

struct InfluenceMatrix {
  std::size_t taps = 0;
  std::map<std::pair<std::size_t, std::size_t>, double> effects;  // (L, T >= L)
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> pairs_used;
  std::vector<ContrastPair> pairs;
  double guard_epsilon = 1e-3;

  double at(std::size_t l, std::size_t t) const { return effects.at({l, t}); }
};

/// For each intervention layer L, the src image is re-run with the layer-L
/// probe direction patched in from dst; for every T >= L the per-patch effect
/// is (p_patched - p_src) / (p_dst - p_src) under the layer-T probe. Patches
/// with |p_dst - p_src| < guard are skipped. Effects are averaged over
/// patches within a pair, then over pairs. Throws DegeneratePairError when
/// every patch of every pair is skipped for some (L, T).
///
/// `probes[t]` is the linear depth probe at tap t; `images` maps image ids to
/// preprocessed inputs.
InfluenceMatrix influence_matrix(const std::vector<ContrastPair>& pairs,
                                 const std::vector<ProbeCheckpoint>& probes,
                                 const VisionEncoder& encoder,
                                 const std::map<std::string, Tensor>& images,
                                 const InfluenceOptions& options = {});

std::string ablation_table_csv(const std::vector<AblationResult>& results);
std::string dose_response_json(const std::vector<DoseResponseCurve>& curves);
std::string contrast_pairs_csv(const std::vector<ContrastPair>& pairs);
// Rows L, columns T; cells with T < L are empty.
std::string influence_matrix_csv(const InfluenceMatrix& matrix);
std::string influence_matrix_json(const InfluenceMatrix& matrix);

}  // namespace vitprobe
