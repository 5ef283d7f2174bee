#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vitprobe/encoder.hpp"
#include "vitprobe/probe.hpp"

namespace vitprobe {

enum class FixtureKind { planted_regression, identity_carry, tiny_encoder };

std::string to_string(FixtureKind kind);
FixtureKind parse_fixture_kind(std::string_view text);

// ---- planted regression ----------------------------------------------------------

struct PlantedOptions {
  std::size_t width = 64;
  std::size_t samples = 5000;
  std::size_t train = 3500;
  std::size_t val = 500;  // the rest is test
  double signal_to_noise = 10.0;  // var(s) / var(label noise)
  double orthogonal_std = 0.35;   // per-coordinate std of the feature noise
};

/// h = s w* + e, with s ~ N(0, 1) and e Gaussian noise projected orthogonal
/// to the unit direction w*; targets y = w*·h + n with var(n) = 1 / SNR.
struct PlantedRegression {
  PlantedOptions options;
  std::uint64_t seed = 0;
  std::vector<double> w_star;
  ProbeData train, val, test;
};

PlantedRegression make_planted_regression(std::uint64_t seed, const PlantedOptions& options = {});
// features.f32 / targets.f32 (all samples, train then val then test) and
// planted.json with the direction and split sizes.
void write_planted_regression(const std::filesystem::path& dir, const PlantedRegression& fixture);

// ---- encoders --------------------------------------------------------------------

// The golden-vector architecture: 16px input, 8px patches (4 patches), width
// 16, 2 heads, MLP 64.
EncoderConfig tiny_encoder_config(std::size_t layers = 2);

// Larger init scale than a real checkpoint so attention is far from uniform.
inline constexpr double kTinyInitStd = 0.3;

NamedTensorStore make_tiny_encoder(std::uint64_t seed, std::size_t layers = 2);

// Attention-output and MLP-output projections zeroed: every block is an
// identity map, so the residual stream carries every direction unchanged.
NamedTensorStore make_identity_carry_encoder(std::uint64_t seed, std::size_t layers = 3);

// ---- synthetic datasets ------------------------------------------------------------

struct SyntheticDatasetOptions {
  std::size_t source_size = 32;
  std::size_t annotators = 3;
  SplitCounts boundary{12, 6, 12};
  SplitCounts depth{24, 8, 16};
};

// BSDS-layout boundary set and NYU-layout depth set of rectangle scenes whose
// colours follow depth. Writes dataset.json with the split counts.
void write_synthetic_boundary_dataset(const std::filesystem::path& root, std::uint64_t seed,
                                      const SyntheticDatasetOptions& options = {});
void write_synthetic_depth_dataset(const std::filesystem::path& root, std::uint64_t seed,
                                   const SyntheticDatasetOptions& options = {});

struct FixtureFiles {
  std::filesystem::path root;
  std::filesystem::path config;   // experiment.toml (empty for planted-regression)
  std::filesystem::path weights;  // empty for planted-regression
};

/// Writes a complete, deterministic fixture under `dir`:
///   planted-regression: the planted data files
///   tiny-encoder / identity-carry: weights/model.safetensors, bsds/, nyu/
///   and an experiment.toml wired to them.
FixtureFiles make_fixture(FixtureKind kind, std::uint64_t seed, const std::filesystem::path& dir);

}  // namespace vitprobe
