#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitprobe/safetensors.hpp"
#include "vitprobe/tensor.hpp"

namespace vitprobe {

/// Architecture of a ViT encoder. Defaults are ViT-B/16 at 224px.
struct EncoderConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t width = 768;
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t mlp_dim = 3072;
  double layer_norm_eps = 1e-6;
  std::array<float, 3> image_mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> image_std{0.5f, 0.5f, 0.5f};

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t tokens() const { return patches() + 1; }
  std::size_t head_dim() const { return width / heads; }

  // Throws LoadError on an inconsistent configuration.
  void validate() const;

  void write_metadata(std::map<std::string, std::string>& metadata) const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Canonical tensor names (HuggingFace ViTModel layout).
namespace tensor_names {
inline const std::string cls_token = "embeddings.cls_token";
inline const std::string position_embeddings = "embeddings.position_embeddings";
inline const std::string patch_weight = "embeddings.patch_embeddings.projection.weight";
inline const std::string patch_bias = "embeddings.patch_embeddings.projection.bias";
inline const std::string final_norm_weight = "layernorm.weight";
inline const std::string final_norm_bias = "layernorm.bias";
std::string block(std::size_t index, const std::string& suffix);
}  // namespace tensor_names

// Every tensor the encoder needs, with its expected shape.
std::vector<std::pair<std::string, Shape>> required_tensors(const EncoderConfig& config);

// Reads the config from store metadata, falling back to tensor shapes.
EncoderConfig infer_config(const NamedTensorStore& store);

/// Loads a safetensors container. A JSON sidecar (HuggingFace config.json /
/// preprocessor_config.json keys) may override metadata; when `sidecar` is
/// not given, `<container>.json` next to the file is used if present.
NamedTensorStore load_weights(const std::filesystem::path& container,
                              const std::optional<std::filesystem::path>& sidecar = {});

// Throws LoadError naming the first missing or mis-shaped tensor.
void validate_weights(const NamedTensorStore& store, const EncoderConfig& config);

struct RandomInitOptions {
  double weight_std = 0.02;
};

NamedTensorStore random_init(const EncoderConfig& config, std::uint64_t seed,
                             const RandomInitOptions& options = {});

struct InitKind {
  bool random = false;
  std::uint64_t seed = 0;

  static InitKind pretrained() { return {}; }
  static InitKind random_seed(std::uint64_t s) { return {true, s}; }
  std::string label() const;

  friend bool operator==(const InitKind&, const InitKind&) = default;
};

/// Patch-token activations at every tap: values has shape
/// (layers + 1, patches, width). Index 0 is the embedding output, index l the
/// output of block l. The class token is not recorded.
struct HiddenStateStack {
  Tensor values;
  std::string image_id;
  InitKind init;

  std::size_t taps() const { return values.dim(0); }
  Tensor layer(std::size_t index) const { return values.slice(index); }
};

/// Transform applied to the (patches x width) patch-token activations right
/// after tap `layer` is produced. It must preserve shape.
struct InterventionHook {
  std::size_t layer = 0;
  std::function<Tensor(const Tensor&)> transform;
};

class VisionEncoder {
 public:
  explicit VisionEncoder(NamedTensorStore weights);

  const EncoderConfig& config() const { return config_; }
  const NamedTensorStore& weights() const { return weights_; }

  // `image` is a preprocessed (3, image_size, image_size) tensor.
  HiddenStateStack forward(const Tensor& image,
                           std::span<const InterventionHook> hooks = {},
                           std::string image_id = {}) const;

 private:
  Tensor embed(const Tensor& image) const;
  Tensor block(const Tensor& x, std::size_t index) const;
  Tensor attention(const Tensor& x, std::size_t index) const;
  const Tensor& w(const std::string& name) const { return weights_.get(name); }

  NamedTensorStore weights_;
  EncoderConfig config_;
  InitKind init_;
};

HiddenStateStack forward_with_taps(const NamedTensorStore& weights, const Tensor& image,
                                   std::span<const InterventionHook> hooks = {});

}  // namespace vitprobe
