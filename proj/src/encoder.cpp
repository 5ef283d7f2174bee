#include "vitprobe/encoder.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "vitprobe/errors.hpp"
#include "vitprobe/rng.hpp"

namespace vitprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tensor_names {
std::string block(std::size_t index, const std::string& suffix) {
  return "encoder.layer." + std::to_string(index) + "." + suffix;
}
}  // namespace tensor_names

namespace {

namespace tn = tensor_names;

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_triple(const std::array<float, 3>& v) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g", v[0], v[1], v[2]);
  return buf;
}

std::array<float, 3> parse_triple(const std::string& text, const std::string& key) {
  std::array<float, 3> out{};
  std::stringstream in(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(in, item, ',')) {
    if (i >= 3) break;
    out[i++] = std::stof(item);
  }
  if (i != 3) throw LoadError("metadata '" + key + "' must hold three values");
  return out;
}

std::size_t parse_size(const std::map<std::string, std::string>& md,
                       const std::string& key, std::size_t fallback) {
  auto it = md.find(key);
  if (it == md.end()) return fallback;
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw LoadError("metadata '" + key + "' is not an integer: " + it->second);
  }
}

const std::vector<std::string>& block_suffixes() {
  static const std::vector<std::string> suffixes = {
      "layernorm_before.weight",
      "layernorm_before.bias",
      "attention.attention.query.weight",
      "attention.attention.query.bias",
      "attention.attention.key.weight",
      "attention.attention.key.bias",
      "attention.attention.value.weight",
      "attention.attention.value.bias",
      "attention.output.dense.weight",
      "attention.output.dense.bias",
      "layernorm_after.weight",
      "layernorm_after.bias",
      "intermediate.dense.weight",
      "intermediate.dense.bias",
      "output.dense.weight",
      "output.dense.bias",
  };
  return suffixes;
}

}  // namespace

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw LoadError("image_size " + std::to_string(image_size) +
                    " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (heads == 0 || width % heads != 0) {
    throw LoadError("width " + std::to_string(width) + " is not divisible by heads " +
                    std::to_string(heads));
  }
  if (layers == 0 || mlp_dim == 0) throw LoadError("encoder needs layers and mlp_dim > 0");
  for (float s : image_std) {
    if (!(s > 0.0f)) throw LoadError("image_std must be positive");
  }
}

void EncoderConfig::write_metadata(std::map<std::string, std::string>& md) const {
  md["image_size"] = std::to_string(image_size);
  md["patch_size"] = std::to_string(patch_size);
  md["hidden_size"] = std::to_string(width);
  md["num_hidden_layers"] = std::to_string(layers);
  md["num_attention_heads"] = std::to_string(heads);
  md["intermediate_size"] = std::to_string(mlp_dim);
  md["layer_norm_eps"] = format_double(layer_norm_eps);
  md["image_mean"] = format_triple(image_mean);
  md["image_std"] = format_triple(image_std);
}

std::vector<std::pair<std::string, Shape>> required_tensors(const EncoderConfig& c) {
  const std::size_t d = c.width;
  std::vector<std::pair<std::string, Shape>> out = {
      {tn::cls_token, {1, 1, d}},
      {tn::position_embeddings, {1, c.tokens(), d}},
      {tn::patch_weight, {d, 3, c.patch_size, c.patch_size}},
      {tn::patch_bias, {d}},
  };
  for (std::size_t i = 0; i < c.layers; ++i) {
    for (const auto& s : block_suffixes()) {
      Shape shape;
      if (s.ends_with("bias") || s.starts_with("layernorm")) {
        shape = {s.starts_with("intermediate") ? c.mlp_dim : d};
      } else if (s.starts_with("intermediate")) {
        shape = {c.mlp_dim, d};
      } else if (s.starts_with("output.")) {
        shape = {d, c.mlp_dim};
      } else {
        shape = {d, d};
      }
      out.emplace_back(tn::block(i, s), shape);
    }
  }
  return out;
}

EncoderConfig infer_config(const NamedTensorStore& store) {
  const auto& md = store.metadata;
  EncoderConfig c;

  // Shape-derived defaults, used when metadata is silent.
  std::size_t width = c.width, patch = c.patch_size, image = c.image_size;
  if (store.contains(tn::cls_token)) width = store.get(tn::cls_token).shape().back();
  if (store.contains(tn::patch_weight)) patch = store.get(tn::patch_weight).shape().back();
  if (store.contains(tn::position_embeddings)) {
    const auto& pe = store.get(tn::position_embeddings);
    const std::size_t patches = pe.rows() - 1;
    const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(patches)));
    if (grid * grid == patches) image = grid * patch;
  }
  std::size_t layers = 0;
  while (store.contains(tn::block(layers, "layernorm_before.weight"))) ++layers;
  std::size_t mlp = 4 * width;
  if (store.contains(tn::block(0, "intermediate.dense.bias"))) {
    mlp = store.get(tn::block(0, "intermediate.dense.bias")).size();
  }

  c.width = parse_size(md, "hidden_size", width);
  c.patch_size = parse_size(md, "patch_size", patch);
  c.image_size = parse_size(md, "image_size", image);
  c.layers = parse_size(md, "num_hidden_layers", layers ? layers : c.layers);
  c.mlp_dim = parse_size(md, "intermediate_size", mlp);
  c.heads = parse_size(md, "num_attention_heads",
                       c.width % 64 == 0 ? c.width / 64 : 1);
  if (auto it = md.find("layer_norm_eps"); it != md.end()) {
    c.layer_norm_eps = std::stod(it->second);
  }
  if (auto it = md.find("image_mean"); it != md.end()) {
    c.image_mean = parse_triple(it->second, "image_mean");
  }
  if (auto it = md.find("image_std"); it != md.end()) {
    c.image_std = parse_triple(it->second, "image_std");
  }
  c.validate();
  return c;
}

void validate_weights(const NamedTensorStore& store, const EncoderConfig& config) {
  for (const auto& [name, shape] : required_tensors(config)) {
    auto it = store.entries.find(name);
    if (it == store.entries.end()) {
      throw LoadError("weight container is missing tensor '" + name + "'");
    }
    if (it->second.shape() != shape) {
      throw LoadError("tensor '" + name + "' has shape " +
                      shape_string(it->second.shape()) + ", expected " +
                      shape_string(shape));
    }
  }
}

namespace {

void merge_sidecar(NamedTensorStore& store, const fs::path& sidecar) {
  std::ifstream in(sidecar);
  if (!in) throw LoadError("cannot open config sidecar " + sidecar.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw LoadError(sidecar.string() + ": " + e.what());
  }
  for (const char* key : {"image_size", "patch_size", "hidden_size", "num_hidden_layers",
                          "num_attention_heads", "intermediate_size"}) {
    if (j.contains(key)) store.metadata[key] = std::to_string(j[key].get<std::size_t>());
  }
  if (j.contains("layer_norm_eps")) {
    store.metadata["layer_norm_eps"] = format_double(j["layer_norm_eps"].get<double>());
  }
  for (const char* key : {"image_mean", "image_std"}) {
    if (j.contains(key)) {
      const auto v = j[key].get<std::vector<float>>();
      if (v.size() != 3) throw LoadError(sidecar.string() + ": " + key + " needs 3 values");
      store.metadata[key] = format_triple({v[0], v[1], v[2]});
    }
  }
}

}  // namespace

NamedTensorStore load_weights(const fs::path& container,
                              const std::optional<fs::path>& sidecar) {
  if (!fs::exists(container)) throw LoadError("weight container not found: " + container.string());
  NamedTensorStore raw = read_safetensors(container);

  // Checkpoints saved from classification heads prefix everything with "vit.".
  NamedTensorStore store;
  store.metadata = raw.metadata;
  for (auto& [name, t] : raw.entries) {
    std::string key = name.starts_with("vit.") ? name.substr(4) : name;
    store.entries.emplace(std::move(key), std::move(t));
  }

  fs::path side;
  if (sidecar) {
    side = *sidecar;
  } else {
    auto guess = container;
    guess.replace_extension(".json");
    if (fs::exists(guess)) side = guess;
  }
  if (!side.empty()) merge_sidecar(store, side);

  const EncoderConfig config = infer_config(store);
  validate_weights(store, config);
  config.write_metadata(store.metadata);
  if (!store.metadata.count("init")) store.metadata["init"] = "pretrained";
  return store;
}

NamedTensorStore random_init(const EncoderConfig& config, std::uint64_t seed,
                             const RandomInitOptions& options) {
  config.validate();
  NamedTensorStore store;
  for (const auto& [name, shape] : required_tensors(config)) {
    Tensor t(shape);
    const bool is_norm = name.find("layernorm") != std::string::npos;
    const bool is_bias = name.ends_with(".bias");
    if (is_norm && !is_bias) {
      std::fill(t.values().begin(), t.values().end(), 1.0f);
    } else if (!is_bias) {
      Rng rng(derive_seed(seed, name));
      for (auto& v : t.values()) {
        v = static_cast<float>(rng.truncated_normal(options.weight_std));
      }
    }
    store.entries.emplace(name, std::move(t));
  }
  store.entries.emplace(tn::final_norm_weight, Tensor({config.width}, 1.0f));
  store.entries.emplace(tn::final_norm_bias, Tensor({config.width}, 0.0f));
  config.write_metadata(store.metadata);
  store.metadata["init"] = "random";
  store.metadata["seed"] = std::to_string(seed);
  return store;
}

std::string InitKind::label() const {
  return random ? "random-s" + std::to_string(seed) : "pretrained";
}

VisionEncoder::VisionEncoder(NamedTensorStore weights)
    : weights_(std::move(weights)), config_(infer_config(weights_)) {
  validate_weights(weights_, config_);
  if (auto it = weights_.metadata.find("init"); it != weights_.metadata.end() &&
                                               it->second == "random") {
    init_ = InitKind::random_seed(parse_size(weights_.metadata, "seed", 0));
  }
}

Tensor VisionEncoder::embed(const Tensor& image) const {
  const std::size_t p = config_.patch_size, g = config_.grid(), s = config_.image_size;
  const std::size_t d = config_.width;
  if (image.shape() != Shape{3, s, s}) {
    throw DimensionError("encoder expects an image of shape " +
                         shape_string({3, s, s}) + ", got " + shape_string(image.shape()));
  }
  // Each patch flattened in (channel, row, col) order matches the conv kernel.
  Tensor patches({config_.patches(), 3 * p * p});
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      auto dst = patches.row(gy * g + gx);
      std::size_t k = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            dst[k++] = image[(c * s + gy * p + y) * s + gx * p + x];
    }
  }
  const Tensor proj = w(tn::patch_weight).reshaped({d, 3 * p * p});
  const Tensor embedded = linear(patches, proj, w(tn::patch_bias));

  const Tensor& pos = w(tn::position_embeddings);
  const Tensor& cls = w(tn::cls_token);
  Tensor tokens({config_.tokens(), d});
  for (std::size_t j = 0; j < d; ++j) tokens.at(0, j) = cls[j] + pos[j];
  for (std::size_t t = 1; t < config_.tokens(); ++t)
    for (std::size_t j = 0; j < d; ++j)
      tokens.at(t, j) = embedded.at(t - 1, j) + pos[t * d + j];
  return tokens;
}

Tensor VisionEncoder::attention(const Tensor& x, std::size_t index) const {
  const auto name = [index](const std::string& s) { return tn::block(index, s); };
  const Tensor q = linear(x, w(name("attention.attention.query.weight")),
                          w(name("attention.attention.query.bias")));
  const Tensor k = linear(x, w(name("attention.attention.key.weight")),
                          w(name("attention.attention.key.bias")));
  const Tensor v = linear(x, w(name("attention.attention.value.weight")),
                          w(name("attention.attention.value.bias")));

  const std::size_t n = x.rows(), hd = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor context({n, config_.width});
  Tensor scores({n, n});
  for (std::size_t h = 0; h < config_.heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      auto qi = q.row(i).subspan(off, hd);
      for (std::size_t j = 0; j < n; ++j) {
        scores.at(i, j) = static_cast<float>(dot(qi, k.row(j).subspan(off, hd)) * scale);
      }
    }
    const Tensor probs = softmax_rows(scores);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < hd; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          acc += static_cast<double>(probs.at(i, j)) * v.at(j, off + c);
        }
        context.at(i, off + c) = static_cast<float>(acc);
      }
    }
  }
  return linear(context, w(name("attention.output.dense.weight")),
                w(name("attention.output.dense.bias")));
}

Tensor VisionEncoder::block(const Tensor& x, std::size_t index) const {
  const auto name = [index](const std::string& s) { return tn::block(index, s); };
  const double eps = config_.layer_norm_eps;

  Tensor h = x;
  add_inplace(h, attention(layer_norm(x, w(name("layernorm_before.weight")),
                                      w(name("layernorm_before.bias")), eps),
                           index));
  const Tensor normed = layer_norm(h, w(name("layernorm_after.weight")),
                                   w(name("layernorm_after.bias")), eps);
  const Tensor hidden = gelu(linear(normed, w(name("intermediate.dense.weight")),
                                    w(name("intermediate.dense.bias"))));
  add_inplace(h, linear(hidden, w(name("output.dense.weight")), w(name("output.dense.bias"))));
  return h;
}

HiddenStateStack VisionEncoder::forward(const Tensor& image,
                                        std::span<const InterventionHook> hooks,
                                        std::string image_id) const {
  const std::size_t taps = config_.layers + 1, np = config_.patches(), d = config_.width;
  for (const auto& hook : hooks) {
    if (hook.layer >= taps) {
      throw ContractError("hook layer " + std::to_string(hook.layer) +
                          " exceeds the encoder's " + std::to_string(taps) + " taps");
    }
  }

  HiddenStateStack stack{Tensor({taps, np, d}), std::move(image_id), init_};
  Tensor x = embed(image);

  for (std::size_t layer = 0; layer < taps; ++layer) {
    if (layer > 0) x = block(x, layer - 1);
    if (!x.all_finite()) {
      throw NumericError("non-finite activation at layer " + std::to_string(layer));
    }

    // Row 0 is the class token; hooks see and record only patch rows.
    Tensor patch_tokens({np, d},
                        std::vector<float>(x.values().begin() + static_cast<std::ptrdiff_t>(d),
                                           x.values().end()));
    bool hooked = false;
    for (const auto& hook : hooks) {
      if (hook.layer != layer) continue;
      Tensor next = hook.transform(patch_tokens);
      if (next.shape() != patch_tokens.shape()) {
        throw ContractError("hook at layer " + std::to_string(layer) +
                            " changed the activation shape to " +
                            shape_string(next.shape()));
      }
      patch_tokens = std::move(next);
      hooked = true;
    }
    if (hooked) {
      require_finite(patch_tokens, "hook output at layer " + std::to_string(layer));
      std::copy(patch_tokens.values().begin(), patch_tokens.values().end(),
                x.values().begin() + static_cast<std::ptrdiff_t>(d));
    }
    std::copy(patch_tokens.values().begin(), patch_tokens.values().end(),
              stack.values.values().begin() + static_cast<std::ptrdiff_t>(layer * np * d));
  }
  return stack;
}

HiddenStateStack forward_with_taps(const NamedTensorStore& weights, const Tensor& image,
                                   std::span<const InterventionHook> hooks) {
  return VisionEncoder(weights).forward(image, hooks);
}

}  // namespace vitprobe
