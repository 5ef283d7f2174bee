#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vitprobe/labels.hpp"
#include "vitprobe/metrics.hpp"
#include "vitprobe/tensor.hpp"

namespace vitprobe {

enum class ProbeKind { linear, mlp };

std::string to_string(ProbeKind kind);
ProbeKind parse_probe_kind(std::string_view text);

struct ProbeShape {
  ProbeKind kind = ProbeKind::linear;
  std::size_t input_width = 768;
  std::size_t hidden_width = 256;

  /// linear: [w (input), b]
  /// mlp:    [W1 (hidden x input, row-major), b1 (hidden), w2 (hidden), b2]
  std::size_t parameter_count() const;
};

struct ProbeConfig {
  ProbeKind kind = ProbeKind::linear;
  Task task = Task::depth;
  std::size_t layer = 0;
  std::size_t input_width = 768;
  std::size_t hidden_width = 256;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 512;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  // Train on per-feature standardized inputs; the checkpoint stores weights
  // folded back into raw feature space either way.
  bool standardize = false;

  ProbeShape shape() const { return {kind, input_width, hidden_width}; }

  friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;
};

struct ProbeCheckpoint {
  ProbeConfig config;
  std::vector<float> params;         // layout of ProbeShape::parameter_count
  std::size_t best_epoch = 0;        // index into val_history
  std::vector<double> val_history;   // val F1 (boundary) or val MAE (depth) per epoch
  std::vector<double> train_loss;    // mean training loss per epoch
  std::map<std::string, std::string> metadata;

  // Linear probes only: the weight vector w and bias b.
  std::span<const float> weight() const;
  float bias() const;
};

struct ProbeData {
  Tensor features;              // (samples, width)
  std::vector<double> labels;   // one target per row
};

// Raw output: a logit for boundary probes, a normalized depth for depth probes.
double probe_forward(const ProbeCheckpoint& ckpt, std::span<const float> h);
std::vector<double> predict(const ProbeCheckpoint& ckpt, const Tensor& features);
// Boundary probes: sigmoid of the logit. Depth probes: the raw prediction.
std::vector<double> predict_scores(const ProbeCheckpoint& ckpt, const Tensor& features);

double sigmoid(double z);

/// Mean loss over the rows of `x` (BCE on logits for boundary, MSE for depth)
/// and, when `grad` is non-empty, its gradient with respect to `params`.
double probe_loss_and_gradient(const ProbeShape& shape, Task task,
                               std::span<const double> params, const Tensor& x,
                               std::span<const double> y, std::span<double> grad);

std::vector<double> init_probe_params(const ProbeShape& shape, std::uint64_t seed);

// Throws DataError on an empty or misaligned split, NumericError on a
// non-finite loss.
ProbeCheckpoint train_probe(const ProbeData& train, const ProbeData& val,
                            const ProbeConfig& config);

// Validation metric used for early stopping.
double validation_metric(const ProbeCheckpoint& ckpt, const ProbeData& data);

struct EvalOptions {
  Pooling pooling = Pooling::pooled;
  std::size_t patches_per_image = 196;
};

// Test-set metrics for the checkpoint's task, filled into a MetricRow.
MetricRow evaluate_probe(const ProbeCheckpoint& ckpt, const ProbeData& test,
                         const EvalOptions& options = {});

// u64 little-endian header length, JSON header, raw float32 parameters.
void write_checkpoint(const std::filesystem::path& path, const ProbeCheckpoint& ckpt);
ProbeCheckpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace vitprobe
