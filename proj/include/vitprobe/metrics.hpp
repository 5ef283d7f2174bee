#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vitprobe {

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

// One point per distinct score, in descending score order. Items with equal
// scores enter together. Throws UndefinedMetricError without positives.
std::vector<PRPoint> precision_recall_curve(std::span<const double> scores,
                                            std::span<const double> labels);

/// Step-wise AP: sum over thresholds of (R_n - R_{n-1}) * P_n, no interpolation.
double average_precision(std::span<const double> scores, std::span<const double> labels);

struct ThresholdStats {
  double f1 = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// score >= threshold predicts positive. Precision is 0 with no positive
// predictions, recall 0 with no positive labels, F1 0 when both are 0.
ThresholdStats thresholded_stats(std::span<const double> scores, std::span<const double> labels,
                                 double threshold = 0.5);

struct RegressionStats {
  double mae = 0.0;
  double rmse = 0.0;
};

enum class Pooling { pooled, per_image };

RegressionStats regression_stats(std::span<const double> preds, std::span<const double> targets);
// `group` consecutive items form one image; per_image averages the per-image
// MAE and RMSE, pooled ignores the grouping.
RegressionStats regression_stats(std::span<const double> preds, std::span<const double> targets,
                                 Pooling pooling, std::size_t group);

struct MetricRow {
  std::string task;  // boundary | depth
  std::size_t layer = 0;
  std::string kind;  // linear | mlp
  std::string init;  // pretrained | random-s<seed>
  std::optional<double> ap, f1, accuracy, precision, recall, mae, rmse;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;

  bool is_random() const { return init.rfind("random", 0) == 0; }
};

std::string format_metric(std::optional<double> value);

// Long form: one line per row with every column.
std::string metric_rows_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_metric_rows_csv(const std::string& text);

// Pivoted layouts, one line per layer present in `rows`:
//   boundary: layer, AP/F1/Acc/Prec/Rec of the pretrained linear probe, random AP/F1
//   depth:    layer, MAE/RMSE for pretrained linear/mlp then random linear/mlp
//   cross:    layer, boundary F1/AP, depth MAE/RMSE (pretrained linear)
std::string boundary_table_csv(const std::vector<MetricRow>& rows);
std::string depth_table_csv(const std::vector<MetricRow>& rows);
std::string cross_task_table_csv(const std::vector<MetricRow>& boundary,
                                 const std::vector<MetricRow>& depth);

// {"<init>": {"<kind>": {"layers": [...], "<metric>": [...]}}}
std::string layer_curves_json(const std::vector<MetricRow>& rows);

}  // namespace vitprobe
