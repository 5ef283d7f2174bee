#include "vitprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "vitprobe/errors.hpp"

namespace vitprobe {

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": " + std::to_string(a) + " scores vs " +
                         std::to_string(b) + " labels");
  }
}

}  // namespace

std::vector<PRPoint> precision_recall_curve(std::span<const double> scores,
                                            std::span<const double> labels) {
  require_same_length(scores.size(), labels.size(), "precision_recall_curve");
  std::size_t positives = 0;
  for (double y : labels) positives += y > 0.5;
  if (positives == 0) throw UndefinedMetricError("average precision needs at least one positive");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<PRPoint> curve;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      tp += labels[order[i]] > 0.5;
      ++seen;
      ++i;
    }
    curve.push_back({threshold, static_cast<double>(tp) / static_cast<double>(seen),
                     static_cast<double>(tp) / static_cast<double>(positives)});
  }
  return curve;
}

double average_precision(std::span<const double> scores, std::span<const double> labels) {
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : precision_recall_curve(scores, labels)) {
    ap += (p.recall - prev_recall) * p.precision;
    prev_recall = p.recall;
  }
  return ap;
}

ThresholdStats thresholded_stats(std::span<const double> scores, std::span<const double> labels,
                                 double threshold) {
  require_same_length(scores.size(), labels.size(), "thresholded_stats");
  ThresholdStats s;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool pos = labels[i] > 0.5;
    if (pred && pos) ++s.tp;
    else if (pred) ++s.fp;
    else if (pos) ++s.fn;
    else ++s.tn;
  }
  const auto d = [](std::size_t x) { return static_cast<double>(x); };
  s.precision = s.tp + s.fp ? d(s.tp) / d(s.tp + s.fp) : 0.0;
  s.recall = s.tp + s.fn ? d(s.tp) / d(s.tp + s.fn) : 0.0;
  s.f1 = s.precision + s.recall > 0.0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  s.accuracy = scores.empty() ? 0.0 : d(s.tp + s.tn) / d(scores.size());
  return s;
}

RegressionStats regression_stats(std::span<const double> preds, std::span<const double> targets) {
  require_same_length(preds.size(), targets.size(), "regression_stats");
  if (preds.empty()) throw DataError("regression_stats needs at least one prediction");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = preds[i] - targets[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double n = static_cast<double>(preds.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

RegressionStats regression_stats(std::span<const double> preds, std::span<const double> targets,
                                 Pooling pooling, std::size_t group) {
  if (pooling == Pooling::pooled) return regression_stats(preds, targets);
  require_same_length(preds.size(), targets.size(), "regression_stats");
  if (group == 0 || preds.size() % group != 0) {
    throw DimensionError("per-image pooling: " + std::to_string(preds.size()) +
                         " items do not split into images of " + std::to_string(group));
  }
  RegressionStats out;
  const std::size_t images = preds.size() / group;
  for (std::size_t i = 0; i < images; ++i) {
    const auto s = regression_stats(preds.subspan(i * group, group), targets.subspan(i * group, group));
    out.mae += s.mae;
    out.rmse += s.rmse;
  }
  out.mae /= static_cast<double>(images);
  out.rmse /= static_cast<double>(images);
  return out;
}

// ---- emission ------------------------------------------------------------------

std::string format_metric(std::optional<double> value) {
  if (!value) return {};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", *value);
  return buf;
}

namespace {

std::optional<double> parse_optional(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  return std::stod(cell);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

const MetricRow* find_row(const std::vector<MetricRow>& rows, std::size_t layer,
                          const std::string& kind, bool random) {
  for (const auto& r : rows) {
    if (r.layer == layer && r.kind == kind && r.is_random() == random) return &r;
  }
  return nullptr;
}

std::set<std::size_t> layers_of(const std::vector<MetricRow>& rows) {
  std::set<std::size_t> out;
  for (const auto& r : rows) out.insert(r.layer);
  return out;
}

std::string cell(const MetricRow* row, std::optional<double> MetricRow::*field) {
  return row ? format_metric(row->*field) : std::string();
}

}  // namespace

std::string metric_rows_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "task,layer,kind,init,ap,f1,accuracy,precision,recall,mae,rmse,best_epoch,epochs_run\n";
  for (const auto& r : rows) {
    out << r.task << ',' << r.layer << ',' << r.kind << ',' << r.init << ','
        << format_metric(r.ap) << ',' << format_metric(r.f1) << ','
        << format_metric(r.accuracy) << ',' << format_metric(r.precision) << ','
        << format_metric(r.recall) << ',' << format_metric(r.mae) << ','
        << format_metric(r.rmse) << ',' << r.best_epoch << ',' << r.epochs_run << '\n';
  }
  return out.str();
}

std::vector<MetricRow> parse_metric_rows_csv(const std::string& text) {
  std::vector<MetricRow> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 13) throw FormatError("malformed metric row: " + line);
    MetricRow r;
    r.task = c[0];
    r.layer = std::stoul(c[1]);
    r.kind = c[2];
    r.init = c[3];
    r.ap = parse_optional(c[4]);
    r.f1 = parse_optional(c[5]);
    r.accuracy = parse_optional(c[6]);
    r.precision = parse_optional(c[7]);
    r.recall = parse_optional(c[8]);
    r.mae = parse_optional(c[9]);
    r.rmse = parse_optional(c[10]);
    r.best_epoch = std::stoul(c[11]);
    r.epochs_run = std::stoul(c[12]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string boundary_table_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "layer,ap,f1,accuracy,precision,recall,random_ap,random_f1\n";
  for (std::size_t layer : layers_of(rows)) {
    const MetricRow* p = find_row(rows, layer, "linear", false);
    const MetricRow* r = find_row(rows, layer, "linear", true);
    out << layer << ',' << cell(p, &MetricRow::ap) << ',' << cell(p, &MetricRow::f1) << ','
        << cell(p, &MetricRow::accuracy) << ',' << cell(p, &MetricRow::precision) << ','
        << cell(p, &MetricRow::recall) << ',' << cell(r, &MetricRow::ap) << ','
        << cell(r, &MetricRow::f1) << '\n';
  }
  return out.str();
}

std::string depth_table_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "layer,pretrained_linear_mae,pretrained_linear_rmse,pretrained_mlp_mae,"
         "pretrained_mlp_rmse,random_linear_mae,random_linear_rmse,random_mlp_mae,"
         "random_mlp_rmse\n";
  for (std::size_t layer : layers_of(rows)) {
    out << layer;
    for (bool random : {false, true}) {
      for (const char* kind : {"linear", "mlp"}) {
        const MetricRow* r = find_row(rows, layer, kind, random);
        out << ',' << cell(r, &MetricRow::mae) << ',' << cell(r, &MetricRow::rmse);
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string cross_task_table_csv(const std::vector<MetricRow>& boundary,
                                 const std::vector<MetricRow>& depth) {
  std::set<std::size_t> layers = layers_of(boundary);
  const auto more = layers_of(depth);
  layers.insert(more.begin(), more.end());
  std::ostringstream out;
  out << "layer,boundary_f1,boundary_ap,depth_mae,depth_rmse\n";
  for (std::size_t layer : layers) {
    const MetricRow* b = find_row(boundary, layer, "linear", false);
    const MetricRow* d = find_row(depth, layer, "linear", false);
    out << layer << ',' << cell(b, &MetricRow::f1) << ',' << cell(b, &MetricRow::ap) << ','
        << cell(d, &MetricRow::mae) << ',' << cell(d, &MetricRow::rmse) << '\n';
  }
  return out.str();
}

std::string layer_curves_json(const std::vector<MetricRow>& rows) {
  using json = nlohmann::ordered_json;
  std::map<std::string, std::map<std::string, std::vector<const MetricRow*>>> groups;
  for (const auto& r : rows) groups[r.init][r.kind].push_back(&r);
  json out = json::object();
  for (auto& [init, kinds] : groups) {
    for (auto& [kind, list] : kinds) {
      std::sort(list.begin(), list.end(),
                [](const MetricRow* a, const MetricRow* b) { return a->layer < b->layer; });
      json curve = json::object();
      json layers = json::array();
      std::map<std::string, json> series;
      for (const MetricRow* r : list) {
        layers.push_back(r->layer);
        const std::pair<const char*, std::optional<double>> fields[] = {
            {"ap", r->ap},     {"f1", r->f1},     {"accuracy", r->accuracy},
            {"precision", r->precision}, {"recall", r->recall}, {"mae", r->mae},
            {"rmse", r->rmse}};
        for (const auto& [name, value] : fields) {
          if (value) series[name].push_back(std::stod(format_metric(value)));
        }
      }
      curve["layers"] = layers;
      for (auto& [name, values] : series) curve[name] = values;
      out[init][kind] = curve;
    }
  }
  return out.dump(2) + "\n";
}

}  // namespace vitprobe
