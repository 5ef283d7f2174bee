#include "vitprobe/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <optional>

#include "vitprobe/cache.hpp"
#include "vitprobe/errors.hpp"
#include "vitprobe/image.hpp"
#include "vitprobe/rng.hpp"

namespace vitprobe {

using json = nlohmann::json;

std::string to_string(ProbeKind kind) { return kind == ProbeKind::linear ? "linear" : "mlp"; }

ProbeKind parse_probe_kind(std::string_view text) {
  if (text == "linear") return ProbeKind::linear;
  if (text == "mlp") return ProbeKind::mlp;
  throw DataError("unknown probe kind '" + std::string(text) + "'");
}

std::size_t ProbeShape::parameter_count() const {
  if (kind == ProbeKind::linear) return input_width + 1;
  return hidden_width * input_width + hidden_width + hidden_width + 1;
}

std::span<const float> ProbeCheckpoint::weight() const {
  if (config.kind != ProbeKind::linear) throw ContractError("weight() needs a linear probe");
  return std::span<const float>(params).first(config.input_width);
}

float ProbeCheckpoint::bias() const {
  if (config.kind != ProbeKind::linear) throw ContractError("bias() needs a linear probe");
  return params.at(config.input_width);
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

template <typename P>
double forward_row(const ProbeShape& s, std::span<const P> p, std::span<const float> x) {
  const std::size_t d = s.input_width;
  if (s.kind == ProbeKind::linear) {
    double z = p[d];
    for (std::size_t k = 0; k < d; ++k) z += static_cast<double>(p[k]) * x[k];
    return z;
  }
  const std::size_t h = s.hidden_width;
  const P* w1 = p.data();
  const P* b1 = w1 + h * d;
  const P* w2 = b1 + h;
  double z = p[h * d + 2 * h];
  for (std::size_t j = 0; j < h; ++j) {
    double a = b1[j];
    const P* row = w1 + j * d;
    for (std::size_t k = 0; k < d; ++k) a += static_cast<double>(row[k]) * x[k];
    if (a > 0.0) z += static_cast<double>(w2[j]) * a;
  }
  return z;
}

double row_loss(Task task, double z, double y, double* dz) {
  if (task == Task::boundary) {
    if (dz) *dz = sigmoid(z) - y;
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  const double e = z - y;
  if (dz) *dz = 2.0 * e;
  return e * e;
}

double loss_and_gradient_rows(const ProbeShape& s, Task task, std::span<const double> p,
                              const Tensor& x, std::span<const double> y,
                              std::span<const std::size_t> rows, std::span<double> grad,
                              std::vector<double>& scratch) {
  const std::size_t d = s.input_width;
  const std::size_t h = s.hidden_width;
  const bool want_grad = !grad.empty();
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  double loss = 0.0;
  for (std::size_t r : rows) {
    const auto xr = x.row(r);
    if (s.kind == ProbeKind::linear) {
      double z = p[d];
      for (std::size_t k = 0; k < d; ++k) z += p[k] * xr[k];
      double dz = 0.0;
      loss += row_loss(task, z, y[r], want_grad ? &dz : nullptr);
      if (want_grad) {
        dz *= inv_n;
        for (std::size_t k = 0; k < d; ++k) grad[k] += dz * xr[k];
        grad[d] += dz;
      }
      continue;
    }
    scratch.resize(h);
    const double* w1 = p.data();
    const double* b1 = w1 + h * d;
    const double* w2 = b1 + h;
    double z = p[h * d + 2 * h];
    for (std::size_t j = 0; j < h; ++j) {
      double a = b1[j];
      const double* row = w1 + j * d;
      for (std::size_t k = 0; k < d; ++k) a += row[k] * xr[k];
      scratch[j] = a;
      if (a > 0.0) z += w2[j] * a;
    }
    double dz = 0.0;
    loss += row_loss(task, z, y[r], want_grad ? &dz : nullptr);
    if (!want_grad) continue;
    dz *= inv_n;
    double* g_w1 = grad.data();
    double* g_b1 = g_w1 + h * d;
    double* g_w2 = g_b1 + h;
    grad[h * d + 2 * h] += dz;
    for (std::size_t j = 0; j < h; ++j) {
      if (scratch[j] <= 0.0) continue;
      g_w2[j] += dz * scratch[j];
      const double da = dz * w2[j];
      g_b1[j] += da;
      double* g_row = g_w1 + j * d;
      for (std::size_t k = 0; k < d; ++k) g_row[k] += da * xr[k];
    }
  }
  return loss * inv_n;
}

void check_split(const ProbeData& data, std::size_t width, const char* name) {
  if (data.labels.empty() || data.features.empty()) {
    throw DataError(std::string("probe training: ") + name + " split is empty");
  }
  if (data.features.rank() != 2 || data.features.cols() != width ||
      data.features.rows() != data.labels.size()) {
    throw DataError(std::string("probe training: ") + name + " features " +
                    shape_string(data.features.shape()) + " do not match " +
                    std::to_string(data.labels.size()) + " labels of width " +
                    std::to_string(width));
  }
}

struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer fit(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = x.row(r);
      for (std::size_t k = 0; k < d; ++k) s.mean[k] += row[k];
    }
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = x.row(r);
      for (std::size_t k = 0; k < d; ++k) {
        const double c = row[k] - s.mean[k];
        s.scale[k] += c * c;
      }
    }
    for (auto& v : s.scale) {
      v = std::sqrt(v / static_cast<double>(n));
      if (v < 1e-12) v = 1.0;
    }
    return s;
  }

  Tensor apply(const Tensor& x) const {
    Tensor out = x;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      for (std::size_t k = 0; k < row.size(); ++k) {
        row[k] = static_cast<float>((row[k] - mean[k]) / scale[k]);
      }
    }
    return out;
  }

  // Rewrites standardized-space parameters so they act on raw features.
  void fold(const ProbeShape& s, std::vector<double>& p) const {
    const std::size_t d = s.input_width;
    auto fold_row = [&](double* w, double& b) {
      for (std::size_t k = 0; k < d; ++k) {
        w[k] /= scale[k];
        b -= w[k] * mean[k];
      }
    };
    if (s.kind == ProbeKind::linear) {
      fold_row(p.data(), p[d]);
      return;
    }
    const std::size_t h = s.hidden_width;
    for (std::size_t j = 0; j < h; ++j) fold_row(p.data() + j * d, p[h * d + j]);
  }
};

double metric_from_predictions(Task task, std::span<const double> z,
                               std::span<const double> labels) {
  if (task == Task::boundary) {
    // sigmoid(z) >= 0.5 exactly when z >= 0.
    return thresholded_stats(z, labels, 0.0).f1;
  }
  return regression_stats(z, labels).mae;
}

std::vector<double> forward_all(const ProbeShape& s, std::span<const double> p, const Tensor& x) {
  std::vector<double> out(x.rows());
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = forward_row(s, p, x.row(r));
  return out;
}

}  // namespace

double probe_forward(const ProbeCheckpoint& ckpt, std::span<const float> h) {
  if (h.size() != ckpt.config.input_width) {
    throw DimensionError("probe expects width " + std::to_string(ckpt.config.input_width) +
                         ", got " + std::to_string(h.size()));
  }
  return forward_row(ckpt.config.shape(), std::span<const float>(ckpt.params), h);
}

std::vector<double> predict(const ProbeCheckpoint& ckpt, const Tensor& features) {
  if (features.cols() != ckpt.config.input_width) {
    throw DimensionError("probe expects width " + std::to_string(ckpt.config.input_width) +
                         ", got " + std::to_string(features.cols()));
  }
  std::vector<double> out(features.rows());
  const auto s = ckpt.config.shape();
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r] = forward_row(s, std::span<const float>(ckpt.params), features.row(r));
  }
  return out;
}

std::vector<double> predict_scores(const ProbeCheckpoint& ckpt, const Tensor& features) {
  auto out = predict(ckpt, features);
  if (ckpt.config.task == Task::boundary) {
    for (auto& v : out) v = sigmoid(v);
  }
  return out;
}

double probe_loss_and_gradient(const ProbeShape& shape, Task task,
                               std::span<const double> params, const Tensor& x,
                               std::span<const double> y, std::span<double> grad) {
  if (params.size() != shape.parameter_count() || (!grad.empty() && grad.size() != params.size())) {
    throw DimensionError("probe parameter vector has the wrong length");
  }
  if (x.rows() != y.size() || x.cols() != shape.input_width) {
    throw DimensionError("probe inputs do not match targets");
  }
  std::vector<std::size_t> rows(y.size());
  std::iota(rows.begin(), rows.end(), 0);
  std::vector<double> scratch;
  return loss_and_gradient_rows(shape, task, params, x, y, rows, grad, scratch);
}

std::vector<double> init_probe_params(const ProbeShape& shape, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "probe-init"));
  std::vector<double> p(shape.parameter_count(), 0.0);
  const std::size_t d = shape.input_width;
  if (shape.kind == ProbeKind::linear) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t k = 0; k < d; ++k) p[k] = rng.uniform(-bound, bound);
    return p;
  }
  const std::size_t h = shape.hidden_width;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < h * d; ++i) p[i] = rng.uniform(-b1, b1);
  const double b2 = 1.0 / std::sqrt(static_cast<double>(h));
  for (std::size_t j = 0; j < h; ++j) p[h * d + h + j] = rng.uniform(-b2, b2);
  return p;
}

ProbeCheckpoint train_probe(const ProbeData& train, const ProbeData& val,
                            const ProbeConfig& config) {
  const ProbeShape shape = config.shape();
  check_split(train, config.input_width, "train");
  check_split(val, config.input_width, "val");
  if (config.batch_size == 0 || config.max_epochs == 0) {
    throw ContractError("probe training needs a positive batch size and epoch budget");
  }

  std::optional<Standardizer> standardizer;
  Tensor train_x_std, val_x_std;
  if (config.standardize) {
    standardizer = Standardizer::fit(train.features);
    train_x_std = standardizer->apply(train.features);
    val_x_std = standardizer->apply(val.features);
  }
  const Tensor& train_x = config.standardize ? train_x_std : train.features;
  const Tensor& val_x = config.standardize ? val_x_std : val.features;

  std::vector<double> p = init_probe_params(shape, config.seed);
  std::vector<double> m(p.size(), 0.0), v(p.size(), 0.0), grad(p.size(), 0.0);
  std::vector<double> best = p;
  std::vector<double> scratch;

  ProbeCheckpoint ckpt;
  ckpt.config = config;
  const bool maximize = config.task == Task::boundary;
  double best_metric = maximize ? -std::numeric_limits<double>::infinity()
                                : std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::uint64_t step = 0;

  std::vector<std::size_t> order(train.labels.size());
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, "probe-shuffle", epoch));
    rng.shuffle(order);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      const std::span<const std::size_t> batch(order.data() + start, n);
      const double loss =
          loss_and_gradient_rows(shape, config.task, p, train_x, train.labels, batch, grad, scratch);
      if (!std::isfinite(loss)) {
        throw NumericError("probe training diverged at epoch " + std::to_string(epoch) +
                           " (layer " + std::to_string(config.layer) + ")");
      }
      epoch_loss += loss * static_cast<double>(n);

      ++step;
      const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      const double decay = 1.0 - config.lr * config.weight_decay;
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] *= decay;
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
        p[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.adam_eps);
      }
    }
    ckpt.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));

    const double metric =
        metric_from_predictions(config.task, forward_all(shape, p, val_x), val.labels);
    if (!std::isfinite(metric)) {
      throw NumericError("non-finite validation metric at epoch " + std::to_string(epoch));
    }
    ckpt.val_history.push_back(metric);
    if (maximize ? metric > best_metric : metric < best_metric) {
      best_metric = metric;
      best = p;
      ckpt.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }

  if (standardizer) standardizer->fold(shape, best);
  ckpt.params.assign(best.begin(), best.end());
  ckpt.metadata["activation"] = config.kind == ProbeKind::mlp ? "relu" : "none";
  ckpt.metadata["weight_decay_mode"] = "decoupled";
  ckpt.metadata["val_metric"] = maximize ? "f1@0.5" : "mae";
  ckpt.metadata["standardized"] = config.standardize ? "true" : "false";
  return ckpt;
}

double validation_metric(const ProbeCheckpoint& ckpt, const ProbeData& data) {
  return metric_from_predictions(ckpt.config.task, predict(ckpt, data.features), data.labels);
}

MetricRow evaluate_probe(const ProbeCheckpoint& ckpt, const ProbeData& test,
                         const EvalOptions& options) {
  MetricRow row;
  row.task = to_string(ckpt.config.task);
  row.layer = ckpt.config.layer;
  row.kind = to_string(ckpt.config.kind);
  row.best_epoch = ckpt.best_epoch;
  row.epochs_run = ckpt.val_history.size();
  const auto scores = predict_scores(ckpt, test.features);
  if (ckpt.config.task == Task::boundary) {
    const auto stats = thresholded_stats(scores, test.labels, 0.5);
    row.f1 = stats.f1;
    row.accuracy = stats.accuracy;
    row.precision = stats.precision;
    row.recall = stats.recall;
    row.ap = average_precision(scores, test.labels);
  } else {
    const auto stats =
        regression_stats(scores, test.labels, options.pooling, options.patches_per_image);
    row.mae = stats.mae;
    row.rmse = stats.rmse;
  }
  return row;
}

// ---- checkpoint files ----------------------------------------------------------

namespace {

json config_to_json(const ProbeConfig& c) {
  return {{"kind", to_string(c.kind)},     {"task", to_string(c.task)},
          {"layer", c.layer},              {"input_width", c.input_width},
          {"hidden_width", c.hidden_width}, {"lr", c.lr},
          {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
          {"beta2", c.beta2},              {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size},    {"max_epochs", c.max_epochs},
          {"patience", c.patience},        {"seed", c.seed},
          {"standardize", c.standardize}};
}

ProbeConfig config_from_json(const json& j) {
  ProbeConfig c;
  c.kind = parse_probe_kind(j.at("kind").get<std::string>());
  c.task = parse_task(j.at("task").get<std::string>());
  c.layer = j.at("layer").get<std::size_t>();
  c.input_width = j.at("input_width").get<std::size_t>();
  c.hidden_width = j.at("hidden_width").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.standardize = j.at("standardize").get<bool>();
  return c;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const ProbeCheckpoint& ckpt) {
  const json header = {{"config", config_to_json(ckpt.config)},
                       {"parameters", ckpt.params.size()},
                       {"best_epoch", ckpt.best_epoch},
                       {"val_history", ckpt.val_history},
                       {"train_loss", ckpt.train_loss},
                       {"metadata", ckpt.metadata}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> bytes(8);
  const std::uint64_t len = text.size();
  std::memcpy(bytes.data(), &len, 8);
  bytes.insert(bytes.end(), text.begin(), text.end());
  const auto blob = as_bytes(std::span<const float>(ckpt.params));
  bytes.insert(bytes.end(), blob.begin(), blob.end());
  write_file_bytes(path, bytes);
}

ProbeCheckpoint read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::uint64_t len = 0;
  if (bytes.size() < 8) throw FormatError(path.string() + ": truncated checkpoint");
  std::memcpy(&len, bytes.data(), 8);
  if (len > bytes.size() - 8) throw FormatError(path.string() + ": bad checkpoint header");
  const json header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
  ProbeCheckpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.best_epoch = header.at("best_epoch").get<std::size_t>();
  ckpt.val_history = header.at("val_history").get<std::vector<double>>();
  ckpt.train_loss = header.at("train_loss").get<std::vector<double>>();
  ckpt.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
  const std::size_t n = header.at("parameters").get<std::size_t>();
  if (n != ckpt.config.shape().parameter_count() || bytes.size() - 8 - len != n * sizeof(float)) {
    throw FormatError(path.string() + ": parameter blob does not match the probe shape");
  }
  ckpt.params.resize(n);
  std::memcpy(ckpt.params.data(), bytes.data() + 8 + len, n * sizeof(float));
  return ckpt;
}

}  // namespace vitprobe
