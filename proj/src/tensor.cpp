#include "vitprobe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vitprobe/errors.hpp"

namespace vitprobe {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) {
      throw DimensionError("tensor shape " + shape_string(shape) +
                           " has a zero dimension");
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  return shape_.empty() ? 0 : data_.size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

std::span<float> Tensor::row(std::size_t r) {
  return std::span<float>(data_).subspan(r * cols(), cols());
}

std::span<const float> Tensor::row(std::size_t r) const {
  return std::span<const float>(data_).subspan(r * cols(), cols());
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice(std::size_t index) const {
  if (rank() < 2) throw DimensionError("slice needs rank >= 2");
  if (index >= shape_[0]) {
    throw DimensionError("slice index " + std::to_string(index) +
                         " out of range for " + shape_string(shape_));
  }
  Shape inner(shape_.begin() + 1, shape_.end());
  const std::size_t n = shape_numel(inner);
  std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(index * n),
                         data_.begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  return Tensor(std::move(inner), std::move(out));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](float v) { return std::isfinite(v); });
}

double dot(std::span<const float> a, std::span<const float> b) {
  // Eight independent partial sums in a fixed order: the result is still
  // deterministic, and the adds no longer form one serial dependency chain.
  double acc[8] = {};
  const std::size_t n = a.size(), head = n - n % 8;
  for (std::size_t i = 0; i < head; i += 8) {
    for (std::size_t l = 0; l < 8; ++l)
      acc[l] += static_cast<double>(a[i + l]) * static_cast<double>(b[i + l]);
  }
  for (std::size_t i = head; i < n; ++i) acc[i - head] += static_cast<double>(a[i]) * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

double dot(std::span<const float> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands, got " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dimensions differ: " +
                         shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  // Transpose b once so every dot product walks contiguous memory.
  std::vector<float> bt(k * n);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + i] = b.at(i, j);

  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    auto ar = a.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      out.at(i, j) = static_cast<float>(
          dot(ar, std::span<const float>(bt).subspan(j * k, k)));
    }
  }
  require_finite(out, "matmul");
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) {
    throw DimensionError("linear weight must be rank 2, got " +
                         shape_string(weight.shape()));
  }
  const std::size_t out_dim = weight.dim(0), in_dim = weight.dim(1);
  if (x.cols() != in_dim) {
    throw DimensionError("linear input width " + std::to_string(x.cols()) +
                         " does not match weight " + shape_string(weight.shape()));
  }
  if (!bias.empty() && bias.size() != out_dim) {
    throw DimensionError("linear bias " + shape_string(bias.shape()) +
                         " does not match weight " + shape_string(weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  Tensor out(shape);
  const std::size_t rows = x.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = x.row(r);
    auto yr = out.row(r);
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = dot(xr, weight.row(o));
      if (!bias.empty()) acc += bias[o];
      yr[o] = static_cast<float>(acc);
    }
  }
  require_finite(out, "linear");
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm parameters " + shape_string(gamma.shape()) +
                         "/" + shape_string(beta.shape()) +
                         " do not match last dimension " + std::to_string(d));
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    double mean = 0.0;
    for (float v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto yr = out.row(r);
    for (std::size_t i = 0; i < d; ++i) {
      yr[i] = static_cast<float>((xr[i] - mean) * inv * gamma[i] + beta[i]);
    }
  }
  require_finite(out, "layer_norm");
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    auto yr = out.row(r);
    const float mx = *std::max_element(xr.begin(), xr.end());
    double sum = 0.0;
    std::vector<double> e(xr.size());
    for (std::size_t i = 0; i < xr.size(); ++i) {
      e[i] = std::exp(static_cast<double>(xr[i]) - mx);
      sum += e[i];
    }
    for (std::size_t i = 0; i < xr.size(); ++i) yr[i] = static_cast<float>(e[i] / sum);
  }
  require_finite(out, "softmax_rows");
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    out[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  require_finite(out, "gelu");
  return out;
}

void add_inplace(Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape()) {
    throw DimensionError("add: shapes differ " + shape_string(x.shape()) + " vs " +
                         shape_string(y.shape()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

void require_finite(const Tensor& x, const std::string& where) {
  if (!x.all_finite()) throw NumericError("non-finite value in " + where);
}

}  // namespace vitprobe
