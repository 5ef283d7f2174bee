#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vitprobe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float32 array. Every dimension is positive and the data
/// length always equals the product of the shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Views the tensor as a matrix of rows() x cols(), where cols() is the last
  // dimension and rows() the product of all leading dimensions.
  std::size_t rows() const;
  std::size_t cols() const;

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  const std::vector<float>& storage() const { return data_; }

  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  Tensor reshaped(Shape shape) const;

  // Slice along the leading axis: returns element `index` of a rank>=2 tensor.
  Tensor slice(std::size_t index) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// ---- kernels -------------------------------------------------------------
//
// All kernels are pure. Dot products accumulate in double in a fixed
// left-to-right order, so results are bitwise reproducible for a given input.

Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., in] * weight[out, in]^T + bias[out]. `bias` may be empty.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);

Tensor softmax_rows(const Tensor& x);

Tensor gelu(const Tensor& x);

void add_inplace(Tensor& x, const Tensor& y);

double dot(std::span<const float> a, std::span<const float> b);
double dot(std::span<const float> a, std::span<const double> b);

// Throws NumericError naming `where` if any element is NaN or infinite.
void require_finite(const Tensor& x, const std::string& where);

}  // namespace vitprobe
