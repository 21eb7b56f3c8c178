#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace wtrace {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float32 array. All arithmetic in this library accumulates
/// in double and stores the result back as float.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);
  Tensor(Shape shape, float fill);

  /// Builds a 2-D tensor from nested rows; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  /// 2-D element access (row, col); the tensor must be rank 2.
  float& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

  /// Row `r` of the tensor viewed as [dim(0) x rest].
  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;
  std::size_t row_size() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// [m x k] * [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m x k] * [n x k]^T
Tensor matmul_bt(const Tensor& a, const Tensor& b);
/// [k x m]^T * [k x n]
Tensor matmul_at(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

double dot(const Tensor& a, const Tensor& b);
double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(const Tensor& a);
double l2_norm(std::span<const float> a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// Largest |a_i - b_i|; shapes must agree.
double max_abs_diff(const Tensor& a, const Tensor& b);
/// ||a - b||_2 / max(||b||_2, tiny)
double relative_error(const Tensor& a, const Tensor& b);

struct ConvGeometry {
  std::size_t channels = 1, height = 1, width = 1;
  std::size_t kh = 1, kw = 1, stride = 1, pad = 0;

  std::size_t out_height() const;
  std::size_t out_width() const;
  std::size_t patch_size() const { return channels * kh * kw; }
  /// Throws ConfigError when the output size is not a positive integer.
  void validate() const;
};

/// Lowers a C x H x W input into a (C*kh*kw) x (H'*W') matrix whose columns
/// are zero-padded receptive fields in row-major output order.
Tensor im2col(const Tensor& input, std::size_t kh, std::size_t kw, std::size_t stride,
              std::size_t pad);
Tensor im2col(std::span<const float> input, const ConvGeometry& g);
/// Adjoint of im2col: scatters columns back into a C x H x W tensor, summing
/// overlapping contributions.
Tensor col2im(const Tensor& cols, const ConvGeometry& g);

struct MeanVar {
  Tensor mean;
  Tensor var;
};

/// Per-feature mean and population variance of an [N x F] tensor.
MeanVar mean_var(const Tensor& x);

}  // namespace wtrace
