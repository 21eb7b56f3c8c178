#include "wtrace/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "wtrace/error.hpp"

namespace wtrace {

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void require_rank2(const Tensor& t, const char* name) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(name) + " must be 2-D, got " + shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape, float fill) : Tensor(std::move(shape)) {
  std::fill(data_.begin(), data_.end(), fill);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  if (rows.size() == 0) throw DimensionError("matrix literal needs at least one row");
  const std::size_t cols = rows.begin()->size();
  std::vector<float> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
  return Tensor({values.size()}, std::vector<float>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::row_size() const {
  if (shape_.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t i = 1; i < shape_.size(); ++i) n *= shape_[i];
  return n;
}

std::span<float> Tensor::row(std::size_t r) {
  const auto n = row_size();
  return std::span<float>(data_).subspan(r * n, n);
}

std::span<const float> Tensor::row(std::size_t r) const {
  const auto n = row_size();
  return std::span<const float>(data_).subspan(r * n, n);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul lhs");
  require_rank2(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  std::vector<double> acc(n);
  const float* bd = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      if (aip == 0.0) continue;
      const float* brow = bd + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = static_cast<float>(acc[j]);
  }
  return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_bt lhs");
  require_rank2(b, "matmul_bt rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_bt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = static_cast<float>(dot(ar, b.row(j)));
  }
  return out;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_at lhs");
  require_rank2(b, "matmul_at rhs");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul_at: inner dimensions differ, " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  }
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const auto ar = a.row(p);
    const auto br = b.row(p);
    for (std::size_t i = 0; i < m; ++i) {
      const double v = ar[i];
      if (v == 0.0) continue;
      double* dst = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += v * static_cast<double>(br[j]);
    }
  }
  Tensor out({m, n});
  std::transform(acc.begin(), acc.end(), out.data().begin(), [](double v) { return static_cast<float>(v); });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same(a, b, "dot");
  return dot(a.data(), b.data());
}

double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }
double l2_norm(const Tensor& a) { return l2_norm(a.data()); }

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(a[i]) + static_cast<double>(b[i]));
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(factor * a[i]);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

double relative_error(const Tensor& a, const Tensor& b) {
  require_same(a, b, "relative_error");
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    num += d * d;
  }
  return std::sqrt(num) / std::max(l2_norm(b), 1e-30);
}

std::size_t ConvGeometry::out_height() const { return (height + 2 * pad - kh) / stride + 1; }
std::size_t ConvGeometry::out_width() const { return (width + 2 * pad - kw) / stride + 1; }

void ConvGeometry::validate() const {
  if (channels == 0 || height == 0 || width == 0 || kh == 0 || kw == 0 || stride == 0) {
    throw ConfigError("convolution geometry has a zero extent");
  }
  const auto ph = height + 2 * pad, pw = width + 2 * pad;
  if (ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0) {
    throw ConfigError("convolution output size is not integral: input " + std::to_string(height) + "x" +
                      std::to_string(width) + ", kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                      ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  }
}

Tensor im2col(std::span<const float> input, const ConvGeometry& g) {
  g.validate();
  if (input.size() != g.channels * g.height * g.width) {
    throw DimensionError("im2col: input has " + std::to_string(input.size()) + " values, geometry expects " +
                         std::to_string(g.channels * g.height * g.width));
  }
  const std::size_t oh = g.out_height(), ow = g.out_width();
  Tensor cols({g.patch_size(), oh * ow});
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const std::size_t r = (c * g.kh + ki) * g.kw + kj;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          // Signed arithmetic for the padded border.
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            float v = 0.0f;
            if (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) && ix < static_cast<long>(g.width)) {
              v = input[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)];
            }
            cols.at(r, oy * ow + ox) = v;
          }
        }
      }
    }
  }
  return cols;
}

Tensor im2col(const Tensor& input, std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad) {
  if (input.rank() != 3) throw DimensionError("im2col expects C x H x W, got " + shape_str(input.shape()));
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kh, kw, stride, pad};
  return im2col(input.data(), g);
}

Tensor col2im(const Tensor& cols, const ConvGeometry& g) {
  g.validate();
  const std::size_t oh = g.out_height(), ow = g.out_width();
  if (cols.rank() != 2 || cols.dim(0) != g.patch_size() || cols.dim(1) != oh * ow) {
    throw DimensionError("col2im: columns " + shape_str(cols.shape()) + " do not match geometry");
  }
  std::vector<double> acc(g.channels * g.height * g.width, 0.0);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const std::size_t r = (c * g.kh + ki) * g.kw + kj;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            acc[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                cols.at(r, oy * ow + ox);
          }
        }
      }
  Tensor out({g.channels, g.height, g.width});
  std::transform(acc.begin(), acc.end(), out.data().begin(), [](double v) { return static_cast<float>(v); });
  return out;
}

MeanVar mean_var(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("mean_var expects N x F, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), f = x.dim(1);
  if (n == 0) throw EmptyBatchError("mean_var over an empty batch");
  // Welford, one pass, double state.
  std::vector<double> mean(f, 0.0), m2(f, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = x.row(i);
    const double count = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < f; ++j) {
      const double d = r[j] - mean[j];
      mean[j] += d / count;
      m2[j] += d * (r[j] - mean[j]);
    }
  }
  MeanVar out{Tensor({f}), Tensor({f})};
  for (std::size_t j = 0; j < f; ++j) {
    out.mean[j] = static_cast<float>(mean[j]);
    out.var[j] = static_cast<float>(m2[j] / static_cast<double>(n));
  }
  return out;
}

}  // namespace wtrace
