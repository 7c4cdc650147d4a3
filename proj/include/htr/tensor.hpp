#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "htr/errors.hpp"

namespace htr {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles.
///
/// A default-constructed tensor is the empty placeholder (rank 0, no data); every other
/// tensor has a non-empty shape with positive extents and exactly product(shape) values.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (element_count(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + to_string(shape_) + " needs " +
                           std::to_string(element_count(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
  }

  /// Rank-2 tensor from nested rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({m, n}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
    }
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... Idx>
  double& operator()(Idx... idx) noexcept {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  double operator()(Idx... idx) const noexcept {
    return data_[offset(idx...)];
  }

  /// Row `i` of a rank-2 tensor (or the i-th slab along axis 0 in general).
  std::span<double> row(std::size_t i) noexcept {
    const std::size_t stride = data_.size() / shape_[0];
    return {data_.data() + i * stride, stride};
  }
  std::span<const double> row(std::size_t i) const noexcept {
    const std::size_t stride = data_.size() / shape_[0];
    return {data_.data() + i * stride, stride};
  }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
  }

  template <typename... Idx>
  std::size_t offset(Idx... idx) const noexcept {
    const std::size_t indices[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < sizeof...(Idx); ++a) off = off * shape_[a] + indices[a];
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + where);
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

// ---------------------------------------------------------------------------
// Raw kernels. Row-major, no shape checks; callers own the geometry.

namespace kernel {

/// C(m×n) (+)= A(m×k) · B(k×n)
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C(m×n) (+)= A(k×m)ᵀ · B(k×n)
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t i1 = std::min(rows, i0 + kBlock);
      const std::size_t j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

/// C(m×n) (+)= A(m×k) · B(n×k)ᵀ. `scratch` receives Bᵀ.
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate, std::vector<double>& scratch) {
  scratch.resize(n * k);
  transpose(n, k, b, scratch.data());
  gemm_nn(m, n, k, a, scratch.data(), c, accumulate);
}

/// y(m) (+)= W(m×n) · x(n)
inline void matvec(std::size_t m, std::size_t n, const double* w, const double* x, double* y, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* wrow = w + i * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += wrow[j] * x[j];
    y[i] = accumulate ? y[i] + s : s;
  }
}

/// y(n) (+)= W(m×n)ᵀ · x(m)
inline void matvec_t(std::size_t m, std::size_t n, const double* w, const double* x, double* y, bool accumulate) {
  if (!accumulate) std::fill(y, y + n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double xv = x[i];
    if (xv == 0.0) continue;
    const double* wrow = w + i * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += xv * wrow[j];
  }
}

/// W(m×n) += a(m) ⊗ b(n)
inline void outer_acc(std::size_t m, std::size_t n, const double* a, const double* b, double* w) {
  for (std::size_t i = 0; i < m; ++i) {
    const double av = a[i];
    if (av == 0.0) continue;
    double* wrow = w + i * n;
    for (std::size_t j = 0; j < n; ++j) wrow[j] += av * b[j];
  }
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernel::gemm_nn(a.dim(0), b.dim(1), a.dim(1), a.raw(), b.raw(), c.raw(), false);
  require_finite(c, "matmul");
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose needs a matrix, got " + to_string(a.shape()));
  Tensor t({a.dim(1), a.dim(0)});
  kernel::transpose(a.dim(0), a.dim(1), a.raw(), t.raw());
  return t;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip)

struct Extent2 {
  std::size_t h = 1;
  std::size_t w = 1;
  bool operator==(const Extent2&) const = default;
};

/// Geometry of one 2-D convolution over a single C×H×W map.
struct ConvGeometry {
  std::size_t in_channels = 1, in_h = 1, in_w = 1;
  std::size_t out_channels = 1, kh = 1, kw = 1;
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};

  std::size_t out_h() const { return (in_h + 2 * padding.h - kh) / stride.h + 1; }
  std::size_t out_w() const { return (in_w + 2 * padding.w - kw) / stride.w + 1; }
  std::size_t patch() const { return in_channels * kh * kw; }
  std::size_t positions() const { return out_h() * out_w(); }
  std::size_t in_size() const { return in_channels * in_h * in_w; }
  std::size_t out_size() const { return out_channels * positions(); }

  void validate() const {
    if (stride.h == 0 || stride.w == 0) throw DimensionError("convolution stride must be positive");
    if (kh > in_h + 2 * padding.h || kw > in_w + 2 * padding.w) {
      throw DimensionError("kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                           " larger than padded input " + std::to_string(in_h + 2 * padding.h) + "x" +
                           std::to_string(in_w + 2 * padding.w));
    }
  }
};

namespace kernel {

/// Unfold one C×H×W map into a (C·kh·kw)×(H'·W') patch matrix.
inline void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* dst = col + ((c * g.kh + i) * g.kw + j) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride.h + i) -
                                   static_cast<std::ptrdiff_t>(g.padding.h);
          double* drow = dst + oy * ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(drow, drow + ow, 0.0);
            continue;
          }
          const double* srow = x + (c * g.in_h + static_cast<std::size_t>(y)) * g.in_w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * g.stride.w + j) -
                                      static_cast<std::ptrdiff_t>(g.padding.w);
            drow[ox] = (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.in_w)) ? 0.0
                                                                               : srow[static_cast<std::size_t>(xx)];
          }
        }
      }
    }
  }
}

/// Fold a patch matrix back, summing overlaps into `x` (which is accumulated into).
inline void col2im(const ConvGeometry& g, const double* col, double* x) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* src = col + ((c * g.kh + i) * g.kw + j) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride.h + i) -
                                   static_cast<std::ptrdiff_t>(g.padding.h);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          double* xrow = x + (c * g.in_h + static_cast<std::size_t>(y)) * g.in_w;
          const double* srow = src + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * g.stride.w + j) -
                                      static_cast<std::ptrdiff_t>(g.padding.w);
            if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(g.in_w)) xrow[static_cast<std::size_t>(xx)] += srow[ox];
          }
        }
      }
    }
  }
}

/// Scratch buffers reused across conv calls on one thread.
struct ConvScratch {
  std::vector<double> col;
  std::vector<double> aux;
};

inline void conv2d_forward(const ConvGeometry& g, const double* x, const double* kernels, double* out,
                           ConvScratch& s) {
  s.col.resize(g.patch() * g.positions());
  im2col(g, x, s.col.data());
  gemm_nn(g.out_channels, g.positions(), g.patch(), kernels, s.col.data(), out, false);
}

/// Accumulates into grad_kernels; writes (or accumulates into) grad_x when non-null.
inline void conv2d_backward(const ConvGeometry& g, const double* x, const double* kernels, const double* grad_out,
                            double* grad_x, double* grad_kernels, ConvScratch& s, bool accumulate_x = false) {
  const std::size_t p = g.positions(), ck = g.patch();
  s.col.resize(ck * p);
  if (grad_kernels) {
    im2col(g, x, s.col.data());
    gemm_nt(g.out_channels, ck, p, grad_out, s.col.data(), grad_kernels, true, s.aux);
  }
  if (grad_x) {
    gemm_tn(ck, p, g.out_channels, kernels, grad_out, s.col.data(), false);
    if (!accumulate_x) std::fill(grad_x, grad_x + g.in_size(), 0.0);
    col2im(g, s.col.data(), grad_x);
  }
}

}  // namespace kernel

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernels, Extent2 stride, Extent2 padding) {
  if (input.size() != 3 || kernels.size() != 4 || kernels[1] != input[0]) {
    throw DimensionError("conv2d shape mismatch: input " + to_string(input) + ", kernels " + to_string(kernels));
  }
  ConvGeometry g{input[0], input[1], input[2], kernels[0], kernels[2], kernels[3], stride, padding};
  g.validate();
  return g;
}

/// Cross-correlation of a C_in×H×W map with C_out×C_in×kh×kw kernels.
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, Extent2 stride = {1, 1},
                     Extent2 padding = {0, 0}) {
  const ConvGeometry g = conv_geometry(input.shape(), kernels.shape(), stride, padding);
  Tensor out({g.out_channels, g.out_h(), g.out_w()});
  kernel::ConvScratch scratch;
  kernel::conv2d_forward(g, input.raw(), kernels.raw(), out.raw(), scratch);
  require_finite(out, "conv2d");
  return out;
}

struct Conv2dGrads {
  Tensor input;
  Tensor kernels;
};

inline Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_out,
                                   Extent2 stride = {1, 1}, Extent2 padding = {0, 0}) {
  const ConvGeometry g = conv_geometry(input.shape(), kernels.shape(), stride, padding);
  if (grad_out.shape() != Shape{g.out_channels, g.out_h(), g.out_w()}) {
    throw DimensionError("conv2d_backward: grad_out " + to_string(grad_out.shape()) + " does not match output " +
                         to_string(Shape{g.out_channels, g.out_h(), g.out_w()}));
  }
  Conv2dGrads grads{Tensor(input.shape()), Tensor(kernels.shape())};
  kernel::ConvScratch scratch;
  kernel::conv2d_backward(g, input.raw(), kernels.raw(), grad_out.raw(), grads.input.raw(), grads.kernels.raw(),
                          scratch);
  return grads;
}

// ---------------------------------------------------------------------------
// Elementwise ops. Broadcasting: equal shapes, or either side holding one element.

namespace detail {

template <typename Op>
Tensor binary(const Tensor& a, const Tensor& b, Op op, const char* name) {
  if (a.empty() || b.empty()) throw DimensionError(std::string(name) + ": empty operand");
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
    require_finite(out, name);
    return out;
  }
  if (b.size() == 1) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[0]);
    require_finite(out, name);
    return out;
  }
  if (a.size() == 1) {
    Tensor out(b.shape());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = op(a[0], b[i]);
    require_finite(out, name);
    return out;
  }
  throw DimensionError(std::string(name) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

template <typename Op>
Tensor unary(const Tensor& a, Op op, const char* name) {
  Tensor out = a;
  for (double& v : out.data()) v = op(v);
  require_finite(out, name);
  return out;
}

}  // namespace detail

inline double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double prelu(double x, double alpha) noexcept { return x > 0 ? x : alpha * x; }

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, std::plus<>(), "add");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, std::multiplies<>(), "mul");
}
inline Tensor add(const Tensor& a, double s) {
  return detail::unary(a, [s](double v) { return v + s; }, "add");
}
inline Tensor mul(const Tensor& a, double s) {
  return detail::unary(a, [s](double v) { return v * s; }, "mul");
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double v) { return std::tanh(v); }, "tanh");
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, [](double v) { return sigmoid(v); }, "sigmoid");
}
inline Tensor prelu(const Tensor& a, double alpha) {
  return detail::unary(a, [alpha](double v) { return prelu(v, alpha); }, "prelu");
}

inline double sum(const Tensor& a) { return std::accumulate(a.data().begin(), a.data().end(), 0.0); }

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Central-difference gradient of a scalar function, one coordinate at a time.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
  if (!(eps > 0)) throw UsageError("finite_diff_grad: eps must be positive");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: function returned a non-finite value at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2 * eps);
  }
  return grad;
}

/// ‖a−b‖∞ / max(‖a‖∞, ‖b‖∞), the relative error used by every gradient check.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  if (analytic.shape() != numeric.shape()) {
    throw DimensionError("relative_error: " + to_string(analytic.shape()) + " vs " + to_string(numeric.shape()));
  }
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale > 0 ? diff / scale : 0.0;
}

}  // namespace htr
