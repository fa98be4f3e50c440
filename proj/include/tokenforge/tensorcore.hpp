#pragma once

// Dense grid numerics shared by every other module: feature grids, binary
// masks, bilinear resampling (and its adjoint), masked mean pooling, window
// reshaping, cosine similarity and a central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tokenforge/error.hpp"

namespace tokenforge {

/// Row-major H x W x D grid of reals.
template <typename T>
struct FeatureGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t dim = 0;
  std::vector<T> data;

  FeatureGrid() = default;
  FeatureGrid(std::size_t h, std::size_t w, std::size_t d, T fill = T(0))
      : height(h), width(w), dim(d), data(h * w * d, fill) {}

  std::size_t cells() const { return height * width; }

  T* cell(std::size_t y, std::size_t x) { return data.data() + (y * width + x) * dim; }
  const T* cell(std::size_t y, std::size_t x) const {
    return data.data() + (y * width + x) * dim;
  }
  std::span<T> cell_span(std::size_t idx) { return {data.data() + idx * dim, dim}; }
  std::span<const T> cell_span(std::size_t idx) const { return {data.data() + idx * dim, dim}; }

  T& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * dim + c]; }
  T at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * dim + c];
  }

  template <typename U>
  FeatureGrid<U> cast() const {
    FeatureGrid<U> out(height, width, dim);
    std::transform(data.begin(), data.end(), out.data.begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const FeatureGrid&) const = default;
};

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { bits[y * width + x] = v ? 1 : 0; }
  std::size_t popcount() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(),
                                                  [](std::uint8_t b) { return b != 0; }));
  }
  bool empty() const { return popcount() == 0; }

  bool operator==(const BinaryMask&) const = default;
};

// ---------------------------------------------------------------------------
// Small vector helpers.

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T l2_norm(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

/// out[r] (+)= sum_c m[r*cols + c] * v[c]
template <typename T>
void matvec(const T* m, const T* v, T* out, std::size_t rows, std::size_t cols,
            bool accumulate = false) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = m + r * cols;
    T acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * v[c];
    out[r] = accumulate ? out[r] + acc : acc;
  }
}

/// out[c] += sum_r m[r*cols + c] * v[r]
template <typename T>
void matvec_t_acc(const T* m, const T* v, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = m + r * cols;
    const T s = v[r];
    if (s == T(0)) continue;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c] * s;
  }
}

/// g[r*cols + c] += a[r] * b[c]
template <typename T>
void outer_acc(T* g, const T* a, const T* b, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T s = a[r];
    if (s == T(0)) continue;
    T* row = g + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += s * b[c];
  }
}

// ---------------------------------------------------------------------------
// Bilinear resampling, align-corners-false: output sample i sits at source
// coordinate (i + 0.5) * in / out - 0.5, clamped to the valid range.

namespace detail {

struct LinearTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double w_lo = 1.0;
  double w_hi = 0.0;
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    // (i + 0.5) * in / out - 0.5 as one rounding of an exact integer ratio.
    const double num = static_cast<double>(2 * i + 1) * static_cast<double>(in) -
                       static_cast<double>(out);
    double src = num / (2.0 * static_cast<double>(out));
    if (src < 0.0) src = 0.0;
    const double max_src = static_cast<double>(in - 1);
    if (src > max_src) src = max_src;
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    taps[i] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace detail

template <typename T>
FeatureGrid<T> bilinear_resize(const FeatureGrid<T>& grid, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) fail(Errc::ShapeError, "bilinear_resize: output dims must be >= 1");
  if (grid.height == 0 || grid.width == 0) fail(Errc::ShapeError, "bilinear_resize: empty input");
  if (out_h == grid.height && out_w == grid.width) return grid;
  const auto ty = detail::linear_taps(grid.height, out_h);
  const auto tx = detail::linear_taps(grid.width, out_w);
  FeatureGrid<T> out(out_h, out_w, grid.dim);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& a = ty[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& b = tx[x];
      const T fy = static_cast<T>(a.w_hi), fx = static_cast<T>(b.w_hi);
      const T* p00 = grid.cell(a.lo, b.lo);
      const T* p01 = grid.cell(a.lo, b.hi);
      const T* p10 = grid.cell(a.hi, b.lo);
      const T* p11 = grid.cell(a.hi, b.hi);
      T* o = out.cell(y, x);
      // Nested lerps reproduce constant inputs exactly.
      for (std::size_t c = 0; c < grid.dim; ++c) {
        const T top = p00[c] + fx * (p01[c] - p00[c]);
        const T bottom = p10[c] + fx * (p11[c] - p10[c]);
        o[c] = top + fy * (bottom - top);
      }
    }
  }
  return out;
}

/// Transpose of bilinear_resize: scatters an output-space gradient back onto
/// the (in_h, in_w) source grid.
template <typename T>
FeatureGrid<T> bilinear_resize_adjoint(const FeatureGrid<T>& grad_out, std::size_t in_h,
                                       std::size_t in_w) {
  if (grad_out.height == in_h && grad_out.width == in_w) return grad_out;
  const auto ty = detail::linear_taps(in_h, grad_out.height);
  const auto tx = detail::linear_taps(in_w, grad_out.width);
  FeatureGrid<T> g(in_h, in_w, grad_out.dim);
  for (std::size_t y = 0; y < grad_out.height; ++y) {
    const auto& a = ty[y];
    for (std::size_t x = 0; x < grad_out.width; ++x) {
      const auto& b = tx[x];
      const T w[4] = {static_cast<T>(a.w_lo * b.w_lo), static_cast<T>(a.w_lo * b.w_hi),
                      static_cast<T>(a.w_hi * b.w_lo), static_cast<T>(a.w_hi * b.w_hi)};
      T* dst[4] = {g.cell(a.lo, b.lo), g.cell(a.lo, b.hi), g.cell(a.hi, b.lo),
                   g.cell(a.hi, b.hi)};
      const T* src = grad_out.cell(y, x);
      for (int k = 0; k < 4; ++k) {
        if (w[k] == T(0)) continue;
        for (std::size_t c = 0; c < grad_out.dim; ++c) dst[k][c] += w[k] * src[c];
      }
    }
  }
  return g;
}

template <typename T>
FeatureGrid<T> mask_to_grid(const BinaryMask& mask) {
  FeatureGrid<T> g(mask.height, mask.width, 1);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) g.data[i] = mask.bits[i] ? T(1) : T(0);
  return g;
}

// ---------------------------------------------------------------------------
// Masked mean pooling.

enum class PoolMode {
  Threshold,  // bilinear to feature resolution, then binarize at 0.5
  Soft,       // use the bilinear weights directly
};

/// Per-cell pooling weights of `mask` at (h, w) feature resolution.
template <typename T>
std::vector<T> pool_weights(const BinaryMask& mask, std::size_t h, std::size_t w,
                            PoolMode mode = PoolMode::Threshold) {
  if (mask.height == 0 || mask.width == 0) fail(Errc::ShapeError, "pool_weights: empty mask dims");
  const FeatureGrid<double> resized = bilinear_resize(mask_to_grid<double>(mask), h, w);
  std::vector<T> weights(h * w);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double v = resized.data[i];
    weights[i] = mode == PoolMode::Threshold ? (v >= 0.5 ? T(1) : T(0)) : static_cast<T>(v);
  }
  return weights;
}

/// Binary mask at (h, w) recovered by bilinear resampling and a 0.5 threshold.
inline BinaryMask resample_mask(const BinaryMask& mask, std::size_t h, std::size_t w) {
  const auto weights = pool_weights<double>(mask, h, w, PoolMode::Threshold);
  BinaryMask out(h, w);
  for (std::size_t i = 0; i < weights.size(); ++i) out.bits[i] = weights[i] > 0.0 ? 1 : 0;
  return out;
}

template <typename T>
std::vector<T> weighted_mean_pool(const FeatureGrid<T>& features, std::span<const T> weights) {
  if (weights.size() != features.cells())
    fail(Errc::DimensionMismatch, "weighted_mean_pool: weight count != cell count");
  T total = 0;
  std::vector<T> out(features.dim, T(0));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const T w = weights[i];
    if (w == T(0)) continue;
    total += w;
    const T* f = features.data.data() + i * features.dim;
    for (std::size_t c = 0; c < features.dim; ++c) out[c] += w * f[c];
  }
  if (!(total > T(0))) fail(Errc::EmptyMask, "masked pooling over an empty effective mask");
  for (auto& v : out) v /= total;
  return out;
}

/// Accumulates d(pooled)/d(features) into grad_features.
template <typename T>
void weighted_mean_pool_backward(std::span<const T> weights, std::span<const T> grad_pooled,
                                 FeatureGrid<T>& grad_features) {
  const T total = std::accumulate(weights.begin(), weights.end(), T(0));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const T w = weights[i];
    if (w == T(0)) continue;
    const T s = w / total;
    T* g = grad_features.data.data() + i * grad_features.dim;
    for (std::size_t c = 0; c < grad_features.dim; ++c) g[c] += s * grad_pooled[c];
  }
}

/// Mean of `features` over the cells selected by `mask` (resampled to the
/// feature resolution when the dims differ). Throws EmptyMask when nothing
/// survives resampling.
template <typename T>
std::vector<T> masked_mean_pool(const FeatureGrid<T>& features, const BinaryMask& mask,
                                PoolMode mode = PoolMode::Threshold) {
  const auto weights = pool_weights<T>(mask, features.height, features.width, mode);
  return weighted_mean_pool(features, std::span<const T>(weights));
}

// ---------------------------------------------------------------------------
// Window partition: (H, W, D) -> (H/s * W/s windows, D, s*s), windows and
// intra-window cells both in row-major order.

template <typename T>
struct Windows {
  std::size_t rows = 0;  // windows per column
  std::size_t cols = 0;  // windows per row
  std::size_t dim = 0;
  std::size_t side = 0;  // s
  std::vector<T> data;   // [window][channel][cell]

  std::size_t count() const { return rows * cols; }
  std::size_t cells_per_window() const { return side * side; }
  T at(std::size_t w, std::size_t c, std::size_t j) const {
    return data[(w * dim + c) * side * side + j];
  }
};

template <typename T>
Windows<T> window_partition(const FeatureGrid<T>& grid, std::size_t s) {
  if (s == 0 || grid.height % s != 0 || grid.width % s != 0)
    fail(Errc::ShapeError, "window_partition: window side " + std::to_string(s) +
                               " does not divide " + std::to_string(grid.height) + "x" +
                               std::to_string(grid.width));
  Windows<T> w{grid.height / s, grid.width / s, grid.dim, s, {}};
  w.data.resize(grid.data.size());
  const std::size_t ss = s * s;
  for (std::size_t wr = 0; wr < w.rows; ++wr)
    for (std::size_t wc = 0; wc < w.cols; ++wc) {
      const std::size_t win = wr * w.cols + wc;
      for (std::size_t j = 0; j < ss; ++j) {
        const T* src = grid.cell(wr * s + j / s, wc * s + j % s);
        for (std::size_t c = 0; c < grid.dim; ++c) w.data[(win * grid.dim + c) * ss + j] = src[c];
      }
    }
  return w;
}

template <typename T>
FeatureGrid<T> window_merge(const Windows<T>& w) {
  const std::size_t s = w.side, ss = s * s;
  FeatureGrid<T> grid(w.rows * s, w.cols * s, w.dim);
  for (std::size_t wr = 0; wr < w.rows; ++wr)
    for (std::size_t wc = 0; wc < w.cols; ++wc) {
      const std::size_t win = wr * w.cols + wc;
      for (std::size_t j = 0; j < ss; ++j) {
        T* dst = grid.cell(wr * s + j / s, wc * s + j % s);
        for (std::size_t c = 0; c < w.dim; ++c) dst[c] = w.data[(win * w.dim + c) * ss + j];
      }
    }
  return grid;
}

// ---------------------------------------------------------------------------

template <typename T>
T cosine_similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) fail(Errc::DimensionMismatch, "cosine_similarity: length mismatch");
  const T na = l2_norm(a), nb = l2_norm(b);
  if (!(na > T(0)) || !(nb > T(0))) fail(Errc::ZeroNorm, "cosine_similarity: zero-norm vector");
  const T c = dot(a, b) / (na * nb);
  return std::clamp(c, T(-1), T(1));
}

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> x, double eps) {
  if (!(eps > 0.0)) fail(Errc::InvalidArgument, "finite_diff_grad: eps must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      fail(Errc::NumericalFailure, "finite_diff_grad: non-finite function value at coordinate " +
                                       std::to_string(i));
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace tokenforge
