#pragma once

// Multi-scale adaptive cropping and the window token abstractor that
// compresses dense features before they enter the language model.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "tokenforge/error.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

struct CropPlan {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t crop_size = 448;  // iota
  std::size_t max_tiles = 6;    // N
  bool includes_global = true;

  std::size_t tiles() const { return rows * cols; }
  bool operator==(const CropPlan&) const = default;
};

/// Distance between the image aspect ratio and the grid's, in log space.
inline double crop_aspect_objective(std::size_t height, std::size_t width, std::size_t rows,
                                    std::size_t cols) {
  return std::abs(std::log(static_cast<double>(width) / static_cast<double>(height)) -
                  std::log(static_cast<double>(cols) / static_cast<double>(rows)));
}

/// Picks the (rows, cols) grid with rows * cols <= max_tiles whose aspect
/// ratio is closest to the image's. Among equally close grids a larger one is
/// taken only if the image holds more than half the pixels it would cover;
/// remaining ties go to fewer rows.
inline CropPlan plan_crops(std::size_t height, std::size_t width, std::size_t crop_size = 448,
                           std::size_t max_tiles = 6) {
  if (height == 0 || width == 0) fail(Errc::ShapeError, "plan_crops: empty image");
  if (crop_size == 0 || max_tiles == 0) fail(Errc::InvalidArgument, "plan_crops: bad crop config");
  CropPlan best{1, 1, crop_size, max_tiles, true};
  double best_obj = crop_aspect_objective(height, width, 1, 1);
  const double area = static_cast<double>(height) * static_cast<double>(width);
  for (std::size_t tiles = 1; tiles <= max_tiles; ++tiles)
    for (std::size_t r = 1; r <= tiles; ++r) {
      if (tiles % r != 0) continue;
      const std::size_t c = tiles / r;
      const double obj = crop_aspect_objective(height, width, r, c);
      const double tol = 1e-12 * std::max(1.0, best_obj);
      const bool closer = obj < best_obj - tol;
      const bool tie = !closer && obj <= best_obj + tol;
      const double cover = 0.5 * static_cast<double>(crop_size * crop_size) * static_cast<double>(tiles);
      if (closer || (tie && tiles > best.tiles() && area > cover)) {
        best = {r, c, crop_size, max_tiles, true};
        best_obj = obj;
      }
    }
  return best;
}

/// Global thumbnail (iota x iota) first, then the rows x cols tiles of the
/// image resized to (rows * iota, cols * iota), row-major.
template <typename T>
std::vector<FeatureGrid<T>> crop_images(const FeatureGrid<T>& image, const CropPlan& plan) {
  const std::size_t s = plan.crop_size;
  std::vector<FeatureGrid<T>> out;
  out.reserve(plan.tiles() + 1);
  out.push_back(bilinear_resize(image, s, s));
  const FeatureGrid<T> big = bilinear_resize(image, plan.rows * s, plan.cols * s);
  for (std::size_t r = 0; r < plan.rows; ++r)
    for (std::size_t c = 0; c < plan.cols; ++c) {
      FeatureGrid<T> tile(s, s, image.dim);
      for (std::size_t y = 0; y < s; ++y) {
        const T* src = big.cell(r * s + y, c * s);
        std::copy(src, src + s * image.dim, tile.cell(y, 0));
      }
      out.push_back(std::move(tile));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Token abstractor: per s x s window, alpha = softmax_j(e_s . F[w, j]) and the
// output cell is sum_j alpha_j F[w, j].

template <typename T>
FeatureGrid<T> token_abstract(const FeatureGrid<T>& features, std::span<const T> query,
                              std::size_t s = 4, std::vector<T>* alpha_out = nullptr) {
  if (query.size() != features.dim)
    fail(Errc::DimensionMismatch, "token_abstract: query length != feature dim");
  if (s == 0 || features.height % s != 0 || features.width % s != 0)
    fail(Errc::ShapeError, "token_abstract: window " + std::to_string(s) + " does not divide " +
                               std::to_string(features.height) + "x" +
                               std::to_string(features.width));
  const std::size_t rows = features.height / s, cols = features.width / s, D = features.dim;
  const std::size_t ss = s * s;
  FeatureGrid<T> out(rows, cols, D);
  if (alpha_out) alpha_out->assign(rows * cols * ss, T(0));
  std::vector<T> logits(ss);
  for (std::size_t wr = 0; wr < rows; ++wr)
    for (std::size_t wc = 0; wc < cols; ++wc) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < ss; ++j) {
        const T* f = features.cell(wr * s + j / s, wc * s + j % s);
        T l = 0;
        for (std::size_t c = 0; c < D; ++c) l += query[c] * f[c];
        logits[j] = l;
        mx = std::max(mx, l);
      }
      T z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      T* o = out.cell(wr, wc);
      for (std::size_t j = 0; j < ss; ++j) {
        const T a = logits[j] / z;
        if (alpha_out) (*alpha_out)[(wr * cols + wc) * ss + j] = a;
        const T* f = features.cell(wr * s + j / s, wc * s + j % s);
        for (std::size_t c = 0; c < D; ++c) o[c] += a * f[c];
      }
    }
  return out;
}

/// Backward of token_abstract given the alphas it produced. Accumulates into
/// grad_features and grad_query.
template <typename T>
void token_abstract_backward(const FeatureGrid<T>& features, std::span<const T> query,
                             std::size_t s, std::span<const T> alpha,
                             const FeatureGrid<T>& grad_out, FeatureGrid<T>& grad_features,
                             std::span<T> grad_query) {
  const std::size_t rows = features.height / s, cols = features.width / s, D = features.dim;
  const std::size_t ss = s * s;
  std::vector<T> dalpha(ss);
  for (std::size_t wr = 0; wr < rows; ++wr)
    for (std::size_t wc = 0; wc < cols; ++wc) {
      const T* g = grad_out.cell(wr, wc);
      const T* a = alpha.data() + (wr * cols + wc) * ss;
      T mean_da = 0;
      for (std::size_t j = 0; j < ss; ++j) {
        const T* f = features.cell(wr * s + j / s, wc * s + j % s);
        T d = 0;
        for (std::size_t c = 0; c < D; ++c) d += g[c] * f[c];
        dalpha[j] = d;
        mean_da += a[j] * d;
      }
      for (std::size_t j = 0; j < ss; ++j) {
        const std::size_t y = wr * s + j / s, x = wc * s + j % s;
        const T* f = features.cell(y, x);
        T* gf = grad_features.cell(y, x);
        const T dl = a[j] * (dalpha[j] - mean_da);
        for (std::size_t c = 0; c < D; ++c) {
          gf[c] += a[j] * g[c] + dl * query[c];
          grad_query[c] += dl * f[c];
        }
      }
    }
}

// ---------------------------------------------------------------------------
// Flattening compressed grids into the visual token sequence.

struct TokenProvenance {
  std::size_t image = 0;  // 0 = global thumbnail, 1.. = tiles in crop order
  std::size_t row = 0;
  std::size_t col = 0;

  bool operator==(const TokenProvenance&) const = default;
};

template <typename T>
struct VisualSequence {
  std::size_t dim = 0;
  std::size_t side = 0;       // per-image compressed grid side
  std::vector<T> tokens;      // n_v x D
  std::vector<TokenProvenance> provenance;

  std::size_t size() const { return provenance.size(); }
  std::span<const T> token(std::size_t i) const { return {tokens.data() + i * dim, dim}; }
};

/// Compressed grid side for one iota x iota crop: 4 * iota / (p * s).
inline std::size_t abstract_side(std::size_t crop_size, std::size_t patch_size, std::size_t s) {
  if (patch_size == 0 || s == 0 || (4 * crop_size) % patch_size != 0 ||
      ((4 * crop_size) / patch_size) % s != 0)
    fail(Errc::ShapeError, "crop size " + std::to_string(crop_size) +
                               " is incompatible with patch " + std::to_string(patch_size) +
                               " and window " + std::to_string(s));
  return 4 * crop_size / patch_size / s;
}

/// n_v = side^2 * (tiles + 1).
inline std::size_t visual_token_count(std::size_t crop_size, std::size_t patch_size, std::size_t s,
                                      std::size_t tiles) {
  const std::size_t side = abstract_side(crop_size, patch_size, s);
  return side * side * (tiles + 1);
}

template <typename T>
VisualSequence<T> flatten_sequence(std::span<const FeatureGrid<T>> grids) {
  VisualSequence<T> seq;
  if (grids.empty()) return seq;
  seq.dim = grids[0].dim;
  seq.side = grids[0].height;
  for (std::size_t g = 0; g < grids.size(); ++g) {
    const auto& grid = grids[g];
    if (grid.height != seq.side || grid.width != seq.side || grid.dim != seq.dim)
      fail(Errc::ShapeError, "flatten_sequence: grid " + std::to_string(g) +
                                 " differs in side or dim from the global grid");
    seq.tokens.insert(seq.tokens.end(), grid.data.begin(), grid.data.end());
    for (std::size_t r = 0; r < grid.height; ++r)
      for (std::size_t c = 0; c < grid.width; ++c) seq.provenance.push_back({g, r, c});
  }
  return seq;
}

/// Inverse of flatten_sequence: places every token back by its provenance.
template <typename T>
std::vector<FeatureGrid<T>> unflatten_sequence(const VisualSequence<T>& seq) {
  std::size_t images = 0;
  for (const auto& p : seq.provenance) images = std::max(images, p.image + 1);
  std::vector<FeatureGrid<T>> grids(images, FeatureGrid<T>(seq.side, seq.side, seq.dim));
  for (std::size_t i = 0; i < seq.provenance.size(); ++i) {
    const auto& p = seq.provenance[i];
    const auto tok = seq.token(i);
    std::copy(tok.begin(), tok.end(), grids[p.image].cell(p.row, p.col));
  }
  return grids;
}

}  // namespace tokenforge
