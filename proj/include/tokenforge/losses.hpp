#pragma once

// Token-level alignment objectives between token embeddings e_i and pooled
// visual features t_i: mean absolute difference, one-minus-cosine, and the
// pairwise sigmoid loss with learnable scale k and bias b. Every loss returns
// its analytic gradients.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "tokenforge/error.hpp"
#include "tokenforge/model.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

template <typename T>
struct AlignmentBatch {
  std::size_t dim = 0;
  std::vector<T> embeddings;         // |B| x D, token embeddings e_i
  std::vector<T> visuals;            // |B| x D, pooled visual features t_i
  std::vector<std::int64_t> labels;  // token id per pair (used by label-aware positives)

  explicit AlignmentBatch(std::size_t d = 0) : dim(d) {}

  std::size_t size() const { return dim == 0 ? 0 : embeddings.size() / dim; }
  std::span<const T> e(std::size_t i) const { return {embeddings.data() + i * dim, dim}; }
  std::span<const T> t(std::size_t i) const { return {visuals.data() + i * dim, dim}; }

  void add(std::span<const T> e_i, std::span<const T> t_i, std::int64_t label = -1) {
    if (e_i.size() != dim || t_i.size() != dim)
      fail(Errc::DimensionMismatch, "alignment pair length != batch dim");
    embeddings.insert(embeddings.end(), e_i.begin(), e_i.end());
    visuals.insert(visuals.end(), t_i.begin(), t_i.end());
    labels.push_back(label);
  }
};

template <typename T>
struct LossOutput {
  T value = 0;
  std::vector<T> grad_e;  // same layout as AlignmentBatch::embeddings
  std::vector<T> grad_t;  // same layout as AlignmentBatch::visuals
  T grad_k = 0;
  T grad_b = 0;

  void accumulate(const LossOutput& o, T w) {
    value += w * o.value;
    for (std::size_t i = 0; i < grad_e.size(); ++i) grad_e[i] += w * o.grad_e[i];
    for (std::size_t i = 0; i < grad_t.size(); ++i) grad_t[i] += w * o.grad_t[i];
    grad_k += w * o.grad_k;
    grad_b += w * o.grad_b;
  }
};

struct LossWeights {
  double dis = 1.0;
  double sim = 1.0;
  double sig = 1.0;
};

struct SigmoidOptions {
  bool normalize = false;        // unit-normalize e and t before the dot product
  bool label_positives = false;  // z_ij = +1 whenever labels match, not only on the diagonal
};

namespace detail {

template <typename T>
LossOutput<T> zero_output(const AlignmentBatch<T>& batch) {
  LossOutput<T> out;
  out.grad_e.assign(batch.embeddings.size(), T(0));
  out.grad_t.assign(batch.visuals.size(), T(0));
  return out;
}

template <typename T>
void check_batch(const AlignmentBatch<T>& batch) {
  if (batch.size() == 0) fail(Errc::EmptyBatch, "alignment batch has no pairs");
  if (batch.embeddings.size() != batch.visuals.size())
    fail(Errc::DimensionMismatch, "embedding and visual counts differ");
}

}  // namespace detail

/// (1/|B|)(1/D) sum |e_i^j - t_i^j|; the subgradient is 0 at ties.
template <typename T>
LossOutput<T> loss_dis(const AlignmentBatch<T>& batch) {
  detail::check_batch(batch);
  auto out = detail::zero_output(batch);
  const T scale = T(1) / static_cast<T>(batch.size() * batch.dim);
  for (std::size_t i = 0; i < batch.embeddings.size(); ++i) {
    const T diff = batch.embeddings[i] - batch.visuals[i];
    out.value += std::abs(diff);
    const T s = diff > T(0) ? scale : diff < T(0) ? -scale : T(0);
    out.grad_e[i] = s;
    out.grad_t[i] = -s;
  }
  out.value *= scale;
  return out;
}

/// (1/|B|) sum (1 - cos(e_i, t_i)).
template <typename T>
LossOutput<T> loss_sim(const AlignmentBatch<T>& batch) {
  detail::check_batch(batch);
  auto out = detail::zero_output(batch);
  const std::size_t n = batch.size(), D = batch.dim;
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto e = batch.e(i), t = batch.t(i);
    const T ne = l2_norm(e), nt = l2_norm(t);
    if (!(ne > T(0)) || !(nt > T(0)))
      fail(Errc::ZeroNorm, "loss_sim: pair " + std::to_string(i) + " has a zero-norm vector");
    const T c = dot(e, t) / (ne * nt);
    out.value += (T(1) - c) * inv_n;
    for (std::size_t j = 0; j < D; ++j) {
      out.grad_e[i * D + j] = -inv_n * (t[j] / (ne * nt) - c * e[j] / (ne * ne));
      out.grad_t[i * D + j] = -inv_n * (e[j] / (ne * nt) - c * t[j] / (nt * nt));
    }
  }
  return out;
}

/// Stable log(1 + exp(x)).
template <typename T>
T log1p_exp(T x) {
  return softplus(x);
}

/// -(1/|B|) sum_i sum_j log 1 / (1 + exp(z_ij (-k e_i . t_j + b))) with
/// z_ij = +1 for paired (i, j) and -1 otherwise.
template <typename T>
LossOutput<T> loss_sig(const AlignmentBatch<T>& batch, T k, T b, const SigmoidOptions& opts = {}) {
  detail::check_batch(batch);
  const std::size_t n = batch.size(), D = batch.dim;
  auto out = detail::zero_output(batch);

  // Optionally work on unit vectors; gradients are mapped back at the end.
  std::vector<T> e = batch.embeddings, t = batch.visuals;
  std::vector<T> ne(n, T(1)), nt(n, T(1));
  if (opts.normalize) {
    for (std::size_t i = 0; i < n; ++i) {
      ne[i] = l2_norm(batch.e(i));
      nt[i] = l2_norm(batch.t(i));
      if (!(ne[i] > T(0)) || !(nt[i] > T(0)))
        fail(Errc::ZeroNorm, "loss_sig: zero-norm vector with normalization enabled");
      for (std::size_t j = 0; j < D; ++j) {
        e[i * D + j] /= ne[i];
        t[i * D + j] /= nt[i];
      }
    }
  }
  std::vector<T> ge(n * D, T(0)), gt(n * D, T(0));
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const bool paired = i == j || (opts.label_positives && batch.labels.size() == n &&
                                     batch.labels[i] >= 0 && batch.labels[i] == batch.labels[j]);
      const T z = paired ? T(1) : T(-1);
      T d = 0;
      for (std::size_t c = 0; c < D; ++c) d += e[i * D + c] * t[j * D + c];
      const T x = z * (-k * d + b);
      out.value += log1p_exp(x) * inv_n;
      const T dx = sigmoid(x) * inv_n;  // d(loss)/d(x)
      const T dd = dx * (-z * k);
      out.grad_k += dx * (-z * d);
      out.grad_b += dx * z;
      for (std::size_t c = 0; c < D; ++c) {
        ge[i * D + c] += dd * t[j * D + c];
        gt[j * D + c] += dd * e[i * D + c];
      }
    }
  if (!opts.normalize) {
    out.grad_e = std::move(ge);
    out.grad_t = std::move(gt);
  } else {
    // d(u/|u|) backward: (g - u_hat (u_hat . g)) / |u|
    for (std::size_t i = 0; i < n; ++i) {
      T pe = 0, pt = 0;
      for (std::size_t c = 0; c < D; ++c) {
        pe += e[i * D + c] * ge[i * D + c];
        pt += t[i * D + c] * gt[i * D + c];
      }
      for (std::size_t c = 0; c < D; ++c) {
        out.grad_e[i * D + c] = (ge[i * D + c] - e[i * D + c] * pe) / ne[i];
        out.grad_t[i * D + c] = (gt[i * D + c] - t[i * D + c] * pt) / nt[i];
      }
    }
  }
  return out;
}

/// w_dis L_dis + w_sim L_sim + w_sig L_sig with matching weighted gradients.
template <typename T>
LossOutput<T> total_alignment_loss(const AlignmentBatch<T>& batch, T k, T b,
                                   const LossWeights& weights = {},
                                   const SigmoidOptions& opts = {}) {
  if (weights.dis < 0 || weights.sim < 0 || weights.sig < 0 ||
      (weights.dis == 0 && weights.sim == 0 && weights.sig == 0))
    fail(Errc::InvalidWeights, "loss weights must be >= 0 and not all zero");
  detail::check_batch(batch);
  auto out = detail::zero_output(batch);
  if (weights.dis > 0) out.accumulate(loss_dis(batch), static_cast<T>(weights.dis));
  if (weights.sim > 0) out.accumulate(loss_sim(batch), static_cast<T>(weights.sim));
  if (weights.sig > 0) out.accumulate(loss_sig(batch, k, b, opts), static_cast<T>(weights.sig));
  return out;
}

}  // namespace tokenforge
