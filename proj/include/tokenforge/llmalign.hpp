#pragma once

// Token alignment at the language-model level. A deterministic stub stands in
// for the language model: visual tokens are projected into its width, text
// tokens are embedded, and each layer adds a linear map of the causal running
// mean. Hidden states of answer tokens are aligned with mask-pooled hidden
// states of the reassembled sub-image feature map.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "tokenforge/abstractor.hpp"
#include "tokenforge/corpus.hpp"
#include "tokenforge/error.hpp"
#include "tokenforge/losses.hpp"
#include "tokenforge/model.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

/// Layer-k outputs laid out as (visual | question | answer) rows.
template <typename T>
struct HiddenStates {
  std::size_t n_visual = 0;
  std::size_t n_question = 0;
  std::size_t n_answer = 0;
  std::size_t dim = 0;
  std::size_t layer = 0;
  std::vector<T> data;

  std::size_t total() const { return n_visual + n_question + n_answer; }
  std::span<const T> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
};

struct AnswerTokenRef {
  TokenEntry entry;
  std::size_t absolute_index = 0;
};

/// absolute index = n_v + n_q + index_in_text.
inline AnswerTokenRef locate_answer_token(const TokenEntry& entry, std::size_t n_visual,
                                          std::size_t n_question, std::size_t n_answer) {
  if (entry.index_in_text >= n_answer)
    fail(Errc::IndexError, "index_in_text " + std::to_string(entry.index_in_text) +
                               " outside answer of length " + std::to_string(n_answer));
  return {entry, n_visual + n_question + entry.index_in_text};
}

/// Drops the global thumbnail's tokens and tiles the remaining per-crop
/// grids into one (rows * side) x (cols * side) x D map.
template <typename T>
FeatureGrid<T> reassemble_submaps(std::span<const T> visual, std::size_t dim, const CropPlan& plan,
                                  std::size_t side) {
  const std::size_t per_image = side * side;
  const std::size_t expected = (plan.tiles() + 1) * per_image * dim;
  if (visual.size() != expected)
    fail(Errc::ShapeError, "reassemble_submaps: got " + std::to_string(visual.size() / std::max<std::size_t>(dim, 1)) +
                               " visual tokens, expected " +
                               std::to_string((plan.tiles() + 1) * per_image));
  FeatureGrid<T> out(plan.rows * side, plan.cols * side, dim);
  for (std::size_t tile = 0; tile < plan.tiles(); ++tile) {
    const std::size_t tr = tile / plan.cols, tc = tile % plan.cols;
    const T* src = visual.data() + (tile + 1) * per_image * dim;
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c)
        std::copy(src + (r * side + c) * dim, src + (r * side + c + 1) * dim,
                  out.cell(tr * side + r, tc * side + c));
  }
  return out;
}

template <typename T>
void reassemble_submaps_backward(const FeatureGrid<T>& grad_map, const CropPlan& plan,
                                 std::size_t side, std::span<T> grad_visual) {
  const std::size_t per_image = side * side, dim = grad_map.dim;
  for (std::size_t tile = 0; tile < plan.tiles(); ++tile) {
    const std::size_t tr = tile / plan.cols, tc = tile % plan.cols;
    T* dst = grad_visual.data() + (tile + 1) * per_image * dim;
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        const T* g = grad_map.cell(tr * side + r, tc * side + c);
        for (std::size_t d = 0; d < dim; ++d) dst[(r * side + c) * dim + d] += g[d];
      }
  }
}

/// Per-cell weights w such that average(M o BI(F)) == sum_q w_q F_q, i.e.
/// the bilinear adjoint of the mask divided by its popcount.
template <typename T>
std::vector<T> llm_pool_weights(const BinaryMask& mask, std::size_t h, std::size_t w) {
  const std::size_t count = mask.popcount();
  if (count == 0) fail(Errc::EmptyMask, "llm_pool_token: empty mask");
  const FeatureGrid<T> adj = bilinear_resize_adjoint(mask_to_grid<T>(mask), h, w);
  std::vector<T> weights(adj.data);
  for (auto& v : weights) v /= static_cast<T>(count);
  return weights;
}

/// Bilinearly resizes the map to the mask's resolution and averages it over
/// the masked cells.
template <typename T>
std::vector<T> llm_pool_token(const FeatureGrid<T>& map, const BinaryMask& mask) {
  const auto w = llm_pool_weights<T>(mask, map.height, map.width);
  std::vector<T> out(map.dim, T(0));
  for (std::size_t q = 0; q < w.size(); ++q) {
    if (w[q] == T(0)) continue;
    const T* f = map.data.data() + q * map.dim;
    for (std::size_t d = 0; d < map.dim; ++d) out[d] += w[q] * f[d];
  }
  return out;
}

template <typename T>
void llm_pool_token_backward(const FeatureGrid<T>& map, const BinaryMask& mask,
                             std::span<const T> grad_pooled, FeatureGrid<T>& grad_map) {
  const auto w = llm_pool_weights<T>(mask, map.height, map.width);
  for (std::size_t q = 0; q < w.size(); ++q) {
    if (w[q] == T(0)) continue;
    T* g = grad_map.data.data() + q * map.dim;
    for (std::size_t d = 0; d < map.dim; ++d) g[d] += w[q] * grad_pooled[d];
  }
}

template <typename T>
struct LlmAlignOutput {
  T value = 0;
  std::vector<T> grad_hidden;  // same layout as HiddenStates::data
  T grad_k = 0;
  T grad_b = 0;
  std::size_t pairs_used = 0;
  std::size_t pairs_dropped = 0;  // empty masks
};

template <typename T>
LlmAlignOutput<T> llm_token_align_loss(const HiddenStates<T>& hidden,
                                       const std::vector<std::pair<AnswerTokenRef, BinaryMask>>& refs,
                                       const CropPlan& plan, std::size_t side, T k, T b,
                                       const LossWeights& weights = {},
                                       const SigmoidOptions& opts = {}) {
  const std::size_t D = hidden.dim;
  const std::span<const T> visual(hidden.data.data(), hidden.n_visual * D);
  const FeatureGrid<T> map = reassemble_submaps(visual, D, plan, side);
  AlignmentBatch<T> batch(D);
  std::vector<std::size_t> used;
  LlmAlignOutput<T> out;
  for (std::size_t r = 0; r < refs.size(); ++r) {
    if (refs[r].second.empty()) {
      ++out.pairs_dropped;
      continue;
    }
    const auto pooled = llm_pool_token(map, refs[r].second);
    const std::size_t idx = refs[r].first.absolute_index;
    if (idx >= hidden.total()) fail(Errc::IndexError, "answer token index beyond hidden states");
    batch.add(hidden.row(idx), pooled, refs[r].first.entry.token_id);
    used.push_back(r);
  }
  if (used.empty()) fail(Errc::EmptyBatch, "no alignment pair with a non-empty mask");
  const auto loss = total_alignment_loss(batch, k, b, weights, opts);
  out.value = loss.value;
  out.grad_k = loss.grad_k;
  out.grad_b = loss.grad_b;
  out.pairs_used = used.size();
  out.grad_hidden.assign(hidden.data.size(), T(0));
  FeatureGrid<T> grad_map(map.height, map.width, D);
  for (std::size_t i = 0; i < used.size(); ++i) {
    const auto& ref = refs[used[i]];
    T* g = out.grad_hidden.data() + ref.first.absolute_index * D;
    for (std::size_t d = 0; d < D; ++d) g[d] += loss.grad_e[i * D + d];
    llm_pool_token_backward(map, ref.second, std::span<const T>(loss.grad_t.data() + i * D, D),
                            grad_map);
  }
  reassemble_submaps_backward(grad_map, plan, side,
                              std::span<T>(out.grad_hidden.data(), hidden.n_visual * D));
  return out;
}

// ---------------------------------------------------------------------------
// Next-token cross-entropy. Row m of `logits` (n_a x Z) scores answer token
// m; rows 1..n_a-1 contribute, row 0 has no prediction target.

template <typename T>
struct CrossEntropyOutput {
  T value = 0;
  std::vector<T> grad;  // n_a x Z
};

template <typename T>
CrossEntropyOutput<T> next_token_ce(std::span<const T> logits, std::size_t vocab,
                                    std::span<const std::int64_t> answer_ids) {
  const std::size_t n = answer_ids.size();
  if (logits.size() != n * vocab) fail(Errc::ShapeError, "next_token_ce: logits must be n_a x Z");
  for (auto id : answer_ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      fail(Errc::UnknownToken, "answer id " + std::to_string(id) + " outside vocabulary of " +
                                   std::to_string(vocab));
  CrossEntropyOutput<T> out;
  out.grad.assign(logits.size(), T(0));
  for (std::size_t m = 1; m < n; ++m) {
    const T* row = logits.data() + m * vocab;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t z = 0; z < vocab; ++z) mx = std::max(mx, row[z]);
    T sum = 0;
    for (std::size_t z = 0; z < vocab; ++z) sum += std::exp(row[z] - mx);
    const T log_z = mx + std::log(sum);
    const auto target = static_cast<std::size_t>(answer_ids[m]);
    out.value -= row[target] - log_z;
    T* g = out.grad.data() + m * vocab;
    for (std::size_t z = 0; z < vocab; ++z) g[z] = std::exp(row[z] - log_z);
    g[target] -= T(1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stub language model.

template <typename T>
struct StubLlmForward {
  std::size_t n_visual = 0, n_question = 0, n_answer = 0;
  std::vector<T> visual;                  // n_v x D inputs
  std::vector<std::int64_t> text_ids;     // question ids then answer ids
  std::vector<std::vector<T>> layers;     // L + 1 arrays of n x Dl (layer 0 = inputs)

  std::size_t total() const { return n_visual + n_question + n_answer; }
};

namespace detail {

template <typename T>
std::vector<T> causal_mean(const std::vector<T>& h, std::size_t n, std::size_t dim) {
  std::vector<T> cm(n * dim), run(dim, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t d = 0; d < dim; ++d) {
      run[d] += h[t * dim + d];
      cm[t * dim + d] = run[d] / static_cast<T>(t + 1);
    }
  }
  return cm;
}

inline void require_llm(const ModelConfig& cfg) {
  if (cfg.llm_dim == 0) fail(Errc::InvalidArgument, "model has no stub language model (llm_dim = 0)");
}

}  // namespace detail

template <typename T>
StubLlmForward<T> stub_llm_forward(const ModelParams<T>& params, std::span<const T> visual,
                                   std::span<const std::int64_t> question_ids,
                                   std::span<const std::int64_t> answer_ids) {
  const auto& cfg = params.config;
  detail::require_llm(cfg);
  const std::size_t D = cfg.embed_dim, Dl = cfg.llm_dim, Z = cfg.vocab_size;
  StubLlmForward<T> f;
  f.n_visual = visual.size() / D;
  f.n_question = question_ids.size();
  f.n_answer = answer_ids.size();
  f.visual.assign(visual.begin(), visual.end());
  f.text_ids.assign(question_ids.begin(), question_ids.end());
  f.text_ids.insert(f.text_ids.end(), answer_ids.begin(), answer_ids.end());
  const std::size_t n = f.total();
  std::vector<T> h(n * Dl);
  for (std::size_t t = 0; t < f.n_visual; ++t)
    matvec(params.llm_in_w.ptr(), visual.data() + t * D, &h[t * Dl], Dl, D);
  for (std::size_t i = 0; i < f.text_ids.size(); ++i) {
    const auto id = f.text_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= Z)
      fail(Errc::UnknownToken, "text id " + std::to_string(id) + " outside vocabulary");
    const T* e = params.llm_embed.ptr() + static_cast<std::size_t>(id) * Dl;
    std::copy(e, e + Dl, &h[(f.n_visual + i) * Dl]);
  }
  f.layers.push_back(h);
  for (const auto& w : params.llm_layers) {
    const auto cm = detail::causal_mean(h, n, Dl);
    for (std::size_t t = 0; t < n; ++t) matvec(w.ptr(), &cm[t * Dl], &h[t * Dl], Dl, Dl, true);
    f.layers.push_back(h);
  }
  return f;
}

template <typename T>
HiddenStates<T> hidden_states_at(const StubLlmForward<T>& f, std::size_t layer, std::size_t dim) {
  if (layer >= f.layers.size())
    fail(Errc::IndexError, "layer " + std::to_string(layer) + " beyond stub depth " +
                               std::to_string(f.layers.size() - 1));
  return {f.n_visual, f.n_question, f.n_answer, dim, layer, f.layers[layer]};
}

/// n_a x Z logits; row m is read out at the position of answer token m - 1.
template <typename T>
std::vector<T> stub_answer_logits(const ModelParams<T>& params, const StubLlmForward<T>& f) {
  const std::size_t Dl = params.config.llm_dim, Z = params.config.vocab_size;
  std::vector<T> logits(f.n_answer * Z, T(0));
  const auto& top = f.layers.back();
  for (std::size_t m = 1; m < f.n_answer; ++m) {
    const std::size_t pos = f.n_visual + f.n_question + m - 1;
    matvec(params.llm_out_w.ptr(), &top[pos * Dl], &logits[m * Z], Z, Dl);
  }
  return logits;
}

/// Backward through the stub. `grad_layers[l]` (possibly empty) is the
/// gradient injected at layer l; `grad_logits` (possibly empty) comes from
/// the cross-entropy. Returns d(loss)/d(visual inputs).
template <typename T>
std::vector<T> stub_llm_backward(const ModelParams<T>& params, const StubLlmForward<T>& f,
                                 const std::vector<std::vector<T>>& grad_layers,
                                 std::span<const T> grad_logits, ModelParams<T>& grads) {
  const std::size_t D = params.config.embed_dim, Dl = params.config.llm_dim;
  const std::size_t Z = params.config.vocab_size, n = f.total(), L = params.llm_layers.size();
  std::vector<T> dh(n * Dl, T(0));
  auto inject = [&](std::size_t l) {
    if (l < grad_layers.size() && !grad_layers[l].empty())
      for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += grad_layers[l][i];
  };
  inject(L);
  if (!grad_logits.empty()) {
    const auto& top = f.layers.back();
    for (std::size_t m = 1; m < f.n_answer; ++m) {
      const std::size_t pos = f.n_visual + f.n_question + m - 1;
      const T* g = grad_logits.data() + m * Z;
      outer_acc(grads.llm_out_w.ptr(), g, &top[pos * Dl], Z, Dl);
      matvec_t_acc(params.llm_out_w.ptr(), g, &dh[pos * Dl], Z, Dl);
    }
  }
  std::vector<T> dcm(n * Dl);
  for (std::size_t l = L; l-- > 0;) {
    const auto& below = f.layers[l];
    const auto cm = detail::causal_mean(below, n, Dl);
    std::fill(dcm.begin(), dcm.end(), T(0));
    for (std::size_t t = 0; t < n; ++t) {
      outer_acc(grads.llm_layers[l].ptr(), &dh[t * Dl], &cm[t * Dl], Dl, Dl);
      matvec_t_acc(params.llm_layers[l].ptr(), &dh[t * Dl], &dcm[t * Dl], Dl, Dl);
    }
    // d h_s += sum_{t >= s} dcm_t / (t + 1)
    std::vector<T> suffix(Dl, T(0));
    for (std::size_t t = n; t-- > 0;) {
      for (std::size_t d = 0; d < Dl; ++d) {
        suffix[d] += dcm[t * Dl + d] / static_cast<T>(t + 1);
        dh[t * Dl + d] += suffix[d];
      }
    }
    inject(l);
  }
  std::vector<T> dvisual(f.n_visual * D, T(0));
  for (std::size_t t = 0; t < f.n_visual; ++t) {
    outer_acc(grads.llm_in_w.ptr(), &dh[t * Dl], &f.visual[t * D], Dl, D);
    matvec_t_acc(params.llm_in_w.ptr(), &dh[t * Dl], &dvisual[t * D], Dl, D);
  }
  for (std::size_t i = 0; i < f.text_ids.size(); ++i) {
    T* g = grads.llm_embed.ptr() + static_cast<std::size_t>(f.text_ids[i]) * Dl;
    const T* src = &dh[(f.n_visual + i) * Dl];
    for (std::size_t d = 0; d < Dl; ++d) g[d] += src[d];
  }
  return dvisual;
}

// ---------------------------------------------------------------------------
// Image -> crops -> dense features -> abstractor -> flattened visual tokens.

template <typename T>
struct SequenceCache {
  CropPlan plan;
  std::size_t window = 4;
  std::vector<FeatureGrid<T>> dense;  // per crop, global first
  std::vector<VisualCache<T>> visual;
  std::vector<std::vector<T>> alphas;
};

template <typename T>
VisualSequence<T> encode_visual_sequence(const FeatureGrid<T>& image, const ModelParams<T>& params,
                                         std::size_t crop_size, std::size_t max_tiles,
                                         std::size_t window, SequenceCache<T>* cache = nullptr) {
  const CropPlan plan = plan_crops(image.height, image.width, crop_size, max_tiles);
  const auto crops = crop_images(image, plan);
  std::vector<FeatureGrid<T>> compressed;
  const std::span<const T> query(params.text_query.ptr(), params.text_query.size());
  if (cache) {
    cache->plan = plan;
    cache->window = window;
    cache->dense.clear();
    cache->visual.assign(crops.size(), {});
    cache->alphas.assign(crops.size(), {});
  }
  for (std::size_t i = 0; i < crops.size(); ++i) {
    FeatureGrid<T> dense = visual_forward(crops[i], params, cache ? &cache->visual[i] : nullptr);
    compressed.push_back(token_abstract(dense, query, window, cache ? &cache->alphas[i] : nullptr));
    if (cache) cache->dense.push_back(std::move(dense));
  }
  return flatten_sequence<T>(compressed);
}

template <typename T>
void encode_visual_sequence_backward(const ModelParams<T>& params, const SequenceCache<T>& cache,
                                     std::span<const T> grad_tokens, ModelParams<T>& grads) {
  const std::size_t D = params.config.embed_dim;
  const std::span<const T> query(params.text_query.ptr(), params.text_query.size());
  const std::span<T> grad_query(grads.text_query.ptr(), grads.text_query.size());
  std::size_t off = 0;
  for (std::size_t i = 0; i < cache.dense.size(); ++i) {
    const auto& dense = cache.dense[i];
    const std::size_t side = dense.height / cache.window;
    FeatureGrid<T> g_out(side, dense.width / cache.window, D);
    std::copy(grad_tokens.begin() + off, grad_tokens.begin() + off + g_out.data.size(),
              g_out.data.begin());
    off += g_out.data.size();
    FeatureGrid<T> g_dense(dense.height, dense.width, D);
    token_abstract_backward(dense, query, cache.window, std::span<const T>(cache.alphas[i]), g_out,
                            g_dense, grad_query);
    visual_backward(params, cache.visual[i], g_dense, grads);
  }
}

}  // namespace tokenforge
