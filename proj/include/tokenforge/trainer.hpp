#pragma once

// Desk-scale training: records -> dense features -> masked pooling ->
// alignment losses, optionally followed by the visual sequence through the
// stub language model for LLM-level alignment and next-token cross-entropy.
// Gradients are analytic throughout; compute_gradients is the composite the
// finite-difference tests exercise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokenforge/abstractor.hpp"
#include "tokenforge/bpe.hpp"
#include "tokenforge/checkpoint.hpp"
#include "tokenforge/corpus.hpp"
#include "tokenforge/error.hpp"
#include "tokenforge/evalkit.hpp"
#include "tokenforge/llmalign.hpp"
#include "tokenforge/losses.hpp"
#include "tokenforge/model.hpp"
#include "tokenforge/synthetic.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

enum class Stage { Pretrain, TokenAlign, Finetune };
enum class OptimizerKind { AdamW, Sgd };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::TokenAlign: return "token_align";
    case Stage::Finetune: return "finetune";
  }
  return "?";
}

struct TrainConfig {
  ModelConfig model;  // vocab_size 0 takes the corpus vocabulary size
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: no cap
  std::size_t batch_size = 8;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  LossWeights weights;
  double w_llm_align = 1.0;
  double w_ce = 1.0;
  std::uint64_t seed = 0;
  bool enable_llm_alignment = false;
  Stage stage = Stage::Pretrain;
  SigmoidOptions sigmoid;
  bool background_pairs = false;  // pair the space token with the unlabeled background
  PoolMode pool_mode = PoolMode::Threshold;
  std::size_t llm_layer = 1;  // hidden layer k used for LLM-level alignment
  std::size_t crop_size = 448;
  std::size_t max_tiles = 6;
  std::size_t window = 4;
  bool freeze_llm = true;  // language-model weights stay fixed outside Finetune
  bool shuffle = true;
  double logit_bias_init = -10.0;  // b at initialization
  double mask_dropout = 0.0;  // chance of dropping each pooled feature cell per step

  /// The alignment branch is cancelled during fine-tuning.
  bool llm_alignment_active() const { return stage == Stage::TokenAlign && enable_llm_alignment; }

  void validate() const {
    if (!(lr >= 0) || !std::isfinite(lr)) fail(Errc::InvalidArgument, "lr must be finite and >= 0");
    if (batch_size < 1) fail(Errc::InvalidArgument, "batch_size must be >= 1");
    if (stage != Stage::Pretrain && model.llm_dim == 0)
      fail(Errc::InvalidArgument, std::string(stage_name(stage)) + " stage needs llm_dim > 0");
    if (!(mask_dropout >= 0 && mask_dropout < 1))
      fail(Errc::InvalidArgument, "mask_dropout must be in [0, 1)");
    if (llm_alignment_active() && llm_layer > model.llm_layers)
      fail(Errc::InvalidArgument, "llm_layer exceeds llm_layers");
  }

  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(Errc::ParseError, key + ": expected a boolean, got '" + v + "'");
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    fail(Errc::ParseError, key + ": expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    fail(Errc::ParseError, key + ": expected a non-negative integer, got '" + v + "'");
  return std::stoull(v);
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

}  // namespace detail

/// Flat `key = value` lines; `#` starts a comment.
inline TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(Errc::ParseError, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), v = detail::trim(line.substr(eq + 1));
    using namespace detail;
    if (key == "epochs") c.epochs = parse_count(key, v);
    else if (key == "max_steps") c.max_steps = parse_count(key, v);
    else if (key == "batch_size") c.batch_size = parse_count(key, v);
    else if (key == "lr") c.lr = parse_real(key, v);
    else if (key == "optimizer") {
      if (v == "adamw") c.optimizer = OptimizerKind::AdamW;
      else if (v == "sgd") c.optimizer = OptimizerKind::Sgd;
      else fail(Errc::ParseError, "optimizer must be adamw or sgd");
    } else if (key == "beta1") c.beta1 = parse_real(key, v);
    else if (key == "beta2") c.beta2 = parse_real(key, v);
    else if (key == "adam_eps") c.adam_eps = parse_real(key, v);
    else if (key == "weight_decay") c.weight_decay = parse_real(key, v);
    else if (key == "w_dis") c.weights.dis = parse_real(key, v);
    else if (key == "w_sim") c.weights.sim = parse_real(key, v);
    else if (key == "w_sig") c.weights.sig = parse_real(key, v);
    else if (key == "w_llm_align") c.w_llm_align = parse_real(key, v);
    else if (key == "w_ce") c.w_ce = parse_real(key, v);
    else if (key == "seed") c.seed = parse_count(key, v);
    else if (key == "enable_llm_alignment") c.enable_llm_alignment = parse_bool(key, v);
    else if (key == "stage") {
      if (v == "pretrain") c.stage = Stage::Pretrain;
      else if (v == "token_align") c.stage = Stage::TokenAlign;
      else if (v == "finetune") c.stage = Stage::Finetune;
      else fail(Errc::ParseError, "stage must be pretrain, token_align or finetune");
    } else if (key == "normalize_sig") c.sigmoid.normalize = parse_bool(key, v);
    else if (key == "label_positives") c.sigmoid.label_positives = parse_bool(key, v);
    else if (key == "background_pairs") c.background_pairs = parse_bool(key, v);
    else if (key == "pool_mode") {
      if (v == "threshold") c.pool_mode = PoolMode::Threshold;
      else if (v == "soft") c.pool_mode = PoolMode::Soft;
      else fail(Errc::ParseError, "pool_mode must be threshold or soft");
    } else if (key == "llm_layer") c.llm_layer = parse_count(key, v);
    else if (key == "crop_size") c.crop_size = parse_count(key, v);
    else if (key == "max_tiles") c.max_tiles = parse_count(key, v);
    else if (key == "window") c.window = parse_count(key, v);
    else if (key == "freeze_llm") c.freeze_llm = parse_bool(key, v);
    else if (key == "shuffle") c.shuffle = parse_bool(key, v);
    else if (key == "logit_bias_init") c.logit_bias_init = parse_real(key, v);
    else if (key == "mask_dropout") c.mask_dropout = parse_real(key, v);
    else if (key == "patch_size") c.model.patch_size = parse_count(key, v);
    else if (key == "encoder_dim") c.model.encoder_dim = parse_count(key, v);
    else if (key == "encoder_layers") c.model.encoder_layers = parse_count(key, v);
    else if (key == "mlp_hidden") c.model.mlp_hidden = parse_count(key, v);
    else if (key == "embed_dim") c.model.embed_dim = parse_count(key, v);
    else if (key == "vocab_size") c.model.vocab_size = parse_count(key, v);
    else if (key == "use_attention") c.model.use_attention = parse_bool(key, v);
    else if (key == "log10_logit_scale") c.model.log10_logit_scale = parse_bool(key, v);
    else if (key == "llm_dim") c.model.llm_dim = parse_count(key, v);
    else if (key == "llm_layers") c.model.llm_layers = parse_count(key, v);
    else fail(Errc::ParseError, "line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.model.seed = c.seed;
  return c;
}

inline TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoFailure, "cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

inline nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"epochs", epochs},
          {"max_steps", max_steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"optimizer", optimizer == OptimizerKind::AdamW ? "adamw" : "sgd"},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay},
          {"w_dis", weights.dis},
          {"w_sim", weights.sim},
          {"w_sig", weights.sig},
          {"w_llm_align", w_llm_align},
          {"w_ce", w_ce},
          {"seed", seed},
          {"enable_llm_alignment", enable_llm_alignment},
          {"stage", stage_name(stage)},
          {"normalize_sig", sigmoid.normalize},
          {"label_positives", sigmoid.label_positives},
          {"background_pairs", background_pairs},
          {"pool_mode", pool_mode == PoolMode::Threshold ? "threshold" : "soft"},
          {"llm_layer", llm_layer},
          {"crop_size", crop_size},
          {"max_tiles", max_tiles},
          {"window", window},
          {"freeze_llm", freeze_llm},
          {"shuffle", shuffle},
          {"logit_bias_init", logit_bias_init},
          {"mask_dropout", mask_dropout}};
}

/// Cosine decay from `base` at step 0 to 0 at step total - 1.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total <= 1) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total - 1);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

// ---------------------------------------------------------------------------
// Composite loss and gradient.

template <typename T>
struct StepResult {
  T loss = 0;
  T align_loss = 0;      // token-level alignment on dense features
  T llm_align_loss = 0;  // mean over records
  T ce_loss = 0;         // mean over records
  std::size_t pairs = 0;
  ModelParams<T> grads;
};

namespace detail {

inline std::vector<std::int64_t> answer_ids(const TokenRecord& r, const BpeVocab& vocab) {
  std::vector<std::int64_t> ids;
  for (const auto& s : tokenize(r.answer, vocab)) ids.push_back(s.id);
  return ids;
}

/// Question tokens the vocabulary cannot represent are skipped; they only
/// serve as context ahead of the answer.
inline std::vector<std::int64_t> question_ids(const TokenRecord& r, const BpeVocab& vocab) {
  std::vector<std::int64_t> ids;
  for (const auto& s : tokenize(r.question, vocab, true))
    if (s.id >= 0) ids.push_back(s.id);
  return ids;
}

inline BinaryMask background_of(const TokenRecord& r) {
  BinaryMask m(r.mask.height, r.mask.width);
  for (std::size_t i = 0; i < r.mask.values.size(); ++i) m.bits[i] = r.mask.values[i] == 0;
  return m;
}

/// Zeroes each non-zero weight with probability p, keeping at least one.
template <typename T>
void drop_cells(std::vector<T>& w, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution drop(p);
  std::vector<std::size_t> kept;
  std::size_t last = w.size();
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == T(0)) continue;
    last = i;
    if (drop(rng)) w[i] = T(0);
    else kept.push_back(i);
  }
  if (kept.empty() && last < w.size()) w[last] = T(1);
}

template <typename T>
void add_scaled(std::vector<T>& dst, const std::vector<T>& src, T w) {
  if (dst.empty()) dst.assign(src.size(), T(0));
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += w * src[i];
}

}  // namespace detail

template <typename T>
StepResult<T> compute_gradients(const ModelParams<T>& params, std::span<const TokenRecord> batch,
                                const BpeVocab& vocab, const TrainConfig& cfg,
                                std::mt19937_64* dropout_rng = nullptr) {
  if (batch.empty()) fail(Errc::EmptyBatch, "train batch has no records");
  StepResult<T> out;
  out.grads = zeros_like(params);
  const std::size_t D = params.config.embed_dim;
  const T k = params.k(), b = params.b();
  const std::optional<std::int64_t> space_id = vocab.id_of(" ");

  // Dense-feature token alignment (every stage but fine-tuning).
  if (cfg.stage != Stage::Finetune) {
    struct PairSource {
      std::size_t record;
      std::vector<T> weights;
    };
    std::vector<VisualCache<T>> caches(batch.size());
    std::vector<FeatureGrid<T>> dense(batch.size());
    std::vector<PairSource> sources;
    AlignmentBatch<T> pairs(D);
    for (std::size_t ri = 0; ri < batch.size(); ++ri) {
      const TokenRecord& r = batch[ri];
      dense[ri] = visual_forward(image_to_grid<T>(r.image), params, &caches[ri]);
      const auto& F = dense[ri];
      auto add_pair = [&](const BinaryMask& mask, std::int64_t id) {
        auto w = pool_weights<T>(mask, F.height, F.width, cfg.pool_mode);
        if (std::all_of(w.begin(), w.end(), [](T v) { return v == T(0); })) return;
        if (dropout_rng && cfg.mask_dropout > 0) detail::drop_cells(w, cfg.mask_dropout, *dropout_rng);
        const auto t = weighted_mean_pool(F, std::span<const T>(w));
        pairs.add(token_embedding(params, id), t, id);
        sources.push_back({ri, std::move(w)});
      };
      for (const auto& e : r.entries) {
        const BinaryMask m = r.token_mask(e.pixel_value);
        if (!m.empty()) add_pair(m, e.token_id);
      }
      if (cfg.background_pairs && space_id) {
        const BinaryMask bg = detail::background_of(r);
        if (!bg.empty()) add_pair(bg, *space_id);
      }
    }
    const auto loss = total_alignment_loss(pairs, k, b, cfg.weights, cfg.sigmoid);
    out.align_loss = loss.value;
    out.pairs = pairs.size();
    out.grads.logit_scale[0] += loss.grad_k;
    out.grads.logit_bias[0] += loss.grad_b;
    std::vector<FeatureGrid<T>> grad_dense;
    for (const auto& F : dense) grad_dense.emplace_back(F.height, F.width, D);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      T* ge = out.grads.token_embed.ptr() + static_cast<std::size_t>(pairs.labels[i]) * D;
      for (std::size_t d = 0; d < D; ++d) ge[d] += loss.grad_e[i * D + d];
      weighted_mean_pool_backward(std::span<const T>(sources[i].weights),
                                  std::span<const T>(loss.grad_t.data() + i * D, D),
                                  grad_dense[sources[i].record]);
    }
    for (std::size_t ri = 0; ri < batch.size(); ++ri)
      visual_backward(params, caches[ri], grad_dense[ri], out.grads);
  }

  // Language-model branch.
  const bool llm_align = cfg.llm_alignment_active();
  const bool use_ce = cfg.stage != Stage::Pretrain;
  if (llm_align || use_ce) {
    const std::size_t Dl = params.config.llm_dim, Z = params.config.vocab_size;
    const T inv_n = T(1) / static_cast<T>(batch.size());
    for (const TokenRecord& r : batch) {
      SequenceCache<T> sc;
      const auto seq = encode_visual_sequence(image_to_grid<T>(r.image), params, cfg.crop_size,
                                              cfg.max_tiles, cfg.window, &sc);
      const auto q_ids = detail::question_ids(r, vocab);
      const auto a_ids = detail::answer_ids(r, vocab);
      const auto f = stub_llm_forward(params, std::span<const T>(seq.tokens), q_ids, a_ids);
      std::vector<std::vector<T>> grad_layers(f.layers.size());
      if (llm_align) {
        const auto hidden = hidden_states_at(f, cfg.llm_layer, Dl);
        std::vector<std::pair<AnswerTokenRef, BinaryMask>> refs;
        for (const auto& e : r.entries) {
          BinaryMask m = r.token_mask(e.pixel_value);
          if (m.empty()) continue;
          refs.emplace_back(locate_answer_token(e, f.n_visual, f.n_question, f.n_answer), std::move(m));
        }
        if (!refs.empty()) {
          const auto la = llm_token_align_loss(hidden, refs, sc.plan, seq.side, k, b, cfg.weights,
                                               cfg.sigmoid);
          const T w = static_cast<T>(cfg.w_llm_align) * inv_n;
          out.llm_align_loss += la.value * inv_n;
          out.grads.logit_scale[0] += w * la.grad_k;
          out.grads.logit_bias[0] += w * la.grad_b;
          detail::add_scaled(grad_layers[cfg.llm_layer], la.grad_hidden, w);
        }
      }
      std::vector<T> grad_logits;
      if (use_ce) {
        const auto logits = stub_answer_logits(params, f);
        const auto ce = next_token_ce(std::span<const T>(logits), Z, a_ids);
        out.ce_loss += ce.value * inv_n;
        detail::add_scaled(grad_logits, ce.grad, static_cast<T>(cfg.w_ce) * inv_n);
      }
      const auto dvisual = stub_llm_backward(params, f, grad_layers, std::span<const T>(grad_logits),
                                             out.grads);
      encode_visual_sequence_backward(params, sc, std::span<const T>(dvisual), out.grads);
    }
  }

  out.loss = out.align_loss + static_cast<T>(cfg.w_llm_align) * out.llm_align_loss +
             static_cast<T>(cfg.w_ce) * out.ce_loss;
  return out;
}

/// True for arrays the stage keeps fixed.
inline bool frozen_array(const std::string& name, const TrainConfig& cfg) {
  if (cfg.stage == Stage::Finetune || !cfg.freeze_llm) return false;
  return name == "llm.embed" || name == "llm.out_w" || name.rfind("llm.layers.", 0) == 0;
}

// ---------------------------------------------------------------------------
// Optimizers.

template <typename T>
struct OptimizerState {
  ModelParams<T> m;
  ModelParams<T> v;
  std::size_t t = 0;

  explicit OptimizerState(const ModelParams<T>& like) : m(zeros_like(like)), v(zeros_like(like)) {}
};

template <typename T>
void apply_update(ModelParams<T>& params, const ModelParams<T>& grads, OptimizerState<T>& state,
                  const TrainConfig& cfg, double lr) {
  ++state.t;
  std::vector<Tensor<T>*> p, m, v;
  std::vector<const Tensor<T>*> g;
  std::vector<std::string> names;
  for_each_array(params, [&](const std::string& n, Tensor<T>& t) {
    p.push_back(&t);
    names.push_back(n);
  });
  for_each_array(grads, [&](const std::string&, const Tensor<T>& t) { g.push_back(&t); });
  for_each_array(state.m, [&](const std::string&, Tensor<T>& t) { m.push_back(&t); });
  for_each_array(state.v, [&](const std::string&, Tensor<T>& t) { v.push_back(&t); });
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (frozen_array(names[a], cfg)) continue;
    auto& P = p[a]->data;
    const auto& G = g[a]->data;
    if (cfg.optimizer == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < P.size(); ++i) P[i] -= static_cast<T>(lr * G[i]);
      continue;
    }
    auto& M = m[a]->data;
    auto& V = v[a]->data;
    const bool decay = p[a]->shape.size() > 1;  // no decay on biases, k, b, e_s
    for (std::size_t i = 0; i < P.size(); ++i) {
      M[i] = static_cast<T>(cfg.beta1 * M[i] + (1 - cfg.beta1) * G[i]);
      V[i] = static_cast<T>(cfg.beta2 * V[i] + (1 - cfg.beta2) * G[i] * G[i]);
      const double mh = M[i] / bc1, vh = V[i] / bc2;
      double step = mh / (std::sqrt(vh) + cfg.adam_eps);
      if (decay) step += cfg.weight_decay * P[i];
      P[i] -= static_cast<T>(lr * step);
    }
  }
}

template <typename T>
bool all_finite(const ModelParams<T>& p) {
  bool ok = true;
  for_each_array(p, [&](const std::string&, const Tensor<T>& t) {
    for (T v : t.data)
      if (!std::isfinite(v)) ok = false;
  });
  return ok;
}

/// One optimizer step on `batch`; returns the loss at the incoming params.
template <typename T>
T train_step(ModelParams<T>& params, std::span<const TokenRecord> batch, const BpeVocab& vocab,
             const TrainConfig& cfg, OptimizerState<T>& state, double lr,
             std::mt19937_64* dropout_rng = nullptr) {
  const auto res = compute_gradients(params, batch, vocab, cfg, dropout_rng);
  if (!std::isfinite(res.loss) || !all_finite(res.grads))
    fail(Errc::Diverged, "non-finite loss or gradient");
  if (lr == 0.0) return res.loss;
  ModelParams<T> next = params;
  apply_update(next, res.grads, state, cfg, lr);
  if (!all_finite(next)) fail(Errc::Diverged, "non-finite parameter after update");
  params = std::move(next);
  return res.loss;
}

// ---------------------------------------------------------------------------
// Training loop.

struct MetricRow {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  ModelParams<T> best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<MetricRow> metrics;
};

inline ModelConfig resolve_model_config(const TrainConfig& cfg, const BpeVocab& vocab) {
  ModelConfig m = cfg.model;
  m.seed = cfg.seed;
  if (m.vocab_size == 0) m.vocab_size = vocab.size();
  if (m.vocab_size < vocab.size())
    fail(Errc::InvalidArgument, "vocab_size " + std::to_string(m.vocab_size) + " < vocabulary size " +
                                    std::to_string(vocab.size()));
  return m;
}

/// Settings for the 64x64 glyph corpus: patch 8, D 32, cosine sigmoid loss
/// with b starting at 0, class-aware positives, background pairs and heavy
/// mask dropout. Used by demo-data and the learnability check.
inline TrainConfig glyph_train_config(std::size_t max_steps = 1000, std::uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.model.patch_size = 8;
  cfg.model.embed_dim = 32;
  cfg.model.encoder_dim = 64;
  cfg.model.vocab_size = 0;
  cfg.epochs = 1000;
  cfg.max_steps = max_steps;
  cfg.batch_size = 8;
  cfg.lr = 0.005;
  cfg.seed = seed;
  cfg.background_pairs = true;
  cfg.logit_bias_init = 0.0;
  cfg.mask_dropout = 0.75;
  cfg.sigmoid.normalize = true;
  cfg.sigmoid.label_positives = true;
  return cfg;
}

/// Writes metrics.jsonl, final.ckpt and best.ckpt under `out_dir` when it is
/// non-empty. On divergence the last good parameters go to last_good.ckpt.
template <typename T = float>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<TokenRecord>& corpus,
                     const BpeVocab& vocab, const std::filesystem::path& out_dir = {},
                     const ModelParams<T>* init = nullptr) {
  cfg.validate();
  if (corpus.empty()) fail(Errc::EmptyCorpus, "training corpus is empty");
  TrainResult<T> res;
  if (init) {
    res.params = *init;
  } else {
    res.params = init_params<T>(resolve_model_config(cfg, vocab));
    res.params.logit_bias[0] = static_cast<T>(cfg.logit_bias_init);
  }
  res.best = res.params;
  const std::size_t per_epoch = (corpus.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = cfg.epochs * per_epoch;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);

  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics.open(out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) fail(Errc::IoFailure, "cannot write metrics log in " + out_dir.string());
  }
  const nlohmann::json extra{{"stage", stage_name(cfg.stage)}, {"train_config", cfg.to_json()}};

  OptimizerState<T> state(res.params);
  std::mt19937_64 rng(cfg.seed), dropout_rng(cfg.seed ^ 0x5eedull);
  std::vector<std::size_t> order(corpus.size());
  std::size_t step = 0;
  std::vector<TokenRecord> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size() && step < total; start += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(start + cfg.batch_size, order.size()); ++i)
        batch.push_back(corpus[order[i]]);
      const double lr = cosine_lr(cfg.lr, step, total);
      const ModelParams<T> before = res.params;
      T loss;
      try {
        loss = train_step<T>(res.params, batch, vocab, cfg, state, lr, &dropout_rng);
      } catch (const Error& e) {
        if (e.code() == Errc::Diverged && !out_dir.empty())
          save_checkpoint(res.params, out_dir / "last_good.ckpt", &vocab, extra);
        throw;
      }
      if (loss < res.best_loss) {
        res.best_loss = loss;
        res.best = before;
      }
      res.metrics.push_back({step, static_cast<double>(loss), lr});
      if (metrics)
        metrics << nlohmann::json{{"step", step}, {"loss", static_cast<double>(loss)}, {"lr", lr}}.dump()
                << '\n';
      ++step;
    }
  }
  if (res.metrics.empty()) res.best = res.params;
  if (!out_dir.empty()) {
    save_checkpoint(res.params, out_dir / "final.ckpt", &vocab, extra);
    save_checkpoint(res.best, out_dir / "best.ckpt", &vocab, extra);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Held-out evaluation of a trained model on labelled records.

struct AlignmentEval {
  double auc = 0;                 // positive vs negative (embedding, pooled) pairs by dot product
  double mean_fg_iou = 0;         // per-token zero-shot segmentation at 0.5
  double space_glyph_mean = 0;    // negation map averaged over glyph pixels
  double space_background_mean = 0;
  std::size_t tokens = 0;
  nlohmann::json items = nlohmann::json::array();
};

/// Scores each held-out token: its pooled feature against every glyph token
/// embedding of the vocabulary (the matching one is the positive), its
/// thresholded similarity map against the ground-truth mask, and the space
/// prompt's negation map over foreground vs background pixels.
template <typename T>
AlignmentEval evaluate_alignment(const ModelParams<T>& params, const std::vector<TokenRecord>& records,
                                 const BpeVocab& vocab, PoolMode mode = PoolMode::Threshold,
                                 double threshold = 0.5) {
  AlignmentEval ev;
  std::vector<std::int64_t> candidates;
  for (const auto& r : records)
    for (const auto& e : r.entries)
      if (!is_whitespace_text(e.text) &&
          std::find(candidates.begin(), candidates.end(), e.token_id) == candidates.end())
        candidates.push_back(e.token_id);
  std::sort(candidates.begin(), candidates.end());
  const auto space_id = vocab.id_of(" ");
  std::vector<double> pos, neg;
  double iou_sum = 0, fg_sum = 0, bg_sum = 0;
  std::size_t fg_n = 0, bg_n = 0;
  for (const auto& r : records) {
    const auto F = visual_forward(image_to_grid<T>(r.image), params);
    for (const auto& e : r.entries) {
      const BinaryMask gt = r.token_mask(e.pixel_value);
      if (gt.empty()) continue;
      const auto w = pool_weights<T>(gt, F.height, F.width, mode);
      if (std::all_of(w.begin(), w.end(), [](T v) { return v == T(0); })) continue;
      const auto t = weighted_mean_pool(F, std::span<const T>(w));
      for (auto c : candidates) {
        const double s = dot(token_embedding(params, c), std::span<const T>(t));
        (c == e.token_id ? pos : neg).push_back(s);
      }
      const auto map = minmax_normalize(similarity_map(F, token_embedding(params, e.token_id)));
      const double iou = fg_iou(segment_map(map, gt.height, gt.width, threshold), gt);
      iou_sum += iou;
      ++ev.tokens;
      ev.items.push_back({{"record", r.image_path}, {"token", e.text}, {"fg_iou", iou}});
    }
    if (space_id) {
      const auto fg = zero_shot_foreground(F, token_embedding(params, *space_id));
      FeatureGrid<double> g(fg.height, fg.width, 1);
      g.data = fg.scores;
      const auto up = bilinear_resize(g, r.mask.height, r.mask.width);
      for (std::size_t i = 0; i < r.mask.values.size(); ++i) {
        if (r.mask.values[i] != 0) {
          fg_sum += up.data[i];
          ++fg_n;
        } else {
          bg_sum += up.data[i];
          ++bg_n;
        }
      }
    }
  }
  if (ev.tokens == 0) fail(Errc::EmptyBatch, "no labelled tokens to evaluate");
  ev.auc = (pos.empty() || neg.empty()) ? 1.0 : ranking_auc(pos, neg);
  ev.mean_fg_iou = iou_sum / static_cast<double>(ev.tokens);
  ev.space_glyph_mean = fg_n ? fg_sum / static_cast<double>(fg_n) : 0.0;
  ev.space_background_mean = bg_n ? bg_sum / static_cast<double>(bg_n) : 0.0;
  return ev;
}

}  // namespace tokenforge
