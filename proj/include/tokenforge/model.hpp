#pragma once

// Toy visual encoder, two-stage transposed-convolution upsampler and
// projection to the token embedding space, plus the token embedding table,
// the sigmoid-loss scalars and the abstractor query. Forward passes can record
// a cache that the matching backward functions consume.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokenforge/error.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape.empty() ? 0 : 1;
    for (auto s : shape) n *= s;
    return Tensor{std::move(shape), std::vector<T>(n, T(0))};
  }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  T operator[](std::size_t i) const { return data[i]; }

  bool operator==(const Tensor&) const = default;
};

struct ModelConfig {
  std::size_t patch_size = 14;
  std::size_t encoder_dim = 64;     // C
  std::size_t encoder_layers = 2;   // L
  std::size_t mlp_hidden = 0;       // 0 -> 2 * C
  std::size_t embed_dim = 32;       // D
  std::size_t vocab_size = 64;      // Z
  bool use_attention = false;       // single-head self-attention instead of the mean mixer
  bool log10_logit_scale = false;   // k starts at log10(10) = 1 instead of ln 10
  std::size_t llm_dim = 0;          // stub language model width; 0 disables it
  std::size_t llm_layers = 2;
  std::uint64_t seed = 0;

  std::size_t hidden() const { return mlp_hidden == 0 ? 2 * encoder_dim : mlp_hidden; }

  void validate() const {
    if (patch_size < 1 || encoder_dim < 1 || embed_dim < 1 || vocab_size < 1)
      fail(Errc::InvalidArgument, "model config: patch_size, encoder_dim, embed_dim and "
                                  "vocab_size must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"patch_size", patch_size},     {"encoder_dim", encoder_dim},
            {"encoder_layers", encoder_layers}, {"mlp_hidden", mlp_hidden},
            {"embed_dim", embed_dim},       {"vocab_size", vocab_size},
            {"use_attention", use_attention}, {"log10_logit_scale", log10_logit_scale},
            {"llm_dim", llm_dim},           {"llm_layers", llm_layers},
            {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.patch_size = j.value("patch_size", c.patch_size);
    c.encoder_dim = j.value("encoder_dim", c.encoder_dim);
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.use_attention = j.value("use_attention", c.use_attention);
    c.log10_logit_scale = j.value("log10_logit_scale", c.log10_logit_scale);
    c.llm_dim = j.value("llm_dim", c.llm_dim);
    c.llm_layers = j.value("llm_layers", c.llm_layers);
    c.seed = j.value("seed", c.seed);
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct EncoderBlockParams {
  Tensor<T> mix_w;                    // C x C, mean mixer (empty with attention)
  Tensor<T> attn_q, attn_k, attn_v, attn_o;  // C x C each (attention only)
  Tensor<T> mlp_w1, mlp_b1;           // H x C, H
  Tensor<T> mlp_w2, mlp_b2;           // C x H, C

  bool operator==(const EncoderBlockParams&) const = default;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> patch_w, patch_b;         // C x 3p^2, C
  std::vector<EncoderBlockParams<T>> blocks;
  Tensor<T> deconv1_w, deconv1_b;     // 4 x C x C (kernel offset dy*2+dx), C
  Tensor<T> deconv2_w, deconv2_b;
  Tensor<T> proj_w, proj_b;           // D x C, D
  Tensor<T> token_embed;              // Z x D
  Tensor<T> logit_scale;              // k
  Tensor<T> logit_bias;               // b
  Tensor<T> text_query;               // e_s, D
  // Stub language model (present when config.llm_dim > 0).
  Tensor<T> llm_in_w;                 // Dl x D
  Tensor<T> llm_embed;                // Z x Dl
  std::vector<Tensor<T>> llm_layers;  // Dl x Dl each
  Tensor<T> llm_out_w;                // Z x Dl

  T k() const { return logit_scale[0]; }
  T b() const { return logit_bias[0]; }

  bool operator==(const ModelParams&) const = default;
};

/// Visits every array with a stable dotted name. Works on const and mutable
/// params; inactive (empty) arrays are visited too.
template <typename P, typename F>
void for_each_array(P& p, F&& fn) {
  fn(std::string("patch.w"), p.patch_w);
  fn(std::string("patch.b"), p.patch_b);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    auto& b = p.blocks[i];
    fn(pre + "mix_w", b.mix_w);
    fn(pre + "attn_q", b.attn_q);
    fn(pre + "attn_k", b.attn_k);
    fn(pre + "attn_v", b.attn_v);
    fn(pre + "attn_o", b.attn_o);
    fn(pre + "mlp_w1", b.mlp_w1);
    fn(pre + "mlp_b1", b.mlp_b1);
    fn(pre + "mlp_w2", b.mlp_w2);
    fn(pre + "mlp_b2", b.mlp_b2);
  }
  fn(std::string("deconv1.w"), p.deconv1_w);
  fn(std::string("deconv1.b"), p.deconv1_b);
  fn(std::string("deconv2.w"), p.deconv2_w);
  fn(std::string("deconv2.b"), p.deconv2_b);
  fn(std::string("proj.w"), p.proj_w);
  fn(std::string("proj.b"), p.proj_b);
  fn(std::string("token_embed"), p.token_embed);
  fn(std::string("logit_scale"), p.logit_scale);
  fn(std::string("logit_bias"), p.logit_bias);
  fn(std::string("text_query"), p.text_query);
  fn(std::string("llm.in_w"), p.llm_in_w);
  fn(std::string("llm.embed"), p.llm_embed);
  for (std::size_t i = 0; i < p.llm_layers.size(); ++i)
    fn("llm.layers." + std::to_string(i), p.llm_layers[i]);
  fn(std::string("llm.out_w"), p.llm_out_w);
}

/// Zero-filled params with every shape implied by `config`.
template <typename T>
ModelParams<T> allocate_params(const ModelConfig& config) {
  config.validate();
  const std::size_t p = config.patch_size, C = config.encoder_dim, H = config.hidden();
  const std::size_t D = config.embed_dim, Z = config.vocab_size, Dl = config.llm_dim;
  using Tn = Tensor<T>;
  ModelParams<T> m;
  m.config = config;
  m.patch_w = Tn::zeros({C, 3 * p * p});
  m.patch_b = Tn::zeros({C});
  m.blocks.resize(config.encoder_layers);
  for (auto& b : m.blocks) {
    if (config.use_attention) {
      b.attn_q = Tn::zeros({C, C});
      b.attn_k = Tn::zeros({C, C});
      b.attn_v = Tn::zeros({C, C});
      b.attn_o = Tn::zeros({C, C});
    } else {
      b.mix_w = Tn::zeros({C, C});
    }
    b.mlp_w1 = Tn::zeros({H, C});
    b.mlp_b1 = Tn::zeros({H});
    b.mlp_w2 = Tn::zeros({C, H});
    b.mlp_b2 = Tn::zeros({C});
  }
  m.deconv1_w = Tn::zeros({4, C, C});
  m.deconv1_b = Tn::zeros({C});
  m.deconv2_w = Tn::zeros({4, C, C});
  m.deconv2_b = Tn::zeros({C});
  m.proj_w = Tn::zeros({D, C});
  m.proj_b = Tn::zeros({D});
  m.token_embed = Tn::zeros({Z, D});
  m.logit_scale = Tn::zeros({1});
  m.logit_bias = Tn::zeros({1});
  m.text_query = Tn::zeros({D});
  if (Dl > 0) {
    m.llm_in_w = Tn::zeros({Dl, D});
    m.llm_embed = Tn::zeros({Z, Dl});
    m.llm_layers.assign(config.llm_layers, Tn::zeros({Dl, Dl}));
    m.llm_out_w = Tn::zeros({Z, Dl});
  }
  return m;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  return allocate_params<T>(p.config);
}

inline double initial_logit_scale(const ModelConfig& c) {
  return c.log10_logit_scale ? 1.0 : std::numbers::ln10;
}

/// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases,
/// k = ln 10 and b = -10.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config) {
  ModelParams<T> m = allocate_params<T>(config);
  std::mt19937_64 rng(config.seed);
  auto fill = [&](Tensor<T>& t, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
  };
  for_each_array(m, [&](const std::string& name, Tensor<T>& t) {
    if (t.empty()) return;
    if (name == "logit_scale") {
      t[0] = static_cast<T>(initial_logit_scale(config));
    } else if (name == "logit_bias") {
      t[0] = T(-10);
    } else if (t.shape.size() == 1) {
      if (name == "text_query") fill(t, t.shape[0]);
      // remaining 1-D arrays are biases: zero
    } else {
      fill(t, t.shape.back());
    }
  });
  return m;
}

// ---------------------------------------------------------------------------
// Elementwise helpers.

template <typename T>
T softplus(T a) {
  return a > T(0) ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
}

template <typename T>
T sigmoid(T a) {
  if (a >= T(0)) return T(1) / (T(1) + std::exp(-a));
  const T e = std::exp(a);
  return e / (T(1) + e);
}

// ---------------------------------------------------------------------------
// Encoder: patch embedding followed by residual blocks over the patch sequence.

template <typename T>
struct BlockCache {
  std::vector<T> input;   // n x C
  std::vector<T> mean;    // C (mixer)
  std::vector<T> mixed;   // n x C, residual stream after mixing
  std::vector<T> pre_act; // n x H
  std::vector<T> q, k, v, probs, attn;  // attention intermediates
};

template <typename T>
struct EncoderCache {
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<T> patches;  // n x 3p^2
  std::vector<BlockCache<T>> blocks;
};

namespace detail {

template <typename T>
void block_forward(const EncoderBlockParams<T>& bp, const ModelConfig& cfg, std::vector<T>& x,
                   std::size_t n, BlockCache<T>* cache) {
  const std::size_t C = cfg.encoder_dim, H = cfg.hidden();
  std::vector<T> u = x;
  if (cfg.use_attention) {
    std::vector<T> q(n * C), k(n * C), v(n * C), probs(n * n), attn(n * C, T(0));
    for (std::size_t t = 0; t < n; ++t) {
      matvec(bp.attn_q.ptr(), &x[t * C], &q[t * C], C, C);
      matvec(bp.attn_k.ptr(), &x[t * C], &k[t * C], C, C);
      matvec(bp.attn_v.ptr(), &x[t * C], &v[t * C], C, C);
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(C));
    for (std::size_t i = 0; i < n; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < C; ++c) s += q[i * C + c] * k[j * C + c];
        probs[i * n + j] = s * scale;
        mx = std::max(mx, probs[i * n + j]);
      }
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) z += (probs[i * n + j] = std::exp(probs[i * n + j] - mx));
      for (std::size_t j = 0; j < n; ++j) {
        probs[i * n + j] /= z;
        const T pij = probs[i * n + j];
        for (std::size_t c = 0; c < C; ++c) attn[i * C + c] += pij * v[j * C + c];
      }
      matvec(bp.attn_o.ptr(), &attn[i * C], &u[i * C], C, C, /*accumulate=*/true);
    }
    if (cache) {
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->probs = std::move(probs);
      cache->attn = std::move(attn);
    }
  } else {
    std::vector<T> mean(C, T(0)), mixed(C);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < C; ++c) mean[c] += x[t * C + c];
    for (auto& m : mean) m /= static_cast<T>(n);
    matvec(bp.mix_w.ptr(), mean.data(), mixed.data(), C, C);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < C; ++c) u[t * C + c] += mixed[c];
    if (cache) cache->mean = std::move(mean);
  }
  std::vector<T> a(n * H), h(H);
  for (std::size_t t = 0; t < n; ++t) {
    T* at = &a[t * H];
    matvec(bp.mlp_w1.ptr(), &u[t * C], at, H, C);
    for (std::size_t j = 0; j < H; ++j) {
      at[j] += bp.mlp_b1[j];
      h[j] = softplus(at[j]);
    }
    T* out = &x[t * C];
    for (std::size_t c = 0; c < C; ++c) out[c] = u[t * C + c] + bp.mlp_b2[c];
    matvec(bp.mlp_w2.ptr(), h.data(), out, C, H, /*accumulate=*/true);
  }
  if (cache) {
    cache->mixed = std::move(u);
    cache->pre_act = std::move(a);
  }
}

/// dx holds d(output) on entry and d(input) on return.
template <typename T>
void block_backward(const EncoderBlockParams<T>& bp, EncoderBlockParams<T>& gp,
                    const ModelConfig& cfg, const BlockCache<T>& cache, std::vector<T>& dx,
                    std::size_t n) {
  const std::size_t C = cfg.encoder_dim, H = cfg.hidden();
  std::vector<T> du = dx;  // residual path
  std::vector<T> dh(H), da(H), h(H);
  for (std::size_t t = 0; t < n; ++t) {
    const T* dy = &dx[t * C];
    const T* a = &cache.pre_act[t * H];
    for (std::size_t j = 0; j < H; ++j) h[j] = softplus(a[j]);
    for (std::size_t c = 0; c < C; ++c) gp.mlp_b2[c] += dy[c];
    outer_acc(gp.mlp_w2.ptr(), dy, h.data(), C, H);
    std::fill(dh.begin(), dh.end(), T(0));
    matvec_t_acc(bp.mlp_w2.ptr(), dy, dh.data(), C, H);
    for (std::size_t j = 0; j < H; ++j) {
      da[j] = dh[j] * sigmoid(a[j]);
      gp.mlp_b1[j] += da[j];
    }
    outer_acc(gp.mlp_w1.ptr(), da.data(), &cache.mixed[t * C], H, C);
    matvec_t_acc(bp.mlp_w1.ptr(), da.data(), &du[t * C], H, C);
  }
  // du = d(mixed stream)
  std::vector<T> din = du;
  if (cfg.use_attention) {
    const T scale = T(1) / std::sqrt(static_cast<T>(C));
    std::vector<T> dattn(n * C, T(0)), dq(n * C, T(0)), dk(n * C, T(0)), dv(n * C, T(0));
    std::vector<T> dp(n);
    for (std::size_t i = 0; i < n; ++i) {
      outer_acc(gp.attn_o.ptr(), &du[i * C], &cache.attn[i * C], C, C);
      matvec_t_acc(bp.attn_o.ptr(), &du[i * C], &dattn[i * C], C, C);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const T* da_i = &dattn[i * C];
      T rowdot = 0;
      for (std::size_t j = 0; j < n; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < C; ++c) s += da_i[c] * cache.v[j * C + c];
        dp[j] = s;
        const T pij = cache.probs[i * n + j];
        rowdot += pij * s;
        for (std::size_t c = 0; c < C; ++c) dv[j * C + c] += pij * da_i[c];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const T ds = cache.probs[i * n + j] * (dp[j] - rowdot) * scale;
        if (ds == T(0)) continue;
        for (std::size_t c = 0; c < C; ++c) {
          dq[i * C + c] += ds * cache.k[j * C + c];
          dk[j * C + c] += ds * cache.q[i * C + c];
        }
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      const T* xt = &cache.input[t * C];
      outer_acc(gp.attn_q.ptr(), &dq[t * C], xt, C, C);
      outer_acc(gp.attn_k.ptr(), &dk[t * C], xt, C, C);
      outer_acc(gp.attn_v.ptr(), &dv[t * C], xt, C, C);
      matvec_t_acc(bp.attn_q.ptr(), &dq[t * C], &din[t * C], C, C);
      matvec_t_acc(bp.attn_k.ptr(), &dk[t * C], &din[t * C], C, C);
      matvec_t_acc(bp.attn_v.ptr(), &dv[t * C], &din[t * C], C, C);
    }
  } else {
    std::vector<T> dmixed(C, T(0)), dmean(C, T(0));
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < C; ++c) dmixed[c] += du[t * C + c];
    outer_acc(gp.mix_w.ptr(), dmixed.data(), cache.mean.data(), C, C);
    matvec_t_acc(bp.mix_w.ptr(), dmixed.data(), dmean.data(), C, C);
    const T inv_n = T(1) / static_cast<T>(n);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < C; ++c) din[t * C + c] += dmean[c] * inv_n;
  }
  dx = std::move(din);
}

}  // namespace detail

/// H x W x 3 image -> (H/p) x (W/p) x C encoder features.
template <typename T>
FeatureGrid<T> patch_embed(const FeatureGrid<T>& image, const ModelParams<T>& params,
                           EncoderCache<T>* cache = nullptr) {
  const auto& cfg = params.config;
  const std::size_t p = cfg.patch_size, C = cfg.encoder_dim;
  if (image.dim != 3) fail(Errc::ShapeError, "patch_embed expects a 3-channel image");
  if (image.height % p != 0 || image.width % p != 0 || image.height == 0 || image.width == 0)
    fail(Errc::ShapeError, "image " + std::to_string(image.height) + "x" +
                               std::to_string(image.width) + " is not divisible by patch size " +
                               std::to_string(p));
  const std::size_t gh = image.height / p, gw = image.width / p, n = gh * gw, pd = 3 * p * p;
  std::vector<T> patches(n * pd);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* dst = &patches[(gy * gw + gx) * pd];
      for (std::size_t py = 0; py < p; ++py) {
        const T* row = image.cell(gy * p + py, gx * p);
        std::copy(row, row + 3 * p, dst + py * 3 * p);
      }
    }
  std::vector<T> x(n * C);
  for (std::size_t t = 0; t < n; ++t) {
    matvec(params.patch_w.ptr(), &patches[t * pd], &x[t * C], C, pd);
    for (std::size_t c = 0; c < C; ++c) x[t * C + c] += params.patch_b[c];
  }
  if (cache) {
    cache->grid_h = gh;
    cache->grid_w = gw;
    cache->blocks.assign(params.blocks.size(), {});
  }
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    BlockCache<T>* bc = cache ? &cache->blocks[l] : nullptr;
    if (bc) bc->input = x;
    detail::block_forward(params.blocks[l], cfg, x, n, bc);
  }
  if (cache) cache->patches = std::move(patches);
  FeatureGrid<T> out(gh, gw, C);
  out.data = std::move(x);
  return out;
}

template <typename T>
void patch_embed_backward(const ModelParams<T>& params, const EncoderCache<T>& cache,
                          const FeatureGrid<T>& grad_out, ModelParams<T>& grads) {
  const auto& cfg = params.config;
  const std::size_t C = cfg.encoder_dim, p = cfg.patch_size, pd = 3 * p * p;
  const std::size_t n = cache.grid_h * cache.grid_w;
  std::vector<T> dx = grad_out.data;
  for (std::size_t l = params.blocks.size(); l-- > 0;)
    detail::block_backward(params.blocks[l], grads.blocks[l], cfg, cache.blocks[l], dx, n);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < C; ++c) grads.patch_b[c] += dx[t * C + c];
    outer_acc(grads.patch_w.ptr(), &dx[t * C], &cache.patches[t * pd], C, pd);
  }
}

// ---------------------------------------------------------------------------
// Upsampling: two 2x2 stride-2 transposed convolutions (each doubling both
// spatial dims, no padding), then a per-cell linear map C -> D.

template <typename T>
struct UpsampleCache {
  FeatureGrid<T> input;
  FeatureGrid<T> up1;
  FeatureGrid<T> up2;
};

namespace detail {

template <typename T>
FeatureGrid<T> deconv2x2(const FeatureGrid<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t C = in.dim;
  FeatureGrid<T> out(in.height * 2, in.width * 2, C);
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x) {
      const T* src = in.cell(y, x);
      for (std::size_t q = 0; q < 4; ++q) {
        T* dst = out.cell(2 * y + q / 2, 2 * x + q % 2);
        matvec(w.ptr() + q * C * C, src, dst, C, C);
        for (std::size_t c = 0; c < C; ++c) dst[c] += b[c];
      }
    }
  return out;
}

template <typename T>
FeatureGrid<T> deconv2x2_backward(const FeatureGrid<T>& in, const Tensor<T>& w,
                                  const FeatureGrid<T>& grad_out, Tensor<T>& gw, Tensor<T>& gb) {
  const std::size_t C = in.dim;
  FeatureGrid<T> gin(in.height, in.width, C);
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x) {
      const T* src = in.cell(y, x);
      T* gsrc = gin.cell(y, x);
      for (std::size_t q = 0; q < 4; ++q) {
        const T* g = grad_out.cell(2 * y + q / 2, 2 * x + q % 2);
        for (std::size_t c = 0; c < C; ++c) gb[c] += g[c];
        outer_acc(gw.ptr() + q * C * C, g, src, C, C);
        matvec_t_acc(w.ptr() + q * C * C, g, gsrc, C, C);
      }
    }
  return gin;
}

}  // namespace detail

template <typename T>
FeatureGrid<T> upsample_project(const FeatureGrid<T>& features, const ModelParams<T>& params,
                                UpsampleCache<T>* cache = nullptr) {
  const std::size_t C = params.config.encoder_dim, D = params.config.embed_dim;
  if (features.dim != C) fail(Errc::ShapeError, "upsample_project: channel count != encoder_dim");
  FeatureGrid<T> up1 = detail::deconv2x2(features, params.deconv1_w, params.deconv1_b);
  FeatureGrid<T> up2 = detail::deconv2x2(up1, params.deconv2_w, params.deconv2_b);
  FeatureGrid<T> out(up2.height, up2.width, D);
  for (std::size_t i = 0; i < up2.cells(); ++i) {
    T* dst = out.data.data() + i * D;
    matvec(params.proj_w.ptr(), up2.data.data() + i * C, dst, D, C);
    for (std::size_t d = 0; d < D; ++d) dst[d] += params.proj_b[d];
  }
  if (cache) {
    cache->input = features;
    cache->up1 = std::move(up1);
    cache->up2 = std::move(up2);
  }
  return out;
}

/// Returns d(loss)/d(features) and accumulates parameter gradients.
template <typename T>
FeatureGrid<T> upsample_project_backward(const ModelParams<T>& params, const UpsampleCache<T>& cache,
                                         const FeatureGrid<T>& grad_out, ModelParams<T>& grads) {
  const std::size_t C = params.config.encoder_dim, D = params.config.embed_dim;
  FeatureGrid<T> g2(cache.up2.height, cache.up2.width, C);
  for (std::size_t i = 0; i < cache.up2.cells(); ++i) {
    const T* g = grad_out.data.data() + i * D;
    for (std::size_t d = 0; d < D; ++d) grads.proj_b[d] += g[d];
    outer_acc(grads.proj_w.ptr(), g, cache.up2.data.data() + i * C, D, C);
    matvec_t_acc(params.proj_w.ptr(), g, g2.data.data() + i * C, D, C);
  }
  FeatureGrid<T> g1 =
      detail::deconv2x2_backward(cache.up1, params.deconv2_w, g2, grads.deconv2_w, grads.deconv2_b);
  return detail::deconv2x2_backward(cache.input, params.deconv1_w, g1, grads.deconv1_w,
                                    grads.deconv1_b);
}

// ---------------------------------------------------------------------------
// Full visual path: image -> dense token-space features at 4x encoder resolution.

template <typename T>
struct VisualCache {
  EncoderCache<T> encoder;
  UpsampleCache<T> upsample;
};

template <typename T>
FeatureGrid<T> visual_forward(const FeatureGrid<T>& image, const ModelParams<T>& params,
                              VisualCache<T>* cache = nullptr) {
  const FeatureGrid<T> f = patch_embed(image, params, cache ? &cache->encoder : nullptr);
  return upsample_project(f, params, cache ? &cache->upsample : nullptr);
}

template <typename T>
void visual_backward(const ModelParams<T>& params, const VisualCache<T>& cache,
                     const FeatureGrid<T>& grad_features, ModelParams<T>& grads) {
  const FeatureGrid<T> g = upsample_project_backward(params, cache.upsample, grad_features, grads);
  patch_embed_backward(params, cache.encoder, g, grads);
}

template <typename T>
std::span<const T> token_embedding(const ModelParams<T>& params, std::int64_t token_id) {
  const std::size_t Z = params.config.vocab_size, D = params.config.embed_dim;
  if (token_id < 0 || static_cast<std::size_t>(token_id) >= Z)
    fail(Errc::UnknownToken, "token id " + std::to_string(token_id) + " outside [0, " +
                                 std::to_string(Z) + ")");
  return {params.token_embed.ptr() + static_cast<std::size_t>(token_id) * D, D};
}

template <typename T>
std::size_t parameter_count(const ModelParams<T>& params) {
  std::size_t n = 0;
  for_each_array(params, [&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

/// Copies every parameter into one flat vector (for finite-difference checks).
template <typename T>
std::vector<T> flatten_params(const ModelParams<T>& params) {
  std::vector<T> out;
  for_each_array(params, [&](const std::string&, const Tensor<T>& t) {
    out.insert(out.end(), t.data.begin(), t.data.end());
  });
  return out;
}

template <typename T>
void unflatten_params(ModelParams<T>& params, std::span<const T> flat) {
  std::size_t off = 0;
  for_each_array(params, [&](const std::string&, Tensor<T>& t) {
    std::copy(flat.begin() + off, flat.begin() + off + t.size(), t.data.begin());
    off += t.size();
  });
}

template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& p) {
  ModelParams<U> out = allocate_params<U>(p.config);
  std::vector<const Tensor<T>*> src;
  for_each_array(p, [&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  for_each_array(out, [&](const std::string&, Tensor<U>& t) {
    for (std::size_t j = 0; j < t.size(); ++j) t.data[j] = static_cast<U>(src[i]->data[j]);
    ++i;
  });
  return out;
}

}  // namespace tokenforge
