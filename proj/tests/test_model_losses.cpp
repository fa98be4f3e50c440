#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "tokenforge/checkpoint.hpp"
#include "tokenforge/losses.hpp"
#include "tokenforge/model.hpp"

using namespace tokenforge;

namespace {

template <typename Fn>
Error error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "expected an Error";
  return Error(Errc::InvalidArgument, "none");
}

ModelConfig tiny_config(bool attention = false) {
  ModelConfig c;
  c.patch_size = 2;
  c.encoder_dim = 3;
  c.encoder_layers = 2;
  c.mlp_hidden = 4;
  c.embed_dim = 2;
  c.vocab_size = 5;
  c.use_attention = attention;
  c.llm_dim = 3;
  c.seed = 11;
  return c;
}

AlignmentBatch<double> random_batch(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  AlignmentBatch<double> b(d);
  for (std::size_t i = 0; i < n; ++i)
    b.add(oracle::random_vector(rng, d), oracle::random_vector(rng, d), static_cast<std::int64_t>(i % 2));
  return b;
}

std::vector<std::vector<double>> rows(const std::vector<double>& flat, std::size_t d) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < flat.size(); i += d) out.emplace_back(flat.begin() + i, flat.begin() + i + d);
  return out;
}

double dis_oracle(const AlignmentBatch<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b.dim; ++j) s += std::fabs(b.embeddings[i * b.dim + j] - b.visuals[i * b.dim + j]);
  return s / static_cast<double>(b.size() * b.dim);
}

double sim_oracle(const AlignmentBatch<double>& b) {
  const auto e = rows(b.embeddings, b.dim), t = rows(b.visuals, b.dim);
  double s = 0;
  for (std::size_t i = 0; i < e.size(); ++i) s += 1 - oracle::cosine(e[i], t[i]);
  return s / static_cast<double>(e.size());
}

// Checks every analytic gradient of `loss` against central differences over
// the batch entries and, when `with_kb`, the scalars k and b.
template <typename Loss>
void check_loss_gradient(const AlignmentBatch<double>& batch, double k, double b, Loss&& loss,
                         bool with_kb, bool skip_kinks) {
  const double eps = 1e-5;
  const auto out = loss(batch, k, b);
  const std::size_t n = batch.embeddings.size();
  std::vector<double> x = batch.embeddings;
  x.insert(x.end(), batch.visuals.begin(), batch.visuals.end());
  x.push_back(k);
  x.push_back(b);
  auto f = [&](const std::vector<double>& v) {
    AlignmentBatch<double> p = batch;
    std::copy(v.begin(), v.begin() + n, p.embeddings.begin());
    std::copy(v.begin() + n, v.begin() + 2 * n, p.visuals.begin());
    return loss(p, v[2 * n], v[2 * n + 1]).value;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!with_kb && i >= 2 * n) break;
    if (skip_kinks && i < 2 * n &&
        std::fabs(batch.embeddings[i % n] - batch.visuals[i % n]) <= 2 * eps)
      continue;
    const double analytic = i < n       ? out.grad_e[i]
                            : i < 2 * n ? out.grad_t[i - n]
                            : i == 2 * n ? out.grad_k
                                         : out.grad_b;
    const double numeric = oracle::central_diff(f, x, i, eps);
    ASSERT_LE(oracle::rel_error(analytic, numeric), 1e-4)
        << "coordinate " << i << " analytic " << analytic << " numeric " << numeric;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses.

TEST(LossDis, Examples) {
  AlignmentBatch<double> same(3);
  same.add(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3});
  EXPECT_EQ(loss_dis(same).value, 0.0);
  AlignmentBatch<double> one(1);
  one.add(std::vector<double>{1}, std::vector<double>{0});
  EXPECT_EQ(loss_dis(one).value, 1.0);
}

TEST(LossDis, MatchesDoubleLoop) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = random_batch(rng, 1 + trial % 7, 1 + trial % 5);
    EXPECT_NEAR(loss_dis(b).value, dis_oracle(b), 1e-14);
  }
}

TEST(LossSim, Examples) {
  AlignmentBatch<double> same(2), neg(2), ortho(2);
  same.add(std::vector<double>{0.3, -2}, std::vector<double>{0.3, -2});
  neg.add(std::vector<double>{0.3, -2}, std::vector<double>{-0.3, 2});
  ortho.add(std::vector<double>{1, 0}, std::vector<double>{0, 4});
  EXPECT_NEAR(loss_sim(same).value, 0.0, 1e-15);
  EXPECT_NEAR(loss_sim(neg).value, 2.0, 1e-15);
  EXPECT_NEAR(loss_sim(ortho).value, 1.0, 1e-15);
}

TEST(LossSim, ZeroNormThrows) {
  AlignmentBatch<double> b(2);
  b.add(std::vector<double>{0, 0}, std::vector<double>{1, 0});
  EXPECT_EQ(error_of([&] { loss_sim(b); }).code(), Errc::ZeroNorm);
}

TEST(LossSig, SinglePairSpotValue) {
  AlignmentBatch<double> b(1);
  b.add(std::vector<double>{1}, std::vector<double>{1});
  const long double k = std::numbers::ln10_v<long double>;
  const long double want = std::log1p(std::exp(-k - 10.0L));
  const double got = loss_sig(b, std::numbers::ln10, -10.0).value;
  EXPECT_NEAR(got, static_cast<double>(want), 1e-7);
  EXPECT_NEAR(got, 4.53e-6, 1e-7);
}

TEST(LossSig, ZeroLogitGivesLnTwoForBothSigns) {
  const double k = std::numbers::ln10, bias = -10.0;
  AlignmentBatch<double> pos(1);
  pos.add(std::vector<double>{1}, std::vector<double>{bias / k});
  EXPECT_NEAR(loss_sig(pos, k, bias).value, std::numbers::ln2, 1e-12);
  // Two pairs whose four dot products all equal b / k: two positive and two
  // negative terms, each ln 2, over |B| = 2.
  AlignmentBatch<double> both(1);
  both.add(std::vector<double>{1}, std::vector<double>{bias / k});
  both.add(std::vector<double>{1}, std::vector<double>{bias / k});
  EXPECT_NEAR(loss_sig(both, k, bias).value, 2 * std::numbers::ln2, 1e-12);
}

TEST(LossSig, MatchesAllPairsOracle) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    auto b = random_batch(rng, 2, 4);
    for (std::size_t i = 0; i < 2; ++i) {
      double ne = 0, nt = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        ne += b.embeddings[i * 4 + j] * b.embeddings[i * 4 + j];
        nt += b.visuals[i * 4 + j] * b.visuals[i * 4 + j];
      }
      for (std::size_t j = 0; j < 4; ++j) {
        b.embeddings[i * 4 + j] /= std::sqrt(ne);
        b.visuals[i * 4 + j] /= std::sqrt(nt);
      }
    }
    const double k = 1.7, bias = -0.4;
    EXPECT_NEAR(loss_sig(b, k, bias).value,
                oracle::sigmoid_loss(rows(b.embeddings, 4), rows(b.visuals, 4), k, bias), 1e-13);
  }
}

TEST(LossSig, LabelPositivesTreatSameLabelAsPaired) {
  AlignmentBatch<double> b(2);
  b.add(std::vector<double>{1, 0}, std::vector<double>{0.5, 0.1}, 7);
  b.add(std::vector<double>{0, 1}, std::vector<double>{0.2, 0.3}, 7);
  const auto e = rows(b.embeddings, 2), t = rows(b.visuals, 2);
  double want = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) want += std::log1p(std::exp(-1.5 * oracle::dot(e[i], t[j]) + 0.3));
  SigmoidOptions opts;
  opts.label_positives = true;
  EXPECT_NEAR(loss_sig(b, 1.5, 0.3, opts).value, want / 2, 1e-14);
}

TEST(LossTotal, WeightsSelectAndCompose) {
  std::mt19937_64 rng(43);
  const auto b = random_batch(rng, 3, 4);
  const double k = 2.3, bias = -1.0;
  EXPECT_EQ(total_alignment_loss(b, k, bias, {1, 0, 0}).value, loss_dis(b).value);
  EXPECT_EQ(total_alignment_loss(b, k, bias, {0, 0, 1}).value, loss_sig(b, k, bias).value);
  const double want = dis_oracle(b) + sim_oracle(b) +
                      oracle::sigmoid_loss(rows(b.embeddings, 4), rows(b.visuals, 4), k, bias);
  EXPECT_NEAR(total_alignment_loss(b, k, bias, {1, 1, 1}).value, want, 1e-12);
}

TEST(LossTotal, InvalidWeightsAndEmptyBatch) {
  std::mt19937_64 rng(44);
  const auto b = random_batch(rng, 2, 2);
  EXPECT_EQ(error_of([&] { total_alignment_loss(b, 1.0, 0.0, {0, 0, 0}); }).code(),
            Errc::InvalidWeights);
  EXPECT_EQ(error_of([&] { total_alignment_loss(b, 1.0, 0.0, {-1, 1, 1}); }).code(),
            Errc::InvalidWeights);
  EXPECT_EQ(error_of([] { loss_dis(AlignmentBatch<double>(3)); }).code(), Errc::EmptyBatch);
}

TEST(LossGradients, AllLossesMatchFiniteDifferences) {
  std::mt19937_64 rng(45);
  std::uniform_real_distribution<double> kd(0.5, 3.0), bd(-2.0, 2.0);
  for (std::size_t d : {2u, 8u, 32u})
    for (std::size_t n : {1u, 3u, 8u}) {
      const auto batch = random_batch(rng, n, d);
      const double k = kd(rng), b = bd(rng);
      check_loss_gradient(batch, k, b, [](const auto& p, double, double) { return loss_dis(p); },
                          false, true);
      check_loss_gradient(batch, k, b, [](const auto& p, double, double) { return loss_sim(p); },
                          false, false);
      for (bool norm : {false, true})
        for (bool labels : {false, true}) {
          SigmoidOptions o{norm, labels};
          check_loss_gradient(
              batch, k, b, [&](const auto& p, double kk, double bb) { return loss_sig(p, kk, bb, o); },
              true, false);
        }
      check_loss_gradient(
          batch, k, b,
          [](const auto& p, double kk, double bb) {
            return total_alignment_loss(p, kk, bb, {0.5, 2.0, 1.0});
          },
          true, true);
    }
}

// ---------------------------------------------------------------------------
// Model.

TEST(Model, InitialLogitParameters) {
  for (auto seed : {0ull, 5ull}) {
    ModelConfig c;
    c.seed = seed;
    const auto p = init_params<double>(c);
    EXPECT_NEAR(p.k(), 2.302585, 1e-6);
    EXPECT_EQ(p.b(), -10.0);
  }
  ModelConfig c;
  c.log10_logit_scale = true;
  EXPECT_EQ(init_params<double>(c).k(), 1.0);
}

TEST(Model, SameSeedSameParams) {
  EXPECT_EQ(init_params<double>(tiny_config()), init_params<double>(tiny_config()));
  auto other = tiny_config();
  other.seed = 12;
  EXPECT_NE(init_params<double>(tiny_config()), init_params<double>(other));
}

TEST(Model, PatchEmbedShapes) {
  ModelConfig c;
  const auto p = init_params<double>(c);
  const auto f = patch_embed(FeatureGrid<double>(28, 28, 3), p);
  EXPECT_EQ(f.height, 2u);
  EXPECT_EQ(f.width, 2u);
  EXPECT_EQ(f.dim, c.encoder_dim);
  EXPECT_EQ(error_of([&] { patch_embed(FeatureGrid<double>(27, 28, 3), p); }).code(),
            Errc::ShapeError);
}

TEST(Model, ZeroImageZeroBiasGivesZeroGridBeforeBlocks) {
  ModelConfig c = tiny_config();
  c.encoder_layers = 0;
  const auto p = init_params<double>(c);
  const auto f = patch_embed(FeatureGrid<double>(4, 6, 3), p);
  for (double v : f.data) EXPECT_EQ(v, 0.0);
}

TEST(Model, UpsampleQuadruplesSides) {
  ModelConfig c;
  const auto p = init_params<double>(c);
  const auto small = upsample_project(FeatureGrid<double>(2, 2, c.encoder_dim, 0.1), p);
  EXPECT_EQ(small.height, 8u);
  EXPECT_EQ(small.width, 8u);
  EXPECT_EQ(small.dim, c.embed_dim);
  const auto big = upsample_project(FeatureGrid<double>(32, 32, c.encoder_dim, 0.1), p);
  EXPECT_EQ(big.height, 128u);
  EXPECT_EQ(big.dim, c.embed_dim);
}

TEST(Model, IdentityLikeUpsampleKeepsConstants) {
  ModelConfig c = tiny_config();
  c.embed_dim = c.encoder_dim;
  auto p = init_params<double>(c);
  const std::size_t C = c.encoder_dim;
  for (auto* w : {&p.deconv1_w, &p.deconv2_w}) {
    std::fill(w->data.begin(), w->data.end(), 0.0);
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < C; ++i) (*w)[k * C * C + i * C + i] = 1.0;
  }
  std::fill(p.proj_w.data.begin(), p.proj_w.data.end(), 0.0);
  for (std::size_t i = 0; i < C; ++i) p.proj_w[i * C + i] = 1.0;
  FeatureGrid<double> in(3, 2, C);
  for (std::size_t i = 0; i < in.cells(); ++i)
    for (std::size_t ch = 0; ch < C; ++ch) in.data[i * C + ch] = 0.25 * static_cast<double>(ch + 1);
  const auto out = upsample_project(in, p);
  for (std::size_t i = 0; i < out.cells(); ++i)
    for (std::size_t ch = 0; ch < C; ++ch) EXPECT_NEAR(out.data[i * C + ch], 0.25 * (ch + 1), 1e-15);
}

TEST(Model, ShapeContractOverSides) {
  ModelConfig c = tiny_config();
  const auto p = init_params<double>(c);
  for (std::size_t n = 1; n <= 16; ++n) {
    const auto f = visual_forward(FeatureGrid<double>(n * c.patch_size, n * c.patch_size, 3, 0.5), p);
    EXPECT_EQ(f.height, 4 * n);
    EXPECT_EQ(f.width, 4 * n);
  }
}

TEST(Model, ForwardIsDeterministic) {
  std::mt19937_64 rng(46);
  const auto img = oracle::random_grid(rng, 8, 6, 3, 0, 1);
  for (bool attn : {false, true}) {
    const auto a = visual_forward(img, init_params<double>(tiny_config(attn)));
    const auto b = visual_forward(img, init_params<double>(tiny_config(attn)));
    EXPECT_EQ(a, b);
  }
}

TEST(Model, VisualBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(47);
  for (bool attn : {false, true}) {
    auto params = init_params<double>(tiny_config(attn));
    const auto img = oracle::random_grid(rng, 4, 6, 3, 0, 1);
    VisualCache<double> cache;
    const auto out = visual_forward(img, params, &cache);
    const auto weights = oracle::random_grid(rng, out.height, out.width, out.dim);
    auto grads = zeros_like(params);
    visual_backward(params, cache, weights, grads);
    const auto analytic = flatten_params(grads);

    auto x = flatten_params(params);
    auto f = [&](const std::vector<double>& v) {
      auto p = params;
      unflatten_params<double>(p, v);
      return oracle::dot(visual_forward(img, p).data, weights.data);
    };
    std::size_t checked = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double numeric = oracle::central_diff(f, x, i, 1e-5);
      if (analytic[i] == 0.0 && numeric == 0.0) continue;
      ASSERT_LE(oracle::rel_error(analytic[i], numeric), 1e-4) << "param " << i << " attn " << attn;
      ++checked;
    }
    EXPECT_GT(checked, 50u);
  }
}

TEST(Model, TokenEmbeddingBounds) {
  const auto p = init_params<double>(tiny_config());
  const auto a = token_embedding(p, 0), b = token_embedding(p, 0);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  const auto last = token_embedding(p, 4);
  EXPECT_EQ(last.data(), p.token_embed.ptr() + 4 * 2);
  EXPECT_EQ(error_of([&] { token_embedding(p, 5); }).code(), Errc::UnknownToken);
  EXPECT_EQ(error_of([&] { token_embedding(p, -1); }).code(), Errc::UnknownToken);
}

TEST(Model, CastRoundTrip) {
  const auto p = init_params<double>(tiny_config());
  const auto f = cast_params<float>(p);
  EXPECT_EQ(parameter_count(f), parameter_count(p));
  EXPECT_EQ(cast_params<double>(f), cast_params<double>(cast_params<float>(cast_params<double>(f))));
}

// ---------------------------------------------------------------------------
// Checkpoints.

TEST(Checkpoint, RoundTripIsBitEqual) {
  for (bool attn : {false, true}) {
    const auto p = cast_params<float>(init_params<double>(tiny_config(attn)));
    BpeVocab v({"a", "b"}, {{"a", "b"}});
    const auto bytes = serialize_checkpoint(p, &v, {{"stage", "Pretrain"}});
    const auto back = deserialize_checkpoint<float>(bytes);
    EXPECT_EQ(back.params, p);
    ASSERT_TRUE(back.vocab.has_value());
    EXPECT_EQ(*back.vocab, v);
    EXPECT_EQ(back.extra.at("stage"), "Pretrain");
  }
  const auto d = init_params<double>(tiny_config());
  EXPECT_EQ(deserialize_checkpoint<double>(serialize_checkpoint(d)).params, d);
}

TEST(Checkpoint, LayoutStartsWithMagicAndVersion) {
  const auto bytes = serialize_checkpoint(cast_params<float>(init_params<double>(tiny_config())));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TKFD");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Checkpoint, TruncatedIsCorrupt) {
  const auto bytes = serialize_checkpoint(cast_params<float>(init_params<double>(tiny_config())));
  for (std::size_t cut : {std::size_t{3}, std::size_t{11}, std::size_t{40}, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_EQ(error_of([&] { deserialize_checkpoint<float>(t); }).code(), Errc::CorruptCheckpoint)
        << cut;
  }
}

TEST(Checkpoint, BumpedVersionIsCorruptWithDetail) {
  auto bytes = serialize_checkpoint(cast_params<float>(init_params<double>(tiny_config())));
  bytes[4] = 2;
  const auto e = error_of([&] { deserialize_checkpoint<float>(bytes); });
  EXPECT_EQ(e.code(), Errc::CorruptCheckpoint);
  EXPECT_NE(e.detail().find("version 2"), std::string::npos);
}

TEST(Checkpoint, BadMagicIsCorrupt) {
  auto bytes = serialize_checkpoint(cast_params<float>(init_params<double>(tiny_config())));
  bytes[0] = 'X';
  EXPECT_EQ(error_of([&] { deserialize_checkpoint<float>(bytes); }).code(), Errc::CorruptCheckpoint);
}
