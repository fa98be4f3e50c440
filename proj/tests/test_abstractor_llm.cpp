#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "oracles.hpp"
#include "tokenforge/abstractor.hpp"
#include "tokenforge/llmalign.hpp"

using namespace tokenforge;

namespace {

template <typename Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return Errc::InvalidArgument;
}

using RowsCols = std::pair<std::size_t, std::size_t>;

RowsCols grid_of(const CropPlan& p) { return {p.rows, p.cols}; }

// Sequence of (tiles + 1) grids of side x side tokens; token value encodes
// (image, row, col, channel) so every placement is distinguishable.
std::vector<double> marker_sequence(std::size_t tiles, std::size_t side, std::size_t dim) {
  std::vector<double> v;
  for (std::size_t img = 0; img <= tiles; ++img)
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c)
        for (std::size_t d = 0; d < dim; ++d) v.push_back(1000.0 * img + 100.0 * r + 10.0 * c + d);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Crop planning.

TEST(PlanCrops, SpecExamples) {
  const auto a = plan_crops(448, 448);
  EXPECT_EQ(grid_of(a), RowsCols(1, 1));
  const auto b = plan_crops(448, 896);
  EXPECT_EQ(grid_of(b), RowsCols(1, 2));
  const auto c = plan_crops(1344, 448);
  EXPECT_EQ(grid_of(c), RowsCols(3, 1));
}

TEST(PlanCrops, LargeSquareTakesBiggerGrid) {
  const auto p = plan_crops(1000, 1000);
  EXPECT_EQ(grid_of(p), RowsCols(2, 2));
}

TEST(PlanCrops, MatchesEnumerationOracle) {
  std::mt19937_64 rng(51);
  std::uniform_int_distribution<std::size_t> side(1, 4096), tiles(1, 9);
  for (int trial = 0; trial < 3000; ++trial) {
    const std::size_t h = side(rng), w = side(rng), n = tiles(rng);
    const auto p = plan_crops(h, w, 448, n);
    const auto o = oracle::plan(h, w, 448, n);
    ASSERT_EQ(p.rows, o.rows) << h << "x" << w << " N=" << n;
    ASSERT_EQ(p.cols, o.cols) << h << "x" << w << " N=" << n;
    ASSERT_LE(p.tiles(), n);
  }
}

TEST(PlanCrops, TotalAndDeterministic) {
  for (std::size_t h = 1; h <= 4096; h += 37)
    for (std::size_t w = 1; w <= 4096; w += 41) {
      const auto a = plan_crops(h, w), b = plan_crops(h, w);
      ASSERT_EQ(a, b);
      ASSERT_GE(a.tiles(), 1u);
      ASSERT_LE(a.tiles(), 6u);
    }
  EXPECT_EQ(code_of([] { plan_crops(0, 5); }), Errc::ShapeError);
}

TEST(CropImages, CountsAndSizes) {
  FeatureGrid<double> img(30, 50, 3, 0.5);
  for (auto [r, c, n] : {std::tuple{1u, 1u, 2u}, std::tuple{1u, 2u, 3u}, std::tuple{2u, 3u, 7u}}) {
    const auto crops = crop_images(img, CropPlan{r, c, 16, 6, true});
    ASSERT_EQ(crops.size(), n);
    for (const auto& g : crops) {
      EXPECT_EQ(g.height, 16u);
      EXPECT_EQ(g.width, 16u);
    }
  }
}

TEST(CropImages, TilesMatchResizedRegions) {
  std::mt19937_64 rng(52);
  const auto img = oracle::random_grid(rng, 21, 34, 3);
  const CropPlan plan{2, 3, 8, 6, true};
  const auto crops = crop_images(img, plan);
  const auto global = oracle::bilinear(img, 8, 8);
  for (std::size_t i = 0; i < global.data.size(); ++i) ASSERT_NEAR(crops[0].data[i], global.data[i], 1e-12);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const double want = oracle::bilinear_at(img, 16, 24, (t / 3) * 8 + y, (t % 3) * 8 + x, c);
          ASSERT_NEAR(crops[t + 1].at(y, x, c), want, 1e-12);
        }
}

// ---------------------------------------------------------------------------
// Token abstractor.

TEST(TokenAbstract, ZeroQueryIsWindowMean) {
  std::mt19937_64 rng(53);
  const auto f = oracle::random_grid(rng, 8, 8, 3);
  const std::vector<double> q(3, 0.0);
  const auto out = token_abstract<double>(f, q, 4);
  for (std::size_t wr = 0; wr < 2; ++wr)
    for (std::size_t wc = 0; wc < 2; ++wc)
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0;
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t x = 0; x < 4; ++x) s += f.at(wr * 4 + y, wc * 4 + x, c);
        EXPECT_NEAR(out.at(wr, wc, c), s / 16, 1e-14);
      }
}

TEST(TokenAbstract, SaturatedWindowPicksDominantCell) {
  std::mt19937_64 rng(54);
  auto f = oracle::random_grid(rng, 4, 4, 2, -0.1, 0.1);
  const std::vector<double> q = {1.0, 0.0};
  f.at(2, 1, 0) = 40.0;  // logit 40 against at most 0.1 elsewhere
  const auto out = token_abstract<double>(f, q, 4);
  // Remaining mass is below 15 e^-39.9, about 7e-17 per unit of value.
  EXPECT_NEAR(out.at(0, 0, 0), 40.0, 1e-9);
  EXPECT_NEAR(out.at(0, 0, 1), f.at(2, 1, 1), 1e-9);
}

TEST(TokenAbstract, FullScaleShapes) {
  FeatureGrid<float> f(128, 128, 4, 0.25f);
  const std::vector<float> q(4, 0.1f);
  const auto out = token_abstract<float>(f, q, 4);
  EXPECT_EQ(out.height, 32u);
  EXPECT_EQ(out.cells(), 1024u);
  EXPECT_EQ(abstract_side(448, 14, 4), 32u);
  EXPECT_EQ(visual_token_count(448, 14, 4, 1), 2048u);
  EXPECT_EQ(visual_token_count(448, 14, 4, 6), 7168u);
}

TEST(TokenAbstract, SoftmaxSumsToOneAndStaysInHull) {
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 30; ++trial) {
    const auto f = oracle::random_grid(rng, 8, 12, 3, -2, 2);
    const auto q = oracle::random_vector(rng, 3, -3, 3);
    std::vector<double> alpha;
    const auto out = token_abstract<double>(f, q, 4, &alpha);
    for (std::size_t w = 0; w < 6; ++w) {
      double s = 0;
      for (std::size_t j = 0; j < 16; ++j) s += alpha[w * 16 + j];
      ASSERT_NEAR(s, 1.0, 1e-12);
      const std::size_t wr = w / 3, wc = w % 3;
      for (std::size_t c = 0; c < 3; ++c) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t j = 0; j < 16; ++j) {
          const double v = f.at(wr * 4 + j / 4, wc * 4 + j % 4, c);
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        ASSERT_GE(out.at(wr, wc, c), lo - 1e-12);
        ASSERT_LE(out.at(wr, wc, c), hi + 1e-12);
      }
    }
  }
}

TEST(TokenAbstract, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(56);
  for (std::size_t s : {2u, 4u}) {
    const auto f = oracle::random_grid(rng, 8, 4, 3);
    const auto q = oracle::random_vector(rng, 3, -2, 2);
    std::vector<double> alpha;
    const auto out = token_abstract<double>(f, q, s, &alpha);
    const auto g = oracle::random_grid(rng, out.height, out.width, 3);
    FeatureGrid<double> gf(8, 4, 3);
    std::vector<double> gq(3, 0.0);
    token_abstract_backward<double>(f, q, s, alpha, g, gf, gq);

    std::vector<double> x = f.data;
    x.insert(x.end(), q.begin(), q.end());
    auto fn = [&](const std::vector<double>& v) {
      FeatureGrid<double> ff = f;
      std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(f.data.size()), ff.data.begin());
      const std::vector<double> qq(v.end() - 3, v.end());
      return oracle::dot(token_abstract<double>(ff, qq, s).data, g.data);
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double analytic = i < f.data.size() ? gf.data[i] : gq[i - f.data.size()];
      ASSERT_LE(oracle::rel_error(analytic, oracle::central_diff(fn, x, i, 1e-5)), 1e-4) << i;
    }
  }
}

TEST(TokenAbstract, BadShapesThrow) {
  FeatureGrid<double> f(6, 8, 2);
  const std::vector<double> q(2, 0.0), q3(3, 0.0);
  EXPECT_EQ(code_of([&] { token_abstract<double>(f, q, 4); }), Errc::ShapeError);
  EXPECT_EQ(code_of([&] { token_abstract<double>(f, q3, 2); }), Errc::DimensionMismatch);
}

TEST(Flatten, ProvenanceRoundTrip) {
  std::mt19937_64 rng(57);
  std::vector<FeatureGrid<double>> grids;
  for (int i = 0; i < 4; ++i) grids.push_back(oracle::random_grid(rng, 3, 3, 2));
  const auto seq = flatten_sequence<double>(grids);
  EXPECT_EQ(seq.size(), 36u);
  EXPECT_EQ(seq.provenance[9], (TokenProvenance{1, 0, 0}));
  EXPECT_EQ(seq.provenance[14], (TokenProvenance{1, 1, 2}));
  EXPECT_EQ(unflatten_sequence(seq), grids);
  grids.push_back(oracle::random_grid(rng, 2, 2, 2));
  EXPECT_EQ(code_of([&] { flatten_sequence<double>(grids); }), Errc::ShapeError);
}

// ---------------------------------------------------------------------------
// Answer-token location and sub-map reassembly.

TEST(Locate, Examples) {
  TokenEntry e{"a", 0, 1, 0};
  EXPECT_EQ(locate_answer_token(e, 4, 2, 3).absolute_index, 6u);
  e.index_in_text = 2;
  EXPECT_EQ(locate_answer_token(e, 4, 2, 3).absolute_index, 8u);
  e.index_in_text = 3;
  EXPECT_EQ(code_of([&] { locate_answer_token(e, 4, 2, 3); }), Errc::IndexError);
}

TEST(Locate, InjectiveOverIndices) {
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < 50; ++i) {
    TokenEntry e{"x", 0, 1, i};
    EXPECT_TRUE(seen.insert(locate_answer_token(e, 17, 5, 50).absolute_index).second);
  }
}

TEST(Reassemble, SingleTileIsThatGrid) {
  const auto v = marker_sequence(1, 2, 2);
  const auto map = reassemble_submaps<double>(v, 2, CropPlan{1, 1, 8, 6, true}, 2);
  ASSERT_EQ(map.height, 2u);
  for (std::size_t i = 0; i < map.data.size(); ++i) EXPECT_EQ(map.data[i], v[8 + i]);
}

TEST(Reassemble, TwoByOneStacksVertically) {
  const auto v = marker_sequence(2, 2, 1);
  const auto map = reassemble_submaps<double>(v, 1, CropPlan{2, 1, 8, 6, true}, 2);
  ASSERT_EQ(map.height, 4u);
  ASSERT_EQ(map.width, 2u);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 2; ++x)
      EXPECT_EQ(map.at(y, x, 0), 1000.0 * (1 + y / 2) + 100.0 * (y % 2) + 10.0 * x);
}

TEST(Reassemble, PlacementOracleOverPlans) {
  for (std::size_t rows = 1; rows <= 3; ++rows)
    for (std::size_t cols = 1; rows * cols <= 6; ++cols) {
      const std::size_t side = 3, dim = 2, tiles = rows * cols;
      const auto v = marker_sequence(tiles, side, dim);
      const auto map = reassemble_submaps<double>(v, dim, CropPlan{rows, cols, 8, 6, true}, side);
      for (std::size_t y = 0; y < rows * side; ++y)
        for (std::size_t x = 0; x < cols * side; ++x)
          for (std::size_t d = 0; d < dim; ++d) {
            const std::size_t tile = (y / side) * cols + x / side;
            ASSERT_EQ(map.at(y, x, d), 1000.0 * (tile + 1) + 100.0 * (y % side) + 10.0 * (x % side) + d);
          }
    }
}

TEST(Reassemble, OrderSensitive) {
  auto v = marker_sequence(2, 2, 1);
  const CropPlan plan{1, 2, 8, 6, true};
  const auto a = reassemble_submaps<double>(v, 1, plan, 2);
  std::swap(v[4], v[9]);
  EXPECT_NE(reassemble_submaps<double>(v, 1, plan, 2), a);
}

TEST(Reassemble, InvertsFlatten) {
  std::mt19937_64 rng(58);
  const CropPlan plan{2, 3, 8, 6, true};
  std::vector<FeatureGrid<double>> grids;
  for (int i = 0; i < 7; ++i) grids.push_back(oracle::random_grid(rng, 2, 2, 3));
  const auto seq = flatten_sequence<double>(grids);
  const auto map = reassemble_submaps<double>(seq.tokens, 3, plan, 2);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x)
        for (std::size_t d = 0; d < 3; ++d)
          ASSERT_EQ(map.at((t / 3) * 2 + y, (t % 3) * 2 + x, d), grids[t + 1].at(y, x, d));
  EXPECT_EQ(code_of([&] { reassemble_submaps<double>(seq.tokens, 3, CropPlan{1, 1, 8, 6, true}, 2); }),
            Errc::ShapeError);
}

// ---------------------------------------------------------------------------
// Pooling inside the language model.

TEST(LlmPool, FullMaskIsMeanOfResizedMap) {
  std::mt19937_64 rng(59);
  const auto map = oracle::random_grid(rng, 3, 5, 2);
  BinaryMask m(7, 4);
  std::fill(m.bits.begin(), m.bits.end(), 1);
  const auto up = oracle::bilinear(map, 7, 4);
  const auto got = llm_pool_token(map, m);
  for (std::size_t d = 0; d < 2; ++d) {
    double s = 0;
    for (std::size_t i = 0; i < 28; ++i) s += up.data[i * 2 + d];
    EXPECT_NEAR(got[d], s / 28, 1e-13);
  }
}

TEST(LlmPool, SingleCellAtMatchingResolution) {
  std::mt19937_64 rng(60);
  const auto map = oracle::random_grid(rng, 4, 4, 3);
  BinaryMask m(4, 4);
  m.set(1, 3);
  const auto got = llm_pool_token(map, m);
  for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(got[d], map.at(1, 3, d));
}

TEST(LlmPool, MatchesBruteForce) {
  std::mt19937_64 rng(61);
  std::uniform_int_distribution<std::size_t> dim(1, 16);
  for (int trial = 0; trial < 200; ++trial) {
    const auto map = oracle::random_grid(rng, dim(rng), dim(rng), 3);
    auto m = oracle::random_mask(rng, dim(rng), dim(rng));
    if (m.empty()) m.set(0, 0);
    const auto got = llm_pool_token(map, m);
    const auto want = oracle::llm_pool(map, m);
    for (std::size_t d = 0; d < 3; ++d) ASSERT_NEAR(got[d], want[d], 1e-12);
  }
}

TEST(LlmPool, AgreesWithMaskedMeanAtSameResolution) {
  std::mt19937_64 rng(62);
  for (int trial = 0; trial < 50; ++trial) {
    const auto map = oracle::random_grid(rng, 6, 5, 2);
    auto m = oracle::random_mask(rng, 6, 5);
    if (m.empty()) m.set(5, 4);
    const auto a = llm_pool_token(map, m), b = masked_mean_pool(map, m);
    for (std::size_t d = 0; d < 2; ++d) ASSERT_NEAR(a[d], b[d], 1e-14);
  }
}

TEST(LlmPool, EmptyMaskThrows) {
  FeatureGrid<double> map(2, 2, 1);
  EXPECT_EQ(code_of([&] { llm_pool_token(map, BinaryMask(3, 3)); }), Errc::EmptyMask);
}

// ---------------------------------------------------------------------------
// Alignment loss on hidden states.

namespace {

struct AlignFixture {
  CropPlan plan{1, 2, 8, 6, true};
  std::size_t side = 2, dim = 3;
  HiddenStates<double> hidden;
  std::vector<std::pair<AnswerTokenRef, BinaryMask>> refs;

  explicit AlignFixture(std::mt19937_64& rng) {
    hidden.n_visual = 3 * side * side;
    hidden.n_question = 2;
    hidden.n_answer = 3;
    hidden.dim = dim;
    hidden.data = oracle::random_vector(rng, hidden.total() * dim);
    for (std::size_t i = 0; i < 3; ++i) {
      auto m = oracle::random_mask(rng, 6, 10);
      if (m.empty()) m.set(0, 0);
      TokenEntry e{"t", static_cast<std::int64_t>(i), static_cast<std::uint32_t>(i + 1), i};
      refs.push_back({locate_answer_token(e, hidden.n_visual, 2, 3), m});
    }
  }
};

}  // namespace

TEST(LlmAlign, MatchesComposedModuleLosses) {
  std::mt19937_64 rng(63);
  AlignFixture fx(rng);
  const auto out = llm_token_align_loss(fx.hidden, fx.refs, fx.plan, fx.side, 1.3, -0.5);
  const auto map = oracle::random_grid(rng, 1, 1, 1);  // unused, keeps rng streams apart
  (void)map;
  const std::span<const double> visual(fx.hidden.data.data(), fx.hidden.n_visual * fx.dim);
  const auto fmap = reassemble_submaps(visual, fx.dim, fx.plan, fx.side);
  AlignmentBatch<double> batch(fx.dim);
  for (const auto& [ref, mask] : fx.refs)
    batch.add(fx.hidden.row(ref.absolute_index), oracle::llm_pool(fmap, mask), ref.entry.token_id);
  const double want =
      loss_dis(batch).value + loss_sim(batch).value + loss_sig(batch, 1.3, -0.5).value;
  EXPECT_NEAR(out.value, want, 1e-12);
  EXPECT_EQ(out.pairs_used, 3u);
}

TEST(LlmAlign, AlignedVectorsZeroDisAndSim) {
  std::mt19937_64 rng(64);
  AlignFixture fx(rng);
  const std::span<const double> visual(fx.hidden.data.data(), fx.hidden.n_visual * fx.dim);
  const auto fmap = reassemble_submaps(visual, fx.dim, fx.plan, fx.side);
  for (const auto& [ref, mask] : fx.refs) {
    const auto pooled = llm_pool_token(fmap, mask);
    std::copy(pooled.begin(), pooled.end(), fx.hidden.data.begin() + ref.absolute_index * fx.dim);
  }
  const auto out = llm_token_align_loss(fx.hidden, fx.refs, fx.plan, fx.side, 1.0, 0.0, {1, 1, 0});
  EXPECT_NEAR(out.value, 0.0, 1e-12);
}

TEST(LlmAlign, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(65);
  AlignFixture fx(rng);
  SigmoidOptions opts{true, true};
  const auto out = llm_token_align_loss(fx.hidden, fx.refs, fx.plan, fx.side, 1.3, -0.5, {}, opts);
  auto x = fx.hidden.data;
  auto f = [&](const std::vector<double>& v) {
    auto h = fx.hidden;
    h.data = v;
    return llm_token_align_loss(h, fx.refs, fx.plan, fx.side, 1.3, -0.5, {}, opts).value;
  };
  for (std::size_t i = 0; i < x.size(); ++i)
    ASSERT_LE(oracle::rel_error(out.grad_hidden[i], oracle::central_diff(f, x, i, 1e-5)), 1e-4) << i;
}

TEST(LlmAlign, EmptyMasksAreDroppedOrFail) {
  std::mt19937_64 rng(66);
  AlignFixture fx(rng);
  fx.refs[1].second = BinaryMask(6, 10);
  const auto out = llm_token_align_loss(fx.hidden, fx.refs, fx.plan, fx.side, 1.0, 0.0);
  EXPECT_EQ(out.pairs_used, 2u);
  EXPECT_EQ(out.pairs_dropped, 1u);
  for (auto& r : fx.refs) r.second = BinaryMask(6, 10);
  EXPECT_EQ(code_of([&] { llm_token_align_loss(fx.hidden, fx.refs, fx.plan, fx.side, 1.0, 0.0); }),
            Errc::EmptyBatch);
}

// ---------------------------------------------------------------------------
// Next-token cross-entropy.

TEST(NextTokenCe, ConfidentLogitsGiveNearZero) {
  const std::vector<std::int64_t> ids = {2, 0, 3};
  std::vector<double> logits(3 * 4, -50.0);
  for (std::size_t m = 0; m < 3; ++m) logits[m * 4 + static_cast<std::size_t>(ids[m])] = 50.0;
  EXPECT_LT(next_token_ce<double>(logits, 4, ids).value, 1e-40);
}

TEST(NextTokenCe, UniformLogitsClosedForm) {
  const std::vector<std::int64_t> ids = {1, 5, 9};
  const std::vector<double> logits(3 * 16, 0.7);
  EXPECT_NEAR(next_token_ce<double>(logits, 16, ids).value, 2 * std::log(16.0), 1e-12);
}

TEST(NextTokenCe, MatchesScalarOracleAndGradient) {
  std::mt19937_64 rng(67);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<std::int64_t> ids = {static_cast<std::int64_t>(rng() % 4),
                                           static_cast<std::int64_t>(rng() % 4)};
    const auto logits = oracle::random_vector(rng, 8, -3, 3);
    const auto out = next_token_ce<double>(logits, 4, ids);
    double z = 0;
    for (std::size_t k = 0; k < 4; ++k) z += std::exp(logits[4 + k]);
    EXPECT_NEAR(out.value, -std::log(std::exp(logits[4 + static_cast<std::size_t>(ids[1])]) / z), 1e-12);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(out.grad[k], 0.0);
      const double want = std::exp(logits[4 + k]) / z - (k == static_cast<std::size_t>(ids[1]) ? 1 : 0);
      EXPECT_NEAR(out.grad[4 + k], want, 1e-10);
    }
  }
}

TEST(NextTokenCe, RejectsBadInput) {
  const std::vector<std::int64_t> ids = {0, 4};
  const std::vector<double> logits(8, 0.0);
  EXPECT_EQ(code_of([&] { next_token_ce<double>(logits, 4, ids); }), Errc::UnknownToken);
  EXPECT_EQ(code_of([&] { next_token_ce<double>(logits, 3, ids); }), Errc::ShapeError);
}

// ---------------------------------------------------------------------------
// Stub language model.

TEST(StubLlm, BackwardMatchesFiniteDifferences) {
  ModelConfig c;
  c.patch_size = 2;
  c.encoder_dim = 2;
  c.encoder_layers = 1;
  c.embed_dim = 3;
  c.vocab_size = 5;
  c.llm_dim = 4;
  c.llm_layers = 2;
  c.seed = 3;
  const auto params = init_params<double>(c);
  std::mt19937_64 rng(68);
  auto visual = oracle::random_vector(rng, 4 * 3);
  const std::vector<std::int64_t> q = {1, 2}, a = {3, 0, 4};
  const auto inject = oracle::random_vector(rng, 9 * 4);
  auto loss = [&](const ModelParams<double>& p, const std::vector<double>& v) {
    const auto f = stub_llm_forward<double>(p, v, q, a);
    const auto logits = stub_answer_logits(p, f);
    return next_token_ce<double>(logits, 5, a).value + oracle::dot(f.layers[1], inject);
  };
  const auto f = stub_llm_forward<double>(params, visual, q, a);
  const auto ce = next_token_ce<double>(stub_answer_logits(params, f), 5, a);
  auto grads = zeros_like(params);
  const auto dvis = stub_llm_backward<double>(params, f, {{}, inject, {}}, ce.grad, grads);

  for (std::size_t i = 0; i < visual.size(); ++i) {
    auto fv = [&](const std::vector<double>& v) { return loss(params, v); };
    ASSERT_LE(oracle::rel_error(dvis[i], oracle::central_diff(fv, visual, i, 1e-5)), 1e-4);
  }
  auto flat = flatten_params(params);
  const auto gflat = flatten_params(grads);
  auto fp = [&](const std::vector<double>& v) {
    auto p = params;
    unflatten_params<double>(p, v);
    return loss(p, visual);
  };
  for (std::size_t i = 0; i < flat.size(); ++i)
    ASSERT_LE(oracle::rel_error(gflat[i], oracle::central_diff(fp, flat, i, 1e-5)), 1e-4) << i;
}

TEST(StubLlm, HiddenLayerBounds) {
  ModelConfig c;
  c.llm_dim = 2;
  c.embed_dim = 2;
  const auto params = init_params<double>(c);
  const std::vector<double> v(4, 0.1);
  const std::vector<std::int64_t> q = {1}, a = {2};
  const auto f = stub_llm_forward<double>(params, v, q, a);
  EXPECT_EQ(hidden_states_at(f, 2, 2).total(), 4u);
  EXPECT_EQ(code_of([&] { hidden_states_at(f, 3, 2); }), Errc::IndexError);
  c.llm_dim = 0;
  const auto none = init_params<double>(c);
  EXPECT_EQ(code_of([&] { stub_llm_forward<double>(none, v, q, a); }), Errc::InvalidArgument);
}

TEST(VisualSequence, TokenCountAndBackward) {
  ModelConfig c;
  c.patch_size = 4;
  c.encoder_dim = 2;
  c.encoder_layers = 1;
  c.embed_dim = 2;
  c.vocab_size = 3;
  c.seed = 9;
  const auto params = init_params<double>(c);
  std::mt19937_64 rng(69);
  const auto img = oracle::random_grid(rng, 16, 32, 3, 0, 1);
  SequenceCache<double> cache;
  const auto seq = encode_visual_sequence(img, params, 16, 6, 4, &cache);
  EXPECT_EQ(cache.plan.rows, 1u);
  EXPECT_EQ(cache.plan.cols, 2u);
  EXPECT_EQ(seq.size(), visual_token_count(16, 4, 4, 2));

  const auto w = oracle::random_vector(rng, seq.tokens.size());
  auto grads = zeros_like(params);
  encode_visual_sequence_backward<double>(params, cache, w, grads);
  auto flat = flatten_params(params);
  const auto gflat = flatten_params(grads);
  auto fp = [&](const std::vector<double>& v) {
    auto p = params;
    unflatten_params<double>(p, v);
    return oracle::dot(encode_visual_sequence(img, p, 16, 6, 4).tokens, w);
  };
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double numeric = oracle::central_diff(fp, flat, i, 1e-5);
    if (gflat[i] == 0.0 && numeric == 0.0) continue;
    ASSERT_LE(oracle::rel_error(gflat[i], numeric), 1e-4) << i;
  }
}
