#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "oracles.hpp"
#include "tokenforge/tensorcore.hpp"

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

}  // namespace

TEST(Bilinear, IdentityWhenDimsMatch) {
  std::mt19937_64 rng(1);
  const auto g = oracle::random_grid(rng, 5, 7, 3);
  EXPECT_EQ(bilinear_resize(g, 5, 7), g);
}

TEST(Bilinear, TwoByTwoToOneIsMeanOfCorners) {
  FeatureGrid<double> g(2, 2, 1);
  g.at(0, 0, 0) = 0;
  g.at(0, 1, 0) = 4;
  g.at(1, 0, 0) = 0;
  g.at(1, 1, 0) = 4;
  EXPECT_DOUBLE_EQ(bilinear_resize(g, 1, 1).at(0, 0, 0), 2.0);
}

TEST(Bilinear, TwoByTwoToThreeMatchesPointOracle) {
  FeatureGrid<double> g(2, 2, 1);
  g.at(0, 0, 0) = 1;
  g.at(0, 1, 0) = 3;
  g.at(1, 0, 0) = -2;
  g.at(1, 1, 0) = 5;
  const auto out = bilinear_resize(g, 3, 3);
  EXPECT_NEAR(out.at(1, 1, 0), oracle::bilinear_at(g, 3, 3, 1, 1, 0), 1e-15);
  // The centre sample sits exactly between all four inputs.
  EXPECT_NEAR(out.at(1, 1, 0), 1.75, 1e-15);
}

TEST(Bilinear, RandomShapesMatchPointOracle) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = oracle::random_grid(rng, dim(rng), dim(rng), 2);
    const std::size_t oh = dim(rng), ow = dim(rng);
    const auto got = bilinear_resize(g, oh, ow);
    const auto want = oracle::bilinear(g, oh, ow);
    for (std::size_t i = 0; i < got.data.size(); ++i) ASSERT_NEAR(got.data[i], want.data[i], 1e-12);
  }
}

TEST(Bilinear, PreservesConstantGrids) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 20);
  std::uniform_real_distribution<double> val(-10, 10);
  for (int trial = 0; trial < 100; ++trial) {
    FeatureGrid<double> g(dim(rng), dim(rng), 1, val(rng));
    const auto out = bilinear_resize(g, dim(rng), dim(rng));
    for (double v : out.data) ASSERT_EQ(v, g.data[0]);
  }
}

TEST(Bilinear, AdjointSatisfiesInnerProductIdentity) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> dim(1, 10);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = dim(rng), w = dim(rng), oh = dim(rng), ow = dim(rng);
    const auto x = oracle::random_grid(rng, h, w, 2);
    const auto y = oracle::random_grid(rng, oh, ow, 2);
    const auto ax = bilinear_resize(x, oh, ow);
    const auto aty = bilinear_resize_adjoint(y, h, w);
    const double lhs = oracle::dot(ax.data, y.data);
    const double rhs = oracle::dot(x.data, aty.data);
    ASSERT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(Bilinear, ZeroOutputDimsRejected) {
  FeatureGrid<double> g(2, 2, 1);
  EXPECT_EQ(code_of([&] { bilinear_resize(g, 0, 2); }), Errc::ShapeError);
}

TEST(MaskedMeanPool, AllOnesIsGlobalMean) {
  std::mt19937_64 rng(5);
  const auto g = oracle::random_grid(rng, 6, 4, 3);
  BinaryMask m(6, 4);
  std::fill(m.bits.begin(), m.bits.end(), 1);
  const auto pooled = masked_mean_pool(g, m);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < g.cells(); ++i) s += g.data[i * 3 + c];
    EXPECT_NEAR(pooled[c], s / 24.0, 1e-14);
  }
}

TEST(MaskedMeanPool, SinglePixelReturnsThatCell) {
  std::mt19937_64 rng(6);
  const auto g = oracle::random_grid(rng, 5, 5, 4);
  BinaryMask m(5, 5);
  m.set(3, 1);
  const auto pooled = masked_mean_pool(g, m);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(pooled[c], g.at(3, 1, c));
}

TEST(MaskedMeanPool, MatchesBruteForceOnRandomGrids) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto g = oracle::random_grid(rng, 8, 8, 4);
    auto m = oracle::random_mask(rng, 8, 8);
    if (m.empty()) m.set(0, 0);
    const auto got = masked_mean_pool(g, m);
    const auto want = oracle::masked_mean(g, m);
    for (std::size_t c = 0; c < 4; ++c) ASSERT_NEAR(got[c], want[c], 1e-12);
  }
}

TEST(MaskedMeanPool, ResampledMaskMatchesOracle) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> dim(2, 24);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto g = oracle::random_grid(rng, dim(rng), dim(rng), 3);
    const auto m = oracle::random_mask(rng, dim(rng), dim(rng), 0.5);
    bool empty = false;
    const auto want = oracle::masked_mean(g, m, &empty);
    if (empty) {
      EXPECT_EQ(code_of([&] { masked_mean_pool(g, m); }), Errc::EmptyMask);
      continue;
    }
    const auto got = masked_mean_pool(g, m);
    for (std::size_t c = 0; c < 3; ++c) ASSERT_NEAR(got[c], want[c], 1e-12);
    ++checked;
  }
  EXPECT_GT(checked, 100);
}

TEST(MaskedMeanPool, EmptyMaskThrows) {
  FeatureGrid<double> g(4, 4, 2, 1.0);
  BinaryMask m(4, 4);
  EXPECT_EQ(code_of([&] { masked_mean_pool(g, m); }), Errc::EmptyMask);
}

TEST(MaskedMeanPool, InvariantToShufflingBackground) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    auto g = oracle::random_grid(rng, 8, 8, 3);
    auto m = oracle::random_mask(rng, 8, 8);
    if (m.empty()) m.set(2, 2);
    const auto before = masked_mean_pool(g, m);
    std::vector<std::size_t> background;
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (!m.bits[i]) background.push_back(i);
    auto shuffled = background;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto original = g;
    for (std::size_t k = 0; k < background.size(); ++k)
      for (std::size_t c = 0; c < 3; ++c)
        g.data[background[k] * 3 + c] = original.data[shuffled[k] * 3 + c];
    EXPECT_EQ(masked_mean_pool(g, m), before);
  }
}

TEST(MaskedMeanPool, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  auto g = oracle::random_grid(rng, 4, 5, 2);
  const auto w = oracle::random_vector(rng, 20, 0.0, 1.0);
  const auto coeff = oracle::random_vector(rng, 2);
  FeatureGrid<double> grad(4, 5, 2);
  weighted_mean_pool_backward<double>(w, coeff, grad);
  auto f = [&](std::span<const double> x) {
    FeatureGrid<double> h = g;
    std::copy(x.begin(), x.end(), h.data.begin());
    return oracle::dot(weighted_mean_pool<double>(h, w), coeff);
  };
  const auto numeric = finite_diff_grad(f, g.data, 1e-6);
  for (std::size_t i = 0; i < numeric.size(); ++i) EXPECT_NEAR(grad.data[i], numeric[i], 1e-8);
}

TEST(Windows, SideOneIsIdentity) {
  std::mt19937_64 rng(11);
  const auto g = oracle::random_grid(rng, 3, 4, 2);
  const auto w = window_partition(g, 1);
  EXPECT_EQ(w.count(), 12u);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(w.at(i, c, 0), g.data[i * 2 + c]);
}

TEST(Windows, WholeGridIsOneRowMajorWindow) {
  FeatureGrid<double> g(4, 4, 1);
  for (std::size_t i = 0; i < 16; ++i) g.data[i] = static_cast<double>(i);
  const auto w = window_partition(g, 4);
  ASSERT_EQ(w.count(), 1u);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(w.at(0, 0, j), static_cast<double>(j));
}

TEST(Windows, WindowOrderIsRowMajor) {
  FeatureGrid<double> g(4, 6, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 6; ++x) g.at(y, x, 0) = static_cast<double>(10 * y + x);
  const auto w = window_partition(g, 2);
  ASSERT_EQ(w.rows, 2u);
  ASSERT_EQ(w.cols, 3u);
  // Window 4 is row 1, column 1: cells (2,2), (2,3), (3,2), (3,3).
  EXPECT_EQ(w.at(4, 0, 0), 22.0);
  EXPECT_EQ(w.at(4, 0, 1), 23.0);
  EXPECT_EQ(w.at(4, 0, 2), 32.0);
  EXPECT_EQ(w.at(4, 0, 3), 33.0);
}

TEST(Windows, RoundTripIsBitExact) {
  std::mt19937_64 rng(12);
  for (std::size_t s : {1u, 2u, 4u, 8u}) {
    const auto g = oracle::random_grid(rng, 8, 8, 3);
    EXPECT_EQ(window_merge(window_partition(g, s)), g);
  }
}

TEST(Windows, NonDivisibleSideThrows) {
  FeatureGrid<double> g(6, 8, 1);
  EXPECT_EQ(code_of([&] { window_partition(g, 4); }), Errc::ShapeError);
  EXPECT_EQ(code_of([&] { window_partition(g, 0); }), Errc::ShapeError);
}

TEST(FiniteDiff, SumGivesOnes) {
  const std::vector<double> x = {0.3, -1.2, 4.0};
  const auto g = finite_diff_grad(
      [](std::span<const double> v) { return v[0] + v[1] + v[2]; }, x, 1e-5);
  for (double d : g) EXPECT_NEAR(d, 1.0, 1e-9);
}

TEST(FiniteDiff, SquareAtThree) {
  const std::vector<double> x = {3.0};
  const auto g = finite_diff_grad([](std::span<const double> v) { return v[0] * v[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDiff, ConstantGivesZero) {
  const std::vector<double> x = {1.0, 2.0};
  const auto g = finite_diff_grad([](std::span<const double>) { return 7.5; }, x, 1e-5);
  EXPECT_EQ(g, std::vector<double>(2, 0.0));
}

TEST(FiniteDiff, QuadraticsMatchAnalyticGradient) {
  std::mt19937_64 rng(13);
  const double eps = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 4;
    const auto a = oracle::random_vector(rng, n * n);
    const auto b = oracle::random_vector(rng, n);
    const auto x = oracle::random_vector(rng, n);
    auto f = [&](std::span<const double> v) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        s += b[i] * v[i];
        for (std::size_t j = 0; j < n; ++j) s += 0.5 * a[i * n + j] * v[i] * v[j];
      }
      return s;
    };
    const auto g = finite_diff_grad(f, x, eps);
    for (std::size_t i = 0; i < n; ++i) {
      double want = b[i];
      for (std::size_t j = 0; j < n; ++j) want += 0.5 * (a[i * n + j] + a[j * n + i]) * x[j];
      EXPECT_LE(oracle::rel_error(g[i], want), 10 * eps);
    }
  }
}

TEST(FiniteDiff, NonFiniteValueThrows) {
  const std::vector<double> x = {0.0};
  EXPECT_EQ(code_of([&] {
              finite_diff_grad(
                  [](std::span<const double> v) { return v[0] > 0 ? std::nan("") : 0.0; }, x, 1e-5);
            }),
            Errc::NumericalFailure);
}

TEST(Cosine, ParallelAntiparallelOrthogonal) {
  const std::vector<double> a = {1, 2, 3}, neg = {-1, -2, -3};
  const std::vector<double> e0 = {1, 0}, e1 = {0, 1};
  EXPECT_NEAR(cosine_similarity<double>(a, a), 1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity<double>(a, neg), -1.0, 1e-15);
  EXPECT_EQ(cosine_similarity<double>(e0, e1), 0.0);
}

TEST(Cosine, ZeroVectorThrows) {
  const std::vector<double> a = {0, 0}, b = {1, 0};
  EXPECT_EQ(code_of([&] { cosine_similarity<double>(a, b); }), Errc::ZeroNorm);
}
