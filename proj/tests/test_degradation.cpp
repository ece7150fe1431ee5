#include <gtest/gtest.h>

#include "oracles.hpp"
#include "unfoldldm/degradation.hpp"

using namespace uldm;

namespace {

Tensor<double> rand_t(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  const std::size_t n = numel(s);
  return Tensor<double>(std::move(s), oracle::random_mat(n, rng, lo, hi));
}

Tensor<double> eye_stack(std::size_t c, std::size_t n) {
  Tensor<double> t({c, n, n});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < n; ++i) t[(ch * n + i) * n + i] = 1;
  return t;
}

oracle::Mat channel(const Tensor<double>& t, std::size_t ch) {
  const std::size_t block = t.dim(1) * t.dim(2);
  return oracle::Mat(t.values().begin() + ch * block, t.values().begin() + (ch + 1) * block);
}

}  // namespace

TEST(ApplyDecomposed, IdentityFactorsLeaveImage) {
  std::mt19937_64 rng(1);
  const auto x = rand_t({2, 3, 4}, rng);
  EXPECT_EQ(apply_decomposed(eye_stack(2, 3), x, eye_stack(2, 4)), x);
}

TEST(ApplyDecomposed, PermutationSwapsRows) {
  const Tensor<double> x({1, 2, 2}, {1, 2, 3, 4});
  const Tensor<double> w({1, 2, 2}, {0, 1, 1, 0});
  EXPECT_EQ(apply_decomposed(w, x, eye_stack(1, 2)), Tensor<double>({1, 2, 2}, {3, 4, 1, 2}));
}

TEST(ApplyDecomposed, MatchesDenseKroneckerOracle) {
  std::mt19937_64 rng(2);
  const auto w = rand_t({1, 4, 4}, rng), m = rand_t({1, 5, 5}, rng), x = rand_t({1, 4, 5}, rng);
  const auto d = oracle::holistic(w.values(), m.values(), 4, 5);
  const auto ref = oracle::matvec(d, x.values(), 20, 20);
  const auto got = apply_decomposed(w, x, m);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(got[i], ref[i], 1e-10);
}

TEST(ApplyDecomposed, RejectsMismatchedFactors) {
  EXPECT_THROW(apply_decomposed(eye_stack(1, 3), Tensor<double>({1, 4, 4}), eye_stack(1, 4)), ShapeError);
  EXPECT_THROW(apply_decomposed(eye_stack(2, 4), Tensor<double>({1, 4, 4}), eye_stack(1, 4)), ShapeError);
}

TEST(Holistic, IdentitiesGiveIdentity) {
  const auto d = materialize_holistic(eye_stack(1, 3), eye_stack(1, 2));
  ASSERT_EQ(d.shape(), (Shape{1, 6, 6}));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(d[i * 6 + j], i == j ? 1.0 : 0.0);
}

TEST(Holistic, UnitSizesGiveScalarProduct) {
  const auto d = materialize_holistic(Tensor<double>({1, 1, 1}, {3.0}), Tensor<double>({1, 1, 1}, {-2.0}));
  EXPECT_EQ(d, Tensor<double>({1, 1, 1}, {-6.0}));
}

TEST(Holistic, AgreesWithFactorProductOnManyImages) {
  std::mt19937_64 rng(3);
  const auto w = rand_t({1, 3, 3}, rng), m = rand_t({1, 2, 2}, rng);
  const auto d = materialize_holistic(w, m);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = rand_t({1, 3, 2}, rng);
    const auto direct = apply_decomposed(w, x, m);
    const auto dv = oracle::matvec(d.values(), x.values(), 6, 6);
    for (std::size_t i = 0; i < 6; ++i) ASSERT_NEAR(dv[i], direct[i], 1e-10);
  }
}

TEST(Holistic, EnforcesMemoryBudget) {
  EXPECT_THROW(materialize_holistic(eye_stack(1, 8), eye_stack(1, 8), 100), ShapeError);
}

// Property: Kronecker identity over random extents and channel counts.
TEST(Holistic, KroneckerIdentityProperty) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> ext(1, 6), chans(1, 3);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t c = chans(rng), h = ext(rng), wd = ext(rng);
    const auto w = rand_t({c, h, h}, rng), m = rand_t({c, wd, wd}, rng), x = rand_t({c, h, wd}, rng);
    const auto d = materialize_holistic(w, m);
    const auto direct = apply_decomposed(w, x, m);
    const std::size_t n = h * wd;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const oracle::Mat dc(d.values().begin() + ch * n * n, d.values().begin() + (ch + 1) * n * n);
      const auto dv = oracle::matvec(dc, channel(x, ch), n, n);
      for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(dv[i], direct[ch * n + i], 1e-10);
    }
  }
}

// Property: <W x M, z> = <x, W^T z M^T>.
TEST(Holistic, AdjointIdentityProperty) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto w = rand_t({2, 4, 4}, rng), m = rand_t({2, 3, 3}, rng), x = rand_t({2, 4, 3}, rng),
               z = rand_t({2, 4, 3}, rng);
    Graph<double> g;
    auto wv = g.constant(w), mv = g.constant(m);
    const auto fwd = apply_decomposed(wv, g.constant(x), mv).value();
    const auto adj = apply_adjoint(wv, g.constant(z), mv).value();
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      lhs += fwd[i] * z[i];
      rhs += x[i] * adj[i];
    }
    ASSERT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(Normalize, ThreeFourFive) {
  const auto n = l2_normalize(Tensor<double>({1, 1, 2}, {3, 4}));
  EXPECT_NEAR(n[0], 0.6, 1e-15);
  EXPECT_NEAR(n[1], 0.8, 1e-15);
}

TEST(Normalize, Idempotent) {
  std::mt19937_64 rng(6);
  const auto once = l2_normalize(rand_t({3, 4, 4}, rng));
  const auto twice = l2_normalize(once);
  EXPECT_LE(max_abs_diff(once, twice), 1e-12);
}

TEST(Normalize, UnitFrobeniusPerChannel) {
  std::mt19937_64 rng(7);
  const auto n = l2_normalize(rand_t({3, 4, 4}, rng, -5, 5));
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double s = 0;
    for (double v : channel(n, ch)) s += v * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
  }
}

TEST(Normalize, ZeroChannelStaysFinite) {
  const auto n = l2_normalize(Tensor<double>({2, 2, 2}, {0, 0, 0, 0, 1, 0, 0, 0}));
  for (double v : n.values()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(n[4], 1.0);
}

TEST(InitFactors, ConstantImage) {
  const auto f = init_factors(Tensor<double>({1, 2, 2}, 1.0));
  for (double v : f.m.values()) EXPECT_NEAR(v, 0.5, 1e-15);
  for (double v : f.w.values()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(InitFactors, OrthogonalRowsGiveDiagonalGram) {
  // Rows [1, 1, 0] and [1, -1, 0] are orthogonal, so the h x h Gram matrix is diagonal.
  const auto f = gram_factors(Tensor<double>({1, 2, 3}, {1, 1, 0, 1, -1, 0}));
  EXPECT_EQ(f.w.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(f.w[1], 0.0);
  EXPECT_EQ(f.w[2], 0.0);
  EXPECT_EQ(f.w[0], 2.0);
  EXPECT_EQ(f.w[3], 2.0);
}

TEST(InitFactors, SymmetricPsdAndUnitNorm) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto y = rand_t({2, 5, 4}, rng, 0, 1);
    const auto raw = gram_factors(y);
    const auto f = init_factors(y);
    ASSERT_EQ(f.w.shape(), (Shape{2, 5, 5}));
    ASSERT_EQ(f.m.shape(), (Shape{2, 4, 4}));
    for (auto* t : {&raw.w, &raw.m}) {
      const std::size_t n = t->dim(1);
      for (std::size_t ch = 0; ch < 2; ++ch) {
        const auto a = channel(*t, ch);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(a[i * n + j], a[j * n + i], 1e-12);
        for (double ev : oracle::sym_eigenvalues(a, n)) EXPECT_GE(ev, -1e-10);
      }
    }
    for (auto* t : {&f.w, &f.m})
      for (std::size_t ch = 0; ch < 2; ++ch) {
        double s = 0;
        for (double v : channel(*t, ch)) s += v * v;
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
  }
}

TEST(Synthesize, VanishingBlurWithoutNoiseIsIdentity) {
  std::mt19937_64 rng(9);
  const auto x = rand_t({1, 8, 8}, rng, 0, 1);
  SyntheticDegradation d;
  d.kind = GaussianBlur{1e-9};
  d.noise_sigma = 0;
  EXPECT_LE(max_abs_diff(synthesize(x, d), x), 1e-15);
}

TEST(Synthesize, NoiseVarianceMatchesSigma) {
  const Tensor<double> x({1, 128, 128}, 0.5);
  SyntheticDegradation d;
  d.kind = GaussianBlur{1e-9};
  d.noise_sigma = 0.1;
  d.seed = 3;
  const auto y = synthesize_unclipped(x, d);
  double s = 0, ss = 0;
  for (double v : y.values()) {
    s += v - 0.5;
    ss += (v - 0.5) * (v - 0.5);
  }
  const double n = double(y.size());
  const double var = ss / n - (s / n) * (s / n);
  EXPECT_NEAR(var, 0.01, 0.05 * 0.01);
}

TEST(Synthesize, SeedDeterminesOutput) {
  std::mt19937_64 rng(10);
  const auto x = rand_t({1, 16, 16}, rng, 0, 1);
  for (const char* spec : {"blur:1.5@0.05", "illum:0.4:0.3@0.02", "streaks:0.2:0.5@0.05"}) {
    auto d = parse_degradation(spec);
    d.seed = 77;
    EXPECT_EQ(synthesize(x, d), synthesize(x, d)) << spec;
    auto e = d;
    e.seed = 78;
    EXPECT_NE(synthesize(x, d), synthesize(x, e)) << spec;
  }
}

// Property: every kind followed by clipping stays inside [0, 1].
TEST(Synthesize, OutputStaysInUnitRange) {
  std::mt19937_64 rng(11);
  for (const char* spec : {"blur:2.5@0.3", "illum:1.8:0.9@0.2", "streaks:0.8:1.0@0.4"})
    for (int trial = 0; trial < 5; ++trial) {
      auto d = parse_degradation(spec);
      d.seed = rng();
      const auto y = synthesize(rand_t({3, 8, 12}, rng, 0, 1), d);
      for (double v : y.values()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
}

TEST(Synthesize, SpecTextRoundTrips) {
  for (const char* spec : {"blur:1.5@0.05", "illum:0.4:0.3@0", "streaks:0.1:0.5@0.25"}) {
    const auto d = parse_degradation(spec);
    const auto back = parse_degradation(to_string(d));
    EXPECT_EQ(to_string(back), to_string(d));
    EXPECT_EQ(back.noise_sigma, d.noise_sigma);
  }
  EXPECT_THROW(parse_degradation("fog:0.3@0.1"), FormatError);
  EXPECT_THROW(parse_degradation("blur:1@1.5"), FormatError);
}
