#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "pgt/physics.hpp"
#include "pgt/rng.hpp"

using namespace pgt;
using namespace pgt::physics;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<Coordinates> random_tokens(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = make_stream(seed, "test");
  std::vector<Coordinates> out(n);
  for (auto& c : out) {
    c.x.resize(d);
    for (double& v : c.x) v = uniform(rng, 0.0, 1.0);
    c.t = uniform(rng, 0.0, 1.0);
  }
  return out;
}

Tensor random_logits(std::size_t n, std::uint64_t seed) {
  Rng rng = make_stream(seed, "logits");
  Tensor t({n, n});
  for (double& v : t.data()) v = uniform(rng, -2.0, 2.0);
  return t;
}

}  // namespace

TEST(GammaParabolic, ZeroSeparationUnitTime) {
  const std::vector<Coordinates> tokens{{{0.3}, 0.0}, {{0.3}, 1.0}};
  const GammaBias g = gamma_parabolic(tokens, 0.25, 1);
  EXPECT_NEAR(g.matrix(2, 1), -0.5 * std::log(kPi), 1e-14);
  EXPECT_NEAR(g.matrix(2, 1), -0.57236, 1e-5);
}

TEST(GammaParabolic, FutureTokenIsMasked) {
  const std::vector<Coordinates> tokens{{{0.0}, 0.5}, {{0.2}, 0.4}};
  const GammaBias g = gamma_parabolic(tokens, 0.1, 1);
  EXPECT_TRUE(g.is_masked(2, 1));   // dt = -0.1
  EXPECT_FALSE(g.is_masked(1, 2));  // dt = +0.1
}

TEST(GammaParabolic, EqualTimesLeaveOnlySelfAndGlobal) {
  const std::vector<Coordinates> tokens{{{0.4}, 0.2}, {{0.4}, 0.2}};
  const GammaBias g = gamma_parabolic(tokens, 0.1, 1);
  EXPECT_TRUE(g.is_masked(1, 2));
  EXPECT_TRUE(g.is_masked(2, 1));
  for (std::size_t i = 1; i <= 2; ++i) {
    EXPECT_FALSE(g.is_masked(i, i));
    EXPECT_EQ(g.matrix(i, i), 0.0);
    EXPECT_FALSE(g.is_masked(i, 0));
  }
}

TEST(GammaParabolic, MatchesClosedFormAndMasksExactlyNonPast) {
  const auto tokens = random_tokens(12, 2, 1);
  const double alpha = 0.05;
  const GammaBias g = gamma_parabolic(tokens, alpha, 2);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      if (i == j) continue;
      const double dt = tokens[i].t - tokens[j].t;
      ASSERT_EQ(g.is_masked(i + 1, j + 1), dt <= 0.0);
      if (dt <= 0.0) continue;
      const double dx = tokens[i].x[0] - tokens[j].x[0], dy = tokens[i].x[1] - tokens[j].x[1];
      const double expected = -(dx * dx + dy * dy) / (4 * alpha * dt) - std::log(4 * kPi * alpha * dt);
      EXPECT_NEAR(g.matrix(i + 1, j + 1), std::clamp(expected, -30.0, 30.0), 1e-12);
    }
  }
}

TEST(GammaParabolic, GlobalRowAndColumnAreZeroAndUnmasked) {
  const GammaBias g = gamma_parabolic(random_tokens(6, 1, 2), 0.1, 1);
  for (std::size_t k = 0; k < g.size(); ++k) {
    EXPECT_EQ(g.matrix(0, k), 0.0);
    EXPECT_EQ(g.matrix(k, 0), 0.0);
    EXPECT_FALSE(g.is_masked(0, k));
    EXPECT_FALSE(g.is_masked(k, 0));
  }
}

TEST(GammaParabolic, EntriesAreClamped) {
  const std::vector<Coordinates> tokens{{{0.0}, 0.0}, {{0.0}, 1e-30}, {{5.0}, 1e-3}};
  const GammaBias g = gamma_parabolic(tokens, 0.1, 1);
  EXPECT_EQ(g.matrix(2, 1), 30.0);
  EXPECT_EQ(g.matrix(3, 1), -30.0);
}

TEST(GammaParabolic, RejectsBadInputs) {
  const auto tokens = random_tokens(3, 1, 3);
  EXPECT_THROW(gamma_parabolic(tokens, 0.0, 1), InputError);
  auto bad = tokens;
  bad[1].t = std::nan("");
  EXPECT_THROW(gamma_parabolic(bad, 0.1, 1), InputError);
  EXPECT_THROW(gamma_parabolic(std::vector<Coordinates>{}, 0.1, 1), InputError);
  EXPECT_THROW(gamma_parabolic(tokens, 0.1, 2), InputError);
}

TEST(GammaParabolic, HeatKernelIntegratesToOne) {
  for (double alpha : {0.01, 0.1, 1.0}) {
    for (double dt : {0.05, 0.5, 2.0}) {
      const double sigma = std::sqrt(2 * alpha * dt);
      const std::size_t n = 40001;
      const double a = -20 * sigma, step = 40 * sigma / (n - 1);
      double mass = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double x = a + step * k;
        const double w = (k == 0 || k + 1 == n) ? 0.5 : 1.0;
        mass += w * std::exp(parabolic_log_kernel(x * x, dt, alpha, 1));
      }
      EXPECT_NEAR(mass * step, 1.0, 1e-6) << "alpha " << alpha << " dt " << dt;
    }
  }
}

TEST(GammaParabolic, StrictlyDecreasingInDistance) {
  for (double dt : {0.05, 0.5}) {
    double previous = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= 100; ++k) {
      const std::vector<Coordinates> tokens{{{0.0}, 0.0}, {{0.004 * k}, dt}};
      const double v = gamma_parabolic(tokens, 0.1, 1).matrix(2, 1);
      EXPECT_LT(v, previous);
      previous = v;
    }
  }
}

TEST(GammaHyperbolic, InsideConeCarriesTheWaveKernel) {
  const std::vector<Coordinates> tokens{{{0.0}, 0.0}, {{0.5}, 1.0}};
  const GammaBias g = gamma_hyperbolic(tokens, 1.0, 1);
  EXPECT_NEAR(g.matrix(2, 1), -std::log(2.0), 1e-15);
  EXPECT_NEAR(g.matrix(2, 1), -0.6931, 1e-4);
}

TEST(GammaHyperbolic, OutsideConeAndNonPastAreMasked) {
  const std::vector<Coordinates> tokens{{{0.0}, 0.0}, {{2.0}, 1.0}, {{0.0}, 0.0}};
  const GammaBias g = gamma_hyperbolic(tokens, 1.0, 1);
  EXPECT_TRUE(g.is_masked(2, 1));
  EXPECT_TRUE(g.is_masked(1, 2));
  EXPECT_TRUE(g.is_masked(1, 3));
  EXPECT_TRUE(g.is_masked(3, 1));
}

TEST(GammaHyperbolic, HigherDimensionsAreUnsupported) {
  EXPECT_THROW(gamma_hyperbolic(random_tokens(3, 2, 4), 1.0, 2), UnsupportedError);
  EXPECT_THROW(gamma_hyperbolic(random_tokens(3, 1, 4), -1.0, 1), InputError);
}

TEST(GammaElliptic, UnitAndEDistances) {
  const std::vector<Coordinates> tokens{{{0.0, 0.0}, 0.0}, {{1.0, 0.0}, 0.7}, {{0.0, std::exp(1.0)}, 0.2}};
  const GammaBias g = gamma_elliptic(tokens, 2);
  EXPECT_NEAR(g.matrix(1, 2), 0.0, 1e-5);
  EXPECT_NEAR(g.matrix(1, 3), -1.0, 1e-5);
}

TEST(GammaElliptic, SymmetricAndUnmasked) {
  const GammaBias g = gamma_elliptic(random_tokens(10, 3, 5), 3);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j) {
      EXPECT_EQ(g.matrix(i, j), g.matrix(j, i));
      EXPECT_FALSE(g.is_masked(i, j));
    }
  }
}

TEST(GammaElliptic, DiagonalUsesRegularizedSelfDistance) {
  const GammaBias g = gamma_elliptic(random_tokens(3, 1, 6), 1);
  EXPECT_NEAR(g.matrix(1, 1), -std::log(1e-6), 1e-12);
}

TEST(BuildGamma, DispatchesAndValidatesFamily) {
  const auto tokens = random_tokens(5, 1, 7);
  EXPECT_EQ(build_gamma(tokens, PdeFamily::parabolic(0.1, 1)).matrix, gamma_parabolic(tokens, 0.1, 1).matrix);
  EXPECT_EQ(build_gamma(tokens, PdeFamily::hyperbolic(0.5, 1)).matrix, gamma_hyperbolic(tokens, 0.5, 1).matrix);
  EXPECT_EQ(build_gamma(tokens, PdeFamily::elliptic(1)).matrix, gamma_elliptic(tokens, 1).matrix);
  EXPECT_THROW(build_gamma(tokens, PdeFamily::parabolic(-1.0, 1)), InputError);
  EXPECT_THROW(build_gamma(tokens, PdeFamily::hyperbolic(0.0, 1)), InputError);
}

TEST(GammaBias, NoRowIsEntirelyMasked) {
  const auto tokens = random_tokens(20, 1, 8);
  for (const GammaBias& g : {gamma_parabolic(tokens, 0.1, 1), gamma_hyperbolic(tokens, 0.2, 1)}) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      std::size_t open = 0;
      for (std::size_t j = 0; j < g.size(); ++j) open += g.is_masked(i, j) ? 0 : 1;
      EXPECT_GE(open, 2u);
    }
  }
}

TEST(GammaBias, RowShiftLeavesSoftmaxUnchanged) {
  const auto tokens = random_tokens(8, 1, 9);
  const GammaBias g = gamma_parabolic(tokens, 0.1, 1);
  GammaBias shifted = g;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!g.is_masked(i, j)) shifted.matrix(i, j) += 0.75 * static_cast<double>(i);
    }
  }
  const Tensor logits = random_logits(9, 1);
  ad::Tape tape;
  const Tensor a = ad::softmax_rows(ad::add(tape.constant(logits), tape.constant(g.matrix))).value();
  const Tensor b = ad::softmax_rows(ad::add(tape.constant(logits), tape.constant(shifted.matrix))).value();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
}

TEST(HeatResidual, ExactSolutionIsBelowTruncationBound) {
  const double nu = 0.1, h = 1e-3;
  Field u = [&](const Coordinates& p) { return heat_solution_1d(p, nu, 1); };
  Rng rng = make_stream(10, "test");
  for (int k = 0; k < 1000; ++k) {
    const Coordinates p{{uniform(rng, h, 1 - h)}, uniform(rng, h, 1 - h)};
    ASSERT_LT(std::abs(heat_residual_1d(u, p, nu, h)), 1e-5);
    ASSERT_LT(std::abs(heat_residual_1d(u, p, nu, h)), 10 * h * h);
  }
}

TEST(HeatResidual, ConstantAndLinearInTime) {
  Field one = [](const Coordinates&) { return 1.0; };
  Field t = [](const Coordinates& p) { return p.t; };
  const Coordinates p{{0.4}, 0.3};
  EXPECT_EQ(heat_residual_1d(one, p, 0.1, 1e-3), 0.0);
  EXPECT_NEAR(heat_residual_1d(t, p, 0.1, 1e-3), 1.0, 1e-9);
}

TEST(HeatResidual, OneSidedStencilsNearTheBoundary) {
  const double nu = 0.1, h = 1e-3;
  const Box box{{0.0, 0.0}, {1.0, 1.0}};
  Field u = [&](const Coordinates& p) {
    if (p.x[0] < 0 || p.x[0] > 1 || p.t < 0 || p.t > 1) ADD_FAILURE() << "stencil left the domain";
    return heat_solution_1d(p, nu, 1);
  };
  for (const Coordinates& p : {Coordinates{{0.0}, 0.0}, Coordinates{{1.0}, 1.0}, Coordinates{{0.0005}, 0.9995}}) {
    EXPECT_LT(std::abs(heat_residual_1d(u, p, nu, h, box)), 10 * h * h);
  }
  EXPECT_THROW(heat_residual_1d(u, Coordinates{{0.5}, 0.5}, nu, 0.0), InputError);
}

TEST(NsResidual, TaylorGreenIsAnExactSolution) {
  const double nu = 0.01, h = 1e-3;
  NsFields f{[&](const Coordinates& p) { return taylor_green(p, nu)[0]; },
             [&](const Coordinates& p) { return taylor_green(p, nu)[1]; },
             [&](const Coordinates& p) { return taylor_green(p, nu)[2]; }};
  Rng rng = make_stream(11, "test");
  for (int k = 0; k < 1000; ++k) {
    const Coordinates p{{uniform(rng, h, 2 * kPi - h), uniform(rng, h, 2 * kPi - h)}, uniform(rng, h, 1 - h)};
    for (double r : ns_residual_2d(f, p, nu, h)) {
      ASSERT_LT(std::abs(r), 1e-4);
      ASSERT_LT(std::abs(r), 10 * h * h);
    }
  }
}

TEST(NsResidual, ZeroFieldsAndDivergenceFreeFlow) {
  Field zero = [](const Coordinates&) { return 0.0; };
  const Coordinates p{{0.3, -0.7}, 0.2};
  for (double r : ns_residual_2d({zero, zero, zero}, p, 0.01, 1e-3)) EXPECT_EQ(r, 0.0);
  NsFields strain{[](const Coordinates& q) { return q.x[0]; }, [](const Coordinates& q) { return -q.x[1]; }, zero};
  EXPECT_NEAR(ns_residual_2d(strain, p, 0.01, 1e-3)[2], 0.0, 1e-9);
}

TEST(HeatSolution, ReferenceValues) {
  EXPECT_DOUBLE_EQ(heat_solution_1d({{0.5}, 0.0}, 0.1, 1), 1.0);
  EXPECT_EQ(heat_solution_1d({{0.0}, 0.7}, 0.1, 1), 0.0);
  EXPECT_NEAR(heat_solution_1d({{0.5}, 1.0}, 0.1, 1), std::exp(-0.1 * kPi * kPi), 1e-15);
  EXPECT_NEAR(heat_solution_1d({{0.5}, 1.0}, 0.1, 1), 0.372708, 1e-6);
}

TEST(VanillaLimit, LargeDiffusivityRecoversPlainAttention) {
  const auto tokens = random_tokens(8, 1, 12);
  const Tensor logits = random_logits(9, 2);
  EXPECT_LT(vanilla_limit_check(tokens, 1e9, 1, logits), 1e-3);
  EXPECT_GT(vanilla_limit_check(tokens, 0.1, 1, logits), 1e-2);
  double previous = 1.0;
  for (double alpha : {1e3, 1e6, 1e9}) {
    const double dev = vanilla_limit_check(tokens, alpha, 1, logits);
    EXPECT_LT(dev, previous);
    previous = dev;
  }
}

TEST(VanillaLimit, ConstantBiasGivesZeroDeviation) {
  const std::size_t n = 9;
  GammaBias constant{Tensor({n, n}, 3.5), std::vector<std::uint8_t>(n * n, 0)};
  // Zero up to the rounding of (x + c) - (max + c).
  EXPECT_LT(attention_bias_deviation(random_logits(n, 3), constant), 1e-15);
  // Logits and shift on a dyadic grid add exactly, so the deviation vanishes bit-for-bit.
  Tensor dyadic({n, n});
  for (std::size_t k = 0; k < dyadic.size(); ++k) dyadic[k] = static_cast<double>(k % 7) * 0.25;
  EXPECT_EQ(attention_bias_deviation(dyadic, constant), 0.0);
}
