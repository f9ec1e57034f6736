#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "bwla/gmm.hpp"
#include "test_util.hpp"

using namespace bwla;

namespace {

GmmParams params_1(double c, double var, double floor = 1e-12) {
  GmmParams p{Vector::Constant(1, c), Vector::Constant(1, var), Vector::Constant(1, floor)};
  return p;
}

GmmParams random_params(SplitMix64& rng, Index n) {
  GmmParams p{Vector(n), Vector(n), Vector::Constant(n, 1e-8)};
  for (Index i = 0; i < n; ++i) {
    p.center(i) = rng.uniform(0.0, 3.0);
    p.variance(i) = rng.uniform(0.05, 4.0);
  }
  return p;
}

// Mixture density evaluated directly, no log-space tricks.
double direct_nll(const Matrix& x, const GmmParams& p) {
  double total = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    const double s2 = p.variance(i), c = p.center(i);
    for (Index j = 0; j < x.cols(); ++j) {
      auto phi = [&](double mu) {
        const double d = x(i, j) - mu;
        return std::exp(-d * d / (2 * s2)) / std::sqrt(2 * std::numbers::pi * s2);
      };
      total -= std::log(0.5 * phi(c) + 0.5 * phi(-c));
    }
  }
  return total / static_cast<double>(x.size());
}

}  // namespace

TEST(Responsibilities, ZeroIsHalf) {
  const auto r = responsibilities(Matrix::Zero(1, 1), params_1(1.3, 0.7));
  EXPECT_EQ(r.positive(0, 0), 0.5);
}

TEST(Responsibilities, AtModeMatchesHandFormula) {
  const double c = 0.8, s2 = 0.5;
  Matrix x(1, 1);
  x << c;
  const auto r = responsibilities(x, params_1(c, s2));
  // Ratio of Gaussians at ±c evaluated at x = c.
  const double phi_plus = 1.0, phi_minus = std::exp(-(2 * c) * (2 * c) / (2 * s2));
  EXPECT_NEAR(r.positive(0, 0), phi_plus / (phi_plus + phi_minus), 1e-15);
  EXPECT_NEAR(r.positive(0, 0), 1.0 / (1.0 + std::exp(-2 * c * c / s2)), 1e-15);
}

TEST(Responsibilities, FarTailSaturates) {
  Matrix x(1, 2);
  x << 50.0, -50.0;
  const auto r = responsibilities(x, params_1(1.0, 1.0));
  EXPECT_NEAR(r.positive(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(r.positive(0, 1), 0.0, 1e-12);
}

TEST(Responsibilities, RangeAndRowMeans) {
  SplitMix64 rng(1);
  const Matrix x = gaussian_matrix(rng, 6, 40, 3.0);
  const GmmParams p = random_params(rng, 6);
  const auto r = responsibilities(x, p);
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      EXPECT_GE(r.positive(i, j), 0.0);
      EXPECT_LE(r.positive(i, j), 1.0);
    }
    EXPECT_NEAR(r.row_means(i), r.positive.row(i).mean(), 1e-12);
  }
}

TEST(EmUpdate, ExactFitHitsFloor) {
  Matrix x(1, 4);
  x << 2, 2, -2, -2;
  Responsibilities r{Matrix(1, 4), Vector::Constant(1, 0.5)};
  r.positive << 1, 1, 0, 0;
  const GmmParams out = em_update(x, r, params_1(0.5, 1.0, 1e-6));
  EXPECT_DOUBLE_EQ(out.center(0), 2.0);
  EXPECT_DOUBLE_EQ(out.variance(0), 1e-6);
}

TEST(EmUpdate, ZeroRowDegenerate) {
  Responsibilities r{Matrix::Constant(1, 5, 0.5), Vector::Constant(1, 0.5)};
  const GmmParams out = em_update(Matrix::Zero(1, 5), r, params_1(1.0, 1.0, 1e-6));
  EXPECT_EQ(out.center(0), 0.0);
  EXPECT_EQ(out.variance(0), 1e-6);
}

TEST(EmUpdate, RandomRowDoesNotIncreaseNll) {
  SplitMix64 rng(2);
  const Matrix x = gaussian_matrix(rng, 1, 50);
  const GmmParams p = init_params(x);
  const GmmParams q = em_update(x, responsibilities(x, p), p);
  EXPECT_LE(nll(x, q), nll(x, p) + 1e-12);
}

TEST(EmUpdate, MonotoneOverRandomPairs) {
  SplitMix64 rng(3);
  for (int t = 0; t < 200; ++t) {
    const Index n = 1 + static_cast<Index>(rng.below(5)), m = 2 + static_cast<Index>(rng.below(60));
    Matrix x = gaussian_matrix(rng, n, m, rng.uniform(0.1, 3.0));
    if (t % 2) x.array() += (x.array() > 0).cast<double>() * 1.5 - 0.75;  // some bimodal rows
    const GmmParams p = random_params(rng, n);
    const GmmParams q = em_update(x, responsibilities(x, p), p);
    ASSERT_LE(nll(x, q), nll(x, p) + 1e-12) << "trial " << t;
    q.validate();
  }
}

TEST(Nll, SingleStandardNormalAtZero) {
  EXPECT_NEAR(nll(Matrix::Zero(1, 1), params_1(0.0, 1.0)), 0.5 * std::log(2 * std::numbers::pi), 1e-15);
}

TEST(Nll, MatchesDirectDensity) {
  SplitMix64 rng(4);
  const Matrix x = gaussian_matrix(rng, 4, 9);
  const GmmParams p = random_params(rng, 4);
  EXPECT_NEAR(nll(x, p), direct_nll(x, p), 1e-12);
}

TEST(Nll, ColumnPermutationInvariant) {
  SplitMix64 rng(5);
  const Matrix x = gaussian_matrix(rng, 3, 17);
  const GmmParams p = random_params(rng, 3);
  Matrix y(3, 17);
  for (Index j = 0; j < 17; ++j) y.col(j) = x.col((j * 5 + 3) % 17);
  EXPECT_NEAR(nll(x, p), nll(y, p), 1e-14);
}

TEST(Nll, TrueParamsBeatBroadModel) {
  SplitMix64 rng(6);
  for (int t = 0; t < 100; ++t) {
    Matrix x(1, 64);
    for (Index j = 0; j < 64; ++j) x(0, j) = rng.sign() * 3.0 + 0.1 * rng.gaussian();
    ASSERT_LE(nll(x, params_1(3.0, 0.01)), nll(x, params_1(0.0, 1.0)));
  }
}

TEST(Nll, ScaleCovarianceShiftsByLogAlpha) {
  SplitMix64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const Matrix x = gaussian_matrix(rng, 3, 11);
    GmmParams p = random_params(rng, 3);
    const double alpha = rng.uniform(0.1, 10.0);
    GmmParams q = p;
    q.center *= alpha;
    q.variance *= alpha * alpha;
    ASSERT_NEAR(nll(alpha * x, q), nll(x, p) + std::log(alpha), 1e-12);
  }
}

TEST(Nll, NoOverflowOnExtremeRatio) {
  Matrix x(1, 2);
  x << 1e6, -1e6;
  EXPECT_TRUE(std::isfinite(nll(x, params_1(1e3, 1e-4))));
}

TEST(BalanceRegularizer, ClosedForms) {
  Responsibilities r{Matrix::Constant(2, 3, 0.5), Vector::Constant(2, 0.5)};
  EXPECT_EQ(balance_regularizer(r, 1.0), 0.0);
  r.row_means.setConstant(1.0);
  EXPECT_DOUBLE_EQ(balance_regularizer(r, 1.0), 0.25);
  r.row_means.setConstant(0.75);
  EXPECT_DOUBLE_EQ(balance_regularizer(r, 2.0), 0.125);
  EXPECT_THROW(balance_regularizer(r, -1.0), std::invalid_argument);
}

TEST(BalanceRegularizer, NonnegativeAndZeroOnlyWhenBalanced) {
  SplitMix64 rng(8);
  for (int t = 0; t < 100; ++t) {
    Responsibilities r{Matrix(), Vector(4)};
    for (Index i = 0; i < 4; ++i) r.row_means(i) = rng.uniform();
    const double v = balance_regularizer(r, 0.3);
    ASSERT_GE(v, 0.0);
    if (v == 0.0) {
      ASSERT_EQ(r.row_means.mean(), 0.5);
    }
  }
  Responsibilities r{Matrix(), Vector(2)};
  r.row_means << 0.2, 0.8;
  EXPECT_EQ(balance_regularizer(r, 5.0), 0.0);
}

TEST(GradEntries, VanishesAtModeAndAtZero) {
  Matrix x(1, 2);
  x << 2.0, 0.0;
  const GmmParams p = params_1(2.0, 0.01);
  const Matrix g = grad_entries(x, responsibilities(x, p), p);
  EXPECT_NEAR(g(0, 0), 0.0, 1e-12);
  EXPECT_EQ(g(0, 1), 0.0);
}

TEST(GradEntries, MatchesFiniteDifferences) {
  SplitMix64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const Index n = t == 0 ? 3 : 1 + static_cast<Index>(rng.below(4));
    const Index m = t == 0 ? 4 : 1 + static_cast<Index>(rng.below(6));
    const double scale = rng.uniform(0.2, 3.0);
    const Matrix x = gaussian_matrix(rng, n, m, scale);
    const GmmParams p = random_params(rng, n);
    const Matrix g = grad_entries(x, responsibilities(x, p), p);
    const double h = 1e-6 * scale;
    double worst = 0.0;
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < m; ++j) {
        Matrix xp = x, xm = x;
        xp(i, j) += h;
        xm(i, j) -= h;
        const double fd = (nll(xp, p) - nll(xm, p)) / (2 * h);
        worst = std::max(worst, std::abs(fd - g(i, j)) / std::max(g.cwiseAbs().maxCoeff(), 1e-12));
      }
    }
    ASSERT_LT(worst, 1e-4) << "trial " << t;
  }
}

TEST(InitParams, MagnitudeStatisticsAndFloor) {
  Matrix x(2, 4);
  x << 1, -1, 3, -3, 0, 0, 0, 0;
  const GmmParams p = init_params(x);
  EXPECT_DOUBLE_EQ(p.center(0), 2.0);
  EXPECT_DOUBLE_EQ(p.variance(0), 1.0);
  EXPECT_DOUBLE_EQ(p.floor(0), 1e-8 * 5.0);
  EXPECT_EQ(p.center(1), 0.0);
  EXPECT_GT(p.floor(1), 0.0);
  EXPECT_NO_THROW(p.validate());
}

TEST(GmmParams, ValidateRejectsViolations) {
  GmmParams p = params_1(1.0, 1.0, 0.1);
  p.variance(0) = 0.01;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = params_1(-1.0, 1.0, 0.1);
  EXPECT_THROW(p.validate(), std::invalid_argument);
  EXPECT_THROW(nll(Matrix::Zero(2, 2), params_1(1, 1)), std::invalid_argument);
}
