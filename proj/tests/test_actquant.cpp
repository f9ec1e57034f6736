#include <gtest/gtest.h>

#include <limits>

#include "bwla/actquant.hpp"
#include "bwla/kronecker.hpp"
#include "bwla/synth.hpp"
#include "test_util.hpp"

using namespace bwla;

TEST(QuantizeToken, GridAlignedIsExact) {
  Vector x(16);
  for (Index j = 0; j < 16; ++j) x(j) = static_cast<double>(j);
  const QuantizedActivations q = quantize_token(x, 4);
  EXPECT_EQ(q.scale, 1.0);
  EXPECT_EQ(q.zero_point, 0);
  EXPECT_EQ(dequantize_token(q), x);
}

TEST(QuantizeToken, ConstantVectorIsExact) {
  for (double c : {0.0, 3.25, -7.5}) {
    const Vector x = Vector::Constant(9, c);
    const QuantizedActivations q = quantize_token(x, 6);
    for (auto code : q.codes) EXPECT_EQ(code, q.codes[0]);
    EXPECT_EQ(dequantize_token(q), x);
  }
  EXPECT_EQ(quantize_token(Vector::Zero(3), 8).scale, 1.0);
}

TEST(QuantizeToken, ErrorWithinHalfStep) {
  SplitMix64 rng(1);
  for (int t = 0; t < 500; ++t) {
    const int bits = 2 + static_cast<int>(rng.below(7));
    Vector x = gaussian_vector(rng, 1 + static_cast<Index>(rng.below(64)), rng.uniform(0.01, 100.0));
    x.array() += rng.uniform(-50.0, 50.0);  // ranges that exclude zero
    const QuantizedActivations q = quantize_token(x, bits);
    const Vector d = dequantize_token(q);
    for (Index j = 0; j < x.size(); ++j) {
      const double ulp = std::abs(x(j)) * std::numeric_limits<double>::epsilon() * 4;
      ASSERT_LE(std::abs(x(j) - d(j)), q.scale / 2 + ulp) << "trial " << t;
      ASSERT_LE(q.codes[static_cast<std::size_t>(j)], q.max_code());
    }
  }
}

TEST(QuantizeToken, RandomSixBit) {
  SplitMix64 rng(2);
  const Vector x = gaussian_vector(rng, 128);
  const QuantizedActivations q = quantize_token(x, 6);
  EXPECT_DOUBLE_EQ(q.scale, (x.maxCoeff() - x.minCoeff()) / 63.0);
  EXPECT_LE((dequantize_token(q) - x).cwiseAbs().maxCoeff(), q.scale / 2 * (1 + 1e-12));
}

TEST(QuantizeToken, RoundsHalfAwayFromZero) {
  EXPECT_EQ(round_half_away(2.5), 3.0);
  EXPECT_EQ(round_half_away(-2.5), -3.0);
  EXPECT_EQ(round_half_away(0.5), 1.0);
}

TEST(QuantizeToken, RejectsBadInput) {
  EXPECT_THROW(quantize_token(Vector::Zero(3), 1), std::invalid_argument);
  EXPECT_THROW(quantize_token(Vector::Zero(3), 9), std::invalid_argument);
  Vector x = Vector::Zero(3);
  x(1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(quantize_token(x, 4), NumericsError);
}

TEST(TailStats, GaussianKurtosisNearZero) {
  SplitMix64 rng(3);
  EXPECT_NEAR(tail_stats(gaussian_vector(rng, 100000)).kurtosis, 0.0, 0.1);
}

TEST(TailStats, UniformKurtosis) {
  SplitMix64 rng(4);
  Vector x(100000);
  for (Index j = 0; j < x.size(); ++j) x(j) = rng.uniform(-1.0, 1.0);
  EXPECT_NEAR(tail_stats(x).kurtosis, -1.2, 0.1);
}

TEST(TailStats, SingleOutlier) {
  Vector x = Vector::Ones(1000);
  x(17) = 100.0;
  const TailStats t = tail_stats(x);
  EXPECT_GT(t.max_over_rms, 10.0);
  EXPECT_TRUE(std::isfinite(t.kurtosis));
  EXPECT_NEAR(t.quantile_99_over_rms, 1.0 / std::sqrt((999.0 + 1e4) / 1000.0), 1e-12);
}

TEST(TailStats, RejectsDegenerate) {
  EXPECT_THROW(tail_stats(Vector::Ones(3)), std::invalid_argument);
  EXPECT_THROW(tail_stats(Vector::Ones(10)), std::invalid_argument);
}

TEST(TailStats, RotationSuppressesSpikes) {
  SynthSpec spec;
  spec.kind = SynthKind::heavy_tail_acts;
  spec.rows = 200;
  spec.cols = 256;
  spec.seed = 5;
  const Matrix acts = gen(spec).w;
  int suppressed = 0;
  for (Index t = 0; t < acts.rows(); ++t) {
    SplitMix64 rng(static_cast<std::uint64_t>(t), 6);
    const auto rot = KroneckerRotation::random(factor_dims(256), rng);
    const Vector x = acts.row(t).transpose();
    const Vector rx = apply_transpose_to_vec(rot, x);
    ASSERT_NEAR(rx.norm(), x.norm(), 1e-9 * x.norm());
    suppressed += tail_stats(rx).max_over_rms < tail_stats(x).max_over_rms;
  }
  EXPECT_GE(suppressed, 180);
}

// With one spike per token the max/RMS ratio is large: a rate of 0.001 at
// m = 4096 gives round(4.1) = 4 spikes of magnitude 50.
TEST(TailStats, HeavyTailGeneratorIsHeavy) {
  SynthSpec spec;
  spec.kind = SynthKind::heavy_tail_acts;
  spec.rows = 10;
  spec.cols = 4096;
  spec.spike_rate = 0.001;
  const Matrix acts = gen(spec).w;
  for (Index t = 0; t < acts.rows(); ++t) EXPECT_GT(tail_stats(acts.row(t).transpose()).max_over_rms, 20.0);
}
