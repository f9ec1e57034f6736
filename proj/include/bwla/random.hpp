#pragma once

// Counter-based SplitMix64 stream. Value k of stream (seed, key) is
// mix(seed + (k + 1) * 0x9E3779B97F4A7C15 ^ key-tweak); no hidden state beyond
// the counter, so any draw can be reproduced from (seed, key, counter).

#include <cmath>
#include <cstdint>
#include <numbers>

#include "bwla/numerics.hpp"

namespace bwla {

class SplitMix64 {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit SplitMix64(std::uint64_t seed, std::uint64_t key = 0) noexcept
      : base_(seed ^ mix(key + 0xD1B54A32D192ED03ULL)) {}

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() noexcept { return mix(base_ + (++counter_) * kGolden); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) noexcept {
    // Lemire-style multiply-shift; bias is < 2^-64 * bound, irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
  }

  /// Standard normal by Box-Muller (one value per call, cached pair discarded
  /// for simpler reproducibility).
  double gaussian() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double sign() noexcept { return (next_u64() >> 63) ? 1.0 : -1.0; }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t base_;
  std::uint64_t counter_ = 0;
};

inline Matrix gaussian_matrix(SplitMix64& rng, Index rows, Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = scale * rng.gaussian();
  return m;
}

inline Vector gaussian_vector(SplitMix64& rng, Index n, double scale = 1.0) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = scale * rng.gaussian();
  return v;
}

/// Haar-distributed orthogonal matrix: Q factor of a Gaussian matrix with the
/// diagonal of R made positive.
inline Matrix random_orthogonal(SplitMix64& rng, Index n) {
  Matrix g = gaussian_matrix(rng, n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

/// Orthogonal matrix at bounded distance from I: Cayley transform of theta/2
/// times a normalized random skew-symmetric generator.
inline Matrix random_rotation_near_identity(SplitMix64& rng, Index n, double theta) {
  Matrix g = gaussian_matrix(rng, n, n);
  Matrix k = (g - g.transpose()) / std::sqrt(2.0 * static_cast<double>(n));
  Matrix a = 0.5 * theta * k;
  Matrix id = Matrix::Identity(n, n);
  return (id - a).partialPivLu().solve(id + a);
}

}  // namespace bwla
