#pragma once

// Per-token asymmetric activation quantization and tail diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bwla/numerics.hpp"

namespace bwla {

struct QuantizedActivations {
  std::vector<std::uint8_t> codes;  // in [0, 2^bits - 1]
  double scale = 1.0;
  std::int32_t zero_point = 0;
  int bits = 8;

  std::int32_t max_code() const { return (1 << bits) - 1; }
};

/// Round half away from zero.
inline double round_half_away(double v) { return std::round(v); }

/// s = (max - min)/(2^b - 1), z = round(-min/s), code = clamp(round(x/s) + z).
/// A constant token c uses s = |c| (s = 1 for c = 0) so it is reproduced
/// exactly. z is kept unclamped: clamping it would break |x - deq| <= s/2
/// for tokens whose range excludes zero.
inline QuantizedActivations quantize_token(const Vector& x, int bits) {
  if (bits < 2 || bits > 8) {
    throw std::invalid_argument("quantize_token: bits=" + std::to_string(bits) +
                                " outside [2, 8]");
  }
  require_finite(x, "quantize_token");
  QuantizedActivations q;
  q.bits = bits;
  q.codes.resize(static_cast<std::size_t>(x.size()));
  if (x.size() == 0) return q;
  const double lo = x.minCoeff();
  const double hi = x.maxCoeff();
  const int qmax = q.max_code();
  if (hi > lo) {
    q.scale = (hi - lo) / qmax;
  } else {
    q.scale = lo == 0.0 ? 1.0 : std::abs(lo);
  }
  q.zero_point = static_cast<std::int32_t>(round_half_away(-lo / q.scale));
  for (Index j = 0; j < x.size(); ++j) {
    const double code = round_half_away(x(j) / q.scale) + q.zero_point;
    q.codes[static_cast<std::size_t>(j)] =
        static_cast<std::uint8_t>(std::clamp(code, 0.0, static_cast<double>(qmax)));
  }
  return q;
}

inline Vector dequantize_token(const QuantizedActivations& q) {
  Vector out(static_cast<Index>(q.codes.size()));
  for (std::size_t j = 0; j < q.codes.size(); ++j) {
    out(static_cast<Index>(j)) = q.scale * (static_cast<double>(q.codes[j]) - q.zero_point);
  }
  return out;
}

struct TailStats {
  double kurtosis = 0.0;  // excess
  double max_over_rms = 0.0;
  double quantile_99_over_rms = 0.0;
};

/// Linear-interpolated quantile of sorted data (the "type 7" rule).
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline TailStats tail_stats(const Vector& x) {
  if (x.size() < 4) throw std::invalid_argument("tail_stats: need at least 4 entries");
  const double n = static_cast<double>(x.size());
  const double mean = x.mean();
  double m2 = 0.0, m4 = 0.0;
  for (Index j = 0; j < x.size(); ++j) {
    const double d = x(j) - mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m4 /= n;
  if (!(m2 > 0.0)) throw std::invalid_argument("tail_stats: zero variance");
  const double rms = std::sqrt(x.squaredNorm() / n);
  std::vector<double> mags(static_cast<std::size_t>(x.size()));
  for (Index j = 0; j < x.size(); ++j) mags[static_cast<std::size_t>(j)] = std::abs(x(j));
  std::sort(mags.begin(), mags.end());
  return {m4 / (m2 * m2) - 3.0, mags.back() / rms, sorted_quantile(mags, 0.99) / rms};
}

}  // namespace bwla
