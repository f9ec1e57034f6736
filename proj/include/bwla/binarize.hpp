#pragma once

// Per-channel 1-bit weights: W_deq = sign · alpha + beta, signs packed 64 per
// word (bit j%64 of word j/64 within a row, 1 = +1, 0 = -1).

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bwla/numerics.hpp"

namespace bwla {

enum class Axis : std::uint8_t { row = 0, column = 1 };

inline const char* to_string(Axis a) { return a == Axis::row ? "row" : "column"; }

inline Axis axis_from_string(const std::string& s) {
  if (s == "row") return Axis::row;
  if (s == "column") return Axis::column;
  throw std::invalid_argument("unknown binarization axis '" + s + "'");
}

class PackedSigns {
 public:
  PackedSigns() = default;
  PackedSigns(Index rows, Index cols)
      : rows_(rows), cols_(cols), words_per_row_((cols + 63) / 64),
        words_(static_cast<std::size_t>(rows * ((cols + 63) / 64)), 0) {}

  Index rows() const noexcept { return rows_; }
  Index cols() const noexcept { return cols_; }
  Index words_per_row() const noexcept { return words_per_row_; }

  bool positive(Index i, Index j) const {
    return (row_words(i)[static_cast<std::size_t>(j >> 6)] >> (j & 63)) & 1ULL;
  }
  double sign(Index i, Index j) const { return positive(i, j) ? 1.0 : -1.0; }

  void set(Index i, Index j, bool is_positive) {
    std::uint64_t& w = words_[static_cast<std::size_t>(i * words_per_row_ + (j >> 6))];
    const std::uint64_t bit = 1ULL << (j & 63);
    w = is_positive ? (w | bit) : (w & ~bit);
  }

  std::span<const std::uint64_t> row_words(Index i) const {
    return {words_.data() + i * words_per_row_, static_cast<std::size_t>(words_per_row_)};
  }

  /// Number of +1 entries in row i (tail bits are always zero).
  Index positives_in_row(Index i) const {
    Index total = 0;
    for (std::uint64_t w : row_words(i)) total += std::popcount(w);
    return total;
  }

  Matrix to_matrix() const {
    Matrix m(rows_, cols_);
    for (Index i = 0; i < rows_; ++i)
      for (Index j = 0; j < cols_; ++j) m(i, j) = sign(i, j);
    return m;
  }

  static PackedSigns from_matrix(const Matrix& s) {
    PackedSigns p(s.rows(), s.cols());
    for (Index i = 0; i < s.rows(); ++i)
      for (Index j = 0; j < s.cols(); ++j) p.set(i, j, s(i, j) > 0);
    return p;
  }

  /// Contiguous bitstream of ⌈rows·cols/8⌉ bytes; entry (i, j) is bit
  /// (i·cols + j), least-significant bit first within each byte.
  std::vector<std::uint8_t> to_bitstream() const {
    const std::size_t total = static_cast<std::size_t>(rows_ * cols_);
    std::vector<std::uint8_t> out((total + 7) / 8, 0);
    for (Index i = 0; i < rows_; ++i) {
      for (Index j = 0; j < cols_; ++j) {
        if (positive(i, j)) {
          const std::size_t bit = static_cast<std::size_t>(i * cols_ + j);
          out[bit >> 3] |= static_cast<std::uint8_t>(1u << (bit & 7));
        }
      }
    }
    return out;
  }

  static PackedSigns from_bitstream(Index rows, Index cols, std::span<const std::uint8_t> bytes) {
    const std::size_t total = static_cast<std::size_t>(rows * cols);
    if (bytes.size() != (total + 7) / 8) {
      throw std::invalid_argument("PackedSigns: bitstream has " + std::to_string(bytes.size()) +
                                  " bytes, expected " + std::to_string((total + 7) / 8));
    }
    PackedSigns p(rows, cols);
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < cols; ++j) {
        const std::size_t bit = static_cast<std::size_t>(i * cols + j);
        p.set(i, j, (bytes[bit >> 3] >> (bit & 7)) & 1u);
      }
    }
    return p;
  }

  friend bool operator==(const PackedSigns&, const PackedSigns&) = default;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  Index words_per_row_ = 0;
  std::vector<std::uint64_t> words_;
};

struct BinarizedWeights {
  PackedSigns signs;
  Vector alpha;  // per-channel scale δ
  Vector beta;   // per-channel offset μ
  Axis axis = Axis::row;

  Index rows() const { return signs.rows(); }
  Index cols() const { return signs.cols(); }
};

/// μ = channel mean, δ = mean |x - μ|, sign(x - μ) with sign(0) = -1.
inline BinarizedWeights binarize(const Matrix& x, Axis axis = Axis::row) {
  require_finite(x, "binarize");
  BinarizedWeights bw{PackedSigns(x.rows(), x.cols()), {}, {}, axis};
  const Index channels = axis == Axis::row ? x.rows() : x.cols();
  bw.alpha.resize(channels);
  bw.beta.resize(channels);
  for (Index ch = 0; ch < channels; ++ch) {
    const Vector v = axis == Axis::row ? Vector(x.row(ch).transpose()) : Vector(x.col(ch));
    const double mu = v.mean();
    const double delta = (v.array() - mu).abs().mean();
    bw.beta(ch) = mu;
    bw.alpha(ch) = delta;
    for (Index t = 0; t < v.size(); ++t) {
      const bool pos = v(t) - mu > 0.0;
      if (axis == Axis::row) bw.signs.set(ch, t, pos);
      else bw.signs.set(t, ch, pos);
    }
  }
  return bw;
}

inline Matrix dequantize(const BinarizedWeights& bw) {
  Matrix out(bw.rows(), bw.cols());
  for (Index i = 0; i < bw.rows(); ++i) {
    for (Index j = 0; j < bw.cols(); ++j) {
      const Index ch = bw.axis == Axis::row ? i : j;
      out(i, j) = bw.signs.sign(i, j) * bw.alpha(ch) + bw.beta(ch);
    }
  }
  return out;
}

struct ScaleError {
  double alpha_star = 0.0;  // mean magnitude
  double error = 0.0;       // Σ (|w_j| - ā)² = m · Var(|w_j|)
};

/// Optimal shared scale for ŵ = α·sign(w) and its squared error.
inline ScaleError optimal_scale_error(std::span<const double> row) {
  if (row.empty()) return {};
  double mean = 0.0;
  for (double v : row) mean += std::abs(v);
  mean /= static_cast<double>(row.size());
  double err = 0.0;
  for (double v : row) {
    const double d = std::abs(v) - mean;
    err += d * d;
  }
  return {mean, err};
}

/// Mean squared dequantization error over all entries.
inline double binarization_mse(const Matrix& x, Axis axis = Axis::row) {
  if (x.size() == 0) return 0.0;
  return (dequantize(binarize(x, axis)) - x).squaredNorm() / static_cast<double>(x.size());
}

/// Bits per weight: (n·m + scale_bits · side parameters) / (n·m). Side
/// parameters are alpha and beta (2 per channel), both Kronecker factors, the
/// residual factors, and any extra per-row parameters the caller counts.
struct BitBudget {
  Index rows = 0;
  Index cols = 0;
  Axis axis = Axis::row;
  Index kron_n1 = 0;  // 0 when no rotation
  Index kron_n2 = 0;
  Index residual_rank = 0;
  Index extra_params = 0;
  double scale_bits = 16.0;
};

inline double effective_bits(const BitBudget& b) {
  const double weights = static_cast<double>(b.rows) * static_cast<double>(b.cols);
  if (weights == 0) return 0.0;
  const Index channels = b.axis == Axis::row ? b.rows : b.cols;
  const Index side = 2 * channels + b.kron_n1 * b.kron_n1 + b.kron_n2 * b.kron_n2 +
                     b.residual_rank * (b.rows + b.cols) + b.extra_params;
  return (weights + b.scale_bits * static_cast<double>(side)) / weights;
}

/// Stored bytes of a binarized weight matrix: ⌈n·m/8⌉ sign bytes plus f32
/// alpha and beta.
inline std::size_t packed_weight_bytes(const BinarizedWeights& bw) {
  const std::size_t bits = static_cast<std::size_t>(bw.rows() * bw.cols());
  return (bits + 7) / 8 + sizeof(float) * static_cast<std::size_t>(bw.alpha.size() + bw.beta.size());
}

}  // namespace bwla
