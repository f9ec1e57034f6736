#pragma once

// W1AX matrix-vector products on packed sign bits.
//
// The sign dot Σ_j s_ij x_j is evaluated as 2·Σ_{j: bit set} x_j - Σ_j x_j,
// where the masked sum adds activation lanes under the packed sign bits
// (AVX-512 mask registers when available, a bit loop otherwise).

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>
#include <type_traits>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

#include "bwla/actquant.hpp"
#include "bwla/binarize.hpp"
#include "bwla/kronecker.hpp"
#include "bwla/numerics.hpp"
#include "bwla/psp.hpp"
#include "bwla/random.hpp"

namespace bwla {

namespace detail {

// Packed rows as little-endian bytes (byte g holds activations 8g..8g+7).
inline std::vector<std::uint8_t> row_bytes(const PackedSigns& s) {
  const Index per_row = s.words_per_row() * 8;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(s.rows() * per_row));
  for (Index i = 0; i < s.rows(); ++i) {
    auto words = s.row_words(i);
    for (Index w = 0; w < s.words_per_row(); ++w) {
      for (int b = 0; b < 8; ++b) {
        out[static_cast<std::size_t>(i * per_row + w * 8 + b)] =
            static_cast<std::uint8_t>(words[static_cast<std::size_t>(w)] >> (8 * b));
      }
    }
  }
  return out;
}

inline void check_gemv_dims(const BinarizedWeights& bw, Index len) {
  if (len != bw.cols()) {
    throw std::invalid_argument("binary_gemv: activation length " + std::to_string(len) +
                                " != " + std::to_string(bw.cols()));
  }
}

/// Σ_{j: bit j set} x_j over one packed row. `x` is zero-padded to
/// 8·`groups` entries, so pad bits never contribute.
template <typename T>
T masked_sum(const std::uint8_t* bytes, const T* x, Index groups) {
#if defined(__AVX512F__)
  // Each 64-bit word is four 16-lane masks.
  const Index words = groups / 8;
  if constexpr (std::is_same_v<T, float>) {
    __m512 a0 = _mm512_setzero_ps(), a1 = a0, a2 = a0, a3 = a0;
    for (Index w = 0; w < words; ++w, x += 64) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes + w * 8, 8);
      a0 = _mm512_mask_add_ps(a0, static_cast<__mmask16>(bits), a0, _mm512_loadu_ps(x));
      a1 = _mm512_mask_add_ps(a1, static_cast<__mmask16>(bits >> 16), a1, _mm512_loadu_ps(x + 16));
      a2 = _mm512_mask_add_ps(a2, static_cast<__mmask16>(bits >> 32), a2, _mm512_loadu_ps(x + 32));
      a3 = _mm512_mask_add_ps(a3, static_cast<__mmask16>(bits >> 48), a3, _mm512_loadu_ps(x + 48));
    }
    return _mm512_reduce_add_ps(_mm512_add_ps(_mm512_add_ps(a0, a1), _mm512_add_ps(a2, a3)));
  } else if constexpr (std::is_same_v<T, std::int32_t>) {
    __m512i a0 = _mm512_setzero_si512(), a1 = a0, a2 = a0, a3 = a0;
    for (Index w = 0; w < words; ++w, x += 64) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes + w * 8, 8);
      a0 = _mm512_mask_add_epi32(a0, static_cast<__mmask16>(bits), a0, _mm512_loadu_si512(x));
      a1 = _mm512_mask_add_epi32(a1, static_cast<__mmask16>(bits >> 16), a1, _mm512_loadu_si512(x + 16));
      a2 = _mm512_mask_add_epi32(a2, static_cast<__mmask16>(bits >> 32), a2, _mm512_loadu_si512(x + 32));
      a3 = _mm512_mask_add_epi32(a3, static_cast<__mmask16>(bits >> 48), a3, _mm512_loadu_si512(x + 48));
    }
    return _mm512_reduce_add_epi32(_mm512_add_epi32(_mm512_add_epi32(a0, a1), _mm512_add_epi32(a2, a3)));
  } else if constexpr (std::is_same_v<T, double>) {
    __m512d a0 = _mm512_setzero_pd(), a1 = a0;
    for (Index g = 0; g + 1 < groups; g += 2, x += 16) {
      a0 = _mm512_mask_add_pd(a0, bytes[g], a0, _mm512_loadu_pd(x));
      a1 = _mm512_mask_add_pd(a1, bytes[g + 1], a1, _mm512_loadu_pd(x + 8));
    }
    return _mm512_reduce_add_pd(_mm512_add_pd(a0, a1));
  }
#endif
  T acc0{0}, acc1{0};
  for (Index g = 0; g < groups; ++g, x += 8) {
    const unsigned b = bytes[g];
    for (int k = 0; k < 8; k += 2) {
      if (b >> k & 1u) acc0 += x[k];
      if (b >> (k + 1) & 1u) acc1 += x[k + 1];
    }
  }
  return acc0 + acc1;
}

template <typename T, typename Src>
std::vector<T> padded_copy(const Src& x, Index groups) {
  std::vector<T> out(static_cast<std::size_t>(groups * 8), T{0});
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = static_cast<T>(x[j]);
  return out;
}

}  // namespace detail

/// Packed weights laid out for the kernel: row-major sign bytes plus scales
/// in the working precision.
template <typename T>
struct PackedGemv {
  Index rows = 0;
  Index cols = 0;
  Index bytes_per_row = 0;
  Axis axis = Axis::row;
  std::vector<std::uint8_t> bytes;
  std::vector<T> alpha;
  std::vector<T> beta;
  std::vector<std::int32_t> positives;  // popcount per row

  static PackedGemv from(const BinarizedWeights& bw) {
    PackedGemv g;
    g.rows = bw.rows();
    g.cols = bw.cols();
    g.bytes_per_row = bw.signs.words_per_row() * 8;
    g.axis = bw.axis;
    g.bytes = detail::row_bytes(bw.signs);
    g.alpha.assign(bw.alpha.begin(), bw.alpha.end());
    g.beta.assign(bw.beta.begin(), bw.beta.end());
    g.positives.resize(static_cast<std::size_t>(g.rows));
    for (Index i = 0; i < g.rows; ++i) {
      g.positives[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(bw.signs.positives_in_row(i));
    }
    return g;
  }

  /// y = W_deq · x with W_deq = sign·alpha + beta.
  void multiply(std::span<const T> x, std::span<T> y) const {
    if (static_cast<Index>(x.size()) != cols || static_cast<Index>(y.size()) != rows) {
      throw std::invalid_argument("PackedGemv::multiply: dimension mismatch");
    }
    if (axis == Axis::row) {
      T total{0};
      for (T v : x) total += v;
      const std::vector<T> xp = detail::padded_copy<T>(x, bytes_per_row);
      for (Index i = 0; i < rows; ++i) {
        const T plus = detail::masked_sum(bytes.data() + i * bytes_per_row, xp.data(), bytes_per_row);
        const auto u = static_cast<std::size_t>(i);
        y[u] = alpha[u] * (T{2} * plus - total) + beta[u] * total;
      }
    } else {
      // Column scales fold into the activations.
      std::vector<T> scaled(static_cast<std::size_t>(bytes_per_row * 8), T{0});
      T scaled_total{0}, offset{0};
      for (std::size_t j = 0; j < x.size(); ++j) {
        scaled[j] = alpha[j] * x[j];
        scaled_total += scaled[j];
        offset += beta[j] * x[j];
      }
      for (Index i = 0; i < rows; ++i) {
        const T plus = detail::masked_sum(bytes.data() + i * bytes_per_row, scaled.data(), bytes_per_row);
        y[static_cast<std::size_t>(i)] = T{2} * plus - scaled_total + offset;
      }
    }
  }

  /// y from integer activation codes x ≈ s·(q - z), accumulated in int32.
  /// Row-axis scales only.
  void multiply_codes(const QuantizedActivations& q, std::span<T> y) const {
    if (axis != Axis::row) {
      throw std::invalid_argument("multiply_codes: integer path requires row-axis scales");
    }
    if (static_cast<Index>(q.codes.size()) != cols || static_cast<Index>(y.size()) != rows) {
      throw std::invalid_argument("multiply_codes: dimension mismatch");
    }
    const std::vector<std::int32_t> codes = detail::padded_copy<std::int32_t>(q.codes, bytes_per_row);
    std::int64_t total = 0;
    for (auto c : codes) total += c;
    const std::int64_t z = q.zero_point;
    const auto s = static_cast<T>(q.scale);
    const T sum_x = s * static_cast<T>(total - static_cast<std::int64_t>(cols) * z);
    for (Index i = 0; i < rows; ++i) {
      const auto u = static_cast<std::size_t>(i);
      const std::int64_t plus = detail::masked_sum(bytes.data() + i * bytes_per_row, codes.data(), bytes_per_row);
      const std::int64_t sign_sum = 2 * static_cast<std::int64_t>(positives[u]) - cols;
      const std::int64_t dot = (2 * plus - total) - z * sign_sum;
      y[u] = alpha[u] * s * static_cast<T>(dot) + beta[u] * sum_x;
    }
  }

  std::size_t weight_bytes() const {
    return bytes.size() + sizeof(T) * (alpha.size() + beta.size());
  }
};

/// dequantize(bw) · x via the packed kernel, accumulated in double.
inline Vector binary_gemv(const BinarizedWeights& bw, const Vector& x) {
  detail::check_gemv_dims(bw, x.size());
  const auto g = PackedGemv<double>::from(bw);
  Vector y(bw.rows());
  g.multiply(as_span(x), {y.data(), static_cast<std::size_t>(y.size())});
  return y;
}

/// Integer-activation variant: dequantize(bw) · dequantize_token(q).
inline Vector binary_gemv_codes(const BinarizedWeights& bw, const QuantizedActivations& q) {
  detail::check_gemv_dims(bw, static_cast<Index>(q.codes.size()));
  const auto g = PackedGemv<double>::from(bw);
  Vector y(bw.rows());
  g.multiply_codes(q, {y.data(), static_cast<std::size_t>(y.size())});
  return y;
}

/// Everything needed for inference with a BWLA-quantized layer:
/// W ≈ dequantize(weights)·Rᵀ + A·B.
struct PackedLayer {
  BinarizedWeights weights;
  KroneckerRotation rotation;
  LowRankResidual residual;

  Index rows() const { return weights.rows(); }
  Index cols() const { return weights.cols(); }
};

struct InferenceOptions {
  std::optional<int> activation_bits;  // quantize the rotated activations
  bool integer_accumulate = false;     // use the int32 code path (row axis)
  FlopCounter* flops = nullptr;
};

/// y = W_deq·(Rᵀx) + A·(B·x).
inline Vector full_inference(const PackedLayer& layer, const Vector& x,
                             const InferenceOptions& opt = {}) {
  if (x.size() != layer.cols()) {
    throw std::invalid_argument("full_inference: activation length " + std::to_string(x.size()) +
                                " != " + std::to_string(layer.cols()));
  }
  const Vector xr = apply_transpose_to_vec(layer.rotation, x, opt.flops);
  Vector y;
  if (opt.activation_bits) {
    const QuantizedActivations q = quantize_token(xr, *opt.activation_bits);
    y = opt.integer_accumulate ? binary_gemv_codes(layer.weights, q)
                               : binary_gemv(layer.weights, dequantize_token(q));
  } else {
    y = binary_gemv(layer.weights, xr);
  }
  if (opt.flops) opt.flops->add(static_cast<std::uint64_t>(layer.rows() * layer.cols()));
  if (layer.residual.k > 0) {
    const Vector bx = layer.residual.b * x;
    y.noalias() += layer.residual.a * bx;
    if (opt.flops) {
      opt.flops->add(static_cast<std::uint64_t>(layer.residual.k * (layer.rows() + layer.cols())));
    }
  }
  return y;
}

/// Same algebra with the dense dequantized matrix; isolates the rotation and
/// residual path from the packed kernel.
inline Vector dense_inference(const Matrix& rotated_weights, const KroneckerRotation& rotation,
                              const LowRankResidual& residual, const Vector& x) {
  Vector y = rotated_weights * apply_transpose_to_vec(rotation, x);
  if (residual.k > 0) y.noalias() += residual.a * (residual.b * x);
  return y;
}

// --- micro-benchmark ---------------------------------------------------------

struct GemvShape {
  Index rows = 0;
  Index cols = 0;
  std::string label() const { return std::to_string(rows) + "x" + std::to_string(cols); }
};

struct BenchRow {
  std::string shape;
  std::string variant;  // dense_f32, packed_f32, packed_int8
  double median_ns = 0;
  double p10_ns = 0;
  double p90_ns = 0;
  std::size_t bytes_touched = 0;
  bool correct = false;
};

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return sorted_quantile(v, q);
}

template <typename F>
std::vector<double> time_reps(F&& fn, int reps) {
  std::vector<double> ns;
  ns.reserve(static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ns.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  return ns;
}

template <typename T>
void do_not_optimize(const T& v) {
  asm volatile("" : : "g"(&v) : "memory");
}

}  // namespace detail

/// Dense f32 GEMV vs packed-binary f32 and int8-code GEMV. Inputs live on a
/// dyadic grid (activations k/8, scales k/16) so every float sum is exact and
/// the packed outputs can be checked for equality with the dense product on
/// the first iteration.
inline std::vector<BenchRow> bench_gemv(const std::vector<GemvShape>& shapes, int repetitions,
                                        std::uint64_t seed = 0) {
  if (repetitions < 1) throw std::invalid_argument("bench_gemv: repetitions must be >= 1");
  std::vector<BenchRow> rows;
  for (const GemvShape& shape : shapes) {
    const Index n = shape.rows, m = shape.cols;
    SplitMix64 rng(seed, static_cast<std::uint64_t>(n * 1000003 + m));
    BinarizedWeights bw{PackedSigns(n, m), Vector(n), Vector(n), Axis::row};
    for (Index i = 0; i < n; ++i) {
      bw.alpha(i) = static_cast<double>(1 + rng.below(32)) / 16.0;
      bw.beta(i) = (static_cast<double>(rng.below(33)) - 16.0) / 16.0;
      for (Index j = 0; j < m; ++j) bw.signs.set(i, j, rng.sign() > 0);
    }
    std::vector<float> x(static_cast<std::size_t>(m));
    for (auto& v : x) v = (static_cast<float>(rng.below(65)) - 32.0f) / 8.0f;

    using FMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const FMat dense = dequantize(bw).cast<float>();
    Eigen::Map<const Eigen::VectorXf> xv(x.data(), m);
    Eigen::VectorXf y_dense(n);
    const auto packed = PackedGemv<float>::from(bw);
    std::vector<float> y_packed(static_cast<std::size_t>(n));

    // Codes q = 8x + 32 reproduce x exactly with s = 1/8, z = 32.
    QuantizedActivations q;
    q.bits = 8;
    q.scale = 0.125;
    q.zero_point = 32;
    for (float v : x) q.codes.push_back(static_cast<std::uint8_t>(v * 8.0f + 32.0f));
    std::vector<float> y_codes(static_cast<std::size_t>(n));

    y_dense.noalias() = dense * xv;
    packed.multiply(x, y_packed);
    packed.multiply_codes(q, y_codes);
    bool packed_ok = true, codes_ok = true;
    for (Index i = 0; i < n; ++i) {
      packed_ok &= y_packed[static_cast<std::size_t>(i)] == y_dense(i);
      codes_ok &= y_codes[static_cast<std::size_t>(i)] == y_dense(i);
    }

    const std::size_t io_bytes = sizeof(float) * static_cast<std::size_t>(n + m);
    auto emit = [&](const char* variant, std::vector<double> ns, std::size_t bytes, bool ok) {
      rows.push_back({shape.label(), variant, detail::percentile(ns, 0.5),
                      detail::percentile(ns, 0.1), detail::percentile(ns, 0.9), bytes, ok});
    };
    emit("dense_f32",
         detail::time_reps([&] {
           y_dense.noalias() = dense * xv;
           detail::do_not_optimize(y_dense);
         }, repetitions),
         sizeof(float) * static_cast<std::size_t>(n * m) + io_bytes, true);
    emit("packed_f32",
         detail::time_reps([&] {
           packed.multiply(x, y_packed);
           detail::do_not_optimize(y_packed);
         }, repetitions),
         packed.weight_bytes() + io_bytes, packed_ok);
    emit("packed_int8",
         detail::time_reps([&] {
           packed.multiply_codes(q, y_codes);
           detail::do_not_optimize(y_codes);
         }, repetitions),
         packed.weight_bytes() + static_cast<std::size_t>(m) + sizeof(float) * static_cast<std::size_t>(n),
         codes_ok);
  }
  return rows;
}

}  // namespace bwla
