#pragma once

// Kronecker-structured orthogonal rotation R = R1 ⊗ R2 acting on rows of
// length m = n1 * n2. With the row-major reshape V = reshape(v, n1, n2):
//
//   v · (R1 ⊗ R2)  ==  vec_row(R1ᵀ V R2)
//
// so a row costs n1·n1·n2 + n1·n2·n2 multiply-adds instead of m².

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "bwla/numerics.hpp"
#include "bwla/random.hpp"

namespace bwla {

struct KroneckerDims {
  Index n1 = 1;
  Index n2 = 1;
  Index m = 1;

  friend bool operator==(const KroneckerDims&, const KroneckerDims&) = default;
};

/// Largest divisor n2 <= floor(sqrt(m)), searching downward; n1 = m / n2.
inline KroneckerDims factor_dims(Index m) {
  if (m < 1) throw std::invalid_argument("factor_dims: m must be >= 1");
  auto a = static_cast<Index>(std::sqrt(static_cast<double>(m)));
  while ((a + 1) * (a + 1) <= m) ++a;  // guard sqrt rounding
  while (a * a > m) --a;
  while (a > 1 && m % a != 0) --a;
  return {m / a, a, m};
}

/// Multiply-add counter for cost accounting (not thread-safe; one per caller).
struct FlopCounter {
  std::uint64_t macs = 0;
  void add(std::uint64_t n) noexcept { macs += n; }
};

class KroneckerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct KroneckerRotation {
  KroneckerDims dims;
  Matrix r1;  // n1 x n1
  Matrix r2;  // n2 x n2

  static KroneckerRotation identity(KroneckerDims d) {
    return {d, Matrix::Identity(d.n1, d.n1), Matrix::Identity(d.n2, d.n2)};
  }

  static KroneckerRotation random(KroneckerDims d, SplitMix64& rng) {
    return {d, random_orthogonal(rng, d.n1), random_orthogonal(rng, d.n2)};
  }

  /// Explicit m x m matrix; test and small-size use only.
  Matrix dense() const {
    Matrix out(dims.m, dims.m);
    for (Index a = 0; a < dims.n1; ++a)
      for (Index c = 0; c < dims.n1; ++c)
        out.block(a * dims.n2, c * dims.n2, dims.n2, dims.n2) = r1(a, c) * r2;
    return out;
  }

  double orthogonality_drift() const {
    return std::max(max_abs_deviation_from_identity(r1), max_abs_deviation_from_identity(r2));
  }

  void validate() const {
    if (dims.n1 * dims.n2 != dims.m || dims.n1 < dims.n2 || dims.n2 < 1) {
      throw KroneckerError("KroneckerRotation: invalid dims " + std::to_string(dims.n1) + "x" +
                           std::to_string(dims.n2) + " for m=" + std::to_string(dims.m));
    }
    if (r1.rows() != dims.n1 || r1.cols() != dims.n1 || r2.rows() != dims.n2 ||
        r2.cols() != dims.n2) {
      throw KroneckerError("KroneckerRotation: factor shapes do not match dims");
    }
  }
};

namespace detail {

inline void check_length(const KroneckerRotation& rot, Index len, const char* what) {
  if (len != rot.dims.m) {
    throw KroneckerError(std::string(what) + ": length " + std::to_string(len) +
                         " != m=" + std::to_string(rot.dims.m));
  }
}

// out = vec_row(A V B) with V = reshape(in, n1, n2).
inline void apply_factored(const Matrix& a, const Matrix& b, const double* in, double* out,
                           Index n1, Index n2, FlopCounter* flops) {
  Eigen::Map<const Matrix> v(in, n1, n2);
  Eigen::Map<Matrix> dst(out, n1, n2);
  Matrix tmp = a * v;  // n1 x n2
  dst.noalias() = tmp * b;
  if (flops) flops->add(static_cast<std::uint64_t>(n1 * n1 * n2 + n1 * n2 * n2));
}

}  // namespace detail

/// v ↦ v·R for a row vector v.
inline Vector apply_to_row(const KroneckerRotation& rot, const Vector& v,
                           FlopCounter* flops = nullptr) {
  detail::check_length(rot, v.size(), "apply_to_row");
  Vector out(v.size());
  detail::apply_factored(rot.r1.transpose(), rot.r2, v.data(), out.data(), rot.dims.n1,
                         rot.dims.n2, flops);
  return out;
}

/// x ↦ Rᵀx for a column vector x. Numerically the same map as apply_to_row,
/// since (xᵀR)ᵀ = Rᵀx; kept separate to name the activation side.
inline Vector apply_transpose_to_vec(const KroneckerRotation& rot, const Vector& x,
                                     FlopCounter* flops = nullptr) {
  detail::check_length(rot, x.size(), "apply_transpose_to_vec");
  Vector out(x.size());
  detail::apply_factored(rot.r1.transpose(), rot.r2, x.data(), out.data(), rot.dims.n1,
                         rot.dims.n2, flops);
  return out;
}

/// x ↦ R·x (inverse of apply_transpose_to_vec).
inline Vector apply_to_vec(const KroneckerRotation& rot, const Vector& x,
                           FlopCounter* flops = nullptr) {
  detail::check_length(rot, x.size(), "apply_to_vec");
  Vector out(x.size());
  detail::apply_factored(rot.r1, rot.r2.transpose(), x.data(), out.data(), rot.dims.n1,
                         rot.dims.n2, flops);
  return out;
}

/// Every row w_i ↦ w_i·R.
inline Matrix apply_to_rows(const KroneckerRotation& rot, const Matrix& w,
                            FlopCounter* flops = nullptr) {
  detail::check_length(rot, w.cols(), "apply_to_rows");
  Matrix out(w.rows(), w.cols());
  const Matrix r1t = rot.r1.transpose();
  for (Index i = 0; i < w.rows(); ++i) {
    detail::apply_factored(r1t, rot.r2, w.row(i).data(), out.row(i).data(), rot.dims.n1,
                           rot.dims.n2, flops);
  }
  return out;
}

/// Every row w_i ↦ w_i·Rᵀ.
inline Matrix apply_inverse_to_rows(const KroneckerRotation& rot, const Matrix& w,
                                    FlopCounter* flops = nullptr) {
  detail::check_length(rot, w.cols(), "apply_inverse_to_rows");
  Matrix out(w.rows(), w.cols());
  const Matrix r2t = rot.r2.transpose();
  for (Index i = 0; i < w.rows(); ++i) {
    detail::apply_factored(rot.r1, r2t, w.row(i).data(), out.row(i).data(), rot.dims.n1,
                           rot.dims.n2, flops);
  }
  return out;
}

/// Polar factor U·Vᵀ of a square matrix.
inline Matrix polar_factor(const Matrix& c) {
  SvdResult s = svd(c);
  return s.U * s.Vt;
}

/// Replaces each factor by the polar factor of its own SVD.
inline KroneckerRotation reorthogonalize(const KroneckerRotation& rot) {
  rot.validate();
  auto fix = [](const Matrix& f, const char* name) {
    SvdResult s = svd(f);
    if (s.S(s.S.size() - 1) <= 1e-12 * std::max(1.0, s.S(0))) {
      throw NumericsError(std::string("reorthogonalize: factor ") + name + " is singular");
    }
    return Matrix(s.U * s.Vt);
  };
  return {rot.dims, fix(rot.r1, "R1"), fix(rot.r2, "R2")};
}

}  // namespace bwla
