#pragma once

// Dense linear-algebra substrate: matrix aliases, one-sided Jacobi SVD,
// truncated SVD and the row-major reshape used by the Kronecker rotation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bwla {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Numerical tolerances shared by all modules.
struct Tolerances {
  double svd_reconstruction = 1e-9;  // relative to max(S[0], 1)
  double orthonormality = 1e-10;
  double rotation_orthogonality = 1e-8;
  double reorthogonalized = 1e-12;
  double descent_slack = 1e-9;
  double sign_threshold = 1e-12;  // "nonzero" for the singular-vector sign rule
};

inline constexpr Tolerances kTolerances{};

class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SvdNoConvergence : public NumericsError {
 public:
  explicit SvdNoConvergence(int sweeps)
      : NumericsError("svd: one-sided Jacobi did not converge after " + std::to_string(sweeps) +
                      " sweeps"),
        sweeps_(sweeps) {}
  int sweeps() const noexcept { return sweeps_; }

 private:
  int sweeps_;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, std::string_view what) {
  if (!m.allFinite()) {
    throw NumericsError(std::string(what) + ": non-finite entry (NaN or Inf)");
  }
}

/// Builds a matrix from row-major data, rejecting non-finite entries.
inline Matrix make_matrix(Index rows, Index cols, std::span<const double> data) {
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw std::invalid_argument("make_matrix: data length " + std::to_string(data.size()) +
                                " does not match " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  Matrix m = Eigen::Map<const Matrix>(data.data(), rows, cols);
  require_finite(m, "make_matrix");
  return m;
}

struct SvdResult {
  Matrix U;   // rows x p, orthonormal columns (p = min(rows, cols), or k when truncated)
  Vector S;   // descending, >= 0
  Matrix Vt;  // p x cols, orthonormal rows

  Matrix reconstruct() const { return U * S.asDiagonal() * Vt; }
};

struct SvdOptions {
  int max_sweeps = 80;
  double rotation_threshold = 1e-15;
};

namespace detail {

// Extends the orthonormal columns [0, filled) of q to a full orthonormal set,
// each time taking the unit vector with the largest component outside the
// current span (at least 1/sqrt(dim) of it survives projection).
inline void complete_orthonormal_columns(Eigen::MatrixXd& q, Index filled) {
  const Index dim = q.rows();
  for (Index col = filled; col < q.cols(); ++col) {
    Eigen::VectorXd best;
    double best_norm = 0.0;
    for (Index e = 0; e < dim; ++e) {
      Eigen::VectorXd cand = Eigen::VectorXd::Unit(dim, e);
      for (int pass = 0; pass < 2; ++pass) {
        for (Index j = 0; j < col; ++j) cand -= q.col(j).dot(cand) * q.col(j);
      }
      const double norm = cand.norm();
      if (norm > best_norm) {
        best_norm = norm;
        best = std::move(cand);
      }
    }
    if (!(best_norm > 0.5 / std::sqrt(static_cast<double>(dim)))) {
      throw NumericsError("svd: cannot complete orthonormal basis");
    }
    q.col(col) = best / best_norm;
  }
}

inline void apply_sign_convention(Matrix& u, Matrix& vt, double threshold) {
  for (Index k = 0; k < u.cols(); ++k) {
    for (Index i = 0; i < u.rows(); ++i) {
      const double val = u(i, k);
      if (std::abs(val) > threshold) {
        if (val < 0) {
          u.col(k) *= -1.0;
          vt.row(k) *= -1.0;
        }
        break;
      }
    }
  }
}

}  // namespace detail

/// Thin SVD by one-sided (Hestenes) Jacobi. The sign of each singular pair is
/// fixed so the first nonzero entry of every left singular vector is positive.
inline SvdResult svd(const Matrix& a, const SvdOptions& opt = {}) {
  if (a.rows() < 1 || a.cols() < 1) {
    throw std::invalid_argument("svd: matrix must have at least one row and one column");
  }
  require_finite(a, "svd input");

  const bool transposed = a.rows() < a.cols();
  Eigen::MatrixXd work = transposed ? Eigen::MatrixXd(a.transpose()) : Eigen::MatrixXd(a);
  const Index r = work.rows();
  const Index c = work.cols();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(c, c);

  bool converged = false;
  int sweep = 0;
  for (; sweep < opt.max_sweeps; ++sweep) {
    bool rotated = false;
    for (Index p = 0; p + 1 < c; ++p) {
      double* cp = work.col(p).data();
      for (Index q = p + 1; q < c; ++q) {
        double* cq = work.col(q).data();
        double alpha = 0, beta = 0, gamma = 0;
        for (Index i = 0; i < r; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= opt.rotation_threshold * std::sqrt(alpha * beta)) {
          continue;
        }
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (Index i = 0; i < r; ++i) {
          const double xp = cp[i];
          const double xq = cq[i];
          cp[i] = cs * xp - sn * xq;
          cq[i] = sn * xp + cs * xq;
        }
        double* vp = v.col(p).data();
        double* vq = v.col(q).data();
        for (Index i = 0; i < c; ++i) {
          const double xp = vp[i];
          const double xq = vq[i];
          vp[i] = cs * xp - sn * xq;
          vq[i] = sn * xp + cs * xq;
        }
      }
    }
    if (!rotated) {
      converged = true;
      break;
    }
  }
  if (!converged) throw SvdNoConvergence(sweep);

  Eigen::VectorXd sigma(c);
  for (Index j = 0; j < c; ++j) sigma(j) = work.col(j).norm();
  std::vector<Index> order(static_cast<std::size_t>(c));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index x, Index y) { return sigma(x) > sigma(y); });

  const double smax = sigma(order.front());
  const double cutoff = smax * 1e-15 * static_cast<double>(std::max(r, c));
  Eigen::MatrixXd uw(r, c);
  Eigen::MatrixXd vw(c, c);
  Vector s(c);
  Index filled = 0;
  for (Index j = 0; j < c; ++j) {
    const Index src = order[static_cast<std::size_t>(j)];
    vw.col(j) = v.col(src);
    if (sigma(src) > cutoff && sigma(src) > 0.0) {
      s(j) = sigma(src);
      uw.col(j) = work.col(src) / sigma(src);
      filled = j + 1;
    } else {
      s(j) = 0.0;
    }
  }
  detail::complete_orthonormal_columns(uw, filled);

  SvdResult out;
  if (transposed) {
    out.U = vw;
    out.Vt = uw.transpose();
  } else {
    out.U = uw;
    out.Vt = vw.transpose();
  }
  out.S = s;
  detail::apply_sign_convention(out.U, out.Vt, kTolerances.sign_threshold);
  return out;
}

/// Top-k part of the exact SVD (best rank-k Frobenius approximation).
inline SvdResult truncated_svd(const Matrix& a, Index k, const SvdOptions& opt = {}) {
  const Index p = std::min(a.rows(), a.cols());
  if (k < 1 || k > p) {
    throw std::invalid_argument("truncated_svd: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(p) + "]");
  }
  SvdResult full = svd(a, opt);
  SvdResult out;
  out.U = full.U.leftCols(k);
  out.S = full.S.head(k);
  out.Vt = full.Vt.topRows(k);
  return out;
}

/// Row-major reshape: element j of v lands at (j / n2, j % n2).
inline Matrix reshape_row_to_mat(std::span<const double> v, Index n1, Index n2) {
  if (n1 < 0 || n2 < 0 || static_cast<std::size_t>(n1 * n2) != v.size()) {
    throw std::invalid_argument("reshape_row_to_mat: length " + std::to_string(v.size()) +
                                " != " + std::to_string(n1) + "*" + std::to_string(n2));
  }
  return Eigen::Map<const Matrix>(v.data(), n1, n2);
}

inline Vector flatten(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

inline std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

inline double max_abs_deviation_from_identity(const Matrix& q) {
  return (q.transpose() * q - Matrix::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
}

}  // namespace bwla
