#pragma once

// Symmetric two-component Gaussian mixture with modes ±c_i and shared
// variance σ_i² per row, mixing weights fixed at ½/½.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "bwla/numerics.hpp"

namespace bwla {

struct GmmParams {
  Vector center;     // c_i >= 0
  Vector variance;   // σ_i² >= floor_i
  Vector floor;      // σ_min,i², > 0

  Index rows() const { return center.size(); }

  void validate() const {
    if (variance.size() != center.size() || floor.size() != center.size()) {
      throw std::invalid_argument("GmmParams: inconsistent row counts");
    }
    for (Index i = 0; i < rows(); ++i) {
      if (!(floor(i) > 0.0) || variance(i) < floor(i) || center(i) < 0.0) {
        throw std::invalid_argument("GmmParams: invariant violated at row " + std::to_string(i));
      }
    }
  }
};

struct Responsibilities {
  Matrix positive;   // r⁺_ij; r⁻_ij is 1 - r⁺_ij
  Vector row_means;  // r̄_i
};

/// Relative variance floor and an absolute guard for all-zero rows.
struct GmmFloorRule {
  double relative_to_rms = 1e-4;
  double absolute_variance = 1e-30;
};

/// c_i = mean|x_ij|, σ_i² = mean (|x_ij| - c_i)², floored at (1e-4·RMS_i)².
inline GmmParams init_params(const Matrix& x, const GmmFloorRule& rule = {}) {
  const Index n = x.rows();
  GmmParams p{Vector(n), Vector(n), Vector(n)};
  for (Index i = 0; i < n; ++i) {
    const auto row = x.row(i);
    const double rms = std::sqrt(row.squaredNorm() / static_cast<double>(x.cols()));
    const double floor =
        std::max(rule.relative_to_rms * rule.relative_to_rms * rms * rms, rule.absolute_variance);
    const double c = row.cwiseAbs().mean();
    const double var = (row.cwiseAbs().array() - c).square().mean();
    p.center(i) = c;
    p.floor(i) = floor;
    p.variance(i) = std::max(var, floor);
  }
  return p;
}

namespace detail {

inline double stable_sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

// log cosh(a) without overflow.
inline double log_cosh(double a) {
  const double b = std::abs(a);
  return b + std::log1p(std::exp(-2.0 * b)) - std::numbers::ln2;
}

inline void check_shapes(const Matrix& x, const GmmParams& p, const char* what) {
  if (x.rows() != p.rows()) {
    throw std::invalid_argument(std::string(what) + ": data has " + std::to_string(x.rows()) +
                                " rows, params have " + std::to_string(p.rows()));
  }
}

}  // namespace detail

/// r⁺_ij = φ(x;c,σ²) / (φ(x;c,σ²) + φ(x;-c,σ²)) = sigmoid(2 c x / σ²).
inline Responsibilities responsibilities(const Matrix& x, const GmmParams& p) {
  detail::check_shapes(x, p, "responsibilities");
  Responsibilities r{Matrix(x.rows(), x.cols()), Vector(x.rows())};
  for (Index i = 0; i < x.rows(); ++i) {
    const double scale = 2.0 * p.center(i) / p.variance(i);
    double sum = 0.0;
    for (Index j = 0; j < x.cols(); ++j) {
      const double v = detail::stable_sigmoid(scale * x(i, j));
      r.positive(i, j) = v;
      sum += v;
    }
    r.row_means(i) = sum / static_cast<double>(x.cols());
  }
  return r;
}

/// Closed-form M-step; the variance uses the updated center and is floored.
inline GmmParams em_update(const Matrix& x, const Responsibilities& r, const GmmParams& p) {
  detail::check_shapes(x, p, "em_update");
  GmmParams out = p;
  const double inv_m = 1.0 / static_cast<double>(x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double c = 0.0;
    for (Index j = 0; j < x.cols(); ++j) c += (2.0 * r.positive(i, j) - 1.0) * x(i, j);
    c = std::abs(c * inv_m);
    double var = 0.0;
    for (Index j = 0; j < x.cols(); ++j) {
      const double rp = r.positive(i, j);
      const double dp = x(i, j) - c;
      const double dn = x(i, j) + c;
      var += rp * dp * dp + (1.0 - rp) * dn * dn;
    }
    out.center(i) = c;
    out.variance(i) = std::max(var * inv_m, p.floor(i));
  }
  return out;
}

/// -(1/nm) Σ log[½φ(x;c,σ²) + ½φ(x;-c,σ²)], via
/// ½log(2πσ²) + (x² + c²)/(2σ²) - log cosh(c x / σ²).
inline double nll(const Matrix& x, const GmmParams& p) {
  detail::check_shapes(x, p, "nll");
  if (x.size() == 0) return 0.0;
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    const double c = p.center(i);
    const double s2 = p.variance(i);
    double row = 0.0;
    for (Index j = 0; j < x.cols(); ++j) {
      const double v = x(i, j);
      row += (v * v + c * c) / (2.0 * s2) - detail::log_cosh(c * v / s2);
    }
    total += row + static_cast<double>(x.cols()) * (half_log_2pi + 0.5 * std::log(s2));
  }
  return total / static_cast<double>(x.size());
}

/// λ·((1/n) Σ r̄_i - ½)².
inline double balance_regularizer(const Responsibilities& r, double lambda) {
  if (lambda < 0) throw std::invalid_argument("balance_regularizer: lambda must be >= 0");
  if (r.row_means.size() == 0) return 0.0;
  const double d = r.row_means.mean() - 0.5;
  return lambda * d * d;
}

/// ∂nll/∂x_ij = (x_ij - (2r⁺_ij - 1) c_i) / (n m σ_i²).
inline Matrix grad_entries(const Matrix& x, const Responsibilities& r, const GmmParams& p) {
  detail::check_shapes(x, p, "grad_entries");
  Matrix g(x.rows(), x.cols());
  const double nm = static_cast<double>(x.size());
  for (Index i = 0; i < x.rows(); ++i) {
    const double c = p.center(i);
    const double w = 1.0 / (nm * p.variance(i));
    for (Index j = 0; j < x.cols(); ++j) {
      const double rp = r.positive(i, j);
      g(i, j) = w * (rp * (x(i, j) - c) + (1.0 - rp) * (x(i, j) + c));
    }
  }
  return g;
}

}  // namespace bwla
