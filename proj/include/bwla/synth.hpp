#pragma once

// Synthetic instances and brute-force reference oracles.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bwla/binarize.hpp"
#include "bwla/kronecker.hpp"
#include "bwla/numerics.hpp"
#include "bwla/okt.hpp"
#include "bwla/random.hpp"

namespace bwla {

enum class SynthKind : std::uint8_t { gaussian_rows, planted_bimodal, heavy_tail_acts };

inline const char* to_string(SynthKind k) {
  switch (k) {
    case SynthKind::gaussian_rows: return "gaussian_rows";
    case SynthKind::planted_bimodal: return "planted_bimodal";
    case SynthKind::heavy_tail_acts: return "heavy_tail_acts";
  }
  return "?";
}

inline SynthKind synth_kind_from_string(const std::string& s) {
  if (s == "gaussian_rows" || s == "gaussian") return SynthKind::gaussian_rows;
  if (s == "planted_bimodal" || s == "planted") return SynthKind::planted_bimodal;
  if (s == "heavy_tail_acts" || s == "heavy_tail") return SynthKind::heavy_tail_acts;
  throw std::invalid_argument("unknown synth kind '" + s + "'");
}

struct SynthSpec {
  SynthKind kind = SynthKind::gaussian_rows;
  Index rows = 0;  // heavy_tail_acts: number of tokens
  Index cols = 0;
  std::uint64_t seed = 0;

  // gaussian_rows: row i ~ N(0, σ_i² I), σ_i uniform in [sigma_min, sigma_max].
  double sigma_min = 1.0;
  double sigma_max = 1.0;

  // planted_bimodal: W = (S·diag_rows(c) + noise·G)·R_trueᵀ.
  double c_min = 1.0;
  double c_max = 1.0;
  double noise = 0.0;
  // Each Kronecker factor of R_true is Cayley(mixing·K) for a normalized
  // random skew K; negative mixing draws Haar-random factors instead.
  double mixing = 0.3;

  // heavy_tail_acts: N(0,1) tokens with round(spike_rate·cols) entries
  // (at least one when the rate is positive) replaced by ±spike_magnitude.
  double spike_rate = 0.01;
  double spike_magnitude = 50.0;

  void validate() const {
    if (rows < 1 || cols < 1) {
      throw std::invalid_argument("SynthSpec: dims must be positive, got " + std::to_string(rows) +
                                  "x" + std::to_string(cols));
    }
    if (!(sigma_min > 0) || sigma_max < sigma_min) throw std::invalid_argument("SynthSpec: bad sigma range");
    if (!(c_min > 0) || c_max < c_min) throw std::invalid_argument("SynthSpec: bad c range");
    if (noise < 0) throw std::invalid_argument("SynthSpec: negative noise");
    if (spike_rate < 0 || spike_rate > 1) throw std::invalid_argument("SynthSpec: spike_rate outside [0, 1]");
  }
};

struct SynthInstance {
  Matrix w;
  // planted_bimodal only:
  KroneckerRotation truth_rotation;
  Matrix truth_signs;  // ±1
  Vector truth_c;
};

namespace detail {

inline Matrix planted_factor(SplitMix64& rng, Index n, double mixing) {
  if (n == 1) return Matrix::Identity(1, 1);
  return mixing < 0 ? random_orthogonal(rng, n) : random_rotation_near_identity(rng, n, mixing);
}

// Row with exactly floor(m/2) positive entries in random positions.
inline void balanced_signs(SplitMix64& rng, Eigen::RowVectorXd& row) {
  const Index m = row.size();
  std::vector<Index> perm(static_cast<std::size_t>(m));
  for (Index j = 0; j < m; ++j) perm[static_cast<std::size_t>(j)] = j;
  for (Index j = m - 1; j > 0; --j) {
    std::swap(perm[static_cast<std::size_t>(j)],
              perm[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(j + 1)))]);
  }
  for (Index t = 0; t < m; ++t) row(perm[static_cast<std::size_t>(t)]) = t < m / 2 ? 1.0 : -1.0;
}

}  // namespace detail

/// Deterministic in (spec, seed): every kind draws from its own stream.
inline SynthInstance gen(const SynthSpec& spec) {
  spec.validate();
  SynthInstance out;
  const Index n = spec.rows, m = spec.cols;
  SplitMix64 rng(spec.seed, static_cast<std::uint64_t>(spec.kind) + 1);
  switch (spec.kind) {
    case SynthKind::gaussian_rows: {
      out.w.resize(n, m);
      for (Index i = 0; i < n; ++i) {
        const double sigma = rng.uniform(spec.sigma_min, spec.sigma_max);
        for (Index j = 0; j < m; ++j) out.w(i, j) = sigma * rng.gaussian();
      }
      break;
    }
    case SynthKind::planted_bimodal: {
      const KroneckerDims d = factor_dims(m);
      out.truth_rotation = {d, detail::planted_factor(rng, d.n1, spec.mixing),
                            detail::planted_factor(rng, d.n2, spec.mixing)};
      out.truth_signs.resize(n, m);
      out.truth_c.resize(n);
      Matrix x(n, m);
      for (Index i = 0; i < n; ++i) {
        Eigen::RowVectorXd s(m);
        detail::balanced_signs(rng, s);
        out.truth_signs.row(i) = s;
        out.truth_c(i) = rng.uniform(spec.c_min, spec.c_max);
        x.row(i) = out.truth_c(i) * s;
      }
      if (spec.noise > 0) x += gaussian_matrix(rng, n, m, spec.noise);
      out.w = apply_inverse_to_rows(out.truth_rotation, x);
      break;
    }
    case SynthKind::heavy_tail_acts: {
      out.w = gaussian_matrix(rng, n, m);
      Index spikes = static_cast<Index>(std::llround(spec.spike_rate * static_cast<double>(m)));
      if (spec.spike_rate > 0 && spikes == 0) spikes = 1;
      for (Index i = 0; i < n; ++i) {
        for (Index s = 0; s < spikes; ++s) {
          const auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(m)));
          out.w(i, j) = rng.sign() * spec.spike_magnitude;
        }
      }
      break;
    }
  }
  return out;
}

/// Per-row magnitude coefficient of variation std(|x|)/mean(|x|), averaged
/// over rows with nonzero mean magnitude.
inline double mean_magnitude_cv(const Matrix& x) {
  double total = 0.0;
  Index counted = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    const Eigen::ArrayXd a = x.row(i).array().abs();
    const double mean = a.mean();
    if (!(mean > 0)) continue;
    const double var = (a - mean).square().mean();
    total += std::sqrt(var) / mean;
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

// --- oracles ---------------------------------------------------------------

enum class Factor : std::uint8_t { r1, r2 };

/// A weighted Procrustes subproblem over one 2×2 Kronecker factor.
struct ProcrustesProblem {
  Matrix w_eff;
  KroneckerRotation rotation;  // the other factor is held fixed
  Matrix targets;
  Vector weights;
  Factor factor = Factor::r1;

  double objective(const Matrix& candidate) const {
    KroneckerRotation r = rotation;
    (factor == Factor::r1 ? r.r1 : r.r2) = candidate;
    return procrustes_objective(w_eff, r, targets, weights);
  }
};

/// Exhaustive scan over 2×2 rotations and reflections at `resolution_deg`.
inline Matrix brute_force_procrustes(const ProcrustesProblem& p, double resolution_deg = 0.1) {
  const Index dim = p.factor == Factor::r1 ? p.rotation.dims.n1 : p.rotation.dims.n2;
  if (dim != 2) throw std::invalid_argument("brute_force_procrustes: factor dimension must be 2");
  if (!(resolution_deg > 0)) throw std::invalid_argument("brute_force_procrustes: resolution must be positive");
  const auto steps = static_cast<int>(std::ceil(360.0 / resolution_deg));
  Matrix best = Matrix::Identity(2, 2);
  double best_value = std::numeric_limits<double>::infinity();
  for (int s = 0; s < steps; ++s) {
    const double th = 2.0 * std::numbers::pi * s / steps;
    const double c = std::cos(th), si = std::sin(th);
    for (int reflect = 0; reflect < 2; ++reflect) {
      Matrix q(2, 2);
      if (reflect) q << c, si, si, -c;
      else q << c, -si, si, c;
      const double v = p.objective(q);
      if (v < best_value) {
        best_value = v;
        best = q;
      }
    }
  }
  return best;
}

/// Objective slack implied by the scan's angular resolution: the objective is
/// quadratic in the angle with curvature at most 2·Σ λ_i ‖v_i‖·‖t_i‖.
inline double procrustes_grid_slack(const ProcrustesProblem& p, double resolution_deg = 0.1) {
  double curvature = 0.0;
  for (Index i = 0; i < p.w_eff.rows(); ++i) {
    curvature += 2.0 * p.weights(i) * p.w_eff.row(i).norm() * p.targets.row(i).norm();
  }
  const double h = resolution_deg * std::numbers::pi / 180.0;
  return 0.5 * curvature * h * h;
}

/// Central difference of f along `direction` at x.
inline double central_difference(const std::function<double(const Matrix&)>& f, const Matrix& x,
                                 const Matrix& direction, double h) {
  return (f(x + h * direction) - f(x - h * direction)) / (2.0 * h);
}

/// Entrywise central-difference gradient of f.
inline Matrix finite_difference_gradient(const std::function<double(const Matrix&)>& f,
                                         const Matrix& x, double h) {
  Matrix g(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      Matrix e = Matrix::Zero(x.rows(), x.cols());
      e(i, j) = 1.0;
      g(i, j) = central_difference(f, x, e, h);
    }
  }
  return g;
}

/// min over an α grid of Σ (|w_j| - α)², the sign-times-scale error.
inline ScaleError grid_scan_scale(std::span<const double> row, double lo, double hi, int steps) {
  ScaleError best{lo, std::numeric_limits<double>::infinity()};
  for (int s = 0; s <= steps; ++s) {
    const double a = lo + (hi - lo) * s / steps;
    double err = 0.0;
    for (double v : row) {
      const double d = v - (v > 0 ? a : -a);
      err += d * d;
    }
    if (err < best.error) best = {a, err};
  }
  return best;
}

/// Reference v·(R1⊗R2) through the explicit m×m matrix.
inline Vector dense_apply_to_row(const KroneckerRotation& rot, const Vector& v) {
  return (v.transpose() * rot.dense()).transpose();
}

}  // namespace bwla
