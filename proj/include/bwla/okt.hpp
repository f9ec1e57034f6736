#pragma once

// Orthogonal-Kronecker transformation: alternating EM on the symmetric GMM and
// majorize-minimize Procrustes updates of the Kronecker factors.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "bwla/gmm.hpp"
#include "bwla/kronecker.hpp"
#include "bwla/numerics.hpp"

namespace bwla {

struct LossRecord {
  enum class Phase : std::uint8_t { okt, psp };
  Phase phase = Phase::okt;
  int iteration = 0;
  double nll = 0.0;
  double regularizer = 0.0;
  double surrogate = 0.0;

  double total() const { return nll + regularizer; }
};

struct OktOptions {
  double lambda_reg = 0.01;
  GmmFloorRule floor_rule{};
};

struct OktState {
  KroneckerRotation rotation;
  GmmParams params;
  int iteration = 0;
  std::vector<LossRecord> loss_history;
};

/// Rows of WR with their means removed, i.e. (WR)·H.
struct CenteredView {
  Matrix x;
};

inline CenteredView center_rows(const Matrix& wr) {
  require_finite(wr, "center_rows");
  CenteredView out{wr};
  for (Index i = 0; i < wr.rows(); ++i) {
    out.x.row(i).array() -= wr.row(i).mean();
  }
  return out;
}

/// m_ij = (2r⁺_ij - 1) c_i.
inline Matrix posterior_means(const Responsibilities& r, const GmmParams& p) {
  Matrix m = (2.0 * r.positive.array() - 1.0).matrix();
  for (Index i = 0; i < m.rows(); ++i) m.row(i) *= p.center(i);
  return m;
}

/// (1/nm) Σ_i σ_i⁻² Σ_j (x_ij - m_ij)².
inline double mm_surrogate(const CenteredView& x, const Responsibilities& r, const GmmParams& p) {
  const Matrix m = posterior_means(r, p);
  double total = 0.0;
  for (Index i = 0; i < x.x.rows(); ++i) {
    total += (x.x.row(i) - m.row(i)).squaredNorm() / p.variance(i);
  }
  return x.x.size() ? total / static_cast<double>(x.x.size()) : 0.0;
}

/// Procrustes targets for the centered surrogate at the current rotation:
/// centered posterior means plus the current mean of each rotated row.
/// For orthogonal R the centered surrogate is majorized (tight at the
/// current R) by a constant minus 2·Σ_i λ_i ⟨w_i R, t_i⟩ with these t_i.
inline Matrix procrustes_targets(const Matrix& rotated_uncentered, const Responsibilities& r,
                                 const GmmParams& p) {
  Matrix t = posterior_means(r, p);
  for (Index i = 0; i < t.rows(); ++i) {
    t.row(i).array() += rotated_uncentered.row(i).mean() - t.row(i).mean();
  }
  return t;
}

inline Vector surrogate_weights(const GmmParams& p) { return p.variance.cwiseInverse(); }

namespace detail {

inline void check_procrustes_args(const Matrix& w_eff, const KroneckerRotation& rot,
                                  const Matrix& targets, const Vector& weights) {
  rot.validate();
  if (w_eff.cols() != rot.dims.m || targets.rows() != w_eff.rows() ||
      targets.cols() != w_eff.cols() || weights.size() != w_eff.rows()) {
    throw std::invalid_argument("procrustes update: shape mismatch");
  }
}

inline Matrix polar_or_identity(const Matrix& c) {
  if (c.cwiseAbs().maxCoeff() == 0.0) return Matrix::Identity(c.rows(), c.cols());
  return polar_factor(c);
}

}  // namespace detail

/// argmin over orthogonal R1 of Σ_i λ_i ‖R1ᵀ V_i R2 - T_i‖²  (R2 fixed),
/// where V_i, T_i are the row-major reshapes of row i of w_eff and targets.
/// Closed form: polar factor of C1 = Σ_i λ_i V_i R2 T_iᵀ.
inline Matrix procrustes_update_r1(const Matrix& w_eff, const KroneckerRotation& rot,
                                   const Matrix& targets, const Vector& weights) {
  detail::check_procrustes_args(w_eff, rot, targets, weights);
  const Index n1 = rot.dims.n1, n2 = rot.dims.n2;
  Matrix c = Matrix::Zero(n1, n1);
  for (Index i = 0; i < w_eff.rows(); ++i) {
    Eigen::Map<const Matrix> v(w_eff.row(i).data(), n1, n2);
    Eigen::Map<const Matrix> t(targets.row(i).data(), n1, n2);
    c.noalias() += weights(i) * (v * rot.r2) * t.transpose();
  }
  return detail::polar_or_identity(c);
}

/// argmin over orthogonal R2 with R1 fixed; polar factor of
/// C2 = Σ_i λ_i V_iᵀ R1 T_i.
inline Matrix procrustes_update_r2(const Matrix& w_eff, const KroneckerRotation& rot,
                                   const Matrix& targets, const Vector& weights) {
  detail::check_procrustes_args(w_eff, rot, targets, weights);
  const Index n1 = rot.dims.n1, n2 = rot.dims.n2;
  Matrix c = Matrix::Zero(n2, n2);
  for (Index i = 0; i < w_eff.rows(); ++i) {
    Eigen::Map<const Matrix> v(w_eff.row(i).data(), n1, n2);
    Eigen::Map<const Matrix> t(targets.row(i).data(), n1, n2);
    c.noalias() += weights(i) * (v.transpose() * rot.r1) * t;
  }
  return detail::polar_or_identity(c);
}

/// Weighted Procrustes objective Σ_i λ_i ‖w_i R - t_i‖², used by tests and
/// the brute-force oracle.
inline double procrustes_objective(const Matrix& w_eff, const KroneckerRotation& rot,
                                   const Matrix& targets, const Vector& weights) {
  const Matrix z = apply_to_rows(rot, w_eff);
  double total = 0.0;
  for (Index i = 0; i < z.rows(); ++i) total += weights(i) * (z.row(i) - targets.row(i)).squaredNorm();
  return total;
}

inline LossRecord make_record(LossRecord::Phase phase, int iteration, const Matrix& x,
                              const GmmParams& p, double lambda_reg) {
  const Responsibilities r = responsibilities(x, p);
  return {phase, iteration, nll(x, p), balance_regularizer(r, lambda_reg),
          mm_surrogate(CenteredView{x}, r, p)};
}

/// Starting state: given rotation (identity by default), params fitted to the
/// centered rotated weights, and the iteration-0 loss record.
inline OktState init_okt(const Matrix& w, const KroneckerRotation& rotation,
                         const OktOptions& opt = {}) {
  rotation.validate();
  if (w.cols() != rotation.dims.m) throw std::invalid_argument("init_okt: width mismatch");
  require_finite(w, "init_okt");
  OktState s{rotation, {}, 0, {}};
  const CenteredView x = center_rows(apply_to_rows(rotation, w));
  s.params = init_params(x.x, opt.floor_rule);
  s.loss_history.push_back(make_record(LossRecord::Phase::okt, 0, x.x, s.params, opt.lambda_reg));
  return s;
}

/// One outer iteration: rotate and center, EM, rebuild targets from the
/// refreshed responsibilities, update R1 then R2, re-orthogonalize, record.
inline OktState okt_step(const Matrix& w_eff, const OktState& state, const OktOptions& opt = {}) {
  OktState next = state;
  KroneckerRotation& rot = next.rotation;
  if (w_eff.cols() != rot.dims.m || w_eff.rows() != state.params.rows()) {
    throw std::invalid_argument("okt_step: weight shape does not match state");
  }

  Matrix z = apply_to_rows(rot, w_eff);
  CenteredView x = center_rows(z);
  const Responsibilities r_old = responsibilities(x.x, next.params);
  next.params = em_update(x.x, r_old, next.params);

  // Responsibilities are frozen for both factor updates within the step.
  const Responsibilities r = responsibilities(x.x, next.params);
  const Vector lambda = surrogate_weights(next.params);

  Matrix targets = procrustes_targets(z, r, next.params);
  rot.r1 = procrustes_update_r1(w_eff, rot, targets, lambda);

  z = apply_to_rows(rot, w_eff);
  targets = procrustes_targets(z, r, next.params);
  rot.r2 = procrustes_update_r2(w_eff, rot, targets, lambda);

  rot = reorthogonalize(rot);

  x = center_rows(apply_to_rows(rot, w_eff));
  next.iteration = state.iteration + 1;
  LossRecord rec = make_record(LossRecord::Phase::okt, next.iteration, x.x, next.params,
                               opt.lambda_reg);
  // Report the surrogate against the responsibilities the step optimized.
  rec.surrogate = mm_surrogate(x, r, next.params);
  next.loss_history.push_back(rec);
  return next;
}

}  // namespace bwla
