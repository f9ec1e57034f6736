#pragma once

// Proximal SVD projection: a rank-k residual M = A·B refined by projected
// proximal-gradient steps on L(M) = nll(T_R(W - M)), T_R(U) = (U R) H.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "bwla/gmm.hpp"
#include "bwla/kronecker.hpp"
#include "bwla/numerics.hpp"
#include "bwla/okt.hpp"

namespace bwla {

struct LowRankResidual {
  Matrix a;  // oc x k
  Matrix b;  // k x ic
  Index k = 0;
  Matrix m;  // cached a * b

  static LowRankResidual zero(Index oc, Index ic, Index k) {
    return {Matrix::Zero(oc, k), Matrix::Zero(k, ic), k, Matrix::Zero(oc, ic)};
  }

  Index parameter_count() const { return k * (a.rows() + b.cols()); }
};

/// k = max(1, round(ratio · min(oc, ic))), capped at min(oc, ic).
inline Index residual_rank(Index oc, Index ic, double rank_ratio) {
  if (rank_ratio < 0) throw std::invalid_argument("residual_rank: negative rank ratio");
  const Index p = std::min(oc, ic);
  const auto k = static_cast<Index>(std::llround(rank_ratio * static_cast<double>(p)));
  return std::clamp<Index>(k, 1, p);
}

/// Balanced factors A = U_k Σ_k^½, B = Σ_k^½ V_kᵀ of the rank-k projection.
inline LowRankResidual factor_residual(const Matrix& m, Index k) {
  const SvdResult s = truncated_svd(m, k);
  const Vector root = s.S.cwiseSqrt();
  LowRankResidual out;
  out.k = k;
  out.a = s.U * root.asDiagonal();
  out.b = root.asDiagonal() * s.Vt;
  out.m = out.a * out.b;
  return out;
}

/// T_R(W - M).
inline Matrix okt_centered(const Matrix& w_minus_m, const KroneckerRotation& rot) {
  return center_rows(apply_to_rows(rot, w_minus_m)).x;
}

/// G = T_R*(G_X) = G_X H Rᵀ. The loss gradient with respect to the residual
/// is -G, because X depends on W - M.
inline Matrix adjoint_gradient(const Matrix& g_x, const KroneckerRotation& rot) {
  if (g_x.cols() != rot.dims.m) {
    throw std::invalid_argument("adjoint_gradient: gradient width " + std::to_string(g_x.cols()) +
                                " != m=" + std::to_string(rot.dims.m));
  }
  return apply_inverse_to_rows(rot, center_rows(g_x).x);
}

/// L(W - M) under fixed rotation and mixture parameters.
inline double residual_loss(const Matrix& w, const Matrix& m, const KroneckerRotation& rot,
                            const GmmParams& p) {
  return nll(okt_centered(w - m, rot), p);
}

/// dL/dM at M.
inline Matrix residual_gradient(const Matrix& w, const Matrix& m, const KroneckerRotation& rot,
                                const GmmParams& p) {
  const Matrix x = okt_centered(w - m, rot);
  const Responsibilities r = responsibilities(x, p);
  return -adjoint_gradient(grad_entries(x, r, p), rot);
}

struct PspOptions {
  double lambda_reg = 0.01;
  int max_doublings = 30;
  int successes_before_halving = 3;
  bool refresh_em = true;
};

struct PspState {
  LowRankResidual residual;
  GmmParams params;
  double mu = 1.0;
  int consecutive_successes = 0;
  int iteration = 0;
  bool stalled = false;  // last step found no descent and was rejected
  std::vector<LossRecord> loss_history;
};

/// μ₀ = 1/(n·m·min_i σ_i²): the per-entry NLL has curvature at most 1/σ_i²
/// and T_R is a contraction, so this bounds the Lipschitz constant of ∇_M L.
inline double initial_mu(const GmmParams& p, Index n, Index m) {
  return 1.0 / (static_cast<double>(n) * static_cast<double>(m) * p.variance.minCoeff());
}

inline PspState init_psp(const Matrix& w, const KroneckerRotation& rot, const GmmParams& params,
                         Index k, const PspOptions& opt = {}) {
  if (k < 1 || k > std::min(w.rows(), w.cols())) {
    throw std::invalid_argument("init_psp: rank out of range");
  }
  PspState s;
  s.residual = LowRankResidual::zero(w.rows(), w.cols(), k);
  s.params = params;
  s.mu = initial_mu(params, w.rows(), w.cols());
  s.loss_history.push_back(
      make_record(LossRecord::Phase::psp, 0, okt_centered(w, rot), params, opt.lambda_reg));
  return s;
}

/// One proximal step: Y = M - (1/μ)·dL/dM, M' = rank-k truncation of Y,
/// doubling μ until L(W - M') <= L(W - M). Then one EM refresh.
inline PspState psp_step(const Matrix& w, const PspState& state, const KroneckerRotation& rot,
                         const PspOptions& opt = {}) {
  PspState next = state;
  const Matrix& m = state.residual.m;
  const Index k = state.residual.k;
  if (w.rows() != m.rows() || w.cols() != m.cols()) {
    throw std::invalid_argument("psp_step: weight shape does not match residual");
  }

  const double loss0 = residual_loss(w, m, rot, state.params);
  const Matrix grad = residual_gradient(w, m, rot, state.params);

  bool accepted = false;
  double mu = state.mu;
  if (grad.cwiseAbs().maxCoeff() == 0.0) {
    accepted = true;  // stationary: M is kept
  } else {
    for (int attempt = 0; attempt <= opt.max_doublings; ++attempt) {
      const Matrix y = m - grad / mu;
      LowRankResidual cand = factor_residual(y, k);
      if (cand.m.allFinite() && residual_loss(w, cand.m, rot, state.params) <= loss0) {
        next.residual = std::move(cand);
        accepted = true;
        break;
      }
      mu *= 2.0;
      next.consecutive_successes = 0;
    }
  }

  next.stalled = !accepted;
  if (accepted) {
    if (++next.consecutive_successes >= opt.successes_before_halving) {
      mu *= 0.5;
      next.consecutive_successes = 0;
    }
  } else {
    mu = state.mu;  // loss cannot increase: residual unchanged
  }
  next.mu = mu;

  Matrix x = okt_centered(w - next.residual.m, rot);
  if (opt.refresh_em) {
    next.params = em_update(x, responsibilities(x, next.params), next.params);
  }
  next.iteration = state.iteration + 1;
  next.loss_history.push_back(
      make_record(LossRecord::Phase::psp, next.iteration, x, next.params, opt.lambda_reg));
  return next;
}

}  // namespace bwla
