#include <gtest/gtest.h>

#include "bwla/okt.hpp"
#include "bwla/synth.hpp"
#include "test_util.hpp"

using namespace bwla;
using bwla::test::rel_err;

namespace {

OktState run_okt(const Matrix& w, int iters, const OktOptions& opt = {}) {
  OktState s = init_okt(w, KroneckerRotation::identity(factor_dims(w.cols())), opt);
  for (int t = 0; t < iters; ++t) s = okt_step(w, s, opt);
  return s;
}

ProcrustesProblem random_problem(std::uint64_t seed, Index rows, Index m, Factor f) {
  SplitMix64 rng(seed, 11);
  ProcrustesProblem p;
  p.w_eff = gaussian_matrix(rng, rows, m);
  p.rotation = KroneckerRotation::random(factor_dims(m), rng);
  p.targets = gaussian_matrix(rng, rows, m);
  p.weights = Vector(rows);
  for (Index i = 0; i < rows; ++i) p.weights(i) = rng.uniform(0.2, 3.0);
  p.factor = f;
  return p;
}

}  // namespace

TEST(CenterRows, SubtractsMean) {
  Matrix w(1, 3);
  w << 1, 2, 3;
  Matrix want(1, 3);
  want << -1, 0, 1;
  EXPECT_EQ(center_rows(w).x, want);
}

TEST(CenterRows, IdempotentAndZeroMean) {
  SplitMix64 rng(1);
  const Matrix w = gaussian_matrix(rng, 5, 13, 4.0);
  const Matrix once = center_rows(w).x;
  EXPECT_LT((center_rows(once).x - once).cwiseAbs().maxCoeff(), 1e-15);
  for (Index i = 0; i < once.rows(); ++i) {
    const double rms = std::sqrt(w.row(i).squaredNorm() / 13.0);
    EXPECT_LE(std::abs(once.row(i).sum()), 1e-9 * 13 * rms);
  }
}

TEST(MmSurrogate, ZeroAtPerfectFit) {
  Matrix x(1, 4);
  x << 1, -1, 1, -1;
  GmmParams p{Vector::Constant(1, 1.0), Vector::Constant(1, 1e-4), Vector::Constant(1, 1e-8)};
  EXPECT_EQ(mm_surrogate(CenteredView{x}, responsibilities(x, p), p), 0.0);
}

TEST(MmSurrogate, SymmetricCancellation) {
  GmmParams p{Vector::Constant(1, 1.0), Vector::Constant(1, 1.0), Vector::Constant(1, 1e-8)};
  const Matrix x = Matrix::Zero(1, 1);
  EXPECT_EQ(mm_surrogate(CenteredView{x}, responsibilities(x, p), p), 0.0);
}

TEST(MmSurrogate, ProcrustesPairNeverIncreasesIt) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    SplitMix64 rng(s, 2);
    const Matrix w = gaussian_matrix(rng, 12, 20);
    KroneckerRotation rot = KroneckerRotation::random(factor_dims(20), rng);
    const Matrix z = apply_to_rows(rot, w);
    const CenteredView x = center_rows(z);
    const GmmParams p = init_params(x.x);
    const Responsibilities r = responsibilities(x.x, p);
    const Vector lambda = surrogate_weights(p);
    const double before = mm_surrogate(x, r, p);
    rot.r1 = procrustes_update_r1(w, rot, procrustes_targets(z, r, p), lambda);
    const double mid = mm_surrogate(center_rows(apply_to_rows(rot, w)), r, p);
    rot.r2 = procrustes_update_r2(w, rot, procrustes_targets(apply_to_rows(rot, w), r, p), lambda);
    const double after = mm_surrogate(center_rows(apply_to_rows(rot, w)), r, p);
    ASSERT_LE(mid, before + 1e-9);
    ASSERT_LE(after, mid + 1e-9);
  }
}

TEST(Procrustes, IdentityFixedPoint) {
  SplitMix64 rng(3);
  const Matrix w = gaussian_matrix(rng, 10, 12);
  const auto rot = KroneckerRotation::identity(factor_dims(12));
  const Vector lambda = Vector::Ones(10);
  EXPECT_LT((procrustes_update_r1(w, rot, w, lambda) - rot.r1).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((procrustes_update_r2(w, rot, w, lambda) - rot.r2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Procrustes, ZeroCrossMatrixGivesIdentity) {
  const auto rot = KroneckerRotation::identity(factor_dims(6));
  const Matrix w = Matrix::Ones(2, 6);
  EXPECT_EQ(procrustes_update_r1(w, rot, Matrix::Zero(2, 6), Vector::Ones(2)), rot.r1);
}

TEST(Procrustes, BruteForceScanAgreesForR1) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    ProcrustesProblem p = random_problem(s, 1, 4, Factor::r1);
    ASSERT_EQ(p.rotation.dims.n1, 2);
    const Matrix r1 = procrustes_update_r1(p.w_eff, p.rotation, p.targets, p.weights);
    const double svd_value = p.objective(r1);
    const double scan_value = p.objective(brute_force_procrustes(p));
    EXPECT_LE(svd_value, scan_value + 1e-12);
    EXPECT_LE(scan_value, svd_value + procrustes_grid_slack(p));
  }
}

TEST(Procrustes, BruteForceScanAgreesForR2) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    ProcrustesProblem p = random_problem(s + 10, 3, 6, Factor::r2);
    ASSERT_EQ(p.rotation.dims.n2, 2);
    const Matrix r2 = procrustes_update_r2(p.w_eff, p.rotation, p.targets, p.weights);
    const double svd_value = p.objective(r2);
    const double scan_value = p.objective(brute_force_procrustes(p));
    EXPECT_LE(svd_value, scan_value + 1e-12);
    EXPECT_LE(scan_value, svd_value + procrustes_grid_slack(p));
  }
}

TEST(Procrustes, WeightScaleInvariance) {
  const ProcrustesProblem p = random_problem(20, 5, 12, Factor::r1);
  const Vector w10 = 10.0 * p.weights;
  EXPECT_LT((procrustes_update_r1(p.w_eff, p.rotation, p.targets, p.weights) -
             procrustes_update_r1(p.w_eff, p.rotation, p.targets, w10)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((procrustes_update_r2(p.w_eff, p.rotation, p.targets, p.weights) -
             procrustes_update_r2(p.w_eff, p.rotation, p.targets, w10)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Procrustes, UpdatesAreOrthogonal) {
  const ProcrustesProblem p = random_problem(21, 7, 20, Factor::r1);
  EXPECT_LT(max_abs_deviation_from_identity(procrustes_update_r1(p.w_eff, p.rotation, p.targets, p.weights)), 1e-12);
  EXPECT_LT(max_abs_deviation_from_identity(procrustes_update_r2(p.w_eff, p.rotation, p.targets, p.weights)), 1e-12);
}

TEST(Procrustes, RejectsShapeMismatch) {
  const auto rot = KroneckerRotation::identity(factor_dims(6));
  EXPECT_THROW(procrustes_update_r1(Matrix::Zero(2, 6), rot, Matrix::Zero(3, 6), Vector::Ones(2)),
               std::invalid_argument);
  EXPECT_THROW(procrustes_update_r2(Matrix::Zero(2, 6), rot, Matrix::Zero(2, 6), Vector::Ones(3)),
               std::invalid_argument);
}

TEST(OktStep, PlantedInstanceRecoversBimodality) {
  SynthSpec spec;
  spec.kind = SynthKind::planted_bimodal;
  spec.rows = 64;
  spec.cols = 64;
  spec.seed = 1;
  spec.c_min = 0.5;
  spec.c_max = 2.0;
  const SynthInstance inst = gen(spec);
  const OktState s = run_okt(inst.w, 40);
  const Matrix x = center_rows(apply_to_rows(s.rotation, inst.w)).x;
  EXPECT_GT(mean_magnitude_cv(center_rows(inst.w).x), 0.3);
  EXPECT_LT(mean_magnitude_cv(x), 0.05);
}

TEST(OktStep, ZeroMatrixIsAFixedPoint) {
  const Matrix w = Matrix::Zero(4, 6);
  const OktState s0 = init_okt(w, KroneckerRotation::identity(factor_dims(6)));
  OktState s = s0;
  for (int t = 0; t < 3; ++t) s = okt_step(w, s);
  EXPECT_EQ(s.rotation.r1, s0.rotation.r1);
  EXPECT_EQ(s.rotation.r2, s0.rotation.r2);
  EXPECT_EQ(s.params.center, s0.params.center);
  ASSERT_EQ(s.loss_history.size(), 4u);
  for (const auto& rec : s.loss_history) EXPECT_EQ(rec.nll, s0.loss_history[0].nll);
}

TEST(OktStep, GaussianRunsDescendAndStayOrthogonal) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SynthSpec spec;
    spec.rows = 32;
    spec.cols = 36;
    spec.seed = seed;
    spec.sigma_min = 0.5;
    spec.sigma_max = 2.0;
    const Matrix w = gen(spec).w;
    OktState s = init_okt(w, KroneckerRotation::identity(factor_dims(36)));
    for (int t = 0; t < 40; ++t) {
      s = okt_step(w, s);
      ASSERT_LT(s.rotation.orthogonality_drift(), 1e-8);
    }
    const auto& h = s.loss_history;
    for (std::size_t k = 1; k < h.size(); ++k) ASSERT_LE(h[k].nll, h[k - 1].nll + 1e-9) << seed << ":" << k;

    SplitMix64 rng(seed, 7);
    const Vector x = gaussian_vector(rng, 36);
    const Vector direct = w * x;
    const Vector rotated = apply_to_rows(s.rotation, w) * apply_transpose_to_vec(s.rotation, x);
    ASSERT_LT(rel_err(rotated, direct), 1e-6);
  }
}

TEST(OktStep, CoefficientOfVariationDecreases) {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SynthSpec spec;
    spec.rows = 48;
    spec.cols = 64;
    spec.seed = 100 + seed;
    const Matrix w = gen(spec).w;
    const OktState s = run_okt(w, 40);
    improved += mean_magnitude_cv(center_rows(apply_to_rows(s.rotation, w)).x) < mean_magnitude_cv(center_rows(w).x);
  }
  EXPECT_GE(improved, 19);
}

TEST(OktStep, LossPlateausWithinBudget) {
  SynthSpec spec;
  spec.rows = 64;
  spec.cols = 72;
  spec.seed = 5;
  const Matrix w = gen(spec).w;
  const OktState s = run_okt(w, 40);
  const auto& h = s.loss_history;
  const double last = h.back().total(), prev = h[h.size() - 2].total();
  EXPECT_LT(std::abs(prev - last) / std::abs(prev), 1e-4);
}

TEST(OktStep, RejectsShapeMismatch) {
  const Matrix w = Matrix::Ones(3, 6);
  const OktState s = init_okt(w, KroneckerRotation::identity(factor_dims(6)));
  EXPECT_THROW(okt_step(Matrix::Ones(3, 8), s), std::invalid_argument);
  EXPECT_THROW(okt_step(Matrix::Ones(4, 6), s), std::invalid_argument);
}
