#pragma once

// The acceptance experiments, shared by the acceptance test binary and
// `bwla demo`. Each criterion reports pass/fail, a one-line detail, and its
// wall time against a budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "bwla/actquant.hpp"
#include "bwla/binarize.hpp"
#include "bwla/gmm.hpp"
#include "bwla/kernel.hpp"
#include "bwla/kronecker.hpp"
#include "bwla/numerics.hpp"
#include "bwla/okt.hpp"
#include "bwla/pipeline.hpp"
#include "bwla/psp.hpp"
#include "bwla/random.hpp"
#include "bwla/synth.hpp"

namespace bwla::acceptance {

struct CriterionResult {
  int number = 0;
  std::string name;
  bool property_holds = false;
  std::string detail;
  double seconds = 0.0;
  double budget_seconds = 0.0;

  bool within_budget() const { return seconds < budget_seconds; }
  bool pass() const { return property_holds && within_budget(); }
};

inline std::string format_line(const CriterionResult& r) {
  char head[128];
  std::snprintf(head, sizeof head, "[%s] %d %-28s", r.pass() ? "PASS" : "FAIL", r.number, r.name.c_str());
  char tail[96];
  std::snprintf(tail, sizeof tail, " (%.1fs / %.0fs budget%s)", r.seconds, r.budget_seconds,
                r.within_budget() ? "" : ", OVER BUDGET");
  return std::string(head) + r.detail + tail;
}

namespace detail {

inline std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

inline double max_rel(const Vector& got, const Vector& want) {
  const double d = want.norm();
  return d > 0 ? (got - want).norm() / d : (got - want).norm();
}

// 1. Monotone descent on Gaussian 128x144 with default config.
inline CriterionResult monotone_descent() {
  CriterionResult r{1, "monotone-descent", false, "", 0, 120};
  int ok = 0, okt_min = 1 << 30, psp_min = 1 << 30, stalled = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    SynthSpec s;
    s.rows = 128;
    s.cols = 144;
    s.seed = 1000 + static_cast<std::uint64_t>(t);
    const auto res = run_bwla(gen(s).w, BwlaConfig{}, {"gaussian-" + std::to_string(t)});
    const auto& rep = res.report;
    if (rep.okt_monotone && rep.psp_monotone) ++ok;
    okt_min = std::min(okt_min, rep.okt_iterations);
    psp_min = std::min(psp_min, rep.psp_iterations);
    stalled += rep.psp_stalled_steps;
  }
  r.property_holds = ok == trials;
  r.detail = fmt("%d/%d runs non-increasing (slack 1e-9); min iterations okt %d psp %d; rejected psp steps %d",
                 ok, trials, okt_min, psp_min, stalled);
  return r;
}

// 2. Per-row magnitude CV decreases under OKT on Gaussian 64x72.
inline CriterionResult bimodalization() {
  CriterionResult r{2, "bimodalization", false, "", 0, 300};
  const int trials = 100;
  int decreased = 0;
  double mean_before = 0, mean_after = 0;
  for (int t = 0; t < trials; ++t) {
    SynthSpec s;
    s.rows = 64;
    s.cols = 72;
    s.seed = 2000 + static_cast<std::uint64_t>(t);
    const Matrix w = gen(s).w;
    const KroneckerRotation id = KroneckerRotation::identity(factor_dims(w.cols()));
    OktState st = init_okt(w, id);
    const double before = mean_magnitude_cv(center_rows(w).x);
    for (int it = 0; it < 40; ++it) st = okt_step(w, st);
    const double after = mean_magnitude_cv(center_rows(apply_to_rows(st.rotation, w)).x);
    if (after < before) ++decreased;
    mean_before += before / trials;
    mean_after += after / trials;
  }
  r.property_holds = decreased >= 95;
  r.detail = fmt("CV decreased in %d/%d trials (need >= 95); mean CV %.4f -> %.4f", decreased, trials,
                 mean_before, mean_after);
  return r;
}

// 3. Optimal-scale error law against m·Var(|x|) and a dense α grid.
inline CriterionResult error_law() {
  CriterionResult r{3, "binarization-error-law", false, "", 0, 10};
  SplitMix64 rng(3, 3);
  const int rows = 100;
  int ok = 0;
  double worst_identity = 0, worst_grid = 0;
  for (int t = 0; t < rows; ++t) {
    const Index m = 1 + static_cast<Index>(rng.below(256));
    const Vector row = gaussian_vector(rng, m, rng.uniform(0.1, 10.0));
    const ScaleError se = optimal_scale_error(as_span(row));
    // Var(|x|) by the raw-moment formula, independent of the two-pass code.
    double s1 = 0, s2 = 0;
    for (Index j = 0; j < m; ++j) {
      s1 += std::abs(row(j));
      s2 += row(j) * row(j);
    }
    const double law = s2 - s1 * s1 / static_cast<double>(m);
    const double id_err = std::abs(se.error - law) / std::max(1.0, s2);
    const double hi = row.cwiseAbs().maxCoeff();
    const int steps = 20000;
    const ScaleError grid = grid_scan_scale(as_span(row), 0.0, hi, steps);
    const double h = hi / steps;
    const double slack = static_cast<double>(m) * h * h / 4.0 + 1e-12 * std::max(1.0, s2);
    const bool grid_ok = grid.error >= se.error - 1e-12 * std::max(1.0, s2) &&
                         grid.error - se.error <= slack && std::abs(grid.alpha_star - se.alpha_star) <= h;
    worst_identity = std::max(worst_identity, id_err);
    worst_grid = std::max(worst_grid, (grid.error - se.error) / std::max(slack, 1e-300));
    if (id_err <= 1e-10 && grid_ok) ++ok;
  }
  r.property_holds = ok == rows;
  r.detail = fmt("%d/%d rows; worst |E*-m·Var|/max(1,Σx²) = %.2e; worst grid gap / slack = %.3f", ok, rows,
                 worst_identity, worst_grid);
  return r;
}

// 4. Rotated+refined binarization beats the raw frame; planted recovery.
inline CriterionResult improves_binarizability() {
  CriterionResult r{4, "bwla-improves-binarization", false, "", 0, 300};
  const int trials = 100;
  int better = 0;
  double ratio_sum = 0;
  for (int t = 0; t < trials; ++t) {
    SynthSpec s;
    s.rows = 64;
    s.cols = 72;
    s.seed = 4000 + static_cast<std::uint64_t>(t);
    const auto res = run_bwla(gen(s).w, BwlaConfig{}, {"gaussian-" + std::to_string(t)});
    if (res.report.mse_rotated < res.report.mse_raw) ++better;
    ratio_sum += res.report.mse_rotated / res.report.mse_raw;
  }
  const std::vector<std::pair<Index, Index>> planted_dims{{64, 64}, {32, 48}, {48, 100}, {16, 36}, {128, 144}};
  int recovered = 0;
  double worst = 0;
  for (std::size_t p = 0; p < planted_dims.size(); ++p) {
    SynthSpec s;
    s.kind = SynthKind::planted_bimodal;
    s.rows = planted_dims[p].first;
    s.cols = planted_dims[p].second;
    s.c_min = 0.5;
    s.c_max = 2.0;
    s.seed = 4500 + p;
    const auto res = run_bwla(gen(s).w, BwlaConfig{}, {"planted-" + std::to_string(p)});
    worst = std::max(worst, res.report.mse_rotated);
    if (res.report.mse_rotated < 1e-8) ++recovered;
  }
  r.property_holds = better >= 95 && recovered == static_cast<int>(planted_dims.size());
  r.detail = fmt("rotated MSE < raw in %d/%d (need >= 95), mean ratio %.4f; planted zero-noise %d/%zu below 1e-8 "
                 "(worst %.2e)",
                 better, trials, ratio_sum / trials, recovered, planted_dims.size(), worst);
  return r;
}

// 5. Forward-pass equivalence without quantization loss.
inline CriterionResult algebraic_equivalence() {
  CriterionResult r{5, "algebraic-equivalence", false, "", 0, 10};
  SplitMix64 rng(5, 5);
  const int trials = 50;
  double worst_dense = 0, worst_packed = 0;
  for (int t = 0; t < trials; ++t) {
    const Index n = 8 + static_cast<Index>(rng.below(120));
    const Index m = 4 + static_cast<Index>(rng.below(200));
    const KroneckerRotation rot = KroneckerRotation::random(factor_dims(m), rng);
    const Index k = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::min<Index>(4, std::min(n, m)))));
    LowRankResidual res;
    res.k = k;
    res.a = gaussian_matrix(rng, n, k, 0.1);
    res.b = gaussian_matrix(rng, k, m, 0.1);
    res.m = res.a * res.b;
    const Axis axis = rng.below(2) ? Axis::row : Axis::column;
    // Rotated-frame weights that are exactly sign·α + β, so the packed layer
    // represents them without quantization error.
    Matrix signs(n, m);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) signs(i, j) = rng.sign();
    BinarizedWeights bw{PackedSigns::from_matrix(signs), Vector(axis == Axis::row ? n : m),
                        Vector(axis == Axis::row ? n : m), axis};
    for (Index c = 0; c < bw.alpha.size(); ++c) {
      bw.alpha(c) = rng.uniform(0.5, 2.0);
      bw.beta(c) = rng.uniform(-0.5, 0.5);
    }
    const Matrix z = dequantize(bw);
    const Matrix w = apply_inverse_to_rows(rot, z) + res.m;
    const Vector x = gaussian_vector(rng, m);
    const Vector want = w * x;
    worst_dense = std::max(worst_dense, max_rel(dense_inference(z, rot, res, x), want));
    const PackedLayer layer{bw, rot, res};
    worst_packed = std::max(worst_packed, max_rel(full_inference(layer, x), want));
    const Matrix gw = gaussian_matrix(rng, n, m);
    const Matrix gz = apply_to_rows(rot, gw - res.m);
    worst_dense = std::max(worst_dense, max_rel(dense_inference(gz, rot, res, x), gw * x));
  }
  r.property_holds = worst_dense < 1e-6 && worst_packed < 1e-6;
  r.detail = fmt("%d instances; worst relative error dequant path %.2e, packed kernel path %.2e (limit 1e-6)", trials,
                 worst_dense, worst_packed);
  return r;
}

// 6. Oracle equivalences.
inline CriterionResult oracle_equivalences() {
  CriterionResult r{6, "oracle-equivalences", false, "", 0, 120};
  SplitMix64 rng(6, 6);

  double kron_worst = 0;
  for (Index m : {4, 6, 9, 12, 16}) {
    for (int t = 0; t < 20; ++t) {
      const KroneckerRotation rot = KroneckerRotation::random(factor_dims(m), rng);
      const Matrix w = gaussian_matrix(rng, 3, m);
      const Matrix fast = apply_to_rows(rot, w);
      const Matrix dense = w * rot.dense();
      kron_worst = std::max(kron_worst, (fast - dense).norm() / dense.norm());
    }
  }
  const bool kron_ok = kron_worst <= 1e-10;

  int procrustes_ok = 0, procrustes_total = 0;
  for (int t = 0; t < 3; ++t) {
    for (Factor f : {Factor::r1, Factor::r2}) {
      ProcrustesProblem p;
      p.factor = f;
      p.w_eff = gaussian_matrix(rng, 5, 4);
      p.rotation = KroneckerRotation::random(factor_dims(4), rng);
      p.targets = gaussian_matrix(rng, 5, 4);
      p.weights = Vector(5);
      for (Index i = 0; i < 5; ++i) p.weights(i) = rng.uniform(0.2, 3.0);
      const Matrix svd_answer = f == Factor::r1 ? procrustes_update_r1(p.w_eff, p.rotation, p.targets, p.weights)
                                                : procrustes_update_r2(p.w_eff, p.rotation, p.targets, p.weights);
      const Matrix brute = brute_force_procrustes(p, 0.1);
      ++procrustes_total;
      if (p.objective(svd_answer) <= p.objective(brute) + 1e-12) ++procrustes_ok;
    }
  }

  double grad_worst = 0;
  for (int t = 0; t < 10; ++t) {
    const Matrix x = gaussian_matrix(rng, 3, 4);
    const GmmParams p = init_params(x);
    const Matrix g = grad_entries(x, responsibilities(x, p), p);
    const Matrix fd = finite_difference_gradient([&](const Matrix& y) { return nll(y, p); }, x, 1e-6);
    grad_worst = std::max(grad_worst, (g - fd).cwiseAbs().maxCoeff() / fd.cwiseAbs().maxCoeff());
  }
  for (int t = 0; t < 10; ++t) {
    const Matrix w = gaussian_matrix(rng, 6, 6);
    const KroneckerRotation rot = KroneckerRotation::random(factor_dims(6), rng);
    const Matrix m0 = gaussian_matrix(rng, 6, 6, 0.1);
    const GmmParams p = init_params(okt_centered(w - m0, rot));
    const Matrix dir = gaussian_matrix(rng, 6, 6);
    const double analytic = (residual_gradient(w, m0, rot, p).array() * dir.array()).sum();
    const double fd = central_difference([&](const Matrix& mm) { return residual_loss(w, mm, rot, p); }, m0, dir, 1e-6);
    grad_worst = std::max(grad_worst, std::abs(analytic - fd) / std::max(std::abs(fd), 1e-12));
  }
  const bool grad_ok = grad_worst <= 1e-4;

  int ey_ok = 0;
  for (int t = 0; t < 100; ++t) {
    const Index rows = 2 + static_cast<Index>(rng.below(7));
    const Index cols = 2 + static_cast<Index>(rng.below(7));
    const Index k = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::min(rows, cols) - 1)));
    const Matrix a = gaussian_matrix(rng, rows, cols);
    const double best = (a - truncated_svd(a, k).reconstruct()).norm();
    bool all = true;
    for (int c = 0; c < 50; ++c) {
      const Matrix comp = gaussian_matrix(rng, rows, k) * gaussian_matrix(rng, k, cols);
      if ((a - comp).norm() < best - 1e-12) all = false;
    }
    if (all) ++ey_ok;
  }

  r.property_holds = kron_ok && procrustes_ok == procrustes_total && grad_ok && ey_ok == 100;
  r.detail = fmt("kronecker-vs-dense worst %.1e (<=1e-10); procrustes-vs-scan %d/%d; gradient-vs-FD worst %.1e "
                 "(<=1e-4); eckart-young %d/100",
                 kron_worst, procrustes_ok, procrustes_total, grad_worst, ey_ok);
  return r;
}

// 7. Packed GEMV speed at 4096x4096.
inline CriterionResult kernel_speedup() {
  CriterionResult r{7, "kernel-speedup", false, "", 0, 120};
  const auto rows = bench_gemv({{4096, 4096}}, 100);
  double dense = 0, packed = 0, ints = 0;
  bool correct = true;
  for (const auto& b : rows) {
    if (b.variant == "dense_f32") dense = b.median_ns;
    if (b.variant == "packed_f32") packed = b.median_ns;
    if (b.variant == "packed_int8") ints = b.median_ns;
    correct = correct && b.correct;
  }
  const double speedup = dense / packed;
  r.property_holds = correct && speedup >= 2.0;
  r.detail = fmt("median dense %.0f us, packed %.0f us (speedup %.2fx, need >= 2), int8-code path %.2fx; "
                 "exact vs dense: %s",
                 dense / 1e3, packed / 1e3, speedup, dense / ints, correct ? "yes" : "NO");
  return r;
}

// 8. Activation quantization bound and tail suppression.
inline CriterionResult activation_quantization() {
  CriterionResult r{8, "activation-quantization", false, "", 0, 60};
  SplitMix64 rng(8, 8);
  const int tokens = 100000;
  long long violations = 0;
  for (int t = 0; t < tokens; ++t) {
    const Index m = 1 + static_cast<Index>(rng.below(64));
    const double scale = std::exp(rng.uniform(-8.0, 8.0));
    const double shift = rng.uniform(-2.0, 2.0) * scale;
    Vector x(m);
    for (Index j = 0; j < m; ++j) x(j) = shift + scale * rng.gaussian();
    const QuantizedActivations q = quantize_token(x, 6);
    const Vector d = dequantize_token(q);
    for (Index j = 0; j < m; ++j) {
      const double mag = std::max(std::abs(x(j)), std::abs(d(j)));
      const double ulp = std::nextafter(mag, std::numeric_limits<double>::infinity()) - mag;
      if (std::abs(x(j) - d(j)) > q.scale / 2 + ulp) ++violations;
    }
  }
  const int trials = 200;
  int reduced = 0;
  for (int t = 0; t < trials; ++t) {
    SynthSpec s;
    s.kind = SynthKind::heavy_tail_acts;
    s.rows = 1;
    s.cols = 1024;
    s.seed = 8000 + static_cast<std::uint64_t>(t);
    const Vector x = gen(s).w.row(0).transpose();
    const KroneckerRotation rot = KroneckerRotation::random(factor_dims(1024), rng);
    if (tail_stats(apply_transpose_to_vec(rot, x)).max_over_rms < tail_stats(x).max_over_rms) ++reduced;
  }
  r.property_holds = violations == 0 && reduced >= 180;
  r.detail = fmt("6-bit bound violations %lld over %d tokens; rotation lowered max/RMS in %d/%d heavy-tail trials "
                 "(need >= 180)",
                 violations, tokens, reduced, trials);
  return r;
}

// 9. Determinism and artifact round trip.
inline CriterionResult determinism() {
  CriterionResult r{9, "determinism-round-trip", false, "", 0, 30};
  SynthSpec s;
  s.rows = 64;
  s.cols = 72;
  s.seed = 9;
  const Matrix w = gen(s).w;
  BwlaConfig cfg;
  cfg.seed = 7;
  cfg.init = InitRotation::random;
  const auto a = run_bwla(w, cfg, {"det"});
  const auto b = run_bwla(w, cfg, {"det"});
  const auto bytes_a = encode_layer(a.layer, config_to_json(cfg));
  const auto bytes_b = encode_layer(b.layer, config_to_json(cfg));
  const bool same_artifact = bytes_a == bytes_b;
  const bool same_report = report_to_json(a.report).dump() == report_to_json(b.report).dump() &&
                           trajectory_csv(a.report) == trajectory_csv(b.report);
  const bool same_gen = gen(s).w == w;

  const LoadedLayer loaded = decode_layer(bytes_a);
  const bool resave_same = encode_layer(loaded.layer, loaded.config) == bytes_a;
  const PackedLayer f32 = round_trip_precision(a.layer);
  const bool exact_values = loaded.layer.weights.signs == a.layer.weights.signs &&
                            loaded.layer.weights.alpha == f32.weights.alpha &&
                            loaded.layer.weights.beta == f32.weights.beta &&
                            loaded.layer.rotation.r1 == f32.rotation.r1 && loaded.layer.rotation.r2 == f32.rotation.r2 &&
                            loaded.layer.residual.a == f32.residual.a && loaded.layer.residual.b == f32.residual.b;

  std::vector<Job> jobs;
  for (int j = 0; j < 3; ++j) {
    SynthSpec js = s;
    js.rows = 32;
    js.cols = 36;
    js.seed = 90 + static_cast<std::uint64_t>(j);
    jobs.push_back({"job" + std::to_string(j), gen(js).w});
  }
  const auto one = run_jobs(jobs, cfg, 1);
  const auto three = run_jobs(jobs, cfg, 3);
  bool threads_same = true;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    threads_same = threads_same && one[j].result && three[j].result &&
                   encode_layer(one[j].result->layer) == encode_layer(three[j].result->layer);
  }

  r.property_holds = same_artifact && same_report && same_gen && resave_same && exact_values && threads_same;
  r.detail = fmt("artifact bytes identical: %s; report identical: %s; synth identical: %s; save-load-save "
                 "identical: %s; loaded values bit-exact: %s; 1 vs 3 threads identical: %s",
                 same_artifact ? "yes" : "no", same_report ? "yes" : "no", same_gen ? "yes" : "no",
                 resave_same ? "yes" : "no", exact_values ? "yes" : "no", threads_same ? "yes" : "no");
  return r;
}

}  // namespace detail

struct Criterion {
  int number;
  std::function<CriterionResult()> run;
};

inline std::vector<Criterion> criteria() {
  return {{1, detail::monotone_descent},      {2, detail::bimodalization},
          {3, detail::error_law},             {4, detail::improves_binarizability},
          {5, detail::algebraic_equivalence}, {6, detail::oracle_equivalences},
          {7, detail::kernel_speedup},        {8, detail::activation_quantization},
          {9, detail::determinism}};
}

/// Runs the selected criteria (all when `only` is empty), timing each and
/// turning exceptions into failures.
inline std::vector<CriterionResult> run_all(const std::vector<int>& only = {},
                                            const std::function<void(const CriterionResult&)>& on_result = {}) {
  std::vector<CriterionResult> out;
  for (const Criterion& c : criteria()) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.number) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult res;
    try {
      res = c.run();
    } catch (const std::exception& e) {
      res.number = c.number;
      res.name = "criterion-" + std::to_string(c.number);
      res.property_holds = false;
      res.detail = std::string("exception: ") + e.what();
      res.budget_seconds = 1;
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(res);
    out.push_back(res);
  }
  return out;
}

}  // namespace bwla::acceptance
