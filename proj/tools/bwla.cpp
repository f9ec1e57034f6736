// bwla: quantize matrices with OKT + PSP, run W1AX inference, benchmark the
// packed kernel, inspect artifacts, and run the acceptance demo.
//
// Exit status: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bwla/acceptance.hpp"
#include "bwla/kernel.hpp"
#include "bwla/pipeline.hpp"

namespace fs = std::filesystem;
using namespace bwla;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigFlags {
  std::string config_path;
  std::optional<int> okt_iters, psp_iters, act_bits;
  std::optional<double> rank_ratio, lambda_reg;
  std::optional<std::string> axis, schedule, init;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file; flags below override it")->check(CLI::ExistingFile);
    app->add_option("--okt-iters", okt_iters, "OKT iterations (default 40)");
    app->add_option("--psp-iters", psp_iters, "PSP iterations (default 20)");
    app->add_option("--rank-ratio", rank_ratio, "residual rank / min(rows, cols) (default 0.005)");
    app->add_option("--lambda-reg", lambda_reg, "balance regularizer weight (default 0.01)");
    app->add_option("--act-bits", act_bits, "activation bits for reported error (default 6)");
    app->add_option("--axis", axis, "binarization axis")->check(CLI::IsMember({"row", "column"}));
    app->add_option("--schedule", schedule, "OKT/PSP schedule")->check(CLI::IsMember({"sequential", "interleaved"}));
    app->add_option("--init", init, "initial rotation")->check(CLI::IsMember({"identity", "random"}));
    app->add_option("--seed", seed, "seed for the run and for --synth (default 0)");
  }

  BwlaConfig resolve() const {
    BwlaConfig cfg;
    try {
      if (!config_path.empty()) cfg = load_config_file(config_path);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (okt_iters) cfg.okt_iters = *okt_iters;
    if (psp_iters) cfg.psp_iters = *psp_iters;
    if (rank_ratio) cfg.rank_ratio = *rank_ratio;
    if (lambda_reg) cfg.lambda_reg = *lambda_reg;
    if (act_bits) cfg.act_bits = *act_bits;
    if (axis) cfg.axis = axis_from_string(*axis);
    if (schedule) cfg.schedule = schedule_from_string(*schedule);
    if (init) cfg.init = init_rotation_from_string(*init);
    if (seed) cfg.seed = *seed;
    try {
      cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return cfg;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

void print_summary(const RunReport& r) {
  std::printf("%s: %lldx%lld, kron %lldx%lld, rank %lld%s\n", r.id.c_str(), static_cast<long long>(r.rows),
              static_cast<long long>(r.cols), static_cast<long long>(r.n1), static_cast<long long>(r.n2),
              static_cast<long long>(r.rank), r.degenerate ? " (degenerate: all-zero input)" : "");
  if (!r.trajectory.empty()) {
    std::printf("  nll %.6f -> %.6f over %d OKT + %d PSP iterations\n", r.trajectory.front().nll,
                r.trajectory.back().nll, r.okt_iterations, r.psp_iterations);
  }
  std::printf("  binarization MSE raw %.6g, rotated %.6g; magnitude CV %.4f -> %.4f; %.4f bits/weight\n",
              r.mse_raw, r.mse_rotated, r.cv_before, r.cv_after, r.effective_bits);
}

// --- quantize --------------------------------------------------------------

struct QuantizeArgs {
  std::vector<std::string> inputs;
  std::string synth;
  std::string out;
  std::string out_dir;
  std::string report;
  std::string trajectory;
  bool timings = false;
  ConfigFlags flags;
};

void save_outputs(const BwlaResult& res, const BwlaConfig& cfg, const std::string& artifact,
                  const std::string& report, const std::string& trajectory) {
  save_layer(artifact, res.layer, config_to_json(cfg));
  if (!report.empty()) write_text(report, report_to_json(res.report).dump(2) + "\n");
  if (!trajectory.empty()) write_text(trajectory, trajectory_csv(res.report));
}

int cmd_quantize(const QuantizeArgs& a) {
  const BwlaConfig cfg = a.flags.resolve();
  if (a.inputs.empty() == a.synth.empty()) throw UsageError("give either --input or --synth");

  std::vector<Job> jobs;
  if (!a.synth.empty()) {
    SynthSpec spec;
    try {
      spec = parse_synth_spec(a.synth, cfg.seed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    jobs.push_back({a.synth, gen(spec).w});
  } else {
    for (const auto& path : a.inputs) {
      const Tensor t = read_tensor(path);
      if (t.shape.size() != 2) throw std::runtime_error(path + ": weight tensor must have rank 2");
      jobs.push_back({fs::path(path).stem().string(), tensor_to_matrix(t)});
    }
  }

  if (jobs.size() == 1) {
    if (a.out.empty()) throw UsageError("--out is required");
    const BwlaResult res = run_bwla(jobs[0].w, cfg, {jobs[0].id, a.timings});
    save_outputs(res, cfg, a.out, a.report, a.trajectory);
    print_summary(res.report);
    return 0;
  }

  if (a.out_dir.empty()) throw UsageError("several inputs need --out-dir");
  fs::create_directories(a.out_dir);
  const auto outcomes = run_jobs(jobs, cfg, threads_from_env(), a.timings);
  int failures = 0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!outcomes[i].result) {
      std::fprintf(stderr, "error: %s\n", outcomes[i].error.c_str());
      ++failures;
      continue;
    }
    const fs::path base = fs::path(a.out_dir) / jobs[i].id;
    save_outputs(*outcomes[i].result, cfg, base.string() + ".bwla", base.string() + ".report.json",
                 base.string() + ".trajectory.csv");
    print_summary(outcomes[i].result->report);
  }
  return failures ? kExitRuntime : 0;
}

// --- infer -------------------------------------------------------------------

struct InferArgs {
  std::string artifact;
  std::string activations;
  std::string out = "y.tensor";
  std::optional<int> act_bits;
  bool int_accumulate = false;
};

int cmd_infer(const InferArgs& a) {
  if (a.act_bits && (*a.act_bits < 2 || *a.act_bits > 8)) throw UsageError("--act-bits must be in [2, 8]");
  if (a.int_accumulate && !a.act_bits) throw UsageError("--int-accumulate needs --act-bits");
  const LoadedLayer loaded = load_layer(a.artifact);
  const Tensor xt = read_tensor(a.activations);
  const Matrix x = tensor_to_matrix(xt);
  if (x.cols() != loaded.layer.cols()) {
    throw std::runtime_error("activation length " + std::to_string(x.cols()) + " does not match layer input " +
                             std::to_string(loaded.layer.cols()));
  }
  InferenceOptions opt;
  opt.activation_bits = a.act_bits;
  opt.integer_accumulate = a.int_accumulate;
  Matrix y(x.rows(), loaded.layer.rows());
  for (Index t = 0; t < x.rows(); ++t) y.row(t) = full_inference(loaded.layer, x.row(t).transpose(), opt).transpose();
  Tensor yt = matrix_to_tensor(y);
  if (xt.shape.size() == 1) yt.shape = {static_cast<std::uint64_t>(y.cols())};
  write_tensor(a.out, yt);
  std::printf("wrote %s (%lld token%s x %lld outputs)\n", a.out.c_str(), static_cast<long long>(y.rows()),
              y.rows() == 1 ? "" : "s", static_cast<long long>(y.cols()));
  return 0;
}

// --- bench -------------------------------------------------------------------

struct BenchArgs {
  std::vector<std::string> shapes{"4096x4096", "64x64"};
  int reps = 100;
  std::string csv;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a) {
  if (a.reps < 1) throw UsageError("--reps must be >= 1");
  std::vector<GemvShape> shapes;
  for (const auto& s : a.shapes) {
    const auto x = s.find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument("missing 'x'");
      std::size_t used = 0;
      const long long rows = std::stoll(s.substr(0, x), &used);
      if (used != x) throw std::invalid_argument("trailing characters");
      const long long cols = std::stoll(s.substr(x + 1), &used);
      if (used != s.size() - x - 1) throw std::invalid_argument("trailing characters");
      if (rows < 1 || cols < 1) throw std::invalid_argument("non-positive");
      shapes.push_back({rows, cols});
    } catch (const std::exception&) {
      throw UsageError("bad shape '" + s + "' (expected <rows>x<cols>)");
    }
  }
  const auto rows = bench_gemv(shapes, a.reps, a.seed);
  std::ostringstream csv;
  csv << "shape,variant,median_ns,p10_ns,p90_ns,bytes_touched\n";
  bool all_correct = true;
  for (const auto& r : rows) {
    csv << r.shape << ',' << r.variant << ',' << static_cast<long long>(r.median_ns) << ','
        << static_cast<long long>(r.p10_ns) << ',' << static_cast<long long>(r.p90_ns) << ',' << r.bytes_touched
        << '\n';
    all_correct = all_correct && r.correct;
  }
  if (a.csv.empty() || a.csv == "-") {
    std::cout << csv.str();
  } else {
    write_text(a.csv, csv.str());
  }
  for (std::size_t i = 0; i + 2 < rows.size(); i += 3) {
    std::fprintf(stderr, "%s: packed_f32 %.2fx, packed_int8 %.2fx vs dense_f32\n", rows[i].shape.c_str(),
                 rows[i].median_ns / rows[i + 1].median_ns, rows[i].median_ns / rows[i + 2].median_ns);
  }
  if (!all_correct) {
    std::fprintf(stderr, "error: packed output differs from the dense oracle\n");
    return kExitRuntime;
  }
  return 0;
}

// --- inspect -----------------------------------------------------------------

int cmd_inspect(const std::string& path) {
  const LoadedLayer l = load_layer(path);
  const PackedLayer& L = l.layer;
  const BinarizedWeights& w = L.weights;
  Index positives = 0;
  for (Index i = 0; i < w.rows(); ++i) positives += w.signs.positives_in_row(i);
  const double total = static_cast<double>(w.rows() * w.cols());
  std::printf("artifact      %s (%ju bytes)\n", path.c_str(), static_cast<std::uintmax_t>(fs::file_size(path)));
  std::printf("shape         %lld x %lld (out x in)\n", static_cast<long long>(w.rows()),
              static_cast<long long>(w.cols()));
  std::printf("axis          %s\n", to_string(w.axis));
  std::printf("signs         %zu packed bytes, %.2f%% positive\n", (static_cast<std::size_t>(total) + 7) / 8,
              100.0 * static_cast<double>(positives) / total);
  std::printf("alpha         [%.6g, %.6g]\n", w.alpha.minCoeff(), w.alpha.maxCoeff());
  std::printf("beta          [%.6g, %.6g]\n", w.beta.minCoeff(), w.beta.maxCoeff());
  std::printf("kronecker     %lld x %lld, orthogonality drift %.2e\n", static_cast<long long>(L.rotation.dims.n1),
              static_cast<long long>(L.rotation.dims.n2), L.rotation.orthogonality_drift());
  std::printf("residual      rank %lld, |A|_F %.6g, |B|_F %.6g\n", static_cast<long long>(L.residual.k),
              L.residual.a.norm(), L.residual.b.norm());
  std::printf("weight bytes  %zu (signs + f32 scales)\n", packed_weight_bytes(w));
  std::printf("eff. bits     %.4f per weight (16-bit side parameters)\n",
              effective_bits({w.rows(), w.cols(), w.axis, L.rotation.dims.n1, L.rotation.dims.n2, L.residual.k, 0,
                              16.0}));
  std::printf("config        %s\n", l.config.dump().c_str());
  return 0;
}

// --- demo --------------------------------------------------------------------

int cmd_demo(const std::vector<int>& only) {
  int failed = 0;
  acceptance::run_all(only, [&](const acceptance::CriterionResult& r) {
    std::printf("%s\n", acceptance::format_line(r).c_str());
    std::fflush(stdout);
    if (!r.pass()) ++failed;
  });
  std::printf("%s (%d failed)\n", failed ? "demo: FAIL" : "demo: all criteria pass", failed);
  return failed ? kExitRuntime : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bwla: 1-bit weight quantization with learned Kronecker rotations"};
  app.require_subcommand(1);

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "quantize a matrix file or synthetic matrix");
  quantize->add_option("--input,-i", qa.inputs, "weight tensor file(s), rank 2")->check(CLI::ExistingFile);
  quantize->add_option("--synth", qa.synth, "synthetic matrix, e.g. gaussian:128x144 or planted:64x64");
  quantize->add_option("--out,-o", qa.out, "artifact path (single matrix)");
  quantize->add_option("--out-dir", qa.out_dir, "output directory (several matrices)");
  quantize->add_option("--report", qa.report, "report JSON path");
  quantize->add_option("--trajectory", qa.trajectory, "loss trajectory CSV path");
  quantize->add_flag("--timings", qa.timings, "include wall-clock timings in the report");
  qa.flags.add_to(quantize);

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "run a quantized layer on activation vectors");
  infer->add_option("artifact", ia.artifact, "layer artifact")->required()->check(CLI::ExistingFile);
  infer->add_option("activations", ia.activations, "activation tensor, rank 1 or tokens x in")
      ->required()
      ->check(CLI::ExistingFile);
  infer->add_option("--out,-o", ia.out, "output tensor path")->capture_default_str();
  infer->add_option("--act-bits", ia.act_bits, "quantize activations per token to this many bits");
  infer->add_flag("--int-accumulate", ia.int_accumulate, "use integer codes with int32 accumulation");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "dense vs packed GEMV micro-benchmark");
  bench->add_option("--shapes", ba.shapes, "shapes as <rows>x<cols>")->delimiter(',')->capture_default_str();
  bench->add_option("--reps", ba.reps, "repetitions per variant")->capture_default_str();
  bench->add_option("--csv", ba.csv, "CSV output path (default stdout)");
  bench->add_option("--seed", ba.seed, "content seed")->capture_default_str();

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "summarize a layer artifact");
  inspect->add_option("artifact", inspect_path, "layer artifact")->required()->check(CLI::ExistingFile);

  std::vector<int> demo_only;
  auto* demo = app.add_subcommand("demo", "run the acceptance experiments and print pass/fail");
  demo->add_option("--only", demo_only, "criterion numbers to run")->delimiter(',')->check(CLI::Range(1, 9));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*quantize) return cmd_quantize(qa);
    if (*infer) return cmd_infer(ia);
    if (*bench) return cmd_bench(ba);
    if (*inspect) return cmd_inspect(inspect_path);
    if (*demo) return cmd_demo(demo_only);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
