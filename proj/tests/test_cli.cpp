#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bwla/pipeline.hpp"

namespace fs = std::filesystem;
using namespace bwla;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("bwla_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Exit status of `bwla <args>`, with stdout captured into out_.
  int run(const std::string& args) {
    const fs::path log = dir_ / "stdout.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && '" BWLA_CLI_PATH "' " + args + " > '" +
                            log.string() + "' 2> '" + (dir_ / "stderr.txt").string() + "'";
    const int status = std::system(cmd.c_str());
    out_ = slurp(log);
    err_ = slurp(dir_ / "stderr.txt");
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
  std::string out_, err_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("quantize --synth gaussian:8x8 --out a.bwla --okt-iters -1"), 1);
  EXPECT_EQ(run("quantize --synth cube:8x8 --out a.bwla"), 1);
  EXPECT_EQ(run("quantize --synth gaussian:8x8"), 1);
}

TEST_F(Cli, QuantizeWritesArtifactReportAndTrajectory) {
  ASSERT_EQ(run("quantize --synth gaussian:128x144 --seed 7 --out l.bwla --report r.json --trajectory t.csv"), 0)
      << err_;
  const LoadedLayer l = load_layer(path("l.bwla"));
  EXPECT_EQ(l.layer.rows(), 128);
  EXPECT_EQ(l.layer.cols(), 144);
  const json report = json::parse(slurp(path("r.json")));
  EXPECT_TRUE(report_schema_errors(report).empty());
  EXPECT_FALSE(report.contains("timings"));
  EXPECT_LT(report.at("mse_rotated").get<double>(), report.at("mse_raw").get<double>());
  EXPECT_EQ(slurp(path("t.csv")).rfind("phase,iteration,nll,regularizer,surrogate,total\n", 0), 0u);

  // Same seed, same bytes.
  ASSERT_EQ(run("quantize --synth gaussian:128x144 --seed 7 --out l2.bwla --report r2.json"), 0);
  EXPECT_EQ(detail::read_file(path("l.bwla")), detail::read_file(path("l2.bwla")));
  EXPECT_EQ(slurp(path("r.json")), slurp(path("r2.json")));

  ASSERT_EQ(run("quantize --synth gaussian:16x20 --okt-iters 2 --psp-iters 1 --out t.bwla --report tr.json --timings"),
            0);
  EXPECT_TRUE(json::parse(slurp(path("tr.json"))).contains("timings"));
}

TEST_F(Cli, ConfigFileAndOverrides) {
  std::ofstream(path("c.json")) << R"({"okt_iters": 3, "psp_iters": 2, "rank_ratio": 0.1})";
  ASSERT_EQ(run("quantize --synth gaussian:20x24 --config c.json --psp-iters 1 --out a.bwla --report r.json"), 0)
      << err_;
  const json cfg = json::parse(slurp(path("r.json"))).at("config");
  EXPECT_EQ(cfg.at("okt_iters"), 3);
  EXPECT_EQ(cfg.at("psp_iters"), 1);
  EXPECT_DOUBLE_EQ(cfg.at("rank_ratio").get<double>(), 0.1);
  EXPECT_EQ(load_layer(path("a.bwla")).config.at("okt_iters"), 3);

  std::ofstream(path("bad.json")) << R"({"okt_iterz": 3})";
  EXPECT_EQ(run("quantize --synth gaussian:20x24 --config bad.json --out a.bwla"), 1);
  std::ofstream(path("broken.json")) << "{";
  EXPECT_EQ(run("quantize --synth gaussian:20x24 --config broken.json --out a.bwla"), 1);
}

TEST_F(Cli, SeveralInputsUseOutDir) {
  SplitMix64 rng(1);
  write_tensor(path("w1.tensor"), matrix_to_tensor(gaussian_matrix(rng, 8, 12)));
  write_tensor(path("w2.tensor"), matrix_to_tensor(gaussian_matrix(rng, 10, 16)));
  EXPECT_EQ(run("quantize -i w1.tensor w2.tensor --okt-iters 2 --psp-iters 1"), 1);
  ASSERT_EQ(run("quantize -i w1.tensor w2.tensor --okt-iters 2 --psp-iters 1 --out-dir outs"), 0) << err_;
  for (const char* id : {"w1", "w2"}) {
    EXPECT_TRUE(fs::exists(dir_ / "outs" / (std::string(id) + ".bwla")));
    EXPECT_TRUE(fs::exists(dir_ / "outs" / (std::string(id) + ".report.json")));
    EXPECT_TRUE(fs::exists(dir_ / "outs" / (std::string(id) + ".trajectory.csv")));
  }
  EXPECT_EQ(load_layer(path("outs/w2.bwla")).layer.cols(), 16);
}

TEST_F(Cli, InferMatchesLibrary) {
  ASSERT_EQ(run("quantize --synth gaussian:32x36 --okt-iters 4 --psp-iters 2 --out l.bwla"), 0) << err_;
  SplitMix64 rng(3);
  const Matrix x = gaussian_matrix(rng, 5, 36);
  write_tensor(path("x.tensor"), matrix_to_tensor(x));
  const PackedLayer layer = load_layer(path("l.bwla")).layer;

  ASSERT_EQ(run("infer l.bwla x.tensor"), 0) << err_;
  const Tensor y = read_tensor(path("y.tensor"));
  ASSERT_EQ(y.shape, (std::vector<std::uint64_t>{5, 32}));
  const Matrix ym = tensor_to_matrix(y);
  for (Index t = 0; t < 5; ++t) {
    const Vector want = full_inference(layer, x.row(t).transpose());
    EXPECT_LT((ym.row(t).transpose() - want).norm(), 1e-5 * want.norm());
  }

  ASSERT_EQ(run("infer l.bwla x.tensor --act-bits 6 --int-accumulate -o yq.tensor"), 0) << err_;
  EXPECT_EQ(read_tensor(path("yq.tensor")).shape, y.shape);

  write_tensor(path("v.tensor"), matrix_to_tensor(x.row(0)));
  Tensor v = read_tensor(path("v.tensor"));
  v.shape = {36};
  write_tensor(path("v.tensor"), v);
  ASSERT_EQ(run("infer l.bwla v.tensor -o yv.tensor"), 0) << err_;
  EXPECT_EQ(read_tensor(path("yv.tensor")).shape, (std::vector<std::uint64_t>{32}));

  EXPECT_EQ(run("infer l.bwla x.tensor --int-accumulate"), 1);
  write_tensor(path("short.tensor"), matrix_to_tensor(gaussian_matrix(rng, 1, 35)));
  EXPECT_EQ(run("infer l.bwla short.tensor"), 2);
}

TEST_F(Cli, CorruptArtifactIsRuntimeError) {
  std::ofstream(path("junk.bwla")) << "definitely not an artifact";
  std::ofstream(path("x.tensor")) << "nor a tensor";
  EXPECT_EQ(run("inspect junk.bwla"), 2);
  EXPECT_NE(err_.find("bad magic"), std::string::npos);
  EXPECT_EQ(run("infer junk.bwla x.tensor"), 2);
}

TEST_F(Cli, InspectSummarizesArtifact) {
  ASSERT_EQ(run("quantize --synth gaussian:24x30 --okt-iters 2 --psp-iters 1 --out l.bwla"), 0) << err_;
  ASSERT_EQ(run("inspect l.bwla"), 0) << err_;
  EXPECT_NE(out_.find("24"), std::string::npos);
  EXPECT_NE(out_.find("30"), std::string::npos);
}

TEST_F(Cli, BenchWritesCsv) {
  ASSERT_EQ(run("bench --shapes 64x64 33x130 --reps 3 --csv b.csv"), 0) << err_;
  const std::string csv = slurp(path("b.csv"));
  EXPECT_EQ(csv.rfind("shape,variant,median_ns,p10_ns,p90_ns,bytes_touched\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(run("bench --shapes 64by64"), 1);
}

TEST_F(Cli, DemoSingleCriterion) {
  EXPECT_EQ(run("demo --only 3"), 0) << out_ << err_;
  EXPECT_NE(out_.find("PASS"), std::string::npos);
}
