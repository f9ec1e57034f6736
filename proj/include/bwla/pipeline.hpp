#pragma once

// End-to-end BWLA: OKT then PSP, final binarization in the rotated frame,
// metrics, and the tensor / artifact file formats.

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <iterator>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "bwla/actquant.hpp"
#include "bwla/binarize.hpp"
#include "bwla/gmm.hpp"
#include "bwla/kernel.hpp"
#include "bwla/kronecker.hpp"
#include "bwla/numerics.hpp"
#include "bwla/okt.hpp"
#include "bwla/psp.hpp"
#include "bwla/random.hpp"
#include "bwla/synth.hpp"

namespace bwla {

using json = nlohmann::json;

class BwlaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Schedule : std::uint8_t { sequential, interleaved };
enum class InitRotation : std::uint8_t { identity, random };

inline const char* to_string(Schedule s) { return s == Schedule::sequential ? "sequential" : "interleaved"; }
inline const char* to_string(InitRotation r) { return r == InitRotation::identity ? "identity" : "random"; }

inline Schedule schedule_from_string(const std::string& s) {
  if (s == "sequential") return Schedule::sequential;
  if (s == "interleaved") return Schedule::interleaved;
  throw std::invalid_argument("unknown schedule '" + s + "'");
}

inline InitRotation init_rotation_from_string(const std::string& s) {
  if (s == "identity") return InitRotation::identity;
  if (s == "random") return InitRotation::random;
  throw std::invalid_argument("unknown init rotation '" + s + "'");
}

struct BwlaConfig {
  int okt_iters = 40;
  int psp_iters = 20;
  double rank_ratio = 0.005;
  double lambda_reg = 0.01;
  double sigma_floor_rel = 1e-4;  // σ_min,i = sigma_floor_rel · RMS_i at init
  int act_bits = 6;
  Axis axis = Axis::row;
  Schedule schedule = Schedule::sequential;
  InitRotation init = InitRotation::identity;
  std::uint64_t seed = 0;
  double early_stop_tol = 1e-6;  // relative nll change, over early_stop_window steps
  int early_stop_window = 3;

  void validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("BwlaConfig: " + msg); };
    if (okt_iters < 0 || psp_iters < 0) fail("iteration counts must be >= 0");
    if (!(rank_ratio >= 0 && rank_ratio <= 1)) fail("rank_ratio must be in [0, 1]");
    if (!(lambda_reg >= 0)) fail("lambda_reg must be >= 0");
    if (!(sigma_floor_rel > 0)) fail("sigma_floor_rel must be > 0");
    if (act_bits < 2 || act_bits > 8) fail("act_bits must be in [2, 8]");
    if (!(early_stop_tol >= 0)) fail("early_stop_tol must be >= 0");
    if (early_stop_window < 1) fail("early_stop_window must be >= 1");
  }
};

inline json config_to_json(const BwlaConfig& c) {
  return json{{"okt_iters", c.okt_iters},
              {"psp_iters", c.psp_iters},
              {"rank_ratio", c.rank_ratio},
              {"lambda_reg", c.lambda_reg},
              {"sigma_floor_rel", c.sigma_floor_rel},
              {"act_bits", c.act_bits},
              {"axis", to_string(c.axis)},
              {"schedule", to_string(c.schedule)},
              {"init", to_string(c.init)},
              {"seed", c.seed},
              {"early_stop_tol", c.early_stop_tol},
              {"early_stop_window", c.early_stop_window}};
}

/// Overlay the keys present in `j` onto `base`; unknown keys are rejected.
inline BwlaConfig config_from_json(const json& j, BwlaConfig base = {}) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "okt_iters") base.okt_iters = v.get<int>();
      else if (key == "psp_iters") base.psp_iters = v.get<int>();
      else if (key == "rank_ratio") base.rank_ratio = v.get<double>();
      else if (key == "lambda_reg") base.lambda_reg = v.get<double>();
      else if (key == "sigma_floor_rel") base.sigma_floor_rel = v.get<double>();
      else if (key == "act_bits") base.act_bits = v.get<int>();
      else if (key == "axis") base.axis = axis_from_string(v.get<std::string>());
      else if (key == "schedule") base.schedule = schedule_from_string(v.get<std::string>());
      else if (key == "init") base.init = init_rotation_from_string(v.get<std::string>());
      else if (key == "seed") base.seed = v.get<std::uint64_t>();
      else if (key == "early_stop_tol") base.early_stop_tol = v.get<double>();
      else if (key == "early_stop_window") base.early_stop_window = v.get<int>();
      else throw std::invalid_argument("unknown key");
    } catch (const json::exception& e) {
      throw std::invalid_argument("config key '" + key + "': " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config key '" + key + "': " + e.what());
    }
  }
  base.validate();
  return base;
}

inline BwlaConfig load_config_file(const std::string& path, BwlaConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config file '" + path + "': " + e.what());
  }
  return config_from_json(j, base);
}

// --- run --------------------------------------------------------------------

struct RunReport {
  static constexpr int kSchemaVersion = 1;

  std::string id;
  BwlaConfig config;
  Index rows = 0, cols = 0, n1 = 0, n2 = 0, rank = 0;
  bool degenerate = false;
  std::vector<LossRecord> trajectory;
  int okt_iterations = 0;
  int psp_iterations = 0;
  int psp_stalled_steps = 0;
  bool okt_monotone = true;
  bool psp_monotone = true;
  double mse_raw = 0.0;
  double mse_rotated = 0.0;
  double cv_before = 0.0;
  double cv_after = 0.0;
  double effective_bits = 0.0;
  std::optional<TailStats> tails_before;
  std::optional<TailStats> tails_after;
  double forward_algebra_error = 0.0;     // rotation + residual, no quantization
  double forward_binarized_error = 0.0;   // packed 1-bit weights, full activations
  double forward_act_quant_error = 0.0;   // packed 1-bit weights, act_bits activations
  std::optional<double> seconds_okt;
  std::optional<double> seconds_psp;
};

struct RunOptions {
  std::string id = "matrix";
  bool timings = false;  // wall-clock fields make reports non-reproducible
};

struct BwlaResult {
  PackedLayer layer;
  RunReport report;
};

namespace detail {

inline bool non_increasing(const std::vector<LossRecord>& h, double slack) {
  for (std::size_t t = 1; t < h.size(); ++t) {
    if (h[t].nll > h[t - 1].nll + slack) return false;
  }
  return true;
}

inline bool plateaued(const std::vector<LossRecord>& h, double tol, int window) {
  if (tol <= 0 || static_cast<int>(h.size()) <= window) return false;
  for (std::size_t t = h.size() - static_cast<std::size_t>(window); t < h.size(); ++t) {
    const double prev = h[t - 1].nll;
    if (std::abs(h[t].nll - prev) > tol * std::max(1.0, std::abs(prev))) return false;
  }
  return true;
}

inline double relative_error(const Vector& got, const Vector& want) {
  const double denom = want.norm();
  const double diff = (got - want).norm();
  return denom > 0 ? diff / denom : diff;
}

inline std::optional<TailStats> maybe_tail_stats(const Matrix& m) {
  const Vector v = flatten(m);
  if (v.size() < 4) return std::nullopt;
  const double mean = v.mean();
  if (!((v.array() - mean).square().sum() > 0)) return std::nullopt;
  return tail_stats(v);
}

}  // namespace detail

inline BwlaResult run_bwla_unchecked(const Matrix& w, const BwlaConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  if (w.rows() < 1 || w.cols() < 1) throw std::invalid_argument("empty weight matrix");
  require_finite(w, "run_bwla");
  using clock = std::chrono::steady_clock;

  const Index n = w.rows(), m = w.cols();
  const KroneckerDims dims = factor_dims(m);
  RunReport rep;
  rep.id = opt.id;
  rep.config = cfg;
  rep.rows = n;
  rep.cols = m;
  rep.n1 = dims.n1;
  rep.n2 = dims.n2;

  KroneckerRotation rot = KroneckerRotation::identity(dims);
  if (cfg.init == InitRotation::random) {
    SplitMix64 rng(cfg.seed, 0x52'4F'54);
    rot = KroneckerRotation::random(dims, rng);
  }

  BwlaResult out;
  const Index k = residual_rank(n, m, cfg.rank_ratio);
  LowRankResidual residual = LowRankResidual::zero(n, m, k);
  rep.degenerate = w.cwiseAbs().maxCoeff() == 0.0;

  const OktOptions okt_opt{cfg.lambda_reg, GmmFloorRule{cfg.sigma_floor_rel, 1e-30}};
  const PspOptions psp_opt{cfg.lambda_reg};
  rep.cv_before = mean_magnitude_cv(center_rows(apply_to_rows(rot, w)).x);

  if (!rep.degenerate) {
    OktState okt = init_okt(w, rot, okt_opt);
    const auto t0 = clock::now();
    if (cfg.schedule == Schedule::sequential) {
      for (int t = 0; t < cfg.okt_iters; ++t) {
        okt = okt_step(w, okt, okt_opt);
        if (detail::plateaued(okt.loss_history, cfg.early_stop_tol, cfg.early_stop_window)) break;
      }
      const auto t1 = clock::now();
      PspState psp = init_psp(w, okt.rotation, okt.params, k, psp_opt);
      for (int t = 0; t < cfg.psp_iters; ++t) {
        psp = psp_step(w, psp, okt.rotation, psp_opt);
        if (psp.stalled) ++rep.psp_stalled_steps;
        if (detail::plateaued(psp.loss_history, cfg.early_stop_tol, cfg.early_stop_window)) break;
      }
      const auto t2 = clock::now();
      rep.trajectory = okt.loss_history;
      rep.trajectory.insert(rep.trajectory.end(), psp.loss_history.begin(), psp.loss_history.end());
      rep.okt_iterations = okt.iteration;
      rep.psp_iterations = psp.iteration;
      rep.okt_monotone = detail::non_increasing(okt.loss_history, 1e-9);
      rep.psp_monotone = detail::non_increasing(psp.loss_history, 1e-9);
      rot = okt.rotation;
      residual = psp.residual;
      if (opt.timings) {
        rep.seconds_okt = std::chrono::duration<double>(t1 - t0).count();
        rep.seconds_psp = std::chrono::duration<double>(t2 - t1).count();
      }
    } else {
      // One OKT step on W - M, then one PSP step, per outer iteration.
      PspState psp = init_psp(w, okt.rotation, okt.params, k, psp_opt);
      psp.loss_history.clear();
      std::vector<LossRecord> okt_records, psp_records;
      double okt_seconds = 0, psp_seconds = 0;
      const int outer = std::max(cfg.okt_iters, cfg.psp_iters);
      rep.trajectory = okt.loss_history;
      for (int t = 0; t < outer; ++t) {
        if (t < cfg.okt_iters) {
          const auto a = clock::now();
          okt.params = psp.params;
          okt = okt_step(w - psp.residual.m, okt, okt_opt);
          okt_seconds += std::chrono::duration<double>(clock::now() - a).count();
          rep.trajectory.push_back(okt.loss_history.back());
          psp.params = okt.params;
        }
        if (t < cfg.psp_iters) {
          const auto a = clock::now();
          psp = psp_step(w, psp, okt.rotation, psp_opt);
          psp_seconds += std::chrono::duration<double>(clock::now() - a).count();
          if (psp.stalled) ++rep.psp_stalled_steps;
          rep.trajectory.push_back(psp.loss_history.back());
        }
      }
      rep.okt_iterations = okt.iteration;
      rep.psp_iterations = psp.iteration;
      // Phases share one objective here, so monotonicity is checked jointly.
      rep.okt_monotone = rep.psp_monotone = detail::non_increasing(rep.trajectory, 1e-9);
      rot = okt.rotation;
      residual = psp.residual;
      if (opt.timings) {
        rep.seconds_okt = okt_seconds;
        rep.seconds_psp = psp_seconds;
      }
    }
  }
  rep.rank = residual.k;

  // Final binarization of the uncentered rotated frame Z = (W - M) R; its
  // row mean is absorbed by the offset.
  const Matrix z = apply_to_rows(rot, w - residual.m);
  out.layer = PackedLayer{binarize(z, cfg.axis), rot, residual};

  rep.mse_raw = binarization_mse(w, cfg.axis);
  rep.mse_rotated = binarization_mse(z, cfg.axis);
  rep.cv_after = mean_magnitude_cv(center_rows(z).x);
  rep.effective_bits = effective_bits({n, m, cfg.axis, dims.n1, dims.n2, residual.k, 0, 16.0});
  rep.tails_before = detail::maybe_tail_stats(w);
  rep.tails_after = detail::maybe_tail_stats(z);

  SplitMix64 xr(cfg.seed, 0x46'57'44);
  const Vector x = gaussian_vector(xr, m);
  const Vector want = w * x;
  rep.forward_algebra_error = detail::relative_error(dense_inference(z, rot, residual, x), want);
  rep.forward_binarized_error = detail::relative_error(full_inference(out.layer, x), want);
  InferenceOptions q;
  q.activation_bits = cfg.act_bits;
  rep.forward_act_quant_error = detail::relative_error(full_inference(out.layer, x, q), want);

  out.report = std::move(rep);
  return out;
}

/// Algorithm entry point; errors carry the matrix identifier.
inline BwlaResult run_bwla(const Matrix& w, const BwlaConfig& cfg, const RunOptions& opt = {}) {
  try {
    return run_bwla_unchecked(w, cfg, opt);
  } catch (const std::exception& e) {
    throw BwlaError("matrix '" + opt.id + "': " + e.what());
  }
}

// --- report serialization ---------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline json tails_json(const std::optional<TailStats>& t) {
  if (!t) return nullptr;
  return json{{"kurtosis", t->kurtosis},
              {"max_over_rms", t->max_over_rms},
              {"quantile_99_over_rms", t->quantile_99_over_rms}};
}

inline void require_finite_json(const json& j, const std::string& where) {
  if (j.is_number_float() && !std::isfinite(j.get<double>())) {
    throw BwlaError("report field '" + where + "' is not finite");
  }
  if (j.is_structured()) {
    for (const auto& [k, v] : j.items()) require_finite_json(v, where + "." + k);
  }
}

}  // namespace detail

inline json report_to_json(const RunReport& r) {
  json j{{"schema_version", RunReport::kSchemaVersion},
         {"id", r.id},
         {"config", config_to_json(r.config)},
         {"dims", {{"rows", r.rows}, {"cols", r.cols}, {"n1", r.n1}, {"n2", r.n2}, {"rank", r.rank}}},
         {"degenerate", r.degenerate},
         {"okt_iterations", r.okt_iterations},
         {"psp_iterations", r.psp_iterations},
         {"psp_stalled_steps", r.psp_stalled_steps},
         {"okt_monotone", r.okt_monotone},
         {"psp_monotone", r.psp_monotone},
         {"nll_initial", r.trajectory.empty() ? 0.0 : r.trajectory.front().nll},
         {"nll_final", r.trajectory.empty() ? 0.0 : r.trajectory.back().nll},
         {"mse_raw", r.mse_raw},
         {"mse_rotated", r.mse_rotated},
         {"magnitude_cv_before", r.cv_before},
         {"magnitude_cv_after", r.cv_after},
         {"effective_bits", r.effective_bits},
         {"tails_before", detail::tails_json(r.tails_before)},
         {"tails_after", detail::tails_json(r.tails_after)},
         {"forward_algebra_error", r.forward_algebra_error},
         {"forward_binarized_error", r.forward_binarized_error},
         {"forward_act_quant_error", r.forward_act_quant_error}};
  if (r.seconds_okt || r.seconds_psp) {
    j["timings"] = {{"okt_seconds", r.seconds_okt.value_or(0.0)},
                    {"psp_seconds", r.seconds_psp.value_or(0.0)}};
  }
  detail::require_finite_json(j, "report");
  return j;
}

/// Structural check of a report document: required keys and their types.
inline std::vector<std::string> report_schema_errors(const json& j) {
  std::vector<std::string> errs;
  if (!j.is_object()) return {"report is not an object"};
  auto need = [&](const char* key, auto pred, const char* type) {
    if (!j.contains(key)) errs.push_back(std::string("missing '") + key + "'");
    else if (!pred(j[key])) errs.push_back(std::string("'") + key + "' is not " + type);
  };
  auto is_num = [](const json& v) { return v.is_number(); };
  auto is_int = [](const json& v) { return v.is_number_integer(); };
  auto is_bool = [](const json& v) { return v.is_boolean(); };
  auto is_obj = [](const json& v) { return v.is_object(); };
  auto is_obj_or_null = [](const json& v) { return v.is_object() || v.is_null(); };
  need("schema_version", is_int, "an integer");
  if (j.contains("schema_version") && j["schema_version"] != RunReport::kSchemaVersion) {
    errs.push_back("unsupported schema_version");
  }
  need("id", [](const json& v) { return v.is_string(); }, "a string");
  need("config", is_obj, "an object");
  need("dims", is_obj, "an object");
  need("degenerate", is_bool, "a boolean");
  for (const char* k : {"okt_iterations", "psp_iterations", "psp_stalled_steps"}) need(k, is_int, "an integer");
  for (const char* k : {"okt_monotone", "psp_monotone"}) need(k, is_bool, "a boolean");
  for (const char* k : {"nll_initial", "nll_final", "mse_raw", "mse_rotated", "magnitude_cv_before",
                        "magnitude_cv_after", "effective_bits", "forward_algebra_error",
                        "forward_binarized_error", "forward_act_quant_error"}) {
    need(k, is_num, "a number");
  }
  for (const char* k : {"tails_before", "tails_after"}) need(k, is_obj_or_null, "an object or null");
  return errs;
}

inline const char* to_string(LossRecord::Phase p) { return p == LossRecord::Phase::okt ? "okt" : "psp"; }

/// phase,iteration,nll,regularizer,surrogate,total
inline std::string trajectory_csv(const RunReport& r) {
  std::string s = "phase,iteration,nll,regularizer,surrogate,total\n";
  for (const LossRecord& rec : r.trajectory) {
    s += to_string(rec.phase);
    s += ',' + std::to_string(rec.iteration);
    for (double v : {rec.nll, rec.regularizer, rec.surrogate, rec.total()}) s += ',' + detail::format_double(v);
    s += '\n';
  }
  return s;
}

// --- binary encoding ----------------------------------------------------------

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int b = 0; b < 4; ++b) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::string what)
      : data_(data), size_(size), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (size_ - pos_ < n) {
      throw FormatError(what_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", have " + std::to_string(size_ - pos_) + ")");
    }
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * b);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * b);
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

inline void put_f32_matrix(ByteWriter& w, const Matrix& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) w.f32(static_cast<float>(m(i, j)));
}

inline Matrix get_f32_matrix(ByteReader& r, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = r.f32();
  return m;
}

}  // namespace detail

// --- tensor files -------------------------------------------------------------

/// "BWLA-TENSOR\0" + u32 version, u32 rank, u64 dims[rank], f32 payload,
/// everything little-endian.
struct Tensor {
  static constexpr std::array<char, 12> kMagic{'B', 'W', 'L', 'A', '-', 'T', 'E', 'N', 'S', 'O', 'R', '\0'};
  static constexpr std::uint32_t kVersion = 1;

  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.element_count() != t.data.size()) throw std::invalid_argument("tensor: shape does not match payload");
  detail::ByteWriter w;
  w.raw(Tensor::kMagic.data(), Tensor::kMagic.size());
  w.u32(Tensor::kVersion);
  w.u32(static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) w.u64(d);
  for (float v : t.data) w.f32(v);
  return std::move(w.bytes());
}

inline Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& what = "tensor") {
  detail::ByteReader r(bytes.data(), bytes.size(), what);
  if (std::memcmp(r.take(12), Tensor::kMagic.data(), 12) != 0) throw FormatError(what + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != Tensor::kVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(Tensor::kVersion) + ")");
  }
  Tensor t;
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw FormatError(what + ": rank " + std::to_string(rank) + " too large");
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(r.u64());
  const std::uint64_t count = t.element_count();
  if (count > r.remaining() / 4 || r.remaining() != count * 4) {
    throw FormatError(what + ": payload size does not match shape");
  }
  t.data.resize(static_cast<std::size_t>(count));
  for (auto& v : t.data) v = r.f32();
  return t;
}

inline void write_tensor(const std::string& path, const Tensor& t) { detail::write_file(path, encode_tensor(t)); }
inline Tensor read_tensor(const std::string& path) { return decode_tensor(detail::read_file(path), path); }

inline Tensor matrix_to_tensor(const Matrix& m) {
  Tensor t{{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) t.data.push_back(static_cast<float>(m(i, j)));
  return t;
}

/// Rank 1 becomes a single row, rank 2 is taken as rows × cols.
inline Matrix tensor_to_matrix(const Tensor& t) {
  if (t.shape.size() != 1 && t.shape.size() != 2) {
    throw FormatError("tensor: expected rank 1 or 2, got " + std::to_string(t.shape.size()));
  }
  const auto rows = static_cast<Index>(t.shape.size() == 2 ? t.shape[0] : 1);
  const auto cols = static_cast<Index>(t.shape.back());
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = t.data[static_cast<std::size_t>(i * cols + j)];
  return m;
}

// --- layer artifacts --------------------------------------------------------------

/// Four ASCII characters as a little-endian u32.
constexpr std::uint32_t section_tag(const char (&s)[5]) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(s[0])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[3])) << 24;
}

/// 8-byte magic, u32 version, u32 section count, then sections of
/// (u32 tag, u64 length, payload). Little-endian; matrices are row-major f32.
struct ArtifactFormat {
  static constexpr std::array<char, 8> kMagic{'B', 'W', 'L', 'A', 'L', 'Y', 'R', '\0'};
  static constexpr std::uint32_t kVersion = 1;

  static constexpr std::uint32_t kDims = section_tag("DIMS");
  static constexpr std::uint32_t kSigns = section_tag("SIGN");
  static constexpr std::uint32_t kScales = section_tag("SCAL");
  static constexpr std::uint32_t kRot1 = section_tag("ROT1");
  static constexpr std::uint32_t kRot2 = section_tag("ROT2");
  static constexpr std::uint32_t kResA = section_tag("RESA");
  static constexpr std::uint32_t kResB = section_tag("RESB");
  static constexpr std::uint32_t kConfig = section_tag("CONF");
};

struct LoadedLayer {
  PackedLayer layer;
  json config;
};

inline std::vector<std::uint8_t> encode_layer(const PackedLayer& layer, const json& config = json::object()) {
  using F = ArtifactFormat;
  const Index n = layer.rows(), m = layer.cols(), k = layer.residual.k;
  std::vector<std::pair<std::uint32_t, detail::ByteWriter>> sections;
  auto section = [&](std::uint32_t tag) -> detail::ByteWriter& {
    sections.emplace_back(tag, detail::ByteWriter{});
    return sections.back().second;
  };
  {
    auto& w = section(F::kDims);
    for (Index v : {n, m, layer.rotation.dims.n1, layer.rotation.dims.n2, k}) w.u64(static_cast<std::uint64_t>(v));
    w.u32(static_cast<std::uint32_t>(layer.weights.axis));
  }
  {
    auto& w = section(F::kSigns);
    const auto bits = layer.weights.signs.to_bitstream();
    w.raw(bits.data(), bits.size());
  }
  {
    auto& w = section(F::kScales);
    for (Index c = 0; c < layer.weights.alpha.size(); ++c) w.f32(static_cast<float>(layer.weights.alpha(c)));
    for (Index c = 0; c < layer.weights.beta.size(); ++c) w.f32(static_cast<float>(layer.weights.beta(c)));
  }
  detail::put_f32_matrix(section(F::kRot1), layer.rotation.r1);
  detail::put_f32_matrix(section(F::kRot2), layer.rotation.r2);
  detail::put_f32_matrix(section(F::kResA), layer.residual.a);
  detail::put_f32_matrix(section(F::kResB), layer.residual.b);
  {
    auto& w = section(F::kConfig);
    const std::string text = config.dump();
    w.raw(text.data(), text.size());
  }

  detail::ByteWriter out;
  out.raw(F::kMagic.data(), F::kMagic.size());
  out.u32(F::kVersion);
  out.u32(static_cast<std::uint32_t>(sections.size()));
  for (auto& [tag, body] : sections) {
    out.u32(tag);
    out.u64(body.bytes().size());
    out.raw(body.bytes().data(), body.bytes().size());
  }
  return std::move(out.bytes());
}

inline LoadedLayer decode_layer(const std::vector<std::uint8_t>& bytes, const std::string& what = "artifact") {
  using F = ArtifactFormat;
  detail::ByteReader r(bytes.data(), bytes.size(), what);
  if (bytes.size() < F::kMagic.size() || std::memcmp(r.take(8), F::kMagic.data(), 8) != 0) {
    throw FormatError(what + ": bad magic (not a BWLA layer artifact)");
  }
  const std::uint32_t version = r.u32();
  if (version != F::kVersion) {
    throw FormatError(what + ": unsupported artifact version " + std::to_string(version) + " (this build reads " +
                      std::to_string(F::kVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::uint32_t, std::pair<const std::uint8_t*, std::size_t>>> found;
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::uint32_t tag = r.u32();
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw FormatError(what + ": section length exceeds file");
    for (const auto& f : found) {
      if (f.first == tag) throw FormatError(what + ": duplicate section");
    }
    found.push_back({tag, {r.take(static_cast<std::size_t>(len)), static_cast<std::size_t>(len)}});
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after last section");
  auto get = [&](std::uint32_t tag, const char* name) {
    for (const auto& f : found) {
      if (f.first == tag) return detail::ByteReader(f.second.first, f.second.second, what + " section " + name);
    }
    throw FormatError(what + ": missing section " + name);
  };
  for (const auto& f : found) {
    const auto t = f.first;
    if (t != F::kDims && t != F::kSigns && t != F::kScales && t != F::kRot1 && t != F::kRot2 &&
        t != F::kResA && t != F::kResB && t != F::kConfig) {
      throw FormatError(what + ": unknown section tag " + std::to_string(t));
    }
  }

  auto dr = get(F::kDims, "DIMS");
  const auto n = static_cast<Index>(dr.u64());
  const auto m = static_cast<Index>(dr.u64());
  const auto n1 = static_cast<Index>(dr.u64());
  const auto n2 = static_cast<Index>(dr.u64());
  const auto k = static_cast<Index>(dr.u64());
  const std::uint32_t axis = dr.u32();
  if (n < 1 || m < 1 || n1 * n2 != m || k < 0 || k > std::min(n, m) || axis > 1 || n > (Index{1} << 32) ||
      m > (Index{1} << 32)) {
    throw FormatError(what + ": invalid DIMS section");
  }
  auto check_size = [&](detail::ByteReader& br, std::size_t expect, const char* name) {
    if (br.remaining() != expect) {
      throw FormatError(what + ": section " + name + " has " + std::to_string(br.remaining()) +
                        " bytes, expected " + std::to_string(expect));
    }
  };

  LoadedLayer out;
  PackedLayer& L = out.layer;
  L.weights.axis = static_cast<Axis>(axis);
  {
    auto br = get(F::kSigns, "SIGN");
    const std::size_t nbytes = static_cast<std::size_t>((n * m + 7) / 8);
    check_size(br, nbytes, "SIGN");
    L.weights.signs = PackedSigns::from_bitstream(n, m, {br.take(nbytes), nbytes});
  }
  {
    auto br = get(F::kScales, "SCAL");
    const Index ch = L.weights.axis == Axis::row ? n : m;
    check_size(br, static_cast<std::size_t>(8 * ch), "SCAL");
    L.weights.alpha.resize(ch);
    L.weights.beta.resize(ch);
    for (Index c = 0; c < ch; ++c) L.weights.alpha(c) = br.f32();
    for (Index c = 0; c < ch; ++c) L.weights.beta(c) = br.f32();
  }
  L.rotation.dims = {n1, n2, m};
  {
    auto br = get(F::kRot1, "ROT1");
    check_size(br, static_cast<std::size_t>(4 * n1 * n1), "ROT1");
    L.rotation.r1 = detail::get_f32_matrix(br, n1, n1);
  }
  {
    auto br = get(F::kRot2, "ROT2");
    check_size(br, static_cast<std::size_t>(4 * n2 * n2), "ROT2");
    L.rotation.r2 = detail::get_f32_matrix(br, n2, n2);
  }
  {
    auto ba = get(F::kResA, "RESA");
    check_size(ba, static_cast<std::size_t>(4 * n * k), "RESA");
    auto bb = get(F::kResB, "RESB");
    check_size(bb, static_cast<std::size_t>(4 * k * m), "RESB");
    L.residual.k = k;
    L.residual.a = detail::get_f32_matrix(ba, n, k);
    L.residual.b = detail::get_f32_matrix(bb, k, m);
    L.residual.m = L.residual.a * L.residual.b;
  }
  {
    auto br = get(F::kConfig, "CONF");
    const std::size_t len = br.remaining();
    const auto* p = br.take(len);
    try {
      out.config = json::parse(std::string(reinterpret_cast<const char*>(p), len));
    } catch (const json::exception& e) {
      throw FormatError(what + ": CONF section is not valid JSON: " + e.what());
    }
  }
  for (const Matrix* mat : {&L.rotation.r1, &L.rotation.r2, &L.residual.a, &L.residual.b}) {
    if (!mat->allFinite()) throw FormatError(what + ": non-finite values in layer");
  }
  if (!L.weights.alpha.allFinite() || !L.weights.beta.allFinite()) {
    throw FormatError(what + ": non-finite scales");
  }
  return out;
}

inline void save_layer(const std::string& path, const PackedLayer& layer, const json& config = json::object()) {
  detail::write_file(path, encode_layer(layer, config));
}

inline LoadedLayer load_layer(const std::string& path) { return decode_layer(detail::read_file(path), path); }

/// The layer as it reads back from disk (all stored values rounded to f32).
inline PackedLayer round_trip_precision(const PackedLayer& layer) {
  return decode_layer(encode_layer(layer)).layer;
}

// --- synth spec strings and batch jobs --------------------------------------------

/// "<kind>:<rows>x<cols>", e.g. "gaussian:128x144" or "planted:64x64".
inline SynthSpec parse_synth_spec(const std::string& text, std::uint64_t seed) {
  const auto colon = text.find(':');
  const auto x = text.find('x', colon == std::string::npos ? 0 : colon);
  if (colon == std::string::npos || x == std::string::npos) {
    throw std::invalid_argument("synth spec '" + text + "' is not <kind>:<rows>x<cols>");
  }
  SynthSpec s;
  s.kind = synth_kind_from_string(text.substr(0, colon));
  auto parse_dim = [&](const std::string& d) {
    Index v = 0;
    const auto res = std::from_chars(d.data(), d.data() + d.size(), v);
    if (res.ec != std::errc{} || res.ptr != d.data() + d.size() || v < 1) {
      throw std::invalid_argument("synth spec '" + text + "': bad dimension '" + d + "'");
    }
    return v;
  };
  s.rows = parse_dim(text.substr(colon + 1, x - colon - 1));
  s.cols = parse_dim(text.substr(x + 1));
  s.seed = seed;
  return s;
}

struct Job {
  std::string id;
  Matrix w;
};

struct JobOutcome {
  std::optional<BwlaResult> result;
  std::string error;  // set when result is empty
};

/// Thread count from BWLA_THREADS (default 1, clamped to [1, 256]).
inline int threads_from_env() {
  const char* v = std::getenv("BWLA_THREADS");
  if (!v || !*v) return 1;
  int n = 0;
  const auto res = std::from_chars(v, v + std::strlen(v), n);
  if (res.ec != std::errc{} || n < 1) throw std::invalid_argument(std::string("BWLA_THREADS='") + v + "' is not a positive integer");
  return std::min(n, 256);
}

/// Independent jobs on a pool of `threads` workers; outcome i belongs to job
/// i regardless of scheduling, so results do not depend on the thread count.
inline std::vector<JobOutcome> run_jobs(const std::vector<Job>& jobs, const BwlaConfig& cfg, int threads,
                                        bool timings = false) {
  std::vector<JobOutcome> out(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        out[i].result = run_bwla(jobs[i].w, cfg, {jobs[i].id, timings});
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace bwla
