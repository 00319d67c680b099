// Copyright 2026 The DFC Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <unistd.h>

#include "dfc/channelsim.hpp"
#include "dfc/codec.hpp"
#include "dfc/config.hpp"
#include "dfc/error.hpp"
#include "dfc/rdp.hpp"

namespace dfc::cli {

using json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitBitstream = 3;

inline constexpr std::uint64_t kSampleTag = 0x73616d706c65ull;
inline constexpr std::uint64_t kReconTag = 0x7265636f6eull;
inline constexpr std::uint64_t kSweepTag = 0x7377656570ull;
inline constexpr std::uint64_t kSimTag = 0x73696dull;

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Whole-file replace: write a sibling temp file, then rename over the target.
inline void write_atomic(const std::string& path, std::string_view data) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path + "'");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error("cannot write '" + path + "'");
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot write '" + path + "'");
  }
}

inline json vec_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline std::string detail_fmt(double v) { return dfc::detail::fmt_real(v); }

inline json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// Input vectors are a JSON array or an object with an "x" array.
inline Vector read_input_vector(const std::string& path, Eigen::Index n) {
  const auto bytes = read_bytes(path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw InvalidArgument("input '" + path + "': " + e.what());
  }
  const json& arr = doc.is_object() && doc.contains("x") ? doc["x"] : doc;
  if (!arr.is_array()) throw InvalidArgument("input '" + path + "': expected an array of numbers");
  if (static_cast<Eigen::Index>(arr.size()) != n)
    throw InvalidArgument("input '" + path + "': expected " + std::to_string(n) + " values");
  Vector x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!arr[static_cast<std::size_t>(i)].is_number())
      throw InvalidArgument("input '" + path + "': expected an array of numbers");
    x[i] = arr[static_cast<std::size_t>(i)].get<double>();
  }
  return x;
}

inline std::string hex(const Digest& d) { return to_hex(std::span<const std::uint8_t>(d.data(), d.size())); }

inline json ledger_json(const EncodeResult& r, const CodecConfig& cfg, const CostEstimate& est) {
  json steps = json::array();
  for (const auto& s : r.ledger.steps)
    steps.push_back({{"t", s.t},
                     {"s", s.s},
                     {"kl_bits", s.kl_bits},
                     {"payload_bits", s.payload_bits},
                     {"frame_bytes", s.frame_bytes},
                     {"chunks", s.chunks},
                     {"candidates", s.candidates}});
  const double payload = r.ledger.payload_bits();
  const double expected = est.total_bits;
  return {{"backend", std::string(to_string(cfg.backend))},
          {"digest", hex(cfg.digest)},
          {"seed", cfg.seed},
          {"dim", cfg.oracle->dim()},
          {"tau", cfg.grid.tau()},
          {"frames", r.stream.frames.size()},
          {"header_bytes", r.ledger.header_bytes},
          {"total_bytes", r.ledger.total_bytes()},
          {"kl_bits", r.ledger.kl_bits()},
          {"payload_bits", payload},
          {"tail_payload_bits", r.ledger.tail_payload_bits},
          {"tail_frame_bytes", r.ledger.tail_frame_bytes},
          {"cost_estimate",
           {{"total_bits", est.total_bits},
            {"std_error_bits", est.total_std_error},
            {"closed_form", est.closed_form},
            {"mutual_information_bits", num_or_null(est.mutual_information_bits)},
            {"relative_gap", expected > 0.0 ? json((r.ledger.kl_bits() - expected) / expected) : json(nullptr)}}},
          {"steps", steps}};
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& sets,
                             std::optional<std::uint64_t> seed) {
  RunConfig c = path.empty() ? RunConfig{} : RunConfig::parse([&] {
    const auto b = read_bytes(path);
    return std::string(b.begin(), b.end());
  }());
  c.apply_environment();
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(kv, "--set expects section.key=value");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (seed) c.set("codec.seed", std::to_string(*seed));
  return c;
}

// -----------------------------------------------------------------------------
// Commands

struct CompressArgs {
  std::string input;
  std::uint64_t sample_index = 0;
  std::string output, ledger;
  std::size_t estimate_trials = 256;
};

inline int cmd_compress(const RunConfig& rc, const CompressArgs& a, std::ostream& out) {
  const CodecConfig cfg = build_codec_config(rc);
  cfg.validate();
  const Eigen::Index n = cfg.oracle->dim();
  Vector x0;
  if (!a.input.empty()) {
    x0 = read_input_vector(a.input, n);
  } else {
    SyncedRandomness rng(cfg.seed, derive_stream(kSampleTag, a.sample_index));
    x0 = cfg.oracle->sample(rng);
  }
  const EncodeResult r = encode_progressive(x0, cfg);
  const CostEstimate est = cost_estimate(cfg, a.estimate_trials, cfg.seed);
  const auto bytes = r.stream.serialize();
  const std::string bs_path = a.output.empty() ? rc.text("output.bitstream") : a.output;
  std::string ledger_path = a.ledger.empty() ? rc.text("output.ledger") : a.ledger;
  if (ledger_path.empty()) ledger_path = bs_path + ".json";
  json ledger = ledger_json(r, cfg, est);
  ledger["x0"] = vec_json(x0);
  write_atomic(bs_path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  write_atomic(ledger_path, ledger.dump(2) + "\n");
  out << json{{"bitstream", bs_path},
              {"ledger", ledger_path},
              {"bytes", bytes.size()},
              {"payload_bits", r.ledger.payload_bits()},
              {"estimate_bits", est.total_bits}}
             .dump()
      << "\n";
  return kExitOk;
}

struct DecompressArgs {
  std::string input, output;
  std::optional<std::size_t> frames;
};

inline int cmd_decompress(const RunConfig& rc, const DecompressArgs& a, std::ostream& out) {
  CodecConfig cfg = build_codec_config(rc);
  const auto bytes = read_bytes(a.input);
  Bitstream bs = Bitstream::parse(bytes);
  const std::size_t available = bs.frames.size();
  if (a.frames && *a.frames < bs.frames.size()) bs.frames.resize(*a.frames);
  const auto prefix = bs.serialize();
  const DecodeResult d = decode_progressive(prefix, cfg);
  cfg.seed = bs.header.seed;
  SyncedRandomness rng(bs.header.seed, derive_stream(kReconTag));
  const Vector xhat = reconstruct(cfg, d, rng);
  json res = {{"digest", hex(bs.header.digest)},
              {"seed", bs.header.seed},
              {"frames", bs.frames.size()},
              {"frames_available", available},
              {"steps_decoded", d.steps_decoded},
              {"prior_only", d.prior_only},
              {"t", d.t},
              {"x_t", vec_json(d.x)},
              {"reconstruction", std::string(to_string(cfg.reconstruction))},
              {"x_hat", vec_json(xhat)}};
  if (d.x0) res["x0"] = vec_json(*d.x0);
  const std::string path = a.output.empty() ? rc.text("output.result") : a.output;
  write_atomic(path, res.dump(2) + "\n");
  out << json{{"result", path}, {"steps_decoded", d.steps_decoded}, {"t", d.t}}.dump() << "\n";
  return kExitOk;
}

// Codec rows (codec-sde, codec-ode, posterior-mean) for one tau.
inline std::vector<RDPPoint> sweep_codec_rows(const RunConfig& base, double tau, std::size_t row,
                                              std::size_t trials, std::uint64_t seed) {
  const std::vector<std::string> methods = {"codec-sde", "codec-ode", "posterior-mean"};
  std::vector<RDPPoint> rows;
  for (const auto& m : methods) {
    RDPPoint p;
    p.method = m;
    p.trials = trials;
    p.seed = seed;
    rows.push_back(p);
  }
  try {
    RunConfig rc = base;
    rc.set("grid.tau", detail_fmt(tau));
    CodecConfig cfg = build_codec_config(rc);
    cfg.validate();
    const SourceOracle& oracle = *cfg.oracle;
    const Eigen::Index n = oracle.dim();
    const auto N = static_cast<Eigen::Index>(trials);
    Matrix src(n, N), ref(n, N), rec[3] = {Matrix(n, N), Matrix(n, N), Matrix(n, N)};
    double bits = 0.0, se[3] = {0.0, 0.0, 0.0};
    for (std::size_t r = 0; r < trials; ++r) {
      SyncedRandomness rng(seed, derive_stream(kSweepTag, row, r));
      const Vector x0 = oracle.sample(rng);
      ref.col(static_cast<Eigen::Index>(r)) = oracle.sample(rng);
      cfg.seed = derive_stream(seed, kSweepTag ^ row, r);
      const EncodeResult e = encode_progressive(x0, cfg);
      bits += e.ledger.payload_bits();
      const Vector& xt = e.trajectory.back();
      const double t = cfg.grid.tau();
      const Vector outs[3] = {reconstruct_sde(oracle, cfg.schedule, xt, t, rng, cfg.sde_steps),
                              reconstruct_ode(oracle, cfg.schedule, xt, t, cfg.ode_steps),
                              reconstruct_posterior_mean(oracle, cfg.schedule, xt, t)};
      src.col(static_cast<Eigen::Index>(r)) = x0;
      for (int k = 0; k < 3; ++k) {
        rec[k].col(static_cast<Eigen::Index>(r)) = outs[k];
        se[k] += (outs[k] - x0).squaredNorm() / double(n);
      }
    }
    for (int k = 0; k < 3; ++k) {
      rows[k].rate_bits = bits / double(trials);
      rows[k].mse = se[k] / double(trials);
      if (n == 1) {
        std::vector<double> a(rec[k].data(), rec[k].data() + N), b(ref.data(), ref.data() + N);
        rows[k].w2 = w2_empirical(std::move(a), std::move(b));
      } else {
        rows[k].w2 = w2_gaussian_fit(rec[k], ref);
      }
    }
  } catch (const std::exception& e) {
    for (auto& p : rows) {
      p.rate_bits = p.mse = p.w2 = std::numeric_limits<double>::quiet_NaN();
      p.status = std::string("error: ") + e.what();
    }
  }
  return rows;
}

// Lloyd baselines: a rate-R Lloyd-Max quantizer decoded by its centroid
// (lloyd-mean) or by a draw from the source restricted to the cell.
inline std::vector<RDPPoint> sweep_lloyd_rows(const RunConfig& base, double rate, std::size_t row,
                                              std::size_t trials, std::uint64_t seed) {
  std::vector<RDPPoint> rows(2);
  rows[0].method = "lloyd-posterior-sample";
  rows[1].method = "lloyd-mean";
  for (auto& p : rows) {
    p.trials = trials;
    p.seed = seed;
    p.rate_bits = rate;
  }
  try {
    if (rate != std::floor(rate) || rate < 1.0 || rate > 8.0)
      throw InvalidArgument("lloyd rate must be an integer in [1, 8]");
    const auto oracle = build_oracle(base);
    const ScalarDistribution d = ScalarDistribution::from_oracle(*oracle);
    const ScalarQuantizer q = lloyd_max(d, static_cast<int>(rate));
    std::vector<double> ps(trials), pm(trials), ref(trials);
    double se_ps = 0.0, se_pm = 0.0;
    for (std::size_t r = 0; r < trials; ++r) {
      SyncedRandomness rng(seed, derive_stream(kSweepTag, row, r));
      const double x = d.sample(rng);
      ref[r] = d.sample(rng);
      const std::size_t c = q.cell(x);
      ps[r] = quantizer_posterior_sample(q, c, d, rng);
      pm[r] = q.centroids[c];
      se_ps += (ps[r] - x) * (ps[r] - x);
      se_pm += (pm[r] - x) * (pm[r] - x);
    }
    rows[0].mse = se_ps / double(trials);
    rows[1].mse = se_pm / double(trials);
    rows[0].w2 = w2_empirical(ps, ref);
    rows[1].w2 = w2_empirical(pm, ref);
  } catch (const std::exception& e) {
    for (auto& p : rows) {
      p.mse = p.w2 = std::numeric_limits<double>::quiet_NaN();
      p.status = std::string("error: ") + e.what();
    }
  }
  return rows;
}

inline std::string sweep_csv(const RunConfig& rc) {
  const auto trials = static_cast<std::size_t>(rc.integer("eval.trials"));
  if (trials < 2) throw ConfigError("eval.trials", "must be at least 2");
  const std::uint64_t seed = rc.seed();
  std::string csv = rdp_csv_header();
  std::size_t row = 0;
  for (double tau : rc.real_list("eval.sweep_tau"))
    for (const auto& p : sweep_codec_rows(rc, tau, row++, trials, seed)) csv += to_csv_row(p);
  for (double rate : rc.real_list("eval.lloyd_rates"))
    for (const auto& p : sweep_lloyd_rows(rc, rate, row++, trials, seed)) csv += to_csv_row(p);
  return csv;
}

inline int cmd_sweep(const RunConfig& rc, const std::string& output, std::ostream& out) {
  const std::string path = output.empty() ? rc.text("output.csv") : output;
  const std::string csv = sweep_csv(rc);
  write_atomic(path, csv);
  std::size_t rows = 0;
  for (char c : csv) rows += c == '\n';
  out << json{{"csv", path}, {"rows", rows - 1}}.dump() << "\n";
  return kExitOk;
}

inline json eval_rdp_json(const RunConfig& rc) {
  const auto trials = static_cast<std::size_t>(rc.integer("eval.trials"));
  if (trials < 2) throw ConfigError("eval.trials", "must be at least 2");
  const std::uint64_t seed = rc.seed();
  const auto oracle = build_oracle(rc);
  const NoiseSchedule sch = build_schedule(rc);
  const double tau = rc.real("grid.tau");
  json res;

  const ImmseResult im = immse_mutual_information(*oracle, sch, tau, 20000, seed);
  double closed = std::numeric_limits<double>::quiet_NaN();
  if (const auto* g = oracle->gaussian())
    closed = gaussian_mutual_information_bits(*g, sch, tau) -
             gaussian_mutual_information_bits(*g, sch, sch.end_time());
  res["immse"] = {{"tau", tau},
                  {"snr", sch.snr(tau)},
                  {"bits", im.bits},
                  {"error_bits", im.error_bits},
                  {"closed_form_bits", num_or_null(closed)},
                  {"stochastic_code_bound_bits", stochastic_code_bound(im.bits)}};

  const double nv = rc.real("eval.dp_noise_var");
  const DPParams dp = gaussian_channel_dp_params(nv);
  std::vector<double> gammas;
  for (int k = 0; k <= 4; ++k) gammas.push_back(dp.gamma_star * k / 4.0);
  json pts = json::array();
  for (const auto& p : gaussian_channel_dp_sweep(nv, gammas, trials, seed))
    pts.push_back({{"gamma", p.gamma}, {"mse", p.mse}, {"w2", p.w2}, {"predicted_mse", p.predicted}});
  res["dp"] = {{"noise_var", nv}, {"d_inf", dp.d_inf}, {"gamma_star", dp.gamma_star}, {"points", pts}};

  json lloyd = json::array();
  if (oracle->dim() == 1 && oracle->kind() != SourceKind::image_patches) {
    const ScalarDistribution d = ScalarDistribution::from_oracle(*oracle);
    auto rates = rc.real_list("eval.lloyd_rates");
    if (rates.empty()) rates = {1.0};
    for (double rate : rates) {
      if (rate != std::floor(rate) || rate < 1.0 || rate > 8.0)
        throw ConfigError("eval.lloyd_rates", "rates must be integers in [1, 8]");
      const ScalarQuantizer q = lloyd_max(d, static_cast<int>(rate));
      const auto w2 = w2_squared_to_quantizer(d, q);
      SyncedRandomness rng(seed, derive_stream(kSweepTag, static_cast<std::uint64_t>(rate)));
      double se = 0.0;
      for (std::size_t r = 0; r < trials; ++r) {
        const double x = d.sample(rng);
        const double y = quantizer_posterior_sample(q, q.cell(x), d, rng);
        se += (y - x) * (y - x);
      }
      json th = json::array(), ce = json::array();
      for (double t : q.thresholds) th.push_back(t);
      for (double c : q.centroids) ce.push_back(c);
      lloyd.push_back({{"rate_bits", rate},
                       {"mmse_distortion", q.distortion(d)},
                       {"posterior_sample_distortion", se / double(trials)},
                       {"w2_squared", w2.value},
                       {"thresholds", th},
                       {"centroids", ce}});
    }
  }
  res["lloyd"] = lloyd;
  res["trials"] = trials;
  res["seed"] = seed;
  return res;
}

inline int cmd_eval_rdp(const RunConfig& rc, const std::string& output, std::ostream& out) {
  const std::string path = output.empty() ? rc.text("output.result") : output;
  const json res = eval_rdp_json(rc);
  write_atomic(path, res.dump(2) + "\n");
  out << json{{"result", path}}.dump() << "\n";
  return kExitOk;
}

struct SimulateArgs {
  std::string mode = "dq";
  std::vector<double> x = {0.0};
  double delta = 1.0;        // dq: channel width
  double target_sd = 0.5;    // pfr: target N(x, sd^2)
  double ref_sd = 1.0;       // reference scale for both modes
  std::size_t trials = 1000;
  std::string output;
};

// Direct channel exercises on a fixed input: DQ with an N(0, r^2) * U(D)
// reference, PFR with target N(x, s^2) against N(0, r^2 + s^2).
inline json simulate_channel_json(const SimulateArgs& a, std::uint64_t seed) {
  if (a.x.empty()) throw InvalidArgument("simulate-channel: empty input");
  if (a.trials < 1) throw InvalidArgument("simulate-channel: trials must be positive");
  const Vector x = Eigen::Map<const Vector>(a.x.data(), static_cast<Eigen::Index>(a.x.size()));
  const Eigen::Index n = x.size();
  ChannelSpec spec = [&] {
    if (a.mode == "dq")
      return ChannelSpec::uniform(Vector::Constant(n, a.delta), ReferenceKind::gaussian_uniform,
                                  Vector::Zero(n), Vector::Constant(n, a.ref_sd),
                                  Vector::Constant(n, a.delta));
    if (a.mode == "pfr")
      return ChannelSpec::gaussian(Vector::Constant(n, a.target_sd), Vector::Zero(n),
                                   Vector::Constant(n, std::hypot(a.ref_sd, a.target_sd)));
    throw InvalidArgument("simulate-channel: mode must be dq or pfr");
  }();
  const double kl_bits = spec.kl_nats(x) * kLog2e;
  double ideal = 0.0, used = 0.0, index = 0.0;
  std::size_t mismatches = 0;
  Vector mean = Vector::Zero(n), m2 = Vector::Zero(n);
  for (std::size_t r = 0; r < a.trials; ++r) {
    const SyncedRandomness rng(seed, derive_stream(kSimTag, r));
    const SimResult s = a.mode == "dq" ? simulate_dq(spec, x, rng) : simulate_pfr(spec, x, rng, kl_bits);
    const Vector y = a.mode == "dq" ? receive_dq(spec, s.message, rng) : receive_pfr(spec, s.message, rng, kl_bits);
    if (y != s.y) ++mismatches;
    ideal += s.ideal_bits;
    used += double(s.bits_used);
    index += double(s.index);
    const Vector d = s.y - x;
    mean += d;
    m2 += d.cwiseProduct(d);
  }
  const double N = double(a.trials);
  mean /= N;
  m2 /= N;
  json res = {{"mode", a.mode},
              {"x", vec_json(x)},
              {"trials", a.trials},
              {"seed", seed},
              {"kl_bits", kl_bits},
              {"mean_ideal_bits", ideal / N},
              {"mean_message_bits", used / N},
              {"noise_mean", vec_json(mean)},
              {"noise_variance", vec_json(m2 - mean.cwiseProduct(mean))},
              {"decoder_mismatches", mismatches}};
  if (a.mode == "pfr") res["mean_index"] = index / N;
  return res;
}

inline int cmd_simulate_channel(const RunConfig& rc, const SimulateArgs& a, std::ostream& out) {
  const json res = simulate_channel_json(a, rc.seed());
  if (a.output.empty()) {
    out << res.dump(2) << "\n";
  } else {
    write_atomic(a.output, res.dump(2) + "\n");
    out << json{{"result", a.output}}.dump() << "\n";
  }
  return kExitOk;
}

inline std::string config_help() {
  std::string s = "configuration keys (section.key, default):\n";
  for (const auto& k : config_schema()) {
    s += "  " + std::string(k.name) + " = " + std::string(k.fallback) + "\n      " + std::string(k.help);
    if (!k.choices.empty()) s += " [" + std::string(k.choices) + "]";
    s += "\n";
  }
  return s;
}

inline void error_json(std::ostream& err, const std::string& kind, const std::string& message,
                       const std::string& key = {}) {
  json e = {{"error", kind}, {"message", message}};
  if (!key.empty()) e["key"] = key;
  err << e.dump() << "\n";
}

}  // namespace detail

/// Runs the command line `args` (without the program name). Exit codes:
/// 0 success, 1 runtime failure, 2 configuration or usage error, 3 bad
/// bitstream.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Progressive diffusion-based compression over analytic sources."};
  app.require_subcommand(1);
  app.footer(detail::config_help() + "\nenvironment: " + std::string(kSeedEnvVar) +
             " overrides codec.seed; --seed overrides both.\n"
             "exit codes: 0 ok, 1 runtime failure, 2 configuration or usage error, 3 bad bitstream.");
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "configuration file (sectioned key = value)");
    sub->add_option("--set", sets, "override a key: section.key=value (repeatable)");
    sub->add_option("--seed", seed, "shared-randomness seed");
  };

  detail::CompressArgs ca;
  auto* compress = app.add_subcommand("compress", "encode one source sample into a progressive bitstream");
  common(compress);
  compress->add_option("-i,--input", ca.input, "JSON input vector (default: builtin source sample)");
  compress->add_option("--sample-index", ca.sample_index, "which builtin sample to draw");
  compress->add_option("-o,--output", ca.output, "bitstream path (default output.bitstream)");
  compress->add_option("--ledger", ca.ledger, "cost ledger JSON path (default output.ledger)");
  compress->add_option("--estimate-trials", ca.estimate_trials, "Monte Carlo trials for the cost estimate")
      ->check(CLI::PositiveNumber);

  detail::DecompressArgs da;
  auto* decompress = app.add_subcommand("decompress", "decode a bitstream prefix and reconstruct");
  common(decompress);
  decompress->add_option("-i,--input", da.input, "bitstream path")->required();
  decompress->add_option("-k,--frames", da.frames, "decode only the first k frames (0: header only)");
  decompress->add_option("-o,--output", da.output, "result JSON path (default output.result)");

  std::string sweep_out;
  std::optional<std::string> sweep_tau, sweep_rates;
  auto* sweep = app.add_subcommand("sweep", "rate-distortion-realism sweep to CSV");
  common(sweep);
  sweep->add_option("--tau", sweep_tau, "comma-separated tau list (overrides eval.sweep_tau)");
  sweep->add_option("--rates", sweep_rates, "comma-separated Lloyd rates (overrides eval.lloyd_rates)");
  sweep->add_option("-o,--output", sweep_out, "CSV path (default output.csv)");

  std::string eval_out;
  auto* eval = app.add_subcommand("eval-rdp", "I-MMSE, D-P testbed and quantizer evaluations as JSON");
  common(eval);
  eval->add_option("-o,--output", eval_out, "result JSON path (default output.result)");

  detail::SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate-channel", "exercise DQ or PFR channel simulation directly");
  common(sim);
  sim->add_option("--mode", sa.mode, "dq or pfr")->check(CLI::IsMember({"dq", "pfr"}));
  sim->add_option("--x", sa.x, "channel input vector")->delimiter(',');
  sim->add_option("--delta", sa.delta, "dq: uniform channel width")->check(CLI::PositiveNumber);
  sim->add_option("--target-sd", sa.target_sd, "pfr: target standard deviation")->check(CLI::PositiveNumber);
  sim->add_option("--ref-sd", sa.ref_sd, "reference scale")->check(CLI::PositiveNumber);
  sim->add_option("--trials", sa.trials, "channel uses")->check(CLI::PositiveNumber);
  sim->add_option("-o,--output", sa.output, "result JSON path (default: stdout)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    detail::error_json(err, "usage", e.what());
    return kExitConfig;
  }

  try {
    RunConfig rc = detail::load_config(config_path, sets, seed);
    if (compress->parsed()) return detail::cmd_compress(rc, ca, out);
    if (decompress->parsed()) return detail::cmd_decompress(rc, da, out);
    if (sweep->parsed()) {
      if (sweep_tau) rc.set("eval.sweep_tau", *sweep_tau);
      if (sweep_rates) rc.set("eval.lloyd_rates", *sweep_rates);
      return detail::cmd_sweep(rc, sweep_out, out);
    }
    if (eval->parsed()) return detail::cmd_eval_rdp(rc, eval_out, out);
    return detail::cmd_simulate_channel(rc, sa, out);
  } catch (const ConfigError& e) {
    detail::error_json(err, "config", e.what(), e.key());
    return kExitConfig;
  } catch (const BitstreamError& e) {
    detail::error_json(err, "bitstream", e.what());
    return kExitBitstream;
  } catch (const PfrTruncation& e) {
    detail::error_json(err, "pfr-budget", e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    detail::error_json(err, "runtime", e.what());
    return kExitFailure;
  }
}

}  // namespace dfc::cli
