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

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <openssl/evp.h>

#include "dfc/codec.hpp"
#include "dfc/error.hpp"
#include "dfc/schedule.hpp"
#include "dfc/sources.hpp"

namespace dfc {

inline constexpr const char* kSeedEnvVar = "DFC_SEED";

enum class ValueType { real, integer, boolean, text, real_list, choice };

struct KeySpec {
  std::string_view name;  // section.key
  ValueType type;
  std::string_view fallback;
  std::string_view help;
  std::string_view choices = {};  // '|'-separated, for ValueType::choice
  bool in_digest = true;
};

// Every recognised key. Sections source, schedule, grid and codec feed the
// stream digest except where noted.
inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = {
      {"source.kind", ValueType::choice, "gaussian", "source family", "gaussian|gaussian-mixture|image-patches"},
      {"source.dim", ValueType::integer, "1", "dimension (Gaussian and mixture sources)"},
      {"source.mean", ValueType::real_list, "0", "Gaussian mean: one value or one per dimension"},
      {"source.variance", ValueType::real_list, "1", "Gaussian variances: one value or one per dimension"},
      {"source.weights", ValueType::real_list, "0.5, 0.5", "mixture weights"},
      {"source.means", ValueType::real_list, "-1, 1", "mixture component means (isotropic)"},
      {"source.variances", ValueType::real_list, "0.25, 0.25", "mixture component variances"},
      {"source.bank", ValueType::text, "builtin", "patch bank file, or 'builtin'"},
      {"source.bank_seed", ValueType::integer, "1", "seed of the built-in bank"},
      {"source.bank_count", ValueType::integer, "1024", "patches in the built-in bank"},
      {"source.patch", ValueType::integer, "4", "patch side of the built-in bank"},
      {"schedule.kind", ValueType::choice, "variance-preserving", "noise schedule",
       "variance-preserving|flow-matching-linear"},
      {"schedule.T", ValueType::real, "1", "end time"},
      {"schedule.beta_min", ValueType::real, "0.1", "variance-preserving beta at t = 0"},
      {"schedule.beta_max", ValueType::real, "20", "variance-preserving beta at t = T"},
      {"grid.delta", ValueType::real, "0.01", "grid spacing"},
      {"grid.tau", ValueType::real, "0.01", "final transmission time"},
      {"grid.skip_threshold_bits", ValueType::real, "0", "merge steps cheaper than this (0 disables)"},
      {"codec.backend", ValueType::choice, "uqdm-dq", "channel simulation backend", "uqdm-dq|gaussian-pfr"},
      {"codec.seed", ValueType::integer, "0", "shared-randomness seed (overridden by DFC_SEED)", {}, false},
      {"codec.chunk_target_bits", ValueType::real, "16", "target PFR chunk cost"},
      {"codec.lossless_tail", ValueType::boolean, "false", "append a lossless patch index"},
      {"codec.max_candidates", ValueType::integer, "67108864", "PFR candidate budget per chunk"},
      {"codec.reconstruction", ValueType::choice, "sde", "decoder reconstruction",
       "sde|ode|posterior-mean", false},
      {"codec.ode_steps", ValueType::integer, "64", "RK4 steps for ODE reconstruction", {}, false},
      {"codec.sde_steps", ValueType::integer, "0", "reverse-SDE steps (0: exact posterior draw)", {}, false},
      {"eval.trials", ValueType::integer, "100", "Monte Carlo trials", {}, false},
      {"eval.sweep_tau", ValueType::real_list, "", "tau values for sweeps", {}, false},
      {"eval.lloyd_rates", ValueType::real_list, "", "Lloyd quantizer rates (bits) for sweeps", {}, false},
      {"eval.dp_noise_var", ValueType::real, "0.5", "noise variance of the D-P testbed", {}, false},
      {"output.bitstream", ValueType::text, "out.dfc", "compressed stream path", {}, false},
      {"output.ledger", ValueType::text, "", "cost ledger path (default: bitstream + .json)", {}, false},
      {"output.csv", ValueType::text, "sweep.csv", "sweep results path", {}, false},
      {"output.result", ValueType::text, "result.json", "decoded result / evaluation path", {}, false},
  };
  return schema;
}

inline const KeySpec* find_key(std::string_view name) {
  for (const auto& k : config_schema())
    if (k.name == name) return &k;
  return nullptr;
}

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_real(const std::string& key, std::string s) {
  boost::algorithm::trim(s);
  if (s.empty()) throw ConfigError(key, "expected a number");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v))
    throw ConfigError(key, "not a finite number: '" + s + "'");
  return v;
}

inline long long parse_integer(const std::string& key, std::string s) {
  boost::algorithm::trim(s);
  if (s.empty()) throw ConfigError(key, "expected an integer");
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size() || errno == ERANGE) throw ConfigError(key, "not an integer: '" + s + "'");
  return v;
}

// Normalized textual form of a value; validates it on the way.
inline std::string canonical_value(const KeySpec& spec, std::string raw) {
  const std::string key(spec.name);
  boost::algorithm::trim(raw);
  switch (spec.type) {
    case ValueType::real: return fmt_real(parse_real(key, raw));
    case ValueType::integer: return std::to_string(parse_integer(key, raw));
    case ValueType::boolean: {
      const std::string l = boost::algorithm::to_lower_copy(raw);
      if (l == "true" || l == "1" || l == "yes" || l == "on") return "true";
      if (l == "false" || l == "0" || l == "no" || l == "off") return "false";
      throw ConfigError(key, "not a boolean: '" + raw + "'");
    }
    case ValueType::text: return raw;
    case ValueType::real_list: {
      if (raw.empty()) return "";
      std::vector<std::string> parts;
      boost::algorithm::split(parts, raw, boost::is_any_of(","));
      std::string out;
      for (std::size_t i = 0; i < parts.size(); ++i)
        out += (i ? "," : "") + fmt_real(parse_real(key, parts[i]));
      return out;
    }
    case ValueType::choice: {
      std::vector<std::string> opts;
      boost::algorithm::split(opts, spec.choices, boost::is_any_of("|"));
      for (const auto& o : opts)
        if (o == raw) return raw;
      throw ConfigError(key, "expected one of " + std::string(spec.choices) + ", got '" + raw + "'");
    }
  }
  return raw;
}

inline Digest sha256(std::string_view data) {
  Digest d{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), d.data(), &len, EVP_sha256(), nullptr) != 1 || len != d.size())
    throw Error("sha256 failed");
  return d;
}

inline std::string read_file(const std::string& path, const std::string& key) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(key, "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : bytes) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

/// Sectioned key = value configuration. Unknown sections or keys are errors;
/// every key has a default, so the canonical form lists all of them.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[std::string(k.name)] = detail::canonical_value(k, std::string(k.fallback));
  }

  static RunConfig parse(const std::string& text) {
    boost::property_tree::ptree pt;
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError("<syntax>", e.message() + " at line " + std::to_string(e.line()));
    }
    RunConfig c;
    for (const auto& [section, body] : pt) {
      if (body.empty() && !body.data().empty())
        throw ConfigError(section, "key outside any section");
      for (const auto& [key, node] : body) c.set(section + "." + key, node.data());
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    return parse(detail::read_file(path, "<file>"));
  }

  void set(const std::string& name, const std::string& value) {
    const KeySpec* spec = find_key(name);
    if (!spec) throw ConfigError(name, "unknown configuration key");
    values_[name] = detail::canonical_value(*spec, value);
  }

  const std::string& raw(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError(name, "unknown configuration key");
    return it->second;
  }

  double real(const std::string& name) const { return detail::parse_real(name, raw(name)); }
  long long integer(const std::string& name) const { return detail::parse_integer(name, raw(name)); }
  bool boolean(const std::string& name) const { return raw(name) == "true"; }
  const std::string& text(const std::string& name) const { return raw(name); }

  std::vector<double> real_list(const std::string& name) const {
    std::vector<double> out;
    const std::string& s = raw(name);
    if (s.empty()) return out;
    std::vector<std::string> parts;
    boost::algorithm::split(parts, s, boost::is_any_of(","));
    for (const auto& p : parts) out.push_back(detail::parse_real(name, p));
    return out;
  }

  // Sorted "section.key=value" lines.
  std::string canonical(bool digest_keys_only = false) const {
    std::string out;
    for (const auto& [k, v] : values_) {
      if (digest_keys_only && !find_key(k)->in_digest) continue;
      out += k + "=" + v + "\n";
    }
    return out;
  }

  // Digest of everything that shapes the bitstream; the seed travels in the
  // stream header instead. External bank files contribute their content.
  Digest digest() const {
    std::string doc = canonical(true);
    if (text("source.kind") == "image-patches" && text("source.bank") != "builtin")
      doc += "source.bank_sha256=" +
             to_hex(detail::sha256(detail::read_file(text("source.bank"), "source.bank"))) + "\n";
    return detail::sha256(doc);
  }

  // DFC_SEED, when set, replaces codec.seed.
  void apply_environment() {
    if (const char* s = std::getenv(kSeedEnvVar)) {
      try {
        set("codec.seed", s);
      } catch (const ConfigError&) {
        throw ConfigError(kSeedEnvVar, "not an integer: '" + std::string(s) + "'");
      }
    }
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("codec.seed")); }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Builders

namespace detail {

inline long long positive(const RunConfig& c, const std::string& key) {
  const long long v = c.integer(key);
  if (v < 1) throw ConfigError(key, "must be positive");
  return v;
}

inline Vector broadcast(const RunConfig& c, const std::string& key, Eigen::Index n) {
  const auto v = c.real_list(key);
  if (v.size() == 1) return Vector::Constant(n, v[0]);
  if (static_cast<Eigen::Index>(v.size()) != n)
    throw ConfigError(key, "needs 1 or " + std::to_string(n) + " values");
  return Eigen::Map<const Vector>(v.data(), n);
}

}  // namespace detail

inline std::shared_ptr<SourceOracle> build_oracle(const RunConfig& c) {
  const std::string& kind = c.text("source.kind");
  try {
    if (kind == "gaussian") {
      const Eigen::Index n = detail::positive(c, "source.dim");
      const Vector var = detail::broadcast(c, "source.variance", n);
      if ((var.array() <= 0.0).any()) throw ConfigError("source.variance", "must be positive");
      return std::make_shared<SourceOracle>(GaussianSource::diagonal(detail::broadcast(c, "source.mean", n), var));
    }
    if (kind == "gaussian-mixture") {
      const Eigen::Index n = detail::positive(c, "source.dim");
      const auto w = c.real_list("source.weights"), m = c.real_list("source.means"),
                 v = c.real_list("source.variances");
      if (w.empty()) throw ConfigError("source.weights", "needs at least one component");
      if (m.size() != w.size()) throw ConfigError("source.means", "needs one value per weight");
      if (v.size() != w.size()) throw ConfigError("source.variances", "needs one value per weight");
      std::vector<GaussianSource> comps;
      for (std::size_t k = 0; k < w.size(); ++k) {
        if (!(v[k] > 0.0)) throw ConfigError("source.variances", "must be positive");
        comps.push_back(GaussianSource::isotropic(n, m[k], v[k]));
      }
      return std::make_shared<SourceOracle>(GaussianMixtureSource(w, std::move(comps)));
    }
    PatchBank bank;
    if (c.text("source.bank") == "builtin") {
      const auto count = detail::positive(c, "source.bank_count");
      const auto side = detail::positive(c, "source.patch");
      bank = synthetic_patch_bank(static_cast<std::uint64_t>(c.integer("source.bank_seed")),
                                  static_cast<std::uint32_t>(count), static_cast<std::uint16_t>(side));
    } else {
      try {
        bank = parse_patch_bank(detail::read_file(c.text("source.bank"), "source.bank"));
      } catch (const BitstreamError& e) {
        throw ConfigError("source.bank", e.what());
      }
    }
    return std::make_shared<SourceOracle>(PatchBankSource(bank));
  } catch (const InvalidArgument& e) {
    throw ConfigError("source", e.what());
  }
}

inline NoiseSchedule build_schedule(const RunConfig& c) {
  try {
    return make_schedule(parse_schedule_kind(c.text("schedule.kind")), c.real("schedule.T"),
                         {c.real("schedule.beta_min"), c.real("schedule.beta_max")});
  } catch (const InvalidArgument& e) {
    throw ConfigError("schedule", e.what());
  }
}

inline TimeGrid build_grid(const RunConfig& c, const NoiseSchedule& sch, const SourceOracle& oracle,
                           double tau) {
  const double delta = c.real("grid.delta"), thr = c.real("grid.skip_threshold_bits");
  try {
    if (!(thr > 0.0)) return TimeGrid::uniform(sch.end_time(), delta, tau);
    Eigen::SelfAdjointEigenSolver<Matrix> es(oracle.source_covariance(), Eigen::EigenvaluesOnly);
    const Vector lam = es.eigenvalues().cwiseMax(0.0);
    const std::vector<double> ev(lam.begin(), lam.end());
    return TimeGrid::skipping(sch.end_time(), delta, tau, thr, [&](double t, double s) {
      return gaussian_step_cost_bits(sch, ev, t, s);
    });
  } catch (const InvalidArgument& e) {
    throw ConfigError("grid", e.what());
  }
}

inline CodecConfig build_codec_config(const RunConfig& c) {
  CodecConfig cc;
  cc.oracle = build_oracle(c);
  cc.schedule = build_schedule(c);
  cc.grid = build_grid(c, cc.schedule, *cc.oracle, c.real("grid.tau"));
  cc.backend = parse_backend(c.text("codec.backend"));
  cc.seed = c.seed();
  cc.chunk_target_bits = c.real("codec.chunk_target_bits");
  cc.lossless_tail = c.boolean("codec.lossless_tail");
  cc.reconstruction = parse_reconstruction(c.text("codec.reconstruction"));
  const long long mc = c.integer("codec.max_candidates");
  if (mc < 1) throw ConfigError("codec.max_candidates", "must be positive");
  cc.max_candidates = static_cast<std::uint64_t>(mc);
  cc.ode_steps = static_cast<int>(detail::positive(c, "codec.ode_steps"));
  cc.sde_steps = static_cast<int>(c.integer("codec.sde_steps"));
  if (cc.sde_steps < 0) throw ConfigError("codec.sde_steps", "must be non-negative");
  if (!(cc.chunk_target_bits > 0.0)) throw ConfigError("codec.chunk_target_bits", "must be positive");
  if (cc.lossless_tail && cc.oracle->kind() != SourceKind::image_patches)
    throw ConfigError("codec.lossless_tail", "requires source.kind = image-patches");
  cc.digest = c.digest();
  return cc;
}

}  // namespace dfc
