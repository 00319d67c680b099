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

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dfc/channelsim.hpp"
#include "dfc/entropy.hpp"
#include "dfc/error.hpp"
#include "dfc/numeric.hpp"
#include "dfc/random.hpp"
#include "dfc/schedule.hpp"
#include "dfc/sources.hpp"

namespace dfc {

enum class Backend { gaussian_pfr, uqdm_dq };
enum class Reconstruction { sde, ode, posterior_mean };

inline std::string_view to_string(Backend b) {
  return b == Backend::gaussian_pfr ? "gaussian-pfr" : "uqdm-dq";
}

inline std::string_view to_string(Reconstruction r) {
  switch (r) {
    case Reconstruction::sde: return "sde";
    case Reconstruction::ode: return "ode";
    case Reconstruction::posterior_mean: return "posterior-mean";
  }
  return "?";
}

inline Backend parse_backend(std::string_view s) {
  if (s == "gaussian-pfr") return Backend::gaussian_pfr;
  if (s == "uqdm-dq") return Backend::uqdm_dq;
  throw ConfigError("codec.backend", "unknown backend '" + std::string(s) + "'");
}

inline Reconstruction parse_reconstruction(std::string_view s) {
  if (s == "sde") return Reconstruction::sde;
  if (s == "ode") return Reconstruction::ode;
  if (s == "posterior-mean") return Reconstruction::posterior_mean;
  throw ConfigError("codec.reconstruction", "unknown reconstruction '" + std::string(s) + "'");
}

using Digest = std::array<std::uint8_t, 32>;

inline constexpr char kStreamMagic[4] = {'D', 'F', 'C', '1'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kMaxFrameBytes = 0xFFFF;

// Shared-randomness stream tags.
inline constexpr std::uint64_t kPriorTag = 0x7072696f72ull;
inline constexpr std::uint64_t kDitherTag = 0x646974686572ull;
inline constexpr std::uint64_t kPfrTag = 0x706672ull;
inline constexpr std::uint64_t kEstimateTag = 0x657374ull;

// Floor on the reference kernel variance, relative to the step variance.
inline constexpr double kReferenceVarianceFloor = 1e-9;

struct CodecConfig {
  NoiseSchedule schedule = NoiseSchedule::variance_preserving();
  TimeGrid grid = TimeGrid::uniform(1.0, 0.01, 0.01);
  Backend backend = Backend::uqdm_dq;
  std::shared_ptr<const SourceOracle> oracle;
  std::uint64_t seed = 0;
  double chunk_target_bits = 16.0;
  bool lossless_tail = false;
  Reconstruction reconstruction = Reconstruction::sde;
  std::uint64_t max_candidates = kDefaultMaxCandidates;
  int ode_steps = 64;
  int sde_steps = 0;  // 0: one exact posterior draw
  Digest digest{};

  void validate() const {
    if (!oracle) throw InvalidArgument("codec: no source oracle");
    if (std::abs(grid.end_time() - schedule.end_time()) > 1e-12 * schedule.end_time())
      throw InvalidArgument("codec: grid must start at the schedule end time");
    if (!(chunk_target_bits > 0.0)) throw InvalidArgument("codec: chunk target must be positive");
    if (ode_steps < 1 || sde_steps < 0) throw InvalidArgument("codec: bad reconstruction steps");
    if (lossless_tail && oracle->kind() != SourceKind::image_patches)
      throw InvalidArgument("codec: the lossless tail needs a patch-bank source");
    if (grid.size() > 0xFFFF) throw InvalidArgument("codec: grid too long");
  }

  std::size_t step_frames() const {
    return grid.steps() + (backend == Backend::gaussian_pfr ? 1 : 0);
  }
};

namespace detail {
inline void require_finite_state(const Vector& v, const char* what) {
  if (!v.allFinite()) throw NumericalError(std::string(what) + ": non-finite value");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Per-step reference model

/// Everything the decoder can compute for the step t -> s from x_t alone.
struct StepModel {
  double t = 0.0, s = 0.0;
  PosteriorCoefficients coef;
  Vector ref_mean;  // xt_coef x_t + x0_coef E[X0 | x_t]
  Vector ref_var;   // x0_coef^2 Var[X0 | x_t], floored
  double width() const { return uniform_width_for_variance(coef.variance); }
};

inline StepModel step_model(const SourceOracle& oracle, const NoiseSchedule& sch,
                            const Vector& x_t, double t, double s) {
  StepModel m;
  m.t = t;
  m.s = s;
  m.coef = ancestral_coefficients(sch, t, s);
  const double a = sch.alpha(t), sd = sch.sigma(t);
  m.ref_mean = m.coef.xt_coef * x_t + m.coef.x0_coef * oracle.posterior_mean(x_t, a, sd);
  m.ref_var = (m.coef.x0_coef * m.coef.x0_coef) * oracle.posterior_variance(x_t, a, sd);
  const double floor = kReferenceVarianceFloor * m.coef.variance;
  m.ref_var = m.ref_var.cwiseMax(floor);
  detail::require_finite_state(m.ref_mean, "step reference mean");
  return m;
}

inline Vector step_target_mean(const StepModel& m, const Vector& x_t, const Vector& x0) {
  return m.coef.xt_coef * x_t + m.coef.x0_coef * x0;
}

// Gaussian steps: N(target, sigma^2) against N(mu, sigma^2 + v).
// Uniform steps: U(target, D) against N(mu, v) * U(D).
inline ChannelSpec step_channel(const StepModel& m, Backend backend) {
  const Eigen::Index n = m.ref_mean.size();
  if (backend == Backend::gaussian_pfr) {
    const double var = m.coef.variance;
    return ChannelSpec::gaussian(Vector::Constant(n, std::sqrt(var)), m.ref_mean,
                                 (m.ref_var.array() + var).sqrt().matrix());
  }
  const double D = m.width();
  return ChannelSpec::uniform(Vector::Constant(n, D), ReferenceKind::gaussian_uniform, m.ref_mean,
                              m.ref_var.cwiseSqrt(), Vector::Constant(n, D));
}

// Expected Gaussian step cost per coordinate, in bits; known to both sides.
inline Vector pfr_step_hints(const StepModel& m) {
  return (0.5 * kLog2e) * (m.ref_var.array() / m.coef.variance).log1p().matrix();
}

// X_T under the standard normal: N(alpha_T x0, sigma_T^2).
inline ChannelSpec prior_channel(const NoiseSchedule& sch, Eigen::Index n) {
  const double T = sch.end_time();
  return ChannelSpec::gaussian(Vector::Constant(n, sch.sigma(T)), Vector::Zero(n),
                               Vector::Ones(n));
}

inline Vector prior_hints(const SourceOracle& oracle, const NoiseSchedule& sch) {
  const double T = sch.end_time(), a = sch.alpha(T), s2 = sch.sigma2(T);
  const Vector mu = oracle.source_mean();
  const Vector m2 = oracle.source_covariance().diagonal() + mu.cwiseProduct(mu);
  Vector h(mu.size());
  for (Eigen::Index i = 0; i < h.size(); ++i)
    h[i] = std::max(0.0, (-0.5 * std::log(s2) + 0.5 * (s2 + a * a * m2[i]) - 0.5) * kLog2e);
  return h;
}

inline Vector prior_draw(std::uint64_t seed, Eigen::Index n) {
  SyncedRandomness rng(seed, derive_stream(kPriorTag));
  Vector x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = rng.normal();
  return x;
}

inline SyncedRandomness dither_stream(std::uint64_t seed, std::size_t step) {
  return SyncedRandomness(seed, derive_stream(kDitherTag, step));
}

inline SyncedRandomness pfr_stream(std::uint64_t seed, std::size_t frame, std::size_t chunk) {
  return SyncedRandomness(seed, derive_stream(kPfrTag, frame, chunk));
}

// Closed-form expected step cost, in bits, for a Gaussian fit with the given
// covariance eigenvalues. Drives step skipping.
inline double gaussian_step_cost_bits(const NoiseSchedule& sch, std::span<const double> eigenvalues,
                                      double t, double s) {
  const auto c = ancestral_coefficients(sch, t, s);
  const double a = sch.alpha(t), s2 = sch.sigma2(t);
  double bits = 0.0;
  for (double lam : eigenvalues) {
    const double pv = lam * s2 / (a * a * lam + s2);
    bits += 0.5 * std::log2(1.0 + c.x0_coef * c.x0_coef * pv / c.variance);
  }
  return bits;
}

// ---------------------------------------------------------------------------
// Bitstream

struct BitstreamHeader {
  std::uint16_t version = kFormatVersion;
  Digest digest{};
  std::uint64_t seed = 0;
  std::uint32_t dim = 0;
  std::vector<double> times;

  std::size_t bytes() const { return 4 + 2 + 32 + 8 + 4 + 2 + 8 * times.size(); }
};

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  template <class T>
  T get(const char* what) {
    if (b_.size() - pos_ < sizeof(T)) throw BitstreamError(std::string("truncated ") + what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(T(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw BitstreamError(std::string("truncated ") + what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Header followed by length-prefixed frames: one per transmitted step, then
/// an optional lossless-tail frame.
struct Bitstream {
  BitstreamHeader header;
  std::vector<std::vector<std::uint8_t>> frames;

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(kStreamMagic, kStreamMagic + 4);
    detail::put_le<std::uint16_t>(out, header.version);
    out.insert(out.end(), header.digest.begin(), header.digest.end());
    detail::put_le<std::uint64_t>(out, header.seed);
    detail::put_le<std::uint32_t>(out, header.dim);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(header.times.size()));
    for (double t : header.times) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(t));
    for (const auto& f : frames) {
      if (f.size() > kMaxFrameBytes) throw InvalidArgument("bitstream: frame exceeds 65535 bytes");
      detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(f.size()));
      out.insert(out.end(), f.begin(), f.end());
    }
    return out;
  }

  // Frame boundaries: byte offsets after the header and after each frame.
  std::vector<std::size_t> frame_ends() const {
    std::vector<std::size_t> ends{header.bytes()};
    for (const auto& f : frames) ends.push_back(ends.back() + 2 + f.size());
    return ends;
  }

  static Bitstream parse(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    const auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), kStreamMagic, 4) != 0) throw BitstreamError("bad magic");
    Bitstream bs;
    bs.header.version = r.get<std::uint16_t>("version");
    if (bs.header.version != kFormatVersion)
      throw BitstreamError("unsupported format version " + std::to_string(bs.header.version));
    const auto d = r.take(32, "digest");
    std::copy(d.begin(), d.end(), bs.header.digest.begin());
    bs.header.seed = r.get<std::uint64_t>("seed");
    bs.header.dim = r.get<std::uint32_t>("dimension");
    const auto nt = r.get<std::uint16_t>("grid length");
    for (std::uint16_t i = 0; i < nt; ++i)
      bs.header.times.push_back(std::bit_cast<double>(r.get<std::uint64_t>("grid")));
    while (r.remaining() > 0) {
      const auto len = r.get<std::uint16_t>("frame length");
      const auto body = r.take(len, "frame");
      bs.frames.emplace_back(body.begin(), body.end());
    }
    return bs;
  }
};

// ---------------------------------------------------------------------------
// Cost accounting

struct StepCost {
  double t = 0.0, s = 0.0;      // t == s for the X_T frame
  double kl_bits = 0.0;         // KL of the realized step
  double payload_bits = 0.0;    // ideal code length under the coder's model
  std::size_t frame_bytes = 0;  // including the 2-byte length prefix
  std::size_t chunks = 0;
  std::uint64_t candidates = 0;
};

struct CostLedger {
  std::vector<StepCost> steps;
  std::size_t header_bytes = 0;
  double tail_payload_bits = 0.0;
  std::size_t tail_frame_bytes = 0;

  double kl_bits() const {
    double s = 0.0;
    for (const auto& c : steps) s += c.kl_bits;
    return s;
  }
  double payload_bits() const {
    double s = tail_payload_bits;
    for (const auto& c : steps) s += c.payload_bits;
    return s;
  }
  std::size_t total_bytes() const {
    std::size_t s = header_bytes + tail_frame_bytes;
    for (const auto& c : steps) s += c.frame_bytes;
    return s;
  }
};

struct EncodeResult {
  Bitstream stream;
  CostLedger ledger;
  std::vector<Vector> trajectory;  // state at each grid time, X_T first
};

// ---------------------------------------------------------------------------
// Encoding

namespace detail {

struct PfrFrame {
  std::vector<std::uint8_t> bytes;
  Vector y;
  StepCost cost;
};

inline PfrFrame pfr_frame_encode(const ChannelSpec& spec, const Vector& target, const Vector& hints,
                                 const CodecConfig& cfg, std::uint64_t seed, std::size_t frame) {
  const Eigen::Index n = target.size();
  const auto plan = chunk_plan(n, hints.sum(), cfg.chunk_target_bits);
  PfrFrame out;
  out.y.resize(n);
  RangeEncoder enc;
  Eigen::Index start = 0;
  for (std::size_t c = 0; c < plan.size(); ++c) {
    const Eigen::Index len = plan[c];
    const ChannelSpec seg = spec.segment(start, len);
    PfrResult r;
    try {
      r = pfr_encode(seg, target.segment(start, len), pfr_stream(seed, frame, c), cfg.max_candidates);
    } catch (const PfrTruncation& e) {
      throw PfrTruncation("frame " + std::to_string(frame) + " chunk " + std::to_string(c) + ": " +
                              e.what(),
                          e.candidates(), e.gap());
    }
    const ZipfIndexCode code(hints.segment(start, len).sum());
    code.encode(enc, r.index);
    out.cost.payload_bits += code.length_bits(r.index);
    out.cost.kl_bits += r.kl_nats * kLog2e;
    out.cost.candidates += r.candidates;
    out.y.segment(start, len) = r.y;
    start += len;
  }
  out.cost.chunks = plan.size();
  out.bytes = enc.finish();
  out.cost.frame_bytes = 2 + out.bytes.size();
  return out;
}

inline Vector pfr_frame_decode(std::span<const std::uint8_t> bytes, const ChannelSpec& spec,
                               const Vector& hints, const CodecConfig& cfg, std::uint64_t seed,
                               std::size_t frame) {
  const Eigen::Index n = spec.dim();
  const auto plan = chunk_plan(n, hints.sum(), cfg.chunk_target_bits);
  RangeDecoder dec(bytes);
  Vector y(n);
  Eigen::Index start = 0;
  for (std::size_t c = 0; c < plan.size(); ++c) {
    const Eigen::Index len = plan[c];
    const std::uint64_t k = ZipfIndexCode(hints.segment(start, len).sum()).decode(dec);
    if (k > cfg.max_candidates) throw BitstreamError("candidate index exceeds the search budget");
    y.segment(start, len) = pfr_decode(k, spec.segment(start, len), pfr_stream(seed, frame, c));
    start += len;
  }
  if (!dec.exhausted()) throw BitstreamError("trailing bytes in frame " + std::to_string(frame));
  return y;
}

inline DiscretizedPMF tail_pmf(const PatchBankSource& bank, const NoiseSchedule& sch,
                               const Vector& x_tau, double tau) {
  const auto post = bank.group_posterior(x_tau, sch.alpha(tau), sch.sigma(tau));
  return DiscretizedPMF::from_weights(0, post);
}

}  // namespace detail

/// Transmits x0 down the grid, one frame per step.
inline EncodeResult encode_progressive(const Vector& x0, const CodecConfig& cfg) {
  cfg.validate();
  const SourceOracle& oracle = *cfg.oracle;
  const Eigen::Index n = oracle.dim();
  if (x0.size() != n) throw InvalidArgument("encode: dimension mismatch");
  require_finite(x0, "encode input");
  const auto& times = cfg.grid.times();
  const NoiseSchedule& sch = cfg.schedule;

  EncodeResult res;
  auto& hdr = res.stream.header;
  hdr.digest = cfg.digest;
  hdr.seed = cfg.seed;
  hdr.dim = static_cast<std::uint32_t>(n);
  hdr.times = times;
  res.ledger.header_bytes = hdr.bytes();

  std::size_t frame = 0;
  Vector x;
  if (cfg.backend == Backend::gaussian_pfr) {
    const double T = times.front();
    auto f = detail::pfr_frame_encode(prior_channel(sch, n), sch.alpha(T) * x0,
                                      prior_hints(oracle, sch), cfg, cfg.seed, frame++);
    f.cost.t = f.cost.s = T;
    res.stream.frames.push_back(std::move(f.bytes));
    res.ledger.steps.push_back(f.cost);
    x = f.y;
  } else {
    x = prior_draw(cfg.seed, n);
  }
  res.trajectory.push_back(x);

  for (std::size_t j = 1; j < times.size(); ++j) {
    const double t = times[j - 1], s = times[j];
    const StepModel m = step_model(oracle, sch, x, t, s);
    const ChannelSpec spec = step_channel(m, cfg.backend);
    const Vector target = step_target_mean(m, x, x0);
    if (cfg.backend == Backend::gaussian_pfr) {
      auto f = detail::pfr_frame_encode(spec, target, pfr_step_hints(m), cfg, cfg.seed, frame++);
      f.cost.t = t;
      f.cost.s = s;
      res.stream.frames.push_back(std::move(f.bytes));
      res.ledger.steps.push_back(f.cost);
      x = f.y;
    } else {
      auto dr = dither_stream(cfg.seed, j);
      const Vector w = shared_uniform(dr, n, m.width());
      const auto q = dq_encode(target, m.width(), w);
      const auto pmfs = dq_index_pmfs(spec, w);
      StepCost c;
      c.t = t;
      c.s = s;
      c.chunks = 1;
      c.kl_bits = spec.kl_nats(target) * kLog2e;
      for (std::size_t i = 0; i < pmfs.size(); ++i) c.payload_bits += code_length_bits(pmfs[i], q.indices[i]);
      auto bytes = range_encode(q.indices, pmfs);
      c.frame_bytes = 2 + bytes.size();
      res.stream.frames.push_back(std::move(bytes));
      res.ledger.steps.push_back(c);
      ++frame;
      x = q.y;
    }
    detail::require_finite_state(x, "trajectory state");
    res.trajectory.push_back(x);
  }

  if (cfg.lossless_tail) {
    const auto* bank = oracle.patches();
    const auto g = bank->group_of_value(x0);
    if (!g) throw InvalidArgument("encode: lossless tail needs x0 to be a bank patch");
    const auto pmf = detail::tail_pmf(*bank, sch, x, times.back());
    const std::int64_t sym = *g;
    auto bytes = range_encode(std::span<const std::int64_t>(&sym, 1), std::span(&pmf, 1));
    res.ledger.tail_payload_bits = code_length_bits(pmf, sym);
    res.ledger.tail_frame_bytes = 2 + bytes.size();
    res.stream.frames.push_back(std::move(bytes));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Decoding

struct DecodeResult {
  Vector x;                 // state at the deepest decoded time
  double t = 0.0;
  std::size_t steps_decoded = 0;  // grid steps below T
  bool prior_only = false;        // nothing transmitted yet; x is the shared prior draw
  std::vector<Vector> trajectory;
  std::optional<Vector> x0;       // exact source value from the lossless tail
};

/// Decodes every whole frame present in `bytes`, which must end at a frame
/// boundary.
inline DecodeResult decode_progressive(std::span<const std::uint8_t> bytes, const CodecConfig& cfg) {
  cfg.validate();
  const Bitstream bs = Bitstream::parse(bytes);
  if (bs.header.digest != cfg.digest) throw BitstreamError("configuration digest mismatch");
  const SourceOracle& oracle = *cfg.oracle;
  const Eigen::Index n = oracle.dim();
  if (bs.header.dim != static_cast<std::uint32_t>(n)) throw BitstreamError("dimension mismatch");
  if (bs.header.times != cfg.grid.times()) throw BitstreamError("time grid mismatch");
  const std::size_t expected = cfg.step_frames();
  const std::size_t allowed = expected + (cfg.lossless_tail ? 1 : 0);
  if (bs.frames.size() > allowed) throw BitstreamError("unexpected trailing frame");

  const auto& times = bs.header.times;
  const NoiseSchedule& sch = cfg.schedule;
  const std::uint64_t seed = bs.header.seed;
  DecodeResult out;
  std::size_t frame = 0;
  Vector x;
  if (cfg.backend == Backend::gaussian_pfr) {
    if (bs.frames.empty()) {
      out.x = prior_draw(seed, n);
      out.t = times.front();
      out.prior_only = true;
      out.trajectory.push_back(out.x);
      return out;
    }
    x = detail::pfr_frame_decode(bs.frames[0], prior_channel(sch, n), prior_hints(oracle, sch), cfg,
                                 seed, frame++);
  } else {
    x = prior_draw(seed, n);
    out.prior_only = true;
  }
  out.trajectory.push_back(x);

  std::size_t j = 1;
  for (; j < times.size() && frame < std::min(expected, bs.frames.size()); ++j) {
    const double t = times[j - 1], s = times[j];
    const StepModel m = step_model(oracle, sch, x, t, s);
    const ChannelSpec spec = step_channel(m, cfg.backend);
    if (cfg.backend == Backend::gaussian_pfr) {
      x = detail::pfr_frame_decode(bs.frames[frame], spec, pfr_step_hints(m), cfg, seed, frame);
    } else {
      auto dr = dither_stream(seed, j);
      const Vector w = shared_uniform(dr, n, m.width());
      const auto pmfs = dq_index_pmfs(spec, w);
      x = dq_decode(range_decode(bs.frames[frame], pmfs, pmfs.size()), m.width(), w);
      out.prior_only = false;
    }
    ++frame;
    detail::require_finite_state(x, "decoded state");
    out.trajectory.push_back(x);
  }
  out.steps_decoded = j - 1;
  out.t = times[j - 1];
  out.x = x;

  if (bs.frames.size() == allowed && cfg.lossless_tail) {
    const auto* bank = oracle.patches();
    const auto pmf = detail::tail_pmf(*bank, sch, x, times.back());
    const auto g = range_decode(bs.frames.back(), std::span(&pmf, 1), 1)[0];
    out.x0 = bank->distinct_patch(static_cast<std::size_t>(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction

// Draw from P(X0 | X_t = x_t): exact in one step, or by Euler-Maruyama on the
// reverse SDE followed by a final denoise.
inline Vector reconstruct_sde(const SourceOracle& oracle, const NoiseSchedule& sch,
                              const Vector& x_t, double t, SyncedRandomness& rng, int steps = 0) {
  if (t == 0.0) return x_t;
  sch.check_time(t);
  if (steps <= 0) return oracle.posterior_sample(x_t, sch.alpha(t), sch.sigma(t), rng);
  const double eps = 1e-3 * t, h = (t - eps) / steps;
  Vector x = x_t;
  double u = t;
  for (int k = 0; k < steps; ++k, u -= h) {
    const Vector sc = oracle.score(x, sch.alpha(u), sch.sigma(u));
    const double g2 = sch.diffusion2(u);
    Vector z(x.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    x += h * (g2 * sc - sch.drift(u) * x) + std::sqrt(g2 * h) * z;
    detail::require_finite_state(x, "reverse SDE state");
  }
  return oracle.posterior_mean(x, sch.alpha(eps), sch.sigma(eps));
}

// Probability-flow ODE from t down to 0 with classical RK4. Steps are uniform
// in u = sqrt(t), where the variance-preserving flow is smooth near 0.
inline Vector reconstruct_ode(const SourceOracle& oracle, const NoiseSchedule& sch, const Vector& x_t,
                              double t, int steps = 64) {
  if (t == 0.0) return x_t;
  sch.check_time(t);
  if (steps < 1) throw InvalidArgument("ode: steps must be positive");
  const double floor = 1e-12 * sch.end_time();
  // dx/du = 2 u v(x, u^2)
  auto f = [&](const Vector& x, double u) {
    const double tt = std::max(u * u, floor);
    return Vector(2.0 * u *
                  velocity_from_denoiser(sch, x, tt, oracle.posterior_mean(x, sch.alpha(tt), sch.sigma(tt))));
  };
  const double u0 = std::sqrt(t), h = u0 / steps;
  Vector x = x_t;
  for (int k = 0; k < steps; ++k) {
    const double u = u0 - k * h;
    const Vector k1 = f(x, u);
    const Vector k2 = f(x - 0.5 * h * k1, u - 0.5 * h);
    const Vector k3 = f(x - 0.5 * h * k2, u - 0.5 * h);
    const Vector k4 = f(x - h * k3, std::max(u - h, 0.0));
    x -= (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    detail::require_finite_state(x, "ODE state");
  }
  return x;
}

inline Vector reconstruct_posterior_mean(const SourceOracle& oracle, const NoiseSchedule& sch,
                                         const Vector& x_t, double t) {
  if (t == 0.0) return x_t;
  return oracle.posterior_mean(x_t, sch.alpha(t), sch.sigma(t));
}

inline Vector reconstruct(const CodecConfig& cfg, const Vector& x_t, double t, SyncedRandomness& rng) {
  switch (cfg.reconstruction) {
    case Reconstruction::sde: return reconstruct_sde(*cfg.oracle, cfg.schedule, x_t, t, rng, cfg.sde_steps);
    case Reconstruction::ode: return reconstruct_ode(*cfg.oracle, cfg.schedule, x_t, t, cfg.ode_steps);
    case Reconstruction::posterior_mean:
      return reconstruct_posterior_mean(*cfg.oracle, cfg.schedule, x_t, t);
  }
  return x_t;
}

inline Vector reconstruct(const CodecConfig& cfg, const DecodeResult& d, SyncedRandomness& rng) {
  if (d.x0) return *d.x0;
  return reconstruct(cfg, d.x, d.t, rng);
}

// ---------------------------------------------------------------------------
// Cost estimates

struct CostEstimate {
  std::vector<double> frame_bits;  // expected KL per transmitted frame
  std::vector<double> frame_std_error;
  double total_bits = 0.0;
  double total_std_error = 0.0;
  bool closed_form = false;
  // I(X0; X_tau) in bits where it has a closed form (Gaussian sources), else NaN.
  double mutual_information_bits = std::numeric_limits<double>::quiet_NaN();
};

inline double gaussian_mutual_information_bits(const GaussianSource& g, const NoiseSchedule& sch,
                                               double t) {
  const double xi = sch.snr(t);
  double bits = 0.0;
  for (Eigen::Index i = 0; i < g.eigenvalues().size(); ++i)
    bits += 0.5 * std::log2(1.0 + xi * g.eigenvalues()[i]);
  return bits;
}

/// Expected theoretical cost of transmitting down the grid. Closed form for
/// Gaussian sources on the Gaussian backend; Monte Carlo over `trials`
/// simulated trajectories otherwise.
inline CostEstimate cost_estimate(const CodecConfig& cfg, std::size_t trials = 256,
                                  std::uint64_t seed = 0) {
  cfg.validate();
  const SourceOracle& oracle = *cfg.oracle;
  const NoiseSchedule& sch = cfg.schedule;
  const auto& times = cfg.grid.times();
  const Eigen::Index n = oracle.dim();
  CostEstimate est;
  if (const auto* g = oracle.gaussian()) est.mutual_information_bits =
      gaussian_mutual_information_bits(*g, sch, times.back());

  if (cfg.backend == Backend::gaussian_pfr && oracle.gaussian()) {
    est.closed_form = true;
    est.frame_bits.push_back(prior_hints(oracle, sch).sum());
    const Vector dummy = Vector::Zero(n);
    for (std::size_t j = 1; j < times.size(); ++j)
      est.frame_bits.push_back(pfr_step_hints(step_model(oracle, sch, dummy, times[j - 1], times[j])).sum());
    est.frame_std_error.assign(est.frame_bits.size(), 0.0);
    for (double b : est.frame_bits) est.total_bits += b;
    return est;
  }

  if (trials < 2) throw InvalidArgument("cost_estimate: need at least two trials");
  const std::size_t frames = cfg.step_frames();
  std::vector<double> sum(frames, 0.0), sum2(frames, 0.0);
  double tot = 0.0, tot2 = 0.0;
  for (std::size_t r = 0; r < trials; ++r) {
    SyncedRandomness rng(seed, derive_stream(kEstimateTag, r));
    const Vector x0 = oracle.sample(rng);
    std::vector<double> kl;
    Vector x(n);
    if (cfg.backend == Backend::gaussian_pfr) {
      const double T = times.front(), a = sch.alpha(T), s = sch.sigma(T);
      const Vector m = a * x0;
      kl.push_back(prior_channel(sch, n).kl_nats(m) * kLog2e);
      for (Eigen::Index i = 0; i < n; ++i) x[i] = m[i] + s * rng.normal();
    } else {
      for (Eigen::Index i = 0; i < n; ++i) x[i] = rng.normal();
    }
    for (std::size_t j = 1; j < times.size(); ++j) {
      const StepModel m = step_model(oracle, sch, x, times[j - 1], times[j]);
      const Vector target = step_target_mean(m, x, x0);
      kl.push_back(step_channel(m, cfg.backend).kl_nats(target) * kLog2e);
      if (cfg.backend == Backend::gaussian_pfr) {
        const double sd = std::sqrt(m.coef.variance);
        for (Eigen::Index i = 0; i < n; ++i) x[i] = target[i] + sd * rng.normal();
      } else {
        const double D = m.width();
        for (Eigen::Index i = 0; i < n; ++i) x[i] = target[i] + D * (rng.uniform() - 0.5);
      }
    }
    double t = 0.0;
    for (std::size_t f = 0; f < frames; ++f) {
      sum[f] += kl[f];
      sum2[f] += kl[f] * kl[f];
      t += kl[f];
    }
    tot += t;
    tot2 += t * t;
  }
  const double N = double(trials);
  auto se = [N](double s, double s2) {
    const double mean = s / N;
    return std::sqrt(std::max(0.0, s2 / N - mean * mean) / (N - 1.0));
  };
  for (std::size_t f = 0; f < frames; ++f) {
    est.frame_bits.push_back(sum[f] / N);
    est.frame_std_error.push_back(se(sum[f], sum2[f]));
  }
  est.total_bits = tot / N;
  est.total_std_error = se(tot, tot2);
  return est;
}

/// log p(x_T) + sum over steps of log p(x_s | x_t), with the standard normal
/// prior and the per-step reference kernels.
inline double joint_reference_log_density(const CodecConfig& cfg, const std::vector<Vector>& traj) {
  cfg.validate();
  const auto& times = cfg.grid.times();
  if (traj.size() != times.size()) throw InvalidArgument("joint density: trajectory length");
  const double c = 0.5 * std::log(2.0 * std::numbers::pi);
  double lp = 0.0;
  for (Eigen::Index i = 0; i < traj[0].size(); ++i) lp += -0.5 * traj[0][i] * traj[0][i] - c;
  for (std::size_t j = 1; j < times.size(); ++j) {
    const StepModel m = step_model(*cfg.oracle, cfg.schedule, traj[j - 1], times[j - 1], times[j]);
    const Vector& y = traj[j];
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (cfg.backend == Backend::gaussian_pfr) {
        const double v = m.coef.variance + m.ref_var[i], d = y[i] - m.ref_mean[i];
        lp += -0.5 * d * d / v - 0.5 * std::log(v) - c;
      } else {
        lp += log_gaussian_uniform_density(y[i], m.ref_mean[i], std::sqrt(m.ref_var[i]), m.width());
      }
    }
  }
  return lp;
}

}  // namespace dfc
