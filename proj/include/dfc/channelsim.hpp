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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <vector>

#include "dfc/entropy.hpp"
#include "dfc/error.hpp"
#include "dfc/numeric.hpp"
#include "dfc/random.hpp"

namespace dfc {

// W ~ U[-delta/2, delta/2)^k.
inline Vector shared_uniform(SyncedRandomness& rng, Eigen::Index k, double delta) {
  if (!(delta > 0.0)) throw InvalidArgument("shared_uniform: delta must be positive");
  Vector w(k);
  for (Eigen::Index i = 0; i < k; ++i) w[i] = delta * (rng.uniform() - 0.5);
  return w;
}

struct DqResult {
  std::vector<std::int64_t> indices;
  Vector y;
};

inline DqResult dq_encode(const Vector& x, double delta, const Vector& w) {
  if (!(delta > 0.0)) throw InvalidArgument("dq_encode: delta must be positive");
  if (x.size() != w.size()) throw InvalidArgument("dq_encode: dither size mismatch");
  require_finite(x, "dq_encode");
  DqResult r;
  r.indices.resize(static_cast<std::size_t>(x.size()));
  r.y.resize(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double k = round_half_away((x[i] + w[i]) / delta);
    r.indices[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(k);
    r.y[i] = delta * k - w[i];
  }
  return r;
}

inline Vector dq_decode(const std::vector<std::int64_t>& indices, double delta, const Vector& w) {
  if (static_cast<Eigen::Index>(indices.size()) != w.size())
    throw InvalidArgument("dq_decode: dither size mismatch");
  Vector y(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i)
    y[i] = delta * static_cast<double>(indices[static_cast<std::size_t>(i)]) - w[i];
  return y;
}

enum class ChannelKind { uniform_additive, gaussian_additive };
enum class ReferenceKind { gaussian, uniform, gaussian_uniform };

/// Target P_{Y|X=x} and reference P_Y, both products over coordinates.
///
/// Targets: uniform-additive Y = x + U[-D/2, D/2], gaussian-additive
/// Y = x + N(0, s^2). References: N(m, b^2), U[m - W/2, m + W/2], or
/// N(m, b^2) convolved with U[-W/2, W/2].
class ChannelSpec {
 public:
  static ChannelSpec gaussian(Vector target_std, Vector ref_mean, Vector ref_std) {
    ChannelSpec c(ChannelKind::gaussian_additive, std::move(target_std), ReferenceKind::gaussian,
                  std::move(ref_mean));
    c.ref_std_ = std::move(ref_std);
    c.validate();
    return c;
  }

  static ChannelSpec uniform(Vector width, ReferenceKind ref, Vector ref_mean, Vector ref_std,
                             Vector ref_width) {
    ChannelSpec c(ChannelKind::uniform_additive, std::move(width), ref, std::move(ref_mean));
    c.ref_std_ = std::move(ref_std);
    c.ref_width_ = std::move(ref_width);
    c.validate();
    return c;
  }

  ChannelKind kind() const { return kind_; }
  ReferenceKind reference_kind() const { return ref_kind_; }
  Eigen::Index dim() const { return scale_.size(); }
  const Vector& scale() const { return scale_; }
  const Vector& ref_mean() const { return ref_mean_; }
  const Vector& ref_std() const { return ref_std_; }
  const Vector& ref_width() const { return ref_width_; }

  // The coordinates [start, start + len) as a channel of their own.
  ChannelSpec segment(Eigen::Index start, Eigen::Index len) const {
    ChannelSpec c = *this;
    c.scale_ = scale_.segment(start, len);
    c.ref_mean_ = ref_mean_.segment(start, len);
    if (ref_std_.size()) c.ref_std_ = ref_std_.segment(start, len);
    if (ref_width_.size()) c.ref_width_ = ref_width_.segment(start, len);
    return c;
  }

  double ref_log_density(const Vector& y) const {
    double out = 0.0;
    for (Eigen::Index i = 0; i < dim(); ++i) out += ref_log_density(i, y[i]);
    return out;
  }

  double ref_log_density(Eigen::Index i, double y) const {
    const double m = ref_mean_[i];
    switch (ref_kind_) {
      case ReferenceKind::gaussian: {
        const double z = (y - m) / ref_std_[i];
        return -0.5 * z * z - std::log(ref_std_[i]) - 0.5 * std::log(2.0 * std::numbers::pi);
      }
      case ReferenceKind::uniform:
        return std::abs(y - m) <= 0.5 * ref_width_[i] ? -std::log(ref_width_[i]) : -kInf;
      case ReferenceKind::gaussian_uniform:
        return log_gaussian_uniform_density(y, m, ref_std_[i], ref_width_[i]);
    }
    return -kInf;
  }

  double target_log_density(Eigen::Index i, double y, double x) const {
    if (kind_ == ChannelKind::gaussian_additive) {
      const double z = (y - x) / scale_[i];
      return -0.5 * z * z - std::log(scale_[i]) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    return std::abs(y - x) <= 0.5 * scale_[i] ? -std::log(scale_[i]) : -kInf;
  }

  // log dP_{Y|X=x}/dP_Y at y.
  double log_ratio(const Vector& y, const Vector& x) const {
    double out = 0.0;
    for (Eigen::Index i = 0; i < dim(); ++i) {
      const double t = target_log_density(i, y[i], x[i]);
      if (t == -kInf) return -kInf;
      out += t - ref_log_density(i, y[i]);
    }
    return out;
  }

  // Supremum of log_ratio over y; throws when the ratio is unbounded.
  double log_ratio_sup(const Vector& x) const {
    check(x);
    double out = 0.0;
    for (Eigen::Index i = 0; i < dim(); ++i) out += log_ratio_sup(i, x[i]);
    return out;
  }

  double log_ratio_sup(Eigen::Index i, double x) const {
    const double m = ref_mean_[i];
    if (kind_ == ChannelKind::gaussian_additive) {
      const double a = scale_[i], b = ref_std_[i];
      if (b > a) return std::log(b / a) + 0.5 * (x - m) * (x - m) / (b * b - a * a);
      if (b == a && x == m) return 0.0;
      throw InvalidArgument("channel: density ratio unbounded (reference narrower than target)");
    }
    const double h = 0.5 * scale_[i];
    const double far = std::max(std::abs(x - h - m), std::abs(x + h - m));
    switch (ref_kind_) {
      case ReferenceKind::gaussian: {
        const double b = ref_std_[i];
        return -std::log(scale_[i]) + std::log(b) + 0.5 * std::log(2.0 * std::numbers::pi) +
               0.5 * far * far / (b * b);
      }
      case ReferenceKind::uniform:
        if (far > 0.5 * ref_width_[i] * (1.0 + 1e-12))
          throw InvalidArgument("channel: target support exceeds uniform reference");
        return std::log(ref_width_[i] / scale_[i]);
      case ReferenceKind::gaussian_uniform: {
        // The convolved density is unimodal about m, so its minimum over the
        // target interval sits at the far end.
        const double y = std::abs(x - h - m) > std::abs(x + h - m) ? x - h : x + h;
        const double lr = -std::log(scale_[i]) - ref_log_density(i, y);
        if (!std::isfinite(lr))
          throw InvalidArgument("channel: target support exceeds reference support");
        return lr;
      }
    }
    return kInf;
  }

  // KL(P_{Y|X=x} || P_Y) in nats.
  double kl_nats(const Vector& x) const {
    check(x);
    double out = 0.0;
    for (Eigen::Index i = 0; i < dim(); ++i) out += kl_nats(i, x[i]);
    return out;
  }

  double kl_nats(Eigen::Index i, double x) const {
    const double m = ref_mean_[i], d = x - m;
    if (kind_ == ChannelKind::gaussian_additive) {
      const double a = scale_[i], b = ref_std_[i];
      return std::log(b / a) + (a * a + d * d) / (2.0 * b * b) - 0.5;
    }
    const double D = scale_[i];
    switch (ref_kind_) {
      case ReferenceKind::gaussian: {
        const double b = ref_std_[i];
        return -std::log(D) + std::log(b) + 0.5 * std::log(2.0 * std::numbers::pi) +
               (d * d + D * D / 12.0) / (2.0 * b * b);
      }
      case ReferenceKind::uniform:
        return std::log(ref_width_[i] / D);
      case ReferenceKind::gaussian_uniform: {
        const double h = 0.5 * D;
        auto f = [&](double y) { return -std::log(D) - ref_log_density(i, y); };
        return integrate(f, x - h, x + h, 1e-11).value / D;
      }
    }
    return kInf;
  }

  Vector sample_reference(SyncedRandomness& rng) const {
    Vector y(dim());
    for (Eigen::Index i = 0; i < dim(); ++i) {
      switch (ref_kind_) {
        case ReferenceKind::gaussian:
          y[i] = ref_mean_[i] + ref_std_[i] * rng.normal();
          break;
        case ReferenceKind::uniform:
          y[i] = ref_mean_[i] + ref_width_[i] * (rng.uniform() - 0.5);
          break;
        case ReferenceKind::gaussian_uniform:
          y[i] = ref_mean_[i] + ref_std_[i] * rng.normal() + ref_width_[i] * (rng.uniform() - 0.5);
          break;
      }
    }
    return y;
  }

  Vector sample_target(const Vector& x, SyncedRandomness& rng) const {
    Vector y(dim());
    for (Eigen::Index i = 0; i < dim(); ++i)
      y[i] = kind_ == ChannelKind::gaussian_additive ? x[i] + scale_[i] * rng.normal()
                                                     : x[i] + scale_[i] * (rng.uniform() - 0.5);
    return y;
  }

 private:
  ChannelSpec(ChannelKind kind, Vector scale, ReferenceKind ref, Vector ref_mean)
      : kind_(kind), ref_kind_(ref), scale_(std::move(scale)), ref_mean_(std::move(ref_mean)) {}

  void validate() const {
    const auto k = dim();
    if (k < 1) throw InvalidArgument("channel: empty");
    if (!(scale_.array() > 0.0).all() || !scale_.allFinite())
      throw InvalidArgument("channel: target scale must be positive");
    if (ref_mean_.size() != k || !ref_mean_.allFinite())
      throw InvalidArgument("channel: reference mean malformed");
    const bool needs_std = ref_kind_ != ReferenceKind::uniform;
    const bool needs_width = ref_kind_ != ReferenceKind::gaussian;
    if (needs_std) {
      if (ref_std_.size() != k || !ref_std_.allFinite())
        throw InvalidArgument("channel: reference std malformed");
      const bool strict = ref_kind_ == ReferenceKind::gaussian;
      if ((strict && !(ref_std_.array() > 0.0).all()) || !(ref_std_.array() >= 0.0).all())
        throw InvalidArgument("channel: reference std must be positive");
    }
    if (needs_width && (ref_width_.size() != k || !(ref_width_.array() > 0.0).all()))
      throw InvalidArgument("channel: reference width must be positive");
    if (kind_ == ChannelKind::gaussian_additive && ref_kind_ != ReferenceKind::gaussian)
      throw InvalidArgument("channel: gaussian targets need a gaussian reference");
  }

  void check(const Vector& x) const {
    if (x.size() != dim()) throw InvalidArgument("channel: dimension mismatch");
    require_finite(x, "channel input");
  }

  ChannelKind kind_;
  ReferenceKind ref_kind_;
  Vector scale_;
  Vector ref_mean_;
  Vector ref_std_;
  Vector ref_width_;
};

inline constexpr std::uint64_t kDefaultMaxCandidates = std::uint64_t{1} << 26;

namespace detail {
inline constexpr std::uint64_t kCandidateTag = 0xC0DE;
inline constexpr std::uint64_t kArrivalTag = 0xA7A7;
}  // namespace detail

struct PfrResult {
  std::uint64_t index = 0;  // 1-based
  Vector y;
  std::uint64_t candidates = 0;  // generated before the race settled
  double kl_nats = 0.0;
  double log_ratio_sup = 0.0;
};

/// Poisson functional representation by an exponential race.
///
/// Candidates Y_i ~ P_Y and arrival times T_i (cumulative unit exponentials)
/// come from two sub-streams of `rng`. The winner minimizes T_i / r(Y_i).
/// Since T increases and r <= r_max, no later candidate can beat the current
/// best once log T_i - log r_max >= best, so the race stops there.
inline PfrResult pfr_encode(const ChannelSpec& spec, const Vector& x, const SyncedRandomness& rng,
                            std::uint64_t max_candidates = kDefaultMaxCandidates) {
  if (max_candidates < 1) throw InvalidArgument("pfr_encode: max_candidates must be >= 1");
  PfrResult r;
  r.log_ratio_sup = spec.log_ratio_sup(x);
  r.kl_nats = spec.kl_nats(x);
  auto cand = rng.fork(detail::kCandidateTag);
  auto arrive = rng.fork(detail::kArrivalTag);
  double t = 0.0, best = kInf;
  for (std::uint64_t i = 1; i <= max_candidates; ++i) {
    t += arrive.exponential();
    Vector y = spec.sample_reference(cand);
    const double lt = std::log(t);
    const double score = lt - spec.log_ratio(y, x);
    if (score < best) {
      best = score;
      r.index = i;
      r.y = std::move(y);
    }
    r.candidates = i;
    if (lt - r.log_ratio_sup >= best) return r;
  }
  const double gap = best - (std::log(t) - r.log_ratio_sup);
  std::ostringstream os;
  os << "pfr: race not settled after " << max_candidates << " candidates (gap " << gap << " nats)";
  throw PfrTruncation(os.str(), max_candidates, gap);
}

// Regenerates candidates 1..index and returns the last.
inline Vector pfr_decode(std::uint64_t index, const ChannelSpec& spec, const SyncedRandomness& rng,
                         std::uint64_t* regenerated = nullptr) {
  if (index < 1) throw BitstreamError("pfr_decode: index must be >= 1");
  auto cand = rng.fork(detail::kCandidateTag);
  Vector y;
  for (std::uint64_t i = 1; i <= index; ++i) y = spec.sample_reference(cand);
  if (regenerated) *regenerated = index;
  return y;
}

/// Contiguous block sizes with roughly `target_bits` of cost each, assuming
/// the total cost splits evenly over coordinates.
inline std::vector<Eigen::Index> chunk_plan(Eigen::Index k, double cost_bits,
                                            double target_bits = 16.0) {
  if (k < 1) throw InvalidArgument("chunk_plan: k must be >= 1");
  if (!(target_bits > 0.0)) throw InvalidArgument("chunk_plan: target must be positive");
  Eigen::Index per = k;
  if (cost_bits > 0.0 && std::isfinite(cost_bits))
    per = std::clamp<Eigen::Index>(
        static_cast<Eigen::Index>(std::floor(target_bits * double(k) / cost_bits + 1e-9)), 1, k);
  std::vector<Eigen::Index> sizes;
  for (Eigen::Index left = k; left > 0; left -= std::min(per, left)) sizes.push_back(std::min(per, left));
  return sizes;
}

enum class IndexCode { zipf, elias_gamma };

/// One channel use with its transmitted message.
struct SimResult {
  Vector y;
  std::vector<std::uint8_t> message;
  double nats_cost = 0.0;     // KL(P_{Y|X=x} || P_Y)
  double ideal_bits = 0.0;    // code length under the fixed-point model
  std::size_t bits_used = 0;  // actual message length
  std::uint64_t index = 0;    // PFR only
};

// Index pmfs for a uniform channel coded by DQ: each coordinate's reference
// mass on the dithered grid cells.
inline std::vector<DiscretizedPMF> dq_index_pmfs(const ChannelSpec& spec, const Vector& w) {
  if (spec.kind() != ChannelKind::uniform_additive)
    throw InvalidArgument("dq: requires a uniform-additive channel");
  std::vector<DiscretizedPMF> pmfs;
  pmfs.reserve(static_cast<std::size_t>(spec.dim()));
  for (Eigen::Index i = 0; i < spec.dim(); ++i) {
    const double D = spec.scale()[i], m = spec.ref_mean()[i];
    switch (spec.reference_kind()) {
      case ReferenceKind::gaussian: {
        const double s = spec.ref_std()[i];
        const auto [lo, hi] = support_window(m, s, D, w[i]);
        pmfs.push_back(discretize_gaussian(m, s, D, w[i], lo, hi));
        break;
      }
      case ReferenceKind::gaussian_uniform: {
        const double s = spec.ref_std()[i], W = spec.ref_width()[i];
        const auto [lo, hi] = support_window(m, std::sqrt(s * s + W * W / 12.0), D, w[i]);
        pmfs.push_back(discretize_gaussian_uniform(m, s, W, D, w[i], lo, hi));
        break;
      }
      case ReferenceKind::uniform: {
        const double W = spec.ref_width()[i];
        const auto [lo, hi] = support_window(m, W / std::sqrt(12.0), D, w[i]);
        auto logu = [&](double y) { return std::abs(y - m) <= 0.5 * W ? -std::log(W) : -kInf; };
        pmfs.push_back(discretize_density(logu, D, w[i], lo, hi));
        break;
      }
    }
  }
  return pmfs;
}

inline double dq_width(const ChannelSpec& spec) {
  const double D = spec.scale()[0];
  if ((spec.scale().array() != D).any()) throw InvalidArgument("dq: widths must be equal");
  return D;
}

inline SimResult simulate_dq(const ChannelSpec& spec, const Vector& x, const SyncedRandomness& rng) {
  const double D = dq_width(spec);
  auto wr = rng;
  const Vector w = shared_uniform(wr, spec.dim(), D);
  const auto q = dq_encode(x, D, w);
  const auto pmfs = dq_index_pmfs(spec, w);
  SimResult r;
  r.y = q.y;
  r.nats_cost = spec.kl_nats(x);
  for (std::size_t i = 0; i < pmfs.size(); ++i) r.ideal_bits += code_length_bits(pmfs[i], q.indices[i]);
  r.message = range_encode(q.indices, pmfs);
  r.bits_used = 8 * r.message.size();
  return r;
}

inline Vector receive_dq(const ChannelSpec& spec, std::span<const std::uint8_t> message,
                         const SyncedRandomness& rng) {
  const double D = dq_width(spec);
  auto wr = rng;
  const Vector w = shared_uniform(wr, spec.dim(), D);
  const auto pmfs = dq_index_pmfs(spec, w);
  return dq_decode(range_decode(message, pmfs, pmfs.size()), D, w);
}

// `cost_hint_bits` tunes the index code and must be known to the receiver.
inline SimResult simulate_pfr(const ChannelSpec& spec, const Vector& x, const SyncedRandomness& rng,
                              double cost_hint_bits, IndexCode code = IndexCode::zipf,
                              std::uint64_t max_candidates = kDefaultMaxCandidates) {
  const auto p = pfr_encode(spec, x, rng, max_candidates);
  SimResult r;
  r.y = p.y;
  r.index = p.index;
  r.nats_cost = p.kl_nats;
  if (code == IndexCode::zipf) {
    const ZipfIndexCode zc(cost_hint_bits);
    RangeEncoder enc;
    zc.encode(enc, p.index);
    r.ideal_bits = zc.length_bits(p.index);
    r.message = enc.finish();
    r.bits_used = 8 * r.message.size();
  } else {
    BitWriter bw;
    elias_gamma_encode(bw, p.index);
    r.ideal_bits = elias_gamma_length(p.index);
    r.bits_used = bw.bit_count();
    r.message = bw.bytes();
  }
  return r;
}

inline Vector receive_pfr(const ChannelSpec& spec, std::span<const std::uint8_t> message,
                          const SyncedRandomness& rng, double cost_hint_bits,
                          IndexCode code = IndexCode::zipf) {
  std::uint64_t index;
  if (code == IndexCode::zipf) {
    RangeDecoder dec(message);
    index = ZipfIndexCode(cost_hint_bits).decode(dec);
    if (!dec.exhausted()) throw BitstreamError("pfr: trailing bytes");
  } else {
    BitReader br(message);
    index = elias_gamma_decode(br);
  }
  return pfr_decode(index, spec, rng);
}

}  // namespace dfc
