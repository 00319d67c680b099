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
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "dfc/error.hpp"
#include "dfc/numeric.hpp"

namespace dfc {

inline constexpr int kProbBits = 16;
inline constexpr std::uint32_t kProbTotal = 1u << kProbBits;
// Widest in-range table; wider supports fall back to the escape path.
inline constexpr std::int64_t kMaxSupport = 16384;

/// Integer pmf over [lo, hi] with 16-bit fixed-point frequencies, plus an
/// optional escape slot for symbols outside the support.
class DiscretizedPMF {
 public:
  DiscretizedPMF() = default;

  // Quantizes non-negative weights (one per symbol in [lo, hi]) to fixed
  // point. Every slot gets at least one unit. escape_weight < 0 disables the
  // escape slot; otherwise it is weighted like any other symbol.
  static DiscretizedPMF from_weights(std::int64_t lo, std::span<const double> weights,
                                     double escape_weight = -1.0) {
    if (weights.empty()) throw InvalidArgument("pmf: empty support");
    const bool esc = escape_weight >= 0.0;
    const std::size_t slots = weights.size() + (esc ? 1 : 0);
    if (slots > kProbTotal / 2) throw InvalidArgument("pmf: support too wide for 16-bit table");
    std::vector<double> w(weights.begin(), weights.end());
    if (esc) w.push_back(escape_weight);
    double total = 0.0;
    for (double v : w) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("pmf: invalid weight");
      total += v;
    }
    if (!(total > 0.0)) throw InvalidArgument("pmf: zero total mass on range");

    DiscretizedPMF p;
    p.lo_ = lo;
    p.hi_ = lo + static_cast<std::int64_t>(weights.size()) - 1;
    p.escape_ = esc;
    const std::uint32_t spare = kProbTotal - static_cast<std::uint32_t>(slots);
    p.freq_.assign(slots, 1);
    std::vector<double> frac(slots);
    std::uint32_t used = 0;
    for (std::size_t i = 0; i < slots; ++i) {
      const double share = w[i] / total * spare;
      const auto whole = static_cast<std::uint32_t>(std::floor(share));
      p.freq_[i] += whole;
      used += whole;
      frac[i] = share - whole;
    }
    // Largest remainders first; ties by position.
    std::vector<std::size_t> order(slots);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::uint32_t r = 0; used + r < spare; ++r) ++p.freq_[order[r % slots]];
    p.cum_.assign(slots + 1, 0);
    for (std::size_t i = 0; i < slots; ++i) p.cum_[i + 1] = p.cum_[i] + p.freq_[i];
    return p;
  }

  std::int64_t lo() const { return lo_; }
  std::int64_t hi() const { return hi_; }
  bool has_escape() const { return escape_; }
  bool contains(std::int64_t k) const { return k >= lo_ && k <= hi_; }
  std::size_t slots() const { return freq_.size(); }
  std::size_t escape_slot() const { return freq_.size() - 1; }
  std::uint32_t slot_freq(std::size_t s) const { return freq_[s]; }
  std::uint32_t slot_cum(std::size_t s) const { return cum_[s]; }
  std::uint32_t total() const { return cum_.back(); }

  std::uint32_t freq(std::int64_t k) const {
    if (contains(k)) return freq_[static_cast<std::size_t>(k - lo_)];
    return escape_ ? freq_.back() : 0;
  }

  double probability(std::int64_t k) const {
    return contains(k) ? double(freq(k)) / kProbTotal : 0.0;
  }

  // Slot whose cumulative range holds `target`.
  std::size_t find(std::uint32_t target) const {
    auto it = std::upper_bound(cum_.begin(), cum_.end(), target);
    return static_cast<std::size_t>(it - cum_.begin()) - 1;
  }

 private:
  std::int64_t lo_ = 0, hi_ = -1;
  bool escape_ = false;
  std::vector<std::uint32_t> freq_;
  std::vector<std::uint32_t> cum_;
};

namespace detail {

inline std::int64_t escape_offset(const DiscretizedPMF& p, std::int64_t k) {
  return k > p.hi() ? k - p.hi() : p.lo() - k;
}

inline int floor_log2(std::uint64_t v) { return 63 - __builtin_clzll(v); }

}  // namespace detail

// Ideal code length in bits of k under p, including the escape payload.
inline double code_length_bits(const DiscretizedPMF& p, std::int64_t k) {
  const std::uint32_t f = p.freq(k);
  if (f == 0) return kInf;
  double bits = kProbBits - std::log2(double(f));
  if (!p.contains(k))
    bits += 1.0 + 2.0 * detail::floor_log2(static_cast<std::uint64_t>(detail::escape_offset(p, k))) + 1.0;
  return bits;
}

/// Pmf of the grid index k whose cell is [D k - w - D/2, D k - w + D/2].
///
/// The generic path takes density times width at the cell midpoint; with a
/// reference of the form psi * U(D) this is exactly the psi-mass of the cell,
/// which makes the expected code length equal the KL cost. Gaussian kinds use
/// exact CDF differences instead. subcells > 1 switches to a composite
/// midpoint rule, i.e. an approximation of the mass on each cell.
inline DiscretizedPMF discretize_density(const std::function<double(double)>& logdensity,
                                         double delta, double w, std::int64_t lo, std::int64_t hi,
                                         bool escape = true, int subcells = 1) {
  if (!(delta > 0.0)) throw InvalidArgument("discretize_density: delta must be positive");
  if (subcells < 1) throw InvalidArgument("discretize_density: subcells must be positive");
  if (!(lo < hi)) throw InvalidArgument("discretize_density: need lo < hi");
  if (hi - lo + 1 > kMaxSupport) throw InvalidArgument("discretize_density: range too wide");
  std::vector<double> mass(static_cast<std::size_t>(hi - lo + 1));
  double sum = 0.0;
  for (std::int64_t k = lo; k <= hi; ++k) {
    const double h = delta / subcells, left = delta * double(k) - w - 0.5 * delta;
    double m = 0.0;
    for (int j = 0; j < subcells; ++j) m += std::exp(logdensity(left + (j + 0.5) * h)) * h;
    mass[static_cast<std::size_t>(k - lo)] = m;
    sum += m;
  }
  return DiscretizedPMF::from_weights(lo, mass, escape ? std::max(0.0, 1.0 - sum) : -1.0);
}

inline DiscretizedPMF discretize_gaussian(double mean, double sd, double delta, double w,
                                          std::int64_t lo, std::int64_t hi, bool escape = true) {
  if (!(delta > 0.0) || !(sd > 0.0)) throw InvalidArgument("discretize_gaussian: bad scale");
  if (!(lo < hi)) throw InvalidArgument("discretize_gaussian: need lo < hi");
  if (hi - lo + 1 > kMaxSupport) throw InvalidArgument("discretize_gaussian: range too wide");
  std::vector<double> mass(static_cast<std::size_t>(hi - lo + 1));
  double sum = 0.0;
  for (std::int64_t k = lo; k <= hi; ++k) {
    const double c = delta * double(k) - w - mean;
    const double m =
        std::exp(log_normal_interval((c - 0.5 * delta) / sd, (c + 0.5 * delta) / sd));
    mass[static_cast<std::size_t>(k - lo)] = m;
    sum += m;
  }
  return DiscretizedPMF::from_weights(lo, mass, escape ? std::max(0.0, 1.0 - sum) : -1.0);
}

// Density of N(mean, sd^2) convolved with U[-width/2, width/2], in logs.
inline double log_gaussian_uniform_density(double y, double mean, double sd, double width) {
  const double h = 0.5 * width;
  if (sd == 0.0) return std::abs(y - mean) <= h ? -std::log(width) : -kInf;
  return log_normal_interval((y - mean - h) / sd, (y - mean + h) / sd) - std::log(width);
}

// Midpoint rule on the convolved density, evaluated through the CDF.
inline DiscretizedPMF discretize_gaussian_uniform(double mean, double sd, double width,
                                                  double delta, double w, std::int64_t lo,
                                                  std::int64_t hi, bool escape = true) {
  if (!(delta > 0.0) || !(width > 0.0) || !(sd >= 0.0))
    throw InvalidArgument("discretize_gaussian_uniform: bad scale");
  return discretize_density(
      [&](double y) { return log_gaussian_uniform_density(y, mean, sd, width); }, delta, w, lo, hi,
      escape);
}

// Index window of +-`spread` standard deviations around `mean`, never
// narrower than three cells nor wider than kMaxSupport.
inline std::pair<std::int64_t, std::int64_t> support_window(double mean, double sd, double delta,
                                                            double w, double spread = 8.0) {
  const double centre = (mean + w) / delta;
  const double half = std::clamp(spread * sd / delta + 1.0, 1.0, double(kMaxSupport / 2 - 1));
  return {static_cast<std::int64_t>(std::floor(centre - half)),
          static_cast<std::int64_t>(std::ceil(centre + half))};
}

/// Carry-less range coder (Subbotin) with 32-bit state.
class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq, int total_bits) {
    range_ >>= total_bits;
    low_ += cum * range_;
    range_ *= freq;
    normalize();
  }

  void encode_symbol(const DiscretizedPMF& p, std::int64_t k) {
    if (p.contains(k)) {
      const auto s = static_cast<std::size_t>(k - p.lo());
      encode(p.slot_cum(s), p.slot_freq(s), kProbBits);
      return;
    }
    if (!p.has_escape()) throw InvalidArgument("range coder: symbol outside support and no escape");
    const auto s = p.escape_slot();
    encode(p.slot_cum(s), p.slot_freq(s), kProbBits);
    encode_bit(k < p.lo());
    encode_gamma(static_cast<std::uint64_t>(detail::escape_offset(p, k)));
  }

  void encode_bit(bool b) { encode(b ? 1u : 0u, 1u, 1); }

  void encode_bits(std::uint64_t v, int n) {
    for (int i = n - 1; i >= 0; --i) encode_bit((v >> i) & 1u);
  }

  // Elias-gamma of v >= 1 as equiprobable bits.
  void encode_gamma(std::uint64_t v) {
    const int n = detail::floor_log2(v);
    for (int i = 0; i < n; ++i) encode_bit(false);
    encode_bits(v, n + 1);
  }

  std::vector<std::uint8_t> finish() {
    for (int i = 0; i < 4; ++i) {
      out_.push_back(static_cast<std::uint8_t>(low_ >> 24));
      low_ <<= 8;
    }
    return std::move(out_);
  }

 private:
  static constexpr std::uint32_t kTop = 1u << 24, kBot = 1u << 16;

  void normalize() {
    for (;;) {
      if ((low_ ^ (low_ + range_)) >= kTop) {
        if (range_ >= kBot) break;
        range_ = (0u - low_) & (kBot - 1);
      }
      out_.push_back(static_cast<std::uint8_t>(low_ >> 24));
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  std::uint32_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
  }

  std::uint32_t decode_freq(int total_bits) {
    range_ >>= total_bits;
    const std::uint32_t v = (code_ - low_) / range_;
    const std::uint32_t limit = (1u << total_bits) - 1u;
    return std::min(v, limit);
  }

  void consume(std::uint32_t cum, std::uint32_t freq) {
    low_ += cum * range_;
    range_ *= freq;
    normalize();
  }

  std::int64_t decode_symbol(const DiscretizedPMF& p) {
    const std::size_t s = p.find(decode_freq(kProbBits));
    consume(p.slot_cum(s), p.slot_freq(s));
    if (!p.has_escape() || s != p.escape_slot()) return p.lo() + static_cast<std::int64_t>(s);
    const bool below = decode_bit();
    const auto off = static_cast<std::int64_t>(decode_gamma());
    return below ? p.lo() - off : p.hi() + off;
  }

  bool decode_bit() {
    const std::uint32_t b = decode_freq(1);
    consume(b, 1);
    return b != 0;
  }

  std::uint64_t decode_bits(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 1) | (decode_bit() ? 1u : 0u);
    return v;
  }

  std::uint64_t decode_gamma() {
    int n = 0;
    while (!decode_bit()) {
      if (++n > 62) throw BitstreamError("range decoder: malformed gamma code");
    }
    return (std::uint64_t{1} << n) | decode_bits(n);
  }

  std::size_t consumed() const { return pos_; }
  bool exhausted() const { return pos_ == in_.size(); }

 private:
  static constexpr std::uint32_t kTop = 1u << 24, kBot = 1u << 16;

  std::uint32_t next_byte() {
    if (pos_ >= in_.size()) throw BitstreamError("range decoder: truncated stream");
    return in_[pos_++];
  }

  void normalize() {
    for (;;) {
      if ((low_ ^ (low_ + range_)) >= kTop) {
        if (range_ >= kBot) break;
        range_ = (0u - low_) & (kBot - 1);
      }
      code_ = (code_ << 8) | next_byte();
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint32_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t code_ = 0;
};

namespace detail {
inline const DiscretizedPMF& pmf_at(std::span<const DiscretizedPMF> pmfs, std::size_t i) {
  return pmfs.size() == 1 ? pmfs[0] : pmfs[i];
}
}  // namespace detail

// One pmf per symbol, or a single pmf shared by all.
inline std::vector<std::uint8_t> range_encode(std::span<const std::int64_t> symbols,
                                              std::span<const DiscretizedPMF> pmfs) {
  if (!symbols.empty() && pmfs.size() != 1 && pmfs.size() != symbols.size())
    throw InvalidArgument("range_encode: pmf count must be 1 or match symbols");
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i)
    enc.encode_symbol(detail::pmf_at(pmfs, i), symbols[i]);
  return enc.finish();
}

// Decodes `count` symbols; the stream must be consumed exactly.
inline std::vector<std::int64_t> range_decode(std::span<const std::uint8_t> bytes,
                                              std::span<const DiscretizedPMF> pmfs,
                                              std::size_t count) {
  if (count > 0 && pmfs.size() != 1 && pmfs.size() != count)
    throw InvalidArgument("range_decode: pmf count must be 1 or match count");
  RangeDecoder dec(bytes);
  std::vector<std::int64_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = dec.decode_symbol(detail::pmf_at(pmfs, i));
  if (!dec.exhausted()) throw BitstreamError("range decoder: trailing bytes");
  return out;
}

/// MSB-first bit packing.
class BitWriter {
 public:
  void put(bool b) {
    if (bits_ % 8 == 0) bytes_.push_back(0);
    if (b) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (bits_ % 8));
    ++bits_;
  }
  void put_bits(std::uint64_t v, int n) {
    for (int i = n - 1; i >= 0; --i) put((v >> i) & 1u);
  }
  std::size_t bit_count() const { return bits_; }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t bits_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> bytes) : in_(bytes) {}
  bool get() {
    if (pos_ >= in_.size() * 8) throw BitstreamError("bit reader: truncated stream");
    const bool b = (in_[pos_ / 8] >> (7 - pos_ % 8)) & 1u;
    ++pos_;
    return b;
  }
  std::uint64_t get_bits(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 1) | (get() ? 1u : 0u);
    return v;
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline int elias_gamma_length(std::uint64_t v) {
  if (v == 0) throw InvalidArgument("elias gamma: value must be >= 1");
  return 2 * detail::floor_log2(v) + 1;
}

inline void elias_gamma_encode(BitWriter& out, std::uint64_t v) {
  const int n = elias_gamma_length(v) / 2;
  for (int i = 0; i < n; ++i) out.put(false);
  out.put_bits(v, n + 1);
}

inline std::uint64_t elias_gamma_decode(BitReader& in) {
  int n = 0;
  while (!in.get())
    if (++n > 63) throw BitstreamError("elias gamma: malformed code");
  return (std::uint64_t{1} << n) | in.get_bits(n);
}

/// Index code tuned to an expected race cost of C bits: the bit length
/// L = floor(log2 K) is range coded under P(L) ~ 2^{-L/(C+1)}, then the L
/// low bits of K follow as raw bits. A heavier tail than Elias-gamma keeps
/// the length close to C + log2 C when K ~ 2^C.
class ZipfIndexCode {
 public:
  static constexpr int kMaxLength = 62;

  explicit ZipfIndexCode(double cost_bits) {
    if (!(cost_bits >= 0.0) || !std::isfinite(cost_bits))
      throw InvalidArgument("zipf index code: cost must be finite and >= 0");
    const double slope = 1.0 / (cost_bits + 1.0);
    std::vector<double> w(kMaxLength + 1);
    for (int L = 0; L <= kMaxLength; ++L) w[L] = std::exp2(-slope * L);
    pmf_ = DiscretizedPMF::from_weights(0, w);
  }

  const DiscretizedPMF& length_pmf() const { return pmf_; }

  void encode(RangeEncoder& enc, std::uint64_t k) const {
    if (k == 0) throw InvalidArgument("zipf index code: index must be >= 1");
    const int L = detail::floor_log2(k);
    if (L > kMaxLength) throw InvalidArgument("zipf index code: index too large");
    enc.encode_symbol(pmf_, L);
    enc.encode_bits(k, L);
  }

  std::uint64_t decode(RangeDecoder& dec) const {
    const auto L = static_cast<int>(dec.decode_symbol(pmf_));
    return (std::uint64_t{1} << L) | dec.decode_bits(L);
  }

  double length_bits(std::uint64_t k) const {
    const int L = detail::floor_log2(k);
    return code_length_bits(pmf_, L) + L;
  }

 private:
  DiscretizedPMF pmf_;
};

}  // namespace dfc
