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
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dfc/error.hpp"
#include "dfc/numeric.hpp"
#include "dfc/random.hpp"

namespace dfc {

enum class ScheduleKind { variance_preserving, flow_matching_linear };

inline std::string_view to_string(ScheduleKind k) {
  return k == ScheduleKind::variance_preserving ? "variance-preserving"
                                                : "flow-matching-linear";
}

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "variance-preserving") return ScheduleKind::variance_preserving;
  if (s == "flow-matching-linear") return ScheduleKind::flow_matching_linear;
  throw InvalidArgument("unknown schedule kind '" + std::string(s) + "'");
}

struct ScheduleParams {
  double beta_min = 0.1;
  double beta_max = 20.0;
};

// Largest SNR allowed at the end time; the prior at T must carry no signal.
inline constexpr double kMaxTerminalSnr = 1e-4;

/// Forward noising process x_t = alpha(t) x_0 + sigma(t) n on [0, T].
///
/// variance-preserving: sigma^2 = 1 - exp(-B(t)), alpha^2 = 1 - sigma^2, with
/// B the integral of a beta(t) linear between beta_min and beta_max.
/// flow-matching-linear: alpha = 1 - t/T, sigma = t/T.
class NoiseSchedule {
 public:
  static NoiseSchedule variance_preserving(double T = 1.0, double beta_min = 0.1,
                                           double beta_max = 20.0) {
    if (!(T > 0.0)) throw InvalidArgument("schedule: T must be positive");
    if (!(beta_min > 0.0) || !(beta_max > 0.0))
      throw InvalidArgument("schedule: beta endpoints must be positive");
    NoiseSchedule s(ScheduleKind::variance_preserving, T, beta_min, beta_max);
    if (!(s.snr(T) <= kMaxTerminalSnr)) {
      std::ostringstream os;
      os << "schedule: snr(T) = " << s.snr(T) << " exceeds " << kMaxTerminalSnr
         << "; increase beta_max or T";
      throw InvalidArgument(os.str());
    }
    return s;
  }

  static NoiseSchedule flow_matching_linear(double T = 1.0) {
    if (!(T > 0.0)) throw InvalidArgument("schedule: T must be positive");
    return NoiseSchedule(ScheduleKind::flow_matching_linear, T, 0.0, 0.0);
  }

  ScheduleKind kind() const { return kind_; }
  double end_time() const { return T_; }
  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }

  // VP only.
  double integrated_beta(double t) const {
    return beta_min_ * t + (beta_max_ - beta_min_) * t * t / (2.0 * T_);
  }

  double beta(double t) const {
    if (kind_ != ScheduleKind::variance_preserving)
      throw InvalidArgument("schedule: beta(t) is defined for variance-preserving only");
    return beta_min_ + (beta_max_ - beta_min_) * t / T_;
  }

  double alpha(double t) const {
    if (kind_ == ScheduleKind::variance_preserving)
      return std::exp(-0.5 * integrated_beta(t));
    return 1.0 - t / T_;
  }

  double sigma2(double t) const {
    if (kind_ == ScheduleKind::variance_preserving) return -std::expm1(-integrated_beta(t));
    const double s = t / T_;
    return s * s;
  }

  double sigma(double t) const { return std::sqrt(sigma2(t)); }

  double snr(double t) const {
    const double a = alpha(t);
    return a * a / sigma2(t);
  }

  double log_snr(double t) const {
    return 2.0 * std::log(alpha(t)) - std::log(sigma2(t));
  }

  double alpha_dot(double t) const {
    if (kind_ == ScheduleKind::variance_preserving) return -0.5 * beta(t) * alpha(t);
    return -1.0 / T_;
  }

  double sigma_dot(double t) const {
    const double s = sigma(t);
    return sigma_sigma_dot(t) / s;
  }

  // sigma * d(sigma)/dt; finite at t = 0 where sigma_dot alone is not.
  double sigma_sigma_dot(double t) const {
    if (kind_ == ScheduleKind::variance_preserving) {
      const double a = alpha(t);
      return 0.5 * beta(t) * a * a;
    }
    return t / (T_ * T_);
  }

  // f(t) in dx = f x dt + g dW.
  double drift(double t) const { return alpha_dot(t) / alpha(t); }

  // g(t)^2 = d(sigma^2)/dt - 2 f(t) sigma^2.
  double diffusion2(double t) const {
    return 2.0 * sigma_sigma_dot(t) - 2.0 * drift(t) * sigma2(t);
  }

  // Variance of x_t given x_s for s < t, computed without cancellation.
  double transition_variance(double t, double s) const {
    if (kind_ == ScheduleKind::variance_preserving)
      return -std::expm1(-(integrated_beta(t) - integrated_beta(s)));
    const double ats = alpha(t) / alpha(s);
    return sigma2(t) - ats * ats * sigma2(s);
  }

  // Time at which snr(t) == xi, by bisection on the monotone log-SNR.
  double time_for_snr(double xi) const {
    if (!(xi > 0.0)) throw InvalidArgument("time_for_snr: snr must be positive");
    const double target = std::log(xi);
    double lo = 0.0, hi = T_;
    if (log_snr(hi) >= target) return hi;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      if (mid == lo || mid == hi) break;
      if (log_snr(mid) > target) lo = mid; else hi = mid;
    }
    return 0.5 * (lo + hi);
  }

  void check_time(double t) const {
    if (!(t >= 0.0 && t <= T_)) {
      std::ostringstream os;
      os << "time " << t << " outside [0, " << T_ << "]";
      throw InvalidArgument(os.str());
    }
  }

 private:
  NoiseSchedule(ScheduleKind kind, double T, double bmin, double bmax)
      : kind_(kind), T_(T), beta_min_(bmin), beta_max_(bmax) {}

  ScheduleKind kind_;
  double T_;
  double beta_min_;
  double beta_max_;
};

inline NoiseSchedule make_schedule(ScheduleKind kind, double T,
                                   const ScheduleParams& params = {}) {
  if (kind == ScheduleKind::variance_preserving)
    return NoiseSchedule::variance_preserving(T, params.beta_min, params.beta_max);
  return NoiseSchedule::flow_matching_linear(T);
}

// x_t = alpha_t x0 + sigma_t n, with n drawn from `rng`.
inline Vector forward_sample(const NoiseSchedule& schedule, const Vector& x0, double t,
                             SyncedRandomness& rng) {
  schedule.check_time(t);
  const double a = schedule.alpha(t), s = schedule.sigma(t);
  Vector out(x0.size());
  for (Eigen::Index i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + s * rng.normal();
  return out;
}

// x_s | x_t, x0 ~ N(xt_coef * x_t + x0_coef * x0, variance).
struct PosteriorCoefficients {
  double xt_coef = 0.0;
  double x0_coef = 0.0;
  double variance = 0.0;
};

inline PosteriorCoefficients ancestral_coefficients(const NoiseSchedule& schedule, double t,
                                                    double s) {
  schedule.check_time(t);
  schedule.check_time(s);
  if (!(s < t)) throw InvalidArgument("ancestral_posterior: requires s < t");
  const double a_s = schedule.alpha(s);
  const double a_ts = schedule.alpha(t) / a_s;
  const double s2_s = schedule.sigma2(s), s2_t = schedule.sigma2(t);
  const double s2_ts = schedule.transition_variance(t, s);
  PosteriorCoefficients c;
  c.xt_coef = a_ts * s2_s / s2_t;
  c.x0_coef = a_s * s2_ts / s2_t;
  c.variance = s2_s * s2_ts / s2_t;
  return c;
}

struct ForwardPosterior {
  Vector mean;
  double variance = 0.0;
  double uniform_width = 0.0;  // sqrt(12 variance): the moment-matched uniform
};

inline double uniform_width_for_variance(double variance) {
  return std::sqrt(12.0 * variance);
}

inline ForwardPosterior ancestral_posterior(const NoiseSchedule& schedule, const Vector& x0,
                                            const Vector& x_t, double t, double s) {
  const auto c = ancestral_coefficients(schedule, t, s);
  ForwardPosterior p;
  p.mean = c.xt_coef * x_t + c.x0_coef * x0;
  p.variance = c.variance;
  p.uniform_width = uniform_width_for_variance(c.variance);
  return p;
}

/// Decreasing transmission times T = t_0 > t_1 > ... > t_m = tau.
class TimeGrid {
 public:
  static TimeGrid uniform(double T, double delta, double tau) {
    const auto [M, m_tau] = grid_indices(T, delta, tau);
    std::vector<double> times;
    for (std::int64_t k = M; k >= m_tau; --k) times.push_back(time_at(k, delta, M, T));
    return TimeGrid(std::move(times), delta);
  }

  // Merges steps from T downward while the merged step costs less than
  // `threshold_bits`; `step_cost(t, s)` returns the cost of moving t -> s.
  template <class Cost>
  static TimeGrid skipping(double T, double delta, double tau, double threshold_bits,
                           Cost&& step_cost) {
    const auto [M, m_tau] = grid_indices(T, delta, tau);
    std::vector<double> times{time_at(M, delta, M, T)};
    std::int64_t cur = M;
    while (cur > m_tau) {
      std::int64_t next = cur - 1;
      while (next > m_tau &&
             step_cost(time_at(cur, delta, M, T), time_at(next, delta, M, T)) < threshold_bits)
        --next;
      times.push_back(time_at(next, delta, M, T));
      cur = next;
    }
    return TimeGrid(std::move(times), delta);
  }

  static TimeGrid from_times(std::vector<double> times, double delta) {
    return TimeGrid(std::move(times), delta);
  }

  double delta() const { return delta_; }
  double tau() const { return times_.back(); }
  double end_time() const { return times_.front(); }
  std::size_t size() const { return times_.size(); }
  std::size_t steps() const { return times_.size() - 1; }
  double operator[](std::size_t i) const { return times_[i]; }
  const std::vector<double>& times() const { return times_; }

 private:
  TimeGrid(std::vector<double> times, double delta) : times_(std::move(times)), delta_(delta) {
    if (!(delta_ > 0.0)) throw InvalidArgument("grid: delta must be positive");
    if (times_.empty()) throw InvalidArgument("grid: empty");
    for (std::size_t i = 0; i < times_.size(); ++i) {
      if (!(times_[i] > 0.0)) throw InvalidArgument("grid: times must be positive");
      if (i > 0 && !(times_[i - 1] - times_[i] >= delta_ * (1.0 - 1e-9)))
        throw InvalidArgument("grid: times must decrease by at least delta");
    }
  }

  static std::pair<std::int64_t, std::int64_t> grid_indices(double T, double delta,
                                                            double tau) {
    if (!(delta > 0.0)) throw InvalidArgument("grid: delta must be positive");
    if (!(tau > 0.0 && tau <= T)) throw InvalidArgument("grid: tau must lie in (0, T]");
    const double fm = T / delta, ft = tau / delta;
    const auto M = static_cast<std::int64_t>(std::llround(fm));
    const auto mt = static_cast<std::int64_t>(std::llround(ft));
    if (std::abs(fm - M) > 1e-9 * std::max(1.0, fm))
      throw InvalidArgument("grid: T must be a multiple of delta");
    if (std::abs(ft - mt) > 1e-9 * std::max(1.0, ft))
      throw InvalidArgument("grid: tau must be a multiple of delta");
    return {M, mt};
  }

  static double time_at(std::int64_t k, double delta, std::int64_t M, double T) {
    return k == M ? T : static_cast<double>(k) * delta;
  }

  std::vector<double> times_;
  double delta_;
};

}  // namespace dfc
