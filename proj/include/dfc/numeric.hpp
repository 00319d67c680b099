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
#include <limits>
#include <numbers>
#include <span>
#include <string>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/erf.hpp>

#include "dfc/error.hpp"

namespace dfc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kLn2 = std::numbers::ln2;
inline constexpr double kLog2e = std::numbers::log2e;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline double nats_to_bits(double nats) { return nats * kLog2e; }
inline double bits_to_nats(double bits) { return bits * kLn2; }

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw InvalidArgument(std::string(what) + ": non-finite value");
}

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

// log(1 - Phi(x)); accurate deep into the upper tail.
inline double log_normal_sf(double x) {
  if (x < 35.0) return std::log(normal_sf(x));
  const double z2 = 1.0 / (x * x);
  const double series = 1.0 - z2 * (1.0 - 3.0 * z2 * (1.0 - 5.0 * z2 * (1.0 - 7.0 * z2)));
  return -0.5 * x * x - std::log(x) - 0.5 * std::log(2.0 * std::numbers::pi) +
         std::log(series);
}

inline double log_normal_cdf(double x) { return log_normal_sf(-x); }

// log(Phi(b) - Phi(a)) for a <= b, stable when both ends sit in one tail.
inline double log_normal_interval(double a, double b) {
  if (!(a < b)) return -kInf;
  if (a >= 0.0) {
    const double la = log_normal_sf(a), lb = log_normal_sf(b);
    return la + std::log1p(-std::exp(lb - la));
  }
  if (b <= 0.0) {
    const double la = log_normal_sf(-b), lb = log_normal_sf(-a);
    return la + std::log1p(-std::exp(lb - la));
  }
  return std::log1p(-(normal_sf(b) + normal_sf(-a)));
}

inline double normal_quantile(double p) {
  if (p <= 0.0) return -kInf;
  if (p >= 1.0) return kInf;
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

// Quantile from the upper tail: returns x with 1 - Phi(x) = q.
inline double normal_quantile_upper(double q) { return -normal_quantile(q); }

inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -kInf;
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Round half away from zero, independent of the floating point rounding mode.
inline double round_half_away(double x) { return std::round(x); }

struct QuadratureResult {
  double value = 0.0;
  double error = 0.0;
};

// Adaptive 31-point Gauss-Kronrod on [a, b].
template <class F>
QuadratureResult integrate(F&& f, double a, double b, double tolerance = 1e-12,
                           unsigned max_depth = 20) {
  QuadratureResult r;
  if (a == b) return r;
  double l1 = 0.0;
  r.value = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
      f, a, b, max_depth, tolerance, &r.error, &l1);
  return r;
}

}  // namespace dfc
