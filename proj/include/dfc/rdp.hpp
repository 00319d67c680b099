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
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dfc/error.hpp"
#include "dfc/numeric.hpp"
#include "dfc/random.hpp"
#include "dfc/schedule.hpp"
#include "dfc/sources.hpp"

namespace dfc {

// ---------------------------------------------------------------------------
// Distortion-perception function

/// D(gamma) = d_inf + max(gamma_star - gamma, 0)^2, with gamma a linear W2.
struct DPParams {
  double d_inf = 0.0;
  double gamma_star = 0.0;
};

inline double dp_value(const DPParams& p, double gamma) {
  if (!(p.d_inf >= 0.0) || !(p.gamma_star >= 0.0)) throw InvalidArgument("dp: negative parameter");
  if (!(gamma >= 0.0)) throw InvalidArgument("dp: gamma must be non-negative");
  const double gap = std::max(p.gamma_star - gamma, 0.0);
  return p.d_inf + gap * gap;
}

// gamma = 0 gives the perfect-realism estimate, gamma = gamma_star the MMSE one.
inline Vector interpolate_estimator(const Vector& x_hat0, const Vector& x_star, double gamma,
                                    double gamma_star) {
  if (!(gamma_star > 0.0)) throw InvalidArgument("interpolate: gamma_star must be positive");
  if (!(gamma >= 0.0 && gamma <= gamma_star))
    throw InvalidArgument("interpolate: gamma must lie in [0, gamma_star]");
  if (x_hat0.size() != x_star.size()) throw InvalidArgument("interpolate: dimension mismatch");
  const double l = gamma / gamma_star;
  return (1.0 - l) * x_hat0 + l * x_star;
}

// ---------------------------------------------------------------------------
// Scalar distributions and quantizers

/// Finite mixture of 1-D Gaussians.
class ScalarDistribution {
 public:
  static ScalarDistribution gaussian(double mean = 0.0, double sd = 1.0) {
    return mixture({1.0}, {mean}, {sd});
  }

  static ScalarDistribution mixture(std::vector<double> w, std::vector<double> m,
                                    std::vector<double> sd) {
    if (w.empty() || w.size() != m.size() || w.size() != sd.size())
      throw InvalidArgument("scalar distribution: inconsistent components");
    double tot = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (!(w[k] > 0.0) || !(sd[k] > 0.0)) throw InvalidArgument("scalar distribution: bad component");
      tot += w[k];
    }
    for (double& v : w) v /= tot;
    ScalarDistribution d;
    d.w_ = std::move(w);
    d.m_ = std::move(m);
    d.s_ = std::move(sd);
    return d;
  }

  // The marginal law of a one-dimensional Gaussian or mixture source.
  static ScalarDistribution from_oracle(const SourceOracle& o) {
    if (o.dim() != 1) throw InvalidArgument("scalar distribution: source must be one-dimensional");
    if (const auto* g = o.gaussian()) return gaussian(g->mean()[0], std::sqrt(g->covariance()(0, 0)));
    if (const auto* mx = o.mixture()) {
      std::vector<double> m, s;
      for (const auto& c : mx->components()) {
        m.push_back(c.mean()[0]);
        s.push_back(std::sqrt(c.covariance()(0, 0)));
      }
      return mixture(mx->weights(), m, s);
    }
    throw InvalidArgument("scalar distribution: patch banks are not continuous");
  }

  std::size_t components() const { return w_.size(); }

  double pdf(double x) const {
    double p = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k) p += w_[k] * normal_pdf((x - m_[k]) / s_[k]) / s_[k];
    return p;
  }

  double cdf(double x) const {
    double p = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k) p += w_[k] * normal_cdf((x - m_[k]) / s_[k]);
    return p;
  }

  double mass(double a, double b) const {
    double p = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k) p += w_[k] * component_mass(k, a, b);
    return p;
  }

  // Integral of x p(x) over [a, b].
  double partial_mean(double a, double b) const {
    double p = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k) {
      const double za = (a - m_[k]) / s_[k], zb = (b - m_[k]) / s_[k];
      p += w_[k] * (m_[k] * component_mass(k, a, b) + s_[k] * (phi(za) - phi(zb)));
    }
    return p;
  }

  // Integral of (x - c)^2 p(x) over [a, b].
  double partial_square(double a, double b, double c) const {
    double p = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k) {
      const double za = (a - m_[k]) / s_[k], zb = (b - m_[k]) / s_[k];
      const double M = component_mass(k, a, b);
      const double Z1 = phi(za) - phi(zb);
      const double Z2 = M + zphi(za) - zphi(zb);
      const double d = m_[k] - c;
      p += w_[k] * (d * d * M + 2.0 * d * s_[k] * Z1 + s_[k] * s_[k] * Z2);
    }
    return p;
  }

  double mean() const { return partial_mean(-kInf, kInf); }
  double variance() const { return partial_square(-kInf, kInf, mean()); }

  double quantile(double u) const {
    if (u <= 0.0) return -kInf;
    if (u >= 1.0) return kInf;
    if (w_.size() == 1) return m_[0] + s_[0] * normal_quantile(u);
    double lo = -1.0, hi = 1.0;
    for (std::size_t k = 0; k < w_.size(); ++k) {
      lo = std::min(lo, m_[k] - 40.0 * s_[k]);
      hi = std::max(hi, m_[k] + 40.0 * s_[k]);
    }
    for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(lo) + std::abs(hi)); ++it) {
      const double mid = 0.5 * (lo + hi);
      (cdf(mid) < u ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  }

  double sample(SyncedRandomness& rng) const {
    const std::size_t k = w_.size() == 1 ? 0 : GaussianMixtureSource::pick(w_, rng.uniform());
    return m_[k] + s_[k] * rng.normal();
  }

  // Exact draw from the law restricted to [a, b], by inverse CDF.
  double truncated_sample(double a, double b, SyncedRandomness& rng) const {
    if (!(a <= b)) throw InvalidArgument("truncated sample: empty interval");
    if (a == b) return a;
    std::vector<double> wk(w_.size());
    double tot = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k) tot += wk[k] = w_[k] * component_mass(k, a, b);
    if (!(tot > 0.0)) {
      // No representable mass: fall back to the finite end nearest the bulk.
      if (std::isfinite(a) && std::isfinite(b)) return 0.5 * (a + b);
      return std::isfinite(a) ? a : b;
    }
    const std::size_t k = w_.size() == 1 ? 0 : GaussianMixtureSource::pick(normalized(wk, tot), rng.uniform());
    const double za = (a - m_[k]) / s_[k], zb = (b - m_[k]) / s_[k];
    const double u = rng.uniform();
    double z;
    if (za >= 0.0) {
      const double qa = normal_sf(za), qb = normal_sf(zb);
      z = normal_quantile_upper(qa - u * (qa - qb));
    } else {
      const double pa = normal_cdf(za), pb = normal_cdf(zb);
      z = normal_quantile(pa + u * (pb - pa));
    }
    return m_[k] + s_[k] * std::clamp(z, za, zb);
  }

 private:
  static double phi(double z) { return std::isfinite(z) ? normal_pdf(z) : 0.0; }
  static double zphi(double z) { return std::isfinite(z) ? z * normal_pdf(z) : 0.0; }

  static std::vector<double> normalized(std::vector<double> v, double tot) {
    for (double& x : v) x /= tot;
    return v;
  }

  double component_mass(std::size_t k, double a, double b) const {
    const double za = (a - m_[k]) / s_[k], zb = (b - m_[k]) / s_[k];
    if (!(za < zb)) return 0.0;
    return std::exp(log_normal_interval(za, zb));
  }

  std::vector<double> w_, m_, s_;
};

/// Thresholds t_1 < ... < t_{N-1} and centroids c_0 < ... < c_{N-1}.
struct ScalarQuantizer {
  std::vector<double> thresholds;
  std::vector<double> centroids;

  std::size_t cells() const { return centroids.size(); }
  double rate() const { return std::log2(double(cells())); }
  double lower(std::size_t i) const { return i == 0 ? -kInf : thresholds[i - 1]; }
  double upper(std::size_t i) const { return i + 1 == cells() ? kInf : thresholds[i]; }

  std::size_t cell(double x) const {
    return static_cast<std::size_t>(std::upper_bound(thresholds.begin(), thresholds.end(), x) -
                                    thresholds.begin());
  }

  double quantize(double x) const { return centroids[cell(x)]; }

  double distortion(const ScalarDistribution& d) const {
    double D = 0.0;
    for (std::size_t i = 0; i < cells(); ++i) D += d.partial_square(lower(i), upper(i), centroids[i]);
    return D;
  }
};

/// MMSE (Lloyd-Max) scalar quantizer with 2^rate cells.
inline ScalarQuantizer lloyd_max(const ScalarDistribution& d, int rate, int max_iterations = 200000,
                                 double tolerance = 1e-13) {
  if (rate < 1 || rate > 8) throw InvalidArgument("lloyd_max: rate must be in 1..8 bits");
  const std::size_t N = std::size_t{1} << rate;
  ScalarQuantizer q;
  q.centroids.resize(N);
  q.thresholds.resize(N - 1);
  for (std::size_t i = 0; i < N; ++i) q.centroids[i] = d.quantile((double(i) + 0.5) / double(N));
  double residual = kInf;
  for (int it = 0; it < max_iterations; ++it) {
    for (std::size_t i = 0; i + 1 < N; ++i) q.thresholds[i] = 0.5 * (q.centroids[i] + q.centroids[i + 1]);
    residual = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double a = q.lower(i), b = q.upper(i), M = d.mass(a, b);
      if (!(M > 0.0)) throw ConvergenceError("lloyd_max: empty cell", kInf);
      const double c = d.partial_mean(a, b) / M;
      residual = std::max(residual, std::abs(c - q.centroids[i]));
      q.centroids[i] = c;
    }
    if (residual < tolerance) {
      for (std::size_t i = 0; i + 1 < N; ++i) q.thresholds[i] = 0.5 * (q.centroids[i] + q.centroids[i + 1]);
      return q;
    }
  }
  throw ConvergenceError("lloyd_max: no fixed point after " + std::to_string(max_iterations) +
                             " iterations",
                         residual);
}

// Decoder that draws from the source restricted to the received cell.
inline double quantizer_posterior_sample(const ScalarQuantizer& q, std::size_t cell,
                                         const ScalarDistribution& d, SyncedRandomness& rng) {
  if (cell >= q.cells()) throw InvalidArgument("posterior sample: cell out of range");
  return d.truncated_sample(q.lower(cell), q.upper(cell), rng);
}

// ---------------------------------------------------------------------------
// Wasserstein-2

// 1-D empirical W2 by quantile coupling of the sorted samples.
inline double w2_empirical(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw InvalidArgument("w2: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = double(a.size()), nb = double(b.size());
  double acc = 0.0, u = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double ua = double(i + 1) / na, ub = double(j + 1) / nb;
    const double next = std::min(ua, ub);
    const double d = a[i] - b[j];
    acc += (next - u) * d * d;
    u = next;
    if (ua <= next) ++i;
    if (ub <= next) ++j;
  }
  return std::sqrt(acc);
}

inline double w2_gaussian(double m1, double s1, double m2, double s2) {
  return std::sqrt((m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2));
}

namespace detail {
inline Matrix psd_sqrt(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(S);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}
}  // namespace detail

inline double w2_gaussian(const Vector& m1, const Matrix& S1, const Vector& m2, const Matrix& S2) {
  if (m1.size() != m2.size() || S1.rows() != m1.size() || S2.rows() != m2.size() ||
      S1.cols() != S1.rows() || S2.cols() != S2.rows())
    throw InvalidArgument("w2: dimension mismatch");
  const Matrix r2 = detail::psd_sqrt(S2);
  const Matrix cross = detail::psd_sqrt(r2 * S1 * r2);
  const double tr = S1.trace() + S2.trace() - 2.0 * cross.trace();
  return std::sqrt(std::max(0.0, (m1 - m2).squaredNorm() + tr));
}

// Gaussian-fit W2 between two samples (one point per column).
inline double w2_gaussian_fit(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw InvalidArgument("w2: dimension mismatch");
  if (a.cols() < 2 || b.cols() < 2) throw InvalidArgument("w2: need two samples per side");
  auto fit = [](const Matrix& x, Vector& m, Matrix& S) {
    m = x.rowwise().mean();
    const Matrix c = x.colwise() - m;
    S = c * c.transpose() / double(x.cols() - 1);
  };
  Vector ma, mb;
  Matrix Sa, Sb;
  fit(a, ma, Sa);
  fit(b, mb, Sb);
  return w2_gaussian(ma, Sa, mb, Sb);
}

/// Squared W2 between two 1-D laws given by quantile functions, as the
/// integral of (qa(u) - qb(u))^2 over (0, 1). `breaks` lists the levels where
/// either quantile jumps.
inline QuadratureResult w2_squared_quantile(const std::function<double(double)>& qa,
                                            const std::function<double(double)>& qb,
                                            std::vector<double> breaks = {}) {
  breaks.push_back(0.0);
  breaks.push_back(1.0);
  std::sort(breaks.begin(), breaks.end());
  QuadratureResult total;
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    const double lo = breaks[i], hi = breaks[i + 1];
    if (!(hi > lo)) continue;
    const auto r = integrate(
        [&](double u) {
          const double d = qa(u) - qb(u);
          return d * d;
        },
        lo, hi, 1e-12);
    total.value += r.value;
    total.error += r.error;
  }
  return total;
}

// W2^2 between a source and its image under a quantizer, by quantile coupling.
inline QuadratureResult w2_squared_to_quantizer(const ScalarDistribution& d, const ScalarQuantizer& q) {
  std::vector<double> levels;
  for (double t : q.thresholds) levels.push_back(d.cdf(t));
  auto qq = [&](double u) {
    const std::size_t i = static_cast<std::size_t>(std::upper_bound(levels.begin(), levels.end(), u) - levels.begin());
    return q.centroids[std::min(i, q.cells() - 1)];
  };
  return w2_squared_quantile([&](double u) { return d.quantile(u); }, qq, levels);
}

// ---------------------------------------------------------------------------
// I-MMSE

struct ImmseResult {
  double bits = 0.0;
  double error_bits = 0.0;  // quadrature error estimate
};

/// Integral of mmse(xi) / 2 over [xi_lo, xi_hi], in bits; the quadrature runs
/// in log-SNR.
inline ImmseResult immse_integral(const std::function<double(double)>& mmse, double xi_lo,
                                  double xi_hi, double tolerance = 1e-10) {
  if (!(xi_lo >= 0.0) || !(xi_hi >= xi_lo)) throw InvalidArgument("immse: need 0 <= xi_lo <= xi_hi");
  ImmseResult r;
  if (xi_hi == xi_lo || xi_hi == 0.0) return r;
  const double lo = std::log(std::max(xi_lo, 1e-16 * xi_hi)), hi = std::log(xi_hi);
  const auto q = integrate(
      [&](double l) {
        const double xi = std::exp(l);
        return 0.5 * mmse(xi) * xi;
      },
      lo, hi, tolerance);
  if (!std::isfinite(q.value)) throw ConvergenceError("immse: quadrature failed", q.error);
  r.bits = q.value * kLog2e;
  r.error_bits = q.error * kLog2e;
  return r;
}

/// I(X0; X_tau) - I(X0; X_T) via I-MMSE. Gaussian sources use the closed-form
/// mmse; other sources a Monte Carlo mmse over `samples` fixed draws.
inline ImmseResult immse_mutual_information(const SourceOracle& oracle, const NoiseSchedule& sch,
                                            double tau, std::size_t samples = 20000,
                                            std::uint64_t seed = 0) {
  sch.check_time(tau);
  if (!(tau > 0.0)) throw InvalidArgument("immse: tau must be positive");
  const double xi_T = sch.snr(sch.end_time()), xi_tau = sch.snr(tau);
  if (const auto* g = oracle.gaussian())
    return immse_integral([g](double xi) { return g->mmse(xi); }, xi_T, xi_tau);
  if (samples < 2) throw InvalidArgument("immse: need samples");
  const Eigen::Index n = oracle.dim();
  Matrix x0(n, static_cast<Eigen::Index>(samples)), z(n, static_cast<Eigen::Index>(samples));
  SyncedRandomness rng(seed, derive_stream(0x696d6d7365ull));
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    x0.col(j) = oracle.sample(rng);
    for (Eigen::Index i = 0; i < n; ++i) z(i, j) = rng.normal();
  }
  auto mmse = [&](double xi) {
    const double a = std::sqrt(xi);
    double acc = 0.0;
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
      const Vector y = a * x0.col(j) + z.col(j);
      acc += (oracle.posterior_mean(y, a, 1.0) - x0.col(j)).squaredNorm();
    }
    return acc / double(x0.cols());
  };
  return immse_integral(mmse, xi_T, xi_tau, 1e-7);
}

inline double stochastic_code_bound(double R) {
  if (!(R >= 0.0)) throw InvalidArgument("code bound: rate must be non-negative");
  return R + std::log2(R + 1.0) + 4.0;
}

// ---------------------------------------------------------------------------
// Gaussian-channel D-P testbed: X ~ N(0, 1), Y = X + N(0, noise_var).

inline DPParams gaussian_channel_dp_params(double noise_var) {
  if (!(noise_var > 0.0)) throw InvalidArgument("dp testbed: noise variance must be positive");
  DPParams p;
  p.d_inf = noise_var / (1.0 + noise_var);
  p.gamma_star = 1.0 - std::sqrt(1.0 - p.d_inf);
  return p;
}

struct DPSweepPoint {
  double gamma = 0.0;
  double mse = 0.0;
  double w2 = 0.0;         // Gaussian-fit W2 of the outputs against N(0, 1)
  double predicted = 0.0;  // dp_value at the measured W2
};

// The MMSE estimate X* = E[X|Y] and its rescaling to unit variance, which is
// the MSE-optimal perfect-realism estimate, mixed per gamma.
inline std::vector<DPSweepPoint> gaussian_channel_dp_sweep(double noise_var,
                                                           std::span<const double> gammas,
                                                           std::size_t trials, std::uint64_t seed) {
  const DPParams p = gaussian_channel_dp_params(noise_var);
  const double shrink = 1.0 / (1.0 + noise_var), rho = std::sqrt(1.0 - p.d_inf);
  std::vector<DPSweepPoint> out;
  for (std::size_t g = 0; g < gammas.size(); ++g) {
    SyncedRandomness rng(seed, derive_stream(0x6470ull, g));
    double se = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::size_t r = 0; r < trials; ++r) {
      const double x = rng.normal(), y = x + std::sqrt(noise_var) * rng.normal();
      const Vector star = Vector::Constant(1, shrink * y);
      const Vector hat0 = star / rho;
      const double v = interpolate_estimator(hat0, star, gammas[g], p.gamma_star)[0];
      se += (v - x) * (v - x);
      s1 += v;
      s2 += v * v;
    }
    const double N = double(trials), m = s1 / N;
    DPSweepPoint pt;
    pt.gamma = gammas[g];
    pt.mse = se / N;
    pt.w2 = w2_gaussian(m, std::sqrt(std::max(0.0, s2 / N - m * m)), 0.0, 1.0);
    pt.predicted = dp_value(p, pt.w2);
    out.push_back(pt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Result records

/// One rate-distortion-perception measurement. `w2` is the linear W2
/// distance; `mse` is per dimension; `rate_bits` is per source sample.
struct RDPPoint {
  std::string method;
  double rate_bits = 0.0;
  double mse = 0.0;
  double w2 = 0.0;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::string status = "ok";
};

inline std::string rdp_csv_header() { return "method,rate_bits,mse,w2,trials,seed,status\n"; }

inline std::string to_csv_row(const RDPPoint& p) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  std::string status = p.status;
  if (status.find_first_of(",\"\n") != std::string::npos) {
    std::string q = "\"";
    for (char c : status) q += c == '"' ? std::string("\"\"") : std::string(1, c == '\n' ? ' ' : c);
    status = q + "\"";
  }
  return p.method + "," + num(p.rate_bits) + "," + num(p.mse) + "," + num(p.w2) + "," +
         std::to_string(p.trials) + "," + std::to_string(p.seed) + "," + status + "\n";
}

}  // namespace dfc
