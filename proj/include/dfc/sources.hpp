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
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dfc/error.hpp"
#include "dfc/numeric.hpp"
#include "dfc/random.hpp"
#include "dfc/schedule.hpp"

namespace dfc {

enum class SourceKind { gaussian, gaussian_mixture, image_patches };

inline std::string_view to_string(SourceKind k) {
  switch (k) {
    case SourceKind::gaussian: return "gaussian";
    case SourceKind::gaussian_mixture: return "gaussian-mixture";
    case SourceKind::image_patches: return "image-patches";
  }
  return "?";
}

/// N(mean, cov), held in the eigenbasis of cov so every conditional is a
/// diagonal computation.
class GaussianSource {
 public:
  GaussianSource(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
    const auto n = mean_.size();
    if (n == 0) throw InvalidArgument("gaussian source: empty mean");
    if (cov_.rows() != n || cov_.cols() != n)
      throw InvalidArgument("gaussian source: covariance shape mismatch");
    if (!mean_.allFinite() || !cov_.allFinite())
      throw InvalidArgument("gaussian source: non-finite parameters");
    if ((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + cov_.cwiseAbs().maxCoeff()))
      throw InvalidArgument("gaussian source: covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov_);
    lambda_ = es.eigenvalues();
    basis_ = es.eigenvectors();
    if (!(lambda_.minCoeff() > 0.0))
      throw InvalidArgument("gaussian source: covariance not positive definite");
  }

  static GaussianSource diagonal(Vector mean, const Vector& variances) {
    Matrix cov = variances.asDiagonal();
    return GaussianSource(std::move(mean), std::move(cov));
  }

  static GaussianSource isotropic(Eigen::Index n, double mean = 0.0, double variance = 1.0) {
    return diagonal(Vector::Constant(n, mean), Vector::Constant(n, variance));
  }

  Eigen::Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return cov_; }
  const Vector& eigenvalues() const { return lambda_; }

  Vector sample(SyncedRandomness& rng) const {
    Vector z(dim());
    for (Eigen::Index i = 0; i < dim(); ++i) z[i] = std::sqrt(lambda_[i]) * rng.normal();
    return mean_ + basis_ * z;
  }

  // Whitened residual in the eigenbasis and the per-axis marginal variance.
  void residual(const Vector& x, double a, double s, Vector& z, Vector& var) const {
    z = basis_.transpose() * (x - a * mean_);
    var = (a * a) * lambda_.array() + s * s;
  }

  Vector posterior_mean(const Vector& x, double a, double s) const {
    Vector z, var;
    residual(x, a, s, z, var);
    const Vector gain = (a * lambda_.array() / var.array()).matrix();
    return mean_ + basis_ * gain.cwiseProduct(z);
  }

  // Diagonal of Cov[X0 | x]; independent of x.
  Vector posterior_variance(double a, double s) const {
    const Vector pv = (lambda_.array() * (s * s) / ((a * a) * lambda_.array() + s * s)).matrix();
    return (basis_.array().square().matrix() * pv);
  }

  Vector posterior_sample(const Vector& x, double a, double s, SyncedRandomness& rng) const {
    const Vector pv = (lambda_.array() * (s * s) / ((a * a) * lambda_.array() + s * s)).matrix();
    Vector z(dim());
    for (Eigen::Index i = 0; i < dim(); ++i) z[i] = std::sqrt(pv[i]) * rng.normal();
    return posterior_mean(x, a, s) + basis_ * z;
  }

  Vector score(const Vector& x, double a, double s) const {
    Vector z, var;
    residual(x, a, s, z, var);
    return -(basis_ * (z.array() / var.array()).matrix());
  }

  double log_density(const Vector& x, double a, double s) const {
    Vector z, var;
    residual(x, a, s, z, var);
    double out = 0.0;
    for (Eigen::Index i = 0; i < dim(); ++i)
      out += -0.5 * std::log(2.0 * std::numbers::pi * var[i]) - 0.5 * z[i] * z[i] / var[i];
    return out;
  }

  // mmse at SNR xi: sum_i lambda_i / (1 + xi lambda_i).
  double mmse(double xi) const {
    return (lambda_.array() / (1.0 + xi * lambda_.array())).sum();
  }

 private:
  Vector mean_;
  Matrix cov_;
  Vector lambda_;
  Matrix basis_;
};

class GaussianMixtureSource {
 public:
  GaussianMixtureSource(std::vector<double> weights, std::vector<GaussianSource> components)
      : weights_(std::move(weights)), components_(std::move(components)) {
    if (weights_.empty() || weights_.size() != components_.size())
      throw InvalidArgument("mixture: weights and components must be non-empty and equal length");
    double total = 0.0;
    for (double w : weights_) {
      if (!(w >= 0.0)) throw InvalidArgument("mixture: negative weight");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("mixture: weights must sum to 1");
    for (const auto& c : components_)
      if (c.dim() != components_.front().dim())
        throw InvalidArgument("mixture: component dimension mismatch");
    for (double w : weights_) log_weights_.push_back(w > 0.0 ? std::log(w) : -kInf);
  }

  Eigen::Index dim() const { return components_.front().dim(); }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<GaussianSource>& components() const { return components_; }

  Vector sample(SyncedRandomness& rng) const {
    return components_[pick(weights_, rng.uniform())].sample(rng);
  }

  // Posterior component probabilities, computed in log space.
  std::vector<double> responsibilities(const Vector& x, double a, double s) const {
    std::vector<double> lp(components_.size());
    for (std::size_t k = 0; k < components_.size(); ++k)
      lp[k] = log_weights_[k] + (std::isfinite(log_weights_[k])
                                     ? components_[k].log_density(x, a, s)
                                     : 0.0);
    const double lse = log_sum_exp(lp);
    for (double& v : lp) v = std::exp(v - lse);
    return lp;
  }

  Vector posterior_mean(const Vector& x, double a, double s) const {
    const auto r = responsibilities(x, a, s);
    Vector m = Vector::Zero(dim());
    for (std::size_t k = 0; k < r.size(); ++k)
      if (r[k] > 0.0) m += r[k] * components_[k].posterior_mean(x, a, s);
    return m;
  }

  Vector posterior_variance(const Vector& x, double a, double s) const {
    const auto r = responsibilities(x, a, s);
    Vector m = Vector::Zero(dim()), m2 = Vector::Zero(dim());
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (r[k] <= 0.0) continue;
      const Vector mk = components_[k].posterior_mean(x, a, s);
      m += r[k] * mk;
      m2 += r[k] * (components_[k].posterior_variance(a, s) + mk.cwiseProduct(mk));
    }
    return (m2 - m.cwiseProduct(m)).cwiseMax(0.0);
  }

  Vector posterior_sample(const Vector& x, double a, double s, SyncedRandomness& rng) const {
    const auto r = responsibilities(x, a, s);
    return components_[pick(r, rng.uniform())].posterior_sample(x, a, s, rng);
  }

  Vector score(const Vector& x, double a, double s) const {
    const auto r = responsibilities(x, a, s);
    Vector g = Vector::Zero(dim());
    for (std::size_t k = 0; k < r.size(); ++k)
      if (r[k] > 0.0) g += r[k] * components_[k].score(x, a, s);
    return g;
  }

  double log_density(const Vector& x, double a, double s) const {
    std::vector<double> lp;
    for (std::size_t k = 0; k < components_.size(); ++k)
      if (std::isfinite(log_weights_[k]))
        lp.push_back(log_weights_[k] + components_[k].log_density(x, a, s));
    return log_sum_exp(lp);
  }

  static std::size_t pick(const std::vector<double>& probs, double u) {
    double acc = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
      acc += probs[k];
      if (u < acc) return k;
    }
    for (std::size_t k = probs.size(); k-- > 0;)
      if (probs[k] > 0.0) return k;
    return 0;
  }

 private:
  std::vector<double> weights_;
  std::vector<double> log_weights_;
  std::vector<GaussianSource> components_;
};

/// Raw patch bank as stored on disk: integer pixel values, row-major.
struct PatchBank {
  std::uint16_t height = 4;
  std::uint16_t width = 4;
  std::uint8_t value_bytes = 1;
  std::uint32_t count = 0;
  std::vector<std::uint32_t> values;  // count * height * width

  std::size_t patch_size() const { return std::size_t{height} * width; }
  double value_step() const { return std::ldexp(1.0, -8 * value_bytes); }
};

inline constexpr char kPatchBankMagic[4] = {'D', 'F', 'P', 'B'};

inline void save_patch_bank(const std::string& path, const PatchBank& bank) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  auto put = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  out.write(kPatchBankMagic, 4);
  put(bank.count, 4);
  put(bank.height, 2);
  put(bank.width, 2);
  put(bank.value_bytes, 1);
  for (auto v : bank.values) put(v, bank.value_bytes);
  if (!out) throw Error("write failed for '" + path + "'");
}

inline PatchBank parse_patch_bank(std::string_view bytes) {
  std::size_t pos = 0;
  auto get = [&](int n) -> std::uint64_t {
    if (pos + static_cast<std::size_t>(n) > bytes.size())
      throw InvalidArgument("patch bank: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += n;
    return v;
  };
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kPatchBankMagic, 4) != 0)
    throw InvalidArgument("patch bank: bad magic");
  pos = 4;
  PatchBank b;
  b.count = static_cast<std::uint32_t>(get(4));
  b.height = static_cast<std::uint16_t>(get(2));
  b.width = static_cast<std::uint16_t>(get(2));
  b.value_bytes = static_cast<std::uint8_t>(get(1));
  if (b.count == 0 || b.height == 0 || b.width == 0)
    throw InvalidArgument("patch bank: empty dimensions");
  if (b.value_bytes < 1 || b.value_bytes > 2)
    throw InvalidArgument("patch bank: value width must be 1 or 2 bytes");
  const std::size_t n = std::size_t{b.count} * b.patch_size();
  b.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) b.values[i] = static_cast<std::uint32_t>(get(b.value_bytes));
  if (pos != bytes.size()) throw InvalidArgument("patch bank: trailing bytes");
  return b;
}

inline PatchBank load_patch_bank(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open patch bank '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_patch_bank(ss.str());
}

// Patches cut from a deterministic synthetic 8-bit grayscale image (smooth
// shading, edges and texture), non-overlapping, row-major.
inline PatchBank synthetic_patch_bank(std::uint64_t seed, std::uint32_t count = 1024,
                                      std::uint16_t patch = 4) {
  const auto per_side = static_cast<std::uint32_t>(std::ceil(std::sqrt(double(count))));
  const std::uint32_t side = per_side * patch;
  SyncedRandomness rng(seed, derive_stream(0x5041544348ull));
  const double f1 = 0.03 + 0.02 * rng.uniform(), f2 = 0.05 + 0.03 * rng.uniform();
  const double ph = 2.0 * std::numbers::pi * rng.uniform();
  std::vector<std::uint32_t> img(std::size_t{side} * side);
  for (std::uint32_t y = 0; y < side; ++y)
    for (std::uint32_t x = 0; x < side; ++x) {
      double v = 110.0 + 55.0 * std::sin(f1 * x + ph) * std::cos(f2 * y);
      if ((x / 24 + y / 24) % 2 == 0) v += 40.0;  // blocky edges
      v += 12.0 * rng.normal();
      img[std::size_t{y} * side + x] =
          static_cast<std::uint32_t>(std::clamp(std::lround(v), 0l, 255l));
    }
  PatchBank b;
  b.height = b.width = patch;
  b.value_bytes = 1;
  b.count = count;
  b.values.reserve(std::size_t{count} * patch * patch);
  for (std::uint32_t p = 0; p < count; ++p) {
    const std::uint32_t py = (p / per_side) * patch, px = (p % per_side) * patch;
    for (std::uint16_t dy = 0; dy < patch; ++dy)
      for (std::uint16_t dx = 0; dx < patch; ++dx)
        b.values.push_back(img[std::size_t{py + dy} * side + px + dx]);
  }
  return b;
}

/// Uniform distribution over a finite bank of dequantized patches; each
/// stored patch is one point-mass mixture component, smoothed by the forward
/// Gaussian kernel at t > 0.
class PatchBankSource {
 public:
  explicit PatchBankSource(const PatchBank& bank)
      : height_(bank.height), width_(bank.width), step_(bank.value_step()) {
    const auto n = static_cast<Eigen::Index>(bank.patch_size());
    if (bank.count == 0 || bank.values.size() != std::size_t{bank.count} * bank.patch_size())
      throw InvalidArgument("patch source: malformed bank");
    points_.resize(n, bank.count);
    for (std::uint32_t j = 0; j < bank.count; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        points_(i, j) = step_ * bank.values[std::size_t{j} * n + i];
    norms_ = points_.colwise().squaredNorm().transpose();
    // Group identical patches; the lossless tail codes the group id.
    std::map<std::vector<std::uint32_t>, std::uint32_t> seen;
    group_of_.resize(bank.count);
    for (std::uint32_t j = 0; j < bank.count; ++j) {
      std::vector<std::uint32_t> key(bank.values.begin() + std::size_t{j} * n,
                                     bank.values.begin() + std::size_t{j + 1} * n);
      auto [it, inserted] = seen.emplace(std::move(key), static_cast<std::uint32_t>(representatives_.size()));
      if (inserted) representatives_.push_back(j);
      group_of_[j] = it->second;
    }
  }

  Eigen::Index dim() const { return points_.rows(); }
  std::size_t count() const { return static_cast<std::size_t>(points_.cols()); }
  std::size_t distinct() const { return representatives_.size(); }
  double value_step() const { return step_; }
  std::uint16_t patch_height() const { return height_; }
  std::uint16_t patch_width() const { return width_; }
  const Matrix& points() const { return points_; }
  Vector patch(std::size_t j) const { return points_.col(static_cast<Eigen::Index>(j)); }
  Vector distinct_patch(std::size_t g) const { return patch(representatives_[g]); }
  std::uint32_t group_of(std::size_t j) const { return group_of_[j]; }

  // Group id of an exact bank member, or nullopt.
  std::optional<std::uint32_t> group_of_value(const Vector& x0) const {
    if (x0.size() != dim()) return std::nullopt;
    for (std::size_t g = 0; g < representatives_.size(); ++g)
      if ((distinct_patch(g) - x0).cwiseAbs().maxCoeff() <= 1e-12) return static_cast<std::uint32_t>(g);
    return std::nullopt;
  }

  Vector sample(SyncedRandomness& rng) const { return patch(rng.below(count())); }

  std::vector<double> log_likelihoods(const Vector& x, double a, double s) const {
    if (!(s > 0.0)) throw InvalidArgument("image-patches oracle: requires t > 0");
    const Vector dots = points_.transpose() * x;
    const double xx = x.squaredNorm();
    std::vector<double> ll(count());
    for (std::size_t j = 0; j < count(); ++j) {
      const double d2 = std::max(0.0, xx - 2.0 * a * dots[static_cast<Eigen::Index>(j)] +
                                         a * a * norms_[static_cast<Eigen::Index>(j)]);
      ll[j] = -0.5 * d2 / (s * s);
    }
    return ll;
  }

  std::vector<double> responsibilities(const Vector& x, double a, double s) const {
    auto ll = log_likelihoods(x, a, s);
    const double lse = log_sum_exp(ll);
    for (double& v : ll) v = std::exp(v - lse);
    return ll;
  }

  // Posterior over distinct patches (groups).
  std::vector<double> group_posterior(const Vector& x, double a, double s) const {
    const auto r = responsibilities(x, a, s);
    std::vector<double> g(distinct(), 0.0);
    for (std::size_t j = 0; j < r.size(); ++j) g[group_of_[j]] += r[j];
    return g;
  }

  Vector posterior_mean(const Vector& x, double a, double s) const {
    const auto r = responsibilities(x, a, s);
    return points_ * Eigen::Map<const Vector>(r.data(), static_cast<Eigen::Index>(r.size()));
  }

  Vector posterior_variance(const Vector& x, double a, double s) const {
    const auto r = responsibilities(x, a, s);
    const Eigen::Map<const Vector> w(r.data(), static_cast<Eigen::Index>(r.size()));
    const Vector m = points_ * w;
    const Vector m2 = points_.array().square().matrix() * w;
    return (m2 - m.cwiseProduct(m)).cwiseMax(0.0);
  }

  Vector posterior_sample(const Vector& x, double a, double s, SyncedRandomness& rng) const {
    return patch(GaussianMixtureSource::pick(responsibilities(x, a, s), rng.uniform()));
  }

  Vector score(const Vector& x, double a, double s) const {
    return (a * posterior_mean(x, a, s) - x) / (s * s);
  }

  double log_density(const Vector& x, double a, double s) const {
    const auto ll = log_likelihoods(x, a, s);
    return log_sum_exp(ll) - std::log(double(count())) -
           0.5 * double(dim()) * std::log(2.0 * std::numbers::pi * s * s);
  }

 private:
  std::uint16_t height_, width_;
  double step_;
  Matrix points_;  // dim x count
  Vector norms_;
  std::vector<std::uint32_t> representatives_;
  std::vector<std::uint32_t> group_of_;
};

/// A source distribution with closed-form sampling and denoising oracles.
///
/// Oracle methods take the channel as (alpha, sigma) directly; the
/// schedule-level wrappers below translate a diffusion time t.
class SourceOracle {
 public:
  using Variant = std::variant<GaussianSource, GaussianMixtureSource, PatchBankSource>;

  SourceOracle(GaussianSource s) : v_(std::move(s)) {}
  SourceOracle(GaussianMixtureSource s) : v_(std::move(s)) {}
  SourceOracle(PatchBankSource s) : v_(std::move(s)) {}

  SourceKind kind() const { return static_cast<SourceKind>(v_.index()); }
  const Variant& variant() const { return v_; }
  const GaussianSource* gaussian() const { return std::get_if<GaussianSource>(&v_); }
  const GaussianMixtureSource* mixture() const { return std::get_if<GaussianMixtureSource>(&v_); }
  const PatchBankSource* patches() const { return std::get_if<PatchBankSource>(&v_); }

  Eigen::Index dim() const {
    return std::visit([](const auto& s) { return s.dim(); }, v_);
  }

  Vector sample(SyncedRandomness& rng) const {
    return std::visit([&](const auto& s) { return s.sample(rng); }, v_);
  }

  Vector posterior_mean(const Vector& x, double a, double s) const {
    check(x);
    return std::visit([&](const auto& src) { return src.posterior_mean(x, a, s); }, v_);
  }

  Vector posterior_variance(const Vector& x, double a, double s) const {
    check(x);
    return std::visit(
        [&](const auto& src) -> Vector {
          if constexpr (std::is_same_v<std::decay_t<decltype(src)>, GaussianSource>)
            return src.posterior_variance(a, s);
          else
            return src.posterior_variance(x, a, s);
        },
        v_);
  }

  Vector posterior_sample(const Vector& x, double a, double s, SyncedRandomness& rng) const {
    check(x);
    return std::visit([&](const auto& src) { return src.posterior_sample(x, a, s, rng); }, v_);
  }

  Vector score(const Vector& x, double a, double s) const {
    check(x);
    return std::visit([&](const auto& src) { return src.score(x, a, s); }, v_);
  }

  double log_density(const Vector& x, double a, double s) const {
    check(x);
    return std::visit([&](const auto& src) { return src.log_density(x, a, s); }, v_);
  }

  // Mean and covariance of the source itself.
  Vector source_mean() const {
    if (auto g = gaussian()) return g->mean();
    if (auto m = mixture()) {
      Vector mu = Vector::Zero(dim());
      for (std::size_t k = 0; k < m->weights().size(); ++k)
        mu += m->weights()[k] * m->components()[k].mean();
      return mu;
    }
    return patches()->points().rowwise().mean();
  }

  Matrix source_covariance() const {
    const Vector mu = source_mean();
    if (auto g = gaussian()) return g->covariance();
    if (auto m = mixture()) {
      Matrix c = Matrix::Zero(dim(), dim());
      for (std::size_t k = 0; k < m->weights().size(); ++k) {
        const Vector d = m->components()[k].mean() - mu;
        c += m->weights()[k] * (m->components()[k].covariance() + d * d.transpose());
      }
      return c;
    }
    const Matrix centered = patches()->points().colwise() - mu;
    return centered * centered.transpose() / double(patches()->count());
  }

 private:
  void check(const Vector& x) const {
    if (x.size() != dim()) throw InvalidArgument("oracle: dimension mismatch");
    require_finite(x, "oracle input");
  }

  Variant v_;
};

inline Vector sample_source(const SourceOracle& oracle, SyncedRandomness& rng) {
  return oracle.sample(rng);
}

// E[X0 | X_t = x_t].
inline Vector posterior_mean(const SourceOracle& oracle, const NoiseSchedule& schedule,
                             const Vector& x_t, double t) {
  schedule.check_time(t);
  return oracle.posterior_mean(x_t, schedule.alpha(t), schedule.sigma(t));
}

// grad log p_t(x_t) = (alpha_t E[X0|x_t] - x_t) / sigma_t^2.
inline Vector score(const SourceOracle& oracle, const NoiseSchedule& schedule,
                    const Vector& x_t, double t) {
  schedule.check_time(t);
  if (!(t > 0.0)) throw InvalidArgument("score: undefined at t = 0");
  return oracle.score(x_t, schedule.alpha(t), schedule.sigma(t));
}

inline double marginal_logdensity(const SourceOracle& oracle, const NoiseSchedule& schedule,
                                  const Vector& x_t, double t) {
  schedule.check_time(t);
  if (!(t > 0.0) && oracle.kind() == SourceKind::image_patches)
    throw InvalidArgument("marginal_logdensity: patch banks have no density at t = 0");
  return oracle.log_density(x_t, schedule.alpha(t), schedule.sigma(t));
}

// Interconversions between the denoiser, score and velocity parameterizations.
inline Vector score_from_denoiser(const NoiseSchedule& sch, const Vector& x, double t,
                                  const Vector& x0_hat) {
  return (sch.alpha(t) * x0_hat - x) / sch.sigma2(t);
}

inline Vector denoiser_from_score(const NoiseSchedule& sch, const Vector& x, double t,
                                  const Vector& score) {
  return (x + sch.sigma2(t) * score) / sch.alpha(t);
}

// dx/dt of the probability-flow ODE: alpha' x0_hat - sigma sigma' score.
inline Vector velocity_from_denoiser(const NoiseSchedule& sch, const Vector& x, double t,
                                     const Vector& x0_hat) {
  return sch.alpha_dot(t) * x0_hat - sch.sigma_sigma_dot(t) * score_from_denoiser(sch, x, t, x0_hat);
}

inline Vector denoiser_from_velocity(const NoiseSchedule& sch, const Vector& x, double t,
                                     const Vector& v) {
  const double a = sch.alpha(t), ad = sch.alpha_dot(t), s2 = sch.sigma2(t);
  const double k = sch.sigma_sigma_dot(t) / s2;  // sigma'/sigma
  return (v - k * x) / (ad - k * a);
}

enum class FieldProvenance { oracle, perturbed_for_testing };

/// A denoiser (x_t, t) -> estimate of x0.
struct DenoiserField {
  std::function<Vector(const Vector&, double)> denoise;
  FieldProvenance provenance = FieldProvenance::oracle;

  Vector operator()(const Vector& x, double t) const { return denoise(x, t); }
};

inline DenoiserField oracle_field(const SourceOracle& oracle, const NoiseSchedule& schedule) {
  return {[&oracle, schedule](const Vector& x, double t) {
            return posterior_mean(oracle, schedule, x, t);
          },
          FieldProvenance::oracle};
}

inline DenoiserField perturbed_field(DenoiserField base, Vector offset) {
  return {[base = std::move(base), offset = std::move(offset)](const Vector& x, double t) {
            return Vector(base(x, t) + offset);
          },
          FieldProvenance::perturbed_for_testing};
}

/// Rate of an independent Gaussian vector at total squared-error distortion
/// D, by reverse water-filling. Bits.
inline double gaussian_rd(std::span<const double> variances, double D) {
  if (!(D > 0.0)) throw InvalidArgument("gaussian_rd: D must be positive");
  double total = 0.0;
  for (double v : variances) {
    if (!(v >= 0.0)) throw InvalidArgument("gaussian_rd: negative variance");
    total += v;
  }
  if (D >= total) return 0.0;
  double lo = 0.0, hi = *std::max_element(variances.begin(), variances.end());
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    double d = 0.0;
    for (double v : variances) d += std::min(mid, v);
    if (d < D) lo = mid; else hi = mid;
  }
  const double theta = 0.5 * (lo + hi);
  double rate = 0.0;
  for (double v : variances)
    if (v > theta) rate += 0.5 * std::log2(v / theta);
  return rate;
}

inline double gaussian_rd(double variance, double D) {
  return gaussian_rd(std::span<const double>(&variance, 1), D);
}

enum class ObjectiveKind { denoising, velocity };

struct ObjectiveEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

// Weighting under which the time-averaged denoising loss equals half the
// integral of mmse over SNR (nats), i.e. the continuous-time negative ELBO
// without its reconstruction term.
inline std::function<double(double)> elbo_weighting(const NoiseSchedule& schedule) {
  return [schedule](double t) {
    const double h = 1e-6 * schedule.end_time();
    const double lo = std::max(t - h, 1e-12), hi = std::min(t + h, schedule.end_time());
    return -0.5 * schedule.end_time() * (schedule.snr(hi) - schedule.snr(lo)) / (hi - lo);
  };
}

/// Monte Carlo estimate of E_{t~U(t_min,T)} [lambda(t) ||err||^2] for a
/// denoiser field, either on x0 (denoising) or on the probability-flow
/// velocity (alpha' x0 + sigma' n).
inline ObjectiveEstimate training_objective(const DenoiserField& field, const SourceOracle& oracle,
                                            const NoiseSchedule& schedule,
                                            const std::function<double(double)>& weighting,
                                            std::size_t trials, SyncedRandomness& rng,
                                            ObjectiveKind kind = ObjectiveKind::denoising,
                                            double t_min = 1e-3) {
  if (trials < 1) throw InvalidArgument("training_objective: trials must be >= 1");
  const double T = schedule.end_time();
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const double t = t_min * T + (1.0 - t_min) * T * rng.uniform_open();
    const Vector x0 = oracle.sample(rng);
    Vector n(x0.size());
    for (Eigen::Index k = 0; k < n.size(); ++k) n[k] = rng.normal();
    const double lam = weighting(t);
    double loss = 0.0;
    if (lam != 0.0) {
      const Vector xt = schedule.alpha(t) * x0 + schedule.sigma(t) * n;
      const Vector x0_hat = field(xt, t);
      if (kind == ObjectiveKind::denoising) {
        loss = lam * (x0_hat - x0).squaredNorm();
      } else {
        const Vector target = schedule.alpha_dot(t) * x0 + schedule.sigma_dot(t) * n;
        loss = lam * (velocity_from_denoiser(schedule, xt, t, x0_hat) - target).squaredNorm();
      }
    }
    sum += loss;
    sum2 += loss * loss;
  }
  const double n = double(trials);
  ObjectiveEstimate e;
  e.mean = sum / n;
  e.std_error = trials > 1 ? std::sqrt(std::max(0.0, sum2 / n - e.mean * e.mean) / (n - 1.0)) : 0.0;
  return e;
}

}  // namespace dfc
