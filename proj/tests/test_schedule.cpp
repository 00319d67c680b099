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

#include <cmath>

#include <gtest/gtest.h>

#include "dfc/schedule.hpp"
#include "oracles.hpp"

namespace dfc {
namespace {

TEST(ScheduleTest, LinearFlowMidpoint) {
  const auto s = make_schedule(ScheduleKind::flow_matching_linear, 1.0);
  EXPECT_DOUBLE_EQ(s.alpha(0.5), 0.5);
  EXPECT_DOUBLE_EQ(s.sigma(0.5), 0.5);
  EXPECT_DOUBLE_EQ(s.snr(0.5), 1.0);
}

TEST(ScheduleTest, IdentityAtZero) {
  for (auto kind : {ScheduleKind::variance_preserving, ScheduleKind::flow_matching_linear}) {
    const auto s = make_schedule(kind, 1.0);
    EXPECT_EQ(s.alpha(0.0), 1.0);
    EXPECT_EQ(s.sigma(0.0), 0.0);
  }
}

TEST(ScheduleTest, VariancePreservingEndpoint) {
  const auto s = make_schedule(ScheduleKind::variance_preserving, 1.0);
  // Integrate beta independently with a trapezoid rule.
  const int n = 20000;
  double B = 0.0;
  for (int i = 0; i < n; ++i) {
    const double a = double(i) / n, b = double(i + 1) / n;
    B += 0.5 * ((0.1 + 19.9 * a) + (0.1 + 19.9 * b)) / n;
  }
  const double sigma2 = 1.0 - std::exp(-B);
  EXPECT_NEAR(s.sigma2(1.0), sigma2, 1e-9);
  EXPECT_NEAR(s.alpha(1.0) * s.alpha(1.0) + s.sigma2(1.0), 1.0, 1e-12);
  EXPECT_LT(s.snr(1.0), 1e-4);
}

TEST(ScheduleTest, Invariants) {
  for (auto kind : {ScheduleKind::variance_preserving, ScheduleKind::flow_matching_linear}) {
    const double T = 2.0;
    ScheduleParams p{0.1, 10.0};
    const auto s = make_schedule(kind, T, p);
    double prev_a = 1.0, prev_s = 0.0, prev_snr = kInf;
    for (int i = 1; i <= 1000; ++i) {
      const double t = T * i / 1000.0;
      EXPECT_LT(s.alpha(t), prev_a);
      EXPECT_GT(s.sigma(t), prev_s);
      EXPECT_LT(s.snr(t), prev_snr);
      if (kind == ScheduleKind::variance_preserving)
        EXPECT_NEAR(s.alpha(t) * s.alpha(t) + s.sigma2(t), 1.0, 1e-12);
      prev_a = s.alpha(t);
      prev_s = s.sigma(t);
      prev_snr = s.snr(t);
    }
    EXPECT_LE(s.snr(T), kMaxTerminalSnr);
  }
}

TEST(ScheduleTest, DerivativesMatchFiniteDifferences) {
  for (auto kind : {ScheduleKind::variance_preserving, ScheduleKind::flow_matching_linear}) {
    const auto s = make_schedule(kind, 1.0);
    for (double t : {0.05, 0.3, 0.7, 0.95}) {
      const double h = 1e-6;
      EXPECT_NEAR(s.alpha_dot(t), (s.alpha(t + h) - s.alpha(t - h)) / (2 * h), 1e-6);
      EXPECT_NEAR(s.sigma_dot(t), (s.sigma(t + h) - s.sigma(t - h)) / (2 * h), 1e-6);
    }
  }
}

TEST(ScheduleTest, RejectsInvalidParameters) {
  EXPECT_THROW(make_schedule(ScheduleKind::variance_preserving, 0.0), InvalidArgument);
  EXPECT_THROW(make_schedule(ScheduleKind::variance_preserving, 1.0, {-0.1, 20.0}),
               InvalidArgument);
  EXPECT_THROW(make_schedule(ScheduleKind::variance_preserving, 1.0, {0.1, 1.0}),
               InvalidArgument);
  EXPECT_THROW(make_schedule(ScheduleKind::flow_matching_linear, -1.0), InvalidArgument);
  EXPECT_THROW(parse_schedule_kind("cosine"), InvalidArgument);
}

TEST(ForwardSampleTest, ZeroTimeIsIdentity) {
  const auto s = make_schedule(ScheduleKind::variance_preserving, 1.0);
  SyncedRandomness rng(1, 2);
  Vector x0(3);
  x0 << 0.3, -1.2, 5.0;
  EXPECT_EQ(forward_sample(s, x0, 0.0, rng), x0);
}

TEST(ForwardSampleTest, TerminalMomentsAreStandard) {
  const auto s = make_schedule(ScheduleKind::variance_preserving, 1.0);
  SyncedRandomness rng(7, 1);
  Vector x0(2);
  x0 << 3.0, -2.0;
  const int n = 100000;
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d m2 = Eigen::Matrix2d::Zero();
  for (int i = 0; i < n; ++i) {
    const Vector x = forward_sample(s, x0, 1.0, rng);
    mean += x;
    m2 += x * x.transpose();
  }
  mean /= n;
  const Eigen::Matrix2d cov = m2 / n - mean * mean.transpose();
  const double se = 1.0 / std::sqrt(double(n));
  EXPECT_LT(std::abs(mean[0]), 3 * se + s.alpha(1.0) * 3.0);
  EXPECT_LT(std::abs(mean[1]), 3 * se + s.alpha(1.0) * 2.0);
  // Variance of a sample variance of a unit Gaussian is 2/n.
  EXPECT_NEAR(cov(0, 0), 1.0, 3 * std::sqrt(2.0) * se);
  EXPECT_NEAR(cov(1, 1), 1.0, 3 * std::sqrt(2.0) * se);
  EXPECT_NEAR(cov(0, 1), 0.0, 3 * se);
}

TEST(ForwardSampleTest, DeterministicGivenSeed) {
  const auto s = make_schedule(ScheduleKind::flow_matching_linear, 1.0);
  Vector x0(2);
  x0 << 2.0, 0.0;
  SyncedRandomness a(99, 5), b(99, 5), c(99, 5);
  const Vector y1 = forward_sample(s, x0, 0.5, a);
  const Vector y2 = forward_sample(s, x0, 0.5, b);
  EXPECT_EQ(y1, y2);
  const double n0 = c.normal(), n1 = c.normal();
  EXPECT_EQ(y1[0], 0.5 * 2.0 + 0.5 * n0);
  EXPECT_EQ(y1[1], 0.5 * n1);
}

TEST(ForwardSampleTest, RejectsTimeOutsideRange) {
  const auto s = make_schedule(ScheduleKind::flow_matching_linear, 1.0);
  SyncedRandomness rng(1, 1);
  EXPECT_THROW(forward_sample(s, Vector::Zero(1), 1.5, rng), InvalidArgument);
  EXPECT_THROW(forward_sample(s, Vector::Zero(1), -0.1, rng), InvalidArgument);
}

TEST(ForwardSampleTest, UnitVarianceIsPreserved) {
  const auto s = make_schedule(ScheduleKind::variance_preserving, 1.0);
  SyncedRandomness rng(3, 3);
  for (double t : {0.1, 0.4, 0.8}) {
    const int n = 50000;
    double m2 = 0.0, m1 = 0.0;
    for (int i = 0; i < n; ++i) {
      Vector x0(1);
      x0[0] = rng.normal();
      const double x = forward_sample(s, x0, t, rng)[0];
      m1 += x;
      m2 += x * x;
    }
    const double var = m2 / n - (m1 / n) * (m1 / n);
    EXPECT_NEAR(var, 1.0, 3 * std::sqrt(2.0 / n));
  }
}

TEST(PosteriorTest, DataTimeCollapses) {
  const auto s = make_schedule(ScheduleKind::variance_preserving, 1.0);
  Vector x0(2), xt(2);
  x0 << 0.4, -0.2;
  xt << 1.0, 2.0;
  const auto p = ancestral_posterior(s, x0, xt, 0.3, 0.0);
  EXPECT_NEAR((p.mean - x0).norm(), 0.0, 1e-15);
  EXPECT_EQ(p.variance, 0.0);
  EXPECT_EQ(p.uniform_width, 0.0);
}

TEST(PosteriorTest, MatchesBivariateConditioning) {
  for (auto kind : {ScheduleKind::variance_preserving, ScheduleKind::flow_matching_linear}) {
    const auto sch = make_schedule(kind, 1.0);
    for (auto [s, t] : {std::pair{0.1, 0.2}, {0.4, 0.9}, {0.01, 0.02}, {0.5, 0.51}}) {
      const double x0 = 0.8, xt = -0.3;
      // Build X_t from X_s by a fresh Gaussian increment and condition.
      const double as = sch.alpha(s), at = sch.alpha(t);
      const double r = at / as;
      const double inc = sch.sigma2(t) - r * r * sch.sigma2(s);
      Eigen::Vector2d mean(as * x0, at * x0);
      Eigen::Matrix2d cov;
      cov << sch.sigma2(s), r * sch.sigma2(s), r * sch.sigma2(s), r * r * sch.sigma2(s) + inc;
      const auto ref = testing::condition_2x2(mean, cov, xt);
      const auto p = ancestral_posterior(sch, Vector::Constant(1, x0), Vector::Constant(1, xt), t, s);
      EXPECT_NEAR(p.mean[0], ref.mean, 1e-10);
      EXPECT_NEAR(p.variance, ref.variance, 1e-10);
      EXPECT_NEAR(p.uniform_width * p.uniform_width / 12.0, p.variance, 1e-12);
      EXPECT_DOUBLE_EQ(p.uniform_width, std::sqrt(12.0 * p.variance));
    }
  }
}

TEST(PosteriorTest, TowerProperty) {
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  const double s = 0.2, u = 0.35, t = 0.6, x0 = 1.3, xt = 0.4;
  const auto direct = ancestral_coefficients(sch, t, s);
  // s <- u <- t: draw x_u from its posterior, then x_s from its posterior.
  const auto cu = ancestral_coefficients(sch, t, u);
  const auto cs = ancestral_coefficients(sch, u, s);
  const double mean_u = cu.xt_coef * xt + cu.x0_coef * x0;
  const double mean = cs.xt_coef * mean_u + cs.x0_coef * x0;
  const double var = cs.xt_coef * cs.xt_coef * cu.variance + cs.variance;
  EXPECT_NEAR(mean, direct.xt_coef * xt + direct.x0_coef * x0, 1e-10);
  EXPECT_NEAR(var, direct.variance, 1e-10);
}

TEST(PosteriorTest, RejectsNonDecreasingTimes) {
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  EXPECT_THROW(ancestral_coefficients(sch, 0.3, 0.3), InvalidArgument);
  EXPECT_THROW(ancestral_coefficients(sch, 0.3, 0.5), InvalidArgument);
}

TEST(TimeGridTest, UniformGrid) {
  const auto g = TimeGrid::uniform(1.0, 0.1, 0.2);
  ASSERT_EQ(g.size(), 9u);
  EXPECT_EQ(g[0], 1.0);
  EXPECT_NEAR(g.tau(), 0.2, 1e-15);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_GE(g[i - 1] - g[i], 0.1 - 1e-12);
}

TEST(TimeGridTest, SnrMonotoneOnGrid) {
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  const auto g = TimeGrid::uniform(1.0, 0.001, 0.001);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(sch.snr(g[i - 1]), sch.snr(g[i]));
}

TEST(TimeGridTest, SkippingMergesCheapSteps) {
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  // Cost of a step: half the log-SNR gain in bits.
  auto cost = [&](double t, double s) { return 0.5 * (sch.log_snr(s) - sch.log_snr(t)) / kLn2; };
  const auto full = TimeGrid::uniform(1.0, 0.01, 0.05);
  const auto g = TimeGrid::skipping(1.0, 0.01, 0.05, 0.5, cost);
  EXPECT_LT(g.size(), full.size());
  EXPECT_EQ(g[0], 1.0);
  EXPECT_NEAR(g.tau(), 0.05, 1e-12);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_GE(g[i - 1] - g[i], 0.01 - 1e-12);
}

TEST(TimeGridTest, RejectsBadGrids) {
  EXPECT_THROW(TimeGrid::uniform(1.0, 0.0, 0.1), InvalidArgument);
  EXPECT_THROW(TimeGrid::uniform(1.0, 0.3, 0.1), InvalidArgument);
  EXPECT_THROW(TimeGrid::uniform(1.0, 0.1, 0.0), InvalidArgument);
  EXPECT_THROW(TimeGrid::from_times({1.0, 0.95, 0.5}, 0.1), InvalidArgument);
  EXPECT_THROW(TimeGrid::from_times({1.0, 0.5, 0.0}, 0.1), InvalidArgument);
}

}  // namespace
}  // namespace dfc
