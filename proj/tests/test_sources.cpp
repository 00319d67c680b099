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
#include <cstdio>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "dfc/sources.hpp"
#include "oracles.hpp"

namespace dfc {
namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

GaussianMixtureSource two_bumps(double sep = 2.0) {
  return GaussianMixtureSource({0.5, 0.5}, {GaussianSource::diagonal(vec({-sep, 0.0}), vec({0.3, 0.5})),
                                            GaussianSource::diagonal(vec({sep, 0.0}), vec({0.3, 0.5}))});
}

TEST(SampleSourceTest, GaussianMeanIsZero) {
  SourceOracle o(GaussianSource::isotropic(2));
  SyncedRandomness rng(11, 0);
  const int n = 100000;
  Vector m = Vector::Zero(2);
  for (int i = 0; i < n; ++i) m += sample_source(o, rng);
  m /= n;
  EXPECT_LT(m.cwiseAbs().maxCoeff(), 3.0 / std::sqrt(double(n)));
}

TEST(SampleSourceTest, DegenerateMixtureMatchesComponent) {
  const auto c0 = GaussianSource::diagonal(vec({1.0}), vec({2.0}));
  const auto c1 = GaussianSource::diagonal(vec({-5.0}), vec({0.1}));
  SourceOracle mix(GaussianMixtureSource({1.0, 0.0}, {c0, c1}));
  SourceOracle single(c0);
  SyncedRandomness r1(1, 1), r2(2, 2);
  std::vector<double> a, b;
  for (int i = 0; i < 5000; ++i) {
    a.push_back(mix.sample(r1)[0]);
    b.push_back(single.sample(r2)[0]);
  }
  EXPECT_GT(testing::ks2_pvalue(a, b), 0.01);
}

TEST(SampleSourceTest, PatchesStayInUnitRange) {
  SourceOracle o(PatchBankSource(synthetic_patch_bank(5)));
  const auto* p = o.patches();
  ASSERT_NE(p, nullptr);
  EXPECT_EQ(p->count(), 1024u);
  EXPECT_EQ(o.dim(), 16);
  EXPECT_DOUBLE_EQ(p->value_step(), 1.0 / 256.0);
  SyncedRandomness rng(3, 3);
  for (int i = 0; i < 2000; ++i) {
    const Vector x = o.sample(rng);
    EXPECT_GE(x.minCoeff(), 0.0);
    EXPECT_LT(x.maxCoeff(), 1.0 + 1.0 / 256.0);
  }
}

TEST(PatchBankTest, FileRoundTrip) {
  const auto bank = synthetic_patch_bank(9, 64);
  const auto path = (std::filesystem::temp_directory_path() / "dfc_bank_test.bin").string();
  save_patch_bank(path, bank);
  const auto back = load_patch_bank(path);
  std::remove(path.c_str());
  EXPECT_EQ(back.count, 64u);
  EXPECT_EQ(back.height, 4);
  EXPECT_EQ(back.width, 4);
  EXPECT_EQ(back.values, bank.values);
}

TEST(PatchBankTest, RejectsMalformedInput) {
  EXPECT_THROW(parse_patch_bank("XXXX"), InvalidArgument);
  EXPECT_THROW(parse_patch_bank(std::string("DFPB\x01\x00\x00\x00", 8)), InvalidArgument);
}

TEST(PosteriorMeanTest, ScalarLinearEstimator) {
  SourceOracle o(GaussianSource::isotropic(1));
  const double a = std::sqrt(0.5);
  EXPECT_NEAR(o.posterior_mean(vec({1.0}), a, a)[0], 0.70710678118654752, 1e-14);
}

TEST(PosteriorMeanTest, NoiselessInversion) {
  SourceOracle o(GaussianSource(vec({0.3, -0.2}), (Matrix(2, 2) << 2.0, 0.4, 0.4, 1.0).finished()));
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  const double t = 1e-9;
  const Vector x = vec({0.7, 1.1});
  const Vector got = posterior_mean(o, sch, x, t);
  EXPECT_LT((got - x / sch.alpha(t)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((o.posterior_mean(x, 0.8, 0.0) - x / 0.8).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PosteriorMeanTest, MixtureSymmetryAxis) {
  SourceOracle o(two_bumps());
  const Vector x = vec({0.0, 0.37});
  const Vector m = o.posterior_mean(x, 0.6, 0.8);
  EXPECT_NEAR(m[0], 0.0, 1e-14);
}

TEST(PosteriorMeanTest, RejectsNonFiniteInput) {
  SourceOracle o(GaussianSource::isotropic(1));
  EXPECT_THROW(o.posterior_mean(vec({NAN}), 0.5, 0.5), InvalidArgument);
}

TEST(PosteriorMeanTest, PatchBankIsSoftmaxAverage) {
  PatchBank bank;
  bank.count = 2;
  bank.height = 1;
  bank.width = 1;
  bank.values = {0, 128};
  SourceOracle o{PatchBankSource(bank)};
  const double a = 0.9, s = 0.3, x = 0.2;
  const double p1 = 0.5;
  const double l0 = -0.5 * x * x / (s * s), l1 = -0.5 * (x - a * p1) * (x - a * p1) / (s * s);
  const double w1 = std::exp(l1) / (std::exp(l0) + std::exp(l1));
  EXPECT_NEAR(o.posterior_mean(vec({x}), a, s)[0], w1 * p1, 1e-14);
}

TEST(ScoreTest, VariancePreservingStandardNormal) {
  SourceOracle o(GaussianSource::isotropic(1));
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  for (double t : {0.1, 0.5, 0.9})
    EXPECT_NEAR(score(o, sch, vec({1.7}), t)[0], -1.7, 1e-12);
}

TEST(ScoreTest, MatchesFiniteDifferences) {
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  std::vector<SourceOracle> oracles{
      SourceOracle(GaussianSource(vec({0.3, -0.2}), (Matrix(2, 2) << 2.0, 0.4, 0.4, 1.0).finished())),
      SourceOracle(two_bumps())};
  SyncedRandomness rng(4, 4);
  for (const auto& o : oracles) {
    for (int i = 0; i < 100; ++i) {
      const double t = 0.05 + 0.9 * rng.uniform();
      Vector x(2);
      x << 2.0 * rng.normal(), 2.0 * rng.normal();
      const Vector g = score(o, sch, x, t);
      for (int k = 0; k < 2; ++k) {
        const double h = 1e-5;
        Vector xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        const double fd = (marginal_logdensity(o, sch, xp, t) - marginal_logdensity(o, sch, xm, t)) / (2 * h);
        EXPECT_NEAR(g[k], fd, 1e-5 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST(ScoreTest, ZeroAtOriginForSymmetricSources) {
  const auto sch = make_schedule(ScheduleKind::flow_matching_linear, 1.0);
  SourceOracle g(GaussianSource::isotropic(3));
  SourceOracle m(two_bumps());
  EXPECT_LT(score(g, sch, Vector::Zero(3), 0.4).norm(), 1e-15);
  EXPECT_LT(score(m, sch, Vector::Zero(2), 0.4).norm(), 1e-15);
}

TEST(ScoreTest, RejectsDataTime) {
  SourceOracle o(GaussianSource::isotropic(1));
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  EXPECT_THROW(score(o, sch, vec({0.0}), 0.0), InvalidArgument);
}

TEST(MarginalDensityTest, InvariantUnderVariancePreserving) {
  SourceOracle o(GaussianSource::isotropic(1));
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  for (double t : {0.01, 0.3, 1.0})
    for (double x : {-2.0, 0.0, 0.5})
      EXPECT_NEAR(marginal_logdensity(o, sch, vec({x}), t),
                  -0.5 * x * x - 0.5 * std::log(2 * std::numbers::pi), 1e-12);
}

TEST(MarginalDensityTest, IntegratesToOne) {
  SourceOracle o(GaussianMixtureSource(
      {0.3, 0.7}, {GaussianSource::diagonal(vec({-1.0}), vec({0.2})),
                   GaussianSource::diagonal(vec({2.0}), vec({0.5}))}));
  const auto sch = make_schedule(ScheduleKind::flow_matching_linear, 1.0);
  double total = 0.0;
  const double h = 1e-3;
  for (double x = -15.0; x < 15.0; x += h)
    total += std::exp(marginal_logdensity(o, sch, vec({x + 0.5 * h}), 0.3)) * h;
  EXPECT_NEAR(total, 1.0, 1e-4);
}

TEST(MarginalDensityTest, SingleComponentMixture) {
  const auto c = GaussianSource::diagonal(vec({0.4, -1.0}), vec({1.5, 0.7}));
  SourceOracle mix(GaussianMixtureSource({1.0}, {c}));
  SourceOracle single(c);
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  const Vector x = vec({0.2, 0.9});
  EXPECT_EQ(marginal_logdensity(mix, sch, x, 0.4), marginal_logdensity(single, sch, x, 0.4));
}

TEST(MarginalDensityTest, MixtureIsLogSumExpOfComponents) {
  const auto mix = two_bumps();
  SourceOracle o(mix);
  const Vector x = vec({0.5, -0.3});
  const double a = 0.7, s = 0.4;
  const double l0 = std::log(0.5) + mix.components()[0].log_density(x, a, s);
  const double l1 = std::log(0.5) + mix.components()[1].log_density(x, a, s);
  const double m = std::max(l0, l1);
  EXPECT_NEAR(o.log_density(x, a, s), m + std::log(std::exp(l0 - m) + std::exp(l1 - m)), 1e-12);
}

TEST(MarginalDensityTest, PatchBankRejectsDataTime) {
  SourceOracle o(PatchBankSource(synthetic_patch_bank(1, 16)));
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  EXPECT_THROW(marginal_logdensity(o, sch, Vector::Zero(16), 0.0), InvalidArgument);
}

TEST(GaussianRdTest, KnownValues) {
  EXPECT_NEAR(gaussian_rd(1.0, 0.25), 1.0, 1e-12);
  EXPECT_EQ(gaussian_rd(1.0, 1.0), 0.0);
  EXPECT_EQ(gaussian_rd(1.0, 3.0), 0.0);
  const std::vector<double> v{1.0, 1.0};
  EXPECT_NEAR(gaussian_rd(v, 0.5), 2.0, 1e-12);
  EXPECT_THROW(gaussian_rd(1.0, 0.0), InvalidArgument);
}

TEST(GaussianRdTest, WaterFillingLeavesSmallComponentsUncoded) {
  const std::vector<double> v{4.0, 0.1};
  // theta = 0.5 > 0.1: second component is not coded.
  EXPECT_NEAR(gaussian_rd(v, 0.6), 0.5 * std::log2(4.0 / 0.5), 1e-10);
}

TEST(ParameterizationTest, PairwiseIdentities) {
  SourceOracle o(two_bumps());
  SyncedRandomness rng(8, 8);
  for (auto kind : {ScheduleKind::variance_preserving, ScheduleKind::flow_matching_linear}) {
    const auto sch = make_schedule(kind, 1.0);
    for (int i = 0; i < 50; ++i) {
      const double t = 0.05 + 0.9 * rng.uniform();
      const Vector x = vec({rng.normal(), rng.normal()});
      const Vector d = posterior_mean(o, sch, x, t);
      const Vector g = score(o, sch, x, t);
      const Vector v = velocity_from_denoiser(sch, x, t, d);
      EXPECT_LT((score_from_denoiser(sch, x, t, d) - g).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT((denoiser_from_score(sch, x, t, g) - d).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT((denoiser_from_velocity(sch, x, t, v) - d).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(PosteriorMeanTest, IsTheL2Projection) {
  SourceOracle o(two_bumps(1.0));
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  SyncedRandomness rng(21, 0);
  const int n = 100000;
  const double t = 0.4;
  std::vector<Vector> err(n);
  Vector mean_err = Vector::Zero(2);
  for (int i = 0; i < n; ++i) {
    const Vector x0 = o.sample(rng);
    const Vector xt = forward_sample(sch, x0, t, rng);
    err[i] = posterior_mean(o, sch, xt, t) - x0;
    mean_err += err[i];
  }
  mean_err /= n;
  Vector var = Vector::Zero(2);
  for (const auto& e : err) var += (e - mean_err).cwiseProduct(e - mean_err);
  var /= n;
  // The best constant correction is the mean error; it must be consistent
  // with zero at 3 standard errors.
  for (int k = 0; k < 2; ++k) EXPECT_LT(std::abs(mean_err[k]), 3 * std::sqrt(var[k] / n));
}

TEST(TrainingObjectiveTest, OracleLossMatchesMmse) {
  SourceOracle o(GaussianSource::isotropic(1));
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  const auto field = oracle_field(o, sch);
  auto one = [](double) { return 1.0; };
  SyncedRandomness rng(31, 0);
  const double tmin = 1e-3;
  const auto est = training_objective(field, o, sch, one, 100000, rng, ObjectiveKind::denoising, tmin);
  // E_t[1 / (1 + snr(t))] with t ~ U(tmin, 1), by quadrature.
  const auto ref = integrate([&](double t) { return 1.0 / (1.0 + sch.snr(t)); }, tmin, 1.0);
  const double expected = ref.value / (1.0 - tmin);
  EXPECT_NEAR(est.mean, expected, 3 * est.std_error);
}

TEST(TrainingObjectiveTest, OracleBeatsPerturbation) {
  SourceOracle o(two_bumps());
  const auto sch = make_schedule(ScheduleKind::variance_preserving, 1.0);
  const auto field = oracle_field(o, sch);
  const auto bad = perturbed_field(field, vec({0.05, -0.05}));
  EXPECT_EQ(bad.provenance, FieldProvenance::perturbed_for_testing);
  auto one = [](double) { return 1.0; };
  for (auto kind : {ObjectiveKind::denoising, ObjectiveKind::velocity}) {
    SyncedRandomness r1(77, 0), r2(77, 0);
    const auto good = training_objective(field, o, sch, one, 100000, r1, kind);
    const auto worse = training_objective(bad, o, sch, one, 100000, r2, kind);
    EXPECT_LT(good.mean, worse.mean);
  }
}

TEST(TrainingObjectiveTest, ZeroWeightingGivesZero) {
  SourceOracle o(GaussianSource::isotropic(2));
  const auto sch = make_schedule(ScheduleKind::flow_matching_linear, 1.0);
  SyncedRandomness rng(1, 0);
  const auto est = training_objective(oracle_field(o, sch), o, sch, [](double) { return 0.0; }, 100, rng);
  EXPECT_EQ(est.mean, 0.0);
  EXPECT_EQ(est.std_error, 0.0);
}

TEST(SourceValidationTest, RejectsBadParameters) {
  EXPECT_THROW(GaussianSource(vec({0.0, 0.0}), (Matrix(2, 2) << 1.0, 2.0, 2.0, 1.0).finished()),
               InvalidArgument);
  EXPECT_THROW(GaussianSource(vec({0.0}), (Matrix(2, 2) << 1.0, 0.0, 0.0, 1.0).finished()),
               InvalidArgument);
  const auto c = GaussianSource::isotropic(1);
  EXPECT_THROW(GaussianMixtureSource({0.5, 0.6}, {c, c}), InvalidArgument);
  EXPECT_THROW(GaussianMixtureSource({1.0}, {c, c}), InvalidArgument);
}

}  // namespace
}  // namespace dfc
