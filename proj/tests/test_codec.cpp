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

#include <algorithm>
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "dfc/codec.hpp"
#include "oracles.hpp"

namespace dfc {
namespace {

std::shared_ptr<const SourceOracle> unit_gaussian(Eigen::Index n) {
  return std::make_shared<SourceOracle>(GaussianSource::isotropic(n));
}

std::shared_ptr<const SourceOracle> bimodal(Eigen::Index n) {
  std::vector<GaussianSource> comps{GaussianSource::isotropic(n, -1.5, 0.3),
                                    GaussianSource::isotropic(n, 1.5, 0.3)};
  return std::make_shared<SourceOracle>(GaussianMixtureSource({0.4, 0.6}, std::move(comps)));
}

CodecConfig make_config(std::shared_ptr<const SourceOracle> oracle, Backend b, TimeGrid grid,
                        std::uint64_t seed = 7) {
  CodecConfig c;
  c.oracle = std::move(oracle);
  c.backend = b;
  c.grid = std::move(grid);
  c.seed = seed;
  c.digest.fill(0xAB);
  return c;
}

Vector draw(const SourceOracle& o, std::uint64_t seed) {
  SyncedRandomness rng(seed, 99);
  return o.sample(rng);
}

void expect_same(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < a[i].size(); ++j) EXPECT_EQ(a[i][j], b[i][j]) << i << "," << j;
}

TEST(BitstreamTest, SerializeParseRoundTrip) {
  Bitstream bs;
  bs.header.digest.fill(3);
  bs.header.seed = 0x1122334455667788ull;
  bs.header.dim = 5;
  bs.header.times = {1.0, 0.5, 0.125};
  bs.frames = {{1, 2, 3}, {}, {9}};
  const auto bytes = bs.serialize();
  EXPECT_EQ(bytes.size(), bs.header.bytes() + 2 * 3 + 4);
  const auto back = Bitstream::parse(bytes);
  EXPECT_EQ(back.header.seed, bs.header.seed);
  EXPECT_EQ(back.header.dim, 5u);
  EXPECT_EQ(back.header.times, bs.header.times);
  EXPECT_EQ(back.header.digest, bs.header.digest);
  EXPECT_EQ(back.frames, bs.frames);
  EXPECT_EQ(bs.frame_ends().back(), bytes.size());
}

TEST(BitstreamTest, RejectsBadMagicAndTruncation) {
  Bitstream bs;
  bs.header.times = {1.0};
  bs.frames = {{1, 2, 3, 4}};
  auto bytes = bs.serialize();
  for (std::size_t cut = 1; cut < bytes.size(); ++cut) {
    if (cut == bs.header.bytes()) continue;  // a frame boundary
    EXPECT_THROW(Bitstream::parse(std::span(bytes).first(cut)), BitstreamError) << cut;
  }
  bytes[0] = 'X';
  EXPECT_THROW(Bitstream::parse(bytes), BitstreamError);
}

class CodecRoundTrip : public ::testing::TestWithParam<Backend> {};

TEST_P(CodecRoundTrip, DecoderReproducesTrajectoryExactly) {
  const auto cfg = make_config(bimodal(3), GetParam(), TimeGrid::uniform(1.0, 0.05, 0.05));
  const Vector x0 = draw(*cfg.oracle, 1);
  const auto enc = encode_progressive(x0, cfg);
  EXPECT_EQ(enc.stream.frames.size(), cfg.step_frames());
  const auto bytes = enc.stream.serialize();
  EXPECT_EQ(bytes.size(), enc.ledger.total_bytes());
  const auto dec = decode_progressive(bytes, cfg);
  expect_same(dec.trajectory, enc.trajectory);
  EXPECT_EQ(dec.steps_decoded, cfg.grid.steps());
  EXPECT_DOUBLE_EQ(dec.t, cfg.grid.tau());
}

TEST_P(CodecRoundTrip, EveryFramePrefixDecodes) {
  const auto cfg = make_config(unit_gaussian(2), GetParam(), TimeGrid::uniform(1.0, 0.1, 0.1));
  const auto enc = encode_progressive(draw(*cfg.oracle, 2), cfg);
  const auto bytes = enc.stream.serialize();
  const auto ends = enc.stream.frame_ends();
  const std::size_t lead = GetParam() == Backend::gaussian_pfr ? 1 : 0;
  for (std::size_t k = 0; k < ends.size(); ++k) {
    const auto dec = decode_progressive(std::span(bytes).first(ends[k]), cfg);
    const std::size_t depth = k < lead ? 0 : k - lead;
    EXPECT_EQ(dec.steps_decoded, depth);
    EXPECT_DOUBLE_EQ(dec.t, cfg.grid[depth]);
    if (k >= lead) {
      for (Eigen::Index i = 0; i < dec.x.size(); ++i) EXPECT_EQ(dec.x[i], enc.trajectory[depth][i]);
    }
  }
}

TEST_P(CodecRoundTrip, TruncationAndDigestMismatchFail) {
  auto cfg = make_config(unit_gaussian(2), GetParam(), TimeGrid::uniform(1.0, 0.25, 0.25));
  const auto enc = encode_progressive(draw(*cfg.oracle, 3), cfg);
  const auto bytes = enc.stream.serialize();
  const auto ends = enc.stream.frame_ends();
  for (std::size_t cut = ends.front() + 1; cut < bytes.size(); ++cut) {
    if (std::find(ends.begin(), ends.end(), cut) != ends.end()) continue;
    EXPECT_THROW(decode_progressive(std::span(bytes).first(cut), cfg), BitstreamError) << cut;
  }
  cfg.digest[0] ^= 1;
  EXPECT_THROW(decode_progressive(bytes, cfg), BitstreamError);
}

TEST_P(CodecRoundTrip, SkippedGridRoundTrips) {
  auto cfg = make_config(unit_gaussian(2), GetParam(), TimeGrid::uniform(1.0, 0.01, 0.01));
  const auto& g = *cfg.oracle->gaussian();
  const std::vector<double> lam(g.eigenvalues().begin(), g.eigenvalues().end());
  cfg.grid = TimeGrid::skipping(1.0, 0.01, 0.01, 3.0, [&](double t, double s) {
    return gaussian_step_cost_bits(cfg.schedule, lam, t, s);
  });
  EXPECT_LT(cfg.grid.steps(), 99u);
  const auto enc = encode_progressive(draw(*cfg.oracle, 4), cfg);
  expect_same(decode_progressive(enc.stream.serialize(), cfg).trajectory, enc.trajectory);
}

INSTANTIATE_TEST_SUITE_P(Backends, CodecRoundTrip,
                         ::testing::Values(Backend::gaussian_pfr, Backend::uqdm_dq),
                         [](const auto& info) {
                           return info.param == Backend::gaussian_pfr ? "Pfr" : "Dq";
                         });

TEST(CodecTest, TauAtEndTimeIsHeaderOnly) {
  const auto cfg = make_config(unit_gaussian(3), Backend::uqdm_dq, TimeGrid::uniform(1.0, 0.1, 1.0));
  const auto enc = encode_progressive(draw(*cfg.oracle, 5), cfg);
  const auto bytes = enc.stream.serialize();
  EXPECT_EQ(bytes.size(), enc.stream.header.bytes());
  const auto dec = decode_progressive(bytes, cfg);
  EXPECT_TRUE(dec.prior_only);
  const Vector prior = prior_draw(cfg.seed, 3);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_EQ(dec.x[i], prior[i]);
}

TEST(CodecTest, SeedComesFromHeader) {
  auto cfg = make_config(unit_gaussian(2), Backend::uqdm_dq, TimeGrid::uniform(1.0, 0.25, 0.25), 11);
  const auto enc = encode_progressive(draw(*cfg.oracle, 6), cfg);
  cfg.seed = 12;
  expect_same(decode_progressive(enc.stream.serialize(), cfg).trajectory, enc.trajectory);
}

TEST(CodecTest, RejectsMismatchedInput) {
  const auto cfg = make_config(unit_gaussian(2), Backend::uqdm_dq, TimeGrid::uniform(1.0, 0.5, 0.5));
  EXPECT_THROW(encode_progressive(Vector::Zero(3), cfg), InvalidArgument);
  Vector bad = Vector::Zero(2);
  bad[1] = std::nan("");
  EXPECT_THROW(encode_progressive(bad, cfg), InvalidArgument);
  auto c2 = cfg;
  c2.lossless_tail = true;
  EXPECT_THROW(encode_progressive(Vector::Zero(2), c2), InvalidArgument);
}

TEST(CodecTest, PfrBudgetExhaustionIsReported) {
  auto cfg = make_config(unit_gaussian(4), Backend::gaussian_pfr, TimeGrid::uniform(1.0, 0.01, 0.01));
  cfg.grid = TimeGrid::from_times({1.0, 0.01}, 0.01);
  cfg.max_candidates = 4;
  EXPECT_THROW(encode_progressive(draw(*cfg.oracle, 7), cfg), PfrTruncation);
}

TEST(CodecRateTest, DqStepRateTracksStepCost) {
  const Eigen::Index n = 4;
  const std::size_t trials = 200;
  auto cfg = make_config(unit_gaussian(n), Backend::uqdm_dq, TimeGrid::from_times({1.0, 0.3, 0.05, 0.01}, 0.01));
  std::vector<double> gap(cfg.grid.steps(), 0.0);
  double payload = 0.0, kl = 0.0;
  for (std::size_t r = 0; r < trials; ++r) {
    cfg.seed = r;
    const auto enc = encode_progressive(draw(*cfg.oracle, 1000 + r), cfg);
    for (std::size_t j = 0; j < gap.size(); ++j)
      gap[j] += enc.ledger.steps[j].payload_bits - enc.ledger.steps[j].kl_bits;
    payload += enc.ledger.payload_bits();
    kl += enc.ledger.kl_bits();
  }
  for (double g : gap) EXPECT_LT(std::abs(g / trials / n), 0.1);
  EXPECT_LE(std::abs(payload - kl) / trials, 0.05 * kl / trials + 64.0);
}

TEST(CodecRateTest, PfrFrameWithinIndexCodeBound) {
  const Eigen::Index n = 3;
  const std::size_t trials = 200;
  auto cfg = make_config(unit_gaussian(n), Backend::gaussian_pfr, TimeGrid::from_times({1.0, 0.2, 0.04}, 0.01));
  const auto est = cost_estimate(cfg);
  std::vector<double> payload(cfg.step_frames(), 0.0);
  std::vector<std::size_t> chunks(cfg.step_frames(), 0);
  for (std::size_t r = 0; r < trials; ++r) {
    cfg.seed = r;
    const auto enc = encode_progressive(draw(*cfg.oracle, 2000 + r), cfg);
    for (std::size_t f = 0; f < payload.size(); ++f) {
      payload[f] += enc.ledger.steps[f].payload_bits;
      chunks[f] = enc.ledger.steps[f].chunks;
    }
  }
  for (std::size_t f = 0; f < payload.size(); ++f) {
    const double C = est.frame_bits[f], k = double(chunks[f]);
    EXPECT_LE(payload[f] / trials, C + k * (std::log2(C / k + 2.0) + 3.0)) << f;
  }
}

TEST(CostEstimateTest, GaussianTotalIsMutualInformation) {
  auto cfg = make_config(unit_gaussian(1), Backend::gaussian_pfr, TimeGrid::uniform(1.0, 0.01, 0.05));
  const auto est = cost_estimate(cfg);
  EXPECT_TRUE(est.closed_form);
  const double xi = cfg.schedule.snr(0.05);
  EXPECT_NEAR(est.mutual_information_bits, 0.5 * std::log2(1.0 + xi), 1e-12);
  EXPECT_NEAR(est.total_bits, 0.5 * std::log2(1.0 + xi), 0.01 * 0.5 * std::log2(1.0 + xi));

  auto coarse = cfg;
  coarse.grid = TimeGrid::from_times({1.0, 0.5, 0.05}, 0.01);
  EXPECT_NEAR(cost_estimate(coarse).total_bits, est.total_bits, 1e-9);

  auto header_only = cfg;
  header_only.grid = TimeGrid::uniform(1.0, 0.01, 1.0);
  EXPECT_LT(cost_estimate(header_only).total_bits, 1e-3);
}

TEST(CostEstimateTest, StepCostsAddAcrossMergedSteps) {
  const auto sch = NoiseSchedule::variance_preserving();
  const std::vector<double> lam{0.5, 1.0, 3.0};
  for (double u : {0.2, 0.5, 0.8})
    EXPECT_NEAR(gaussian_step_cost_bits(sch, lam, 0.9, u) + gaussian_step_cost_bits(sch, lam, u, 0.1),
                gaussian_step_cost_bits(sch, lam, 0.9, 0.1), 1e-10);
}

TEST(CostEstimateTest, MonteCarloAgreesWithClosedForm) {
  auto cfg = make_config(std::make_shared<SourceOracle>(GaussianSource::diagonal(
                             Vector::Constant(2, 0.3), (Vector(2) << 0.5, 2.0).finished())),
                         Backend::gaussian_pfr, TimeGrid::from_times({1.0, 0.4, 0.1, 0.02}, 0.01));
  const auto closed = cost_estimate(cfg);
  // A mixture of two identical components forces the Monte Carlo path.
  const auto& g = *cfg.oracle->gaussian();
  auto mc_cfg = cfg;
  mc_cfg.oracle = std::make_shared<SourceOracle>(GaussianMixtureSource({0.5, 0.5}, {g, g}));
  const auto mc = cost_estimate(mc_cfg, 2000, 3);
  EXPECT_FALSE(mc.closed_form);
  EXPECT_NEAR(mc.total_bits, closed.total_bits, 4.0 * mc.total_std_error + 1e-6);
  for (std::size_t f = 0; f < mc.frame_bits.size(); ++f)
    EXPECT_NEAR(mc.frame_bits[f], closed.frame_bits[f], 4.0 * mc.frame_std_error[f] + 1e-6);
}

TEST(JointReferenceTest, FactorizesOverSteps) {
  for (Backend b : {Backend::gaussian_pfr, Backend::uqdm_dq}) {
    const auto cfg = make_config(bimodal(2), b, TimeGrid::from_times({1.0, 0.6, 0.3, 0.1}, 0.05));
    const auto enc = encode_progressive(draw(*cfg.oracle, 8), cfg);
    double lp = 0.0;
    for (Eigen::Index i = 0; i < 2; ++i)
      lp += std::log(std::exp(-0.5 * enc.trajectory[0][i] * enc.trajectory[0][i]) /
                     std::sqrt(2.0 * std::numbers::pi));
    for (std::size_t j = 1; j < enc.trajectory.size(); ++j) {
      const auto m = step_model(*cfg.oracle, cfg.schedule, enc.trajectory[j - 1], cfg.grid[j - 1], cfg.grid[j]);
      lp += step_channel(m, b).ref_log_density(enc.trajectory[j]);
    }
    EXPECT_NEAR(joint_reference_log_density(cfg, enc.trajectory), lp, 1e-8);
  }
}

TEST(ReconstructionTest, SdeMseOnUnitGaussian) {
  const auto sch = NoiseSchedule::variance_preserving();
  const SourceOracle o(GaussianSource::isotropic(1));
  const double t = 0.3, a = sch.alpha(t);
  const std::size_t trials = 40000;
  SyncedRandomness rng(1, 2);
  double se = 0.0, se_ode = 0.0;
  std::vector<double> out(trials);
  for (std::size_t r = 0; r < trials; ++r) {
    const Vector x0 = o.sample(rng);
    const Vector xt = forward_sample(sch, x0, t, rng);
    const Vector xs = reconstruct_sde(o, sch, xt, t, rng);
    const Vector xo = reconstruct_ode(o, sch, xt, t);
    se += (xs - x0).squaredNorm();
    se_ode += (xo - x0).squaredNorm();
    out[r] = xs[0];
  }
  const double mse = se / trials, mse_ode = se_ode / trials;
  // The variance of the squared error of a Gaussian error e is 2 E[e^2]^2.
  const double want = 2.0 * (1.0 - a * a);
  EXPECT_NEAR(mse, want, 4.0 * want * std::sqrt(2.0 / trials));
  EXPECT_NEAR(mse_ode / mse, 1.0 / (1.0 + a), 0.03);
  EXPECT_GT(testing::ks_pvalue(out, testing::std_normal_cdf), 1e-3);
}

TEST(ReconstructionTest, OdeIsIdentityForUnitGaussianUnderVp) {
  const auto sch = NoiseSchedule::variance_preserving();
  const SourceOracle o(GaussianSource::isotropic(3));
  const Vector x = (Vector(3) << 0.3, -1.2, 2.0).finished();
  for (double t : {0.01, 0.3, 1.0}) {
    const Vector y = reconstruct_ode(o, sch, x, t);
    EXPECT_LT((y - x).cwiseAbs().maxCoeff(), 1e-10) << t;
  }
}

TEST(ReconstructionTest, OdeConvergesUnderStepRefinement) {
  const auto sch = NoiseSchedule::variance_preserving();
  const auto o = bimodal(2);
  const Vector x = (Vector(2) << 0.4, -0.7).finished();
  for (double t : {0.2, 0.6}) {
    const Vector a = reconstruct_ode(*o, sch, x, t, 32);
    const Vector b = reconstruct_ode(*o, sch, x, t, 64);
    const Vector c = reconstruct_ode(*o, sch, x, t, 128);
    const double d1 = (a - b).cwiseAbs().maxCoeff(), d2 = (b - c).cwiseAbs().maxCoeff();
    // Fourth order: each halving cuts the error by 16.
    EXPECT_GT(d1 / d2, 10.0) << t;
    EXPECT_LT(d1 / d2, 22.0) << t;
    EXPECT_LT(d2 / 15.0, 1e-6) << t;
  }
}

TEST(ReconstructionTest, ReverseSdeApproachesPosteriorLaw) {
  const auto sch = NoiseSchedule::variance_preserving();
  const SourceOracle o(GaussianSource::isotropic(1));
  const double t = 0.4, a = sch.alpha(t), s2 = sch.sigma2(t);
  const Vector xt = Vector::Constant(1, 0.8);
  SyncedRandomness rng(4, 5);
  const std::size_t trials = 4000;
  double m = 0.0, m2 = 0.0;
  for (std::size_t r = 0; r < trials; ++r) {
    const double v = reconstruct_sde(o, sch, xt, t, rng, 200)[0];
    m += v;
    m2 += v * v;
  }
  m /= trials;
  const double var = m2 / trials - m * m;
  // Posterior N(a x / (a^2 + s^2), s^2 / (a^2 + s^2)).
  EXPECT_NEAR(m, a * 0.8 / (a * a + s2), 0.05);
  EXPECT_NEAR(var, s2 / (a * a + s2), 0.05);
}

TEST(ReconstructionTest, PosteriorMeanPreviewImprovesWithDepth) {
  const Eigen::Index n = 2;
  auto cfg = make_config(bimodal(n), Backend::gaussian_pfr, TimeGrid::from_times({1.0, 0.6, 0.3, 0.1, 0.02}, 0.01));
  cfg.reconstruction = Reconstruction::posterior_mean;
  std::vector<double> mse(cfg.grid.size(), 0.0);
  const std::size_t trials = 200;
  for (std::size_t r = 0; r < trials; ++r) {
    cfg.seed = r;
    const Vector x0 = draw(*cfg.oracle, 3000 + r);
    const auto enc = encode_progressive(x0, cfg);
    const auto bytes = enc.stream.serialize();
    const auto ends = enc.stream.frame_ends();
    SyncedRandomness unused(0, 0);
    for (std::size_t k = 1; k < ends.size(); ++k) {
      const auto dec = decode_progressive(std::span(bytes).first(ends[k]), cfg);
      mse[k - 1] += (reconstruct(cfg, dec, unused) - x0).squaredNorm() / trials;
    }
  }
  for (std::size_t k = 1; k < mse.size(); ++k) EXPECT_LT(mse[k], mse[k - 1]) << k;
}

TEST(LosslessTailTest, RecoversBankPatchExactly) {
  const auto bank = std::make_shared<SourceOracle>(PatchBankSource(synthetic_patch_bank(3, 64, 2)));
  auto cfg = make_config(bank, Backend::uqdm_dq, TimeGrid::from_times({1.0, 0.1, 0.01}, 0.01));
  cfg.lossless_tail = true;
  for (std::uint64_t r = 0; r < 10; ++r) {
    cfg.seed = r;
    const Vector x0 = draw(*bank, r);
    const auto enc = encode_progressive(x0, cfg);
    EXPECT_EQ(enc.stream.frames.size(), cfg.step_frames() + 1);
    const auto dec = decode_progressive(enc.stream.serialize(), cfg);
    ASSERT_TRUE(dec.x0.has_value());
    EXPECT_EQ(*dec.x0, x0);
    SyncedRandomness rng(0, 0);
    EXPECT_EQ(reconstruct(cfg, dec, rng), x0);
  }
}

TEST(LosslessTailTest, SinglePatchBankCostsNothing) {
  PatchBank b;
  b.height = b.width = 2;
  b.value_bytes = 1;
  b.count = 1;
  b.values = {10, 20, 30, 40};
  const auto bank = std::make_shared<SourceOracle>(PatchBankSource(b));
  auto cfg = make_config(bank, Backend::uqdm_dq, TimeGrid::from_times({1.0, 0.1}, 0.1));
  cfg.lossless_tail = true;
  const auto enc = encode_progressive(draw(*bank, 0), cfg);
  EXPECT_LT(enc.ledger.tail_payload_bits, 1e-9);
}

TEST(LosslessTailTest, TailRateMatchesPosteriorSurprisal) {
  const auto bank = std::make_shared<SourceOracle>(PatchBankSource(synthetic_patch_bank(5, 256, 2)));
  const auto& pb = *bank->patches();
  auto cfg = make_config(bank, Backend::uqdm_dq, TimeGrid::from_times({1.0, 0.2, 0.05}, 0.01));
  cfg.lossless_tail = true;
  const double tau = cfg.grid.tau();
  double coded = 0.0, ideal = 0.0;
  const std::size_t trials = 300;
  for (std::size_t r = 0; r < trials; ++r) {
    cfg.seed = r;
    const Vector x0 = draw(*bank, 500 + r);
    const auto enc = encode_progressive(x0, cfg);
    coded += enc.ledger.tail_payload_bits;
    const auto post = pb.group_posterior(enc.trajectory.back(), cfg.schedule.alpha(tau), cfg.schedule.sigma(tau));
    ideal += -std::log2(post[*pb.group_of_value(x0)]);
  }
  EXPECT_LT(std::abs(coded - ideal) / trials / double(pb.dim()), 0.05);
}

}  // namespace
}  // namespace dfc
