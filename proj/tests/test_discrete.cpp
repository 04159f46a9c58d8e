#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "occdiff/discrete.hpp"
#include "oracles.hpp"

using namespace occdiff;

namespace {

NoiseSchedule random_schedule(int T, Rng& rng) {
  std::vector<double> betas(T);
  for (double& b : betas) b = rng.uniform(0.02, 0.9);
  return NoiseSchedule(ScheduleKind::kLinear, betas);
}

std::vector<double> class_frequencies(const VoxelGrid& g) {
  std::vector<double> f(g.num_classes(), 0.0);
  for (auto l : g.labels()) f[l] += 1.0;
  for (double& x : f) x /= static_cast<double>(g.size());
  return f;
}

}  // namespace

TEST(Posterior, FirstStepIsPointMass) {
  const auto s = make_schedule(ScheduleKind::kCosine, 10);
  for (int xt = 0; xt < 4; ++xt)
    for (int x0 = 0; x0 < 4; ++x0) {
      const auto p = posterior_discrete(xt, x0, 1, s, 4);
      for (int j = 0; j < 4; ++j) EXPECT_EQ(p[j], j == x0 ? 1.0 : 0.0);
    }
}

TEST(Posterior, TwoClassHandExample) {
  const NoiseSchedule s(ScheduleKind::kLinear, {0.5, 0.5});
  const auto p = posterior_discrete(0, 0, 2, s, 2);
  EXPECT_NEAR(p[0], 0.9, 1e-15);
  EXPECT_NEAR(p[1], 0.1, 1e-15);
}

TEST(Posterior, MatchesJointEnumerationExhaustively) {
  Rng rng(5);
  for (int k = 2; k <= 4; ++k)
    for (int T = 2; T <= 6; ++T) {
      const auto s = random_schedule(T, rng);
      for (int t = 2; t <= T; ++t)
        for (int xt = 0; xt < k; ++xt)
          for (int x0 = 0; x0 < k; ++x0) {
            const auto p = posterior_discrete(xt, x0, t, s, k);
            const auto o = oracle::posterior(s.betas(), k, t, xt, x0);
            double sum = 0.0;
            for (int j = 0; j < k; ++j) {
              ASSERT_NEAR(p[j], o[j], 1e-10);
              ASSERT_GE(p[j], 0.0);
              sum += p[j];
            }
            ASSERT_NEAR(sum, 1.0, 1e-12);
          }
    }
}

TEST(Posterior, RejectsBadLabels) {
  const auto s = make_schedule(ScheduleKind::kCosine, 10);
  EXPECT_THROW(posterior_discrete(3, 0, 2, s, 3), SpecError);
  EXPECT_THROW(posterior_discrete(0, -1, 2, s, 3), SpecError);
  EXPECT_THROW(posterior_discrete(0, 0, 11, s, 3), SpecError);
}

TEST(BridgePosterior, SingleStepBridgeEqualsPosterior) {
  const auto s = make_schedule(ScheduleKind::kCosine, 20);
  for (int t = 2; t <= 20; ++t) {
    const auto a = bridge_posterior_discrete(1, 2, t, t - 1, s, 4);
    const auto b = posterior_discrete(1, 2, t, s, 4);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(a[j], b[j], 1e-14);
  }
}

TEST(BridgePosterior, MultiStepMatchesEnumeration) {
  // q(x_s | x_t, x0) proportional to Q_bar_s[x0, j] * (Q_{s+1} ... Q_t)[j, x_t].
  Rng rng(8);
  const int k = 3, T = 6;
  const auto s = random_schedule(T, rng);
  for (int t = 2; t <= T; ++t)
    for (int sv = 0; sv < t; ++sv)
      for (int xt = 0; xt < k; ++xt)
        for (int x0 = 0; x0 < k; ++x0) {
          const auto qs = oracle::cumulative(s.betas(), k, sv);
          oracle::Mat between = oracle::identity(k);
          for (int u = sv + 1; u <= t; ++u) between = oracle::matmul(between, oracle::step_matrix(k, s.betas()[u - 1]));
          std::vector<double> o(k);
          double z = 0.0;
          for (int j = 0; j < k; ++j) z += (o[j] = qs[x0][j] * between[j][xt]);
          const auto p = bridge_posterior_discrete(xt, x0, t, sv, s, k);
          for (int j = 0; j < k; ++j) ASSERT_NEAR(p[j], o[j] / z, 1e-10);
        }
}

TEST(ReverseMixture, OneHotLogitsCollapseToPosterior) {
  const auto s = make_schedule(ScheduleKind::kCosine, 50);
  for (int c = 0; c < 4; ++c) {
    std::vector<double> logits(4, 0.0);
    logits[c] = 40.0;
    for (int t : {2, 10, 50}) {
      const auto p = model_reverse_distribution<double>(2, t, logits, s, 4);
      const auto q = posterior_discrete(2, c, t, s, 4);
      for (int j = 0; j < 4; ++j) EXPECT_NEAR(p[j], q[j], 1e-9);
    }
  }
}

TEST(ReverseMixture, SwapSymmetryForTwoClasses) {
  const auto s = make_schedule(ScheduleKind::kCosine, 30);
  const std::vector<double> uniform(2, 0.3);
  for (int t = 2; t <= 30; ++t) {
    const auto a = model_reverse_distribution<double>(0, t, uniform, s, 2);
    const auto b = model_reverse_distribution<double>(1, t, uniform, s, 2);
    EXPECT_NEAR(a[0], b[1], 1e-14);
    EXPECT_NEAR(a[1], b[0], 1e-14);
  }
}

TEST(ReverseMixture, MatchesExplicitSummation) {
  Rng rng(3);
  const auto s = random_schedule(4, rng);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> logits(3);
    for (double& l : logits) l = 4.0 * rng.normal();
    const int xt = rng.range(0, 2);
    const int t = rng.range(2, 4);
    const auto p = model_reverse_distribution<double>(xt, t, logits, s, 3);
    const auto o = oracle::mixture(s.betas(), 3, t, xt, logits);
    for (int j = 0; j < 3; ++j) ASSERT_NEAR(p[j], o[j], 1e-12);
  }
}

TEST(ReverseMixture, RejectsNonFiniteLogits) {
  const auto s = make_schedule(ScheduleKind::kCosine, 10);
  const std::vector<double> bad{0.0, std::nan("")};
  EXPECT_THROW(model_reverse_distribution<double>(0, 3, bad, s, 2), NumericError);
}

TEST(ForwardDiscrete, IdentityKernelKeepsLabels) {
  const auto g = generate_scene(SceneSpec{}, 1);
  EXPECT_EQ(mix_uniform(g, 0.0, 4), g);
}

TEST(ForwardDiscrete, FullMixingIsUniform) {
  const NoiseSchedule s(ScheduleKind::kLinear, {1.0});
  VoxelGrid x0(Dims{100, 100, 10}, 2);
  const auto xt = forward_sample_discrete(x0, 1, s, 17);
  const auto f = class_frequencies(xt);
  EXPECT_NEAR(f[0], 0.5, 0.01);
  EXPECT_NEAR(f[1], 0.5, 0.01);
}

TEST(ForwardDiscrete, StepwiseMatchesCumulative) {
  const NoiseSchedule s(ScheduleKind::kLinear, {0.3, 0.4});
  const auto x0 = generate_scene(SceneSpec{}, 2);
  // Tile up to 1e5 voxels.
  VoxelGrid big(Dims{100, 125, 8}, 6);
  for (std::size_t i = 0; i < big.size(); ++i) big.set(i, x0[i % x0.size()]);
  const auto x1 = forward_step_discrete(big, 1, s, 1);
  const auto x2_step = forward_step_discrete(x1, 2, s, 2);
  const auto x2_direct = forward_sample_discrete(big, 2, s, 3);
  const auto a = class_frequencies(x2_step), b = class_frequencies(x2_direct);
  double tv = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) tv += 0.5 * std::abs(a[c] - b[c]);
  EXPECT_LT(tv, 0.01);
}

TEST(ForwardDiscrete, DeterministicInSeed) {
  const auto s = make_schedule(ScheduleKind::kCosine, 100);
  const auto x0 = generate_scene(SceneSpec{}, 3);
  EXPECT_EQ(forward_sample_discrete(x0, 40, s, 9), forward_sample_discrete(x0, 40, s, 9));
  EXPECT_THROW(forward_sample_discrete(x0, 0, s, 9), SpecError);
}

TEST(DiscreteLoss, PerfectLogitsGiveZeroLoss) {
  const auto s = make_schedule(ScheduleKind::kCosine, 100);
  const auto x0 = generate_scene(SceneSpec{}, 4);
  for (int t : {1, 2, 50, 100}) {
    const auto xt = t == 1 ? x0 : forward_sample_discrete(x0, t, s, 5);
    LogitField<double> lg(x0.dims(), x0.num_classes(), -15.0);
    for (std::size_t v = 0; v < x0.size(); ++v) lg(x0[v], v) = 15.0;
    const auto r = training_loss_discrete(x0, xt, t, lg, s, 0.0);
    EXPECT_LT(r.loss, 1e-6) << "t=" << t;
    double gmax = 0.0;
    for (double g : r.grad.data) gmax = std::max(gmax, std::abs(g));
    EXPECT_LE(gmax, 1e-6);
  }
}

TEST(DiscreteLoss, UniformLogitsAtFullNoiseHaveTinyKl) {
  const auto s = make_schedule(ScheduleKind::kCosine, 200);
  VoxelGrid x0(Dims{8, 8, 4}, 2);
  for (std::size_t v = 0; v < x0.size(); v += 2) x0.set(v, 1);
  const auto xt = forward_sample_discrete(x0, 200, s, 1);
  LogitField<double> lg(x0.dims(), 2, 0.0);
  const auto r = training_loss_discrete(x0, xt, 200, lg, s, 0.0);
  EXPECT_LT(r.kl, 1e-3);
}

TEST(DiscreteLoss, NonNegativeAndGradientMatchesFiniteDifferences) {
  const auto s = make_schedule(ScheduleKind::kCosine, 30);
  Rng rng(11);
  VoxelGrid x0(Dims{3, 2, 2}, 4);
  for (std::size_t v = 0; v < x0.size(); ++v) x0.set(v, static_cast<std::uint8_t>(rng.below(4)));
  for (int t : {1, 2, 7, 30}) {
    const auto xt = forward_sample_discrete(x0, t, s, 3 + t);
    LogitField<double> lg(x0.dims(), 4);
    for (double& l : lg.data) l = 2.0 * rng.normal();
    const double lambda = 0.01;
    const auto r = training_loss_discrete(x0, xt, t, lg, s, lambda);
    EXPECT_GE(r.loss, -1e-9);
    for (std::size_t i = 0; i < lg.data.size(); ++i) {
      auto plus = lg, minus = lg;
      plus.data[i] += 1e-5;
      minus.data[i] -= 1e-5;
      const double fd = (training_loss_discrete(x0, xt, t, plus, s, lambda).loss -
                         training_loss_discrete(x0, xt, t, minus, s, lambda).loss) /
                        2e-5;
      EXPECT_NEAR(r.grad.data[i], fd, 1e-7) << "t=" << t << " i=" << i;
    }
  }
}

TEST(DiscreteLoss, MaskRestrictsAverage) {
  const auto s = make_schedule(ScheduleKind::kCosine, 30);
  const auto x0 = generate_scene(SceneSpec{}, 6);
  const auto xt = forward_sample_discrete(x0, 10, s, 1);
  LogitField<double> lg(x0.dims(), x0.num_classes(), 0.0);
  std::vector<std::uint8_t> none(x0.size(), 0);
  const auto r = training_loss_discrete(x0, xt, 10, lg, s, 0.1, none);
  EXPECT_EQ(r.loss, 0.0);
}

TEST(TimestepSubset, EvenlySpacedWithEnds) {
  EXPECT_EQ(timestep_subset(200, 1), std::vector<int>{200});
  EXPECT_EQ(timestep_subset(200, 2), (std::vector<int>{200, 1}));
  const auto ten = timestep_subset(1000, 10);
  ASSERT_EQ(ten.size(), 10u);
  EXPECT_EQ(ten.front(), 1000);
  EXPECT_EQ(ten.back(), 1);
  for (std::size_t i = 1; i < ten.size(); ++i) EXPECT_LT(ten[i], ten[i - 1]);
  EXPECT_EQ(timestep_subset(5, 5), (std::vector<int>{5, 4, 3, 2, 1}));
  EXPECT_THROW(timestep_subset(10, 0), SpecError);
  EXPECT_THROW(timestep_subset(10, 11), SpecError);
}

TEST(SampleBridge, LabelsInRangeAndDeterministic) {
  const auto s = make_schedule(ScheduleKind::kCosine, 100);
  const auto x0 = generate_scene(SceneSpec{}, 7);
  const auto xt = forward_sample_discrete(x0, 80, s, 2);
  LogitField<float> lg(x0.dims(), x0.num_classes(), 0.0f);
  const auto a = sample_bridge_discrete(xt, 80, 40, lg, s, 5);
  EXPECT_EQ(a, sample_bridge_discrete(xt, 80, 40, lg, s, 5));
  for (auto l : a.labels()) EXPECT_LT(l, x0.num_classes());
  // Bridging to s = 0 with confident logits returns their argmax.
  for (std::size_t v = 0; v < x0.size(); ++v) lg(x0[v], v) = 50.0f;
  EXPECT_EQ(sample_bridge_discrete(xt, 80, 0, lg, s, 5), x0);
}
