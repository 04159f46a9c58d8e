#include <gtest/gtest.h>

#include <cmath>

#include "occdiff/continuous.hpp"

using namespace occdiff;

namespace {

struct Moments {
  double mean = 0.0, var = 0.0;
};

Moments moments(const std::vector<double>& x) {
  Moments m;
  for (double v : x) m.mean += v;
  m.mean /= static_cast<double>(x.size());
  for (double v : x) m.var += (v - m.mean) * (v - m.mean);
  m.var /= static_cast<double>(x.size() - 1);
  return m;
}

}  // namespace

TEST(Relax, RoundTripAndZeroMean) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto g = generate_scene(SceneSpec{}, seed);
    const auto z = onehot_relax(g);
    EXPECT_EQ(decode_argmax(z, g.num_classes()), g);
    for (std::size_t v = 0; v < g.size(); v += 37) {
      double s = 0.0;
      for (int c = 0; c < z.channels; ++c) s += z(c, v);
      EXPECT_NEAR(s, 0.0, 1e-12);
      EXPECT_NEAR(z(g[v], v), 2.0 * (1.0 - 1.0 / 6.0), 1e-12);
    }
  }
}

TEST(Relax, AllFree) {
  const VoxelGrid g(Dims{4, 4, 2}, 6);
  EXPECT_EQ(decode_argmax(onehot_relax(g), 6), g);
}

TEST(Relax, SmallNoiseDecodesCorrectly) {
  VoxelGrid g(Dims{100, 100, 10}, 6);
  Rng rng(4);
  for (std::size_t v = 0; v < g.size(); ++v) g.set(v, static_cast<std::uint8_t>(rng.below(6)));
  auto z = onehot_relax(g);
  for (double& x : z.data) x += 0.1 * rng.normal();
  const auto d = decode_argmax(z, 6);
  std::size_t ok = 0;
  for (std::size_t v = 0; v < g.size(); ++v) ok += d[v] == g[v];
  EXPECT_GE(static_cast<double>(ok) / g.size(), 0.999);
}

TEST(Relax, ChannelMismatchThrows) {
  EXPECT_THROW(decode_argmax(LatentVolume(Dims{2, 2, 2}, 5), 6), SpecError);
}

TEST(ForwardGaussian, ZeroInputMoments) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000);
  const LatentVolume z0(Dims{100, 100, 10}, 1);
  for (int t : {1, 100, 700}) {
    const auto m = moments(forward_sample_gaussian(z0, t, s, 3).data);
    EXPECT_LT(std::abs(m.mean), 0.01);
    EXPECT_NEAR(m.var / (1.0 - s.alpha_bar(t)), 1.0, 0.02);
  }
}

TEST(ForwardGaussian, NoNoiseWhenAlphaBarIsOne) {
  // Smallest admissible beta; the marginal is z0 up to sqrt(beta) noise.
  const NoiseSchedule s(ScheduleKind::kLinear, {1e-300});
  LatentVolume z0(Dims{4, 4, 2}, 3);
  Rng rng(1);
  for (double& x : z0.data) x = rng.normal();
  const auto zt = forward_sample_gaussian(z0, 1, s, 9);
  for (std::size_t i = 0; i < z0.data.size(); ++i) EXPECT_DOUBLE_EQ(zt.data[i], z0.data[i]);
}

TEST(ForwardGaussian, TwoStepsMatchMarginal) {
  const NoiseSchedule s(ScheduleKind::kLinear, {0.2, 0.3});
  const LatentVolume z0(Dims{100, 100, 10}, 1, 1.5);
  const auto step = forward_step_gaussian(forward_step_gaussian(z0, 1, s, 1), 2, s, 2);
  const auto direct = forward_sample_gaussian(z0, 2, s, 3);
  const auto a = moments(step.data), b = moments(direct.data);
  EXPECT_NEAR(a.mean / b.mean, 1.0, 0.02);
  EXPECT_NEAR(a.var / b.var, 1.0, 0.02);
  EXPECT_NEAR(b.mean, 1.5 * std::sqrt(0.8 * 0.7), 0.01);
}

TEST(ForwardGaussian, DeterministicInSeed) {
  const auto s = make_schedule(ScheduleKind::kLinear, 100);
  const LatentVolume z0(Dims{4, 4, 2}, 2, 0.5);
  EXPECT_EQ(forward_sample_gaussian(z0, 50, s, 7).data, forward_sample_gaussian(z0, 50, s, 7).data);
  EXPECT_NE(forward_sample_gaussian(z0, 50, s, 7).data, forward_sample_gaussian(z0, 50, s, 8).data);
  EXPECT_THROW(forward_sample_gaussian(z0, 0, s, 7), SpecError);
}

TEST(GaussianPosterior, MarginalConsistency) {
  for (auto kind : {ScheduleKind::kLinear, ScheduleKind::kCosine}) {
    const auto sch = make_schedule(kind, 1000);
    for (int t : {2, 3, 50, 500, 1000}) {
      for (int s : {0, 1, t / 2, t - 1}) {
        if (s >= t) continue;
        const auto p = gaussian_posterior(sch, t, s);
        const double at = sch.alpha_bar(t), as = sch.alpha_bar(s);
        // z_t ~ N(sqrt(at) z0, 1 - at); pushing through the posterior must give N(sqrt(as) z0, 1 - as).
        EXPECT_NEAR(p.coef_x0 + p.coef_zt * std::sqrt(at), std::sqrt(as), 1e-10);
        EXPECT_NEAR(p.coef_zt * p.coef_zt * (1.0 - at) + p.variance, 1.0 - as, 1e-10);
      }
    }
  }
}

TEST(ReverseGaussian, ZeroNoiseGivesPosteriorMean) {
  const auto sch = make_schedule(ScheduleKind::kLinear, 100);
  LatentVolume z0(Dims{3, 3, 2}, 2), zt(Dims{3, 3, 2}, 2);
  Rng rng(2);
  for (double& x : z0.data) x = rng.normal();
  for (double& x : zt.data) x = rng.normal();
  const int t = 40;
  const auto out = reverse_step_gaussian(zt, t, z0, sch, 1, 0.0);
  const double at = sch.alpha_bar(t), as = sch.alpha_bar(t - 1), b = sch.beta(t);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double mu = std::sqrt(as) * b / (1 - at) * z0.data[i] + std::sqrt(1 - b) * (1 - as) / (1 - at) * zt.data[i];
    EXPECT_NEAR(out.data[i], mu, 1e-12);
  }
}

TEST(ReverseGaussian, LastStepIsNoiseless) {
  const auto sch = make_schedule(ScheduleKind::kLinear, 100);
  LatentVolume z0(Dims{3, 3, 2}, 2, 0.7), z1(Dims{3, 3, 2}, 2, -0.2);
  const auto a = reverse_step_gaussian(z1, 1, z0, sch, 1);
  const auto b = reverse_step_gaussian(z1, 1, z0, sch, 2);
  EXPECT_EQ(a.data, b.data);
  // At t = 1 the posterior mean is exactly the prediction.
  for (double x : a.data) EXPECT_NEAR(x, 0.7, 1e-12);
}

TEST(ReverseGaussian, NonFiniteThrows) {
  const auto sch = make_schedule(ScheduleKind::kLinear, 10);
  LatentVolume z(Dims{2, 2, 2}, 1), bad(Dims{2, 2, 2}, 1);
  bad.data[3] = std::nan("");
  EXPECT_THROW(reverse_step_gaussian(z, 5, bad, sch, 1), NumericError);
  EXPECT_THROW(reverse_step_gaussian(bad, 5, z, sch, 1), NumericError);
}

TEST(ReverseGaussian, NoiseHasPosteriorVariance) {
  const auto sch = make_schedule(ScheduleKind::kLinear, 1000);
  const LatentVolume z(Dims{100, 100, 10}, 1);
  const auto out = reverse_step_gaussian(z, 300, z, sch, 5);
  const auto m = moments(out.data);
  EXPECT_NEAR(m.var / gaussian_posterior(sch, 300, 299).variance, 1.0, 0.02);
}

TEST(Triplane, ConstantVolume) {
  const LatentVolume vol(Dims{3, 4, 5}, 2, 1.25);
  const auto tp = pool_to_triplane(vol);
  for (double v : tp.xy) EXPECT_DOUBLE_EQ(v, 1.25);
  for (double v : tp.xz) EXPECT_DOUBLE_EQ(v, 1.25);
  for (double v : tp.yz) EXPECT_DOUBLE_EQ(v, 1.25);
  const auto h = triplane_lookup(tp, {1.3, 2.7, 0.5});
  for (double v : h) EXPECT_NEAR(v, 3.75, 1e-12);
}

TEST(Triplane, SingleVoxelPooling) {
  LatentVolume vol(Dims{2, 2, 2}, 1);
  vol.at(0, 1, 0, 1) = 1.0;
  const auto tp = pool_to_triplane(vol);
  for (int x = 0; x < 2; ++x)
    for (int y = 0; y < 2; ++y) EXPECT_DOUBLE_EQ(tp.h_xy(0, x, y), (x == 1 && y == 0) ? 0.5 : 0.0);
  EXPECT_DOUBLE_EQ(tp.h_xz(0, 1, 1), 0.5);
  EXPECT_DOUBLE_EQ(tp.h_yz(0, 0, 1), 0.5);
}

TEST(Triplane, PlaneMeansEqualVolumeMean) {
  LatentVolume vol(Dims{5, 6, 7}, 3);
  Rng rng(1);
  for (double& x : vol.data) x = rng.normal();
  const auto tp = pool_to_triplane(vol);
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double m = mean(vol.data);
  EXPECT_NEAR(mean(tp.xy), m, 1e-12);
  EXPECT_NEAR(mean(tp.xz), m, 1e-12);
  EXPECT_NEAR(mean(tp.yz), m, 1e-12);
}

TEST(Triplane, IntegerPointAndMidpoint) {
  Triplane tp(Dims{2, 2, 2}, 1);
  Rng rng(3);
  for (double& x : tp.xy) x = rng.normal();
  for (double& x : tp.xz) x = rng.normal();
  for (double& x : tp.yz) x = rng.normal();
  const auto h = triplane_lookup(tp, {1.0, 0.0, 1.0});
  EXPECT_NEAR(h[0], tp.h_xy(0, 1, 0) + tp.h_xz(0, 1, 1) + tp.h_yz(0, 0, 1), 1e-15);

  Triplane patch(Dims{2, 2, 2}, 1);
  // Corner values {0, 1, 1, 2} on the xy plane only.
  patch.h_xy(0, 0, 0) = 0;
  patch.h_xy(0, 1, 0) = 1;
  patch.h_xy(0, 0, 1) = 1;
  patch.h_xy(0, 1, 1) = 2;
  EXPECT_NEAR(triplane_lookup(patch, {0.5, 0.5, 0.3})[0], 1.0, 1e-15);
}

TEST(Triplane, LookupIsLinear) {
  Triplane a(Dims{4, 5, 3}, 2), b(Dims{4, 5, 3}, 2);
  Rng rng(6);
  for (auto* tp : {&a, &b})
    for (auto* plane : {&tp->xy, &tp->xz, &tp->yz})
      for (double& x : *plane) x = rng.normal();
  Triplane c = a;
  const double s = -1.7;
  for (std::size_t i = 0; i < c.xy.size(); ++i) c.xy[i] = s * a.xy[i] + b.xy[i];
  for (std::size_t i = 0; i < c.xz.size(); ++i) c.xz[i] = s * a.xz[i] + b.xz[i];
  for (std::size_t i = 0; i < c.yz.size(); ++i) c.yz[i] = s * a.yz[i] + b.yz[i];
  for (int trial = 0; trial < 50; ++trial) {
    const std::array<double, 3> p{rng.uniform(0, 3), rng.uniform(0, 4), rng.uniform(0, 2)};
    const auto hc = triplane_lookup(c, p), ha = triplane_lookup(a, p), hb = triplane_lookup(b, p);
    for (int ch = 0; ch < 2; ++ch) EXPECT_NEAR(hc[ch], s * ha[ch] + hb[ch], 1e-9);
  }
}

TEST(Triplane, OutOfBoundsThrows) {
  const Triplane tp(Dims{2, 3, 4}, 1);
  EXPECT_THROW(triplane_lookup(tp, {-0.01, 0, 0}), SpecError);
  EXPECT_THROW(triplane_lookup(tp, {0, 2.01, 0}), SpecError);
  EXPECT_THROW(triplane_lookup(tp, {0, 0, std::nan("")}), SpecError);
  EXPECT_NO_THROW(triplane_lookup(tp, {1, 2, 3}));
}
