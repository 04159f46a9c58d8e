#pragma once

// Discrete (categorical) diffusion over voxel labels with uniform transition
// kernels: forward corruption, exact posteriors, the x0-parameterized reverse
// mixture, and the KL training loss with its gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "occdiff/error.hpp"
#include "occdiff/rng.hpp"
#include "occdiff/schedule.hpp"
#include "occdiff/voxel.hpp"

namespace occdiff {

/// Per-voxel vectors of length K stored channel-major: value(c, v) = data[c * n + v].
template <class T>
struct LogitField {
  Dims dims{};
  int k = 0;
  std::vector<T> data;

  LogitField() = default;
  LogitField(Dims d, int classes, T fill = T(0))
      : dims(d), k(classes), data(static_cast<std::size_t>(classes) * d.count(), fill) {}

  std::size_t voxels() const noexcept { return dims.count(); }
  T& operator()(int c, std::size_t v) noexcept { return data[static_cast<std::size_t>(c) * voxels() + v]; }
  T operator()(int c, std::size_t v) const noexcept {
    return data[static_cast<std::size_t>(c) * voxels() + v];
  }
};

namespace detail {

inline void check_label(int label, int k, const char* what) {
  if (label < 0 || label >= k) throw SpecError(std::string(what) + ": label out of [0, K)");
}

/// Reverse kernel between two steps t > s of the uniform family.
///   keep    = probability mass retained by Q_{s->t} (alpha_bar_t / alpha_bar_s)
///   a_s     = alpha_bar_s
/// Posterior over x_s given (x_t, x0 = c):
///   M_c(j) = A_j (a_s [c == j] + w) / Z_c,  A_j = keep [j == x_t] + (1 - keep) / K,
///   w = (1 - a_s) / K,  Z_c = a_s A_c + w.
struct BridgeKernel {
  int k;
  double keep;
  double a_s;

  double a(int j, int xt) const noexcept { return (j == xt ? keep : 0.0) + (1.0 - keep) / k; }
  double w() const noexcept { return (1.0 - a_s) / k; }
  double z(int c, int xt) const noexcept { return a_s * a(c, xt) + w(); }

  /// Mixture over x0 ~ pi of the posteriors, written into out (length K).
  void mixture(int xt, std::span<const double> pi, std::span<double> out) const noexcept {
    double shared = 0.0;
    for (int c = 0; c < k; ++c) shared += pi[c] / z(c, xt);
    shared *= w();
    for (int j = 0; j < k; ++j) out[j] = a(j, xt) * (a_s * pi[j] / z(j, xt) + shared);
  }

  void posterior(int xt, int x0, std::span<double> out) const noexcept {
    const double zc = z(x0, xt);
    for (int j = 0; j < k; ++j) out[j] = a(j, xt) * ((j == x0 ? a_s : 0.0) + w()) / zc;
  }
};

inline BridgeKernel bridge_kernel(const NoiseSchedule& schedule, int k, int t, int s) {
  const double a_s = schedule.alpha_bar(s);
  // Single steps use 1 - beta_t directly so the kernel is exactly Q_t.
  const double keep = (s == t - 1) ? 1.0 - schedule.beta(t) : schedule.alpha_bar(t) / a_s;
  return BridgeKernel{k, keep, a_s};
}

template <class T>
void softmax(std::span<const T> logits, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T l : logits) mx = std::max(mx, static_cast<double>(l));
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += out[i];
  }
  for (double& o : out) o /= sum;
}

}  // namespace detail

/// q(x_{t-1} | x_t, x0). For t = 1 the result is a point mass on x0.
inline std::vector<double> posterior_discrete(int xt, int x0, int t, const NoiseSchedule& schedule, int k) {
  require(k >= 2, "posterior_discrete: K must be >= 2");
  detail::check_label(xt, k, "posterior_discrete");
  detail::check_label(x0, k, "posterior_discrete");
  schedule.check_step(t);
  std::vector<double> out(static_cast<std::size_t>(k), 0.0);
  if (t == 1) {
    out[static_cast<std::size_t>(x0)] = 1.0;
    return out;
  }
  detail::bridge_kernel(schedule, k, t, t - 1).posterior(xt, x0, out);
  return out;
}

/// q(x_s | x_t, x0) for any 0 <= s < t, the multi-step bridge used when
/// sampling on a subset of timesteps. s = 0 gives a point mass on x0.
inline std::vector<double> bridge_posterior_discrete(int xt, int x0, int t, int s, const NoiseSchedule& schedule,
                                                     int k) {
  require(k >= 2, "bridge_posterior_discrete: K must be >= 2");
  detail::check_label(xt, k, "bridge_posterior_discrete");
  detail::check_label(x0, k, "bridge_posterior_discrete");
  schedule.check_step(t);
  require(s >= 0 && s < t, "bridge_posterior_discrete: need 0 <= s < t");
  std::vector<double> out(static_cast<std::size_t>(k), 0.0);
  detail::bridge_kernel(schedule, k, t, s).posterior(xt, x0, out);
  return out;
}

/// p_theta(x_{t-1} | x_t) = sum_c softmax(logits)_c q(x_{t-1} | x_t, x0 = c).
template <class T>
std::vector<double> model_reverse_distribution(int xt, int t, std::span<const T> x0_logits,
                                               const NoiseSchedule& schedule, int k) {
  require(k >= 2, "model_reverse_distribution: K must be >= 2");
  require(static_cast<int>(x0_logits.size()) == k, "model_reverse_distribution: logits must have length K");
  detail::check_label(xt, k, "model_reverse_distribution");
  schedule.check_step(t);
  for (T l : x0_logits) {
    if (!std::isfinite(static_cast<double>(l))) throw NumericError("model_reverse_distribution: non-finite logit");
  }
  std::vector<double> pi(static_cast<std::size_t>(k));
  detail::softmax<T>(x0_logits, pi);
  if (t == 1) return pi;
  std::vector<double> out(static_cast<std::size_t>(k));
  detail::bridge_kernel(schedule, k, t, t - 1).mixture(xt, pi, out);
  return out;
}

/// Samples every voxel independently from row x0[v] of the uniform kernel with
/// mixing weight gamma.
inline VoxelGrid mix_uniform(const VoxelGrid& x, double gamma, std::uint64_t seed) {
  const int k = x.num_classes();
  VoxelGrid out = x;
  Rng rng(derive_seed({seed, 0xF0A7ull}));
  for (std::size_t v = 0; v < x.size(); ++v) {
    const double u = rng.uniform();
    const auto c = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(k)));
    if (u < gamma) out.set(v, c);
  }
  return out;
}

/// x_t ~ q(x_t | x0) through the cumulative kernel Q_bar_t.
inline VoxelGrid forward_sample_discrete(const VoxelGrid& x0, int t, const NoiseSchedule& schedule,
                                         std::uint64_t seed) {
  schedule.check_step(t);
  require(x0.num_classes() >= 2, "forward_sample_discrete: K must be >= 2");
  return mix_uniform(x0, schedule.gamma(t), seed);
}

/// x_t ~ q(x_t | x_{t-1}) through the single-step kernel Q_t.
inline VoxelGrid forward_step_discrete(const VoxelGrid& x_prev, int t, const NoiseSchedule& schedule,
                                       std::uint64_t seed) {
  schedule.check_step(t);
  return mix_uniform(x_prev, schedule.beta(t), seed);
}

template <class T>
struct DiscreteLoss {
  double loss = 0.0;
  double kl = 0.0;
  double ce = 0.0;
  LogitField<T> grad;  // d loss / d logits
};

/// Mean over voxels of KL(q(x_{t-1}|x_t,x0) || p_theta(x_{t-1}|x_t)) plus
/// lambda_aux times the cross-entropy of the x0 logits. At t = 1 the KL term is
/// replaced by -log p_theta(x0 | x1). Optional per-voxel weights restrict the
/// average (weight 0 drops a voxel).
template <class T>
DiscreteLoss<T> training_loss_discrete(const VoxelGrid& x0, const VoxelGrid& xt, int t, const LogitField<T>& logits,
                                       const NoiseSchedule& schedule, double lambda_aux,
                                       std::span<const std::uint8_t> voxel_mask = {}) {
  const int k = x0.num_classes();
  require(k >= 2, "training_loss_discrete: K must be >= 2");
  require(xt.dims() == x0.dims() && logits.dims == x0.dims(), "training_loss_discrete: shape mismatch");
  require(xt.num_classes() == k && logits.k == k, "training_loss_discrete: class count mismatch");
  require(voxel_mask.empty() || voxel_mask.size() == x0.size(), "training_loss_discrete: mask size mismatch");
  schedule.check_step(t);

  const std::size_t n = x0.size();
  DiscreteLoss<T> out;
  out.grad = LogitField<T>(x0.dims(), k);

  std::size_t counted = 0;
  for (std::size_t v = 0; v < n; ++v) counted += (voxel_mask.empty() || voxel_mask[v]) ? 1 : 0;
  if (counted == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(counted);

  const auto kern = detail::bridge_kernel(schedule, k, t, t - 1);
  std::vector<double> lg(static_cast<std::size_t>(k)), pi(lg.size()), q(lg.size()), p(lg.size()), g(lg.size());
  constexpr double kFloor = 1e-300;

  double kl_sum = 0.0, ce_sum = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    if (!voxel_mask.empty() && !voxel_mask[v]) continue;
    for (int c = 0; c < k; ++c) lg[c] = static_cast<double>(logits(c, v));
    detail::softmax<double>(lg, pi);
    const int x0v = x0[v];
    const int xtv = xt[v];
    const double ce = -std::log(std::max(pi[x0v], kFloor));
    ce_sum += ce;

    // dL/dpi_c, converted to dL/dlogit at the end.
    std::fill(g.begin(), g.end(), 0.0);
    if (t == 1) {
      kl_sum += ce;
      g[x0v] -= 1.0 / std::max(pi[x0v], kFloor);
    } else {
      kern.posterior(xtv, x0v, q);
      kern.mixture(xtv, pi, p);
      double kl = 0.0;
      double shared = 0.0;  // sum_j q_j A_j / p_j
      for (int j = 0; j < k; ++j) {
        if (q[j] > 0.0) kl += q[j] * (std::log(q[j]) - std::log(std::max(p[j], kFloor)));
        shared += q[j] * kern.a(j, xtv) / std::max(p[j], kFloor);
      }
      kl_sum += std::max(kl, 0.0);
      for (int c = 0; c < k; ++c) {
        const double own = kern.a_s * q[c] * kern.a(c, xtv) / std::max(p[c], kFloor);
        g[c] = -(own + kern.w() * shared) / kern.z(c, xtv);
      }
    }
    double dot = 0.0;
    for (int c = 0; c < k; ++c) dot += pi[c] * g[c];
    for (int c = 0; c < k; ++c) {
      const double d_kl = pi[c] * (g[c] - dot);
      const double d_ce = pi[c] - (c == x0v ? 1.0 : 0.0);
      out.grad(c, v) = static_cast<T>((d_kl + lambda_aux * d_ce) * inv_n);
    }
  }
  out.kl = kl_sum * inv_n;
  out.ce = ce_sum * inv_n;
  out.loss = out.kl + lambda_aux * out.ce;
  return out;
}

/// Draws x_s for every voxel from the model mixture bridging t -> s, where
/// the mixture weights are softmax(x0_logits) per voxel.
template <class T>
VoxelGrid sample_bridge_discrete(const VoxelGrid& xt, int t, int s, const LogitField<T>& x0_logits,
                                 const NoiseSchedule& schedule, std::uint64_t seed) {
  const int k = xt.num_classes();
  require(x0_logits.dims == xt.dims() && x0_logits.k == k, "sample_bridge_discrete: shape mismatch");
  schedule.check_step(t);
  require(s >= 0 && s < t, "sample_bridge_discrete: need 0 <= s < t");
  const auto kern = detail::bridge_kernel(schedule, k, t, s);
  VoxelGrid out = xt;
  Rng rng(derive_seed({seed, 0xB81Dull}));
  std::vector<double> lg(static_cast<std::size_t>(k)), pi(lg.size()), p(lg.size());
  for (std::size_t v = 0; v < xt.size(); ++v) {
    for (int c = 0; c < k; ++c) lg[c] = static_cast<double>(x0_logits(c, v));
    detail::softmax<double>(lg, pi);
    kern.mixture(xt[v], pi, p);
    out.set(v, static_cast<std::uint8_t>(rng.categorical(p)));
  }
  return out;
}

/// Per-voxel argmax of a logit field (lowest class wins ties).
template <class T>
VoxelGrid argmax_labels(const LogitField<T>& logits, double voxel_size = 0.4) {
  std::vector<std::uint8_t> labels(logits.voxels());
  for (std::size_t v = 0; v < labels.size(); ++v) {
    int best = 0;
    for (int c = 1; c < logits.k; ++c)
      if (logits(c, v) > logits(best, v)) best = c;
    labels[v] = static_cast<std::uint8_t>(best);
  }
  return VoxelGrid(logits.dims, logits.k, voxel_size, std::move(labels));
}

/// Evenly spaced descending visit order over {1..T} containing T and, when
/// num_steps > 1, step 1.
inline std::vector<int> timestep_subset(int steps_total, int num_steps) {
  require(num_steps >= 1 && num_steps <= steps_total, "timestep_subset: num_steps must be in [1, T]");
  std::vector<int> ts;
  if (num_steps == 1) return {steps_total};
  for (int i = 0; i < num_steps; ++i) {
    const double frac = static_cast<double>(i) / (num_steps - 1);
    const int t = static_cast<int>(std::lround(steps_total - frac * (steps_total - 1)));
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }
  return ts;
}

}  // namespace occdiff
