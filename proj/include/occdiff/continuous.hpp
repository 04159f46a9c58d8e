#pragma once

// Gaussian diffusion over a real-valued relaxation of the label grid, and the
// triplane pooling / lookup used to factor a latent volume into three planes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "occdiff/error.hpp"
#include "occdiff/rng.hpp"
#include "occdiff/schedule.hpp"
#include "occdiff/voxel.hpp"

namespace occdiff {

/// Real features per voxel, channel-major: value(c, v) = data[c * n + v].
struct LatentVolume {
  Dims dims{};
  int channels = 0;
  std::vector<double> data;

  LatentVolume() = default;
  LatentVolume(Dims d, int c, double fill = 0.0)
      : dims(d), channels(c), data(static_cast<std::size_t>(c) * d.count(), fill) {}

  std::size_t voxels() const noexcept { return dims.count(); }
  double& operator()(int c, std::size_t v) noexcept { return data[static_cast<std::size_t>(c) * voxels() + v]; }
  double operator()(int c, std::size_t v) const noexcept {
    return data[static_cast<std::size_t>(c) * voxels() + v];
  }
  double& at(int c, int x, int y, int z) noexcept { return (*this)(c, dims.index(x, y, z)); }
  double at(int c, int x, int y, int z) const noexcept { return (*this)(c, dims.index(x, y, z)); }

  bool all_finite() const noexcept {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
  }
};

inline constexpr double kRelaxScale = 2.0;

/// Scaled one-hot (value `scale` on the label channel) shifted to zero mean
/// per voxel: label channel scale * (1 - 1/K), others -scale / K.
inline LatentVolume onehot_relax(const VoxelGrid& grid, double scale = kRelaxScale) {
  const int k = grid.num_classes();
  LatentVolume vol(grid.dims(), k, -scale / k);
  for (std::size_t v = 0; v < grid.size(); ++v) vol(grid[v], v) += scale;
  return vol;
}

inline VoxelGrid decode_argmax(const LatentVolume& vol, int num_classes, double voxel_size = 0.4) {
  if (vol.channels != num_classes) throw SpecError("decode_argmax: channel count must equal K");
  std::vector<std::uint8_t> labels(vol.voxels());
  for (std::size_t v = 0; v < labels.size(); ++v) {
    int best = 0;
    for (int c = 1; c < vol.channels; ++c)
      if (vol(c, v) > vol(best, v)) best = c;
    labels[v] = static_cast<std::uint8_t>(best);
  }
  return VoxelGrid(vol.dims, num_classes, voxel_size, std::move(labels));
}

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
inline LatentVolume forward_sample_gaussian(const LatentVolume& z0, int t, const NoiseSchedule& schedule,
                                            std::uint64_t seed) {
  schedule.check_step(t);
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  LatentVolume out = z0;
  Rng rng(derive_seed({seed, 0x6A55ull}));
  for (double& x : out.data) x = a * x + b * rng.normal();
  return out;
}

/// One Gaussian transition q(z_t | z_{t-1}).
inline LatentVolume forward_step_gaussian(const LatentVolume& z_prev, int t, const NoiseSchedule& schedule,
                                          std::uint64_t seed) {
  const double beta = schedule.beta(t);
  const double a = std::sqrt(1.0 - beta), b = std::sqrt(beta);
  LatentVolume out = z_prev;
  Rng rng(derive_seed({seed, 0x57E9ull}));
  for (double& x : out.data) x = a * x + b * rng.normal();
  return out;
}

/// q(z_s | z_t, z0) = N(coef_x0 z0 + coef_zt z_t, variance) for 0 <= s < t.
struct GaussianPosterior {
  double coef_x0 = 0.0;
  double coef_zt = 0.0;
  double variance = 0.0;
};

inline GaussianPosterior gaussian_posterior(const NoiseSchedule& schedule, int t, int s) {
  schedule.check_step(t);
  require(s >= 0 && s < t, "gaussian_posterior: need 0 <= s < t");
  const double a_t = schedule.alpha_bar(t);
  const double a_s = schedule.alpha_bar(s);
  const double alpha = (s == t - 1) ? 1.0 - schedule.beta(t) : a_t / a_s;
  const double one_minus_at = 1.0 - a_t;
  GaussianPosterior p;
  p.coef_x0 = std::sqrt(a_s) * (1.0 - alpha) / one_minus_at;
  p.coef_zt = std::sqrt(alpha) * (1.0 - a_s) / one_minus_at;
  p.variance = std::max(0.0, (1.0 - a_s) * (1.0 - alpha) / one_minus_at);
  return p;
}

/// Posterior mean with z0 replaced by the model's prediction.
inline LatentVolume gaussian_posterior_mean(const LatentVolume& z_t, const LatentVolume& x0_pred,
                                            const GaussianPosterior& post) {
  require(z_t.dims == x0_pred.dims && z_t.channels == x0_pred.channels, "gaussian_posterior_mean: shape mismatch");
  LatentVolume mean = z_t;
  for (std::size_t i = 0; i < mean.data.size(); ++i) {
    mean.data[i] = post.coef_x0 * x0_pred.data[i] + post.coef_zt * z_t.data[i];
  }
  return mean;
}

/// z_s = mean + noise_scale * sigma_post * eps, bridging t -> s. An optional
/// mean shift (classifier guidance) is added before noise.
inline LatentVolume reverse_bridge_gaussian(const LatentVolume& z_t, int t, int s, const LatentVolume& x0_pred,
                                            const NoiseSchedule& schedule, std::uint64_t seed,
                                            double noise_scale = 1.0, const LatentVolume* mean_shift = nullptr) {
  if (!z_t.all_finite() || !x0_pred.all_finite()) throw NumericError("reverse_step_gaussian: non-finite input");
  const auto post = gaussian_posterior(schedule, t, s);
  LatentVolume out = gaussian_posterior_mean(z_t, x0_pred, post);
  if (mean_shift != nullptr) {
    require(mean_shift->data.size() == out.data.size(), "reverse_step_gaussian: mean shift shape mismatch");
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += mean_shift->data[i];
  }
  if (s == 0 || noise_scale == 0.0) return out;
  const double sigma = noise_scale * std::sqrt(post.variance);
  Rng rng(derive_seed({seed, 0x4E5Full}));
  for (double& x : out.data) x += sigma * rng.normal();
  return out;
}

/// z_{t-1} from q(z_{t-1} | z_t, z0 = x0_pred). At t = 1 the noiseless mean is returned.
inline LatentVolume reverse_step_gaussian(const LatentVolume& z_t, int t, const LatentVolume& x0_pred,
                                          const NoiseSchedule& schedule, std::uint64_t seed,
                                          double noise_scale = 1.0) {
  require(t >= 1, "reverse_step_gaussian: t must be >= 1");
  return reverse_bridge_gaussian(z_t, t, t - 1, x0_pred, schedule, seed, noise_scale);
}

struct Triplane {
  int channels = 0;
  Dims dims{};
  std::vector<double> xy;  // [c][x][y]
  std::vector<double> xz;  // [c][x][z]
  std::vector<double> yz;  // [c][y][z]

  Triplane() = default;
  Triplane(Dims d, int c)
      : channels(c),
        dims(d),
        xy(static_cast<std::size_t>(c) * d.x * d.y, 0.0),
        xz(static_cast<std::size_t>(c) * d.x * d.z, 0.0),
        yz(static_cast<std::size_t>(c) * d.y * d.z, 0.0) {}

  double& h_xy(int c, int x, int y) { return xy[(static_cast<std::size_t>(c) * dims.x + x) * dims.y + y]; }
  double& h_xz(int c, int x, int z) { return xz[(static_cast<std::size_t>(c) * dims.x + x) * dims.z + z]; }
  double& h_yz(int c, int y, int z) { return yz[(static_cast<std::size_t>(c) * dims.y + y) * dims.z + z]; }
  double h_xy(int c, int x, int y) const { return xy[(static_cast<std::size_t>(c) * dims.x + x) * dims.y + y]; }
  double h_xz(int c, int x, int z) const { return xz[(static_cast<std::size_t>(c) * dims.x + x) * dims.z + z]; }
  double h_yz(int c, int y, int z) const { return yz[(static_cast<std::size_t>(c) * dims.y + y) * dims.z + z]; }
};

/// Average-pools the volume along each axis onto the three planes.
inline Triplane pool_to_triplane(const LatentVolume& vol) {
  const Dims d = vol.dims;
  Triplane tp(d, vol.channels);
  for (int c = 0; c < vol.channels; ++c)
    for (int x = 0; x < d.x; ++x)
      for (int y = 0; y < d.y; ++y)
        for (int z = 0; z < d.z; ++z) {
          const double v = vol.at(c, x, y, z);
          tp.h_xy(c, x, y) += v / d.z;
          tp.h_xz(c, x, z) += v / d.y;
          tp.h_yz(c, y, z) += v / d.x;
        }
  return tp;
}

namespace detail {

struct LerpCoord {
  int i0, i1;
  double f;
};

inline LerpCoord lerp_coord(double p, int extent, const char* axis) {
  if (!(p >= 0.0 && p <= extent - 1)) {
    throw SpecError(std::string("triplane_lookup: coordinate out of bounds on axis ") + axis);
  }
  const int i0 = std::min(static_cast<int>(std::floor(p)), extent - 1);
  const int i1 = std::min(i0 + 1, extent - 1);
  return {i0, i1, p - i0};
}

template <class Get>
double bilerp(const LerpCoord& u, const LerpCoord& v, Get&& get) {
  return (1 - u.f) * (1 - v.f) * get(u.i0, v.i0) + u.f * (1 - v.f) * get(u.i1, v.i0) +
         (1 - u.f) * v.f * get(u.i0, v.i1) + u.f * v.f * get(u.i1, v.i1);
}

}  // namespace detail

/// h(p) = bilerp(h_xy; x, y) + bilerp(h_xz; x, z) + bilerp(h_yz; y, z), with
/// p in voxel-index units. No extrapolation.
inline std::vector<double> triplane_lookup(const Triplane& tp, std::array<double, 3> p) {
  const auto cx = detail::lerp_coord(p[0], tp.dims.x, "x");
  const auto cy = detail::lerp_coord(p[1], tp.dims.y, "y");
  const auto cz = detail::lerp_coord(p[2], tp.dims.z, "z");
  std::vector<double> out(static_cast<std::size_t>(tp.channels));
  for (int c = 0; c < tp.channels; ++c) {
    out[c] = detail::bilerp(cx, cy, [&](int a, int b) { return tp.h_xy(c, a, b); }) +
             detail::bilerp(cx, cz, [&](int a, int b) { return tp.h_xz(c, a, b); }) +
             detail::bilerp(cy, cz, [&](int a, int b) { return tp.h_yz(c, a, b); });
  }
  return out;
}

}  // namespace occdiff
