#pragma once

// Reverse-process sampling for both representations, plus helpers that turn
// a checkpoint and an observation into predictions.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "occdiff/continuous.hpp"
#include "occdiff/discrete.hpp"
#include "occdiff/guidance.hpp"
#include "occdiff/models.hpp"
#include "occdiff/parallel.hpp"
#include "occdiff/train.hpp"

namespace occdiff {

enum class Guidance { kNone, kCfg, kCg };

inline std::string to_string(Guidance g) {
  switch (g) {
    case Guidance::kNone: return "none";
    case Guidance::kCfg: return "cfg";
    case Guidance::kCg: return "cg";
  }
  return "none";
}

inline Guidance parse_guidance(const std::string& s) {
  if (s == "none") return Guidance::kNone;
  if (s == "cfg") return Guidance::kCfg;
  if (s == "cg") return Guidance::kCg;
  throw SpecError("unknown guidance '" + s + "' (expected none, cfg or cg)");
}

struct SampleOptions {
  int num_steps = 10;
  double guidance_scale = 3.5;
  Guidance guidance = Guidance::kCfg;
  double cg_temperature = 1.0;
};

namespace detail {

inline nn::Matrix<float> guided_logits(const DenoiserParams<float>& p, const VoxelGrid* xt, const nn::Matrix<float>* zt,
                                       Dims d, int t, const Condition<float>& cond, double scale, bool cfg) {
  auto run = [&](const Condition<float>& c) {
    return xt != nullptr ? denoise(p, *xt, t, c) : denoise_latent(p, *zt, d, t, c);
  };
  nn::Matrix<float> lc = run(cond);
  if (!cfg || scale == 0.0 || cond.variant == CondVariant::kNull) return lc;
  return cfg_combine(lc, run(Condition<float>::null()), scale);
}

}  // namespace detail

/// Discrete reverse chain: x_T uniform, visit an evenly spaced descending
/// subset of steps, bridge between visited steps with the model mixture, and
/// return the argmax of the last guided x0 logits.
inline VoxelGrid sample_occupancy(const DenoiserParams<float>& p, const Condition<float>& cond, Dims dims,
                                  const NoiseSchedule& schedule, int num_steps, double guidance_scale,
                                  std::uint64_t seed, double voxel_size = 0.4) {
  if (p.config.latent_input) throw SpecError("sample_occupancy: checkpoint holds a Gaussian-path denoiser");
  require(num_steps >= 1 && num_steps <= schedule.steps(), "sample_occupancy: num_steps must be in [1, T]");
  const FlushDenormals ftz;
  const int k = p.config.num_classes;
  const auto steps = timestep_subset(schedule.steps(), num_steps);
  Rng rng(derive_seed({seed, 0x1417ull}));
  std::vector<std::uint8_t> init(dims.count());
  for (auto& l : init) l = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(k)));
  VoxelGrid x(dims, k, voxel_size, std::move(init));
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const int t = steps[i];
    const nn::Matrix<float> logits = detail::guided_logits(p, &x, nullptr, dims, t, cond, guidance_scale, true);
    const auto field = detail::to_field(logits, dims);
    if (i + 1 == steps.size()) return argmax_labels(field, voxel_size);
    x = sample_bridge_discrete(x, t, steps[i + 1], field, schedule, derive_seed({seed, 0x57E9ull, i}));
  }
  throw SpecError("sample_occupancy: empty step subset");
}

/// Gaussian-path chain over the relaxed latent. CFG combines x0 logits; CG
/// runs the unconditional model and shifts each step's mean by the scorer's
/// gradient toward `cg_target`.
inline VoxelGrid sample_occupancy_gaussian(const DenoiserParams<float>& p, const Condition<float>& cond, Dims dims,
                                           const NoiseSchedule& schedule, const SampleOptions& opt,
                                           std::uint64_t seed, const BaselineLatentScorer* scorer = nullptr,
                                           const VoxelGrid* cg_target = nullptr, double voxel_size = 0.4) {
  if (!p.config.latent_input) throw SpecError("sample_occupancy_gaussian: checkpoint holds a discrete denoiser");
  require(opt.num_steps >= 1 && opt.num_steps <= schedule.steps(), "sample_occupancy: num_steps must be in [1, T]");
  const bool cg = opt.guidance == Guidance::kCg && opt.guidance_scale != 0.0;
  const FlushDenormals ftz;
  if (cg) require(scorer != nullptr && cg_target != nullptr, "sample_occupancy_gaussian: CG needs a scorer and target");
  const int k = p.config.num_classes;
  const auto steps = timestep_subset(schedule.steps(), opt.num_steps);
  LatentVolume z(dims, k);
  Rng rng(derive_seed({seed, 0x6A17ull}));
  for (double& v : z.data) v = rng.normal();
  const Condition<float> used = cg ? Condition<float>::null() : cond;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const int t = steps[i];
    const nn::Matrix<float> zm = detail::latent_matrix(z);
    const nn::Matrix<float> logits =
        detail::guided_logits(p, nullptr, &zm, dims, t, used, opt.guidance_scale, opt.guidance == Guidance::kCfg);
    const auto field = detail::to_field(logits, dims);
    if (i + 1 == steps.size()) return argmax_labels(field, voxel_size);
    LatentVolume x0(dims, k);
    for (std::size_t v = 0; v < z.voxels(); ++v) {
      double mx = -INFINITY;
      for (int c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(field(c, v)));
      double sum = 0.0;
      for (int c = 0; c < k; ++c) sum += std::exp(field(c, v) - mx);
      for (int c = 0; c < k; ++c) x0(c, v) = kRelaxScale * std::exp(field(c, v) - mx) / sum - kRelaxScale / k;
    }
    const int next = steps[i + 1];
    std::optional<LatentVolume> shift;
    if (cg) shift = cg_adjust(z, t, next, *scorer, *cg_target, opt.guidance_scale, schedule);
    z = reverse_bridge_gaussian(z, t, next, x0, schedule, derive_seed({seed, 0x57E9ull, i}), 1.0,
                                shift ? &*shift : nullptr);
  }
  throw SpecError("sample_occupancy_gaussian: empty step subset");
}

/// A loaded model ready to predict from observations.
struct Predictor {
  TrainConfig config;
  NoiseSchedule schedule;
  std::optional<DenoiserParams<float>> denoiser;
  std::optional<BaselineParams<float>> baseline;
  std::optional<BaselineParams<double>> baseline64;  // CG scorer

  static Predictor from_checkpoint(const Checkpoint& ck) {
    Predictor pr;
    const std::string kind = ck.meta.value("kind", "");
    pr.config = ck.meta.at("config").get<TrainConfig>();
    pr.schedule = make_schedule(pr.config.schedule, pr.config.diffusion_steps);
    if (kind == "baseline") {
      pr.baseline = load_baseline_params(ck);
    } else if (kind == "diffusion") {
      auto st = load_diffusion_state(ck);
      pr.denoiser = std::move(st.denoiser);
      pr.baseline = std::move(st.baseline);
    } else {
      throw IoError("ckpt: unknown checkpoint kind '" + kind + "'");
    }
    if (pr.baseline) pr.baseline64 = cast_params<double, BaselineParams>(*pr.baseline);
    return pr;
  }

  bool is_baseline() const noexcept { return !denoiser.has_value(); }

  Condition<float> condition_for(const VoxelGrid& observation) const {
    const CondVariant v = denoiser ? denoiser->config.condition : CondVariant::kNull;
    if (v == CondVariant::kNull) return Condition<float>::null();
    if (!baseline) throw IoError("ckpt: conditioned denoiser without baseline parameters");
    return make_condition(v, baseline_forward(*baseline, observation));
  }

  /// One prediction for an observation grid (labels in [0, K], K = UNKNOWN).
  VoxelGrid predict(const VoxelGrid& observation, const SampleOptions& opt, std::uint64_t seed) const {
    const Dims d = observation.dims();
    const double vs = observation.voxel_size();
    if (is_baseline()) return baseline_forward(*baseline, observation).prediction;
    const Condition<float> cond = condition_for(observation);
    if (!denoiser->config.latent_input) {
      const double scale = opt.guidance == Guidance::kCfg ? opt.guidance_scale : 0.0;
      if (opt.guidance == Guidance::kCg) throw UnsupportedError("cg: classifier guidance is only defined on the continuous path");
      return sample_occupancy(*denoiser, cond, d, schedule, opt.num_steps, scale, seed, vs);
    }
    if (opt.guidance == Guidance::kCg) {
      if (!baseline64) throw IoError("ckpt: CG needs baseline parameters");
      const VoxelGrid target = baseline_forward(*baseline, observation).prediction;
      BaselineLatentScorer scorer(*baseline64, schedule, opt.cg_temperature);
      return sample_occupancy_gaussian(*denoiser, cond, d, schedule, opt, seed, &scorer, &target, vs);
    }
    return sample_occupancy_gaussian(*denoiser, cond, d, schedule, opt, seed, nullptr, nullptr, vs);
  }
};

}  // namespace occdiff
