#pragma once

// Classifier-free guidance on x0 logits, and gradient-based classifier
// guidance for the Gaussian path.

#include <cmath>
#include <vector>

#include "occdiff/continuous.hpp"
#include "occdiff/discrete.hpp"
#include "occdiff/error.hpp"
#include "occdiff/models.hpp"
#include "occdiff/nn.hpp"

namespace occdiff {

/// (s + 1) * logits_c - s * logits_u, elementwise.
template <class S>
nn::Matrix<S> cfg_combine(const nn::Matrix<S>& logits_c, const nn::Matrix<S>& logits_u, double s) {
  require(logits_c.rows() == logits_u.rows() && logits_c.cols() == logits_u.cols(), "cfg_combine: shape mismatch");
  if (!logits_c.allFinite() || !logits_u.allFinite()) throw NumericError("cfg_combine: non-finite logits");
  if (s == 0.0) return logits_c;
  const S a = static_cast<S>(s + 1.0), b = static_cast<S>(s);
  return a * logits_c - b * logits_u;
}

template <class T>
LogitField<T> cfg_combine(const LogitField<T>& logits_c, const LogitField<T>& logits_u, double s) {
  require(logits_c.dims == logits_u.dims && logits_c.k == logits_u.k, "cfg_combine: shape mismatch");
  LogitField<T> out = logits_c;
  if (s == 0.0) return out;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const T c = logits_c.data[i], u = logits_u.data[i];
    if (!std::isfinite(static_cast<double>(c)) || !std::isfinite(static_cast<double>(u))) {
      throw NumericError("cfg_combine: non-finite logits");
    }
    out.data[i] = static_cast<T>((s + 1.0) * c - s * u);
  }
  return out;
}

/// Scores log p(target | z_t) with the baseline network applied to a soft
/// decoding of the noisy latent: per voxel the class weights
/// softmax(temperature * z_t / sqrt(alpha_bar_t)) mix the rows of the
/// observation embedding, the baseline runs on that input, and the score is
/// the summed log-probability of the target labels.
class BaselineLatentScorer {
 public:
  BaselineLatentScorer(const BaselineParams<double>& params, const NoiseSchedule& schedule, double temperature = 1.0)
      : params_(params), schedule_(schedule), temperature_(temperature) {}

  /// Returns the score; grad (same shape as z_t) receives d score / d z_t.
  double score(const LatentVolume& z_t, int t, const VoxelGrid& target, LatentVolume* grad) const {
    const int k = params_.config.num_classes;
    require(z_t.channels == k, "cg: latent channel count must equal K");
    require(target.dims() == z_t.dims, "cg: target dims mismatch");
    schedule_.check_step(t);
    const auto n = static_cast<Eigen::Index>(z_t.voxels());
    const double scale = temperature_ / std::sqrt(schedule_.alpha_bar(t));

    // Soft class weights per voxel.
    nn::Matrix<double> w(k, n);
    for (Eigen::Index v = 0; v < n; ++v) {
      double mx = -INFINITY;
      for (int c = 0; c < k; ++c) mx = std::max(mx, scale * z_t(c, static_cast<std::size_t>(v)));
      double sum = 0.0;
      for (int c = 0; c < k; ++c) sum += (w(c, v) = std::exp(scale * z_t(c, static_cast<std::size_t>(v)) - mx));
      for (int c = 0; c < k; ++c) w(c, v) /= sum;
    }
    // emb (E x N) = table[0..K-1]^T * w
    const nn::Matrix<double> table = params_.obs_embed.m.topRows(k);
    const nn::Matrix<double> emb = table.transpose() * w;

    BaselineCache<double> cache;
    const auto out = baseline_forward_embedded(params_, emb, z_t.dims, target.voxel_size(), &cache);

    double total = 0.0;
    nn::Matrix<double> d_logits(k, n);
    for (Eigen::Index v = 0; v < n; ++v) {
      double mx = -INFINITY;
      for (int c = 0; c < k; ++c) mx = std::max(mx, out.logits(c, v));
      double sum = 0.0;
      for (int c = 0; c < k; ++c) sum += std::exp(out.logits(c, v) - mx);
      const double lse = mx + std::log(sum);
      const int y = target[static_cast<std::size_t>(v)];
      total += out.logits(y, v) - lse;
      for (int c = 0; c < k; ++c) d_logits(c, v) = (c == y ? 1.0 : 0.0) - std::exp(out.logits(c, v) - lse);
    }
    if (grad == nullptr) return total;

    BaselineParams<double> scratch(params_.config);
    const nn::Matrix<double> d_emb = baseline_backward(params_, cache, nn::Matrix<double>{}, d_logits, scratch);
    const nn::Matrix<double> d_w = table * d_emb;  // K x N
    *grad = LatentVolume(z_t.dims, k);
    for (Eigen::Index v = 0; v < n; ++v) {
      double dot = 0.0;
      for (int c = 0; c < k; ++c) dot += w(c, v) * d_w(c, v);
      for (int c = 0; c < k; ++c) (*grad)(c, static_cast<std::size_t>(v)) = scale * w(c, v) * (d_w(c, v) - dot);
    }
    return total;
  }

 private:
  const BaselineParams<double>& params_;
  const NoiseSchedule& schedule_;
  double temperature_;
};

/// Mean shift s * sigma^2_post(t -> t_next) * grad_z log p(target | z_t).
template <class Scorer>
LatentVolume cg_adjust(const LatentVolume& z_t, int t, int t_next, const Scorer& scorer, const VoxelGrid& target,
                       double s, const NoiseSchedule& schedule) {
  LatentVolume shift(z_t.dims, z_t.channels);
  if (s == 0.0) return shift;
  const double var = gaussian_posterior(schedule, t, t_next).variance;
  LatentVolume grad;
  scorer.score(z_t, t, target, &grad);
  for (std::size_t i = 0; i < shift.data.size(); ++i) shift.data[i] = s * var * grad.data[i];
  if (!shift.all_finite()) throw NumericError("cg_adjust: non-finite guidance gradient");
  return shift;
}

/// Classifier guidance has no gradient on discrete states.
template <class Scorer>
LatentVolume cg_adjust(const VoxelGrid&, int, int, const Scorer&, const VoxelGrid&, double, const NoiseSchedule&) {
  throw UnsupportedError("cg_adjust: classifier guidance is only defined on the continuous path");
}

}  // namespace occdiff
