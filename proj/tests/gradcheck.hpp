#pragma once

// Central finite-difference check of hand-written backward passes in 64-bit
// mode. The scalar objective is a fixed random projection of the network
// output, L = sum(R .* out), so d L / d out = R.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "occdiff/models.hpp"

namespace gradcheck {

using occdiff::nn::Matrix;
using occdiff::nn::Tensor;

inline constexpr double kStep = 1e-3;
/// Relative error denominator floor: coordinates whose analytic and numeric
/// derivatives are both below this are compared absolutely.
inline constexpr double kFloor = 1e-2;

struct Report {
  double max_rel = 0.0;
  std::string worst;
  int checked = 0;
};

inline double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kFloor}); }

inline double project(const Matrix<double>& r, const Matrix<double>& out) { return (r.array() * out.array()).sum(); }

/// Checks every tensor named by `visit` (or ≥ 200 sampled coordinates of the
/// large ones) against `loss()`; `grad_of(name)` returns the analytic gradient.
template <class Visit>
Report check_tensors(Visit&& visit, const std::function<double()>& loss,
                     const std::function<const Tensor<double>&(const std::string&)>& grad_of, std::uint64_t seed) {
  Report rep;
  occdiff::Rng rng(seed);
  visit([&](const std::string& name, Tensor<double>& t) {
    const Tensor<double>& g = grad_of(name);
    const std::size_t n = t.size();
    std::vector<std::size_t> coords;
    if (n <= 200) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < 200; ++i) coords.push_back(rng.below(n));
    }
    for (std::size_t i : coords) {
      double& w = t.data()[i];
      const double saved = w;
      w = saved + kStep;
      const double up = loss();
      w = saved - kStep;
      const double down = loss();
      w = saved;
      const double num = (up - down) / (2 * kStep);
      const double err = rel_error(g.data()[i], num);
      ++rep.checked;
      if (err > rep.max_rel) {
        rep.max_rel = err;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  });
  return rep;
}

/// Same check for an input block (condition channels or latent).
inline Report check_matrix(Matrix<double>& x, const Matrix<double>& analytic, const std::function<double()>& loss,
                           const std::string& name) {
  Report rep;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double& w = x.data()[i];
    const double saved = w;
    w = saved + kStep;
    const double up = loss();
    w = saved - kStep;
    const double down = loss();
    w = saved;
    const double err = rel_error(analytic.data()[i], (up - down) / (2 * kStep));
    ++rep.checked;
    if (err > rep.max_rel) {
      rep.max_rel = err;
      rep.worst = name + "[" + std::to_string(i) + "]";
    }
  }
  return rep;
}

inline Report merge(Report a, const Report& b) {
  if (b.max_rel > a.max_rel) {
    a.max_rel = b.max_rel;
    a.worst = b.worst;
  }
  a.checked += b.checked;
  return a;
}

/// Small architecture used by every check: 4x4x2 grid, K=3.
struct Setup {
  occdiff::Dims dims{4, 4, 2};
  int k = 3;

  occdiff::DenoiserConfig denoiser(occdiff::CondVariant v, bool latent) const {
    occdiff::DenoiserConfig c;
    c.num_classes = k;
    c.embed_dim = 4;
    c.time_dim = 8;
    c.time_hidden = 6;
    c.widths = {4, 5};
    c.condition = v;
    c.condition_channels = v == occdiff::CondVariant::kLogits ? k : 5;
    c.latent_input = latent;
    return c;
  }
  occdiff::BaselineConfig baseline() const {
    occdiff::BaselineConfig c;
    c.num_classes = k;
    c.embed_dim = 4;
    c.widths = {4, 5};
    c.feature_channels = 5;
    return c;
  }
};

/// Perturbs every parameter (including the zero-initialized biases) so that
/// no coordinate sits at a special point.
template <class Params>
void randomize(Params& p, std::uint64_t seed) {
  occdiff::Rng rng(seed);
  p.visit([&](const std::string&, auto& t) {
    using S = std::remove_reference_t<decltype(*t.data())>;
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] += static_cast<S>(0.1 * rng.normal());
  });
}

inline Report denoiser_check(occdiff::CondVariant v, bool latent, std::uint64_t seed) {
  using namespace occdiff;
  const Setup s;
  DenoiserParams<double> p(s.denoiser(v, latent));
  p.init(seed);
  randomize(p, seed + 1);
  Rng rng(seed + 2);
  const auto n = static_cast<Eigen::Index>(s.dims.count());

  VoxelGrid xt(s.dims, s.k);
  for (std::size_t i = 0; i < xt.size(); ++i) xt.set(i, static_cast<std::uint8_t>(rng.below(s.k)));
  Matrix<double> zt(s.k, n);
  for (Eigen::Index i = 0; i < zt.size(); ++i) zt.data()[i] = rng.normal();

  Condition<double> cond;
  cond.variant = v;
  if (v == CondVariant::kPredictions) {
    cond.labels.resize(xt.size());
    for (auto& l : cond.labels) l = static_cast<std::uint8_t>(rng.below(s.k));
  } else if (v == CondVariant::kLogits || v == CondVariant::kFeatures) {
    cond.channels = Matrix<double>(p.config.condition_channels, n);
    for (Eigen::Index i = 0; i < cond.channels.size(); ++i) cond.channels.data()[i] = rng.normal();
  }
  Matrix<double> r(s.k, n);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  const int t = 7;

  auto forward = [&](DenoiserCache<double>* cache) {
    return latent ? denoise_latent(p, zt, s.dims, t, cond, cache) : denoise(p, xt, t, cond, cache);
  };
  DenoiserCache<double> cache;
  forward(&cache);
  DenoiserParams<double> g(p.config);
  const auto back = denoise_backward(p, cache, r, g);

  std::vector<std::pair<std::string, const Tensor<double>*>> table;
  g.visit([&](const std::string& name, Tensor<double>& tt) { table.emplace_back(name, &tt); });
  auto grad_of = [&](const std::string& name) -> const Tensor<double>& {
    for (const auto& [nm, tp] : table)
      if (nm == name) return *tp;
    throw std::runtime_error("missing gradient " + name);
  };
  auto loss = [&] { return project(r, forward(nullptr)); };
  Report rep = check_tensors([&](auto&& f) { p.visit(f); }, loss, grad_of, seed + 3);
  if (v == CondVariant::kLogits || v == CondVariant::kFeatures) {
    rep = merge(rep, check_matrix(cond.channels, back.d_cond_channels, loss, "d_cond_channels"));
  }
  if (latent) rep = merge(rep, check_matrix(zt, back.d_latent, loss, "d_latent"));
  return rep;
}

inline Report baseline_check(std::uint64_t seed) {
  using namespace occdiff;
  const Setup s;
  BaselineParams<double> p(s.baseline());
  p.init(seed);
  randomize(p, seed + 1);
  Rng rng(seed + 2);
  const auto n = static_cast<Eigen::Index>(s.dims.count());
  VoxelGrid obs(s.dims, s.k + 1);
  for (std::size_t i = 0; i < obs.size(); ++i) obs.set(i, static_cast<std::uint8_t>(rng.below(s.k + 1)));
  Matrix<double> rf(p.config.feature_channels, n), rl(s.k, n);
  for (Eigen::Index i = 0; i < rf.size(); ++i) rf.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < rl.size(); ++i) rl.data()[i] = rng.normal();

  BaselineCache<double> cache;
  baseline_forward(p, obs, &cache);
  BaselineParams<double> g(p.config);
  baseline_backward(p, cache, rf, rl, g);
  std::vector<std::pair<std::string, const Tensor<double>*>> table;
  g.visit([&](const std::string& name, Tensor<double>& tt) { table.emplace_back(name, &tt); });
  auto grad_of = [&](const std::string& name) -> const Tensor<double>& {
    for (const auto& [nm, tp] : table)
      if (nm == name) return *tp;
    throw std::runtime_error("missing gradient " + name);
  };
  auto loss = [&] {
    const auto out = baseline_forward(p, obs);
    return project(rf, out.features) + project(rl, out.logits);
  };
  return check_tensors([&](auto&& f) { p.visit(f); }, loss, grad_of, seed + 3);
}

}  // namespace gradcheck
