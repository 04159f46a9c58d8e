#pragma once

// Noise schedules and uniform-family categorical transition kernels.
//
// Steps are 1-based: betas()[t-1] is beta_t. alpha_bar(0) == 1 by convention.
// A uniform kernel with mixing weight g is Q = (1 - g) I + (g / K) 11^T, and the
// product of uniform kernels stays uniform with 1 - g = prod(1 - g_i), so the
// cumulative kernel is Q_bar_t = a_t I + ((1 - a_t) / K) 11^T with a_t = alpha_bar(t).

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "occdiff/error.hpp"

namespace occdiff {

enum class ScheduleKind { kLinear, kCosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::kLinear ? "linear" : "cosine"; }

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::kLinear;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw SpecError("unknown schedule kind '" + s + "' (expected linear or cosine)");
}

class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(ScheduleKind kind, std::vector<double> betas) : kind_(kind), betas_(std::move(betas)) {
    require(!betas_.empty(), "NoiseSchedule: needs at least one step");
    alphas_bar_.resize(betas_.size());
    double acc = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      require(betas_[i] > 0.0 && betas_[i] <= 1.0, "NoiseSchedule: beta must be in (0, 1]");
      acc *= 1.0 - betas_[i];
      alphas_bar_[i] = acc;
    }
  }

  ScheduleKind kind() const noexcept { return kind_; }
  int steps() const noexcept { return static_cast<int>(betas_.size()); }
  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alphas_bar() const noexcept { return alphas_bar_; }

  double beta(int t) const {
    check_step(t);
    return betas_[static_cast<std::size_t>(t - 1)];
  }
  /// Cumulative product of (1 - beta) up to t; t = 0 gives 1.
  double alpha_bar(int t) const {
    if (t == 0) return 1.0;
    check_step(t);
    return alphas_bar_[static_cast<std::size_t>(t - 1)];
  }
  /// Mixing weight of the cumulative kernel, 1 - alpha_bar(t).
  double gamma(int t) const { return 1.0 - alpha_bar(t); }

  void check_step(int t) const {
    if (t < 1 || t > steps()) {
      throw SpecError("step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }
  }

  friend bool operator==(const NoiseSchedule& a, const NoiseSchedule& b) {
    return a.kind_ == b.kind_ && a.betas_ == b.betas_;
  }

 private:
  ScheduleKind kind_ = ScheduleKind::kLinear;
  std::vector<double> betas_;
  std::vector<double> alphas_bar_;
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int steps) {
  require(steps >= 1, "make_schedule: T must be >= 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::kLinear) {
    constexpr double lo = 1e-4, hi = 0.02;
    for (int t = 1; t <= steps; ++t) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
      betas[static_cast<std::size_t>(t - 1)] = lo + (hi - lo) * frac;
    }
  } else {
    constexpr double s = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 1; t <= steps; ++t) {
      const double ab = f(t) / f0;
      double beta = 1.0 - ab / prev;
      beta = std::min(std::max(beta, 1e-12), 0.999);
      betas[static_cast<std::size_t>(t - 1)] = beta;
      prev = ab;
    }
  }
  return NoiseSchedule(kind, std::move(betas));
}

/// Dense K x K row-stochastic matrix, row-major.
class TransitionMatrix {
 public:
  TransitionMatrix() = default;
  explicit TransitionMatrix(int k) : k_(k), p_(static_cast<std::size_t>(k) * k, 0.0) {}

  int size() const noexcept { return k_; }
  double operator()(int i, int j) const noexcept { return p_[static_cast<std::size_t>(i) * k_ + j]; }
  double& operator()(int i, int j) noexcept { return p_[static_cast<std::size_t>(i) * k_ + j]; }
  const std::vector<double>& data() const noexcept { return p_; }

  TransitionMatrix operator*(const TransitionMatrix& o) const {
    require(o.k_ == k_, "TransitionMatrix: size mismatch");
    TransitionMatrix r(k_);
    for (int i = 0; i < k_; ++i)
      for (int l = 0; l < k_; ++l) {
        const double a = (*this)(i, l);
        for (int j = 0; j < k_; ++j) r(i, j) += a * o(l, j);
      }
    return r;
  }

  double max_row_sum_error() const noexcept {
    double worst = 0.0;
    for (int i = 0; i < k_; ++i) {
      double s = 0.0;
      for (int j = 0; j < k_; ++j) s += (*this)(i, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
    return worst;
  }

 private:
  int k_ = 0;
  std::vector<double> p_;
};

/// Q = (1 - beta) I + (beta / K) 11^T.
inline TransitionMatrix uniform_transition(int k, double beta) {
  require(k >= 2, "uniform_transition: K must be >= 2");
  require(beta >= 0.0 && beta <= 1.0, "uniform_transition: beta must be in [0, 1]");
  TransitionMatrix q(k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) q(i, j) = (i == j ? 1.0 - beta : 0.0) + beta / k;
  return q;
}

/// Q_bar_t = Q_1 ... Q_t, evaluated through the uniform-family closed form.
inline TransitionMatrix cumulative_transition(const NoiseSchedule& schedule, int k, int t) {
  schedule.check_step(t);
  return uniform_transition(k, schedule.gamma(t));
}

/// Q_bar_t as an explicit left-to-right matrix product. Slow; kept for checks.
inline TransitionMatrix cumulative_transition_product(const NoiseSchedule& schedule, int k, int t) {
  schedule.check_step(t);
  TransitionMatrix acc = uniform_transition(k, schedule.beta(1));
  for (int s = 2; s <= t; ++s) acc = acc * uniform_transition(k, schedule.beta(s));
  return acc;
}

}  // namespace occdiff
