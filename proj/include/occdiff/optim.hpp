#pragma once

// Adam with global-norm gradient clipping over a named parameter set.

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occdiff/error.hpp"
#include "occdiff/nn.hpp"

namespace occdiff {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

inline void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = nlohmann::json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"clip_norm", c.clip_norm}};
}
inline void from_json(const nlohmann::json& j, AdamConfig& c) {
  c = AdamConfig{};
  if (j.contains("lr")) j.at("lr").get_to(c.lr);
  if (j.contains("beta1")) j.at("beta1").get_to(c.beta1);
  if (j.contains("beta2")) j.at("beta2").get_to(c.beta2);
  if (j.contains("eps")) j.at("eps").get_to(c.eps);
  if (j.contains("clip_norm")) j.at("clip_norm").get_to(c.clip_norm);
}

/// Collects the tensors of a parameter set in visit order.
template <class Params, class S = float>
std::vector<nn::NamedTensor<S>> named_tensors(Params& p) {
  std::vector<nn::NamedTensor<S>> out;
  p.visit([&](const std::string& name, nn::Tensor<S>& t) { out.push_back({name, &t}); });
  return out;
}

template <class S>
double global_norm(const std::vector<nn::NamedTensor<S>>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) {
    const S* d = g.tensor->data();
    for (std::size_t i = 0; i < g.tensor->size(); ++i) sq += static_cast<double>(d[i]) * d[i];
  }
  return std::sqrt(sq);
}

/// Optimizer state mirrors the parameter set: first and second moments per
/// tensor, plus the number of completed updates.
template <template <class> class Params, class S = float>
struct Adam {
  AdamConfig config;
  Params<S> m;
  Params<S> v;
  long step = 0;

  Adam() = default;
  Adam(const Params<S>& like, AdamConfig cfg) : config(cfg), m(like.config), v(like.config) {}

  /// One update; returns the pre-clip gradient norm. Throws on non-finite
  /// gradients, naming the first offending tensor.
  double update(Params<S>& params, Params<S>& grads) {
    auto p = named_tensors<Params<S>, S>(params);
    auto g = named_tensors<Params<S>, S>(grads);
    auto mm = named_tensors<Params<S>, S>(m);
    auto vv = named_tensors<Params<S>, S>(v);
    require(p.size() == g.size() && p.size() == mm.size(), "adam: parameter layout mismatch");
    for (const auto& t : g) {
      if (!t.tensor->all_finite()) throw NumericError("non-finite gradient in tensor " + t.name);
    }
    const double norm = global_norm(g);
    const double clip = (config.clip_norm > 0.0 && norm > config.clip_norm) ? config.clip_norm / norm : 1.0;
    ++step;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    const double step_size = config.lr / bc1;
    for (std::size_t i = 0; i < p.size(); ++i) {
      S* w = p[i].tensor->data();
      const S* d = g[i].tensor->data();
      S* m1 = mm[i].tensor->data();
      S* m2 = vv[i].tensor->data();
      for (std::size_t j = 0; j < p[i].tensor->size(); ++j) {
        const double gj = static_cast<double>(d[j]) * clip;
        const double a = config.beta1 * m1[j] + (1.0 - config.beta1) * gj;
        const double b = config.beta2 * m2[j] + (1.0 - config.beta2) * gj * gj;
        m1[j] = static_cast<S>(a);
        m2[j] = static_cast<S>(b);
        w[j] = static_cast<S>(w[j] - step_size * a / (std::sqrt(b / bc2) + config.eps));
      }
    }
    return norm;
  }
};

}  // namespace occdiff
