#pragma once

// The trainable models: the conditional denoiser f(x_t, t, C) -> x0 logits and
// the discriminative baseline that maps a partial observation to features,
// logits, and a prediction (the three condition sources).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occdiff/discrete.hpp"
#include "occdiff/error.hpp"
#include "occdiff/nn.hpp"
#include "occdiff/unet.hpp"
#include "occdiff/voxel.hpp"

namespace occdiff {

/// Sinusoidal encoding: out[2i] = sin(t / 10000^(2i/dim)), out[2i+1] = cos(...).
template <class S = double>
nn::Vector<S> time_embedding(double t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw SpecError("time_embedding: dim must be even and >= 2");
  nn::Vector<S> out(dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    out[2 * i] = static_cast<S>(std::sin(t * freq));
    out[2 * i + 1] = static_cast<S>(std::cos(t * freq));
  }
  return out;
}

// ------------------------------------------------------------------ conditions

enum class CondVariant { kPredictions, kLogits, kFeatures, kNull };

inline std::string to_string(CondVariant v) {
  switch (v) {
    case CondVariant::kPredictions: return "c-pr";
    case CondVariant::kLogits: return "c-l";
    case CondVariant::kFeatures: return "c-r";
    case CondVariant::kNull: return "null";
  }
  return "null";
}

inline CondVariant parse_cond_variant(const std::string& s) {
  if (s == "c-pr" || s == "C-PR") return CondVariant::kPredictions;
  if (s == "c-l" || s == "C-L") return CondVariant::kLogits;
  if (s == "c-r" || s == "C-R") return CondVariant::kFeatures;
  if (s == "null" || s == "NULL") return CondVariant::kNull;
  throw SpecError("unknown condition variant '" + s + "' (expected c-pr, c-l, c-r or null)");
}

/// Conditioning payload: labels for C-PR, a C x N channel block for C-L / C-R.
template <class S>
struct Condition {
  CondVariant variant = CondVariant::kNull;
  std::vector<std::uint8_t> labels;
  nn::Matrix<S> channels;

  static Condition null() { return Condition{}; }
};

// -------------------------------------------------------------------- denoiser

struct DenoiserConfig {
  int num_classes = 6;
  int embed_dim = 64;
  int time_dim = 64;
  int time_hidden = 256;
  std::vector<int> widths{64, 128, 256};
  CondVariant condition = CondVariant::kFeatures;
  /// Channel count of C-L / C-R payloads (K for C-L, F for C-R).
  int condition_channels = 0;
  /// Gaussian path: the input is a K-channel real latent instead of labels.
  bool latent_input = false;

  void validate() const {
    require(num_classes >= 2 && num_classes <= 255, "DenoiserConfig: num_classes must be in [2, 255]");
    require(embed_dim >= 1 && time_hidden >= 1, "DenoiserConfig: dims must be positive");
    require(time_dim >= 2 && time_dim % 2 == 0, "DenoiserConfig: time_dim must be even");
    require(!widths.empty(), "DenoiserConfig: widths must be non-empty");
    if (condition == CondVariant::kLogits || condition == CondVariant::kFeatures) {
      require(condition_channels >= 1, "DenoiserConfig: condition_channels required for C-L / C-R");
    }
  }
  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"num_classes", c.num_classes}, {"embed_dim", c.embed_dim},
                     {"time_dim", c.time_dim},       {"time_hidden", c.time_hidden},
                     {"widths", c.widths},           {"condition", to_string(c.condition)},
                     {"condition_channels", c.condition_channels}, {"latent_input", c.latent_input}};
}
inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c = DenoiserConfig{};
  if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
  if (j.contains("embed_dim")) j.at("embed_dim").get_to(c.embed_dim);
  if (j.contains("time_dim")) j.at("time_dim").get_to(c.time_dim);
  if (j.contains("time_hidden")) j.at("time_hidden").get_to(c.time_hidden);
  if (j.contains("widths")) j.at("widths").get_to(c.widths);
  if (j.contains("condition")) c.condition = parse_cond_variant(j.at("condition").get<std::string>());
  if (j.contains("condition_channels")) j.at("condition_channels").get_to(c.condition_channels);
  if (j.contains("latent_input")) j.at("latent_input").get_to(c.latent_input);
}

template <class S>
struct DenoiserParams {
  DenoiserConfig config;
  nn::Tensor<S> label_embed;  // [K+1, D]; row K is the learned null-condition token
  nn::Pointwise<S> latent_in;  // latent mode: K -> D
  nn::Tensor<S> null_embed;    // latent mode: [1, D]
  nn::Linear<S> time_fc1, time_fc2, time_in;
  nn::Tensor<S> cond_embed;   // C-PR: [K, D]
  nn::Pointwise<S> cond_proj;  // C-L / C-R: condition_channels -> D
  nn::UNetParams<S> unet;
  nn::Pointwise<S> out;

  DenoiserParams() = default;
  explicit DenoiserParams(const DenoiserConfig& cfg) : config(cfg) {
    cfg.validate();
    const int k = cfg.num_classes, d = cfg.embed_dim;
    if (cfg.latent_input) {
      latent_in = nn::Pointwise<S>(k, d);
      null_embed = nn::Tensor<S>({1, d});
    } else {
      label_embed = nn::Tensor<S>({k + 1, d});
    }
    time_fc1 = nn::Linear<S>(cfg.time_dim, cfg.time_hidden);
    time_fc2 = nn::Linear<S>(cfg.time_hidden, cfg.time_hidden);
    time_in = nn::Linear<S>(cfg.time_hidden, d);
    if (cfg.condition == CondVariant::kPredictions) cond_embed = nn::Tensor<S>({k, d});
    if (cfg.condition == CondVariant::kLogits || cfg.condition == CondVariant::kFeatures) {
      cond_proj = nn::Pointwise<S>(cfg.condition_channels, d);
    }
    unet = nn::UNetParams<S>(nn::UNetShape{2 * d, cfg.widths, cfg.time_hidden});
    out = nn::Pointwise<S>(cfg.widths.front(), k);
  }

  /// Kaiming fan-in convolutions, N(0, 0.02) embeddings, zero output bias.
  void init(std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0xDE40ull}));
    if (config.latent_input) {
      latent_in.init(rng);
      nn::fill_normal(null_embed.m, rng, 0.02);
    } else {
      nn::fill_normal(label_embed.m, rng, 0.02);
    }
    time_fc1.init(rng);
    time_fc2.init(rng);
    time_in.init(rng);
    if (config.condition == CondVariant::kPredictions) nn::fill_normal(cond_embed.m, rng, 0.02);
    if (config.condition == CondVariant::kLogits || config.condition == CondVariant::kFeatures) cond_proj.init(rng);
    unet.init(rng);
    out.init(rng, 0.1);
  }

  template <class F>
  void visit(F&& f) {
    if (config.latent_input) {
      f("latent_in.weight", latent_in.weight);
      f("latent_in.bias", latent_in.bias);
      f("null_embed", null_embed);
    } else {
      f("label_embed", label_embed);
    }
    f("time_fc1.weight", time_fc1.weight);
    f("time_fc1.bias", time_fc1.bias);
    f("time_fc2.weight", time_fc2.weight);
    f("time_fc2.bias", time_fc2.bias);
    f("time_in.weight", time_in.weight);
    f("time_in.bias", time_in.bias);
    if (config.condition == CondVariant::kPredictions) f("cond_embed", cond_embed);
    if (config.condition == CondVariant::kLogits || config.condition == CondVariant::kFeatures) {
      f("cond_proj.weight", cond_proj.weight);
      f("cond_proj.bias", cond_proj.bias);
    }
    unet.visit("unet.", f);
    f("out.weight", out.weight);
    f("out.bias", out.bias);
  }
};

template <class S>
struct DenoiserCache {
  Dims dims{};
  nn::Vector<S> tsin, h1, a1, temb;
  std::vector<std::uint8_t> x_labels;
  nn::Matrix<S> x_latent;
  CondVariant cond_used = CondVariant::kNull;
  std::vector<std::uint8_t> cond_labels;
  nn::Matrix<S> cond_channels;
  nn::UNetCache<S> unet;
  nn::Matrix<S> unet_out;
};

namespace detail {

template <class S>
void check_finite_params(DenoiserParams<S>& p) {
  p.visit([](const std::string& name, nn::Tensor<S>& t) {
    if (!t.all_finite()) throw NumericError("denoise: non-finite parameter " + name);
  });
}

/// Shared denoiser body. Exactly one of labels / latent describes x_t.
template <class S>
nn::Matrix<S> denoise_impl(const DenoiserParams<S>& p, Dims d, const std::vector<std::uint8_t>* labels,
                           const nn::Matrix<S>* latent, int t, const Condition<S>& cond, DenoiserCache<S>* cache) {
  const auto& cfg = p.config;
  const auto n = static_cast<Eigen::Index>(d.count());
  const int dim = cfg.embed_dim;
  DenoiserCache<S> local;
  DenoiserCache<S>& c = cache != nullptr ? *cache : local;
  c = DenoiserCache<S>{};
  c.dims = d;

  c.tsin = time_embedding<S>(t, cfg.time_dim);
  c.h1 = nn::linear_forward(p.time_fc1, c.tsin);
  c.a1 = nn::silu(c.h1);
  c.temb = nn::linear_forward(p.time_fc2, c.a1);

  nn::Matrix<S> input(2 * dim, n);
  if (latent != nullptr) {
    require(latent->rows() == cfg.num_classes && latent->cols() == n, "denoise: latent shape mismatch");
    c.x_latent = *latent;
    input.topRows(dim) = nn::pointwise_forward(p.latent_in, *latent);
  } else {
    require(labels->size() == static_cast<std::size_t>(n), "denoise: x_t dims mismatch");
    c.x_labels = *labels;
    input.topRows(dim) = nn::embed(p.label_embed, std::span<const std::uint8_t>(*labels));
  }
  input.topRows(dim).colwise() += nn::linear_forward(p.time_in, c.temb);

  c.cond_used = cond.variant;
  switch (cond.variant) {
    case CondVariant::kNull: {
      const nn::Vector<S> tok = cfg.latent_input ? nn::Vector<S>(p.null_embed.m.row(0).transpose())
                                                 : nn::Vector<S>(p.label_embed.m.row(cfg.num_classes).transpose());
      input.bottomRows(dim).colwise() = tok;
      break;
    }
    case CondVariant::kPredictions: {
      if (cfg.condition != CondVariant::kPredictions) throw SpecError("denoise: model not built for C-PR");
      require(cond.labels.size() == static_cast<std::size_t>(n), "denoise: condition dims mismatch");
      for (auto l : cond.labels) require(l < cfg.num_classes, "denoise: C-PR label out of range");
      c.cond_labels = cond.labels;
      input.bottomRows(dim) = nn::embed(p.cond_embed, std::span<const std::uint8_t>(cond.labels));
      break;
    }
    case CondVariant::kLogits:
    case CondVariant::kFeatures: {
      if (cfg.condition != cond.variant) throw SpecError("denoise: model built for a different condition variant");
      require(cond.channels.rows() == cfg.condition_channels && cond.channels.cols() == n,
              "denoise: condition dims mismatch");
      c.cond_channels = cond.channels;
      input.bottomRows(dim) = nn::pointwise_forward(p.cond_proj, cond.channels);
      break;
    }
  }

  c.unet_out = nn::unet_forward(p.unet, input, d, c.temb, &c.unet);
  return nn::pointwise_forward(p.out, c.unet_out);
}

}  // namespace detail

/// x0 logits (K x N) for labels x_t at step t under condition cond.
template <class S>
nn::Matrix<S> denoise(const DenoiserParams<S>& p, const VoxelGrid& xt, int t, const Condition<S>& cond,
                      DenoiserCache<S>* cache = nullptr) {
  if (p.config.latent_input) throw SpecError("denoise: model expects a latent input");
  require(xt.num_classes() == p.config.num_classes, "denoise: class count mismatch");
  const std::vector<std::uint8_t> labels(xt.labels().begin(), xt.labels().end());
  return detail::denoise_impl<S>(p, xt.dims(), &labels, nullptr, t, cond, cache);
}

/// x0 logits for a real-valued K-channel latent z_t (Gaussian path).
template <class S>
nn::Matrix<S> denoise_latent(const DenoiserParams<S>& p, const nn::Matrix<S>& zt, Dims d, int t,
                             const Condition<S>& cond, DenoiserCache<S>* cache = nullptr) {
  if (!p.config.latent_input) throw SpecError("denoise_latent: model expects label input");
  return detail::denoise_impl<S>(p, d, nullptr, &zt, t, cond, cache);
}

template <class S>
struct DenoiserBackward {
  nn::Matrix<S> d_cond_channels;  // filled for C-L / C-R conditions
  nn::Matrix<S> d_latent;         // filled in latent mode
};

/// Accumulates parameter gradients into g.
template <class S>
DenoiserBackward<S> denoise_backward(const DenoiserParams<S>& p, const DenoiserCache<S>& c, const nn::Matrix<S>& d_logits,
                                     DenoiserParams<S>& g) {
  const auto& cfg = p.config;
  const int dim = cfg.embed_dim;
  DenoiserBackward<S> res;

  const nn::Matrix<S> d_unet_out = nn::pointwise_backward(p.out, c.unet_out, d_logits, g.out);
  auto ug = nn::unet_backward(p.unet, c.unet, c.temb, d_unet_out, g.unet, true);
  nn::Vector<S> d_temb = ug.d_temb;

  const nn::Matrix<S> d_x = ug.d_input.topRows(dim);
  const nn::Matrix<S> d_cond = ug.d_input.bottomRows(dim);

  d_temb += nn::linear_backward(p.time_in, c.temb, nn::Vector<S>(d_x.rowwise().sum()), g.time_in);
  if (cfg.latent_input) {
    res.d_latent = nn::pointwise_backward(p.latent_in, c.x_latent, d_x, g.latent_in);
  } else {
    nn::embed_backward(std::span<const std::uint8_t>(c.x_labels), d_x, g.label_embed);
  }

  switch (c.cond_used) {
    case CondVariant::kNull: {
      const nn::Vector<S> d_tok = d_cond.rowwise().sum();
      if (cfg.latent_input) {
        g.null_embed.m.row(0) += d_tok.transpose();
      } else {
        g.label_embed.m.row(cfg.num_classes) += d_tok.transpose();
      }
      break;
    }
    case CondVariant::kPredictions:
      nn::embed_backward(std::span<const std::uint8_t>(c.cond_labels), d_cond, g.cond_embed);
      break;
    case CondVariant::kLogits:
    case CondVariant::kFeatures:
      res.d_cond_channels = nn::pointwise_backward(p.cond_proj, c.cond_channels, d_cond, g.cond_proj);
      break;
  }

  const nn::Vector<S> d_a1 = nn::linear_backward(p.time_fc2, c.a1, d_temb, g.time_fc2);
  const nn::Vector<S> d_h1 = nn::silu_backward(c.h1, d_a1);
  nn::linear_backward(p.time_fc1, c.tsin, d_h1, g.time_fc1);
  return res;
}

// -------------------------------------------------------------------- baseline

struct BaselineConfig {
  int num_classes = 6;
  int embed_dim = 32;
  std::vector<int> widths{32, 64, 128};
  int feature_channels = 32;

  void validate() const {
    require(num_classes >= 2 && num_classes <= 254, "BaselineConfig: num_classes must be in [2, 254]");
    require(embed_dim >= 1 && feature_channels >= 1 && !widths.empty(), "BaselineConfig: sizes must be positive");
  }
  friend bool operator==(const BaselineConfig&, const BaselineConfig&) = default;
};

inline void to_json(nlohmann::json& j, const BaselineConfig& c) {
  j = nlohmann::json{{"num_classes", c.num_classes},
                     {"embed_dim", c.embed_dim},
                     {"widths", c.widths},
                     {"feature_channels", c.feature_channels}};
}
inline void from_json(const nlohmann::json& j, BaselineConfig& c) {
  c = BaselineConfig{};
  if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
  if (j.contains("embed_dim")) j.at("embed_dim").get_to(c.embed_dim);
  if (j.contains("widths")) j.at("widths").get_to(c.widths);
  if (j.contains("feature_channels")) j.at("feature_channels").get_to(c.feature_channels);
}

template <class S>
struct BaselineParams {
  BaselineConfig config;
  nn::Tensor<S> obs_embed;  // [K+1, E]; row K embeds UNKNOWN
  nn::UNetParams<S> unet;
  nn::Pointwise<S> feature_head;  // widths[0] -> F
  nn::Pointwise<S> classifier;    // F -> K

  BaselineParams() = default;
  explicit BaselineParams(const BaselineConfig& cfg) : config(cfg) {
    cfg.validate();
    obs_embed = nn::Tensor<S>({cfg.num_classes + 1, cfg.embed_dim});
    unet = nn::UNetParams<S>(nn::UNetShape{cfg.embed_dim, cfg.widths, 0});
    feature_head = nn::Pointwise<S>(cfg.widths.front(), cfg.feature_channels);
    classifier = nn::Pointwise<S>(cfg.feature_channels, cfg.num_classes);
  }

  void init(std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0xBA5Eull}));
    nn::fill_normal(obs_embed.m, rng, 0.02);
    unet.init(rng);
    feature_head.init(rng, std::sqrt(2.0));
    classifier.init(rng, 0.1);
  }

  template <class F>
  void visit(F&& f) {
    f("obs_embed", obs_embed);
    unet.visit("unet.", f);
    f("feature_head.weight", feature_head.weight);
    f("feature_head.bias", feature_head.bias);
    f("classifier.weight", classifier.weight);
    f("classifier.bias", classifier.bias);
  }
};

template <class S>
struct BaselineOutput {
  nn::Matrix<S> features;  // F x N, penultimate representation (C-R)
  nn::Matrix<S> logits;    // K x N, classifier output (C-L)
  VoxelGrid prediction;    // argmax of logits (C-PR)
};

template <class S>
struct BaselineCache {
  Dims dims{};
  std::vector<std::uint8_t> obs;
  nn::UNetCache<S> unet;
  nn::Matrix<S> unet_out;
  nn::Matrix<S> feat_pre;
  nn::Matrix<S> features;
};

/// Runs the network from an already embedded input (E x N). The soft
/// embedding path used by classifier guidance enters here.
template <class S>
BaselineOutput<S> baseline_forward_embedded(const BaselineParams<S>& p, const nn::Matrix<S>& emb, Dims d,
                                            double voxel_size, BaselineCache<S>* cache = nullptr) {
  require(emb.rows() == p.config.embed_dim && emb.cols() == static_cast<Eigen::Index>(d.count()),
          "baseline_forward: embedding shape mismatch");
  BaselineCache<S> local;
  BaselineCache<S>& c = cache != nullptr ? *cache : local;
  c.dims = d;
  c.unet_out = nn::unet_forward(p.unet, emb, d, nn::Vector<S>{}, &c.unet);
  c.feat_pre = nn::pointwise_forward(p.feature_head, c.unet_out);
  c.features = nn::silu(c.feat_pre);

  BaselineOutput<S> out;
  out.features = c.features;
  out.logits = nn::pointwise_forward(p.classifier, c.features);
  LogitField<S> lf(d, p.config.num_classes);
  std::copy(out.logits.data(), out.logits.data() + out.logits.size(), lf.data.begin());
  out.prediction = argmax_labels(lf, voxel_size);
  return out;
}

/// observation labels are in [0, K]; K marks an unobserved voxel.
template <class S>
BaselineOutput<S> baseline_forward(const BaselineParams<S>& p, const VoxelGrid& observation,
                                   BaselineCache<S>* cache = nullptr) {
  const int k = p.config.num_classes;
  for (auto l : observation.labels()) {
    if (l > k) throw SpecError("baseline_forward: observation label exceeds UNKNOWN");
  }
  BaselineCache<S> local;
  BaselineCache<S>& c = cache != nullptr ? *cache : local;
  c = BaselineCache<S>{};
  c.obs.assign(observation.labels().begin(), observation.labels().end());
  const nn::Matrix<S> emb = nn::embed(p.obs_embed, std::span<const std::uint8_t>(c.obs));
  return baseline_forward_embedded(p, emb, observation.dims(), observation.voxel_size(), &c);
}

/// Either gradient block may be empty (treated as zero). Returns the gradient
/// with respect to the embedded input; the embedding table gradient is
/// accumulated only when the forward pass started from labels.
template <class S>
nn::Matrix<S> baseline_backward(const BaselineParams<S>& p, const BaselineCache<S>& c, const nn::Matrix<S>& d_features,
                                const nn::Matrix<S>& d_logits, BaselineParams<S>& g) {
  nn::Matrix<S> d_feat = nn::Matrix<S>::Zero(c.features.rows(), c.features.cols());
  if (d_logits.size() > 0) d_feat += nn::pointwise_backward(p.classifier, c.features, d_logits, g.classifier);
  if (d_features.size() > 0) d_feat += d_features;
  const nn::Matrix<S> d_pre = nn::silu_backward(c.feat_pre, d_feat);
  const nn::Matrix<S> d_unet = nn::pointwise_backward(p.feature_head, c.unet_out, d_pre, g.feature_head);
  auto ug = nn::unet_backward(p.unet, c.unet, nn::Vector<S>{}, d_unet, g.unet, true);
  if (!c.obs.empty()) nn::embed_backward(std::span<const std::uint8_t>(c.obs), ug.d_input, g.obs_embed);
  return std::move(ug.d_input);
}

/// Builds the denoiser condition of the requested variant from baseline outputs.
template <class S>
Condition<S> make_condition(CondVariant variant, const BaselineOutput<S>& out) {
  Condition<S> c;
  c.variant = variant;
  switch (variant) {
    case CondVariant::kPredictions:
      c.labels.assign(out.prediction.labels().begin(), out.prediction.labels().end());
      break;
    case CondVariant::kLogits: c.channels = out.logits; break;
    case CondVariant::kFeatures: c.channels = out.features; break;
    case CondVariant::kNull: break;
  }
  return c;
}

// ----------------------------------------------------------- param utilities

/// Copies every tensor of src into a fresh parameter set of scalar To.
template <class To, template <class> class Params, class From>
Params<To> cast_params(const Params<From>& src) {
  Params<To> dst(src.config);
  std::vector<const nn::Tensor<From>*> from;
  const_cast<Params<From>&>(src).visit([&](const std::string&, nn::Tensor<From>& t) { from.push_back(&t); });
  std::size_t i = 0;
  dst.visit([&](const std::string&, nn::Tensor<To>& t) { t.m = from[i++]->m.template cast<To>(); });
  return dst;
}

/// Zero-initialised parameters with the same configuration.
template <template <class> class Params, class S>
Params<S> zeros_like(const Params<S>& p) {
  return Params<S>(p.config);
}

template <template <class> class Params, class S>
std::size_t parameter_count(const Params<S>& p) {
  std::size_t n = 0;
  const_cast<Params<S>&>(p).visit([&](const std::string&, nn::Tensor<S>& t) { n += t.size(); });
  return n;
}

}  // namespace occdiff
