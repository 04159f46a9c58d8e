#pragma once

// Training loops for the discriminative baseline and the diffusion denoiser
// (discrete or Gaussian representation, optional end-to-end co-training of
// the baseline under the C-R condition).
//
// Every step derives its randomness from (seed, step), and per-scene
// gradients are reduced in batch order, so a run is reproducible for any
// worker count and can be resumed exactly from a checkpoint.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occdiff/checkpoint.hpp"
#include "occdiff/continuous.hpp"
#include "occdiff/dataset.hpp"
#include "occdiff/discrete.hpp"
#include "occdiff/models.hpp"
#include "occdiff/optim.hpp"
#include "occdiff/parallel.hpp"
#include "occdiff/schedule.hpp"
#include "occdiff/voxel_io.hpp"

namespace occdiff {

enum class Representation { kDiscrete, kGaussian };

inline std::string to_string(Representation r) { return r == Representation::kDiscrete ? "discrete" : "gaussian"; }

inline Representation parse_representation(const std::string& s) {
  if (s == "discrete") return Representation::kDiscrete;
  if (s == "gaussian") return Representation::kGaussian;
  throw SpecError("unknown representation '" + s + "' (expected discrete or gaussian)");
}

struct TrainConfig {
  Representation representation = Representation::kDiscrete;
  ScheduleKind schedule = ScheduleKind::kCosine;
  int diffusion_steps = 1000;

  // Dataset provenance; the CLI and harnesses build datasets from these.
  SceneSpec spec;
  int train_count = 200;
  int val_count = 50;
  std::uint64_t train_seed = 1;
  std::uint64_t val_seed = 2;
  double flip_rate = 0.0;
  double dropout_rate = 0.0;

  int batch_size = 4;
  AdamConfig adam;
  CondVariant condition = CondVariant::kFeatures;
  double cfg_dropout = 0.1;
  double lambda_aux = 0.001;
  bool co_train = false;
  bool diffusion_visible_only = false;
  std::string baseline_checkpoint;

  long total_steps = 20000;
  long checkpoint_every = 0;
  long log_every = 50;
  std::uint64_t seed = 0;
  int workers = 1;

  DenoiserConfig denoiser;
  BaselineConfig baseline;

  void validate() const {
    require(diffusion_steps >= 1, "TrainConfig: diffusion_steps must be >= 1");
    require(train_count >= 1 && val_count >= 1, "TrainConfig: dataset counts must be >= 1");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(total_steps >= 0 && checkpoint_every >= 0 && log_every >= 1, "TrainConfig: step counts invalid");
    for (double p : {flip_rate, dropout_rate, cfg_dropout}) {
      require(p >= 0.0 && p <= 1.0, "TrainConfig: probabilities must be in [0,1]");
    }
    require(lambda_aux >= 0.0, "TrainConfig: lambda_aux must be >= 0");
    require(adam.lr > 0.0, "TrainConfig: lr must be positive");
    require(workers >= 1, "TrainConfig: workers must be >= 1");
    require(!co_train || condition == CondVariant::kFeatures, "TrainConfig: co_train requires the c-r condition");
    spec.validate();
  }

  /// Denoiser configuration with the class count and condition width filled in.
  DenoiserConfig resolved_denoiser() const {
    DenoiserConfig d = denoiser;
    d.num_classes = spec.num_classes;
    d.condition = condition;
    d.latent_input = representation == Representation::kGaussian;
    if (condition == CondVariant::kLogits) d.condition_channels = spec.num_classes;
    if (condition == CondVariant::kFeatures) d.condition_channels = baseline.feature_channels;
    return d;
  }
  BaselineConfig resolved_baseline() const {
    BaselineConfig b = baseline;
    b.num_classes = spec.num_classes;
    return b;
  }
  DatasetOptions train_data() const { return {spec, train_count, train_seed, flip_rate, dropout_rate}; }
  DatasetOptions val_data() const { return {spec, val_count, val_seed, flip_rate, dropout_rate}; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"representation", to_string(c.representation)},
                     {"schedule", to_string(c.schedule)},
                     {"diffusion_steps", c.diffusion_steps},
                     {"spec", c.spec},
                     {"train_count", c.train_count},
                     {"val_count", c.val_count},
                     {"train_seed", c.train_seed},
                     {"val_seed", c.val_seed},
                     {"flip_rate", c.flip_rate},
                     {"dropout_rate", c.dropout_rate},
                     {"batch_size", c.batch_size},
                     {"adam", c.adam},
                     {"condition", to_string(c.condition)},
                     {"cfg_dropout", c.cfg_dropout},
                     {"lambda_aux", c.lambda_aux},
                     {"co_train", c.co_train},
                     {"diffusion_visible_only", c.diffusion_visible_only},
                     {"baseline_checkpoint", c.baseline_checkpoint},
                     {"total_steps", c.total_steps},
                     {"checkpoint_every", c.checkpoint_every},
                     {"log_every", c.log_every},
                     {"seed", c.seed},
                     {"denoiser", c.denoiser},
                     {"baseline", c.baseline}};
}

/// Unknown keys are rejected; missing keys keep defaults. `workers` is read
/// but never written, so checkpoints do not depend on the worker count. The schedule
/// defaults to cosine for the discrete path and linear for the Gaussian path.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{
      "representation", "schedule",    "diffusion_steps", "spec",        "train_count",  "val_count",
      "train_seed",     "val_seed",    "flip_rate",       "dropout_rate", "batch_size",  "adam",
      "condition",      "cfg_dropout", "lambda_aux",      "co_train",    "diffusion_visible_only",
      "baseline_checkpoint", "total_steps", "checkpoint_every", "log_every", "seed", "workers", "denoiser",
      "baseline"};
  if (!j.is_object()) throw SpecError("TrainConfig: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw SpecError("TrainConfig: unknown key '" + key + "'");
  }
  c = TrainConfig{};
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  if (j.contains("representation")) c.representation = parse_representation(j.at("representation").get<std::string>());
  c.schedule = c.representation == Representation::kDiscrete ? ScheduleKind::kCosine : ScheduleKind::kLinear;
  if (j.contains("schedule")) c.schedule = parse_schedule_kind(j.at("schedule").get<std::string>());
  opt("diffusion_steps", c.diffusion_steps);
  opt("spec", c.spec);
  opt("train_count", c.train_count);
  opt("val_count", c.val_count);
  opt("train_seed", c.train_seed);
  opt("val_seed", c.val_seed);
  opt("flip_rate", c.flip_rate);
  opt("dropout_rate", c.dropout_rate);
  opt("batch_size", c.batch_size);
  opt("adam", c.adam);
  if (j.contains("condition")) c.condition = parse_cond_variant(j.at("condition").get<std::string>());
  opt("cfg_dropout", c.cfg_dropout);
  opt("lambda_aux", c.lambda_aux);
  opt("co_train", c.co_train);
  opt("diffusion_visible_only", c.diffusion_visible_only);
  opt("baseline_checkpoint", c.baseline_checkpoint);
  opt("total_steps", c.total_steps);
  opt("checkpoint_every", c.checkpoint_every);
  opt("log_every", c.log_every);
  opt("seed", c.seed);
  opt("workers", c.workers);
  opt("denoiser", c.denoiser);
  opt("baseline", c.baseline);
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bin::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw SpecError("config: malformed JSON in " + path.string() + ": " + e.what());
  }
  TrainConfig c = j.get<TrainConfig>();
  c.validate();
  return c;
}

struct LossRow {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

inline std::string loss_curve_csv(const std::vector<LossRow>& rows) {
  std::string out = "step,loss,lr\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g\n", r.step, r.loss, r.lr);
    out += buf;
  }
  return out;
}

struct TrainHooks {
  std::function<void(const LossRow&)> on_log;
  /// Called every checkpoint_every steps with the full resumable state.
  std::function<void(long step, const Checkpoint&)> on_checkpoint;
  /// Stop after this step even if total_steps is larger (0 = run to the end).
  long stop_after = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRow> curve;
};

namespace detail {

template <template <class> class Params>
void add_into(Params<float>& acc, Params<float>& g) {
  auto a = named_tensors<Params<float>, float>(acc);
  auto b = named_tensors<Params<float>, float>(g);
  for (std::size_t i = 0; i < a.size(); ++i) a[i].tensor->m += b[i].tensor->m;
}

template <template <class> class Params>
void store_adam(Checkpoint& ck, const std::string& prefix, Adam<Params>& adam) {
  store_params(ck, "adam.m/" + prefix, adam.m);
  store_params(ck, "adam.v/" + prefix, adam.v);
}

template <template <class> class Params>
void restore_adam(const Checkpoint& ck, const std::string& prefix, Adam<Params>& adam, long step) {
  restore_params(ck, "adam.m/" + prefix, adam.m);
  restore_params(ck, "adam.v/" + prefix, adam.v);
  adam.step = step;
}

/// Mean-over-visible cross-entropy for one scene, already scaled by `weight`.
/// Writes d loss / d logits into d_logits; returns the scaled loss.
inline double visible_ce(const nn::Matrix<float>& logits, const VoxelGrid& target, const VisibilityMask* vis,
                         double weight, nn::Matrix<float>& d_logits) {
  const int k = static_cast<int>(logits.rows());
  const auto n = logits.cols();
  d_logits = nn::Matrix<float>::Zero(k, n);
  double loss = 0.0;
  std::vector<double> p(static_cast<std::size_t>(k));
  for (Eigen::Index v = 0; v < n; ++v) {
    if (vis != nullptr && !vis->visible(static_cast<std::size_t>(v))) continue;
    double mx = -INFINITY;
    for (int c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(logits(c, v)));
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += (p[c] = std::exp(logits(c, v) - mx));
    const int y = target[static_cast<std::size_t>(v)];
    loss += -(logits(y, v) - mx - std::log(sum));
    for (int c = 0; c < k; ++c) d_logits(c, v) = static_cast<float>(weight * (p[c] / sum - (c == y ? 1.0 : 0.0)));
  }
  return loss * weight;
}

inline LogitField<float> to_field(const nn::Matrix<float>& m, Dims d) {
  LogitField<float> f(d, static_cast<int>(m.rows()));
  std::copy(m.data(), m.data() + m.size(), f.data.begin());
  return f;
}

inline nn::Matrix<float> from_field(const LogitField<float>& f) {
  nn::Matrix<float> m(f.k, static_cast<Eigen::Index>(f.voxels()));
  std::copy(f.data.begin(), f.data.end(), m.data());
  return m;
}

inline nn::Matrix<float> latent_matrix(const LatentVolume& z) {
  nn::Matrix<float> m(z.channels, static_cast<Eigen::Index>(z.voxels()));
  for (std::size_t i = 0; i < z.data.size(); ++i) m.data()[i] = static_cast<float>(z.data[i]);
  return m;
}

/// Gaussian-path loss on x0 logits: relaxed prediction a * softmax - a / K is
/// regressed onto z0 (squared error summed over channels, averaged over
/// counted voxels) plus lambda_aux cross-entropy against the labels.
inline double gaussian_x0_loss(const nn::Matrix<float>& logits, const LatentVolume& z0, const VoxelGrid& x0,
                               double lambda_aux, std::span<const std::uint8_t> mask, double weight,
                               nn::Matrix<float>& d_logits) {
  const int k = static_cast<int>(logits.rows());
  const auto n = logits.cols();
  const double a = kRelaxScale;
  d_logits = nn::Matrix<float>::Zero(k, n);
  std::size_t counted = 0;
  for (Eigen::Index v = 0; v < n; ++v) counted += (mask.empty() || mask[static_cast<std::size_t>(v)]) ? 1 : 0;
  if (counted == 0) return 0.0;
  const double inv = weight / static_cast<double>(counted);
  double loss = 0.0;
  std::vector<double> p(static_cast<std::size_t>(k)), g(p.size());
  for (Eigen::Index v = 0; v < n; ++v) {
    const auto vi = static_cast<std::size_t>(v);
    if (!mask.empty() && !mask[vi]) continue;
    double mx = -INFINITY;
    for (int c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(logits(c, v)));
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += (p[c] = std::exp(logits(c, v) - mx));
    for (int c = 0; c < k; ++c) p[c] /= sum;
    double dot = 0.0;
    for (int c = 0; c < k; ++c) {
      const double diff = a * p[c] - a / k - z0(c, vi);
      loss += diff * diff;
      g[c] = 2.0 * diff * a;  // d/dp_c
      dot += p[c] * g[c];
    }
    const int y = x0[vi];
    loss += lambda_aux * -std::log(std::max(p[y], 1e-300));
    for (int c = 0; c < k; ++c) {
      const double d = p[c] * (g[c] - dot) + lambda_aux * (p[c] - (c == y ? 1.0 : 0.0));
      d_logits(c, v) = static_cast<float>(d * inv);
    }
  }
  return loss * inv;
}

}  // namespace detail

// ------------------------------------------------------------------ baseline

inline Checkpoint baseline_checkpoint(const TrainConfig& cfg, BaselineParams<float>& params,
                                      Adam<BaselineParams>* adam, long step) {
  Checkpoint ck;
  ck.meta = {{"kind", "baseline"}, {"config", cfg}, {"baseline", params.config}, {"seed", cfg.seed}, {"step", step}};
  store_params(ck, "baseline/", params);
  if (adam != nullptr) detail::store_adam(ck, "baseline/", *adam);
  return ck;
}

inline BaselineParams<float> load_baseline_params(const Checkpoint& ck) {
  if (!ck.meta.contains("baseline") || ck.meta.at("baseline").is_null() || !ck.has_prefix("baseline/")) {
    throw IoError("ckpt: no baseline parameters");
  }
  BaselineParams<float> p(ck.meta.at("baseline").get<BaselineConfig>());
  restore_params(ck, "baseline/", p);
  return p;
}

/// Minimizes cross-entropy between baseline logits and the training labels
/// over visible voxels.
inline TrainResult train_baseline(const TrainConfig& cfg, const Dataset& data, const TrainHooks& hooks = {},
                                  const Checkpoint* resume = nullptr) {
  cfg.validate();
  require(!data.scenes.empty(), "train_baseline: empty dataset");
  const FlushDenormals ftz;
  BaselineParams<float> params(cfg.resolved_baseline());
  Adam<BaselineParams> adam(params, cfg.adam);
  long start = 0;
  if (resume != nullptr) {
    params = load_baseline_params(*resume);
    start = resume->meta.at("step").get<long>();
    detail::restore_adam(*resume, "baseline/", adam, start);
  } else {
    params.init(derive_seed({cfg.seed, 0xB1ull}));
  }

  TrainResult res;
  const long end = hooks.stop_after > 0 ? std::min(hooks.stop_after, cfg.total_steps) : cfg.total_steps;
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  for (long step = start + 1; step <= end; ++step) {
    Rng rng(derive_seed({cfg.seed, 0xBA5Eull, static_cast<std::uint64_t>(step)}));
    std::vector<std::size_t> idx(B);
    for (auto& i : idx) i = rng.below(data.size());
    std::size_t visible = 0;
    for (auto i : idx) visible += data.scenes[i].vis.count_visible();
    const double weight = 1.0 / static_cast<double>(std::max<std::size_t>(visible, 1));

    std::vector<BaselineParams<float>> grads(B, BaselineParams<float>(params.config));
    std::vector<double> losses(B, 0.0);
    parallel_for(B, cfg.workers, [&](std::size_t b) {
      const Scene& s = data.scenes[idx[b]];
      BaselineCache<float> cache;
      const auto out = baseline_forward(params, s.obs, &cache);
      nn::Matrix<float> d_logits;
      losses[b] = detail::visible_ce(out.logits, s.labels, &s.vis, weight, d_logits);
      baseline_backward(params, cache, nn::Matrix<float>{}, d_logits, grads[b]);
    });
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      loss += losses[b];
      if (b > 0) detail::add_into(grads[0], grads[b]);
    }
    if (!std::isfinite(loss)) throw NumericError("train_baseline: non-finite loss at step " + std::to_string(step));
    adam.update(params, grads[0]);

    if (step == start + 1 || step % cfg.log_every == 0 || step == end) {
      LossRow row{step, loss, cfg.adam.lr};
      res.curve.push_back(row);
      if (hooks.on_log) hooks.on_log(row);
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(step, baseline_checkpoint(cfg, params, &adam, step));
    }
  }
  res.checkpoint = baseline_checkpoint(cfg, params, &adam, std::max(start, end));
  return res;
}

// ----------------------------------------------------------------- diffusion

struct DiffusionState {
  TrainConfig config;
  DenoiserParams<float> denoiser;
  std::optional<BaselineParams<float>> baseline;
  long step = 0;
};

inline Checkpoint diffusion_checkpoint(const TrainConfig& cfg, DenoiserParams<float>& den,
                                       std::optional<BaselineParams<float>>& base, Adam<DenoiserParams>* adam,
                                       Adam<BaselineParams>* base_adam, long step) {
  Checkpoint ck;
  ck.meta = {{"kind", "diffusion"},
             {"config", cfg},
             {"denoiser", den.config},
             {"baseline", base ? nlohmann::json(base->config) : nlohmann::json(nullptr)},
             {"co_trained", cfg.co_train},
             {"seed", cfg.seed},
             {"step", step}};
  store_params(ck, "denoiser/", den);
  if (base) store_params(ck, "baseline/", *base);
  if (adam != nullptr) detail::store_adam(ck, "denoiser/", *adam);
  if (base_adam != nullptr) detail::store_adam(ck, "baseline/", *base_adam);
  return ck;
}

inline DiffusionState load_diffusion_state(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "diffusion") throw IoError("ckpt: not a diffusion checkpoint");
  DiffusionState s;
  s.config = ck.meta.at("config").get<TrainConfig>();
  s.denoiser = DenoiserParams<float>(ck.meta.at("denoiser").get<DenoiserConfig>());
  restore_params(ck, "denoiser/", s.denoiser);
  if (ck.has_prefix("baseline/")) s.baseline = load_baseline_params(ck);
  s.step = ck.meta.at("step").get<long>();
  return s;
}

/// Trains the denoiser. C-PR / C-L (and C-R without co-training) need a
/// frozen baseline; with co_train the baseline is fine-tuned jointly from
/// `baseline` using the diffusion loss plus its own visible-voxel
/// cross-entropy.
inline TrainResult train_diffusion(const TrainConfig& cfg, const Dataset& data,
                                   std::optional<BaselineParams<float>> baseline, const TrainHooks& hooks = {},
                                   const Checkpoint* resume = nullptr) {
  cfg.validate();
  require(!data.scenes.empty(), "train_diffusion: empty dataset");
  const FlushDenormals ftz;
  const bool needs_baseline = cfg.condition != CondVariant::kNull;
  if (needs_baseline && !baseline && resume == nullptr) {
    throw SpecError("train_diffusion: condition " + to_string(cfg.condition) + " needs a baseline checkpoint");
  }
  const DenoiserConfig dcfg = cfg.resolved_denoiser();
  const auto schedule = make_schedule(cfg.schedule, cfg.diffusion_steps);
  const bool gaussian = cfg.representation == Representation::kGaussian;

  DenoiserParams<float> den(dcfg);
  den.init(derive_seed({cfg.seed, 0xD1ull}));
  Adam<DenoiserParams> adam(den, cfg.adam);
  long start = 0;
  if (resume != nullptr) {
    auto st = load_diffusion_state(*resume);
    den = std::move(st.denoiser);
    baseline = std::move(st.baseline);
    start = st.step;
    detail::restore_adam(*resume, "denoiser/", adam, start);
  }
  if (baseline) {
    require(baseline->config.num_classes == dcfg.num_classes, "train_diffusion: baseline class count mismatch");
    if (cfg.condition == CondVariant::kFeatures) {
      require(baseline->config.feature_channels == dcfg.condition_channels,
              "train_diffusion: baseline feature width does not match the denoiser condition");
    }
  }
  std::optional<Adam<BaselineParams>> base_adam;
  if (cfg.co_train) {
    base_adam.emplace(*baseline, cfg.adam);
    if (resume != nullptr) detail::restore_adam(*resume, "baseline/", *base_adam, start);
  }

  // A frozen baseline gives a fixed condition per scene.
  std::vector<Condition<float>> frozen;
  if (needs_baseline && !cfg.co_train) {
    frozen.resize(data.size());
    parallel_for(data.size(), cfg.workers, [&](std::size_t i) {
      frozen[i] = make_condition(cfg.condition, baseline_forward(*baseline, data.scenes[i].obs));
    });
  }

  TrainResult res;
  const long end = hooks.stop_after > 0 ? std::min(hooks.stop_after, cfg.total_steps) : cfg.total_steps;
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (long step = start + 1; step <= end; ++step) {
    Rng rng(derive_seed({cfg.seed, 0xD1FFull, static_cast<std::uint64_t>(step)}));
    struct Item {
      std::size_t scene;
      int t;
      std::uint64_t noise_seed;
      bool drop;
    };
    std::vector<Item> items(B);
    for (auto& it : items) {
      it.scene = rng.below(data.size());
      it.t = rng.range(1, cfg.diffusion_steps);
      it.noise_seed = rng.next();
      it.drop = rng.bernoulli(cfg.cfg_dropout);
    }
    std::size_t visible = 0;
    if (cfg.co_train) {
      for (const auto& it : items) visible += data.scenes[it.scene].vis.count_visible();
    }
    const double ce_weight = 1.0 / static_cast<double>(std::max<std::size_t>(visible, 1));

    std::vector<DenoiserParams<float>> grads(B, DenoiserParams<float>(dcfg));
    std::vector<BaselineParams<float>> base_grads;
    if (cfg.co_train) base_grads.assign(B, BaselineParams<float>(baseline->config));
    std::vector<double> losses(B, 0.0);

    parallel_for(B, cfg.workers, [&](std::size_t b) {
      const Item& it = items[b];
      const Scene& s = data.scenes[it.scene];
      Condition<float> cond;
      BaselineCache<float> bcache;
      BaselineOutput<float> bout;
      if (cfg.co_train) {
        bout = baseline_forward(*baseline, s.obs, &bcache);
        if (!it.drop) cond = make_condition(cfg.condition, bout);
      } else if (needs_baseline && !it.drop) {
        cond = frozen[it.scene];
      }
      const std::vector<std::uint8_t> mask_flags =
          cfg.diffusion_visible_only ? s.vis.flags : std::vector<std::uint8_t>{};

      DenoiserCache<float> cache;
      nn::Matrix<float> d_logits;
      if (!gaussian) {
        const VoxelGrid xt = forward_sample_discrete(s.labels, it.t, schedule, it.noise_seed);
        const nn::Matrix<float> logits = denoise(den, xt, it.t, cond, &cache);
        const auto loss = training_loss_discrete(s.labels, xt, it.t, detail::to_field(logits, xt.dims()), schedule,
                                                 cfg.lambda_aux, mask_flags);
        losses[b] = loss.loss * inv_b;
        d_logits = detail::from_field(loss.grad) * static_cast<float>(inv_b);
      } else {
        const LatentVolume z0 = onehot_relax(s.labels);
        const LatentVolume zt = forward_sample_gaussian(z0, it.t, schedule, it.noise_seed);
        const nn::Matrix<float> logits = denoise_latent(den, detail::latent_matrix(zt), zt.dims, it.t, cond, &cache);
        losses[b] = detail::gaussian_x0_loss(logits, z0, s.labels, cfg.lambda_aux, mask_flags, inv_b, d_logits);
      }
      const auto back = denoise_backward(den, cache, d_logits, grads[b]);
      if (cfg.co_train) {
        nn::Matrix<float> d_base_logits;
        losses[b] += detail::visible_ce(bout.logits, s.labels, &s.vis, ce_weight, d_base_logits);
        baseline_backward(*baseline, bcache, back.d_cond_channels, d_base_logits, base_grads[b]);
      }
    });
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      loss += losses[b];
      if (b > 0) {
        detail::add_into(grads[0], grads[b]);
        if (cfg.co_train) detail::add_into(base_grads[0], base_grads[b]);
      }
    }
    if (!std::isfinite(loss)) throw NumericError("train_diffusion: non-finite loss at step " + std::to_string(step));
    adam.update(den, grads[0]);
    if (cfg.co_train) base_adam->update(*baseline, base_grads[0]);

    if (step == start + 1 || step % cfg.log_every == 0 || step == end) {
      LossRow row{step, loss, cfg.adam.lr};
      res.curve.push_back(row);
      if (hooks.on_log) hooks.on_log(row);
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(step, diffusion_checkpoint(cfg, den, baseline, &adam, base_adam ? &*base_adam : nullptr, step));
    }
  }
  res.checkpoint =
      diffusion_checkpoint(cfg, den, baseline, &adam, base_adam ? &*base_adam : nullptr, std::max(start, end));
  return res;
}

}  // namespace occdiff
