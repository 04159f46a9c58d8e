#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "occdiff/checkpoint.hpp"
#include "occdiff/dataset.hpp"
#include "occdiff/optim.hpp"
#include "occdiff/train.hpp"
#include "tiny.hpp"

using namespace occdiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("occdiff_test_train_" + name);
  fs::remove_all(p);
  return p;
}

std::map<std::string, std::vector<std::uint8_t>> dir_bytes(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = bin::read_file(e.path());
  }
  return out;
}

double visible_accuracy(const BaselineParams<float>& p, const Scene& s) {
  const auto pred = baseline_forward(p, s.obs).prediction;
  std::size_t hit = 0, n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!s.vis.visible(i)) continue;
    ++n;
    hit += pred[i] == s.labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace

// ------------------------------------------------------------------ optimizer

TEST(Adam, FirstStepMovesByLearningRate) {
  BaselineConfig c;
  c.num_classes = 2;
  c.embed_dim = 2;
  c.widths = {2};
  c.feature_channels = 2;
  BaselineParams<float> p(c), g(c);
  AdamConfig ac;
  ac.lr = 0.01;
  ac.clip_norm = 0.0;
  Adam<BaselineParams> adam(p, ac);
  g.obs_embed.m(0, 0) = 0.5f;
  g.obs_embed.m(1, 1) = -2.0f;
  adam.update(p, g);
  EXPECT_NEAR(p.obs_embed.m(0, 0), -0.01, 1e-6);
  EXPECT_NEAR(p.obs_embed.m(1, 1), 0.01, 1e-6);
  EXPECT_EQ(p.obs_embed.m(0, 1), 0.0f);
  EXPECT_EQ(adam.step, 1);
}

TEST(Adam, ClipReturnsPreClipNorm) {
  BaselineConfig c;
  c.num_classes = 2;
  c.embed_dim = 2;
  c.widths = {2};
  c.feature_channels = 2;
  BaselineParams<float> p(c), g(c);
  Adam<BaselineParams> adam(p, AdamConfig{});
  g.obs_embed.m(0, 0) = 3.0f;
  g.obs_embed.m(0, 1) = 4.0f;
  EXPECT_NEAR(adam.update(p, g), 5.0, 1e-6);
  EXPECT_NEAR(adam.m.obs_embed.m(0, 0), 0.1 * 3.0 / 5.0, 1e-6);
}

TEST(Adam, NonFiniteGradientNamesTensor) {
  BaselineConfig c;
  c.num_classes = 2;
  c.embed_dim = 2;
  c.widths = {2};
  c.feature_channels = 2;
  BaselineParams<float> p(c), g(c);
  Adam<BaselineParams> adam(p, AdamConfig{});
  g.classifier.bias.m(0, 0) = NAN;
  try {
    adam.update(p, g);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("classifier.bias"), std::string::npos);
  }
}

// ----------------------------------------------------------------- checkpoint

TEST(Checkpoint, RoundTripGivesBitIdenticalForward) {
  const auto cfg = tiny::config();
  const auto data = generate_dataset(cfg.train_data());
  DenoiserParams<float> den(cfg.resolved_denoiser());
  den.init(3);
  std::optional<BaselineParams<float>> base = BaselineParams<float>(cfg.resolved_baseline());
  base->init(4);
  const auto path = scratch("ckpt.ockp");
  save_checkpoint(path, diffusion_checkpoint(cfg, den, base, nullptr, nullptr, 7));
  const auto st = load_diffusion_state(load_checkpoint(path));
  EXPECT_EQ(st.step, 7);
  ASSERT_TRUE(st.baseline.has_value());
  const auto& obs = data.scenes[0].obs;
  const auto c1 = make_condition(cfg.condition, baseline_forward(*base, obs));
  const auto c2 = make_condition(cfg.condition, baseline_forward(*st.baseline, obs));
  EXPECT_EQ(c1.channels, c2.channels);
  const auto x = data.scenes[1].gt;
  EXPECT_EQ(denoise(den, x, 9, c1), denoise(st.denoiser, x, 9, c2));
  fs::remove(path);
}

TEST(Checkpoint, EncodingIsCanonical) {
  Checkpoint a, b;
  a.meta = {{"x", 1}, {"y", "z"}};
  b.meta = {{"y", "z"}, {"x", 1}};
  a.tensors["b"] = {{2}, {1.0f, 2.0f}};
  a.tensors["a"] = {{1}, {3.0f}};
  b.tensors["a"] = {{1}, {3.0f}};
  b.tensors["b"] = {{2}, {1.0f, 2.0f}};
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
  const auto back = decode_checkpoint(encode_checkpoint(a));
  EXPECT_EQ(back.meta, a.meta);
  EXPECT_EQ(back.tensors.at("b").values, (std::vector<float>{1.0f, 2.0f}));
}

TEST(Checkpoint, CorruptBytesThrow) {
  Checkpoint a;
  a.tensors["w"] = {{4}, {1, 2, 3, 4}};
  auto bytes = encode_checkpoint(a);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), IoError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), IoError);
  EXPECT_THROW(decode_checkpoint({}), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/occdiff.ockp"), IoError);
}

TEST(Checkpoint, ShapeMismatchOnRestoreThrows) {
  const auto cfg = tiny::config();
  BaselineParams<float> p(cfg.resolved_baseline());
  Checkpoint ck;
  store_params(ck, "baseline/", p);
  ck.tensors["baseline/obs_embed"].shape = {1, 1};
  EXPECT_THROW(restore_params(ck, "baseline/", p), IoError);
  ck.tensors.erase("baseline/obs_embed");
  EXPECT_THROW(restore_params(ck, "baseline/", p), IoError);
}

// -------------------------------------------------------------------- dataset

TEST(Dataset, NoCorruptionKeepsGroundTruth) {
  DatasetOptions opt{tiny::spec(), 1, 5, 0.0, 0.0};
  const auto ds = generate_dataset(opt);
  EXPECT_EQ(ds.scenes[0].labels, ds.scenes[0].gt);
  const auto& s = ds.scenes[0];
  for (std::size_t i = 0; i < s.obs.size(); ++i) {
    EXPECT_EQ(s.obs[i], s.vis.visible(i) ? s.labels[i] : tiny::spec().num_classes);
  }
}

TEST(Dataset, SameSeedByteIdentical) {
  DatasetOptions opt{tiny::spec(), 3, 5, 0.05, 0.01};
  const auto a = scratch("ds_a"), b = scratch("ds_b");
  make_dataset(opt, a, 1);
  make_dataset(opt, b, 3);
  EXPECT_EQ(dir_bytes(a), dir_bytes(b));
  const auto loaded = load_dataset(a);
  ASSERT_EQ(loaded.size(), 3u);
  const auto fresh = generate_dataset(opt);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded.scenes[i].gt, fresh.scenes[i].gt);
    EXPECT_EQ(loaded.scenes[i].obs, fresh.scenes[i].obs);
    EXPECT_EQ(loaded.scenes[i].vis.flags, fresh.scenes[i].vis.flags);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, FlipFractionMatchesRate) {
  DatasetOptions opt{SceneSpec{}, 200, 11, 0.05, 0.0};
  const auto ds = generate_dataset(opt);
  std::size_t changed = 0, total = 0;
  for (const auto& s : ds.scenes) {
    for (std::size_t i = 0; i < s.gt.size(); ++i) changed += s.gt[i] != s.labels[i];
    total += s.gt.size();
  }
  EXPECT_NEAR(static_cast<double>(changed) / static_cast<double>(total), 0.05, 0.005);
}

TEST(Dataset, TrainAndValidationAreDisjoint) {
  const auto cfg = tiny::config();
  const auto train = generate_dataset(cfg.train_data());
  const auto val = generate_dataset(cfg.val_data());
  EXPECT_NO_THROW(check_disjoint(train, val));
  EXPECT_THROW(check_disjoint(train, train), SpecError);
}

TEST(Dataset, MissingDirectoryThrows) { EXPECT_THROW(load_dataset("/nonexistent/occdiff_ds"), IoError); }

// ------------------------------------------------------------------- training

TEST(TrainConfig, JsonRoundTripAndUnknownKey) {
  auto cfg = tiny::config(Representation::kGaussian);
  cfg.condition = CondVariant::kLogits;
  const nlohmann::json j = cfg;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  auto bad = j;
  bad["learning_rate"] = 0.1;
  EXPECT_THROW(bad.get<TrainConfig>(), SpecError);
}

TEST(TrainBaseline, InitialLossNearLogK) {
  auto cfg = tiny::config();
  cfg.total_steps = 1;
  const auto data = generate_dataset(cfg.train_data());
  const auto res = train_baseline(cfg, data);
  ASSERT_EQ(res.curve.size(), 1u);
  const double lnk = std::log(cfg.spec.num_classes);
  EXPECT_NEAR(res.curve[0].loss, lnk, 0.1 * lnk);
}

TEST(TrainBaseline, OverfitsOneScene) {
  auto cfg = tiny::config();
  cfg.train_count = 1;
  cfg.batch_size = 1;
  cfg.total_steps = 3000;
  cfg.adam.lr = 1e-2;
  const auto data = generate_dataset(cfg.train_data());
  long reached = -1;
  TrainHooks hooks;
  BaselineParams<float> probe;
  for (long stop = 250; stop <= cfg.total_steps && reached < 0; stop += 250) {
    hooks.stop_after = stop;
    const auto res = train_baseline(cfg, data, hooks);
    if (visible_accuracy(load_baseline_params(res.checkpoint), data.scenes[0]) >= 0.99) reached = stop;
  }
  EXPECT_GT(reached, 0) << "visible accuracy stayed below 99% for 3000 steps";
}

TEST(TrainBaseline, SameSeedIdenticalCheckpoint) {
  auto cfg = tiny::config();
  const auto data = generate_dataset(cfg.train_data());
  const auto a = train_baseline(cfg, data);
  const auto b = train_baseline(cfg, data);
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  cfg.seed += 1;
  EXPECT_NE(encode_checkpoint(train_baseline(cfg, data).checkpoint), encode_checkpoint(a.checkpoint));
}

TEST(TrainBaseline, WorkerCountDoesNotChangeResult) {
  auto cfg = tiny::config();
  cfg.batch_size = 4;
  const auto data = generate_dataset(cfg.train_data());
  const auto a = train_baseline(cfg, data);
  cfg.workers = 4;
  const auto b = train_baseline(cfg, data);
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
}

TEST(TrainBaseline, ResumeMatchesUninterrupted) {
  auto cfg = tiny::config();
  const auto data = generate_dataset(cfg.train_data());
  const auto full = train_baseline(cfg, data);
  TrainHooks hooks;
  hooks.stop_after = 8;
  const auto half = train_baseline(cfg, data, hooks);
  const auto reloaded = decode_checkpoint(encode_checkpoint(half.checkpoint));
  const auto rest = train_baseline(cfg, data, {}, &reloaded);
  EXPECT_EQ(encode_checkpoint(full.checkpoint), encode_checkpoint(rest.checkpoint));
}

TEST(TrainDiffusion, OracleDenoiserLossVanishes) {
  const auto cfg = tiny::config();
  const auto data = generate_dataset(cfg.train_data());
  const auto sched = make_schedule(cfg.schedule, cfg.diffusion_steps);
  const auto& x0 = data.scenes[0].labels;
  const int k = cfg.spec.num_classes;
  double worst = 0.0;
  for (int t : {1, 2, 10, 25, 50}) {
    const auto xt = forward_sample_discrete(x0, t, sched, 99 + t);
    LogitField<float> oracle(x0.dims(), k);
    for (std::size_t v = 0; v < x0.size(); ++v)
      for (int c = 0; c < k; ++c) oracle(c, v) = c == x0[v] ? 0.0f : -60.0f;
    worst = std::max(worst, training_loss_discrete(x0, xt, t, oracle, sched, 0.0, {}).loss);
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(TrainDiffusion, ConditionedVariantNeedsBaseline) {
  const auto cfg = tiny::config();
  const auto data = generate_dataset(cfg.train_data());
  EXPECT_THROW(train_diffusion(cfg, data, std::nullopt), SpecError);
}

TEST(TrainDiffusion, OverfitsOneScene) {
  auto cfg = tiny::config();
  cfg.condition = CondVariant::kNull;
  cfg.cfg_dropout = 0.0;
  cfg.train_count = 1;
  cfg.batch_size = 4;
  cfg.total_steps = 2000;
  cfg.log_every = 1;
  cfg.adam.lr = 1e-2;
  const auto data = generate_dataset(cfg.train_data());
  const auto res = train_diffusion(cfg, data, std::nullopt);
  // Moving average over 50 steps of the (per-step, t-randomized) loss.
  double best = INFINITY, window = 0.0;
  for (std::size_t i = 0; i < res.curve.size(); ++i) {
    window += res.curve[i].loss;
    if (i >= 50) window -= res.curve[i - 50].loss;
    if (i >= 49) best = std::min(best, window / 50.0);
  }
  EXPECT_LT(best, 0.05);
}

TEST(TrainDiffusion, DeterministicAcrossWorkersAndResume) {
  for (auto rep : {Representation::kDiscrete, Representation::kGaussian}) {
    auto cfg = tiny::config(rep);
    cfg.batch_size = 4;
    cfg.co_train = true;
    const auto data = generate_dataset(cfg.train_data());
    BaselineParams<float> base(cfg.resolved_baseline());
    base.init(5);
    const auto full = train_diffusion(cfg, data, base);

    TrainHooks hooks;
    hooks.stop_after = 9;
    const auto half = train_diffusion(cfg, data, base, hooks);
    const auto reloaded = decode_checkpoint(encode_checkpoint(half.checkpoint));
    const auto rest = train_diffusion(cfg, data, std::nullopt, {}, &reloaded);
    EXPECT_EQ(encode_checkpoint(full.checkpoint), encode_checkpoint(rest.checkpoint)) << to_string(rep);

    cfg.workers = 4;
    const auto par = train_diffusion(cfg, data, base);
    EXPECT_EQ(encode_checkpoint(full.checkpoint), encode_checkpoint(par.checkpoint)) << to_string(rep);
  }
}

TEST(TrainDiffusion, FrozenBaselineIsStoredUnchanged) {
  auto cfg = tiny::config();
  cfg.condition = CondVariant::kLogits;
  cfg.total_steps = 3;
  const auto data = generate_dataset(cfg.train_data());
  BaselineParams<float> base(cfg.resolved_baseline());
  base.init(5);
  const auto res = train_diffusion(cfg, data, base);
  const auto st = load_diffusion_state(res.checkpoint);
  ASSERT_TRUE(st.baseline.has_value());
  EXPECT_EQ(st.baseline->classifier.weight.m, base.classifier.weight.m);
  EXPECT_EQ(st.denoiser.config.condition_channels, cfg.spec.num_classes);
}

TEST(TrainDiffusion, LossCurveCsv) {
  const std::vector<LossRow> rows{{1, 2.5, 0.001}, {50, 0.25, 0.001}};
  EXPECT_EQ(loss_curve_csv(rows), "step,loss,lr\n1,2.5,0.001\n50,0.25,0.001\n");
}
