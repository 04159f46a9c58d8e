// occdiff: data generation, training, sampling, evaluation, sweeps and slice
// rendering for the synthetic occupancy benchmark.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "occdiff/checkpoint.hpp"
#include "occdiff/dataset.hpp"
#include "occdiff/experiment.hpp"
#include "occdiff/render.hpp"
#include "occdiff/train.hpp"

using namespace occdiff;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  try {
    return json::parse(bin::read_text(path));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

std::string sample_name(int m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%03d.voxg", m);
  return buf;
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::string spec, out;
  int n = 0;
  std::uint64_t seed = 0;
  double flip = 0.0, dropout = 0.0;
  int workers = 1;
};

void gen_data(const GenArgs& a) {
  DatasetOptions opt;
  if (!a.spec.empty()) opt.spec = read_json(a.spec).get<SceneSpec>();
  opt.count = a.n;
  opt.seed = a.seed;
  opt.flip_rate = a.flip;
  opt.dropout_rate = a.dropout;
  const auto ds = make_dataset(opt, a.out, a.workers);
  std::cout << "wrote " << ds.size() << " scenes to " << a.out << "\n";
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, curve, resume, val, baseline;
  std::optional<std::uint64_t> seed;
  int workers = 1;
};

/// The config's dataset fields are replaced by what the manifest records, so
/// the stored config always describes the data the model actually saw.
TrainConfig resolve_config(const TrainArgs& a, const Dataset& data) {
  TrainConfig cfg = load_train_config(a.config);
  const auto& m = data.manifest;
  cfg.spec = data.spec;
  cfg.train_count = static_cast<int>(data.size());
  cfg.train_seed = m.at("seed").get<std::uint64_t>();
  cfg.flip_rate = m.at("flip_rate").get<double>();
  cfg.dropout_rate = m.at("dropout_rate").get<double>();
  if (!a.val.empty()) {
    const auto val = load_dataset(a.val);
    check_disjoint(data, val);
    cfg.val_count = static_cast<int>(val.size());
    cfg.val_seed = val.manifest.at("seed").get<std::uint64_t>();
  }
  if (a.seed) cfg.seed = *a.seed;
  cfg.workers = a.workers;
  cfg.validate();
  return cfg;
}

TrainHooks make_hooks(const TrainConfig& cfg, const std::string& out) {
  TrainHooks h;
  h.on_log = [](const LossRow& r) { std::cout << "step " << r.step << " loss " << r.loss << "\n" << std::flush; };
  if (cfg.checkpoint_every > 0) {
    h.on_checkpoint = [out](long step, const Checkpoint& ck) {
      save_checkpoint(out + ".step" + std::to_string(step), ck);
    };
  }
  return h;
}

void finish_training(const TrainArgs& a, const TrainResult& res) {
  ensure_parent(a.out);
  save_checkpoint(a.out, res.checkpoint);
  const std::string curve = a.curve.empty() ? a.out + ".loss.csv" : a.curve;
  ensure_parent(curve);
  bin::write_text(curve, loss_curve_csv(res.curve));
  std::cout << "wrote " << a.out << " and " << curve << "\n";
}

void train_baseline_cmd(const TrainArgs& a) {
  const auto data = load_dataset(a.data);
  const TrainConfig cfg = resolve_config(a, data);
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);
  finish_training(a, train_baseline(cfg, data, make_hooks(cfg, a.out), resume ? &*resume : nullptr));
}

void train_diffusion_cmd(const TrainArgs& a) {
  const auto data = load_dataset(a.data);
  TrainConfig cfg = resolve_config(a, data);
  if (!a.baseline.empty()) cfg.baseline_checkpoint = a.baseline;
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);
  std::optional<BaselineParams<float>> base;
  if (!resume && !cfg.baseline_checkpoint.empty()) base = load_baseline_params(load_checkpoint(cfg.baseline_checkpoint));
  finish_training(a, train_diffusion(cfg, data, std::move(base), make_hooks(cfg, a.out), resume ? &*resume : nullptr));
}

// ------------------------------------------------------------------ sample

struct SampleArgs {
  std::string ckpt, scene, out;
  int steps = 10;
  double cfg_scale = 3.5;
  std::string guidance = "cfg";
  double cg_temperature = 1.0;
  int n_samples = 1;
  std::uint64_t seed = 0;
  int workers = 1;
};

/// A dataset directory, one scene directory, or a bare observation grid.
Dataset load_observations(const fs::path& p) {
  if (fs::is_directory(p) && fs::exists(p / "manifest.json")) return load_dataset(p);
  Dataset ds;
  Scene s;
  if (fs::is_directory(p)) {
    s.id = p.filename().string();
    s.obs = load_grid(p / "obs.voxg");
  } else {
    s.id = p.filename() == "obs.voxg" ? p.parent_path().filename().string() : p.stem().string();
    s.obs = load_grid(p);
  }
  if (s.id.empty()) s.id = "scene";
  ds.scenes.push_back(std::move(s));
  return ds;
}

void sample_cmd(const SampleArgs& a) {
  const Predictor model = Predictor::from_checkpoint(load_checkpoint(a.ckpt));
  const Dataset scenes = load_observations(a.scene);
  SampleOptions opt;
  opt.num_steps = a.steps;
  opt.guidance_scale = a.cfg_scale;
  opt.guidance = parse_guidance(a.guidance);
  opt.cg_temperature = a.cg_temperature;
  if (!model.is_baseline()) {
    require(opt.num_steps <= model.schedule.steps(),
            "sample: --steps must not exceed the trained T=" + std::to_string(model.schedule.steps()));
  }
  const auto samples = sample_dataset(model, scenes, opt, a.seed, a.n_samples, a.workers);
  json ids = json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const fs::path dir = fs::path(a.out) / scenes.scenes[i].id;
    ensure_dir(dir);
    for (int m = 0; m < a.n_samples; ++m) save_grid(dir / sample_name(m), samples[i][static_cast<std::size_t>(m)]);
    ids.push_back(scenes.scenes[i].id);
  }
  const json meta = {{"checkpoint", fs::path(a.ckpt).stem().string()},
                     {"model", model.is_baseline() ? "baseline" : to_string(model.config.representation)},
                     {"num_steps", opt.num_steps},
                     {"guidance", to_string(opt.guidance)},
                     {"guidance_scale", opt.guidance_scale},
                     {"cg_temperature", opt.cg_temperature},
                     {"n_samples", a.n_samples},
                     {"seed", a.seed},
                     {"scenes", ids}};
  bin::write_text(fs::path(a.out) / "sample_meta.json", meta.dump(2) + "\n");
  std::cout << "wrote " << a.n_samples << " sample(s) for " << scenes.size() << " scene(s) to " << a.out << "\n";
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string pred, gt, masks, train, out;
  int sample = 0;
  bool include_free = false;
};

std::string meta_string(const json& j, const char* key) {
  if (!j.contains(key)) return "";
  return j.at(key).is_string() ? j.at(key).get<std::string>() : j.at(key).dump();
}

void eval_cmd(const EvalArgs& a) {
  Dataset gt = load_dataset(a.gt);
  if (!a.masks.empty() && fs::path(a.masks) != fs::path(a.gt)) {
    for (auto& s : gt.scenes) {
      s.vis = load_mask(fs::path(a.masks) / s.id / "vis.voxm");
      require(s.vis.dims == s.gt.dims(), "eval: mask dims mismatch for " + s.id);
    }
  }
  const auto vis_prob = visibility_probability(a.train.empty() ? gt : load_dataset(a.train));

  // Every available sample per scene, so diversity can be reported too.
  std::vector<std::vector<VoxelGrid>> samples(gt.size());
  std::size_t common = SIZE_MAX;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const fs::path dir = fs::path(a.pred) / gt.scenes[i].id;
    for (int m = 0; fs::exists(dir / sample_name(m)); ++m) samples[i].push_back(load_grid(dir / sample_name(m)));
    if (static_cast<std::size_t>(a.sample) >= samples[i].size()) {
      throw IoError("eval: missing " + (dir / sample_name(a.sample)).string());
    }
    common = std::min(common, samples[i].size());
  }
  std::vector<VoxelGrid> preds;
  for (const auto& s : samples) preds.push_back(s[static_cast<std::size_t>(a.sample)]);

  MaskedSuiteOptions opt;
  opt.include_free = a.include_free;
  auto reports = evaluate_dataset(preds, gt, vis_prob, opt);

  const fs::path meta_path = fs::path(a.pred) / "sample_meta.json";
  const json meta = fs::exists(meta_path) ? read_json(meta_path) : json::object();
  std::string checkpoint = meta_string(meta, "checkpoint");
  if (checkpoint.empty()) checkpoint = fs::path(a.pred).filename().string();
  const std::string dataset = fs::path(a.gt).filename().string();
  for (auto& r : reports) {
    r.metadata["checkpoint"] = checkpoint;
    r.metadata["dataset"] = dataset;
    r.metadata["sample"] = std::to_string(a.sample);
    for (const char* key : {"num_steps", "guidance", "guidance_scale"}) {
      if (meta.contains(key)) r.metadata[key] = meta_string(meta, key);
    }
  }

  const fs::path out(a.out);
  ensure_parent(out);
  bin::write_text(out, reports_to_csv(reports));
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  for (const auto& r : reports) {
    bin::write_text(dir / (checkpoint + "_" + dataset + "_" + r.mask_name + ".csv"), reports_to_csv({r}));
  }
  json j;
  j["reports"] = json::array();
  for (const auto& r : reports) j["reports"].push_back(report_to_json(r));
  if (common >= 2) {
    std::vector<std::vector<VoxelGrid>> trimmed(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) trimmed[i].assign(samples[i].begin(), samples[i].begin() + common);
    const auto d = diversity_by_visibility(trimmed, gt);
    j["diversity"] = {{"samples", common},
                      {"scenes", d.scenes},
                      {"entropy_invisible", d.invisible},
                      {"entropy_visible", d.visible}};
  }
  fs::path json_path = out;
  json_path.replace_extension(".json");
  bin::write_text(json_path, j.dump(2) + "\n");
  for (const auto& r : reports) {
    std::cout << r.mask_name << " miou " << (r.miou ? format_number(*r.miou) : std::string("absent")) << "\n";
  }
}

// ------------------------------------------------------------------- sweep

struct SweepArgs {
  std::string config, param, out;
  std::vector<double> values;
  std::uint64_t seed = 0;
  int workers = 1;
};

void sweep_cmd(const SweepArgs& a) {
  const json c = read_json(a.config);
  static const std::set<std::string> known{"checkpoint", "data", "train_data", "steps", "cfg_scale", "guidance",
                                           "cg_temperature"};
  for (const auto& [key, _] : c.items()) {
    if (!known.count(key)) throw SpecError("sweep: unknown config key '" + key + "'");
  }
  if (!c.contains("checkpoint") || !c.contains("data")) throw SpecError("sweep: config needs checkpoint and data");
  const Predictor model = Predictor::from_checkpoint(load_checkpoint(c.at("checkpoint").get<std::string>()));
  const Dataset data = load_dataset(c.at("data").get<std::string>());
  const auto vis_prob =
      visibility_probability(c.contains("train_data") ? load_dataset(c.at("train_data").get<std::string>()) : data);
  SampleOptions opt;
  opt.num_steps = c.value("steps", opt.num_steps);
  opt.guidance_scale = c.value("cfg_scale", opt.guidance_scale);
  opt.guidance = parse_guidance(c.value("guidance", to_string(opt.guidance)));
  opt.cg_temperature = c.value("cg_temperature", opt.cg_temperature);
  const SweepParam param = parse_sweep_param(a.param);
  const auto rows = run_sweep(model, data, vis_prob, opt, param, a.values, a.seed, a.workers);
  ensure_parent(a.out);
  bin::write_text(a.out, sweep_to_csv(param, rows));
  for (const auto& r : rows) {
    const auto& all = find_report(r.reports, "all");
    std::cout << a.param << " " << r.value << " miou " << (all.miou ? format_number(*all.miou) : "absent") << "\n";
  }
}

// ----------------------------------------------------------- render-slices

void write_png(const fs::path& path, const SliceImage& img) {
  FILE* f = std::fopen(path.string().c_str(), "wb");
  if (f == nullptr) throw IoError("render: cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw IoError("render: libpng failed writing " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int row = 0; row < img.height; ++row) {
    png_write_row(png, img.rgb.data() + static_cast<std::size_t>(row) * img.width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(f) != 0) throw IoError("render: cannot close " + path.string());
}

struct RenderArgs {
  std::string grid, out;
  std::string axis = "z";
  int scale = 8;
};

void render_cmd(const RenderArgs& a) {
  require(a.axis.size() == 1, "render: axis must be x, y or z");
  const SliceAxis axis = parse_axis(a.axis[0]);
  const VoxelGrid g = load_grid(a.grid);
  ensure_dir(a.out);
  const int n = slice_count(g, axis);
  for (int i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%c%03d.png", a.axis[0], i);
    write_png(fs::path(a.out) / name, render_slice(g, axis, i, a.scale));
  }
  std::cout << "wrote " << n << " slices to " << a.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occdiff: diffusion models for semantic occupancy on synthetic voxel scenes"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
  c_gen->add_option("--spec", gen.spec, "scene spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  c_gen->add_option("--n", gen.n, "number of scenes")->required()->check(CLI::PositiveNumber);
  c_gen->add_option("--seed", gen.seed, "dataset seed")->required();
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--flip-rate", gen.flip, "label flip probability")->check(CLI::Range(0.0, 1.0));
  c_gen->add_option("--dropout-rate", gen.dropout, "visible voxel dropout probability")->check(CLI::Range(0.0, 1.0));
  c_gen->add_option("--workers", gen.workers)->check(CLI::PositiveNumber);

  TrainArgs tb, td;
  auto add_train = [&](CLI::App* c, TrainArgs& t) {
    c->add_option("--config", t.config, "training config JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--data", t.data, "training dataset directory")->required();
    c->add_option("--out", t.out, "checkpoint path")->required();
    c->add_option("--seed", t.seed, "training seed (overrides the config)")->required();
    c->add_option("--workers", t.workers)->check(CLI::PositiveNumber);
    c->add_option("--curve", t.curve, "loss curve CSV (default <out>.loss.csv)");
    c->add_option("--resume", t.resume, "resume from a checkpoint");
    c->add_option("--val", t.val, "validation dataset, checked to be disjoint from --data");
  };
  auto* c_tb = app.add_subcommand("train-baseline", "train the discriminative baseline");
  add_train(c_tb, tb);
  auto* c_td = app.add_subcommand("train-diffusion", "train a diffusion denoiser");
  add_train(c_td, td);
  c_td->add_option("--baseline", td.baseline, "baseline checkpoint for the condition");

  SampleArgs sa;
  auto* c_sa = app.add_subcommand("sample", "sample occupancy grids from observations");
  c_sa->add_option("--ckpt", sa.ckpt)->required()->check(CLI::ExistingFile);
  c_sa->add_option("--scene", sa.scene, "observation .voxg, scene directory, or dataset directory")
      ->required()
      ->check(CLI::ExistingPath);
  c_sa->add_option("--steps", sa.steps, "reverse steps")->check(CLI::Range(1, 1 << 30));
  c_sa->add_option("--cfg-scale", sa.cfg_scale);
  c_sa->add_option("--guidance", sa.guidance)->check(CLI::IsMember({"none", "cfg", "cg"}));
  c_sa->add_option("--cg-temperature", sa.cg_temperature)->check(CLI::PositiveNumber);
  c_sa->add_option("--n-samples", sa.n_samples)->check(CLI::PositiveNumber);
  c_sa->add_option("--seed", sa.seed)->required();
  c_sa->add_option("--out", sa.out)->required();
  c_sa->add_option("--workers", sa.workers)->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "score sampled grids against ground truth");
  c_ev->add_option("--pred", ev.pred, "sample output directory")->required()->check(CLI::ExistingDirectory);
  c_ev->add_option("--gt", ev.gt, "ground-truth dataset directory")->required()->check(CLI::ExistingDirectory);
  c_ev->add_option("--masks", ev.masks, "directory holding <scene>/vis.voxm (default --gt)");
  c_ev->add_option("--train", ev.train, "training dataset for visibility probability (default --gt)");
  c_ev->add_option("--out", ev.out, "report CSV")->required();
  c_ev->add_option("--sample", ev.sample, "which sample to score")->check(CLI::NonNegativeNumber);
  c_ev->add_flag("--include-free", ev.include_free, "count FREE in the mean");

  SweepArgs sw;
  auto* c_sw = app.add_subcommand("sweep", "evaluate one model over a list of parameter values");
  c_sw->add_option("--config", sw.config, "sweep JSON")->required()->check(CLI::ExistingFile);
  c_sw->add_option("--param", sw.param)->required()->check(CLI::IsMember({"cfg-scale", "steps"}));
  c_sw->add_option("--values", sw.values)->required()->delimiter(',');
  c_sw->add_option("--out", sw.out)->required();
  c_sw->add_option("--seed", sw.seed)->required();
  c_sw->add_option("--workers", sw.workers)->check(CLI::PositiveNumber);

  RenderArgs rs;
  auto* c_rs = app.add_subcommand("render-slices", "write one PNG per slice of a grid");
  c_rs->add_option("--grid", rs.grid)->required()->check(CLI::ExistingFile);
  c_rs->add_option("--axis", rs.axis)->check(CLI::IsMember({"x", "y", "z"}));
  c_rs->add_option("--out", rs.out)->required();
  c_rs->add_option("--scale", rs.scale, "pixels per voxel")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*c_gen) gen_data(gen);
    if (*c_tb) train_baseline_cmd(tb);
    if (*c_td) train_diffusion_cmd(td);
    if (*c_sa) sample_cmd(sa);
    if (*c_ev) eval_cmd(ev);
    if (*c_sw) sweep_cmd(sw);
    if (*c_rs) render_cmd(rs);
  } catch (const SpecError& e) {
    std::cerr << "occdiff: " << e.what() << "\n";
    return 1;
  } catch (const UnsupportedError& e) {
    std::cerr << "occdiff: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "occdiff: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
