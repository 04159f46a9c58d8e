#pragma once

// On-disk scene datasets.
//
//   DIR/manifest.json
//   DIR/scene_0000/{gt.voxg, labels.voxg, vis.voxm, obs.voxg, meta.json}
//
// gt is the clean scene, labels the corrupted training target, vis the sensor
// visibility mask, obs the baseline input (labels where visible, UNKNOWN
// elsewhere). Every scene is a pure function of (spec, dataset seed, index).

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occdiff/binary_io.hpp"
#include "occdiff/error.hpp"
#include "occdiff/eval.hpp"
#include "occdiff/parallel.hpp"
#include "occdiff/rng.hpp"
#include "occdiff/voxel.hpp"
#include "occdiff/voxel_io.hpp"

namespace occdiff {

struct DatasetOptions {
  SceneSpec spec;
  int count = 1;
  std::uint64_t seed = 0;
  double flip_rate = 0.0;
  double dropout_rate = 0.0;
};

struct Scene {
  std::string id;
  std::uint64_t seed = 0;
  VoxelGrid gt;
  VoxelGrid labels;
  VisibilityMask vis;
  VoxelGrid obs;
};

struct Dataset {
  nlohmann::json manifest;
  SceneSpec spec;
  std::vector<Scene> scenes;

  std::size_t size() const noexcept { return scenes.size(); }
};

inline std::string scene_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d", index);
  return buf;
}

inline std::uint64_t scene_seed(std::uint64_t dataset_seed, int index) {
  return derive_seed({dataset_seed, 0x5CE7Eull, static_cast<std::uint64_t>(index)});
}

inline Scene build_scene(const DatasetOptions& opt, int index) {
  Scene s;
  s.id = scene_id(index);
  s.seed = scene_seed(opt.seed, index);
  s.gt = generate_scene(opt.spec, s.seed);
  s.vis = compute_visibility(s.gt, opt.spec.sensor, opt.spec.max_range);
  s.labels = corrupt_labels(s.gt, opt.flip_rate, opt.dropout_rate, derive_seed({s.seed, 0x1AB5ull}));
  s.obs = make_observation(s.labels, s.vis);
  return s;
}

/// Builds the scenes in memory.
inline Dataset generate_dataset(const DatasetOptions& opt, int workers = 1) {
  require(opt.count >= 1, "make_dataset: n must be >= 1");
  opt.spec.validate();
  Dataset ds;
  ds.spec = opt.spec;
  ds.scenes.resize(static_cast<std::size_t>(opt.count));
  parallel_for(ds.scenes.size(), workers, [&](std::size_t i) { ds.scenes[i] = build_scene(opt, static_cast<int>(i)); });
  ds.manifest = {{"format", "occdiff-dataset"},
                 {"version", 1},
                 {"spec", opt.spec},
                 {"count", opt.count},
                 {"seed", opt.seed},
                 {"flip_rate", opt.flip_rate},
                 {"dropout_rate", opt.dropout_rate}};
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : ds.scenes) list.push_back({{"id", s.id}, {"seed", s.seed}});
  ds.manifest["scenes"] = list;
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("make_dataset: cannot create " + dir.string() + ": " + ec.message());
  bin::write_text(dir / "manifest.json", ds.manifest.dump(2) + "\n");
  for (const auto& s : ds.scenes) {
    const auto sd = dir / s.id;
    std::filesystem::create_directories(sd, ec);
    if (ec) throw IoError("make_dataset: cannot create " + sd.string());
    save_grid(sd / "gt.voxg", s.gt);
    save_grid(sd / "labels.voxg", s.labels);
    save_mask(sd / "vis.voxm", s.vis);
    save_grid(sd / "obs.voxg", s.obs);
    std::size_t changed = 0;
    for (std::size_t v = 0; v < s.gt.size(); ++v) changed += s.gt[v] != s.labels[v];
    const nlohmann::json meta = {{"id", s.id},
                                 {"seed", s.seed},
                                 {"visible_voxels", s.vis.count_visible()},
                                 {"corrupted_voxels", changed},
                                 {"voxels", s.gt.size()}};
    bin::write_text(sd / "meta.json", meta.dump(2) + "\n");
  }
}

/// Generates and writes n scenes into dir.
inline Dataset make_dataset(const DatasetOptions& opt, const std::filesystem::path& dir, int workers = 1) {
  Dataset ds = generate_dataset(opt, workers);
  save_dataset(ds, dir);
  return ds;
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("dataset: no manifest.json in " + dir.string());
  try {
    return nlohmann::json::parse(bin::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("dataset: malformed manifest: " + std::string(e.what()));
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir);
  if (ds.manifest.value("format", "") != "occdiff-dataset") throw IoError("dataset: unknown manifest format");
  ds.manifest.at("spec").get_to(ds.spec);
  for (const auto& e : ds.manifest.at("scenes")) {
    Scene s;
    s.id = e.at("id").get<std::string>();
    s.seed = e.at("seed").get<std::uint64_t>();
    const auto sd = dir / s.id;
    s.gt = load_grid(sd / "gt.voxg");
    s.labels = load_grid(sd / "labels.voxg");
    s.vis = load_mask(sd / "vis.voxm");
    s.obs = load_grid(sd / "obs.voxg");
    if (!(s.labels.dims() == s.gt.dims()) || !(s.vis.dims == s.gt.dims()) || !(s.obs.dims() == s.gt.dims())) {
      throw IoError("dataset: inconsistent dims in " + s.id);
    }
    ds.scenes.push_back(std::move(s));
  }
  if (ds.scenes.empty()) throw IoError("dataset: manifest lists no scenes");
  return ds;
}

/// Throws if the two datasets share any scene seed.
inline void check_disjoint(const Dataset& train, const Dataset& val) {
  std::set<std::uint64_t> seeds;
  for (const auto& s : train.scenes) seeds.insert(s.seed);
  for (const auto& s : val.scenes) {
    if (seeds.count(s.seed)) throw SpecError("dataset: validation scene " + s.id + " also appears in training data");
  }
}

inline std::vector<double> visibility_probability(const Dataset& ds) {
  std::vector<VisibilityMask> masks;
  masks.reserve(ds.size());
  for (const auto& s : ds.scenes) masks.push_back(s.vis);
  return visibility_probability(masks);
}

}  // namespace occdiff
