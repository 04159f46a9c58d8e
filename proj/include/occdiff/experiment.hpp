#pragma once

// Dataset-level evaluation and parameter sweeps shared by the CLI and the
// acceptance harness.

#include <cstdint>
#include <string>
#include <vector>

#include "occdiff/dataset.hpp"
#include "occdiff/eval.hpp"
#include "occdiff/parallel.hpp"
#include "occdiff/sampler.hpp"

namespace occdiff {

/// Per-scene, per-sample seed used by every sampling entry point.
inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t scene, std::size_t sample) {
  return derive_seed({seed, 0x9ED1ull, scene, sample});
}

/// samples[i][m] is sample m of scene i.
inline std::vector<std::vector<VoxelGrid>> sample_dataset(const Predictor& model, const Dataset& data,
                                                          const SampleOptions& opt, std::uint64_t seed, int n_samples,
                                                          int workers = 1) {
  require(n_samples >= 1, "sample: n-samples must be >= 1");
  const std::size_t m = static_cast<std::size_t>(n_samples);
  std::vector<std::vector<VoxelGrid>> out(data.size(), std::vector<VoxelGrid>(m));
  parallel_for(data.size() * m, workers, [&](std::size_t job) {
    const std::size_t i = job / m, s = job % m;
    out[i][s] = model.predict(data.scenes[i].obs, opt, sample_seed(seed, i, s));
  });
  return out;
}

/// Masked-suite reports accumulated over the whole dataset (IoU counts are
/// summed over scenes before dividing).
inline std::vector<MetricsReport> evaluate_dataset(const std::vector<VoxelGrid>& preds, const Dataset& data,
                                                   const std::vector<double>& vis_prob,
                                                   const MaskedSuiteOptions& opt = {}) {
  require(preds.size() == data.size(), "eval: prediction count does not match the dataset");
  MaskedSuiteAccumulator acc(data.spec.num_classes, opt);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Scene& s = data.scenes[i];
    require(preds[i].dims() == s.gt.dims(), "eval: prediction dims mismatch for " + s.id);
    acc.add(preds[i], s.gt, s.vis, data.spec.sensor, &vis_prob);
  }
  return acc.reports();
}

inline const MetricsReport& find_report(const std::vector<MetricsReport>& reports, const std::string& mask) {
  for (const auto& r : reports)
    if (r.mask_name == mask) return r;
  throw SpecError("eval: no report for mask '" + mask + "'");
}

/// mIoU in percent points; an absent mean counts as 0.
inline double miou_points(const std::vector<MetricsReport>& reports, const std::string& mask) {
  const auto& r = find_report(reports, mask);
  return r.miou ? 100.0 * *r.miou : 0.0;
}

/// Mean per-voxel sample entropy inside the invisible and visible regions,
/// averaged over scenes.
struct DiversityResult {
  double invisible = 0.0;
  double visible = 0.0;
  std::size_t scenes = 0;
};

inline DiversityResult diversity_by_visibility(const std::vector<std::vector<VoxelGrid>>& samples,
                                               const Dataset& data) {
  require(samples.size() == data.size(), "diversity: sample count does not match the dataset");
  DiversityResult out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    VisibilityMask invisible = data.scenes[i].vis;
    for (auto& f : invisible.flags) f = f ? 0 : 1;
    const auto d = sample_diversity(samples[i], &invisible);
    if (d.inside == 0 || d.outside == 0) continue;
    out.invisible += d.mean_inside;
    out.visible += d.mean_outside;
    ++out.scenes;
  }
  if (out.scenes > 0) {
    out.invisible /= static_cast<double>(out.scenes);
    out.visible /= static_cast<double>(out.scenes);
  }
  return out;
}

enum class SweepParam { kCfgScale, kSteps };

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "cfg-scale") return SweepParam::kCfgScale;
  if (s == "steps") return SweepParam::kSteps;
  throw SpecError("sweep: --param must be cfg-scale or steps");
}

inline std::string to_string(SweepParam p) { return p == SweepParam::kCfgScale ? "cfg-scale" : "steps"; }

struct SweepRow {
  double value = 0.0;
  std::vector<MetricsReport> reports;
};

/// One dataset evaluation per value; every other option stays fixed.
inline std::vector<SweepRow> run_sweep(const Predictor& model, const Dataset& data, const std::vector<double>& vis_prob,
                                       SampleOptions base, SweepParam param, const std::vector<double>& values,
                                       std::uint64_t seed, int workers = 1) {
  std::vector<SweepRow> rows;
  for (double v : values) {
    SampleOptions opt = base;
    if (param == SweepParam::kCfgScale) {
      opt.guidance_scale = v;
    } else {
      require(v >= 1.0 && v == static_cast<int>(v), "sweep: step counts must be positive integers");
      opt.num_steps = static_cast<int>(v);
    }
    const auto samples = sample_dataset(model, data, opt, seed, 1, workers);
    std::vector<VoxelGrid> preds;
    preds.reserve(samples.size());
    for (const auto& s : samples) preds.push_back(s.front());
    rows.push_back({v, evaluate_dataset(preds, data, vis_prob)});
  }
  return rows;
}

inline std::string sweep_to_csv(SweepParam param, const std::vector<SweepRow>& rows) {
  std::string out = "param,value";
  if (!rows.empty()) {
    for (const auto& r : rows.front().reports) out += ",miou_" + r.mask_name;
  }
  out += "\n";
  for (const auto& row : rows) {
    std::ostringstream v;
    v << row.value;
    out += to_string(param) + "," + v.str();
    for (const auto& r : row.reports) out += "," + (r.miou ? format_number(*r.miou) : std::string("absent"));
    out += "\n";
  }
  return out;
}

}  // namespace occdiff
