#pragma once

// Masked IoU metrics, sub-region suites, visibility statistics, and sample
// diversity.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occdiff/error.hpp"
#include "occdiff/voxel.hpp"

namespace occdiff {

/// Per-class intersection/union counts, accumulated over any number of scenes.
class IoUAccumulator {
 public:
  explicit IoUAccumulator(int num_classes)
      : k_(num_classes), inter_(static_cast<std::size_t>(num_classes), 0), uni_(inter_) {}

  /// mask may be empty (all voxels count).
  void add(const VoxelGrid& pred, const VoxelGrid& gt, std::span<const std::uint8_t> mask = {}) {
    require(pred.dims() == gt.dims(), "miou: dims mismatch");
    require(mask.empty() || mask.size() == gt.size(), "miou: mask dims mismatch");
    require(pred.num_classes() <= k_ && gt.num_classes() <= k_, "miou: class count exceeds accumulator");
    for (std::size_t v = 0; v < gt.size(); ++v) {
      if (!mask.empty() && !mask[v]) continue;
      ++voxels_;
      const int p = pred[v], g = gt[v];
      if (p == g) {
        ++inter_[p];
        ++uni_[p];
      } else {
        ++uni_[p];
        ++uni_[g];
      }
    }
  }

  int num_classes() const noexcept { return k_; }
  std::uint64_t voxels() const noexcept { return voxels_; }
  std::uint64_t intersection(int c) const { return inter_[static_cast<std::size_t>(c)]; }
  std::uint64_t union_count(int c) const { return uni_[static_cast<std::size_t>(c)]; }

 private:
  int k_;
  std::vector<std::uint64_t> inter_;
  std::vector<std::uint64_t> uni_;
  std::uint64_t voxels_ = 0;
};

struct MetricsReport {
  std::string mask_name = "all";
  /// nullopt marks a class with empty union inside the mask.
  std::vector<std::optional<double>> class_iou;
  std::vector<std::uint64_t> intersection;
  std::vector<std::uint64_t> union_count;
  /// nullopt when no class contributes (e.g. empty mask).
  std::optional<double> miou;
  std::uint64_t voxels = 0;
  bool include_free = false;
  std::map<std::string, std::string> metadata;

  bool empty_mask() const noexcept { return voxels == 0; }
};

inline MetricsReport finalize(const IoUAccumulator& acc, std::string mask_name, bool include_free = false) {
  MetricsReport r;
  r.mask_name = std::move(mask_name);
  r.include_free = include_free;
  r.voxels = acc.voxels();
  const int k = acc.num_classes();
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    r.intersection.push_back(acc.intersection(c));
    r.union_count.push_back(acc.union_count(c));
    if (acc.union_count(c) == 0) {
      r.class_iou.emplace_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(acc.intersection(c)) / static_cast<double>(acc.union_count(c));
    r.class_iou.emplace_back(iou);
    if (c == kFree && !include_free) continue;
    sum += iou;
    ++present;
  }
  if (present > 0) r.miou = sum / present;
  return r;
}

/// IoU per class restricted to the mask; mIoU averages the classes whose
/// union inside the mask is non-empty (FREE excluded unless include_free).
inline MetricsReport miou(const VoxelGrid& pred, const VoxelGrid& gt, const VisibilityMask* mask = nullptr,
                          bool include_free = false, std::string mask_name = "all") {
  require(pred.dims() == gt.dims(), "miou: dims mismatch");
  if (mask != nullptr) require(mask->dims == gt.dims(), "miou: mask dims mismatch");
  IoUAccumulator acc(std::max(pred.num_classes(), gt.num_classes()));
  acc.add(pred, gt, mask != nullptr ? std::span<const std::uint8_t>(mask->flags) : std::span<const std::uint8_t>{});
  return finalize(acc, std::move(mask_name), include_free);
}

inline constexpr std::array<double, 4> kVisibilityBins{0.05, 0.10, 0.20, 0.50};

inline std::string visibility_bin_name(double threshold) {
  return "visprob_lt_" + std::to_string(static_cast<int>(std::lround(threshold * 100)));
}

struct SubMasks {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> masks;
};

struct MaskedSuiteOptions {
  /// Voxels whose centre is farther from the sensor than this fraction of the
  /// largest in-grid sensor distance count as distant.
  double distant_fraction = 0.6;
  bool visibility_bins = true;
  bool include_free = false;
};

/// Builds the named sub-region masks: all, invisible, distant, and one per
/// visibility-probability threshold.
inline SubMasks build_sub_masks(const VisibilityMask& visibility, Voxel sensor, const std::vector<double>* vis_prob,
                                const MaskedSuiteOptions& opt = {}) {
  const Dims d = visibility.dims;
  const std::size_t n = d.count();
  SubMasks out;
  out.masks.emplace_back("all", std::vector<std::uint8_t>(n, 1));

  std::vector<std::uint8_t> invisible(n);
  for (std::size_t v = 0; v < n; ++v) invisible[v] = visibility.flags[v] ? 0 : 1;
  out.masks.emplace_back("invisible", std::move(invisible));

  double max_dist = 0.0;
  std::vector<double> dist(n);
  for (int x = 0; x < d.x; ++x)
    for (int y = 0; y < d.y; ++y)
      for (int z = 0; z < d.z; ++z) {
        const double dx = x - sensor.x, dy = y - sensor.y, dz = z - sensor.z;
        const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
        dist[d.index(x, y, z)] = r;
        max_dist = std::max(max_dist, r);
      }
  std::vector<std::uint8_t> distant(n);
  for (std::size_t v = 0; v < n; ++v) distant[v] = dist[v] > opt.distant_fraction * max_dist ? 1 : 0;
  out.masks.emplace_back("distant", std::move(distant));

  if (opt.visibility_bins) {
    if (vis_prob == nullptr) throw SpecError("masked_suite: visibility-probability bins need a vis_prob field");
    require(vis_prob->size() == n, "masked_suite: vis_prob size mismatch");
    for (double th : kVisibilityBins) {
      std::vector<std::uint8_t> m(n);
      for (std::size_t v = 0; v < n; ++v) m[v] = (*vis_prob)[v] < th ? 1 : 0;
      out.masks.emplace_back(visibility_bin_name(th), std::move(m));
    }
  }
  return out;
}

/// Accumulates the sub-region reports over many scenes.
class MaskedSuiteAccumulator {
 public:
  MaskedSuiteAccumulator(int num_classes, MaskedSuiteOptions opt = {}) : k_(num_classes), opt_(opt) {}

  void add(const VoxelGrid& pred, const VoxelGrid& gt, const VisibilityMask& visibility, Voxel sensor,
           const std::vector<double>* vis_prob) {
    require(pred.dims() == gt.dims() && visibility.dims == gt.dims(), "masked_suite: dims mismatch");
    const auto subs = build_sub_masks(visibility, sensor, vis_prob, opt_);
    for (const auto& [name, m] : subs.masks) {
      auto it = accs_.find(name);
      if (it == accs_.end()) {
        order_.push_back(name);
        it = accs_.emplace(name, IoUAccumulator(k_)).first;
      }
      it->second.add(pred, gt, m);
    }
  }

  std::vector<MetricsReport> reports() const {
    std::vector<MetricsReport> out;
    for (const auto& name : order_) out.push_back(finalize(accs_.at(name), name, opt_.include_free));
    return out;
  }

 private:
  int k_;
  MaskedSuiteOptions opt_;
  std::vector<std::string> order_;
  std::map<std::string, IoUAccumulator> accs_;
};

inline std::vector<MetricsReport> masked_suite(const VoxelGrid& pred, const VoxelGrid& gt,
                                               const VisibilityMask& visibility, Voxel sensor,
                                               const std::vector<double>* vis_prob,
                                               const MaskedSuiteOptions& opt = {}) {
  MaskedSuiteAccumulator acc(std::max(pred.num_classes(), gt.num_classes()), opt);
  acc.add(pred, gt, visibility, sensor, vis_prob);
  return acc.reports();
}

/// Fraction of masks in which each voxel position is visible.
inline std::vector<double> visibility_probability(const std::vector<VisibilityMask>& masks) {
  if (masks.empty()) throw SpecError("visibility_probability: empty dataset");
  const Dims d = masks.front().dims;
  std::vector<std::uint64_t> counts(d.count(), 0);
  for (const auto& m : masks) {
    require(m.dims == d, "visibility_probability: mask dims differ");
    for (std::size_t v = 0; v < counts.size(); ++v) counts[v] += m.flags[v];
  }
  std::vector<double> p(counts.size());
  const double n = static_cast<double>(masks.size());
  for (std::size_t v = 0; v < p.size(); ++v) p[v] = static_cast<double>(counts[v]) / n;
  return p;
}

struct DiversitySummary {
  std::vector<double> entropy;  // nats, per voxel
  double mean_inside = 0.0;     // over voxels with mask = 1
  double mean_outside = 0.0;    // over voxels with mask = 0
  double mean_all = 0.0;
  double max = 0.0;
  std::size_t inside = 0;
  std::size_t outside = 0;
};

/// Shannon entropy of the empirical per-voxel class distribution over samples.
inline DiversitySummary sample_diversity(const std::vector<VoxelGrid>& samples, const VisibilityMask* mask = nullptr) {
  require(samples.size() >= 2, "sample_diversity: need at least two samples");
  const Dims d = samples.front().dims();
  int k = 0;
  for (const auto& s : samples) {
    require(s.dims() == d, "sample_diversity: dims mismatch");
    k = std::max(k, s.num_classes());
  }
  if (mask != nullptr) require(mask->dims == d, "sample_diversity: mask dims mismatch");
  const std::size_t n = d.count();
  const double m = static_cast<double>(samples.size());
  DiversitySummary out;
  out.entropy.assign(n, 0.0);
  std::vector<int> counts(static_cast<std::size_t>(k));
  double sum_in = 0.0, sum_out = 0.0, sum_all = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    std::fill(counts.begin(), counts.end(), 0);
    for (const auto& s : samples) ++counts[s[v]];
    double h = 0.0;
    for (int c : counts) {
      if (c == 0) continue;
      const double p = c / m;
      h -= p * std::log(p);
    }
    h = std::max(h, 0.0);
    out.entropy[v] = h;
    out.max = std::max(out.max, h);
    sum_all += h;
    if (mask == nullptr || mask->flags[v]) {
      sum_in += h;
      ++out.inside;
    } else {
      sum_out += h;
      ++out.outside;
    }
  }
  out.mean_all = sum_all / static_cast<double>(n);
  out.mean_inside = out.inside ? sum_in / static_cast<double>(out.inside) : 0.0;
  out.mean_outside = out.outside ? sum_out / static_cast<double>(out.outside) : 0.0;
  return out;
}

// Serialization. CSV: one row per class per mask.

inline std::string format_number(double x) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << x;
  return os.str();
}

inline std::string reports_csv_header() { return "mask,class,class_name,iou,intersection,union,voxels,miou\n"; }

inline std::string reports_to_csv(const std::vector<MetricsReport>& reports, bool with_header = true) {
  std::ostringstream os;
  if (with_header) os << reports_csv_header();
  for (const auto& r : reports) {
    const std::string miou = r.miou ? format_number(*r.miou) : "absent";
    for (std::size_t c = 0; c < r.class_iou.size(); ++c) {
      os << r.mask_name << ',' << c << ',' << scene_class_name(static_cast<int>(c)) << ','
         << (r.class_iou[c] ? format_number(*r.class_iou[c]) : "absent") << ',' << r.intersection[c] << ','
         << r.union_count[c] << ',' << r.voxels << ',' << miou << '\n';
    }
  }
  return os.str();
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["mask"] = r.mask_name;
  j["voxels"] = r.voxels;
  j["include_free"] = r.include_free;
  j["miou"] = r.miou ? nlohmann::json(*r.miou) : nlohmann::json(nullptr);
  nlohmann::json cls = nlohmann::json::array();
  for (std::size_t c = 0; c < r.class_iou.size(); ++c) {
    cls.push_back({{"class", c},
                   {"iou", r.class_iou[c] ? nlohmann::json(*r.class_iou[c]) : nlohmann::json(nullptr)},
                   {"intersection", r.intersection[c]},
                   {"union", r.union_count[c]}});
  }
  j["classes"] = cls;
  if (!r.metadata.empty()) j["metadata"] = r.metadata;
  return j;
}

}  // namespace occdiff
