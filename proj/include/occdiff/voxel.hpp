#pragma once

// Dense semantic voxel grids, procedural scenes, sensor visibility, and
// label corruption.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "occdiff/error.hpp"
#include "occdiff/rng.hpp"

namespace occdiff {

/// Voxel counts along x, y, z. Linear indices are row-major with z fastest.
struct Dims {
  int x = 1;
  int y = 1;
  int z = 1;

  constexpr std::size_t count() const noexcept {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  constexpr std::size_t index(int i, int j, int k) const noexcept {
    return (static_cast<std::size_t>(i) * static_cast<std::size_t>(y) + static_cast<std::size_t>(j)) *
               static_cast<std::size_t>(z) +
           static_cast<std::size_t>(k);
  }
  constexpr bool contains(int i, int j, int k) const noexcept {
    return i >= 0 && j >= 0 && k >= 0 && i < x && j < y && k < z;
  }
  constexpr bool valid() const noexcept { return x >= 1 && y >= 1 && z >= 1; }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

struct Voxel {
  int x = 0;
  int y = 0;
  int z = 0;
  friend constexpr bool operator==(const Voxel&, const Voxel&) = default;
};

/// Semantic classes of the synthetic benchmark. Class 0 is always free space.
enum SceneClass : std::uint8_t {
  kFree = 0,
  kGround = 1,
  kVehicle = 2,
  kPedestrian = 3,
  kBuilding = 4,
  kVegetation = 5,
};
inline constexpr int kSceneClassCount = 6;

inline const char* scene_class_name(int c) {
  static constexpr std::array<const char*, kSceneClassCount> names{
      "free", "ground", "vehicle", "pedestrian", "building", "vegetation"};
  return (c >= 0 && c < kSceneClassCount) ? names[static_cast<std::size_t>(c)] : "class";
}

class VoxelGrid {
 public:
  VoxelGrid() = default;
  VoxelGrid(Dims dims, int num_classes, double voxel_size = 0.4, std::uint8_t fill = 0)
      : dims_(dims), num_classes_(num_classes), voxel_size_(voxel_size) {
    require(dims.valid(), "VoxelGrid: dims must all be >= 1");
    require(num_classes >= 1 && num_classes <= 256, "VoxelGrid: num_classes must be in [1, 256]");
    require(fill < num_classes, "VoxelGrid: fill label out of range");
    labels_.assign(dims.count(), fill);
  }
  VoxelGrid(Dims dims, int num_classes, double voxel_size, std::vector<std::uint8_t> labels)
      : dims_(dims), num_classes_(num_classes), voxel_size_(voxel_size), labels_(std::move(labels)) {
    require(dims.valid(), "VoxelGrid: dims must all be >= 1");
    require(num_classes >= 1 && num_classes <= 256, "VoxelGrid: num_classes must be in [1, 256]");
    require(labels_.size() == dims.count(), "VoxelGrid: label count does not match dims");
    for (auto l : labels_) require(l < num_classes, "VoxelGrid: label out of range");
  }

  const Dims& dims() const noexcept { return dims_; }
  int num_classes() const noexcept { return num_classes_; }
  double voxel_size() const noexcept { return voxel_size_; }
  std::size_t size() const noexcept { return labels_.size(); }

  std::uint8_t operator[](std::size_t i) const noexcept { return labels_[i]; }
  std::uint8_t at(int i, int j, int k) const noexcept { return labels_[dims_.index(i, j, k)]; }
  void set(std::size_t i, std::uint8_t label) {
    require(label < num_classes_, "VoxelGrid::set: label out of range");
    labels_[i] = label;
  }
  void set(int i, int j, int k, std::uint8_t label) { set(dims_.index(i, j, k), label); }

  std::span<const std::uint8_t> labels() const noexcept { return labels_; }

  friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
    return a.dims_ == b.dims_ && a.num_classes_ == b.num_classes_ && a.voxel_size_ == b.voxel_size_ &&
           a.labels_ == b.labels_;
  }

 private:
  Dims dims_{};
  int num_classes_ = 1;
  double voxel_size_ = 0.4;
  std::vector<std::uint8_t> labels_{0};
};

/// Per-voxel flag: 1 = visible from the sensor, 0 = invisible.
struct VisibilityMask {
  Dims dims{};
  double voxel_size = 0.4;
  std::vector<std::uint8_t> flags;

  VisibilityMask() = default;
  explicit VisibilityMask(Dims d, std::uint8_t fill = 0, double vs = 0.4)
      : dims(d), voxel_size(vs), flags(d.count(), fill) {}

  std::size_t size() const noexcept { return flags.size(); }
  bool visible(std::size_t i) const noexcept { return flags[i] != 0; }
  std::size_t count_visible() const noexcept {
    return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), std::uint8_t{1}));
  }
  friend bool operator==(const VisibilityMask&, const VisibilityMask&) = default;
};

struct CountRange {
  int min = 0;
  int max = 0;
  friend constexpr bool operator==(const CountRange&, const CountRange&) = default;
};

struct SceneSpec {
  Dims dims{32, 32, 8};
  double voxel_size = 0.4;
  int num_classes = kSceneClassCount;
  CountRange vehicles{2, 5};
  CountRange pedestrians{2, 6};
  CountRange buildings{1, 3};
  CountRange vegetation{1, 4};
  // Ground occupies z in [0, h) with h drawn from this range.
  CountRange ground_height{1, 2};
  Voxel sensor{16, 16, 3};
  double max_range = 24.0;

  void validate() const {
    require(dims.valid(), "SceneSpec: dims must all be >= 1");
    require(voxel_size > 0.0, "SceneSpec: voxel_size must be positive");
    require(num_classes >= kSceneClassCount && num_classes <= 255,
            "SceneSpec: num_classes must be in [6, 255]");
    for (const auto* r : {&vehicles, &pedestrians, &buildings, &vegetation}) {
      require(r->min >= 0 && r->min <= r->max, "SceneSpec: object count range is empty or negative");
    }
    require(ground_height.min >= 1 && ground_height.min <= ground_height.max,
            "SceneSpec: ground height range is empty");
    require(ground_height.max < dims.z, "SceneSpec: ground height must leave free space above");
    require(dims.contains(sensor.x, sensor.y, sensor.z), "SceneSpec: sensor outside the grid");
    require(sensor.z >= ground_height.max, "SceneSpec: sensor would be embedded in the ground");
    require(max_range > 0.0, "SceneSpec: max_range must be positive");
  }
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

namespace detail {

struct Box {
  int x0, y0, z0, x1, y1, z1;  // inclusive-exclusive

  bool overlaps_inflated(const Box& o) const noexcept {
    return x0 - 1 < o.x1 && o.x0 < x1 + 1 && y0 - 1 < o.y1 && o.y0 < y1 + 1 && z0 - 1 < o.z1 && o.z0 < z1 + 1;
  }
  bool contains_inflated(const Voxel& v) const noexcept {
    return v.x >= x0 - 1 && v.x < x1 + 1 && v.y >= y0 - 1 && v.y < y1 + 1 && v.z >= z0 - 1 && v.z < z1 + 1;
  }
};

}  // namespace detail

/// Builds a random scene: a flat ground layer plus axis-aligned objects.
/// Objects of any category keep at least one voxel of clearance from each
/// other and from the sensor, so every placed object is a separate
/// 26-connected component of its class.
inline VoxelGrid generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Dims d = spec.dims;
  VoxelGrid grid(d, spec.num_classes, spec.voxel_size);
  Rng rng(derive_seed({seed, 0x5CE7Eull}));

  const int ground = rng.range(spec.ground_height.min, spec.ground_height.max);
  for (int i = 0; i < d.x; ++i)
    for (int j = 0; j < d.y; ++j)
      for (int k = 0; k < ground; ++k) grid.set(i, j, k, kGround);

  std::vector<detail::Box> placed;
  const int headroom = d.z - ground;

  auto try_place = [&](int sx, int sy, int z0, int sz, auto&& paint) {
    sx = std::clamp(sx, 1, d.x);
    sy = std::clamp(sy, 1, d.y);
    sz = std::clamp(sz, 1, std::max(1, d.z - z0));
    if (z0 >= d.z) return;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const int x0 = rng.range(0, d.x - sx);
      const int y0 = rng.range(0, d.y - sy);
      const detail::Box box{x0, y0, z0, x0 + sx, y0 + sy, z0 + sz};
      if (box.contains_inflated(spec.sensor)) continue;
      bool clash = false;
      for (const auto& b : placed) {
        if (b.overlaps_inflated(box)) {
          clash = true;
          break;
        }
      }
      if (clash) continue;
      placed.push_back(box);
      paint(box);
      return;
    }
  };

  auto fill_box = [&](std::uint8_t cls) {
    return [&grid, cls](const detail::Box& b) {
      for (int i = b.x0; i < b.x1; ++i)
        for (int j = b.y0; j < b.y1; ++j)
          for (int k = b.z0; k < b.z1; ++k) grid.set(i, j, k, cls);
    };
  };

  const int n_build = rng.range(spec.buildings.min, spec.buildings.max);
  for (int n = 0; n < n_build; ++n) {
    const int sx = rng.range(4, 8);
    const int sy = rng.range(4, 8);
    const int sz = rng.range(std::min(3, headroom), headroom);
    try_place(sx, sy, ground, sz, fill_box(kBuilding));
  }
  const int n_veh = rng.range(spec.vehicles.min, spec.vehicles.max);
  for (int n = 0; n < n_veh; ++n) {
    int sx = rng.range(3, 5);
    int sy = rng.range(2, 3);
    if (rng.bernoulli(0.5)) std::swap(sx, sy);
    try_place(sx, sy, ground, 2, fill_box(kVehicle));
  }
  const int n_veg = rng.range(spec.vegetation.min, spec.vegetation.max);
  for (int n = 0; n < n_veg; ++n) {
    const int rx = rng.range(1, 2);
    const int ry = rng.range(1, 2);
    const int rz = 1;
    const int lift = rng.range(0, 1);
    const int z0 = std::min(ground + lift, d.z - 1);
    try_place(2 * rx + 1, 2 * ry + 1, z0, 2 * rz + 1, [&](const detail::Box& b) {
      const double cx = 0.5 * (b.x0 + b.x1 - 1);
      const double cy = 0.5 * (b.y0 + b.y1 - 1);
      const double cz = 0.5 * (b.z0 + b.z1 - 1);
      const double ax = 0.5 * (b.x1 - b.x0) + 0.25;
      const double ay = 0.5 * (b.y1 - b.y0) + 0.25;
      const double az = 0.5 * (b.z1 - b.z0) + 0.25;
      for (int i = b.x0; i < b.x1; ++i)
        for (int j = b.y0; j < b.y1; ++j)
          for (int k = b.z0; k < b.z1; ++k) {
            const double u = (i - cx) / ax, v = (j - cy) / ay, w = (k - cz) / az;
            if (u * u + v * v + w * w <= 1.0) grid.set(i, j, k, kVegetation);
          }
    });
  }
  const int n_ped = rng.range(spec.pedestrians.min, spec.pedestrians.max);
  for (int n = 0; n < n_ped; ++n) {
    try_place(1, 1, ground, rng.range(2, 3), fill_box(kPedestrian));
  }
  return grid;
}

/// Azimuth x elevation ray lattice for the virtual sensor.
struct RayLattice {
  int azimuth = 256;
  int elevation = 64;
};

/// Integer-grid (Amanatides-Woo) ray casting from the sensor voxel centre.
/// Along each ray every traversed voxel whose entry distance is within
/// max_range is marked visible, up to and including the first non-free voxel.
inline VisibilityMask compute_visibility(const VoxelGrid& grid, Voxel sensor, double max_range,
                                         RayLattice rays = {}) {
  const Dims d = grid.dims();
  require(d.contains(sensor.x, sensor.y, sensor.z), "compute_visibility: sensor outside the grid");
  require(max_range > 0.0, "compute_visibility: max_range must be positive");
  require(rays.azimuth >= 1 && rays.elevation >= 1, "compute_visibility: ray lattice must be non-empty");
  if (grid.at(sensor.x, sensor.y, sensor.z) != kFree) {
    throw SpecError("compute_visibility: sensor voxel is not free (sensor embedded in solid)");
  }

  VisibilityMask mask(d, 0, grid.voxel_size());
  mask.flags[d.index(sensor.x, sensor.y, sensor.z)] = 1;

  const std::array<double, 3> origin{sensor.x + 0.5, sensor.y + 0.5, sensor.z + 0.5};
  const std::array<int, 3> extent{d.x, d.y, d.z};
  constexpr double kInf = std::numeric_limits<double>::infinity();

  for (int ie = 0; ie < rays.elevation; ++ie) {
    const double el = -std::numbers::pi / 2 + std::numbers::pi * (ie + 0.5) / rays.elevation;
    for (int ia = 0; ia < rays.azimuth; ++ia) {
      const double az = 2.0 * std::numbers::pi * (ia + 0.5) / rays.azimuth;
      const std::array<double, 3> dir{std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};

      std::array<int, 3> cell{sensor.x, sensor.y, sensor.z};
      std::array<int, 3> step{};
      std::array<double, 3> t_max{};
      std::array<double, 3> t_delta{};
      for (int a = 0; a < 3; ++a) {
        if (dir[a] > 0) {
          step[a] = 1;
          t_delta[a] = 1.0 / dir[a];
          t_max[a] = (cell[a] + 1 - origin[a]) / dir[a];
        } else if (dir[a] < 0) {
          step[a] = -1;
          t_delta[a] = -1.0 / dir[a];
          t_max[a] = (cell[a] - origin[a]) / dir[a];
        } else {
          step[a] = 0;
          t_delta[a] = kInf;
          t_max[a] = kInf;
        }
      }
      while (true) {
        int axis = 0;
        if (t_max[1] < t_max[axis]) axis = 1;
        if (t_max[2] < t_max[axis]) axis = 2;
        const double t_enter = t_max[axis];
        if (t_enter > max_range) break;
        cell[axis] += step[axis];
        if (cell[axis] < 0 || cell[axis] >= extent[axis]) break;
        t_max[axis] += t_delta[axis];
        const std::size_t idx = d.index(cell[0], cell[1], cell[2]);
        mask.flags[idx] = 1;
        if (grid[idx] != kFree) break;
      }
    }
  }
  return mask;
}

/// Independent per-voxel label noise: with probability flip_rate a voxel takes
/// a uniformly random different class; afterwards, with probability
/// dropout_rate an occupied voxel becomes free.
inline VoxelGrid corrupt_labels(const VoxelGrid& grid, double flip_rate, double dropout_rate,
                                std::uint64_t seed) {
  require(flip_rate >= 0.0 && flip_rate <= 1.0, "corrupt_labels: flip_rate must be in [0,1]");
  require(dropout_rate >= 0.0 && dropout_rate <= 1.0, "corrupt_labels: dropout_rate must be in [0,1]");
  const int k = grid.num_classes();
  VoxelGrid out = grid;
  Rng rng(derive_seed({seed, 0xC0AAull}));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    int label = grid[i];
    const double u_flip = rng.uniform();
    const std::uint64_t other = rng.next();
    const double u_drop = rng.uniform();
    if (k >= 2 && u_flip < flip_rate) {
      label = (label + 1 + static_cast<int>(other % static_cast<std::uint64_t>(k - 1))) % k;
    }
    if (label != kFree && u_drop < dropout_rate) label = kFree;
    out.set(i, static_cast<std::uint8_t>(label));
  }
  return out;
}

/// Observation seen by the discriminative baseline: true labels where
/// visible, the extra UNKNOWN label (== num_classes) elsewhere.
inline VoxelGrid make_observation(const VoxelGrid& labels, const VisibilityMask& vis) {
  require(labels.dims() == vis.dims, "make_observation: dims mismatch");
  const int k = labels.num_classes();
  require(k <= 255, "make_observation: too many classes");
  std::vector<std::uint8_t> obs(labels.size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    obs[i] = vis.visible(i) ? labels[i] : static_cast<std::uint8_t>(k);
  }
  return VoxelGrid(labels.dims(), k + 1, labels.voxel_size(), std::move(obs));
}

}  // namespace occdiff
