#pragma once

// File formats for grids and masks.
//
//   .voxg  "VOXG" | u16 version=1 | u32 X | u32 Y | u32 Z | u16 K | f32 voxel_size
//          | X*Y*Z label bytes, z fastest
//   .voxm  same header with K=2, followed by 0/1 flag bytes
//
// All integers and floats are little-endian. Scene metadata is a JSON sidecar.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "occdiff/binary_io.hpp"
#include "occdiff/voxel.hpp"

namespace occdiff {

inline constexpr std::uint16_t kGridFormatVersion = 1;

namespace detail {

inline void write_grid_header(bin::Writer& w, Dims d, int k, double voxel_size) {
  w.bytes("VOXG");
  w.u16(kGridFormatVersion);
  w.u32(static_cast<std::uint32_t>(d.x));
  w.u32(static_cast<std::uint32_t>(d.y));
  w.u32(static_cast<std::uint32_t>(d.z));
  w.u16(static_cast<std::uint16_t>(k));
  w.f32(static_cast<float>(voxel_size));
}

struct GridHeader {
  Dims dims;
  int k;
  double voxel_size;
};

/// Widens a stored f32 through its shortest decimal form, so 0.4f reads back
/// as the double 0.4.
inline double widen_voxel_size(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
}

inline GridHeader read_grid_header(bin::Reader& r, const std::string& what) {
  if (r.bytes(4) != "VOXG") throw IoError(what + ": bad magic");
  const auto version = r.u16();
  if (version != kGridFormatVersion) throw IoError(what + ": unsupported version " + std::to_string(version));
  GridHeader h{};
  const auto x = r.u32(), y = r.u32(), z = r.u32();
  if (x == 0 || y == 0 || z == 0 || x > (1u << 20) || y > (1u << 20) || z > (1u << 20)) {
    throw IoError(what + ": invalid dims");
  }
  h.dims = Dims{static_cast<int>(x), static_cast<int>(y), static_cast<int>(z)};
  h.k = r.u16();
  h.voxel_size = widen_voxel_size(r.f32());
  return h;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_grid(const VoxelGrid& g) {
  bin::Writer w;
  detail::write_grid_header(w, g.dims(), g.num_classes(), g.voxel_size());
  w.bytes(g.labels().data(), g.size());
  return w.data();
}

inline VoxelGrid decode_grid(const std::vector<std::uint8_t>& bytes, const std::string& what = "voxg") {
  bin::Reader r(bytes.data(), bytes.size(), what);
  const auto h = detail::read_grid_header(r, what);
  if (h.k < 1 || h.k > 256) throw IoError(what + ": invalid class count");
  const auto* p = r.raw(h.dims.count());
  std::vector<std::uint8_t> labels(p, p + h.dims.count());
  for (auto l : labels) {
    if (l >= h.k) throw IoError(what + ": label out of range");
  }
  return VoxelGrid(h.dims, h.k, h.voxel_size, std::move(labels));
}

inline std::vector<std::uint8_t> encode_mask(const VisibilityMask& m) {
  bin::Writer w;
  detail::write_grid_header(w, m.dims, 2, m.voxel_size);
  w.bytes(m.flags.data(), m.flags.size());
  return w.data();
}

inline VisibilityMask decode_mask(const std::vector<std::uint8_t>& bytes, const std::string& what = "voxm") {
  bin::Reader r(bytes.data(), bytes.size(), what);
  const auto h = detail::read_grid_header(r, what);
  if (h.k != 2) throw IoError(what + ": mask header must declare K=2");
  VisibilityMask m(h.dims, 0, h.voxel_size);
  const auto* p = r.raw(h.dims.count());
  for (std::size_t i = 0; i < m.flags.size(); ++i) {
    if (p[i] > 1) throw IoError(what + ": mask flag out of range");
    m.flags[i] = p[i];
  }
  return m;
}

inline void save_grid(const std::filesystem::path& path, const VoxelGrid& g) {
  bin::write_file(path, encode_grid(g));
}
inline VoxelGrid load_grid(const std::filesystem::path& path) {
  return decode_grid(bin::read_file(path), path.string());
}
inline void save_mask(const std::filesystem::path& path, const VisibilityMask& m) {
  bin::write_file(path, encode_mask(m));
}
inline VisibilityMask load_mask(const std::filesystem::path& path) {
  return decode_mask(bin::read_file(path), path.string());
}

// JSON conversions (lowercase snake_case keys).

inline void to_json(nlohmann::json& j, const Dims& d) { j = nlohmann::json::array({d.x, d.y, d.z}); }
inline void from_json(const nlohmann::json& j, Dims& d) {
  d = Dims{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}
inline void to_json(nlohmann::json& j, const Voxel& v) { j = nlohmann::json::array({v.x, v.y, v.z}); }
inline void from_json(const nlohmann::json& j, Voxel& v) {
  v = Voxel{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}
inline void to_json(nlohmann::json& j, const CountRange& r) { j = nlohmann::json::array({r.min, r.max}); }
inline void from_json(const nlohmann::json& j, CountRange& r) {
  r = CountRange{j.at(0).get<int>(), j.at(1).get<int>()};
}

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = nlohmann::json{{"dims", s.dims},
                     {"voxel_size", s.voxel_size},
                     {"num_classes", s.num_classes},
                     {"vehicles", s.vehicles},
                     {"pedestrians", s.pedestrians},
                     {"buildings", s.buildings},
                     {"vegetation", s.vegetation},
                     {"ground_height", s.ground_height},
                     {"sensor", s.sensor},
                     {"max_range", s.max_range}};
}

/// Missing keys keep their defaults so partial spec files are accepted.
inline void from_json(const nlohmann::json& j, SceneSpec& s) {
  SceneSpec def;
  s = def;
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("dims", s.dims);
  opt("voxel_size", s.voxel_size);
  opt("num_classes", s.num_classes);
  opt("vehicles", s.vehicles);
  opt("pedestrians", s.pedestrians);
  opt("buildings", s.buildings);
  opt("vegetation", s.vegetation);
  opt("ground_height", s.ground_height);
  opt("sensor", s.sensor);
  opt("max_range", s.max_range);
}

}  // namespace occdiff
