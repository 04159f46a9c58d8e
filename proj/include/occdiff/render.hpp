#pragma once

// Slice images of label grids with a fixed class palette.

#include <array>
#include <cstdint>
#include <vector>

#include "occdiff/error.hpp"
#include "occdiff/voxel.hpp"

namespace occdiff {

struct Rgb {
  std::uint8_t r, g, b;
};

/// free, ground, vehicle, pedestrian, building, vegetation. Any label past
/// the palette (UNKNOWN in observation grids) renders grey.
inline constexpr std::array<Rgb, 6> kPalette{{
    {255, 255, 255},
    {140, 100, 60},
    {30, 90, 220},
    {230, 40, 40},
    {150, 150, 160},
    {40, 170, 60},
}};
inline constexpr Rgb kUnknownColor{96, 96, 96};

inline Rgb label_color(int label) {
  return label >= 0 && label < static_cast<int>(kPalette.size()) ? kPalette[static_cast<std::size_t>(label)]
                                                                  : kUnknownColor;
}

enum class SliceAxis { kX, kY, kZ };

inline SliceAxis parse_axis(char c) {
  switch (c) {
    case 'x': return SliceAxis::kX;
    case 'y': return SliceAxis::kY;
    case 'z': return SliceAxis::kZ;
    default: throw SpecError("render: axis must be x, y or z");
  }
}

struct SliceImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

inline int slice_count(const VoxelGrid& g, SliceAxis axis) {
  const Dims d = g.dims();
  return axis == SliceAxis::kX ? d.x : axis == SliceAxis::kY ? d.y : d.z;
}

/// Slice `index` along `axis`, each voxel drawn as a scale x scale block.
/// z slices put x to the right and y downward; x and y slices put the
/// remaining horizontal axis to the right and z upward.
inline SliceImage render_slice(const VoxelGrid& g, SliceAxis axis, int index, int scale = 1) {
  require(scale >= 1, "render: scale must be >= 1");
  require(index >= 0 && index < slice_count(g, axis), "render: slice index out of range");
  const Dims d = g.dims();
  int u_n = 0, v_n = 0;
  switch (axis) {
    case SliceAxis::kZ: u_n = d.x, v_n = d.y; break;
    case SliceAxis::kY: u_n = d.x, v_n = d.z; break;
    case SliceAxis::kX: u_n = d.y, v_n = d.z; break;
  }
  SliceImage img;
  img.width = u_n * scale;
  img.height = v_n * scale;
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int row = 0; row < img.height; ++row) {
    const int v = row / scale;
    for (int col = 0; col < img.width; ++col) {
      const int u = col / scale;
      int label = 0;
      switch (axis) {
        case SliceAxis::kZ: label = g.at(u, v, index); break;
        case SliceAxis::kY: label = g.at(u, index, v_n - 1 - v); break;
        case SliceAxis::kX: label = g.at(index, u, v_n - 1 - v); break;
      }
      const Rgb c = label_color(label);
      auto* px = &img.rgb[(static_cast<std::size_t>(row) * img.width + col) * 3];
      px[0] = c.r;
      px[1] = c.g;
      px[2] = c.b;
    }
  }
  return img;
}

}  // namespace occdiff
