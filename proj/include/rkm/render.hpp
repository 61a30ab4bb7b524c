#pragma once

// Raster output: one radiomap band to a binary PPM (P6) through a fixed
// 256-entry colormap, with an optional building overlay.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rkm/scene.hpp"

namespace rkm {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

// Reserved overlay color for building cells.
inline constexpr Rgb kBuildingColor{72, 72, 72};

// Piecewise-linear ramp through five fixed anchors:
//   0.00 -> (0,0,0)   0.25 -> (32,32,160)   0.50 -> (32,160,160)
//   0.75 -> (224,224,64)   1.00 -> (255,48,32)
// Entry i covers value i/255; components round to nearest.
inline const std::array<Rgb, 256>& colormap256() {
  static const std::array<Rgb, 256> table = [] {
    constexpr double anchor_pos[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
    constexpr double anchor_rgb[5][3] = {
        {0, 0, 0}, {32, 32, 160}, {32, 160, 160}, {224, 224, 64}, {255, 48, 32}};
    std::array<Rgb, 256> t{};
    for (std::size_t i = 0; i < 256; ++i) {
      const double v = static_cast<double>(i) / 255.0;
      std::size_t s = 0;
      while (s + 2 < 5 && v > anchor_pos[s + 1]) ++s;
      const double u = (v - anchor_pos[s]) / (anchor_pos[s + 1] - anchor_pos[s]);
      double c[3];
      for (int k = 0; k < 3; ++k)
        c[k] = anchor_rgb[s][k] + u * (anchor_rgb[s + 1][k] - anchor_rgb[s][k]);
      t[i] = {static_cast<std::uint8_t>(std::lround(c[0])),
              static_cast<std::uint8_t>(std::lround(c[1])),
              static_cast<std::uint8_t>(std::lround(c[2]))};
    }
    return t;
  }();
  return table;
}

inline std::size_t colormap_index(double v) {
  if (!(v > 0.0)) v = 0.0;
  if (v > 1.0) v = 1.0;
  return static_cast<std::size_t>(std::lround(v * 255.0));
}

// Row-major RGB8 pixels (row 0 at top), building cells painted kBuildingColor.
inline std::vector<std::uint8_t> render_pixels(const Radiomap& map, std::size_t band,
                                               const std::vector<std::uint8_t>* building = nullptr) {
  if (band >= map.F) throw std::invalid_argument("render_pixels: band out of range");
  if (building != nullptr && building->size() != map.H * map.W)
    throw std::invalid_argument("render_pixels: building mask size mismatch");
  const auto& cmap = colormap256();
  const std::size_t plane = map.H * map.W;
  std::vector<std::uint8_t> px(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    Rgb c = cmap[colormap_index(map.values[band * plane + i])];
    if (building != nullptr && (*building)[i] != 0) c = kBuildingColor;
    px[i * 3 + 0] = c.r;
    px[i * 3 + 1] = c.g;
    px[i * 3 + 2] = c.b;
  }
  return px;
}

inline void render_map(const Radiomap& map, std::size_t band, const std::string& path,
                       const std::vector<std::uint8_t>* building = nullptr) {
  const std::vector<std::uint8_t> px = render_pixels(map, band, building);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("render_map: cannot open " + path);
  f << "P6\n" << map.W << " " << map.H << "\n255\n";
  f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!f) throw std::runtime_error("render_map: write failed for " + path);
}

}  // namespace rkm
