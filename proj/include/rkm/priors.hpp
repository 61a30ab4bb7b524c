#pragma once

// Knowledge-guided prior channels: building raster, transmitter raster,
// Bresenham radio-depth map, observation rasters, and their stacking into
// the refiner's conditioning tensor.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rkm/scene.hpp"

namespace rkm {

// Classic integer Bresenham over all octants, both endpoints included.
// Canonicalized: always rasterizes from the lexicographically smaller
// endpoint, so the cell set is a function of the unordered pair.
inline std::vector<Cell> bresenham_line(Cell a, Cell b) {
  const bool swapped = b < a;
  if (swapped) std::swap(a, b);
  std::vector<Cell> path;
  std::int64_t x0 = a.x, y0 = a.y;
  const std::int64_t x1 = b.x, y1 = b.y;
  const std::int64_t dx = std::abs(x1 - x0);
  const std::int64_t dy = -std::abs(y1 - y0);
  const std::int64_t sx = x0 < x1 ? 1 : -1;
  const std::int64_t sy = y0 < y1 ? 1 : -1;
  std::int64_t err = dx + dy;
  while (true) {
    path.push_back(Cell{static_cast<std::uint32_t>(x0), static_cast<std::uint32_t>(y0)});
    if (x0 == x1 && y0 == y1) break;
    const std::int64_t e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
  if (swapped) std::reverse(path.begin(), path.end());
  return path;
}

// Raw per-transmitter depth: for every cell, the number of building cells on
// the canonical line between the cell and t (endpoints included).
inline std::vector<std::uint32_t> depth_counts(const RadioScene& scene, Cell t) {
  const std::size_t H = scene.spec.H, W = scene.spec.W;
  if (t.x >= W || t.y >= H) throw std::invalid_argument("depth_counts: transmitter outside grid");
  std::vector<std::uint32_t> d(H * W, 0);
  for (std::uint32_t y = 0; y < H; ++y)
    for (std::uint32_t x = 0; x < W; ++x) {
      std::uint32_t acc = 0;
      for (const Cell& c : bresenham_line(Cell{x, y}, t))
        acc += scene.building[c.y * W + c.x];
      d[y * W + x] = acc;
    }
  return d;
}

struct DepthMap {
  std::size_t H = 0, W = 0;
  std::uint32_t tau_max = 150;
  std::vector<std::uint32_t> raw;     // min over transmitters
  std::vector<double> normalized;     // min(1, raw/tau_max)
};

// Multi-transmitter reduction is elementwise min (least-obstructed link),
// then normalization clips at tau_max.
inline DepthMap depth_map(const RadioScene& scene, std::uint32_t tau_max = 150) {
  if (tau_max == 0) throw std::invalid_argument("depth_map: tau_max must be positive");
  if (scene.tx.empty()) throw std::invalid_argument("depth_map: scene has no transmitters");
  DepthMap out;
  out.H = scene.spec.H;
  out.W = scene.spec.W;
  out.tau_max = tau_max;
  for (const Cell& t : scene.tx) {
    auto d = depth_counts(scene, t);
    if (out.raw.empty()) {
      out.raw = std::move(d);
    } else {
      for (std::size_t i = 0; i < d.size(); ++i) out.raw[i] = std::min(out.raw[i], d[i]);
    }
  }
  out.normalized.resize(out.raw.size());
  for (std::size_t i = 0; i < out.raw.size(); ++i)
    out.normalized[i] =
        std::min(1.0, static_cast<double>(out.raw[i]) / static_cast<double>(tau_max));
  return out;
}

// S_f holds observed values (0 elsewhere); M_f is the 0/1 indicator.
inline void observation_raster(const ObservationSet& obs, std::size_t band,
                               std::vector<double>& s, std::vector<double>& m) {
  const std::size_t total = obs.H * obs.W;
  s.assign(total, 0.0);
  m.assign(total, 0.0);
  if (band >= obs.bands()) throw std::invalid_argument("observation_raster: band out of range");
  const auto& cells = obs.cells[band];
  const auto& vals = obs.values[band];
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::uint32_t c = cells[i];
    if (c >= total) throw std::invalid_argument("observation_raster: cell outside grid");
    if (m[c] != 0.0) throw std::invalid_argument("observation_raster: duplicate cell");
    s[c] = vals[i];
    m[c] = 1.0;
  }
}

// Channel order of the conditioning stack. Coarse channels [0,F), observation
// values [F,2F), observation masks [2F,3F), then building, transmitter, depth.
struct ChannelLayout {
  std::size_t F = 0;
  std::size_t coarse(std::size_t f) const { return f; }
  std::size_t obs_value(std::size_t f) const { return F + f; }
  std::size_t obs_mask(std::size_t f) const { return 2 * F + f; }
  std::size_t building() const { return 3 * F; }
  std::size_t transmitter() const { return 3 * F + 1; }
  std::size_t depth() const { return 3 * F + 2; }
  std::size_t channels() const { return 3 * F + 3; }
};

struct PriorTensor {
  std::size_t H = 0, W = 0;
  ChannelLayout layout;
  std::vector<double> data;  // channel-major: (c*H + y)*W + x

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * H + y) * W + x];
  }
  std::size_t channels() const { return layout.channels(); }
};

inline PriorTensor assemble_prior_tensor(const Radiomap& coarse, const ObservationSet& obs,
                                         const RadioScene& scene, const DepthMap& depth) {
  const std::size_t H = coarse.H, W = coarse.W, F = coarse.F;
  if (obs.H != H || obs.W != W || obs.bands() != F)
    throw std::invalid_argument("assemble_prior_tensor: observation shape mismatch");
  if (scene.spec.H != H || scene.spec.W != W)
    throw std::invalid_argument("assemble_prior_tensor: scene shape mismatch");
  if (depth.H != H || depth.W != W)
    throw std::invalid_argument("assemble_prior_tensor: depth shape mismatch");
  PriorTensor out;
  out.H = H;
  out.W = W;
  out.layout.F = F;
  const std::size_t plane = H * W;
  out.data.assign(out.layout.channels() * plane, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    std::copy_n(coarse.values.data() + f * plane, plane,
                out.data.data() + out.layout.coarse(f) * plane);
    std::vector<double> s, m;
    observation_raster(obs, f, s, m);
    std::copy_n(s.data(), plane, out.data.data() + out.layout.obs_value(f) * plane);
    std::copy_n(m.data(), plane, out.data.data() + out.layout.obs_mask(f) * plane);
  }
  double* eb = out.data.data() + out.layout.building() * plane;
  for (std::size_t i = 0; i < plane; ++i) eb[i] = static_cast<double>(scene.building[i]);
  double* tb = out.data.data() + out.layout.transmitter() * plane;
  for (const Cell& t : scene.tx) tb[t.y * W + t.x] = 1.0;
  std::copy_n(depth.normalized.data(), plane, out.data.data() + out.layout.depth() * plane);
  return out;
}

}  // namespace rkm
