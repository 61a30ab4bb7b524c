#pragma once

// Physics oracle: log-distance path loss with per-cell penetration loss along
// Bresenham paths. Transparent by construction so every emitted value can be
// recomputed by hand.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "rkm/priors.hpp"
#include "rkm/scene.hpp"

namespace rkm {

struct SimParams {
  double path_loss_exponent = 3.0;  // n
  double d0_m = 4.0;                // reference distance
  double alpha_db = 2.5;            // loss per intersected building cell
  double p0_db = -30.0;             // power at d0 for the reference band
  double clip_range_db = 120.0;     // clip window below p0
};

// Per-transmitter received power in dB for one band; no clipping yet.
inline double received_db(double dist_m, std::uint32_t depth_cells, double freq_hz,
                          double f_ref_hz, const SimParams& p) {
  const double d = std::max(dist_m, p.d0_m);
  return p.p0_db - 10.0 * p.path_loss_exponent * std::log10(d / p.d0_m) -
         20.0 * std::log10(freq_hz / f_ref_hz) -
         p.alpha_db * static_cast<double>(depth_cells);
}

inline Radiomap simulate_radiomap(const RadioScene& scene, const SimParams& params = {}) {
  const std::size_t H = scene.spec.H, W = scene.spec.W, F = scene.spec.bands();
  if (scene.tx.empty()) throw std::invalid_argument("simulate_radiomap: no transmitters");
  const double f_ref =
      *std::min_element(scene.spec.frequencies_hz.begin(), scene.spec.frequencies_hz.end());

  std::vector<std::vector<std::uint32_t>> depth_per_tx;
  depth_per_tx.reserve(scene.tx.size());
  for (const Cell& t : scene.tx) depth_per_tx.push_back(depth_counts(scene, t));

  Radiomap map;
  map.H = H;
  map.W = W;
  map.F = F;
  map.values.assign(H * W * F, 0.0);
  map.calib.resize(F);

  std::vector<double> band_db(H * W);
  for (std::size_t f = 0; f < F; ++f) {
    const double freq = scene.spec.frequencies_hz[f];
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t ti = 0; ti < scene.tx.size(); ++ti) {
          const Cell t = scene.tx[ti];
          const double ddx = (static_cast<double>(x) - static_cast<double>(t.x)) *
                             scene.spec.cell_size_m;
          const double ddy = (static_cast<double>(y) - static_cast<double>(t.y)) *
                             scene.spec.cell_size_m;
          const double dist = std::hypot(ddx, ddy);
          const double db =
              received_db(dist, depth_per_tx[ti][y * W + x], freq, f_ref, params);
          best = std::max(best, db);
        }
        band_db[y * W + x] =
            std::clamp(best, params.p0_db - params.clip_range_db, params.p0_db);
      }
    double lo = band_db[0], hi = band_db[0];
    for (double v : band_db) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (!(lo < hi))
      throw std::runtime_error("simulate_radiomap: band is constant, cannot normalize");
    map.calib[f] = {lo, hi};
    for (std::size_t i = 0; i < band_db.size(); ++i)
      map.values[f * H * W + i] = (band_db[i] - lo) / (hi - lo);
  }
  return map;
}

}  // namespace rkm
