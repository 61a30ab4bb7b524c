#pragma once

// Reconstruction metrics and the two classical interpolation baselines
// (inverse-distance weighting and ordinary kriging).

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rkm/scene.hpp"

namespace rkm {

// ---------------------------------------------------------------------------
// Metrics

struct MetricReport {
  std::vector<double> mse;   // per band
  std::vector<double> nmse;  // per band
  double mse_mean = 0.0;
  double nmse_mean = 0.0;
  // metadata
  std::string method;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::size_t scene_id = 0;
};

// Linear-scale errors over the full map. NMSE(f) = sum (E-T)^2 / sum T^2;
// MSE(f) = sum (E-T)^2 / (H*W). Averages are arithmetic across bands.
inline MetricReport compute_metrics(const Radiomap& estimate, const Radiomap& truth) {
  if (estimate.H != truth.H || estimate.W != truth.W || estimate.F != truth.F)
    throw std::invalid_argument("compute_metrics: shape mismatch");
  const std::size_t cells = truth.H * truth.W;
  MetricReport rep;
  rep.mse.resize(truth.F);
  rep.nmse.resize(truth.F);
  for (std::size_t f = 0; f < truth.F; ++f) {
    double err = 0.0, ref = 0.0;
    const std::size_t off = f * cells;
    for (std::size_t i = 0; i < cells; ++i) {
      const double d = estimate.values[off + i] - truth.values[off + i];
      err += d * d;
      ref += truth.values[off + i] * truth.values[off + i];
    }
    if (ref == 0.0) throw std::invalid_argument("compute_metrics: all-zero truth band");
    rep.mse[f] = err / static_cast<double>(cells);
    rep.nmse[f] = err / ref;
    rep.mse_mean += rep.mse[f];
    rep.nmse_mean += rep.nmse[f];
  }
  rep.mse_mean /= static_cast<double>(truth.F);
  rep.nmse_mean /= static_cast<double>(truth.F);
  return rep;
}

// Variant restricted to open (non-building) cells.
inline MetricReport compute_metrics_open(const Radiomap& estimate, const Radiomap& truth,
                                         const std::vector<std::uint8_t>& building) {
  if (building.size() != truth.H * truth.W)
    throw std::invalid_argument("compute_metrics_open: mask size mismatch");
  const std::size_t cells = truth.H * truth.W;
  std::size_t open = 0;
  for (auto b : building) open += (b == 0);
  if (open == 0) throw std::invalid_argument("compute_metrics_open: no open cells");
  MetricReport rep;
  rep.mse.resize(truth.F);
  rep.nmse.resize(truth.F);
  for (std::size_t f = 0; f < truth.F; ++f) {
    double err = 0.0, ref = 0.0;
    const std::size_t off = f * cells;
    for (std::size_t i = 0; i < cells; ++i) {
      if (building[i]) continue;
      const double d = estimate.values[off + i] - truth.values[off + i];
      err += d * d;
      ref += truth.values[off + i] * truth.values[off + i];
    }
    if (ref == 0.0) throw std::invalid_argument("compute_metrics_open: all-zero truth band");
    rep.mse[f] = err / static_cast<double>(open);
    rep.nmse[f] = err / ref;
    rep.mse_mean += rep.mse[f];
    rep.nmse_mean += rep.nmse[f];
  }
  rep.mse_mean /= static_cast<double>(truth.F);
  rep.nmse_mean /= static_cast<double>(truth.F);
  return rep;
}

// ---------------------------------------------------------------------------
// Inverse-distance weighting

// Per band: hat R(c) = sum_i w_i v_i / sum_i w_i with w_i = 1/d(c,i)^p;
// observed cells pass through exactly.
inline Radiomap idw_interpolate(const ObservationSet& obs, std::size_t H, std::size_t W,
                                double power = 2.0) {
  if (obs.count() == 0) throw std::invalid_argument("idw_interpolate: no observations");
  Radiomap out;
  out.H = H;
  out.W = W;
  out.F = obs.bands();
  out.values.assign(H * W * out.F, 0.0);
  out.calib.assign(out.F, {0.0, 1.0});
  for (std::size_t f = 0; f < out.F; ++f) {
    const auto& cells = obs.cells[f];
    const auto& vals = obs.values[f];
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t flat = y * W + x;
        double num = 0.0, den = 0.0;
        double exact = 0.0;
        bool hit = false;
        for (std::size_t i = 0; i < cells.size(); ++i) {
          const std::size_t oy = cells[i] / W, ox = cells[i] % W;
          if (flat == cells[i]) {
            exact = vals[i];
            hit = true;
            break;
          }
          const double dx = static_cast<double>(x) - static_cast<double>(ox);
          const double dy = static_cast<double>(y) - static_cast<double>(oy);
          const double w = 1.0 / std::pow(std::sqrt(dx * dx + dy * dy), power);
          num += w * vals[i];
          den += w;
        }
        out.values[f * H * W + flat] = hit ? exact : num / den;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ordinary kriging

struct Variogram {
  double nugget = 0.0;
  double sill = 1.0;   // s in gamma(h) = n0 + s*(1 - exp(-h/r))
  double range = 8.0;

  double operator()(double h) const {
    if (h <= 0.0) return 0.0;
    return nugget + sill * (1.0 - std::exp(-h / range));
  }
};

// Method-of-moments fit of the exponential model: empirical semivariances on
// distance bins, range from the first bin reaching ~95% of the plateau.
inline Variogram fit_variogram(const std::vector<std::uint32_t>& cells,
                               const std::vector<double>& values, std::size_t W) {
  const std::size_t n = cells.size();
  if (n < 2) throw std::invalid_argument("fit_variogram: need at least two observations");
  double max_d = 0.0;
  std::vector<double> dist, gamma;
  dist.reserve(n * (n - 1) / 2);
  gamma.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = static_cast<double>(cells[i] % W) - static_cast<double>(cells[j] % W);
      const double dy = static_cast<double>(cells[i] / W) - static_cast<double>(cells[j] / W);
      const double d = std::sqrt(dx * dx + dy * dy);
      dist.push_back(d);
      gamma.push_back(0.5 * (values[i] - values[j]) * (values[i] - values[j]));
      max_d = std::max(max_d, d);
    }
  }
  const std::size_t n_bins = 8;
  std::vector<double> bin_sum(n_bins, 0.0), bin_d(n_bins, 0.0);
  std::vector<std::size_t> bin_cnt(n_bins, 0);
  for (std::size_t i = 0; i < dist.size(); ++i) {
    std::size_t b = std::min(n_bins - 1,
                             static_cast<std::size_t>(dist[i] / (max_d + 1e-12) * n_bins));
    bin_sum[b] += gamma[i];
    bin_d[b] += dist[i];
    ++bin_cnt[b];
  }
  Variogram v;
  double plateau = 0.0;
  std::size_t used = 0;
  for (std::size_t b = n_bins / 2; b < n_bins; ++b)
    if (bin_cnt[b] > 0) {
      plateau += bin_sum[b] / static_cast<double>(bin_cnt[b]);
      ++used;
    }
  if (used > 0) plateau /= static_cast<double>(used);
  if (plateau <= 0.0) plateau = 1e-6;
  v.sill = plateau;
  v.nugget = 0.0;
  v.range = std::max(1.0, max_d / 3.0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (bin_cnt[b] == 0) continue;
    const double g = bin_sum[b] / static_cast<double>(bin_cnt[b]);
    if (g >= 0.95 * plateau) {
      v.range = std::max(1.0, (bin_d[b] / static_cast<double>(bin_cnt[b])) / 3.0);
      break;
    }
  }
  return v;
}

struct KrigingResult {
  Radiomap map;
  bool fallback = false;       // true when the system was singular and IDW was used
  double max_weight_dev = 0.0; // worst |sum w - 1| across predicted cells
};

// Ordinary kriging with an exponential variogram; one (N+1)x(N+1) solve is
// factored per band and reused for every cell.
inline KrigingResult ordinary_kriging(const ObservationSet& obs, std::size_t H, std::size_t W,
                                      const Variogram* model = nullptr,
                                      bool allow_fallback = true) {
  if (obs.count() < 2) {
    // Too few points to fit a variogram; hand the whole map to IDW.
    if (!allow_fallback)
      throw std::invalid_argument("ordinary_kriging: need at least 2 points");
    KrigingResult res;
    res.map = idw_interpolate(obs, H, W);
    res.fallback = true;
    return res;
  }
  KrigingResult res;
  res.map.H = H;
  res.map.W = W;
  res.map.F = obs.bands();
  res.map.values.assign(H * W * res.map.F, 0.0);
  res.map.calib.assign(res.map.F, {0.0, 1.0});

  for (std::size_t f = 0; f < res.map.F; ++f) {
    const auto& cells = obs.cells[f];
    const auto& vals = obs.values[f];
    const std::size_t n = cells.size();
    Variogram vg = model != nullptr ? *model : fit_variogram(cells, vals, W);

    Eigen::MatrixXd A(n + 1, n + 1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double dx = static_cast<double>(cells[i] % W) - static_cast<double>(cells[j] % W);
        const double dy = static_cast<double>(cells[i] / W) - static_cast<double>(cells[j] / W);
        A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            vg(std::sqrt(dx * dx + dy * dy));
      }
      A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) = 1.0;
      A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(i)) = 1.0;
    }
    A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)) = 0.0;

    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (!lu.isInvertible()) {
      if (!allow_fallback) throw std::runtime_error("ordinary_kriging: singular system");
      ObservationSet single;
      single.H = obs.H;
      single.W = obs.W;
      single.ratio = obs.ratio;
      single.cells = {cells};
      single.values = {vals};
      Radiomap idw = idw_interpolate(single, H, W);
      std::copy(idw.values.begin(), idw.values.begin() + static_cast<std::ptrdiff_t>(H * W),
                res.map.values.begin() + static_cast<std::ptrdiff_t>(f * H * W));
      res.fallback = true;
      continue;
    }

    Eigen::VectorXd rhs(n + 1);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t flat = y * W + x;
        for (std::size_t i = 0; i < n; ++i) {
          const double dx = static_cast<double>(x) - static_cast<double>(cells[i] % W);
          const double dy = static_cast<double>(y) - static_cast<double>(cells[i] / W);
          rhs(static_cast<Eigen::Index>(i)) = vg(std::sqrt(dx * dx + dy * dy));
        }
        rhs(static_cast<Eigen::Index>(n)) = 1.0;
        Eigen::VectorXd w = lu.solve(rhs);
        double pred = 0.0, wsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          pred += w(static_cast<Eigen::Index>(i)) * vals[i];
          wsum += w(static_cast<Eigen::Index>(i));
        }
        res.max_weight_dev = std::max(res.max_weight_dev, std::fabs(wsum - 1.0));
        res.map.values[f * H * W + flat] = pred;
      }
    }
  }
  return res;
}

}  // namespace rkm
