#pragma once

// Synthetic urban scenes and their ground-truth multiband radiomaps.
// Grid convention: cell (x, y) with x in [0,W), y in [0,H); flat index
// y*W + x; multiband values band-major: (f*H + y)*W + x.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rkm/checkpoint.hpp"
#include "rkm/common.hpp"

namespace rkm {

struct Cell {
  std::uint32_t x = 0;
  std::uint32_t y = 0;

  friend bool operator==(const Cell& a, const Cell& b) { return a.x == b.x && a.y == b.y; }
  friend bool operator<(const Cell& a, const Cell& b) {
    return a.x != b.x ? a.x < b.x : a.y < b.y;
  }
};

struct SceneSpec {
  std::size_t H = 32;
  std::size_t W = 32;
  double cell_size_m = 4.0;
  std::size_t building_count_min = 4;
  std::size_t building_count_max = 8;
  std::size_t building_size_min = 2;   // cells per side
  std::size_t building_size_max = 6;
  std::size_t n_tx = 1;
  std::vector<double> frequencies_hz = {868e6, 1800e6};

  void validate() const {
    if (H < 16 || W < 16) throw std::invalid_argument("SceneSpec: grid must be at least 16x16");
    if (frequencies_hz.empty()) throw std::invalid_argument("SceneSpec: need at least one band");
    for (double f : frequencies_hz)
      if (!(f > 0.0)) throw std::invalid_argument("SceneSpec: frequencies must be positive");
    if (n_tx < 1) throw std::invalid_argument("SceneSpec: need at least one transmitter");
    if (building_count_min > building_count_max ||
        building_size_min > building_size_max)
      throw std::invalid_argument("SceneSpec: inverted building ranges");
    if (building_size_max > std::min(H, W))
      throw std::invalid_argument("SceneSpec: building size exceeds grid");
    if (building_size_min < 1) throw std::invalid_argument("SceneSpec: building size must be >= 1");
    if (cell_size_m <= 0.0) throw std::invalid_argument("SceneSpec: cell size must be positive");
  }

  std::size_t bands() const { return frequencies_hz.size(); }
};

struct RadioScene {
  SceneSpec spec;
  std::vector<std::uint8_t> building;  // H*W, 1 = building cell
  std::vector<Cell> tx;

  std::uint8_t at(std::size_t x, std::size_t y) const { return building[y * spec.W + x]; }
};

struct Radiomap {
  std::size_t H = 0, W = 0, F = 0;
  std::vector<double> values;                       // band-major, normalized [0,1]
  std::vector<std::pair<double, double>> calib;     // per band (min_dB, max_dB)

  double at(std::size_t f, std::size_t y, std::size_t x) const {
    return values[(f * H + y) * W + x];
  }
  double& at(std::size_t f, std::size_t y, std::size_t x) {
    return values[(f * H + y) * W + x];
  }
};

struct ObservationSet {
  std::size_t H = 0, W = 0;
  double ratio = 0.0;
  // cells[f] are flat indices (y*W+x), strictly increasing; values[f] aligned.
  std::vector<std::vector<std::uint32_t>> cells;
  std::vector<std::vector<double>> values;

  std::size_t bands() const { return cells.size(); }
  std::size_t count() const { return cells.empty() ? 0 : cells[0].size(); }
};

inline RadioScene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  RadioScene scene;
  scene.spec = spec;
  scene.building.assign(spec.H * spec.W, 0);
  Rng rng(seed);
  const std::size_t count =
      rng.uniform_int(static_cast<std::uint64_t>(spec.building_count_min),
                      static_cast<std::uint64_t>(spec.building_count_max));
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t bw = rng.uniform_int(static_cast<std::uint64_t>(spec.building_size_min),
                                           static_cast<std::uint64_t>(spec.building_size_max));
    const std::size_t bh = rng.uniform_int(static_cast<std::uint64_t>(spec.building_size_min),
                                           static_cast<std::uint64_t>(spec.building_size_max));
    const std::size_t x0 = rng.uniform_int(0, static_cast<std::uint64_t>(spec.W - bw));
    const std::size_t y0 = rng.uniform_int(0, static_cast<std::uint64_t>(spec.H - bh));
    for (std::size_t y = y0; y < y0 + bh; ++y)
      for (std::size_t x = x0; x < x0 + bw; ++x) scene.building[y * spec.W + x] = 1;
  }
  std::vector<std::uint32_t> open;
  open.reserve(spec.H * spec.W);
  for (std::size_t i = 0; i < scene.building.size(); ++i)
    if (scene.building[i] == 0) open.push_back(static_cast<std::uint32_t>(i));
  if (open.size() < spec.n_tx)
    throw std::runtime_error("generate_scene: not enough open cells for transmitters");
  auto pick = rng.sample_without_replacement(static_cast<std::uint32_t>(open.size()),
                                             static_cast<std::uint32_t>(spec.n_tx));
  for (std::uint32_t i : pick) {
    const std::uint32_t flat = open[i];
    scene.tx.push_back(Cell{flat % static_cast<std::uint32_t>(spec.W),
                            flat / static_cast<std::uint32_t>(spec.W)});
  }
  return scene;
}

struct SamplingOptions {
  bool shared_cells = true;   // co-located sensors: same cells in every band
  double noise_sigma = 0.0;   // additive Gaussian in normalized units
};

inline ObservationSet sample_observations(const Radiomap& map, double ratio, std::uint64_t seed,
                                          const SamplingOptions& opt = {}) {
  if (!(ratio > 0.0) || ratio > 0.25)
    throw std::invalid_argument("sample_observations: ratio must be in (0, 0.25]");
  const std::size_t total = map.H * map.W;
  const std::size_t n = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total))));
  ObservationSet obs;
  obs.H = map.H;
  obs.W = map.W;
  obs.ratio = ratio;
  obs.cells.resize(map.F);
  obs.values.resize(map.F);
  Rng rng(seed);
  std::vector<std::uint32_t> shared;
  if (opt.shared_cells) {
    shared = rng.sample_without_replacement(static_cast<std::uint32_t>(total),
                                            static_cast<std::uint32_t>(n));
    std::sort(shared.begin(), shared.end());
  }
  for (std::size_t f = 0; f < map.F; ++f) {
    std::vector<std::uint32_t> cells;
    if (opt.shared_cells) {
      cells = shared;
    } else {
      cells = rng.sample_without_replacement(static_cast<std::uint32_t>(total),
                                             static_cast<std::uint32_t>(n));
      std::sort(cells.begin(), cells.end());
    }
    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) {
      double v = map.values[f * total + cells[i]];
      if (opt.noise_sigma > 0.0)
        v = std::clamp(v + rng.normal(0.0, opt.noise_sigma), 0.0, 1.0);
      vals[i] = v;
    }
    obs.cells[f] = std::move(cells);
    obs.values[f] = std::move(vals);
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Dataset files
//   "RKM1" | u16 version | u32 H W F N_t | H*W building bytes |
//   N_t x (u32 x, u32 y) | F f64 frequencies | F x (f64 min_dB, f64 max_dB) |
//   H*W*F f32 normalized values, band-major.

constexpr std::uint16_t kRadiomapVersion = 1;

inline void save_radiomap(const std::string& path, const RadioScene& scene, const Radiomap& map) {
  if (scene.spec.H != map.H || scene.spec.W != map.W || scene.spec.bands() != map.F)
    throw std::invalid_argument("save_radiomap: scene/map shape mismatch");
  std::string buf;
  buf.append("RKM1", 4);
  detail::put_pod<std::uint16_t>(buf, kRadiomapVersion);
  detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(map.H));
  detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(map.W));
  detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(map.F));
  detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(scene.tx.size()));
  detail::put_bytes(buf, scene.building.data(), scene.building.size());
  for (const Cell& c : scene.tx) {
    detail::put_pod<std::uint32_t>(buf, c.x);
    detail::put_pod<std::uint32_t>(buf, c.y);
  }
  for (double f : scene.spec.frequencies_hz) detail::put_pod<double>(buf, f);
  for (const auto& [lo, hi] : map.calib) {
    detail::put_pod<double>(buf, lo);
    detail::put_pod<double>(buf, hi);
  }
  for (double v : map.values) detail::put_pod<float>(buf, static_cast<float>(v));
  detail::write_file(path, buf);
}

struct DatasetFile {
  RadioScene scene;
  Radiomap map;
};

inline DatasetFile load_radiomap(const std::string& path) {
  const std::string buf = detail::read_file(path);
  detail::ByteReader r(buf, path);
  if (r.bytes(4) != "RKM1") throw std::runtime_error(path + ": bad magic, expected RKM1");
  const auto version = r.pod<std::uint16_t>();
  if (version != kRadiomapVersion)
    throw std::runtime_error(path + ": unsupported radiomap version " + std::to_string(version));
  DatasetFile out;
  const auto H = r.pod<std::uint32_t>();
  const auto W = r.pod<std::uint32_t>();
  const auto F = r.pod<std::uint32_t>();
  const auto n_tx = r.pod<std::uint32_t>();
  out.scene.spec.H = H;
  out.scene.spec.W = W;
  out.scene.spec.n_tx = n_tx;
  out.scene.building.resize(static_cast<std::size_t>(H) * W);
  {
    std::string raw = r.bytes(out.scene.building.size());
    std::copy(raw.begin(), raw.end(), out.scene.building.begin());
  }
  for (std::uint32_t i = 0; i < n_tx; ++i) {
    Cell c;
    c.x = r.pod<std::uint32_t>();
    c.y = r.pod<std::uint32_t>();
    if (c.x >= W || c.y >= H) throw std::runtime_error(path + ": transmitter outside grid");
    out.scene.tx.push_back(c);
  }
  out.scene.spec.frequencies_hz.resize(F);
  for (auto& f : out.scene.spec.frequencies_hz) f = r.pod<double>();
  out.map.H = H;
  out.map.W = W;
  out.map.F = F;
  out.map.calib.resize(F);
  for (auto& [lo, hi] : out.map.calib) {
    lo = r.pod<double>();
    hi = r.pod<double>();
  }
  out.map.values.resize(static_cast<std::size_t>(H) * W * F);
  for (auto& v : out.map.values) v = static_cast<double>(r.pod<float>());
  r.expect_end();
  return out;
}

// Observation files: "RKO1" | u32 N | u32 F | F x ( N u32 flat cells | N f32 values ).

inline void save_observations(const std::string& path, const ObservationSet& obs) {
  std::string buf;
  buf.append("RKO1", 4);
  detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(obs.count()));
  detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(obs.bands()));
  for (std::size_t f = 0; f < obs.bands(); ++f) {
    for (std::uint32_t c : obs.cells[f]) detail::put_pod<std::uint32_t>(buf, c);
    for (double v : obs.values[f]) detail::put_pod<float>(buf, static_cast<float>(v));
  }
  detail::write_file(path, buf);
}

inline ObservationSet load_observations(const std::string& path, std::size_t H, std::size_t W) {
  const std::string buf = detail::read_file(path);
  detail::ByteReader r(buf, path);
  if (r.bytes(4) != "RKO1") throw std::runtime_error(path + ": bad magic, expected RKO1");
  const auto n = r.pod<std::uint32_t>();
  const auto F = r.pod<std::uint32_t>();
  ObservationSet obs;
  obs.H = H;
  obs.W = W;
  obs.ratio = static_cast<double>(n) / (static_cast<double>(H) * static_cast<double>(W));
  obs.cells.resize(F);
  obs.values.resize(F);
  for (std::uint32_t f = 0; f < F; ++f) {
    obs.cells[f].resize(n);
    for (auto& c : obs.cells[f]) {
      c = r.pod<std::uint32_t>();
      if (c >= H * W) throw std::runtime_error(path + ": observation cell outside grid");
    }
    obs.values[f].resize(n);
    for (auto& v : obs.values[f]) v = static_cast<double>(r.pod<float>());
  }
  r.expect_end();
  return obs;
}

}  // namespace rkm
