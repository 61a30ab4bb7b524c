#pragma once

// Experiment drivers: the sampling-ratio sweep over the four methods and the
// five-arm ablation ladder, both emitting deterministic CSV tables.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rkm/config.hpp"
#include "rkm/kan.hpp"
#include "rkm/metrics.hpp"
#include "rkm/priors.hpp"
#include "rkm/refiner.hpp"
#include "rkm/scene.hpp"
#include "rkm/sim.hpp"

namespace rkm {

struct BenchRow {
  std::string method;
  std::string arm = "-";
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::size_t scene_count = 0;
  double nmse_mean = 0.0;
  double nmse_std = 0.0;
  double mse_mean = 0.0;
  double mse_std = 0.0;
  double wall_seconds = 0.0;
};

namespace detail {

inline double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

inline void mean_std(const std::vector<double>& xs, double& mean, double& std_out) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  std_out = std::sqrt(var / static_cast<double>(xs.size()));
}

// Deterministic order regardless of worker count: item i is always task i.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  const std::size_t k = std::min(threads, n);
  pool.reserve(k);
  for (std::size_t t = 0; t < k; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CSV output

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "method,arm,ratio,seed,scene_count,nmse_mean,nmse_std,mse_mean,mse_std,wall_seconds\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%g,%llu,%zu,%.17g,%.17g,%.17g,%.17g,%g\n",
                  r.method.c_str(), r.arm.c_str(), r.ratio,
                  static_cast<unsigned long long>(r.seed), r.scene_count, r.nmse_mean, r.nmse_std,
                  r.mse_mean, r.mse_std, r.wall_seconds);
    out += buf;
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

// Companion metadata: config hash, resolved config, prior channel order and
// the artifact version.
inline std::string bench_metadata(const RunConfig& cfg) {
  std::string out;
  out += "version = ";
  out += kArtifactVersion;
  out += "\n";
  out += "config_hash = " + to_hex(config_hash(cfg)) + "\n";
  ChannelLayout lay{cfg.frequencies_hz.size()};
  out += "channel_order =";
  for (std::size_t f = 0; f < lay.F; ++f) out += " coarse[" + std::to_string(f) + "]";
  for (std::size_t f = 0; f < lay.F; ++f) out += " obs_value[" + std::to_string(f) + "]";
  for (std::size_t f = 0; f < lay.F; ++f) out += " obs_mask[" + std::to_string(f) + "]";
  out += " building transmitter depth\n";
  out += "\n";
  out += echo_config(cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset assembly

struct SceneData {
  RadioScene scene;
  Radiomap truth;
  DepthMap depth;
};

inline std::vector<SceneData> make_dataset(const RunConfig& cfg, std::uint64_t seed,
                                           const std::string& tag, std::size_t count) {
  const SceneSpec spec = to_scene_spec(cfg);
  const SimParams sim = to_sim_params(cfg);
  const std::uint64_t master = derive_seed(seed, tag);
  std::vector<SceneData> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i].scene = generate_scene(spec, derive_seed(master, i));
    out[i].truth = simulate_radiomap(out[i].scene, sim);
    out[i].depth = depth_map(out[i].scene);
  }
  return out;
}

inline std::vector<ObservationSet> sample_dataset(const RunConfig& cfg,
                                                  const std::vector<SceneData>& data,
                                                  double ratio, std::uint64_t seed,
                                                  const std::string& tag) {
  SamplingOptions opt;
  opt.shared_cells = cfg.shared_cells;
  opt.noise_sigma = cfg.noise_sigma;
  const std::uint64_t master = derive_seed(derive_seed(seed, tag), fnv1a64("obs"));
  std::vector<ObservationSet> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    out[i] = sample_observations(data[i].truth, ratio, derive_seed(master, i), opt);
  return out;
}

// Per-scene coarse prior: a fresh network fitted to that scene's observations.
inline Radiomap fit_coarse_prior(const RunConfig& cfg, const SceneData& sd,
                                 const ObservationSet& obs, std::uint64_t seed,
                                 KanNetwork* net_out = nullptr) {
  KanNetwork net = KanNetwork::init(to_kan_widths(cfg), cfg.kan_grid, cfg.kan_order,
                                    derive_seed(seed, "bench-kan-init"));
  train_kan(net, obs, sd.scene, to_kan_train_config(cfg, derive_seed(seed, "bench-kan-train")));
  Radiomap coarse = evaluate_coarse(net, sd.scene);
  if (net_out != nullptr) *net_out = std::move(net);
  return coarse;
}

inline std::vector<Radiomap> fit_coarse_priors(const RunConfig& cfg,
                                               const std::vector<SceneData>& data,
                                               const std::vector<ObservationSet>& obs,
                                               std::uint64_t seed, std::size_t threads) {
  std::vector<Radiomap> out(data.size());
  detail::parallel_for(data.size(), threads, [&](std::size_t i) {
    out[i] = fit_coarse_prior(cfg, data[i], obs[i], derive_seed(seed, i));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Scoring

inline MetricReport score(const RunConfig& cfg, const Radiomap& estimate, const SceneData& sd) {
  return cfg.open_space_metrics ? compute_metrics_open(estimate, sd.truth, sd.scene.building)
                                : compute_metrics(estimate, sd.truth);
}

inline BenchRow aggregate(const RunConfig& cfg, const std::string& method, const std::string& arm,
                          double ratio, std::uint64_t seed,
                          const std::vector<MetricReport>& reports, double wall) {
  BenchRow row;
  row.method = method;
  row.arm = arm;
  row.ratio = ratio;
  row.seed = seed;
  row.scene_count = reports.size();
  std::vector<double> nm, ms;
  nm.reserve(reports.size());
  ms.reserve(reports.size());
  for (const auto& r : reports) {
    nm.push_back(r.nmse_mean);
    ms.push_back(r.mse_mean);
  }
  detail::mean_std(nm, row.nmse_mean, row.nmse_std);
  detail::mean_std(ms, row.mse_mean, row.mse_std);
  row.wall_seconds = cfg.record_timing ? wall : 0.0;
  return row;
}

// ---------------------------------------------------------------------------
// Refiner pipeline pieces shared by the sweep and the ablation

inline std::vector<RefinerSample> build_refiner_samples(const std::vector<SceneData>& data,
                                                        const std::vector<ObservationSet>& obs,
                                                        const std::vector<Radiomap>& coarse,
                                                        bool with_coarse_base) {
  std::vector<RefinerSample> samples;
  samples.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    RefinerSample s;
    s.prior = assemble_prior_tensor(coarse[i], obs[i], data[i].scene, data[i].depth);
    s.base = with_coarse_base
                 ? coarse[i]
                 : zero_radiomap(data[i].truth.H, data[i].truth.W, data[i].truth.F);
    s.truth = data[i].truth;
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Sampling-ratio sweep (methods x ratios x seeds)

inline std::vector<BenchRow> run_experiment(const RunConfig& cfg, std::size_t threads = 1) {
  if (cfg.seeds.empty()) throw std::invalid_argument("run_experiment: no seeds");
  if (cfg.ratios.empty()) throw std::invalid_argument("run_experiment: no ratios");
  bool wants_kan = false, wants_rkm = false;
  for (const auto& m : cfg.methods) {
    if (m == "kan") wants_kan = true;
    else if (m == "rkm") wants_rkm = true;
    else if (m != "idw" && m != "kriging")
      throw std::invalid_argument("run_experiment: unknown method '" + m + "'");
  }

  std::vector<BenchRow> rows;
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<SceneData> train;
    if (wants_rkm) train = make_dataset(cfg, seed, "train", cfg.train_scenes);
    std::vector<SceneData> test = make_dataset(cfg, seed, "test", cfg.test_scenes);

    for (std::size_t ri = 0; ri < cfg.ratios.size(); ++ri) {
      const double ratio = cfg.ratios[ri];
      const std::uint64_t rseed = derive_seed(seed, ri);
      std::vector<ObservationSet> test_obs = sample_dataset(cfg, test, ratio, rseed, "test");

      std::vector<Radiomap> test_coarse;
      if (wants_kan || wants_rkm) {
        const double t0 = detail::now_seconds();
        test_coarse = fit_coarse_priors(cfg, test, test_obs, derive_seed(rseed, "test-kan"),
                                        threads);
        const double kan_wall = detail::now_seconds() - t0;
        if (wants_kan) {
          std::vector<MetricReport> reps;
          for (std::size_t i = 0; i < test.size(); ++i)
            reps.push_back(score(cfg, test_coarse[i], test[i]));
          rows.push_back(aggregate(cfg, "kan", "-", ratio, seed, reps, kan_wall));
        }
      }

      for (const auto& method : cfg.methods) {
        if (method == "idw") {
          const double t0 = detail::now_seconds();
          std::vector<MetricReport> reps;
          for (std::size_t i = 0; i < test.size(); ++i) {
            Radiomap est = idw_interpolate(test_obs[i], test[i].truth.H, test[i].truth.W);
            reps.push_back(score(cfg, est, test[i]));
          }
          rows.push_back(
              aggregate(cfg, "idw", "-", ratio, seed, reps, detail::now_seconds() - t0));
        } else if (method == "kriging") {
          const double t0 = detail::now_seconds();
          std::vector<MetricReport> reps;
          for (std::size_t i = 0; i < test.size(); ++i) {
            KrigingResult kr =
                ordinary_kriging(test_obs[i], test[i].truth.H, test[i].truth.W);
            reps.push_back(score(cfg, kr.map, test[i]));
          }
          rows.push_back(
              aggregate(cfg, "kriging", "-", ratio, seed, reps, detail::now_seconds() - t0));
        } else if (method == "rkm") {
          const double t0 = detail::now_seconds();
          std::vector<ObservationSet> train_obs =
              sample_dataset(cfg, train, ratio, rseed, "train");
          std::vector<Radiomap> train_coarse = fit_coarse_priors(
              cfg, train, train_obs, derive_seed(rseed, "train-kan"), threads);
          std::vector<RefinerSample> samples =
              build_refiner_samples(train, train_obs, train_coarse, true);

          RefinerConfig rcfg = to_refiner_config(cfg);
          RefinerNet net = RefinerNet::init(rcfg, derive_seed(rseed, "refiner-init"));
          RefinerTrainConfig tc;
          tc.epochs = cfg.ref_epochs;
          tc.lr = cfg.ref_lr;
          tc.seed = derive_seed(rseed, "refiner-train");
          train_refiner(net, samples, tc);

          std::vector<MetricReport> reps;
          for (std::size_t i = 0; i < test.size(); ++i) {
            PriorTensor prior = assemble_prior_tensor(test_coarse[i], test_obs[i],
                                                      test[i].scene, test[i].depth);
            Radiomap est = refine(net, prior, test_coarse[i]);
            reps.push_back(score(cfg, est, test[i]));
          }
          rows.push_back(
              aggregate(cfg, "rkm", "-", ratio, seed, reps, detail::now_seconds() - t0));
        }
        // "kan" rows were emitted right after the coarse fits above
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation ladder (Table II row semantics)

struct AblationArm {
  std::string name;
  bool use_moe = false;
  bool with_coarse = false;
  bool with_depth = false;
};

inline std::vector<AblationArm> ablation_ladder() {
  return {{"backbone", false, false, false},
          {"backbone+kan", false, true, false},
          {"backbone+moe", true, false, false},
          {"backbone+moe+kan", true, true, false},
          {"backbone+moe+kan+depth", true, true, true}};
}

// Channel subset an arm consumes; "backbone" sees observations and geometry
// only (2F+2 channels).
inline std::vector<std::size_t> arm_channels(const AblationArm& arm, const ChannelLayout& lay) {
  std::vector<std::size_t> ch;
  if (arm.with_coarse)
    for (std::size_t f = 0; f < lay.F; ++f) ch.push_back(lay.coarse(f));
  for (std::size_t f = 0; f < lay.F; ++f) ch.push_back(lay.obs_value(f));
  for (std::size_t f = 0; f < lay.F; ++f) ch.push_back(lay.obs_mask(f));
  ch.push_back(lay.building());
  ch.push_back(lay.transmitter());
  if (arm.with_depth) ch.push_back(lay.depth());
  return ch;
}

inline std::vector<BenchRow> run_ablation(const RunConfig& cfg, std::size_t threads = 1) {
  if (cfg.seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  const ChannelLayout lay{cfg.frequencies_hz.size()};
  std::vector<BenchRow> rows;
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<SceneData> train = make_dataset(cfg, seed, "ab-train", cfg.ablation_train_scenes);
    std::vector<SceneData> test = make_dataset(cfg, seed, "ab-test", cfg.ablation_test_scenes);
    const std::uint64_t rseed = derive_seed(seed, "ablation");
    std::vector<ObservationSet> train_obs =
        sample_dataset(cfg, train, cfg.ablation_ratio, rseed, "train");
    std::vector<ObservationSet> test_obs =
        sample_dataset(cfg, test, cfg.ablation_ratio, rseed, "test");
    // One shared coarse fit per scene: every arm sees identical priors.
    std::vector<Radiomap> train_coarse =
        fit_coarse_priors(cfg, train, train_obs, derive_seed(rseed, "train-kan"), threads);
    std::vector<Radiomap> test_coarse =
        fit_coarse_priors(cfg, test, test_obs, derive_seed(rseed, "test-kan"), threads);

    for (const AblationArm& arm : ablation_ladder()) {
      const double t0 = detail::now_seconds();
      RefinerConfig rcfg = to_refiner_config(cfg);
      rcfg.use_moe = arm.use_moe;
      rcfg.channels = arm_channels(arm, lay);

      std::vector<RefinerSample> samples =
          build_refiner_samples(train, train_obs, train_coarse, arm.with_coarse);
      RefinerNet net = RefinerNet::init(rcfg, derive_seed(rseed, "refiner-init"));
      RefinerTrainConfig tc;
      tc.epochs = cfg.ablation_epochs;
      tc.lr = cfg.ref_lr;
      tc.seed = derive_seed(rseed, "refiner-train");
      train_refiner(net, samples, tc);

      std::vector<MetricReport> reps;
      for (std::size_t i = 0; i < test.size(); ++i) {
        PriorTensor prior =
            assemble_prior_tensor(test_coarse[i], test_obs[i], test[i].scene, test[i].depth);
        Radiomap base = arm.with_coarse
                            ? test_coarse[i]
                            : zero_radiomap(test[i].truth.H, test[i].truth.W, test[i].truth.F);
        Radiomap est = refine(net, prior, base);
        reps.push_back(score(cfg, est, test[i]));
      }
      rows.push_back(aggregate(cfg, "ablation", arm.name, cfg.ablation_ratio, seed, reps,
                               detail::now_seconds() - t0));
    }
  }
  return rows;
}

}  // namespace rkm
