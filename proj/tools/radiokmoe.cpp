// Command-line surface for the two-stage pipeline: dataset generation, the
// KAN coarse stage, refiner training, end-to-end estimates, the sampling
// sweep, the ablation ladder, rendering and the acceptance selftest.
//
// Every subcommand is deterministic in (config, seed) and writes only under
// the configured output directory.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rkm/bench.hpp"
#include "rkm/config.hpp"
#include "rkm/render.hpp"
#include "rkm/selftest.hpp"

namespace fs = std::filesystem;

namespace {

struct CliState {
  std::string config_path;
  std::string out_override;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t threads = 1;

  rkm::RunConfig cfg;
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// file, then --set overrides in order, then flag overrides
void resolve_config(CliState& st) {
  if (!st.config_path.empty()) st.cfg = rkm::parse_config(read_file(st.config_path));
  for (const auto& kv : st.sets) {
    try {
      rkm::apply_config_text(st.cfg, kv);
    } catch (const std::exception& e) {
      throw std::runtime_error("--set '" + kv + "': " + e.what());
    }
  }
  if (!st.out_override.empty()) st.cfg.out_dir = st.out_override;
  if (st.seed_given)
    st.cfg.seeds = {st.seed};
  else
    st.seed = st.cfg.seeds.empty() ? 1 : st.cfg.seeds.front();
}

fs::path prepare_out(const CliState& st) {
  const fs::path out(st.cfg.out_dir);
  fs::create_directories(out);
  rkm::write_text_file((out / "config.cfg").string(), rkm::echo_config(st.cfg));
  return out;
}

std::string numbered(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu%s", stem, i, ext);
  return buf;
}

double first_ratio(const rkm::RunConfig& cfg) {
  if (cfg.ratios.empty()) throw std::runtime_error("config has an empty ratio list");
  return cfg.ratios.front();
}

// The single-run subcommands share the sweep's seed chains for ratio index 0,
// so their artifacts match what `experiment` computes internally.
std::uint64_t stage_seed(const CliState& st) { return rkm::derive_seed(st.seed, std::size_t{0}); }

rkm::Radiomap load_prior(const fs::path& path) {
  if (!fs::exists(path))
    throw std::runtime_error("missing prior map " + path.string() + "; run train-kan first");
  return rkm::load_radiomap(path.string()).map;
}

int cmd_generate(CliState& st) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  fs::create_directories(out / "scenes");
  std::size_t written = 0;
  for (const auto& [tag, count] :
       std::vector<std::pair<const char*, std::size_t>>{{"train", st.cfg.train_scenes},
                                                        {"val", st.cfg.val_scenes},
                                                        {"test", st.cfg.test_scenes}}) {
    const auto data = rkm::make_dataset(st.cfg, st.seed, tag, count);
    for (std::size_t i = 0; i < data.size(); ++i) {
      rkm::save_radiomap((out / "scenes" / numbered(tag, i, ".rkm1")).string(), data[i].scene,
                         data[i].truth);
      ++written;
    }
  }
  std::cout << "generated " << written << " scenes under " << (out / "scenes").string() << "\n";
  return 0;
}

int cmd_train_kan(CliState& st) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  fs::create_directories(out / "kan");
  fs::create_directories(out / "prior");
  const double ratio = first_ratio(st.cfg);
  const std::uint64_t rseed = stage_seed(st);
  for (const auto& [tag, count] : std::vector<std::pair<const char*, std::size_t>>{
           {"train", st.cfg.train_scenes}, {"test", st.cfg.test_scenes}}) {
    const auto data = rkm::make_dataset(st.cfg, st.seed, tag, count);
    const auto obs = rkm::sample_dataset(st.cfg, data, ratio, rseed, tag);
    const std::uint64_t fit_master = rkm::derive_seed(rseed, std::string(tag) + "-kan");
    for (std::size_t i = 0; i < data.size(); ++i) {
      rkm::KanNetwork net;
      const rkm::Radiomap coarse = rkm::fit_coarse_prior(st.cfg, data[i], obs[i],
                                                         rkm::derive_seed(fit_master, i), &net);
      rkm::save_checkpoint((out / "kan" / numbered(tag, i, ".rkck")).string(),
                           rkm::kan_to_named_tensors(net));
      rkm::save_radiomap((out / "prior" / numbered(tag, i, ".rkm1")).string(), data[i].scene,
                         coarse);
    }
  }
  std::cout << "fitted " << (st.cfg.train_scenes + st.cfg.test_scenes)
            << " coarse priors at ratio " << ratio << " under " << out.string() << "\n";
  return 0;
}

int cmd_eval_kan(CliState& st) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  const double ratio = first_ratio(st.cfg);
  const auto data = rkm::make_dataset(st.cfg, st.seed, "test", st.cfg.test_scenes);
  std::vector<rkm::MetricReport> reps;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const rkm::Radiomap prior = load_prior(out / "prior" / numbered("test", i, ".rkm1"));
    reps.push_back(rkm::score(st.cfg, prior, data[i]));
  }
  const rkm::BenchRow row = rkm::aggregate(st.cfg, "kan", "-", ratio, st.seed, reps, 0.0);
  const std::string csv = rkm::bench_csv({row});
  rkm::write_text_file((out / "eval_kan.csv").string(), csv);
  std::cout << csv;
  return 0;
}

int cmd_train_refiner(CliState& st) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  const double ratio = first_ratio(st.cfg);
  const std::uint64_t rseed = stage_seed(st);
  const auto data = rkm::make_dataset(st.cfg, st.seed, "train", st.cfg.train_scenes);
  const auto obs = rkm::sample_dataset(st.cfg, data, ratio, rseed, "train");
  std::vector<rkm::Radiomap> coarse;
  for (std::size_t i = 0; i < data.size(); ++i)
    coarse.push_back(load_prior(out / "prior" / numbered("train", i, ".rkm1")));
  const auto samples = rkm::build_refiner_samples(data, obs, coarse, true);

  const rkm::RefinerConfig rcfg = rkm::to_refiner_config(st.cfg);
  rkm::RefinerNet net = rkm::RefinerNet::init(rcfg, rkm::derive_seed(rseed, "refiner-init"));
  rkm::RefinerTrainConfig tc;
  tc.epochs = st.cfg.ref_epochs;
  tc.lr = st.cfg.ref_lr;
  tc.seed = rkm::derive_seed(rseed, "refiner-train");
  const rkm::RefinerTrainResult result = rkm::train_refiner(net, samples, tc);
  rkm::save_refiner(net, (out / "refiner.rkck").string());

  std::string stats = "epoch,expert,token_fraction,mean_gate\n";
  char buf[128];
  for (std::size_t e = 0; e < result.utilization.size(); ++e)
    for (std::size_t x = 0; x < result.utilization[e].size(); ++x) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g\n", e, x, result.utilization[e][x],
                    result.gate_means[e][x]);
      stats += buf;
    }
  rkm::write_text_file((out / "routing_stats.csv").string(), stats);
  std::cout << "refiner trained: loss " << result.initial_loss << " -> " << result.final_loss
            << ", checkpoint " << (out / "refiner.rkck").string() << "\n";
  return 0;
}

int cmd_estimate(CliState& st) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  const double ratio = first_ratio(st.cfg);
  const std::uint64_t rseed = stage_seed(st);
  const auto data = rkm::make_dataset(st.cfg, st.seed, "test", st.cfg.test_scenes);
  const auto obs = rkm::sample_dataset(st.cfg, data, ratio, rseed, "test");

  const rkm::RefinerConfig rcfg = rkm::to_refiner_config(st.cfg);
  // an untrained refiner has a zero-initialized head, so its estimates
  // reproduce the coarse priors exactly
  rkm::RefinerNet net = fs::exists(out / "refiner.rkck")
                            ? rkm::load_refiner((out / "refiner.rkck").string())
                            : rkm::RefinerNet::init(rcfg, rkm::derive_seed(rseed, "refiner-init"));

  std::vector<rkm::MetricReport> reps;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const rkm::Radiomap prior = load_prior(out / "prior" / numbered("test", i, ".rkm1"));
    const rkm::PriorTensor cond =
        rkm::assemble_prior_tensor(prior, obs[i], data[i].scene, data[i].depth);
    const rkm::Radiomap est = rkm::refine(net, cond, prior);
    rkm::save_radiomap((out / numbered("estimate", i, ".rkm1")).string(), data[i].scene, est);
    reps.push_back(rkm::score(st.cfg, est, data[i]));
  }
  const rkm::BenchRow row = rkm::aggregate(st.cfg, "rkm", "-", ratio, st.seed, reps, 0.0);
  const std::string csv = rkm::bench_csv({row});
  rkm::write_text_file((out / "eval_rkm.csv").string(), csv);
  std::cout << csv;
  return 0;
}

int cmd_experiment(CliState& st) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  const auto rows = rkm::run_experiment(st.cfg, st.threads);
  rkm::write_text_file((out / "experiment.csv").string(), rkm::bench_csv(rows));
  rkm::write_text_file((out / "experiment.meta").string(), rkm::bench_metadata(st.cfg));
  std::cout << "wrote " << rows.size() << " rows to " << (out / "experiment.csv").string()
            << "\n";
  return 0;
}

int cmd_ablate(CliState& st) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  const auto rows = rkm::run_ablation(st.cfg, st.threads);
  rkm::write_text_file((out / "ablation.csv").string(), rkm::bench_csv(rows));
  rkm::write_text_file((out / "ablation.meta").string(), rkm::bench_metadata(st.cfg));
  std::cout << "wrote " << rows.size() << " rows to " << (out / "ablation.csv").string() << "\n";
  return 0;
}

int cmd_render(CliState& st, const std::string& input, std::size_t band, bool overlay) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  if (!fs::exists(input)) throw std::runtime_error("missing map file: " + input);
  const rkm::DatasetFile file = rkm::load_radiomap(input);
  const std::string name =
      fs::path(input).stem().string() + "_b" + std::to_string(band) + ".ppm";
  const fs::path target = out / name;
  rkm::render_map(file.map, band, target.string(), overlay ? &file.scene.building : nullptr);
  std::cout << "wrote " << target.string() << "\n";
  return 0;
}

int cmd_selftest(CliState& st) {
  resolve_config(st);
  const fs::path out = prepare_out(st);
  const auto results = rkm::run_acceptance((out / "selftest_scratch").string(), std::cout);
  return rkm::acceptance_ok(results) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RadioKMoE desk-scale pipeline"};
  app.require_subcommand(1);

  CliState st;
  app.add_option("--config", st.config_path, "config file (key = value lines)");
  auto* seed_opt = app.add_option("--seed", st.seed, "base seed");
  app.add_option("--out", st.out_override, "output directory (overrides config)");
  app.add_option("--threads", st.threads, "worker threads for independent fits");
  app.add_option("--set", st.sets, "config override key=value, repeatable, applied after file");

  app.fallthrough();  // global flags may follow the subcommand name

  auto* c_generate = app.add_subcommand("generate", "write train/val/test scenes and maps");
  auto* c_train_kan = app.add_subcommand("train-kan", "fit per-scene coarse KAN priors");
  auto* c_eval_kan = app.add_subcommand("eval-kan", "score the coarse priors on the test split");
  auto* c_train_ref = app.add_subcommand("train-refiner", "train the refiner on train priors");
  auto* c_estimate = app.add_subcommand("estimate", "run the full two-stage estimate");
  auto* c_experiment = app.add_subcommand("experiment", "sampling-ratio sweep over all methods");
  auto* c_ablate = app.add_subcommand("ablate", "five-arm ablation ladder");
  auto* c_render = app.add_subcommand("render", "render one band of a map file to PPM");
  auto* c_selftest = app.add_subcommand("selftest", "run the acceptance suite");

  std::string render_input;
  std::size_t render_band = 0;
  bool render_overlay = false;
  c_render->add_option("input", render_input, "map file (.rkm1)")->required();
  c_render->add_option("--band", render_band, "band index");
  c_render->add_flag("--overlay", render_overlay, "paint building cells in the reserved color");

  try {
    app.parse(argc, argv);
    st.seed_given = seed_opt->count() > 0;
    if (c_generate->parsed()) return cmd_generate(st);
    if (c_train_kan->parsed()) return cmd_train_kan(st);
    if (c_eval_kan->parsed()) return cmd_eval_kan(st);
    if (c_train_ref->parsed()) return cmd_train_refiner(st);
    if (c_estimate->parsed()) return cmd_estimate(st);
    if (c_experiment->parsed()) return cmd_experiment(st);
    if (c_ablate->parsed()) return cmd_ablate(st);
    if (c_render->parsed()) return cmd_render(st, render_input, render_band, render_overlay);
    if (c_selftest->parsed()) return cmd_selftest(st);
    std::cerr << "error: no subcommand\n";
    return 1;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
