#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rkm/bench.hpp"
#include "rkm/metrics.hpp"

using Catch::Matchers::WithinAbs;

namespace {

rkm::Radiomap make_map(std::size_t H, std::size_t W, std::size_t F,
                       const std::vector<double>& values) {
  rkm::Radiomap m;
  m.H = H;
  m.W = W;
  m.F = F;
  m.values = values;
  m.calib.assign(F, {0.0, 1.0});
  return m;
}

rkm::ObservationSet make_obs(std::size_t H, std::size_t W,
                             std::vector<std::uint32_t> cells, std::vector<double> values) {
  rkm::ObservationSet o;
  o.H = H;
  o.W = W;
  o.ratio = static_cast<double>(cells.size()) / static_cast<double>(H * W);
  o.cells = {std::move(cells)};
  o.values = {std::move(values)};
  return o;
}

// Plain Gauss-Jordan with partial pivoting, nothing shared with the library's
// LU path.
std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    REQUIRE(std::fabs(a[col][col]) > 1e-14);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t k = col; k < n; ++k) a[r][k] -= f * a[col][k];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = b[i] / a[i][i];
  return x;
}

}  // namespace

TEST_CASE("compute_metrics: definitions and hand examples") {
  SECTION("perfect reconstruction") {
    auto truth = make_map(3, 3, 2, std::vector<double>(18, 0.4));
    auto rep = rkm::compute_metrics(truth, truth);
    CHECK(rep.mse_mean == 0.0);
    CHECK(rep.nmse_mean == 0.0);
  }

  SECTION("all-zero estimate gives NMSE 1") {
    auto truth = make_map(2, 3, 1, {0.1, 0.5, 0.9, 0.2, 0.3, 0.7});
    auto est = make_map(2, 3, 1, std::vector<double>(6, 0.0));
    auto rep = rkm::compute_metrics(est, truth);
    CHECK_THAT(rep.nmse[0], WithinAbs(1.0, 1e-15));
  }

  SECTION("2x2 hand example") {
    auto truth = make_map(2, 2, 1, {1, 1, 1, 1});
    auto est = make_map(2, 2, 1, {1, 1, 1, 0});
    auto rep = rkm::compute_metrics(est, truth);
    CHECK(rep.mse[0] == 0.25);
    CHECK(rep.nmse[0] == 0.25);
  }

  SECTION("all-zero truth band is rejected") {
    auto truth = make_map(2, 2, 1, {0, 0, 0, 0});
    auto est = make_map(2, 2, 1, {1, 0, 0, 0});
    CHECK_THROWS_AS(rkm::compute_metrics(est, truth), std::invalid_argument);
  }

  SECTION("shape mismatch is rejected") {
    auto truth = make_map(2, 2, 1, {1, 1, 1, 1});
    auto est = make_map(2, 3, 1, std::vector<double>(6, 1.0));
    CHECK_THROWS_AS(rkm::compute_metrics(est, truth), std::invalid_argument);
  }

  SECTION("averages are arithmetic band means") {
    // band 0 error 0, band 1 NMSE 1
    auto truth = make_map(2, 2, 2, {0.5, 0.5, 0.5, 0.5, 0.3, 0.3, 0.3, 0.3});
    auto est = make_map(2, 2, 2, {0.5, 0.5, 0.5, 0.5, 0, 0, 0, 0});
    auto rep = rkm::compute_metrics(est, truth);
    CHECK_THAT(rep.nmse_mean, WithinAbs((rep.nmse[0] + rep.nmse[1]) / 2.0, 1e-15));
    CHECK_THAT(rep.mse_mean, WithinAbs((rep.mse[0] + rep.mse[1]) / 2.0, 1e-15));
    CHECK_THAT(rep.nmse_mean, WithinAbs(0.5, 1e-15));
  }

  SECTION("MSE symmetry, NMSE asymmetry") {
    rkm::Rng rng(3);
    std::vector<double> a(16), b(16);
    for (auto& v : a) v = rng.uniform(0.1, 1.0);
    for (auto& v : b) v = rng.uniform(0.1, 1.0);
    auto ma = make_map(4, 4, 1, a), mb = make_map(4, 4, 1, b);
    auto ab = rkm::compute_metrics(ma, mb), ba = rkm::compute_metrics(mb, ma);
    CHECK(ab.mse[0] == ba.mse[0]);
    CHECK(ab.nmse[0] != ba.nmse[0]);
  }

  SECTION("scale identity MSE = NMSE * sum(R^2)/(H*W)") {
    rkm::Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t H = 3 + static_cast<std::size_t>(rng.uniform_int(0, 5));
      const std::size_t W = 3 + static_cast<std::size_t>(rng.uniform_int(0, 5));
      std::vector<double> t(H * W), e(H * W);
      for (auto& v : t) v = rng.uniform(0.05, 1.0);
      for (auto& v : e) v = rng.uniform(0.0, 1.0);
      auto rep = rkm::compute_metrics(make_map(H, W, 1, e), make_map(H, W, 1, t));
      double ref2 = 0.0;
      for (double v : t) ref2 += v * v;
      CHECK_THAT(rep.mse[0], WithinAbs(rep.nmse[0] * ref2 / static_cast<double>(H * W), 1e-12));
    }
  }

  SECTION("open-space variant ignores building cells") {
    auto truth = make_map(2, 2, 1, {0.5, 0.5, 0.5, 0.5});
    auto est = make_map(2, 2, 1, {0.5, 0.5, 0.5, 0.9});  // error only at cell 3
    std::vector<std::uint8_t> building = {0, 0, 0, 1};
    auto rep = rkm::compute_metrics_open(est, truth, building);
    CHECK(rep.mse[0] == 0.0);
    auto full = rkm::compute_metrics(est, truth);
    CHECK(full.mse[0] > 0.0);
  }
}

TEST_CASE("idw interpolation") {
  SECTION("single observation gives a constant map") {
    auto obs = make_obs(4, 4, {5}, {0.7});
    auto map = rkm::idw_interpolate(obs, 4, 4);
    for (double v : map.values) CHECK(v == 0.7);
  }

  SECTION("exact passthrough at observed cells") {
    auto obs = make_obs(4, 4, {1, 9, 14}, {0.2, 0.8, 0.5});
    auto map = rkm::idw_interpolate(obs, 4, 4);
    CHECK(map.values[1] == 0.2);
    CHECK(map.values[9] == 0.8);
    CHECK(map.values[14] == 0.5);
  }

  SECTION("matches a direct weighted-sum oracle") {
    auto obs = make_obs(4, 4, {1, 9, 14}, {0.2, 0.8, 0.5});
    auto map = rkm::idw_interpolate(obs, 4, 4, 2.0);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        const std::size_t cell = y * 4 + x;
        bool observed = false;
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
          const double dx = static_cast<double>(x) - static_cast<double>(obs.cells[0][i] % 4);
          const double dy = static_cast<double>(y) - static_cast<double>(obs.cells[0][i] / 4);
          const double d2 = dx * dx + dy * dy;
          if (d2 == 0.0) {
            observed = true;
            break;
          }
          const double w = 1.0 / d2;  // power 2: w = d^-2
          num += w * obs.values[0][i];
          den += w;
        }
        if (!observed) CHECK_THAT(map.values[cell], WithinAbs(num / den, 1e-12));
      }
  }
}

TEST_CASE("variogram fit and ordinary kriging") {
  SECTION("variogram model basics") {
    rkm::Variogram vg{0.0, 2.0, 4.0};
    CHECK(vg(0.0) == 0.0);
    CHECK(vg(-1.0) == 0.0);
    CHECK(vg(1e9) > 1.999);
    CHECK(vg(2.0) < vg(5.0));
  }

  SECTION("two equal observations give a constant map") {
    auto obs = make_obs(6, 6, {7, 28}, {0.42, 0.42});
    auto res = rkm::ordinary_kriging(obs, 6, 6);
    CHECK_FALSE(res.fallback);
    for (double v : res.map.values) CHECK_THAT(v, WithinAbs(0.42, 1e-10));
  }

  SECTION("weights sum to 1 at every predicted cell") {
    rkm::SceneSpec spec;
    auto scene = rkm::generate_scene(spec, 5);
    auto truth = rkm::simulate_radiomap(scene);
    auto obs = rkm::sample_observations(truth, 0.03, 6);
    auto res = rkm::ordinary_kriging(obs, 32, 32);
    CHECK_FALSE(res.fallback);
    CHECK(res.max_weight_dev <= 1e-10);
  }

  SECTION("5 observations on 8x8 match an independent dense-solve oracle") {
    auto obs = make_obs(8, 8, {3, 17, 30, 44, 59}, {0.9, 0.3, 0.55, 0.2, 0.7});
    const auto vg = rkm::fit_variogram(obs.cells[0], obs.values[0], 8);
    auto res = rkm::ordinary_kriging(obs, 8, 8, &vg);
    CHECK_FALSE(res.fallback);

    const std::size_t n = 5;
    auto dist = [&](std::uint32_t a, std::uint32_t b) {
      const double dx = static_cast<double>(a % 8) - static_cast<double>(b % 8);
      const double dy = static_cast<double>(a / 8) - static_cast<double>(b / 8);
      return std::sqrt(dx * dx + dy * dy);
    };
    for (std::uint32_t cell = 0; cell < 64; ++cell) {
      std::vector<std::vector<double>> A(n + 1, std::vector<double>(n + 1, 0.0));
      std::vector<double> rhs(n + 1, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) A[i][j] = vg(dist(obs.cells[0][i], obs.cells[0][j]));
        A[i][n] = 1.0;
        A[n][i] = 1.0;
        rhs[i] = vg(dist(obs.cells[0][i], cell));
      }
      rhs[n] = 1.0;
      const auto w = solve_dense(A, rhs);
      double pred = 0.0;
      for (std::size_t i = 0; i < n; ++i) pred += w[i] * obs.values[0][i];
      CHECK_THAT(res.map.values[cell], WithinAbs(pred, 1e-8));
    }
  }

  SECTION("exact at observed cells with zero nugget") {
    auto obs = make_obs(8, 8, {3, 17, 30, 44, 59}, {0.9, 0.3, 0.55, 0.2, 0.7});
    auto res = rkm::ordinary_kriging(obs, 8, 8);
    for (std::size_t i = 0; i < 5; ++i)
      CHECK_THAT(res.map.values[obs.cells[0][i]], WithinAbs(obs.values[0][i], 1e-8));
  }

  SECTION("one observation falls back to IDW") {
    auto obs = make_obs(6, 6, {14}, {0.33});
    auto res = rkm::ordinary_kriging(obs, 6, 6);
    CHECK(res.fallback);
    for (double v : res.map.values) CHECK(v == 0.33);
    CHECK_THROWS_AS(rkm::ordinary_kriging(obs, 6, 6, nullptr, false), std::invalid_argument);
  }
}

TEST_CASE("bench rows and csv") {
  SECTION("population std over scene aggregates") {
    rkm::RunConfig cfg;
    std::vector<rkm::MetricReport> reps(2);
    reps[0].nmse_mean = 1.0;
    reps[0].mse_mean = 0.5;
    reps[1].nmse_mean = 3.0;
    reps[1].mse_mean = 1.5;
    auto row = rkm::aggregate(cfg, "idw", "-", 0.01, 9, reps, 2.5);
    CHECK(row.nmse_mean == 2.0);
    CHECK(row.nmse_std == 1.0);
    CHECK(row.mse_mean == 1.0);
    CHECK(row.mse_std == 0.5);
    CHECK(row.wall_seconds == 0.0);  // timing left out unless record_timing
    cfg.record_timing = true;
    CHECK(rkm::aggregate(cfg, "idw", "-", 0.01, 9, reps, 2.5).wall_seconds == 2.5);
  }

  SECTION("csv header and formatting") {
    rkm::BenchRow row;
    row.method = "idw";
    row.ratio = 0.01;
    row.seed = 7;
    row.scene_count = 3;
    row.nmse_mean = 0.125;
    const std::string csv = rkm::bench_csv({row});
    CHECK(csv.rfind("method,arm,ratio,seed,scene_count,nmse_mean,nmse_std,mse_mean,mse_std,"
                    "wall_seconds\n", 0) == 0);
    CHECK(csv.find("idw,-,0.01,7,3,0.125,0,0,0,0\n") != std::string::npos);
  }

  SECTION("metadata carries version, hash and channel order") {
    rkm::RunConfig cfg;
    const std::string meta = rkm::bench_metadata(cfg);
    CHECK(meta.find(rkm::kArtifactVersion) != std::string::npos);
    CHECK(meta.find("config_hash = ") != std::string::npos);
    CHECK(meta.find("coarse[1] obs_value[0]") != std::string::npos);
    CHECK(meta.find("building transmitter depth") != std::string::npos);
    CHECK(meta.find("grid_h = 32") != std::string::npos);
  }
}

TEST_CASE("experiment sweep") {
  SECTION("degenerate sweep: one method, one ratio, one seed -> one row") {
    rkm::RunConfig cfg;
    cfg.methods = {"idw"};
    cfg.ratios = {0.01};
    cfg.seeds = {1};
    cfg.test_scenes = 3;
    auto rows = rkm::run_experiment(cfg);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].method == "idw");
    CHECK(rows[0].arm == "-");
    CHECK(rows[0].ratio == 0.01);
    CHECK(rows[0].scene_count == 3);
  }

  SECTION("row count is methods x ratios x seeds") {
    rkm::RunConfig cfg;
    cfg.methods = {"idw", "kriging"};
    cfg.ratios = {0.01, 0.05, 0.2};
    cfg.seeds = {1, 2};
    cfg.test_scenes = 2;
    auto rows = rkm::run_experiment(cfg);
    CHECK(rows.size() == 12);
  }

  SECTION("rerun with the same config is byte-identical") {
    rkm::RunConfig cfg;
    cfg.methods = {"idw", "kriging"};
    cfg.ratios = {0.001, 0.02};
    cfg.seeds = {1, 2};
    cfg.test_scenes = 3;
    const std::string a = rkm::bench_csv(rkm::run_experiment(cfg));
    const std::string b = rkm::bench_csv(rkm::run_experiment(cfg));
    CHECK(a == b);
  }

  SECTION("unknown method is rejected") {
    rkm::RunConfig cfg;
    cfg.methods = {"psychic"};
    CHECK_THROWS_AS(rkm::run_experiment(cfg), std::invalid_argument);
  }

  SECTION("KAN fits free space better than dense building clutter") {
    rkm::RunConfig cfg;
    cfg.frequencies_hz = {868e6};
    cfg.methods = {"kan"};
    cfg.ratios = {0.05};
    cfg.seeds = {1};
    cfg.test_scenes = 3;
    cfg.kan_epochs = 600;
    rkm::RunConfig free_cfg = cfg;
    free_cfg.buildings_min = free_cfg.buildings_max = 0;
    rkm::RunConfig dense_cfg = cfg;
    dense_cfg.buildings_min = 6;
    dense_cfg.buildings_max = 8;
    dense_cfg.building_size_min = 4;
    dense_cfg.building_size_max = 7;
    const double nmse_free = rkm::run_experiment(free_cfg)[0].nmse_mean;
    const double nmse_dense = rkm::run_experiment(dense_cfg)[0].nmse_mean;
    CHECK(nmse_free < nmse_dense);
  }
}

TEST_CASE("ablation ladder") {
  SECTION("five arms in Table-II order") {
    const auto ladder = rkm::ablation_ladder();
    REQUIRE(ladder.size() == 5);
    CHECK(ladder[0].name == "backbone");
    CHECK(ladder[1].name == "backbone+kan");
    CHECK(ladder[2].name == "backbone+moe");
    CHECK(ladder[3].name == "backbone+moe+kan");
    CHECK(ladder[4].name == "backbone+moe+kan+depth");
    CHECK_FALSE(ladder[0].use_moe);
    CHECK_FALSE(ladder[0].with_coarse);
    CHECK(ladder[4].use_moe);
    CHECK(ladder[4].with_coarse);
    CHECK(ladder[4].with_depth);
  }

  SECTION("backbone consumes 2F+2 channels, no coarse, no depth") {
    rkm::ChannelLayout lay{2};
    const auto ladder = rkm::ablation_ladder();
    const auto backbone = rkm::arm_channels(ladder[0], lay);
    CHECK(backbone.size() == 2 * 2 + 2);
    for (std::size_t ch : backbone) {
      CHECK(ch != lay.coarse(0));
      CHECK(ch != lay.coarse(1));
      CHECK(ch != lay.depth());
    }
    const auto full = rkm::arm_channels(ladder[4], lay);
    CHECK(full.size() == lay.channels());
  }

  SECTION("dense backbone is parameter-matched within 10%") {
    rkm::RefinerConfig cfg = rkm::default_refiner_config(2);
    const double moe = static_cast<double>(cfg.moe_param_count());
    rkm::RefinerConfig dense = cfg;
    dense.use_moe = false;
    const double K = static_cast<double>(cfg.token_dim);
    const double h = static_cast<double>(dense.ffn_hidden());
    const double dense_params = h * (2.0 * K + 1.0) + K;
    CHECK(std::fabs(dense_params - moe) / moe < 0.10);
  }

  SECTION("tiny ladder run emits five ordered rows per seed") {
    rkm::RunConfig cfg;
    cfg.seeds = {4};
    cfg.ablation_train_scenes = 2;
    cfg.ablation_test_scenes = 2;
    cfg.ablation_epochs = 2;
    cfg.kan_epochs = 30;
    auto rows = rkm::run_ablation(cfg);
    REQUIRE(rows.size() == 5);
    CHECK(rows[0].arm == "backbone");
    CHECK(rows[4].arm == "backbone+moe+kan+depth");
    for (const auto& r : rows) {
      CHECK(r.method == "ablation");
      CHECK(r.ratio == 0.01);
      CHECK(r.scene_count == 2);
      CHECK(r.nmse_mean > 0.0);
    }
  }

  SECTION("observation sampling is deterministic, so arms stay paired") {
    rkm::RunConfig cfg;
    cfg.test_scenes = 2;
    auto data = rkm::make_dataset(cfg, 3, "ab-test", 2);
    auto a = rkm::sample_dataset(cfg, data, 0.01, 11, "test");
    auto b = rkm::sample_dataset(cfg, data, 0.01, 11, "test");
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].cells == b[i].cells);
      CHECK(a[i].values == b[i].values);
    }
  }
}
