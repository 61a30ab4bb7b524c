#pragma once

// Kolmogorov–Arnold coarse prior. Every edge carries a learnable 1-D
// function w_b*silu(x) + w_s*(coeffs . bspline_basis(x)); a layer output is
// the plain sum of its incoming edge functions, no biases.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "rkm/scene.hpp"
#include "rkm/tensor.hpp"

namespace rkm {

// ---------------------------------------------------------------------------
// Uniform cubic-style B-spline grid: G intervals on [-1,1] padded by k extra
// intervals per side, so all G+k basis functions are supported on the span.

struct SplineGrid {
  std::size_t G = 8;
  std::size_t k = 3;
  double step = 0.25;
  std::vector<double> knots;  // G + 2k + 1, uniform

  static SplineGrid make(std::size_t G, std::size_t k) {
    if (G < 1) throw std::invalid_argument("SplineGrid: need at least one interval");
    SplineGrid g;
    g.G = G;
    g.k = k;
    g.step = 2.0 / static_cast<double>(G);
    g.knots.resize(G + 2 * k + 1);
    for (std::size_t j = 0; j < g.knots.size(); ++j)
      g.knots[j] = -1.0 - static_cast<double>(k) * g.step + static_cast<double>(j) * g.step;
    return g;
  }

  std::size_t basis_count() const { return G + k; }
};

namespace detail {

// Cox–de Boor over the whole knot span. Inputs are clamped to [-1,1]; the
// seeding interval is clamped to [k, k+G-1] so the partition of unity holds
// at x = 1 exactly (last interval treated as closed).
inline void bspline_eval(double x, const SplineGrid& g, double* basis, double* deriv) {
  const std::size_t nb = g.basis_count();
  const double xc = std::clamp(x, -1.0, 1.0);
  std::size_t j = g.k + static_cast<std::size_t>(std::max(
                            0.0, std::floor((xc + 1.0) / g.step)));
  j = std::min(j, g.k + g.G - 1);

  const std::size_t intervals = g.G + 2 * g.k;
  std::vector<double> work(intervals, 0.0);
  work[j] = 1.0;
  std::vector<double> prev;  // order k-1 values, for the derivative
  for (std::size_t r = 1; r <= g.k; ++r) {
    if (r == g.k && deriv) prev.assign(work.begin(), work.end());
    for (std::size_t i = 0; i + r < intervals; ++i) {
      const double left = (xc - g.knots[i]) / (g.knots[i + r] - g.knots[i]) * work[i];
      const double right = (g.knots[i + r + 1] - xc) /
                           (g.knots[i + r + 1] - g.knots[i + 1]) * work[i + 1];
      work[i] = left + right;
    }
  }
  for (std::size_t i = 0; i < nb; ++i) basis[i] = work[i];
  if (deriv) {
    const bool clamped = x < -1.0 || x > 1.0;
    for (std::size_t i = 0; i < nb; ++i) {
      if (clamped) {
        deriv[i] = 0.0;
        continue;
      }
      if (g.k == 0) {
        deriv[i] = 0.0;
        continue;
      }
      // d/dx B_{i,k} = k*(B_{i,k-1}/(t_{i+k}-t_i) - B_{i+1,k-1}/(t_{i+k+1}-t_{i+1}))
      const double a = prev[i] / (g.knots[i + g.k] - g.knots[i]);
      const double b = prev[i + 1] / (g.knots[i + g.k + 1] - g.knots[i + 1]);
      deriv[i] = static_cast<double>(g.k) * (a - b);
    }
  }
}

}  // namespace detail

inline std::vector<double> bspline_basis(double x, const SplineGrid& g) {
  std::vector<double> out(g.basis_count());
  detail::bspline_eval(x, g, out.data(), nullptr);
  return out;
}

// Order-0 oracle mode: the interval indicator over the G intervals of [-1,1].
inline std::vector<double> bspline_basis_order0(double x, std::size_t G) {
  SplineGrid g = SplineGrid::make(G, 0);
  std::vector<double> out(G);
  detail::bspline_eval(x, g, out.data(), nullptr);
  return out;
}

// Differentiable basis op: x [..] -> [.., G+k]; gradient flows to x only
// (the grid is fixed), and is zero where the input was clamped.
inline Tensor bspline_basis_op(const Tensor& x, const SplineGrid& g) {
  const std::size_t nb = g.basis_count();
  const std::size_t n = x.size();
  Shape oshape = x.shape();
  oshape.push_back(nb);
  Tensor out = Tensor::zeros(oshape);
  const bool track = detail::tracking({&x});
  std::vector<double> deriv(track ? n * nb : 0);
  for (std::size_t e = 0; e < n; ++e)
    detail::bspline_eval(x.data()[e], g, out.data().data() + e * nb,
                         track ? deriv.data() + e * nb : nullptr);
  if (track) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, nb, n, deriv = std::move(deriv)]() {
      xs->ensure_grad();
      for (std::size_t e = 0; e < n; ++e) {
        double acc = 0.0;
        for (std::size_t b = 0; b < nb; ++b)
          acc += ot->grad[e * nb + b] * deriv[e * nb + b];
        xs->grad[e] += acc;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layers

struct KanLayer {
  std::size_t n_in = 0, n_out = 0;
  Tensor coeff;     // {n_in, n_out, G+k}
  Tensor w_spline;  // {n_in, n_out, 1}
  Tensor w_base;    // {n_in, n_out}

  static KanLayer init(std::size_t n_in, std::size_t n_out, const SplineGrid& g, Rng& rng) {
    KanLayer l;
    l.n_in = n_in;
    l.n_out = n_out;
    const double scale = 1.0 / std::sqrt(static_cast<double>(n_in));
    l.coeff = Tensor::randn({n_in, n_out, g.basis_count()}, rng, 0.1 * scale, true);
    l.w_spline = Tensor::full({n_in, n_out, 1}, 1.0, true);
    l.w_base = Tensor::randn({n_in, n_out}, rng, scale, true);
    return l;
  }

  // x: {B, n_in} -> {B, n_out}
  Tensor forward(const Tensor& x, const SplineGrid& g) const {
    if (x.rank() != 2 || x.dim(1) != n_in)
      throw std::invalid_argument("KanLayer::forward: input width mismatch");
    const std::size_t B = x.dim(0);
    const std::size_t nb = g.basis_count();
    Tensor basis = bspline_basis_op(x, g);                       // {B, n_in, nb}
    Tensor basis2d = reshape(basis, {B, n_in * nb});             // row idx i*nb+b
    Tensor scaled = mul(coeff, w_spline);                        // {n_in, n_out, nb}
    Tensor wmat = reshape(permute(scaled, {0, 2, 1}), {n_in * nb, n_out});
    Tensor spline_out = matmul(basis2d, wmat);
    Tensor base_out = matmul(silu(x), w_base);
    return add(spline_out, base_out);
  }

  // Scalar edge function, for tests and the pointwise oracle path.
  double edge_eval(std::size_t i, std::size_t j, double x, const SplineGrid& g) const {
    const std::size_t nb = g.basis_count();
    std::vector<double> basis(nb);
    detail::bspline_eval(x, g, basis.data(), nullptr);
    double dot = 0.0;
    const double* c = coeff.data().data() + (i * n_out + j) * nb;
    for (std::size_t b = 0; b < nb; ++b) dot += c[b] * basis[b];
    return w_base.data()[i * n_out + j] * silu_scalar(x) +
           w_spline.data()[(i * n_out + j)] * dot;
  }

  std::vector<double> forward_pointwise(const std::vector<double>& x, const SplineGrid& g) const {
    if (x.size() != n_in) throw std::invalid_argument("KanLayer: pointwise width mismatch");
    const std::size_t nb = g.basis_count();
    std::vector<double> out(n_out, 0.0);
    std::vector<double> basis(nb);
    for (std::size_t i = 0; i < n_in; ++i) {
      detail::bspline_eval(x[i], g, basis.data(), nullptr);
      const double s = silu_scalar(x[i]);
      for (std::size_t j = 0; j < n_out; ++j) {
        const double* c = coeff.data().data() + (i * n_out + j) * nb;
        double dot = 0.0;
        for (std::size_t b = 0; b < nb; ++b) dot += c[b] * basis[b];
        out[j] += w_base.data()[i * n_out + j] * s + w_spline.data()[i * n_out + j] * dot;
      }
    }
    return out;
  }
};

struct KanNetwork {
  SplineGrid grid;
  std::vector<KanLayer> layers;

  static KanNetwork init(const std::vector<std::size_t>& widths, std::size_t G, std::size_t k,
                         std::uint64_t seed) {
    if (widths.size() < 2) throw std::invalid_argument("KanNetwork: need at least one layer");
    KanNetwork net;
    net.grid = SplineGrid::make(G, k);
    Rng rng(derive_seed(seed, "kan-init"));
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
      net.layers.push_back(KanLayer::init(widths[l], widths[l + 1], net.grid, rng));
    return net;
  }

  std::size_t input_dim() const { return layers.front().n_in; }
  std::size_t output_dim() const { return layers.back().n_out; }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (const auto& l : layers) h = l.forward(h, grid);
    return h;
  }

  std::vector<double> forward_pointwise(std::vector<double> x) const {
    for (const auto& l : layers) x = l.forward_pointwise(x, grid);
    return x;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    for (const auto& l : layers) {
      ps.push_back(l.coeff);
      ps.push_back(l.w_spline);
      ps.push_back(l.w_base);
    }
    return ps;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Features: [x_hat, y_hat, one-hot(F), log-freq, d_hat, log-dist], all in [-1,1].

struct FeatureContext {
  std::size_t H = 0, W = 0, F = 0;
  double cell_size_m = 4.0;
  double diag_m = 0.0;   // distance normalizer: grid diagonal in meters
  double ref_m = 0.0;    // log-distance reference: one cell
  double fmin = 0.0, fmax = 0.0;
  std::vector<Cell> tx;
  std::vector<double> freqs;

  static FeatureContext from_scene(const RadioScene& scene) {
    FeatureContext c;
    c.H = scene.spec.H;
    c.W = scene.spec.W;
    c.F = scene.spec.bands();
    c.cell_size_m = scene.spec.cell_size_m;
    const double dh = static_cast<double>(c.H - 1), dw = static_cast<double>(c.W - 1);
    c.diag_m = c.cell_size_m * std::sqrt(dh * dh + dw * dw);
    c.ref_m = c.cell_size_m;
    c.tx = scene.tx;
    c.freqs = scene.spec.frequencies_hz;
    c.fmin = *std::min_element(c.freqs.begin(), c.freqs.end());
    c.fmax = *std::max_element(c.freqs.begin(), c.freqs.end());
    return c;
  }

  std::size_t dim() const { return 2 + (F + 1) + 2; }

  void write_features(std::size_t band, std::size_t x, std::size_t y, double* out) const {
    std::size_t p = 0;
    out[p++] = W > 1 ? 2.0 * static_cast<double>(x) / static_cast<double>(W - 1) - 1.0 : 0.0;
    out[p++] = H > 1 ? 2.0 * static_cast<double>(y) / static_cast<double>(H - 1) - 1.0 : 0.0;
    for (std::size_t f = 0; f < F; ++f) out[p++] = f == band ? 1.0 : 0.0;
    if (F == 1 || fmax == fmin) {
      out[p++] = 0.0;
    } else {
      out[p++] = 2.0 * std::log(freqs[band] / fmin) / std::log(fmax / fmin) - 1.0;
    }
    double best = std::numeric_limits<double>::infinity();
    for (const Cell& t : tx) {
      const double ddx = (static_cast<double>(x) - t.x) * cell_size_m;
      const double ddy = (static_cast<double>(y) - t.y) * cell_size_m;
      best = std::min(best, std::hypot(ddx, ddy));
    }
    out[p++] = 2.0 * (best / diag_m) - 1.0;
    out[p++] = 2.0 * (std::log10(std::max(best, ref_m) / ref_m) /
                      std::log10(diag_m / ref_m)) -
               1.0;
  }
};

inline std::vector<double> build_features(const RadioScene& scene, std::size_t band,
                                          std::size_t x, std::size_t y) {
  auto ctx = FeatureContext::from_scene(scene);
  if (band >= ctx.F) throw std::invalid_argument("build_features: band out of range");
  if (x >= ctx.W || y >= ctx.H) throw std::invalid_argument("build_features: cell outside grid");
  std::vector<double> out(ctx.dim());
  ctx.write_features(band, x, y, out.data());
  return out;
}

// Feature rows for (band, flat cell) pairs, one observation stack per band.
inline Tensor feature_matrix(const FeatureContext& ctx,
                             const std::vector<std::vector<std::uint32_t>>& cells_per_band) {
  std::size_t rows = 0;
  for (const auto& v : cells_per_band) rows += v.size();
  Tensor X = Tensor::zeros({rows, ctx.dim()});
  std::size_t r = 0;
  for (std::size_t f = 0; f < cells_per_band.size(); ++f)
    for (std::uint32_t cell : cells_per_band[f]) {
      ctx.write_features(f, cell % ctx.W, cell / ctx.W, X.data().data() + r * ctx.dim());
      ++r;
    }
  return X;
}

// ---------------------------------------------------------------------------
// Training

struct KanTrainConfig {
  std::size_t epochs = 1500;
  double lr = 0.01;
  double lambda_smooth = 1e-4;  // second-difference penalty on spline coeffs
  std::uint64_t seed = 0;       // reserved for minibatch shuffling
};

struct TrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> history;  // loss per epoch
};

namespace detail {

// {nb, nb-2} constant second-difference operator, applied to coeff vectors.
inline Tensor second_difference_matrix(std::size_t nb) {
  Tensor d2 = Tensor::zeros({nb, nb - 2});
  for (std::size_t c = 0; c + 2 < nb; ++c) {
    d2.at({c, c}) = 1.0;
    d2.at({c + 1, c}) = -2.0;
    d2.at({c + 2, c}) = 1.0;
  }
  return d2;
}

}  // namespace detail

inline Tensor kan_smoothness_penalty(const KanNetwork& net, const Tensor& d2) {
  Tensor acc = Tensor::scalar(0.0);
  const std::size_t nb = net.grid.basis_count();
  for (const auto& l : net.layers) {
    Tensor flat = reshape(l.coeff, {l.n_in * l.n_out, nb});
    Tensor diffs = matmul(flat, d2);
    acc = add(acc, sum_all(mul(diffs, diffs)));
  }
  return acc;
}

// Squared-error objective (reported as the mean over rows) plus the optional
// smoothness term: lambda * sum of squared second differences of every edge's
// coefficient vector.
inline TrainResult train_kan_on_data(KanNetwork& net, const Tensor& X, const Tensor& y,
                                     const KanTrainConfig& cfg = {}) {
  if (X.rank() != 2 || y.rank() != 2 || X.dim(0) != y.dim(0) || y.dim(1) != 1)
    throw std::invalid_argument("train_kan_on_data: expects X=[N,d], y=[N,1]");
  Tensor d2 = detail::second_difference_matrix(net.grid.basis_count());
  Adam opt(net.parameters(), {.lr = cfg.lr});
  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.zero_grad();
    Tape tape;
    double loss_value = 0.0;
    {
      TapeScope scope(tape);
      Tensor pred = net.forward(X);
      Tensor err = sub(pred, y);
      Tensor loss = mean_all(mul(err, err));
      if (cfg.lambda_smooth > 0.0)
        loss = add(loss, mul(Tensor::scalar(cfg.lambda_smooth),
                             kan_smoothness_penalty(net, d2)));
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw std::runtime_error("train_kan: loss diverged");
      tape.backward(loss);
    }
    opt.step();
    if (epoch == 0) result.initial_loss = loss_value;
    result.history.push_back(loss_value);
    result.final_loss = loss_value;
  }
  return result;
}

inline TrainResult train_kan(KanNetwork& net, const ObservationSet& obs, const RadioScene& scene,
                             const KanTrainConfig& cfg = {}) {
  const auto ctx = FeatureContext::from_scene(scene);
  if (net.input_dim() != ctx.dim())
    throw std::invalid_argument("train_kan: network input width does not match feature dim");
  std::size_t rows = 0;
  for (const auto& v : obs.cells) rows += v.size();
  if (rows == 0) throw std::invalid_argument("train_kan: no observations");

  Tensor X = feature_matrix(ctx, obs.cells);
  Tensor y = Tensor::zeros({rows, 1});
  {
    std::size_t r = 0;
    for (std::size_t f = 0; f < obs.bands(); ++f)
      for (double v : obs.values[f]) y.data()[r++] = v;
  }
  return train_kan_on_data(net, X, y, cfg);
}

// Dense prediction over the whole grid, clamped to the normalized range.
// Calibration is the identity window: predictions live in normalized units.
inline Radiomap evaluate_coarse(const KanNetwork& net, const RadioScene& scene) {
  const auto ctx = FeatureContext::from_scene(scene);
  if (net.input_dim() != ctx.dim())
    throw std::invalid_argument("evaluate_coarse: network input width mismatch");
  Radiomap out;
  out.H = ctx.H;
  out.W = ctx.W;
  out.F = ctx.F;
  out.values.assign(ctx.H * ctx.W * ctx.F, 0.0);
  out.calib.assign(ctx.F, {0.0, 1.0});
  const std::size_t plane = ctx.H * ctx.W;
  Tensor X = Tensor::zeros({plane, ctx.dim()});
  for (std::size_t f = 0; f < ctx.F; ++f) {
    for (std::size_t i = 0; i < plane; ++i)
      ctx.write_features(f, i % ctx.W, i / ctx.W, X.data().data() + i * ctx.dim());
    Tensor pred = net.forward(X);
    for (std::size_t i = 0; i < plane; ++i)
      out.values[f * plane + i] = std::clamp(pred.data()[i], 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing: "kan.meta" = [G, k, width0, width1, ...]

inline NamedTensors kan_to_named_tensors(const KanNetwork& net) {
  NamedTensors out;
  std::vector<double> meta{static_cast<double>(net.grid.G), static_cast<double>(net.grid.k)};
  meta.push_back(static_cast<double>(net.layers.front().n_in));
  for (const auto& l : net.layers) meta.push_back(static_cast<double>(l.n_out));
  out.emplace_back("kan.meta", Tensor::from_data({meta.size()}, meta));
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const std::string p = "kan.layer" + std::to_string(l) + ".";
    out.emplace_back(p + "coeff", net.layers[l].coeff);
    out.emplace_back(p + "w_spline", net.layers[l].w_spline);
    out.emplace_back(p + "w_base", net.layers[l].w_base);
  }
  return out;
}

inline KanNetwork kan_from_named_tensors(const NamedTensors& ts) {
  const Tensor& meta = find_tensor(ts, "kan.meta");
  if (meta.size() < 4) throw std::runtime_error("kan checkpoint: malformed meta");
  const auto G = static_cast<std::size_t>(meta.data()[0]);
  const auto k = static_cast<std::size_t>(meta.data()[1]);
  KanNetwork net;
  net.grid = SplineGrid::make(G, k);
  const std::size_t n_layers = meta.size() - 3;
  for (std::size_t l = 0; l < n_layers; ++l) {
    KanLayer layer;
    layer.n_in = static_cast<std::size_t>(meta.data()[2 + l]);
    layer.n_out = static_cast<std::size_t>(meta.data()[3 + l]);
    const std::string p = "kan.layer" + std::to_string(l) + ".";
    layer.coeff = find_tensor(ts, p + "coeff");
    layer.w_spline = find_tensor(ts, p + "w_spline");
    layer.w_base = find_tensor(ts, p + "w_base");
    if (layer.coeff.shape() != Shape{layer.n_in, layer.n_out, net.grid.basis_count()})
      throw std::runtime_error("kan checkpoint: coeff shape mismatch at layer " +
                               std::to_string(l));
    for (Tensor t : {layer.coeff, layer.w_spline, layer.w_base}) t.set_requires_grad(true);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

inline void save_kan(const std::string& path, const KanNetwork& net) {
  save_checkpoint(path, kan_to_named_tensors(net));
}

inline KanNetwork load_kan(const std::string& path) {
  return kan_from_named_tensors(load_checkpoint(path));
}

}  // namespace rkm
