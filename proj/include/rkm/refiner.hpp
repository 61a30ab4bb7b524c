#pragma once

// Stage-2 refinement network: convolutional encoder, transformer blocks whose
// feed-forward sublayer is a sparse top-k mixture of experts, and a
// skip-connected decoder that emits a per-band residual added to the coarse
// prior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "rkm/checkpoint.hpp"
#include "rkm/common.hpp"
#include "rkm/priors.hpp"
#include "rkm/scene.hpp"
#include "rkm/tensor.hpp"

namespace rkm {

// ---------------------------------------------------------------------------
// Configuration

struct RefinerConfig {
  std::vector<std::size_t> channels;  // prior-tensor channels consumed as input
  std::size_t out_channels = 2;       // residual bands F
  std::size_t grid_h = 32;
  std::size_t grid_w = 32;
  std::size_t enc1 = 16;              // width after the stem and first downsample
  std::size_t enc2 = 32;              // bottleneck width
  std::size_t patch = 4;              // P at bottleneck resolution
  std::size_t token_dim = 64;         // K
  std::size_t blocks = 2;             // L
  std::size_t heads = 4;
  std::size_t experts = 4;            // E_x
  std::size_t top_k = 2;
  std::size_t expert_hidden = 128;
  double lambda_lb = 0.01;
  bool use_moe = true;                // false: parameter-matched dense FFN
  std::size_t dense_hidden = 0;       // 0: derive from matched_dense_hidden()

  std::size_t in_channels() const { return channels.size(); }
  std::size_t bottleneck_h() const { return grid_h / 4; }
  std::size_t bottleneck_w() const { return grid_w / 4; }
  std::size_t tokens() const { return (bottleneck_h() / patch) * (bottleneck_w() / patch); }

  // Per-block parameter count of the sparse branch (router + experts).
  std::size_t moe_param_count() const {
    const std::size_t router = token_dim * experts + experts;
    const std::size_t one = 2 * token_dim * expert_hidden + expert_hidden + token_dim;
    return router + experts * one;
  }
  // Dense hidden width whose single FFN matches moe_param_count.
  std::size_t matched_dense_hidden() const {
    const double h = (static_cast<double>(moe_param_count()) - static_cast<double>(token_dim)) /
                     static_cast<double>(2 * token_dim + 1);
    return static_cast<std::size_t>(std::llround(h));
  }
  std::size_t ffn_hidden() const {
    return dense_hidden != 0 ? dense_hidden : matched_dense_hidden();
  }

  void validate() const {
    if (channels.empty()) throw std::invalid_argument("RefinerConfig: no input channels");
    if (out_channels == 0) throw std::invalid_argument("RefinerConfig: out_channels == 0");
    if (grid_h % 4 != 0 || grid_w % 4 != 0)
      throw std::invalid_argument("RefinerConfig: grid must be divisible by 4");
    if (patch == 0 || bottleneck_h() % patch != 0 || bottleneck_w() % patch != 0)
      throw std::invalid_argument("RefinerConfig: bottleneck not divisible by patch size");
    if (token_dim % heads != 0)
      throw std::invalid_argument("RefinerConfig: token_dim not divisible by heads");
    if (top_k < 1 || top_k > experts)
      throw std::invalid_argument("RefinerConfig: need 1 <= top_k <= experts");
    if (blocks == 0 || enc1 == 0 || enc2 == 0)
      throw std::invalid_argument("RefinerConfig: zero-sized stage");
  }
};

// All prior channels, in layout order.
inline std::vector<std::size_t> all_prior_channels(const ChannelLayout& lay) {
  std::vector<std::size_t> c(lay.channels());
  std::iota(c.begin(), c.end(), std::size_t{0});
  return c;
}

inline RefinerConfig default_refiner_config(std::size_t bands) {
  RefinerConfig cfg;
  cfg.out_channels = bands;
  cfg.channels = all_prior_channels(ChannelLayout{bands});
  return cfg;
}

// ---------------------------------------------------------------------------
// Layers

struct Conv2dLayer {
  Tensor w;  // [O,C,k,k]
  Tensor b;  // [O,1,1]
  std::size_t stride = 1;
  std::size_t pad = 1;

  static Conv2dLayer init(std::size_t out_c, std::size_t in_c, std::size_t k, std::size_t stride,
                          std::size_t pad, Rng& rng) {
    Conv2dLayer l;
    const double std = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
    l.w = Tensor::randn({out_c, in_c, k, k}, rng, std, true);
    l.b = Tensor::zeros({out_c, 1, 1}, true);
    l.stride = stride;
    l.pad = pad;
    return l;
  }
  static Conv2dLayer zeros(std::size_t out_c, std::size_t in_c, std::size_t k, std::size_t stride,
                           std::size_t pad) {
    Conv2dLayer l;
    l.w = Tensor::zeros({out_c, in_c, k, k}, true);
    l.b = Tensor::zeros({out_c, 1, 1}, true);
    l.stride = stride;
    l.pad = pad;
    return l;
  }
  Tensor forward(const Tensor& x) const { return conv2d(x, w, stride, pad) + b; }
};

struct LinearLayer {
  Tensor w;  // [in,out]
  Tensor b;  // [1,out]

  static LinearLayer init(std::size_t in, std::size_t out, Rng& rng) {
    LinearLayer l;
    l.w = Tensor::randn({in, out}, rng, std::sqrt(1.0 / static_cast<double>(in)), true);
    l.b = Tensor::zeros({1, out}, true);
    return l;
  }
  Tensor forward(const Tensor& x) const { return matmul(x, w) + b; }
};

struct Router {
  LinearLayer proj;  // K -> E_x
};

struct ExpertFfn {
  LinearLayer fc1;  // K -> hidden
  LinearLayer fc2;  // hidden -> K

  static ExpertFfn init(std::size_t dim, std::size_t hidden, Rng& rng) {
    return ExpertFfn{LinearLayer::init(dim, hidden, rng), LinearLayer::init(hidden, dim, rng)};
  }
  Tensor forward(const Tensor& x) const { return fc2.forward(silu(fc1.forward(x))); }
};

// ---------------------------------------------------------------------------
// Sparse mixture of experts

struct MoeStats {
  std::vector<std::size_t> counts;                  // tokens routed to each expert
  std::vector<double> mean_gate;                    // mean softmax gate per expert
  std::vector<std::vector<std::size_t>> selected;   // per token, ascending expert ids
};

namespace detail {

// Top-k gate indices by descending probability; ties go to the lower index.
inline std::vector<std::size_t> top_k_gates(const double* p, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [p](std::size_t a, std::size_t b) {
                      if (p[a] != p[b]) return p[a] > p[b];
                      return a < b;
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

// Routes each token to its top-k experts, renormalizes the selected gates and
// combines the expert outputs. `aux` (optional) receives the load-balance term
// E_x * sum_e fraction_e * mean_gate_e on the graph.
inline Tensor moe_forward(const Tensor& tokens, const Router& router,
                          const std::vector<ExpertFfn>& experts, std::size_t k,
                          MoeStats* stats = nullptr, Tensor* aux = nullptr) {
  if (tokens.rank() != 2) throw std::invalid_argument("moe_forward: tokens must be [N,K]");
  const std::size_t N = tokens.dim(0);
  const std::size_t E = experts.size();
  if (k < 1 || k > E) throw std::invalid_argument("moe_forward: need 1 <= k <= experts");

  Tensor p = softmax_lastdim(router.proj.forward(tokens));  // [N,E]
  const auto& pd = p.data();

  std::vector<std::vector<std::size_t>> sel(N);
  std::vector<std::size_t> flat;  // indices of selected gates in p
  flat.reserve(N * k);
  for (std::size_t t = 0; t < N; ++t) {
    sel[t] = detail::top_k_gates(pd.data() + t * E, E, k);
    for (std::size_t s = 0; s < k; ++s) flat.push_back(t * E + sel[t][s]);
  }

  Tensor picked = reshape(gather_elems(p, flat), {N, k});
  Tensor gates = picked / sum_lastdim(picked);  // renormalized, rows sum to 1

  // Group tokens by expert; remember which gate slot each routed row used.
  std::vector<std::vector<std::size_t>> rows(E), slots(E);
  for (std::size_t t = 0; t < N; ++t)
    for (std::size_t s = 0; s < k; ++s) {
      rows[sel[t][s]].push_back(t);
      slots[sel[t][s]].push_back(t * k + s);
    }

  Tensor out = Tensor::zeros({N, tokens.dim(1)});
  for (std::size_t e = 0; e < E; ++e) {
    if (rows[e].empty()) continue;
    Tensor in_e = gather_rows(tokens, rows[e]);
    Tensor w_e = reshape(gather_elems(gates, slots[e]), {rows[e].size(), 1});
    Tensor scattered = scatter_rows_sum(experts[e].forward(in_e) * w_e, rows[e], N);
    out = out + scattered;
  }

  if (stats != nullptr) {
    stats->counts.assign(E, 0);
    stats->mean_gate.assign(E, 0.0);
    for (std::size_t e = 0; e < E; ++e) stats->counts[e] = rows[e].size();
    for (std::size_t t = 0; t < N; ++t)
      for (std::size_t e = 0; e < E; ++e) stats->mean_gate[e] += pd[t * E + e];
    for (std::size_t e = 0; e < E; ++e) stats->mean_gate[e] /= static_cast<double>(N);
    stats->selected = sel;
  }
  if (aux != nullptr) {
    std::vector<double> frac(E);
    for (std::size_t e = 0; e < E; ++e)
      frac[e] = static_cast<double>(rows[e].size()) / static_cast<double>(N);
    Tensor ones = Tensor::full({1, N}, 1.0 / static_cast<double>(N));
    Tensor gate_mean = matmul(ones, p);  // [1,E]
    Tensor f = Tensor::from_data({1, E}, frac);
    *aux = sum_all(gate_mean * f) * static_cast<double>(E);
  }
  return out;
}

struct MoeLayer {
  Router router;
  std::vector<ExpertFfn> experts;
  std::size_t top_k = 2;

  static MoeLayer init(std::size_t dim, std::size_t hidden, std::size_t n_experts, std::size_t k,
                       Rng& rng) {
    MoeLayer l;
    l.router.proj = LinearLayer::init(dim, n_experts, rng);
    l.experts.reserve(n_experts);
    for (std::size_t e = 0; e < n_experts; ++e) l.experts.push_back(ExpertFfn::init(dim, hidden, rng));
    l.top_k = k;
    return l;
  }
  Tensor forward(const Tensor& tokens, MoeStats* stats = nullptr, Tensor* aux = nullptr) const {
    return moe_forward(tokens, router, experts, top_k, stats, aux);
  }
};

// ---------------------------------------------------------------------------
// Multi-head self-attention

struct MsaLayer {
  LinearLayer q, k, v, o;
  std::size_t heads = 4;

  static MsaLayer init(std::size_t dim, std::size_t n_heads, Rng& rng) {
    MsaLayer l;
    l.q = LinearLayer::init(dim, dim, rng);
    l.k = LinearLayer::init(dim, dim, rng);
    l.v = LinearLayer::init(dim, dim, rng);
    l.o = LinearLayer::init(dim, dim, rng);
    l.heads = n_heads;
    return l;
  }

  Tensor forward(const Tensor& z) const {
    const std::size_t dim = z.dim(1);
    const std::size_t dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor Q = q.forward(z), K = k.forward(z), V = v.forward(z);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(Q, h * dh, dh);
      Tensor kh = slice_cols(K, h * dh, dh);
      Tensor vh = slice_cols(V, h * dh, dh);
      Tensor att = softmax_lastdim(matmul(qh, transpose2d(kh)) * scale);
      outs.push_back(matmul(att, vh));
    }
    return o.forward(concat_cols(outs));
  }
};

// ---------------------------------------------------------------------------
// Transformer block: H = MSA(LN(Z)) + Z; Z' = FFN(LN(H)) + H

struct RefinerBlock {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  MsaLayer msa;
  bool use_moe = true;
  MoeLayer moe;
  ExpertFfn dense;

  static RefinerBlock init(const RefinerConfig& cfg, Rng& rng) {
    RefinerBlock blk;
    blk.ln1_g = Tensor::full({cfg.token_dim}, 1.0, true);
    blk.ln1_b = Tensor::zeros({cfg.token_dim}, true);
    blk.ln2_g = Tensor::full({cfg.token_dim}, 1.0, true);
    blk.ln2_b = Tensor::zeros({cfg.token_dim}, true);
    blk.msa = MsaLayer::init(cfg.token_dim, cfg.heads, rng);
    blk.use_moe = cfg.use_moe;
    if (cfg.use_moe)
      blk.moe = MoeLayer::init(cfg.token_dim, cfg.expert_hidden, cfg.experts, cfg.top_k, rng);
    else
      blk.dense = ExpertFfn::init(cfg.token_dim, cfg.ffn_hidden(), rng);
    return blk;
  }

  Tensor forward(const Tensor& z, MoeStats* stats = nullptr, Tensor* aux = nullptr) const {
    Tensor h = msa.forward(layer_norm(z, ln1_g, ln1_b)) + z;
    Tensor n2 = layer_norm(h, ln2_g, ln2_b);
    Tensor ff = use_moe ? moe.forward(n2, stats, aux) : dense.forward(n2);
    return ff + h;
  }
};

// ---------------------------------------------------------------------------
// Patch embedding and its inverse

// [C,h,w] -> [N, C*P*P] with N = (h/P)*(w/P), patches in row-major order.
inline Tensor patchify(const Tensor& x, std::size_t P) {
  if (x.rank() != 3) throw std::invalid_argument("patchify: expects [C,h,w]");
  const std::size_t C = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % P != 0 || w % P != 0) throw std::invalid_argument("patchify: grid not divisible by P");
  const std::size_t hp = h / P, wp = w / P;
  Tensor t = reshape(x, {C, hp, P, wp, P});
  t = permute(t, {1, 3, 0, 2, 4});  // [hp,wp,C,P,P]
  return reshape(t, {hp * wp, C * P * P});
}

inline Tensor unpatchify(const Tensor& tokens, std::size_t C, std::size_t h, std::size_t w,
                         std::size_t P) {
  const std::size_t hp = h / P, wp = w / P;
  Tensor t = reshape(tokens, {hp, wp, C, P, P});
  t = permute(t, {2, 0, 3, 1, 4});  // [C,hp,P,wp,P]
  return reshape(t, {C, h, w});
}

// Linear projection of flattened patches plus a learned positional embedding.
inline Tensor patch_embed(const Tensor& features, std::size_t P, const LinearLayer& proj,
                          const Tensor& pos) {
  Tensor tokens = proj.forward(patchify(features, P));
  return tokens + pos;
}

// ---------------------------------------------------------------------------
// Full network

struct ForwardOut {
  Tensor residual;              // [F,H,W]
  Tensor aux;                   // scalar load-balance loss (zero without MoE)
  std::vector<MoeStats> stats;  // one entry per block when MoE is active
};

struct RefinerNet {
  RefinerConfig cfg;
  Conv2dLayer stem;   // d_in -> enc1, stride 1
  Conv2dLayer down1;  // enc1 -> enc1, stride 2
  Conv2dLayer down2;  // enc1 -> enc2, stride 2
  LinearLayer embed;  // enc2*P*P -> K
  Tensor pos;         // [N,K]
  std::vector<RefinerBlock> blocks;
  LinearLayer unembed;  // K -> enc2*P*P
  Conv2dLayer dec1;     // enc2+enc1 -> enc1 (after 2x upsample, concat skip1)
  Conv2dLayer dec2;     // enc1+enc1 -> enc1 (after 2x upsample, concat skip0)
  Conv2dLayer head;     // enc1 -> F, 1x1, zero-initialized

  static RefinerNet init(const RefinerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "refiner-init"));
    RefinerNet net;
    net.cfg = cfg;
    const std::size_t d_in = cfg.in_channels();
    net.stem = Conv2dLayer::init(cfg.enc1, d_in, 3, 1, 1, rng);
    net.down1 = Conv2dLayer::init(cfg.enc1, cfg.enc1, 3, 2, 1, rng);
    net.down2 = Conv2dLayer::init(cfg.enc2, cfg.enc1, 3, 2, 1, rng);
    const std::size_t pdim = cfg.enc2 * cfg.patch * cfg.patch;
    net.embed = LinearLayer::init(pdim, cfg.token_dim, rng);
    net.pos = Tensor::randn({cfg.tokens(), cfg.token_dim}, rng, 0.02, true);
    net.blocks.reserve(cfg.blocks);
    for (std::size_t l = 0; l < cfg.blocks; ++l) net.blocks.push_back(RefinerBlock::init(cfg, rng));
    net.unembed = LinearLayer::init(cfg.token_dim, pdim, rng);
    net.dec1 = Conv2dLayer::init(cfg.enc1, cfg.enc2 + cfg.enc1, 3, 1, 1, rng);
    net.dec2 = Conv2dLayer::init(cfg.enc1, cfg.enc1 + cfg.enc1, 3, 1, 1, rng);
    net.head = Conv2dLayer::zeros(cfg.out_channels, cfg.enc1, 1, 1, 0);
    return net;
  }

  ForwardOut forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(0) != cfg.in_channels() || x.dim(1) != cfg.grid_h ||
        x.dim(2) != cfg.grid_w)
      throw std::invalid_argument("RefinerNet: input shape mismatch");
    ForwardOut out;
    Tensor s0 = silu(stem.forward(x));
    Tensor s1 = silu(down1.forward(s0));
    Tensor bt = silu(down2.forward(s1));
    Tensor z = patch_embed(bt, cfg.patch, embed, pos);
    Tensor aux_sum = Tensor::scalar(0.0);
    for (const auto& blk : blocks) {
      if (cfg.use_moe) {
        MoeStats st;
        Tensor aux;
        z = blk.forward(z, &st, &aux);
        out.stats.push_back(std::move(st));
        aux_sum = aux_sum + aux;
      } else {
        z = blk.forward(z);
      }
    }
    out.aux = cfg.use_moe ? aux_sum * (1.0 / static_cast<double>(blocks.size()))
                          : Tensor::scalar(0.0);
    Tensor g = unpatchify(unembed.forward(z), cfg.enc2, cfg.bottleneck_h(), cfg.bottleneck_w(),
                          cfg.patch);
    Tensor d1 = silu(dec1.forward(concat_axis0({upsample_nearest2x(g), s1})));
    Tensor d2 = silu(dec2.forward(concat_axis0({upsample_nearest2x(d1), s0})));
    out.residual = head.forward(d2);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    for (const Conv2dLayer* c : {&stem, &down1, &down2}) {
      ps.push_back(c->w);
      ps.push_back(c->b);
    }
    ps.push_back(embed.w);
    ps.push_back(embed.b);
    ps.push_back(pos);
    for (const auto& blk : blocks) {
      ps.push_back(blk.ln1_g);
      ps.push_back(blk.ln1_b);
      for (const LinearLayer* l : {&blk.msa.q, &blk.msa.k, &blk.msa.v, &blk.msa.o}) {
        ps.push_back(l->w);
        ps.push_back(l->b);
      }
      ps.push_back(blk.ln2_g);
      ps.push_back(blk.ln2_b);
      if (blk.use_moe) {
        ps.push_back(blk.moe.router.proj.w);
        ps.push_back(blk.moe.router.proj.b);
        for (const auto& e : blk.moe.experts) {
          ps.push_back(e.fc1.w);
          ps.push_back(e.fc1.b);
          ps.push_back(e.fc2.w);
          ps.push_back(e.fc2.b);
        }
      } else {
        ps.push_back(blk.dense.fc1.w);
        ps.push_back(blk.dense.fc1.b);
        ps.push_back(blk.dense.fc2.w);
        ps.push_back(blk.dense.fc2.b);
      }
    }
    ps.push_back(unembed.w);
    ps.push_back(unembed.b);
    for (const Conv2dLayer* c : {&dec1, &dec2, &head}) {
      ps.push_back(c->w);
      ps.push_back(c->b);
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
// Prior-tensor input and fusion

// Copies the selected prior channels into a [d_in,H,W] input tensor.
inline Tensor refiner_input(const PriorTensor& prior, const std::vector<std::size_t>& channels) {
  const std::size_t plane = prior.H * prior.W;
  std::vector<double> data(channels.size() * plane);
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] >= prior.channels())
      throw std::out_of_range("refiner_input: channel index out of range");
    std::copy_n(prior.data.data() + channels[i] * plane, plane, data.data() + i * plane);
  }
  return Tensor::from_data({channels.size(), prior.H, prior.W}, std::move(data));
}

// R_final = clamp(base + residual, 0, 1); `base` is the coarse prior, or a
// zero map for variants that run without one.
inline Tensor fuse_residual(const Tensor& residual, const Radiomap& base) {
  if (residual.rank() != 3 || residual.dim(0) != base.F || residual.dim(1) != base.H ||
      residual.dim(2) != base.W)
    throw std::invalid_argument("fuse_residual: shape mismatch");
  Tensor b = Tensor::from_data({base.F, base.H, base.W}, base.values);
  return clamp(b + residual, 0.0, 1.0);
}

inline Radiomap zero_radiomap(std::size_t H, std::size_t W, std::size_t F) {
  Radiomap m;
  m.H = H;
  m.W = W;
  m.F = F;
  m.values.assign(H * W * F, 0.0);
  m.calib.assign(F, {0.0, 1.0});
  return m;
}

inline Radiomap refine(const RefinerNet& net, const PriorTensor& prior, const Radiomap& base) {
  if (prior.H != net.cfg.grid_h || prior.W != net.cfg.grid_w)
    throw std::invalid_argument("refine: prior grid does not match the network");
  if (base.F != net.cfg.out_channels || base.H != prior.H || base.W != prior.W)
    throw std::invalid_argument("refine: base map shape mismatch");
  Tensor x = refiner_input(prior, net.cfg.channels);
  ForwardOut out = net.forward(x);
  Tensor fused = fuse_residual(out.residual, base);
  Radiomap result;
  result.H = base.H;
  result.W = base.W;
  result.F = base.F;
  result.values = fused.data();
  result.calib = base.calib;
  return result;
}

// ---------------------------------------------------------------------------
// Training

struct RefinerSample {
  PriorTensor prior;
  Radiomap base;   // fusion base: the coarse prior, or a zero map
  Radiomap truth;
};

struct RefinerTrainConfig {
  std::size_t epochs = 60;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct RefinerTrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> history;                    // per-epoch mean loss
  std::vector<std::vector<double>> utilization;   // per-epoch mean token fraction per expert
  std::vector<std::vector<double>> gate_means;    // per-epoch mean gate per expert
};

inline RefinerTrainResult train_refiner(RefinerNet& net, const std::vector<RefinerSample>& data,
                                        const RefinerTrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_refiner: empty dataset");
  for (const auto& s : data) {
    if (s.prior.H != net.cfg.grid_h || s.prior.W != net.cfg.grid_w ||
        s.truth.F != net.cfg.out_channels)
      throw std::invalid_argument("train_refiner: sample shape mismatch");
  }
  std::vector<Tensor> inputs, bases, truths;
  inputs.reserve(data.size());
  for (const auto& s : data) {
    inputs.push_back(refiner_input(s.prior, net.cfg.channels));
    bases.push_back(Tensor::from_data({s.base.F, s.base.H, s.base.W}, s.base.values));
    truths.push_back(Tensor::from_data({s.truth.F, s.truth.H, s.truth.W}, s.truth.values));
  }

  std::vector<Tensor> params = net.parameters();
  Adam opt(params, AdamConfig{.lr = cfg.lr});
  Rng order_rng(derive_seed(cfg.seed, "refiner-order"));
  const std::size_t n = data.size();
  const std::size_t E = net.cfg.experts;

  RefinerTrainResult result;
  result.history.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::uint32_t> order =
        order_rng.sample_without_replacement(static_cast<std::uint32_t>(n),
                                             static_cast<std::uint32_t>(n));
    double loss_sum = 0.0;
    std::vector<double> frac(E, 0.0), gate(E, 0.0);
    std::size_t stat_draws = 0;
    for (std::uint32_t si : order) {
      Tape tape;
      TapeScope scope(tape);
      ForwardOut out = net.forward(inputs[si]);
      Tensor fused = clamp(bases[si] + out.residual, 0.0, 1.0);
      Tensor diff = fused - truths[si];
      Tensor loss = mean_all(diff * diff);
      if (net.cfg.use_moe && net.cfg.lambda_lb != 0.0)
        loss = loss + out.aux * net.cfg.lambda_lb;
      const double lv = loss.data()[0];
      if (!std::isfinite(lv)) throw std::runtime_error("train_refiner: loss diverged");
      loss_sum += lv;
      for (const auto& st : out.stats) {
        const double tokens = static_cast<double>(net.cfg.tokens());
        for (std::size_t e = 0; e < E && e < st.counts.size(); ++e) {
          frac[e] += static_cast<double>(st.counts[e]) / tokens;
          gate[e] += st.mean_gate[e];
        }
        ++stat_draws;
      }
      opt.zero_grad();
      backward(tape, loss);
      opt.step();
    }
    result.history.push_back(loss_sum / static_cast<double>(n));
    if (stat_draws > 0) {
      for (std::size_t e = 0; e < E; ++e) {
        frac[e] /= static_cast<double>(stat_draws);
        gate[e] /= static_cast<double>(stat_draws);
      }
      result.utilization.push_back(frac);
      result.gate_means.push_back(gate);
    }
  }
  result.initial_loss = result.history.empty() ? 0.0 : result.history.front();
  result.final_loss = result.history.empty() ? 0.0 : result.history.back();
  return result;
}

// ---------------------------------------------------------------------------
// Checkpointing ("refiner." prefix; "refiner.meta" carries the config)

namespace detail {

inline void push_named(NamedTensors& out, const std::string& name, const Tensor& t) {
  out.emplace_back(name, t);
}

}  // namespace detail

inline NamedTensors refiner_to_named_tensors(const RefinerNet& net) {
  NamedTensors out;
  const RefinerConfig& c = net.cfg;
  std::vector<double> meta = {1.0,
                              static_cast<double>(c.out_channels),
                              static_cast<double>(c.grid_h),
                              static_cast<double>(c.grid_w),
                              static_cast<double>(c.enc1),
                              static_cast<double>(c.enc2),
                              static_cast<double>(c.patch),
                              static_cast<double>(c.token_dim),
                              static_cast<double>(c.blocks),
                              static_cast<double>(c.heads),
                              static_cast<double>(c.experts),
                              static_cast<double>(c.top_k),
                              static_cast<double>(c.expert_hidden),
                              c.lambda_lb,
                              c.use_moe ? 1.0 : 0.0,
                              static_cast<double>(c.dense_hidden),
                              static_cast<double>(c.channels.size())};
  for (std::size_t ch : c.channels) meta.push_back(static_cast<double>(ch));
  detail::push_named(out, "refiner.meta", Tensor::from_data({meta.size()}, meta));

  auto conv = [&](const std::string& nm, const Conv2dLayer& l) {
    detail::push_named(out, "refiner." + nm + ".w", l.w);
    detail::push_named(out, "refiner." + nm + ".b", l.b);
  };
  auto lin = [&](const std::string& nm, const LinearLayer& l) {
    detail::push_named(out, "refiner." + nm + ".w", l.w);
    detail::push_named(out, "refiner." + nm + ".b", l.b);
  };
  conv("stem", net.stem);
  conv("down1", net.down1);
  conv("down2", net.down2);
  lin("embed", net.embed);
  detail::push_named(out, "refiner.pos", net.pos);
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const auto& blk = net.blocks[i];
    const std::string b = "block" + std::to_string(i) + ".";
    detail::push_named(out, "refiner." + b + "ln1.g", blk.ln1_g);
    detail::push_named(out, "refiner." + b + "ln1.b", blk.ln1_b);
    lin(b + "msa.q", blk.msa.q);
    lin(b + "msa.k", blk.msa.k);
    lin(b + "msa.v", blk.msa.v);
    lin(b + "msa.o", blk.msa.o);
    detail::push_named(out, "refiner." + b + "ln2.g", blk.ln2_g);
    detail::push_named(out, "refiner." + b + "ln2.b", blk.ln2_b);
    if (blk.use_moe) {
      lin(b + "router", blk.moe.router.proj);
      for (std::size_t e = 0; e < blk.moe.experts.size(); ++e) {
        lin(b + "expert" + std::to_string(e) + ".fc1", blk.moe.experts[e].fc1);
        lin(b + "expert" + std::to_string(e) + ".fc2", blk.moe.experts[e].fc2);
      }
    } else {
      lin(b + "ffn.fc1", blk.dense.fc1);
      lin(b + "ffn.fc2", blk.dense.fc2);
    }
  }
  lin("unembed", net.unembed);
  conv("dec1", net.dec1);
  conv("dec2", net.dec2);
  conv("head", net.head);
  return out;
}

inline RefinerNet refiner_from_named_tensors(const NamedTensors& named) {
  if (!has_tensor(named, "refiner.meta"))
    throw std::runtime_error("refiner checkpoint: missing meta record");
  const Tensor& meta = find_tensor(named, "refiner.meta");
  if (meta.size() < 17) throw std::runtime_error("refiner checkpoint: short meta record");
  const auto& m = meta.data();
  if (m[0] != 1.0) throw std::runtime_error("refiner checkpoint: unknown meta version");
  RefinerConfig cfg;
  cfg.out_channels = static_cast<std::size_t>(m[1]);
  cfg.grid_h = static_cast<std::size_t>(m[2]);
  cfg.grid_w = static_cast<std::size_t>(m[3]);
  cfg.enc1 = static_cast<std::size_t>(m[4]);
  cfg.enc2 = static_cast<std::size_t>(m[5]);
  cfg.patch = static_cast<std::size_t>(m[6]);
  cfg.token_dim = static_cast<std::size_t>(m[7]);
  cfg.blocks = static_cast<std::size_t>(m[8]);
  cfg.heads = static_cast<std::size_t>(m[9]);
  cfg.experts = static_cast<std::size_t>(m[10]);
  cfg.top_k = static_cast<std::size_t>(m[11]);
  cfg.expert_hidden = static_cast<std::size_t>(m[12]);
  cfg.lambda_lb = m[13];
  cfg.use_moe = m[14] != 0.0;
  cfg.dense_hidden = static_cast<std::size_t>(m[15]);
  const std::size_t n_ch = static_cast<std::size_t>(m[16]);
  if (meta.size() != 17 + n_ch)
    throw std::runtime_error("refiner checkpoint: channel list truncated");
  cfg.channels.reserve(n_ch);
  for (std::size_t i = 0; i < n_ch; ++i)
    cfg.channels.push_back(static_cast<std::size_t>(m[17 + i]));

  RefinerNet net = RefinerNet::init(cfg, 0);
  auto take = [&](const std::string& nm, Tensor& dst) {
    if (!has_tensor(named, nm))
      throw std::runtime_error("refiner checkpoint: missing tensor " + nm);
    Tensor t = find_tensor(named, nm);
    if (t.shape() != dst.shape())
      throw std::runtime_error("refiner checkpoint: shape mismatch for " + nm);
    t.set_requires_grad(true);
    dst = t;
  };
  auto conv = [&](const std::string& nm, Conv2dLayer& l) {
    take("refiner." + nm + ".w", l.w);
    take("refiner." + nm + ".b", l.b);
  };
  auto lin = [&](const std::string& nm, LinearLayer& l) {
    take("refiner." + nm + ".w", l.w);
    take("refiner." + nm + ".b", l.b);
  };
  conv("stem", net.stem);
  conv("down1", net.down1);
  conv("down2", net.down2);
  lin("embed", net.embed);
  take("refiner.pos", net.pos);
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    auto& blk = net.blocks[i];
    const std::string b = "block" + std::to_string(i) + ".";
    take("refiner." + b + "ln1.g", blk.ln1_g);
    take("refiner." + b + "ln1.b", blk.ln1_b);
    lin(b + "msa.q", blk.msa.q);
    lin(b + "msa.k", blk.msa.k);
    lin(b + "msa.v", blk.msa.v);
    lin(b + "msa.o", blk.msa.o);
    take("refiner." + b + "ln2.g", blk.ln2_g);
    take("refiner." + b + "ln2.b", blk.ln2_b);
    if (blk.use_moe) {
      lin(b + "router", blk.moe.router.proj);
      for (std::size_t e = 0; e < blk.moe.experts.size(); ++e) {
        lin(b + "expert" + std::to_string(e) + ".fc1", blk.moe.experts[e].fc1);
        lin(b + "expert" + std::to_string(e) + ".fc2", blk.moe.experts[e].fc2);
      }
    } else {
      lin(b + "ffn.fc1", blk.dense.fc1);
      lin(b + "ffn.fc2", blk.dense.fc2);
    }
  }
  lin("unembed", net.unembed);
  conv("dec1", net.dec1);
  conv("dec2", net.dec2);
  conv("head", net.head);
  return net;
}

inline void save_refiner(const RefinerNet& net, const std::string& path) {
  save_checkpoint(path, refiner_to_named_tensors(net));
}

inline RefinerNet load_refiner(const std::string& path) {
  return refiner_from_named_tensors(load_checkpoint(path));
}

}  // namespace rkm
