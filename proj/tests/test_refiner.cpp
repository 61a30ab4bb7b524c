#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <vector>

#include "rkm/kan.hpp"
#include "rkm/refiner.hpp"
#include "rkm/scene.hpp"
#include "rkm/sim.hpp"
#include "test_util.hpp"

using namespace rkm;
using Catch::Matchers::WithinAbs;

namespace {

RefinerConfig tiny_config(std::size_t bands = 1) {
  RefinerConfig cfg = default_refiner_config(bands);
  cfg.grid_h = 16;
  cfg.grid_w = 16;
  cfg.enc1 = 4;
  cfg.enc2 = 6;
  cfg.patch = 2;  // 4x4 bottleneck -> 4 tokens
  cfg.token_dim = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.experts = 3;
  cfg.top_k = 2;
  cfg.expert_hidden = 5;
  return cfg;
}

PriorTensor random_prior(std::size_t H, std::size_t W, std::size_t F, Rng& rng) {
  PriorTensor p;
  p.H = H;
  p.W = W;
  p.layout.F = F;
  p.data.resize(p.channels() * H * W);
  for (auto& v : p.data) v = rng.uniform();
  return p;
}

// Plain-loop attention, written independently of the tensor library.
std::vector<double> attention_oracle(const std::vector<double>& z, std::size_t N, std::size_t K,
                                     std::size_t heads, const MsaLayer& msa) {
  auto linear = [&](const std::vector<double>& in, const Tensor& w, const Tensor& b) {
    std::vector<double> out(N * K, 0.0);
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t c = 0; c < K; ++c) {
        double acc = b.data()[c];
        for (std::size_t j = 0; j < K; ++j) acc += in[r * K + j] * w.data()[j * K + c];
        out[r * K + c] = acc;
      }
    return out;
  };
  std::vector<double> q = linear(z, msa.q.w, msa.q.b);
  std::vector<double> k = linear(z, msa.k.w, msa.k.b);
  std::vector<double> v = linear(z, msa.v.w, msa.v.b);
  const std::size_t dh = K / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> mixed(N * K, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> score(N);
      double mx = -1e300;
      for (std::size_t j = 0; j < N; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d)
          s += q[i * K + h * dh + d] * k[j * K + h * dh + d];
        score[j] = s * scale;
        mx = std::max(mx, score[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < N; ++j) {
        score[j] = std::exp(score[j] - mx);
        denom += score[j];
      }
      for (std::size_t d = 0; d < dh; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < N; ++j) acc += score[j] / denom * v[j * K + h * dh + d];
        mixed[i * K + h * dh + d] = acc;
      }
    }
  }
  return linear(mixed, msa.o.w, msa.o.b);
}

void zero_block(RefinerBlock& blk) {
  std::vector<Tensor> all = {blk.ln1_g, blk.ln1_b, blk.ln2_g, blk.ln2_b,
                             blk.msa.q.w, blk.msa.q.b, blk.msa.k.w, blk.msa.k.b,
                             blk.msa.v.w, blk.msa.v.b, blk.msa.o.w, blk.msa.o.b};
  if (blk.use_moe) {
    all.push_back(blk.moe.router.proj.w);
    all.push_back(blk.moe.router.proj.b);
    for (auto& e : blk.moe.experts) {
      all.push_back(e.fc1.w);
      all.push_back(e.fc1.b);
      all.push_back(e.fc2.w);
      all.push_back(e.fc2.b);
    }
  } else {
    for (const Tensor& t : {blk.dense.fc1.w, blk.dense.fc1.b, blk.dense.fc2.w, blk.dense.fc2.b})
      all.push_back(t);
  }
  for (auto& t : all) std::fill(t.data().begin(), t.data().end(), 0.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// patch embedding

TEST_CASE("patchify produces N = hw/P^2 tokens and inverts exactly") {
  Rng rng(5);
  Tensor x = Tensor::randn({3, 8, 8}, rng);
  Tensor tok = patchify(x, 4);
  REQUIRE(tok.dim(0) == 4);
  REQUIRE(tok.dim(1) == 3 * 16);

  Tensor back = unpatchify(tok, 3, 8, 8, 4);
  REQUIRE(back.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(back.data()[i] == x.data()[i]);

  CHECK_THROWS_AS(patchify(x, 3), std::invalid_argument);
}

TEST_CASE("patchify places the patch contents where expected") {
  // 1 channel, 4x4, P=2: token 1 is the top-right patch in row-major patch order.
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  Tensor x = Tensor::from_data({1, 4, 4}, v);
  Tensor tok = patchify(x, 2);
  REQUIRE(tok.dim(0) == 4);
  const std::vector<double> expect = {2, 3, 6, 7};
  for (std::size_t i = 0; i < 4; ++i) CHECK(tok.data()[4 + i] == expect[i]);
}

TEST_CASE("patch embed: zero input and zero positional embedding give zero tokens") {
  Rng rng(8);
  LinearLayer proj = LinearLayer::init(2 * 4, 6, rng);
  Tensor pos = Tensor::zeros({4, 6});
  Tensor tok = patch_embed(Tensor::zeros({2, 4, 4}), 2, proj, pos);
  for (double v : tok.data()) CHECK(v == 0.0);
}

TEST_CASE("patch embed projection gradient matches finite differences") {
  Rng rng(11);
  LinearLayer proj = LinearLayer::init(2 * 4, 6, rng);
  Tensor pos = Tensor::randn({4, 6}, rng, 0.02);
  Tensor x = Tensor::randn({2, 4, 4}, rng);
  auto loss = [&]() {
    Tensor t = patch_embed(x, 2, proj, pos);
    return sum_all(t * t);
  };
  CHECK(testutil::max_fd_rel_error({proj.w, proj.b}, loss) < 1e-6);
}

// ---------------------------------------------------------------------------
// attention

TEST_CASE("single token attention is the value path") {
  Rng rng(21);
  MsaLayer msa = MsaLayer::init(8, 2, rng);
  Tensor z = Tensor::randn({1, 8}, rng);
  Tensor out = msa.forward(z);
  Tensor direct = msa.o.forward(msa.v.forward(z));
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK_THAT(out.data()[i], WithinAbs(direct.data()[i], 1e-14));
}

TEST_CASE("identical tokens produce identical attention rows") {
  Rng rng(22);
  MsaLayer msa = MsaLayer::init(8, 4, rng);
  Tensor row = Tensor::randn({1, 8}, rng);
  std::vector<double> two = row.data();
  two.insert(two.end(), row.data().begin(), row.data().end());
  Tensor z = Tensor::from_data({2, 8}, two);
  Tensor out = msa.forward(z);
  for (std::size_t c = 0; c < 8; ++c)
    CHECK_THAT(out.data()[c], WithinAbs(out.data()[8 + c], 1e-13));
}

TEST_CASE("attention matches the step-by-step oracle") {
  Rng rng(23);
  MsaLayer msa = MsaLayer::init(8, 2, rng);
  Tensor z = Tensor::randn({3, 8}, rng);
  Tensor out = msa.forward(z);
  std::vector<double> oracle = attention_oracle(z.data(), 3, 8, 2, msa);
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK_THAT(out.data()[i], WithinAbs(oracle[i], 1e-10));
}

// ---------------------------------------------------------------------------
// mixture of experts

TEST_CASE("top-k gate selection orders by probability with index tie-break") {
  const std::vector<double> p = {0.1, 0.4, 0.1, 0.4};
  auto sel = rkm::detail::top_k_gates(p.data(), 4, 2);
  REQUIRE(sel == std::vector<std::size_t>{1, 3});
  auto sel1 = rkm::detail::top_k_gates(p.data(), 4, 3);
  REQUIRE(sel1 == std::vector<std::size_t>{0, 1, 3});  // tie at 0.1 -> lower index
}

TEST_CASE("closed-form routing example: logits [2,1,0,-1], k=2") {
  const std::size_t K = 4, E = 4;
  Router router;
  router.proj.w = Tensor::zeros({K, E});
  router.proj.b = Tensor::from_data({1, E}, {2.0, 1.0, 0.0, -1.0});
  std::vector<ExpertFfn> experts;
  for (std::size_t e = 0; e < E; ++e) {
    ExpertFfn f;
    f.fc1.w = Tensor::zeros({K, 2});
    f.fc1.b = Tensor::zeros({1, 2});
    f.fc2.w = Tensor::zeros({2, K});
    f.fc2.b = Tensor::full({1, K}, e == 0 ? 1.0 : (e == 1 ? 10.0 : 100.0));
    experts.push_back(f);
  }
  MoeStats stats;
  Tensor out = moe_forward(Tensor::zeros({1, K}), router, experts, 2, &stats);

  REQUIRE(stats.selected.size() == 1);
  REQUIRE(stats.selected[0] == std::vector<std::size_t>{0, 1});
  const double e1 = std::exp(1.0);
  const double w0 = e1 / (e1 + 1.0), w1 = 1.0 / (e1 + 1.0);
  CHECK_THAT(w0, WithinAbs(0.7311, 5e-5));
  CHECK_THAT(w1, WithinAbs(0.2689, 5e-5));
  for (std::size_t c = 0; c < K; ++c)
    CHECK_THAT(out.data()[c], WithinAbs(w0 * 1.0 + w1 * 10.0, 1e-12));
  REQUIRE(stats.counts == std::vector<std::size_t>{1, 1, 0, 0});
}

TEST_CASE("k = E recovers the dense mixture") {
  Rng rng(31);
  const std::size_t K = 8, E = 4, N = 6;
  Router router;
  router.proj = LinearLayer::init(K, E, rng);
  std::vector<ExpertFfn> experts;
  for (std::size_t e = 0; e < E; ++e) experts.push_back(ExpertFfn::init(K, 5, rng));
  Tensor tokens = Tensor::randn({N, K}, rng);

  Tensor sparse = moe_forward(tokens, router, experts, E);

  Tensor p = softmax_lastdim(router.proj.forward(tokens));
  Tensor dense = Tensor::zeros({N, K});
  for (std::size_t e = 0; e < E; ++e) {
    Tensor we = reshape(slice_cols(p, e, 1), {N, 1});
    dense = dense + experts[e].forward(tokens) * we;
  }
  for (std::size_t i = 0; i < sparse.size(); ++i)
    CHECK_THAT(sparse.data()[i], WithinAbs(dense.data()[i], 1e-12));
}

TEST_CASE("identical experts collapse to a single expert regardless of routing") {
  Rng rng(32);
  const std::size_t K = 8, E = 5, N = 7;
  Router router;
  router.proj = LinearLayer::init(K, E, rng);
  ExpertFfn proto = ExpertFfn::init(K, 6, rng);
  std::vector<ExpertFfn> experts(E, proto);
  Tensor tokens = Tensor::randn({N, K}, rng);
  for (std::size_t k = 1; k <= E; ++k) {
    Tensor out = moe_forward(tokens, router, experts, k);
    Tensor one = proto.forward(tokens);
    for (std::size_t i = 0; i < out.size(); ++i)
      CHECK_THAT(out.data()[i], WithinAbs(one.data()[i], 1e-12));
  }
}

TEST_CASE("renormalized gate weights sum to one on every token") {
  Rng rng(33);
  const std::size_t K = 8, E = 4, N = 64;
  Router router;
  router.proj = LinearLayer::init(K, E, rng);
  // Experts that output the constant 1 in every dimension: the combined output
  // is then exactly the gate-weight sum.
  std::vector<ExpertFfn> experts;
  for (std::size_t e = 0; e < E; ++e) {
    ExpertFfn f;
    f.fc1.w = Tensor::zeros({K, 3});
    f.fc1.b = Tensor::zeros({1, 3});
    f.fc2.w = Tensor::zeros({3, K});
    f.fc2.b = Tensor::full({1, K}, 1.0);
    experts.push_back(f);
  }
  Tensor tokens = Tensor::randn({N, K}, rng);
  for (std::size_t k = 1; k <= E; ++k) {
    MoeStats stats;
    Tensor out = moe_forward(tokens, router, experts, k, &stats);
    for (const auto& sel : stats.selected) REQUIRE(sel.size() == k);
    for (std::size_t i = 0; i < out.size(); ++i)
      CHECK_THAT(out.data()[i], WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("expert permutation with matching router columns is invariant") {
  Rng rng(34);
  const std::size_t K = 8, E = 4, N = 9;
  Router router;
  router.proj = LinearLayer::init(K, E, rng);
  std::vector<ExpertFfn> experts;
  for (std::size_t e = 0; e < E; ++e) experts.push_back(ExpertFfn::init(K, 5, rng));
  Tensor tokens = Tensor::randn({N, K}, rng);
  Tensor base = moe_forward(tokens, router, experts, 2);

  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  Router router2;
  router2.proj.w = Tensor::zeros({K, E});
  router2.proj.b = Tensor::zeros({1, E});
  for (std::size_t e = 0; e < E; ++e) {
    for (std::size_t r = 0; r < K; ++r)
      router2.proj.w.data()[r * E + e] = router.proj.w.data()[r * E + perm[e]];
    router2.proj.b.data()[e] = router.proj.b.data()[perm[e]];
  }
  std::vector<ExpertFfn> experts2;
  for (std::size_t e = 0; e < E; ++e) experts2.push_back(experts[perm[e]]);
  Tensor permuted = moe_forward(tokens, router2, experts2, 2);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK_THAT(permuted.data()[i], WithinAbs(base.data()[i], 1e-12));
}

TEST_CASE("load-balance term with one expert is constant with zero gradient") {
  Rng rng(35);
  Router router;
  router.proj = LinearLayer::init(6, 1, rng);
  router.proj.w.set_requires_grad(true);
  std::vector<ExpertFfn> experts = {ExpertFfn::init(6, 4, rng)};
  Tensor tokens = Tensor::randn({5, 6}, rng);

  Tape tape;
  TapeScope scope(tape);
  Tensor aux;
  moe_forward(tokens, router, experts, 1, nullptr, &aux);
  CHECK_THAT(aux.item(), WithinAbs(1.0, 1e-12));
  tape.backward(aux);
  for (double g : router.proj.w.grad()) CHECK(g == 0.0);
}

TEST_CASE("top-k selection is stable under 1e-9 logit perturbation") {
  Rng rng(36);
  const std::size_t K = 8, E = 4, N = 16;
  Router router;
  router.proj = LinearLayer::init(K, E, rng);
  std::vector<ExpertFfn> experts;
  for (std::size_t e = 0; e < E; ++e) experts.push_back(ExpertFfn::init(K, 4, rng));
  Tensor tokens = Tensor::randn({N, K}, rng);
  MoeStats before;
  moe_forward(tokens, router, experts, 2, &before);
  for (std::size_t i = 0; i < tokens.size(); i += 7) {
    Tensor bumped = Tensor::from_data(tokens.shape(), tokens.data());
    bumped.data()[i] += 1e-9;
    MoeStats after;
    moe_forward(bumped, router, experts, 2, &after);
    REQUIRE(after.selected == before.selected);
  }
}

TEST_CASE("moe gradients match finite differences") {
  Rng rng(37);
  const std::size_t K = 6, E = 3, N = 5;
  Router router;
  router.proj = LinearLayer::init(K, E, rng);
  std::vector<ExpertFfn> experts;
  for (std::size_t e = 0; e < E; ++e) experts.push_back(ExpertFfn::init(K, 4, rng));
  Tensor tokens = Tensor::randn({N, K}, rng);
  std::vector<Tensor> params = {router.proj.w, router.proj.b};
  for (auto& e : experts) {
    params.push_back(e.fc1.w);
    params.push_back(e.fc1.b);
    params.push_back(e.fc2.w);
    params.push_back(e.fc2.b);
  }
  auto loss = [&]() {
    Tensor out = moe_forward(tokens, router, experts, 2);
    return sum_all(out * out);
  };
  CHECK(testutil::max_fd_rel_error(params, loss) < 1e-5);
}

// ---------------------------------------------------------------------------
// transformer block

TEST_CASE("block with all-zero weights is the identity") {
  Rng rng(41);
  RefinerConfig cfg = tiny_config();
  RefinerBlock blk = RefinerBlock::init(cfg, rng);
  zero_block(blk);
  Tensor z = Tensor::randn({4, cfg.token_dim}, rng);
  Tensor out = blk.forward(z);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(out.data()[i] == z.data()[i]);
}

TEST_CASE("block gradient matches finite differences on 4 tokens") {
  Rng rng(42);
  RefinerConfig cfg = tiny_config();
  RefinerBlock blk = RefinerBlock::init(cfg, rng);
  Tensor z = Tensor::randn({4, cfg.token_dim}, rng);
  std::vector<Tensor> params = {blk.ln1_g, blk.ln1_b, blk.ln2_g, blk.ln2_b,
                                blk.msa.q.w, blk.msa.q.b, blk.msa.k.w, blk.msa.k.b,
                                blk.msa.v.w, blk.msa.v.b, blk.msa.o.w, blk.msa.o.b,
                                blk.moe.router.proj.w, blk.moe.router.proj.b};
  for (auto& e : blk.moe.experts) {
    params.push_back(e.fc1.w);
    params.push_back(e.fc1.b);
    params.push_back(e.fc2.w);
    params.push_back(e.fc2.b);
  }
  auto loss = [&]() {
    Tensor out = blk.forward(z);
    return sum_all(out * out);
  };
  CHECK(testutil::max_fd_rel_error(params, loss) < 1e-5);
}

TEST_CASE("block commutes with token permutation") {
  Rng rng(43);
  RefinerConfig cfg = tiny_config();
  RefinerBlock blk = RefinerBlock::init(cfg, rng);
  const std::size_t N = 4, K = cfg.token_dim;
  Tensor z = Tensor::randn({N, K}, rng);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  Tensor zp = gather_rows(z, perm);
  Tensor a = gather_rows(blk.forward(z), perm);
  Tensor b = blk.forward(zp);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK_THAT(a.data()[i], WithinAbs(b.data()[i], 1e-12));
}

// ---------------------------------------------------------------------------
// full network

TEST_CASE("refiner config validation") {
  RefinerConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  RefinerConfig bad = cfg;
  bad.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.top_k = 4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.channels.clear();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.patch = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("matched dense hidden width is within ten percent of the moe branch") {
  RefinerConfig cfg = default_refiner_config(2);
  const std::size_t h = cfg.matched_dense_hidden();
  const std::size_t dense = 2 * cfg.token_dim * h + h + cfg.token_dim;
  const double rel = std::fabs(static_cast<double>(dense) -
                               static_cast<double>(cfg.moe_param_count())) /
                     static_cast<double>(cfg.moe_param_count());
  CHECK(rel < 0.10);

  cfg.use_moe = false;
  RefinerNet a = RefinerNet::init(cfg, 3);
  cfg.use_moe = true;
  RefinerNet b = RefinerNet::init(cfg, 3);
  const double drel = std::fabs(static_cast<double>(a.parameter_count()) -
                                static_cast<double>(b.parameter_count())) /
                      static_cast<double>(b.parameter_count());
  CHECK(drel < 0.10);
}

TEST_CASE("zero-initialized head makes refine return the base map bit for bit") {
  Rng rng(51);
  RefinerConfig cfg = tiny_config(2);
  RefinerNet net = RefinerNet::init(cfg, 9);
  PriorTensor prior = random_prior(16, 16, 2, rng);
  Radiomap base = zero_radiomap(16, 16, 2);
  for (auto& v : base.values) v = rng.uniform();
  Radiomap out = refine(net, prior, base);
  REQUIRE(out.values.size() == base.values.size());
  for (std::size_t i = 0; i < out.values.size(); ++i) REQUIRE(out.values[i] == base.values[i]);
}

TEST_CASE("refine output stays in the unit interval") {
  Rng rng(52);
  RefinerConfig cfg = tiny_config(1);
  RefinerNet net = RefinerNet::init(cfg, 12);
  // randomize the head so the residual is nonzero
  for (auto& v : net.head.w.data()) v = rng.normal() * 0.5;
  for (auto& v : net.head.b.data()) v = rng.normal() * 0.5;
  PriorTensor prior = random_prior(16, 16, 1, rng);
  Radiomap base = zero_radiomap(16, 16, 1);
  for (auto& v : base.values) v = rng.uniform();
  Radiomap out = refine(net, prior, base);
  double lo = 1e9, hi = -1e9;
  bool nonzero_res = false;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    lo = std::min(lo, out.values[i]);
    hi = std::max(hi, out.values[i]);
    if (out.values[i] != base.values[i]) nonzero_res = true;
  }
  CHECK(nonzero_res);
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);
}

TEST_CASE("refiner shape errors") {
  RefinerConfig cfg = tiny_config(1);
  RefinerNet net = RefinerNet::init(cfg, 1);
  Rng rng(1);
  PriorTensor wrong = random_prior(32, 32, 1, rng);
  Radiomap base = zero_radiomap(32, 32, 1);
  CHECK_THROWS_AS(refine(net, wrong, base), std::invalid_argument);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 16, 16})), std::invalid_argument);
}

TEST_CASE("refiner input selects the requested prior channels") {
  PriorTensor p;
  p.H = 2;
  p.W = 2;
  p.layout.F = 1;  // 6 channels
  p.data.resize(6 * 4);
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t i = 0; i < 4; ++i) p.data[c * 4 + i] = static_cast<double>(c * 10 + i);
  Tensor x = refiner_input(p, {4, 1});
  REQUIRE(x.shape() == Shape{2, 2, 2});
  CHECK(x.data()[0] == 40.0);
  CHECK(x.data()[3] == 43.0);
  CHECK(x.data()[4] == 10.0);
  CHECK_THROWS_AS(refiner_input(p, {6}), std::out_of_range);
}

TEST_CASE("full refiner gradients match finite differences on sampled parameters") {
  Rng rng(53);
  RefinerConfig cfg = tiny_config(1);
  RefinerNet net = RefinerNet::init(cfg, 17);
  // give the head nonzero weights so its inputs matter
  for (auto& v : net.head.w.data()) v = rng.normal() * 0.3;
  Tensor x = Tensor::randn({cfg.in_channels(), 16, 16}, rng, 0.5);
  auto loss = [&]() {
    ForwardOut out = net.forward(x);
    return mean_all(out.residual * out.residual) + out.aux * 0.01;
  };
  Rng pick(54);
  CHECK(testutil::sampled_fd_rel_error(net.parameters(), loss, pick, 60) < 1e-5);
}

TEST_CASE("every parameter receives a finite gradient") {
  Rng rng(55);
  RefinerConfig cfg = tiny_config(1);
  RefinerNet net = RefinerNet::init(cfg, 19);
  for (auto& v : net.head.w.data()) v = rng.normal() * 0.3;
  Tensor x = Tensor::randn({cfg.in_channels(), 16, 16}, rng, 0.5);
  std::vector<Tensor> params = net.parameters();
  for (auto& p : params) p.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  ForwardOut out = net.forward(x);
  Tensor loss = mean_all(out.residual * out.residual) + out.aux * 0.01;
  tape.backward(loss);
  for (auto& p : params) {
    REQUIRE(p.grad().size() == p.size());
    for (double g : p.grad()) REQUIRE(std::isfinite(g));
  }
}

// ---------------------------------------------------------------------------
// training

TEST_CASE("training loss decreases over the first ten epochs") {
  Rng rng(61);
  RefinerConfig cfg = tiny_config(1);
  RefinerNet net = RefinerNet::init(cfg, 23);
  std::vector<RefinerSample> data;
  for (int i = 0; i < 4; ++i) {
    RefinerSample s;
    s.prior = random_prior(16, 16, 1, rng);
    s.base = zero_radiomap(16, 16, 1);
    s.truth = zero_radiomap(16, 16, 1);
    for (auto& v : s.truth.values) v = rng.uniform();
    data.push_back(std::move(s));
  }
  RefinerTrainConfig tc;
  tc.epochs = 10;
  tc.seed = 7;
  RefinerTrainResult r = train_refiner(net, data, tc);
  REQUIRE(r.history.size() == 10);
  CHECK(r.history[9] < r.history[0]);
  CHECK(r.initial_loss == r.history.front());
  CHECK(r.final_loss == r.history.back());
}

TEST_CASE("expert utilization logs cover every epoch and sum to top_k") {
  Rng rng(62);
  RefinerConfig cfg = tiny_config(1);
  RefinerNet net = RefinerNet::init(cfg, 29);
  std::vector<RefinerSample> data;
  RefinerSample s;
  s.prior = random_prior(16, 16, 1, rng);
  s.base = zero_radiomap(16, 16, 1);
  s.truth = zero_radiomap(16, 16, 1);
  data.push_back(std::move(s));
  RefinerTrainConfig tc;
  tc.epochs = 3;
  RefinerTrainResult r = train_refiner(net, data, tc);
  REQUIRE(r.utilization.size() == 3);
  REQUIRE(r.gate_means.size() == 3);
  for (const auto& u : r.utilization) {
    REQUIRE(u.size() == cfg.experts);
    double sum = 0.0;
    for (double f : u) {
      CHECK(f >= 0.0);
      CHECK(f <= 1.0);
      sum += f;
    }
    CHECK_THAT(sum, WithinAbs(static_cast<double>(cfg.top_k), 1e-9));
  }
}

TEST_CASE("training a single scene beats the observation-only coarse fit") {
  SceneSpec spec;
  spec.frequencies_hz = {868e6};
  RadioScene scene = generate_scene(spec, 77);
  Radiomap truth = simulate_radiomap(scene, SimParams{});
  ObservationSet obs = sample_observations(truth, 0.05, 78, SamplingOptions{});

  KanNetwork kan = KanNetwork::init({6, 16, 16, 1}, 8, 3, 79);
  KanTrainConfig kf;
  kf.epochs = 600;
  train_kan(kan, obs, scene, kf);
  Radiomap coarse = evaluate_coarse(kan, scene);
  DepthMap depth = depth_map(scene);
  PriorTensor prior = assemble_prior_tensor(coarse, obs, scene, depth);

  double kan_mse = 0.0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    const double d = coarse.values[i] - truth.values[i];
    kan_mse += d * d;
  }
  kan_mse /= static_cast<double>(truth.values.size());

  RefinerConfig cfg = default_refiner_config(1);
  RefinerNet net = RefinerNet::init(cfg, 80);
  std::vector<RefinerSample> data = {{prior, coarse, truth}};
  RefinerTrainConfig tc;
  tc.epochs = 120;
  tc.seed = 81;
  train_refiner(net, data, tc);

  Radiomap refined = refine(net, prior, coarse);
  double ref_mse = 0.0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    const double d = refined.values[i] - truth.values[i];
    ref_mse += d * d;
  }
  ref_mse /= static_cast<double>(truth.values.size());
  INFO("kan mse " << kan_mse << " refined m " << ref_mse);
  CHECK(ref_mse < kan_mse);
}

TEST_CASE("train_refiner rejects bad input") {
  RefinerConfig cfg = tiny_config(1);
  RefinerNet net = RefinerNet::init(cfg, 1);
  CHECK_THROWS_AS(train_refiner(net, {}, RefinerTrainConfig{}), std::invalid_argument);
  Rng rng(2);
  RefinerSample s;
  s.prior = random_prior(32, 32, 1, rng);  // wrong grid
  s.base = zero_radiomap(32, 32, 1);
  s.truth = zero_radiomap(32, 32, 1);
  CHECK_THROWS_AS(train_refiner(net, {s}, RefinerTrainConfig{}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// checkpointing

TEST_CASE("refiner checkpoint round trip preserves config and outputs") {
  Rng rng(71);
  RefinerConfig cfg = tiny_config(2);
  cfg.lambda_lb = 0.025;
  RefinerNet net = RefinerNet::init(cfg, 83);
  for (auto& v : net.head.w.data()) v = rng.normal() * 0.2;

  const std::string path = "/tmp/rkm_refiner_ckpt.rkck";
  save_refiner(net, path);
  RefinerNet back = load_refiner(path);

  CHECK(back.cfg.channels == cfg.channels);
  CHECK(back.cfg.token_dim == cfg.token_dim);
  CHECK(back.cfg.experts == cfg.experts);
  CHECK(back.cfg.top_k == cfg.top_k);
  CHECK(back.cfg.lambda_lb == cfg.lambda_lb);
  CHECK(back.cfg.use_moe == cfg.use_moe);

  Tensor x = Tensor::randn({cfg.in_channels(), 16, 16}, rng);
  ForwardOut a = net.forward(x);
  ForwardOut b = back.forward(x);
  REQUIRE(a.residual.size() == b.residual.size());
  for (std::size_t i = 0; i < a.residual.size(); ++i)
    REQUIRE(a.residual.data()[i] == b.residual.data()[i]);

  std::vector<Tensor> ps = back.parameters();
  for (auto& p : ps) REQUIRE(p.requires_grad());
}

TEST_CASE("dense-ffn variant checkpoints round trip too") {
  Rng rng(72);
  RefinerConfig cfg = tiny_config(1);
  cfg.use_moe = false;
  RefinerNet net = RefinerNet::init(cfg, 85);
  const std::string path = "/tmp/rkm_refiner_dense.rkck";
  save_refiner(net, path);
  RefinerNet back = load_refiner(path);
  CHECK_FALSE(back.cfg.use_moe);
  Tensor x = Tensor::randn({cfg.in_channels(), 16, 16}, rng);
  ForwardOut a = net.forward(x);
  ForwardOut b = back.forward(x);
  for (std::size_t i = 0; i < a.residual.size(); ++i)
    REQUIRE(a.residual.data()[i] == b.residual.data()[i]);
}

TEST_CASE("refiner checkpoint with missing tensors is rejected") {
  RefinerConfig cfg = tiny_config(1);
  RefinerNet net = RefinerNet::init(cfg, 87);
  NamedTensors named = refiner_to_named_tensors(net);
  named.pop_back();
  CHECK_THROWS_AS(refiner_from_named_tensors(named), std::runtime_error);
  NamedTensors no_meta(named.begin() + 1, named.end());
  CHECK_THROWS_AS(refiner_from_named_tensors(no_meta), std::runtime_error);
}
