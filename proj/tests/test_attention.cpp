#include "doctest.h"

#include "moelab/attention.hpp"
#include "moelab/numerics.hpp"

#include <random>

using namespace moelab;

TEST_CASE("build_layout follows the motifs") {
  auto l = build_layout(45, LayoutPattern::S3F1);
  REQUIRE(l.size() == 45);
  CHECK(l[0] == LayerKind::FULL);
  for (int i = 1; i < 45; ++i) {
    CHECK(l[i] == (i % 4 == 0 ? LayerKind::FULL : LayerKind::SWA));
  }

  auto l9 = build_layout(9, LayoutPattern::S3F1);
  std::vector<LayerKind> want = {LayerKind::FULL, LayerKind::SWA, LayerKind::SWA,
                                 LayerKind::SWA, LayerKind::FULL, LayerKind::SWA,
                                 LayerKind::SWA, LayerKind::SWA, LayerKind::FULL};
  CHECK(l9 == want);

  auto l4 = build_layout(4, LayoutPattern::FFFF);
  CHECK(l4 == std::vector<LayerKind>(4, LayerKind::FULL));

  auto l5 = build_layout(5, LayoutPattern::S1F1);
  std::vector<LayerKind> want5 = {LayerKind::FULL, LayerKind::SWA, LayerKind::FULL,
                                  LayerKind::SWA, LayerKind::FULL};
  CHECK(l5 == want5);

  CHECK_THROWS_AS(build_layout(44, LayoutPattern::S3F1), std::invalid_argument);
  CHECK_THROWS_AS(build_layout(6, LayoutPattern::S1F1), std::invalid_argument);
}

TEST_CASE("swa_mask enumerates i-W < j <= i") {
  auto m = swa_mask(4, 2);
  Eigen::ArrayXXi want(4, 4);
  want << 1, 0, 0, 0,
          1, 1, 0, 0,
          0, 1, 1, 0,
          0, 0, 1, 1;
  CHECK((m == want).all());

  CHECK((swa_mask(5, 7) == causal_mask(5)).all());
  CHECK((swa_mask(6, 6) == causal_mask(6)).all());

  auto diag = swa_mask(5, 1);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) CHECK(diag(i, j) == (i == j ? 1 : 0));

  // entrywise <= causal, equality iff W >= T
  for (int w = 1; w <= 6; ++w) {
    auto s = swa_mask(5, w);
    auto c = causal_mask(5);
    CHECK((s <= c).all());
    CHECK(((s == c).all()) == (w >= 5));
  }
}

TEST_CASE("rope: identity at position zero, norm preserving, relative") {
  std::mt19937_64 rng(5);
  const int d = 8, r = 6;

  Tensor v = Tensor::leaf(randn(1, d, rng));
  Tensor rot0 = apply_rope(v, {0}, 1e4, r);
  CHECK((rot0.value() - v.value()).cwiseAbs().maxCoeff() < 1e-15);

  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::leaf(randn(3, d, rng));
    Tensor y = apply_rope(x, {0, 13, 257}, 1e4, r);
    for (int i = 0; i < 3; ++i) {
      CHECK(y.value().row(i).head(r).norm() ==
            doctest::Approx(x.value().row(i).head(r).norm()).epsilon(1e-12));
      CHECK((y.value().row(i).tail(d - r) - x.value().row(i).tail(d - r))
                .cwiseAbs()
                .maxCoeff() == 0.0);
    }
  }

  // <rope(q,a), rope(k,b)> depends only on a-b.
  std::uniform_int_distribution<int> pos(0, 400);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor q = Tensor::leaf(randn(1, d, rng));
    Tensor k = Tensor::leaf(randn(1, d, rng));
    const int a = pos(rng), b = pos(rng), c = pos(rng);
    const double dot1 = (apply_rope(q, {a}, 1e4, r).value() *
                         apply_rope(k, {b}, 1e4, r).value().transpose())(0, 0);
    const double dot2 = (apply_rope(q, {a + c}, 1e4, r).value() *
                         apply_rope(k, {b + c}, 1e4, r).value().transpose())(0, 0);
    CHECK(dot1 == doctest::Approx(dot2).epsilon(1e-9));
  }
}

namespace {

AttentionSpec tiny_spec(int nq, int nkv, int d) {
  AttentionSpec s;
  s.n_q_heads = nq;
  s.n_kv_heads = nkv;
  s.head_dim = d;
  s.rope_dims = 0;
  s.qk_norm = false;
  s.gated = false;
  return s;
}

std::vector<Tensor> rand_heads(int n, int T, int d, std::mt19937_64& rng) {
  std::vector<Tensor> v;
  for (int i = 0; i < n; ++i) v.push_back(Tensor::leaf(randn(T, d, rng)));
  return v;
}

}  // namespace

TEST_CASE("gqa with group size 1 equals plain multi-head attention") {
  std::mt19937_64 rng(7);
  const int T = 5, d = 4, H = 3;
  auto q = rand_heads(H, T, d, rng);
  auto k = rand_heads(H, T, d, rng);
  auto v = rand_heads(H, T, d, rng);
  auto mask = causal_mask(T);

  auto spec = tiny_spec(H, H, d);
  auto out = gqa_attention(q, k, v, mask, spec);

  // plain per-head reference
  for (int h = 0; h < H; ++h) {
    Matrix s = q[h].value() * k[h].value().transpose() / std::sqrt(double(d));
    Matrix alpha = Matrix::Zero(T, T);
    for (int i = 0; i < T; ++i) {
      double z = 0;
      for (int j = 0; j <= i; ++j) z += std::exp(s(i, j));
      for (int j = 0; j <= i; ++j) alpha(i, j) = std::exp(s(i, j)) / z;
    }
    Matrix y = alpha * v[h].value();
    CHECK((out[h].value() - y).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("gqa with one kv head matches replicated-KV oracle") {
  std::mt19937_64 rng(9);
  const int T = 6, d = 4, H = 4;
  auto q = rand_heads(H, T, d, rng);
  auto k = rand_heads(1, T, d, rng);
  auto v = rand_heads(1, T, d, rng);
  auto mask = causal_mask(T);

  auto out = gqa_attention(q, k, v, mask, tiny_spec(H, 1, d));

  // oracle: replicate the single KV head and run as plain MHA
  std::vector<Tensor> kr, vr;
  for (int h = 0; h < H; ++h) {
    kr.push_back(Tensor::leaf(k[0].value()));
    vr.push_back(Tensor::leaf(v[0].value()));
  }
  auto ref = gqa_attention(q, kr, vr, mask, tiny_spec(H, H, d));
  for (int h = 0; h < H; ++h) {
    CHECK((out[h].value() - ref[h].value()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("identical values give constant outputs on unmasked rows") {
  std::mt19937_64 rng(11);
  const int T = 5, d = 3;
  auto q = rand_heads(2, T, d, rng);
  auto k = rand_heads(2, T, d, rng);
  Matrix c = randn(1, d, rng);
  std::vector<Tensor> v;
  v.push_back(Tensor::leaf(c.replicate(T, 1)));
  v.push_back(Tensor::leaf(c.replicate(T, 1)));
  auto out = gqa_attention(q, k, v, causal_mask(T), tiny_spec(2, 2, d));
  for (auto& y : out) {
    for (int i = 0; i < T; ++i) {
      CHECK((y.value().row(i) - c.row(0)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("alpha rows sum to one in the trace") {
  std::mt19937_64 rng(13);
  const int T = 7, d = 4;
  auto q = rand_heads(2, T, d, rng);
  auto k = rand_heads(1, T, d, rng);
  auto v = rand_heads(1, T, d, rng);
  AttentionTrace trace;
  gqa_attention(q, k, v, swa_mask(T, 3), tiny_spec(2, 1, d), &trace);
  for (const auto& w : trace.weights) {
    for (int i = 0; i < T; ++i) {
      CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-10);
    }
  }
}

TEST_CASE("head gate basics") {
  std::mt19937_64 rng(17);
  const int T = 4, d = 3, width = 6;
  Tensor y = Tensor::leaf(randn(T, d, rng));
  Tensor x = Tensor::leaf(randn(T, width, rng));

  Tensor wz = Tensor::leaf(Matrix::Zero(1, width));
  Tensor half = head_gate(y, x, wz);
  CHECK((half.value() - 0.5 * y.value()).cwiseAbs().maxCoeff() == 0.0);

  // saturated gate ~ identity
  Matrix xw = Matrix::Zero(T, width);
  xw.col(0).setConstant(1.0);
  Tensor xs = Tensor::leaf(xw);
  Tensor wbig = Tensor::leaf((Matrix(1, width) << 20, 0, 0, 0, 0, 0).finished());
  Tensor sat = head_gate(y, xs, wbig);
  CHECK((sat.value() - y.value()).cwiseAbs().maxCoeff() < 1e-8);

  // ||gated|| <= ||y|| since 0 < g < 1
  Tensor w = Tensor::leaf(randn(1, width, rng));
  Vector gates;
  Tensor gated = head_gate(y, x, w, &gates);
  for (int i = 0; i < T; ++i) {
    CHECK(gates(i) > 0.0);
    CHECK(gates(i) < 1.0);
    CHECK(gated.value().row(i).norm() <= y.value().row(i).norm());
  }
}

TEST_CASE("sink-mass identity: gating equals an augmented zero-value sink") {
  std::mt19937_64 rng(19);
  const int T = 6, d = 4, width = 8;
  std::uniform_int_distribution<int> wdist(1, T);

  for (int trial = 0; trial < 100; ++trial) {
    Tensor q = Tensor::leaf(randn(T, d, rng));
    Tensor k = Tensor::leaf(randn(T, d, rng));
    Tensor v = Tensor::leaf(randn(T, d, rng));
    Tensor x = Tensor::leaf(randn(T, width, rng));
    Tensor w = Tensor::leaf(randn(1, width, rng));
    auto mask = swa_mask(T, wdist(rng));

    auto spec = tiny_spec(1, 1, d);
    AttentionTrace trace;
    auto heads = gqa_attention({q}, {k}, {v}, mask, spec, &trace);
    Vector gates;
    Tensor gated = head_gate(heads[0], x, w, &gates);

    // Augmented construction: one extra key with unnormalized weight
    // e^{-a_i} Z_i (a_i the gate logit) and zero value.
    Matrix s = q.value() * k.value().transpose() / std::sqrt(double(d));
    Matrix ref(T, d);
    for (int i = 0; i < T; ++i) {
      const double a_i = (x.value().row(i) * w.value().transpose())(0);
      const double z = trace.normalizers[0](i);
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
      double denom = z + std::exp(-a_i) * z;
      for (int j = 0; j < T; ++j) {
        if (mask(i, j)) acc += std::exp(s(i, j)) / denom * v.value().row(j);
      }
      ref.row(i) = acc;  // sink contributes zero value
    }
    CHECK((gated.value() - ref).cwiseAbs().maxCoeff() < 1e-10);

    // gated effective weights sum to g_i
    for (int i = 0; i < T; ++i) {
      double eff = gates(i) * trace.weights[0].row(i).sum();
      CHECK(eff == doctest::Approx(gates(i)).epsilon(1e-10));
    }
  }
}

namespace {

AttentionLayerParams rand_layer_params(const AttentionSpec& spec, int width,
                                       std::mt19937_64& rng, bool requires_grad) {
  AttentionLayerParams p;
  const double s = 1.0 / std::sqrt(double(width));
  p.w_q = Tensor::leaf(randn(width, spec.n_q_heads * spec.head_dim, rng, s), requires_grad);
  p.w_k = Tensor::leaf(randn(width, spec.n_kv_heads * spec.head_dim, rng, s), requires_grad);
  p.w_v = Tensor::leaf(randn(width, spec.n_kv_heads * spec.head_dim, rng, s), requires_grad);
  p.w_o = Tensor::leaf(randn(spec.n_q_heads * spec.head_dim, width, rng, s), requires_grad);
  p.w_gate = Tensor::leaf(randn(spec.n_q_heads, width, rng, s), requires_grad);
  return p;
}

}  // namespace

TEST_CASE("attention layer: zero output projection means zero state delta") {
  std::mt19937_64 rng(23);
  const int width = 8;
  AttentionLayerConfig cfg;
  cfg.spec = tiny_spec(2, 1, 4);
  cfg.spec.gated = true;
  auto params = rand_layer_params(cfg.spec, width, rng, false);
  params.w_o = Tensor::leaf(Matrix::Zero(2 * 4, width));
  Tensor x = Tensor::leaf(randn(5, width, rng));
  Tensor out = attention_layer_forward(x, cfg, params);
  CHECK((out.value() - x.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention layer rejects mismatched shapes with dimension names") {
  std::mt19937_64 rng(29);
  AttentionLayerConfig cfg;
  cfg.spec = tiny_spec(2, 1, 4);
  auto params = rand_layer_params(cfg.spec, 8, rng, false);
  params.w_k = Tensor::leaf(randn(8, 3, rng));
  Tensor x = Tensor::leaf(randn(5, 8, rng));
  bool threw = false;
  try {
    attention_layer_forward(x, cfg, params);
  } catch (const std::invalid_argument& e) {
    threw = true;
    CHECK(std::string(e.what()).find("w_k") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("ungated full-window layer matches a reference computation") {
  std::mt19937_64 rng(31);
  const int width = 8, T = 5, d = 4, H = 2;
  AttentionLayerConfig cfg;
  cfg.spec = tiny_spec(H, H, d);
  auto params = rand_layer_params(cfg.spec, width, rng, false);
  Tensor x = Tensor::leaf(randn(T, width, rng));
  Tensor out = attention_layer_forward(x, cfg, params);

  // reference: plain full attention, no rope, no norm, no gate
  Matrix q = x.value() * params.w_q.value();
  Matrix k = x.value() * params.w_k.value();
  Matrix v = x.value() * params.w_v.value();
  Matrix heads(T, H * d);
  for (int h = 0; h < H; ++h) {
    Matrix qh = q.middleCols(h * d, d), kh = k.middleCols(h * d, d),
           vh = v.middleCols(h * d, d);
    Matrix s = qh * kh.transpose() / std::sqrt(double(d));
    for (int i = 0; i < T; ++i) {
      double z = 0;
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
      for (int j = 0; j <= i; ++j) z += std::exp(s(i, j));
      for (int j = 0; j <= i; ++j) acc += std::exp(s(i, j)) / z * vh.row(j);
      heads.block(i, h * d, 1, d) = acc;
    }
  }
  Matrix ref = x.value() + heads * params.w_o.value();
  CHECK((out.value() - ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention layer gradient check") {
  std::mt19937_64 rng(37);
  const int width = 6, T = 4;
  AttentionLayerConfig cfg;
  cfg.spec = tiny_spec(2, 1, 3);
  cfg.spec.gated = true;
  cfg.spec.qk_norm = true;
  cfg.spec.rope_dims = 2;
  cfg.spec.window = 2;
  auto params = rand_layer_params(cfg.spec, width, rng, true);
  Tensor x = Tensor::leaf(randn(T, width, rng), true);
  Tensor readout = Tensor::leaf(randn(T, width, rng));

  auto f = [&](const std::vector<Tensor>& in) {
    AttentionLayerParams p;
    p.w_q = in[0];
    p.w_k = in[1];
    p.w_v = in[2];
    p.w_o = in[3];
    p.w_gate = in[4];
    return sum(cwise_mul(attention_layer_forward(in[5], cfg, p), readout));
  };
  auto report = grad_check(
      f, {params.w_q, params.w_k, params.w_v, params.w_o, params.w_gate, x},
      1e-5, 1e-5);
  CHECK(report.passed);
  CHECK(report.max_rel_err <= 1e-5);
}

TEST_CASE("gated attention scalar readout gradient on random 2x2x4 inputs") {
  std::mt19937_64 rng(41);
  const int T = 2, d = 4, H = 2, width = 5;
  Tensor x = Tensor::leaf(randn(T, width, rng), true);
  std::vector<Tensor> q, k, v;
  for (int h = 0; h < H; ++h) {
    q.push_back(Tensor::leaf(randn(T, d, rng), true));
    k.push_back(Tensor::leaf(randn(T, d, rng), true));
    v.push_back(Tensor::leaf(randn(T, d, rng), true));
  }
  Tensor w = Tensor::leaf(randn(1, width, rng), true);
  auto spec = tiny_spec(H, H, d);

  auto f = [&](const std::vector<Tensor>& in) {
    std::vector<Tensor> qq = {in[0], in[1]}, kk = {in[2], in[3]}, vv = {in[4], in[5]};
    auto heads = gqa_attention(qq, kk, vv, causal_mask(T), spec);
    Tensor acc = Tensor::scalar(0.0);
    for (int h = 0; h < H; ++h) {
      acc = acc + sum(head_gate(heads[h], in[6], in[7]));
    }
    return acc;
  };
  auto report =
      grad_check(f, {q[0], q[1], k[0], k[1], v[0], v[1], x, w}, 1e-5, 1e-5);
  CHECK(report.passed);
}
