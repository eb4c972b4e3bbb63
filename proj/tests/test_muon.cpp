#include "doctest.h"

#include "moelab/muon.hpp"

#include <Eigen/SVD>
#include <random>

using namespace moelab;

namespace {

// Independent oracle: polar factor U V^T from a singular value decomposition.
Matrix svd_polar(const Matrix& g) {
  Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().transpose();
}

// Random matrix with a controlled condition number.
Matrix conditioned(Eigen::Index r, Eigen::Index c, double cond,
                   std::mt19937_64& rng) {
  const Eigen::Index k = std::min(r, c);
  Matrix a = randn(r, k, rng), b = randn(c, k, rng);
  Eigen::HouseholderQR<Matrix> qa(a), qb(b);
  Matrix qu = qa.householderQ() * Matrix::Identity(r, k);
  Matrix qv = qb.householderQ() * Matrix::Identity(c, k);
  Vector s(k);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < k; ++i) {
    s(i) = std::exp(std::log(1.0 / cond) * u(rng));  // in [1/cond, 1]
  }
  s(0) = 1.0;
  if (k > 1) s(k - 1) = 1.0 / cond;
  return qu * s.asDiagonal() * qv.transpose();
}

}  // namespace

TEST_CASE("polar factor of an isometry is itself") {
  std::mt19937_64 rng(3);
  Matrix a = randn(8, 4, rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ() * Matrix::Identity(8, 4);
  auto o = polar_express(q, 6, PrecisionMode::EXACT64);
  CHECK((o - q).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("polar factor of a positive diagonal is the identity") {
  Matrix g = Matrix::Zero(2, 2);
  g(0, 0) = 3.0;
  g(1, 1) = 0.2;
  auto o = polar_express(g, 6, PrecisionMode::EXACT64);
  CHECK((o - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("random 8x4 matrix matches the SVD polar oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix g = randn(8, 4, rng);
    PolarDiagnostics diag;
    auto o = polar_express(g, 6, PrecisionMode::EXACT64, &diag);
    CHECK((o - svd_polar(g)).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(!diag.overflow);
    CHECK(diag.step_max_abs.size() == 6);
  }
}

TEST_CASE("well-conditioned suite: residual below 1e-6, oracle match") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<Eigen::Index> dim(2, 64);
  std::uniform_real_distribution<double> cond(1.0, 100.0);
  for (int trial = 0; trial < 30; ++trial) {
    const auto r = dim(rng), c = dim(rng);
    Matrix g = conditioned(r, c, cond(rng), rng);
    PolarDiagnostics diag;
    auto o = polar_express(g, 6, PrecisionMode::EXACT64, &diag);
    CHECK(diag.ortho_residual <= 1e-6);
    CHECK((o - svd_polar(g)).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("scale invariance of the polar factor") {
  std::mt19937_64 rng(11);
  for (double c : {1e-6, 0.37, 1.0, 42.0, 1e8}) {
    Matrix g = conditioned(12, 7, 30.0, rng);
    auto a = polar_express(g, 6, PrecisionMode::EXACT64);
    auto b = polar_express(Matrix(c * g), 6, PrecisionMode::EXACT64);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("reduced-precision residuals dominate exact ones") {
  std::mt19937_64 rng(13);
  bool some_extreme_larger = false;
  for (int trial = 0; trial < 12; ++trial) {
    Matrix g = conditioned(24, 24, 50.0, rng);
    PolarDiagnostics d64, d16, dbf;
    polar_express(g, 6, PrecisionMode::EXACT64, &d64);
    polar_express(g, 6, PrecisionMode::EMULATED_FP16, &d16);
    polar_express(g, 6, PrecisionMode::EMULATED_BF16, &dbf);
    CHECK(d16.ortho_residual >= d64.ortho_residual);
    CHECK(dbf.ortho_residual >= d64.ortho_residual);
    for (size_t s = 0; s < d64.step_max_abs.size(); ++s) {
      if (s < d16.step_max_abs.size() &&
          d16.step_max_abs[s] > d64.step_max_abs[s]) {
        some_extreme_larger = true;
      }
      if (s < dbf.step_max_abs.size() &&
          dbf.step_max_abs[s] > d64.step_max_abs[s]) {
        some_extreme_larger = true;
      }
    }
  }
  CHECK(some_extreme_larger);
}

TEST_CASE("polar_express rejects the zero matrix") {
  CHECK_THROWS_AS(polar_express(Matrix::Zero(3, 3), 6, PrecisionMode::EXACT64),
                  std::invalid_argument);
}

TEST_CASE("muon step: pure decay, diagonal gradient, momentum-free linearity") {
  // grad=0, m=0: parameter shrinks by (1 - lr wd)
  MuonState st;
  st.lr = 0.01;
  st.weight_decay = 0.1;
  st.beta = 0.95;
  Matrix p0 = Matrix::Constant(3, 3, 2.0);
  Tensor p = Tensor::leaf(p0, true);
  muon_step("w", p, Matrix::Zero(3, 3), st);
  CHECK((p.value() - (1.0 - 0.001) * p0).cwiseAbs().maxCoeff() < 1e-15);

  // wd=0, beta=0, square param, grad = diag(5,1): step is -lr * I
  MuonState st2;
  st2.lr = 0.05;
  st2.weight_decay = 0.0;
  st2.beta = 0.0;
  Matrix q0 = Matrix::Constant(2, 2, 1.5);
  Tensor q = Tensor::leaf(q0, true);
  Matrix g = Matrix::Zero(2, 2);
  g(0, 0) = 5.0;
  g(1, 1) = 1.0;
  muon_step("w", q, g, st2);
  CHECK((q.value() - (q0 - 0.05 * Matrix::Identity(2, 2))).cwiseAbs().maxCoeff() <
        1e-6);

  // two steps with identical grads and beta=0 move twice as far as one
  std::mt19937_64 rng(17);
  Matrix r0 = randn(4, 4, rng);
  Matrix gr = randn(4, 4, rng);
  MuonState st3;
  st3.lr = 0.01;
  st3.weight_decay = 0.0;
  st3.beta = 0.0;
  Tensor one = Tensor::leaf(r0, true);
  muon_step("w", one, gr, st3);
  Matrix after_one = one.value();
  MuonState st4 = st3;
  st4.momentum.clear();
  Tensor two = Tensor::leaf(r0, true);
  muon_step("w", two, gr, st4);
  muon_step("w", two, gr, st4);
  CHECK(((two.value() - r0) - 2.0 * (after_one - r0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rectangular update scaling") {
  // tall 6x2 parameter: update scale sqrt(6/2)
  MuonState st;
  st.lr = 1.0;
  st.weight_decay = 0.0;
  st.beta = 0.0;
  std::mt19937_64 rng(19);
  Matrix g = conditioned(6, 2, 4.0, rng);
  Tensor p = Tensor::leaf(Matrix::Zero(6, 2), true);
  muon_step("w", p, g, st);
  Matrix o = svd_polar(g);
  CHECK((p.value() + std::sqrt(3.0) * o).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("decay-only muon step contracts the parameter norm") {
  MuonState st;
  st.lr = 0.1;
  st.weight_decay = 0.5;  // lr*wd = 0.05 < 1
  st.beta = 0.0;
  std::mt19937_64 rng(23);
  Tensor p = Tensor::leaf(randn(5, 5, rng), true);
  double prev = p.value().norm();
  for (int i = 0; i < 10; ++i) {
    muon_step("w", p, Matrix::Zero(5, 5), st);
    const double cur = p.value().norm();
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("muon rejects vector parameters") {
  MuonState st;
  Tensor v = Tensor::leaf(Matrix::Zero(5, 1), true);
  CHECK_THROWS_AS(muon_step("v", v, Matrix::Zero(5, 1), st),
                  std::invalid_argument);
}

TEST_CASE("global gradient clipping") {
  Matrix a = Matrix::Constant(2, 2, 0.2);  // norm 0.4
  Matrix b = Matrix::Constant(2, 2, 0.15);
  std::vector<Matrix*> grads = {&a, &b};
  const double norm = std::sqrt(a.squaredNorm() + b.squaredNorm());
  REQUIRE(norm < 1.0);
  Matrix a0 = a, b0 = b;
  CHECK(clip_global_grad_norm(grads, 1.0) == doctest::Approx(norm));
  CHECK((a - a0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((b - b0).cwiseAbs().maxCoeff() == 0.0);

  a = Matrix::Constant(2, 2, 1.0);  // norm 2
  b = Matrix::Zero(2, 2);
  CHECK(clip_global_grad_norm(grads, 1.0) == doctest::Approx(2.0));
  const double after = std::sqrt(a.squaredNorm() + b.squaredNorm());
  CHECK(after == doctest::Approx(1.0).epsilon(1e-12));

  a = Matrix::Zero(2, 2);
  b = Matrix::Zero(2, 2);
  CHECK(clip_global_grad_norm(grads, 1.0) == 0.0);
  CHECK(a.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("parameter partition is total, disjoint and follows the rules") {
  std::vector<std::pair<std::string, IndexList>> params = {
      {"embed.weight", {256, 128}},
      {"unembed.weight", {128, 256}},
      {"layer0.attn.w_q", {128, 192}},
      {"layer0.attn.gate_vecs", {12, 128}},
      {"layer0.norm1.gamma", {1, 128}},
      {"layer2.moe.router.embeddings", {16, 128}},
      {"layer2.moe.expert3.w_up", {128, 64}},
      {"layer2.moe.expert3.w_gate", {128, 64}},
      {"mtp1.w_combine", {256, 128}},
      {"layer0.attn.sink_logits", {1, 8}},
  };
  auto part = param_partition(params);
  auto in = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  CHECK(in(part.muon, "layer0.attn.w_q"));
  CHECK(in(part.muon, "layer2.moe.expert3.w_up"));
  CHECK(in(part.muon, "layer2.moe.expert3.w_gate"));
  CHECK(in(part.muon, "mtp1.w_combine"));
  CHECK(in(part.fallback, "embed.weight"));
  CHECK(in(part.fallback, "unembed.weight"));
  CHECK(in(part.fallback, "layer0.norm1.gamma"));
  CHECK(in(part.fallback, "layer0.attn.gate_vecs"));
  CHECK(in(part.fallback, "layer2.moe.router.embeddings"));
  CHECK(in(part.fallback, "layer0.attn.sink_logits"));
  CHECK(part.muon.size() + part.fallback.size() == params.size());
  for (const auto& n : part.muon) CHECK(!in(part.fallback, n));
}
