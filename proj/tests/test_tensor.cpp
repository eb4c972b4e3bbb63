#include "doctest.h"

#include "moelab/numerics.hpp"
#include "moelab/tensor.hpp"

#include <random>

using namespace moelab;

TEST_CASE("scalar chain rule and additive grad accumulation") {
  Tensor x = Tensor::leaf(Matrix::Constant(1, 1, 3.0), true);
  Tensor y = cwise_mul(x, x);  // x^2
  y.backward();
  CHECK(y.item() == doctest::Approx(9.0));
  CHECK(x.grad()(0, 0) == doctest::Approx(6.0));
  y.backward();  // second pass doubles the accumulator
  CHECK(x.grad()(0, 0) == doctest::Approx(12.0));
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Tensor a = Tensor::leaf(randn(3, 4, rng), true);
  Tensor b = Tensor::leaf(randn(4, 2, rng), true);
  auto f = [](const std::vector<Tensor>& in) {
    return sum(cwise_mul(matmul(in[0], in[1]), matmul(in[0], in[1])));
  };
  auto report = grad_check(f, {a, b}, 1e-5, 1e-7);
  CHECK(report.passed);
}

TEST_CASE("softmax rows sum to one and masked entries vanish") {
  std::mt19937_64 rng(11);
  Tensor s = Tensor::leaf(randn(5, 5, rng), true);
  Eigen::ArrayXXi mask = Eigen::ArrayXXi::Ones(5, 5);
  mask(2, 3) = mask(2, 4) = 0;
  Tensor a = softmax_rows(s, mask);
  for (int i = 0; i < 5; ++i) {
    CHECK(a.value().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(a.value()(2, 3) == 0.0);
  CHECK(a.value()(2, 4) == 0.0);
}

TEST_CASE("sum of softmax is constant so its gradient vanishes") {
  std::mt19937_64 rng(13);
  Tensor s = Tensor::leaf(randn(4, 6, rng), true);
  Tensor out = sum(softmax_rows(s));
  out.backward();
  CHECK(s.grad().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradients of composite elementwise ops") {
  std::mt19937_64 rng(17);
  Tensor x = Tensor::leaf(randn(4, 3, rng), true);
  auto f = [](const std::vector<Tensor>& in) {
    Tensor t = silu(in[0]) + sigmoid(in[0]);
    t = cwise_mul(t, clamp(in[0], -0.8, 0.8));
    return mean(cwise_mul(t, t));
  };
  auto report = grad_check(f, {x}, 1e-5, 1e-6);
  CHECK(report.passed);
}

TEST_CASE("gather and scatter invert each other in gradient flow") {
  std::mt19937_64 rng(23);
  Tensor x = Tensor::leaf(randn(6, 3, rng), true);
  std::vector<Eigen::Index> idx = {4, 1, 1, 5};
  auto f = [&](const std::vector<Tensor>& in) {
    Tensor rows = select_rows(in[0], idx);
    Tensor back = scatter_add_rows(rows, idx, 6);
    return sum(cwise_mul(back, back));
  };
  auto report = grad_check(f, {x}, 1e-5, 1e-7);
  CHECK(report.passed);
}

TEST_CASE("log softmax and per-row gather give cross entropy gradients") {
  std::mt19937_64 rng(29);
  Tensor logits = Tensor::leaf(randn(5, 7, rng), true);
  std::vector<Eigen::Index> targets = {0, 3, 6, 2, 2};
  auto f = [&](const std::vector<Tensor>& in) {
    return -1.0 * mean(gather_per_row(log_softmax_rows(in[0]), targets));
  };
  auto report = grad_check(f, {logits}, 1e-5, 1e-6);
  CHECK(report.passed);
}

TEST_CASE("scale_rows and reciprocal gradients") {
  std::mt19937_64 rng(31);
  Tensor x = Tensor::leaf(randn(4, 3, rng), true);
  Tensor s = Tensor::leaf(randn(4, 1, rng).array().abs().matrix() +
                              Matrix::Constant(4, 1, 0.5),
                          true);
  auto f = [](const std::vector<Tensor>& in) {
    return sum(square(scale_rows(in[0], reciprocal(in[1]))));
  };
  auto report = grad_check(f, {x, s}, 1e-5, 1e-6);
  CHECK(report.passed);
}
