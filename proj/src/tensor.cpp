#include "moelab/tensor.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace moelab {

using detail::BackwardCtx;
using detail::TensorNode;

Tensor Tensor::leaf(Matrix value, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->value = std::move(value);
  n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return leaf(std::move(m));
}

const Matrix& Tensor::grad() const {
  if (node_->grad.size() == 0) {
    node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols());
  }
  return node_->grad;
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) {
    throw std::invalid_argument("item(): tensor is not scalar");
  }
  return node_->value(0, 0);
}

void Tensor::zero_grad() {
  node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols());
}

void Tensor::set_value(Matrix v) {
  node_->value = std::move(v);
  if (node_->grad.rows() != node_->value.rows() ||
      node_->grad.cols() != node_->value.cols()) {
    node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols());
  }
}

void Tensor::add_to_value(const Matrix& dv) { node_->value += dv; }

void Tensor::backward() const {
  if (rows() != 1 || cols() != 1) {
    throw std::invalid_argument("backward(): root must be scalar");
  }
  BackwardCtx ctx(node_);
  ctx.run();
}

Tensor make_op(Matrix value, std::vector<Tensor> parents,
               std::function<void(BackwardCtx&, const Matrix&)> fn) {
  auto n = std::make_shared<TensorNode>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) n->backward_fn = std::move(fn);
  return Tensor(std::move(n));
}

Matrix randn(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
             double scale) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng) * scale;
  return m;
}

namespace detail {

BackwardCtx::BackwardCtx(const std::shared_ptr<TensorNode>& root) {
  // Iterative post-order DFS over requires-grad subgraph.
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<std::shared_ptr<TensorNode>, size_t>> stack;
  if (!root->requires_grad) return;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto child = node->parents[next++];
      if (child->requires_grad && !seen.count(child.get())) {
        seen.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      topo_.push_back(node);
      stack.pop_back();
    }
  }
}

Matrix& BackwardCtx::grad_of(const std::shared_ptr<TensorNode>& n) {
  auto it = local_.find(n.get());
  if (it == local_.end()) {
    it = local_.emplace(n.get(), Matrix::Zero(n->value.rows(), n->value.cols()))
             .first;
  }
  return it->second;
}

void BackwardCtx::run() {
  if (topo_.empty()) return;
  auto& root = topo_.back();
  grad_of(root).setConstant(1.0);
  for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
    auto& node = *it;
    auto fit = local_.find(node.get());
    if (fit == local_.end()) continue;  // unreachable contribution
    if (node->backward_fn) node->backward_fn(*this, fit->second);
  }
  // Deposit pass-local gradients so repeated passes accumulate.
  for (auto& node : topo_) {
    auto fit = local_.find(node.get());
    if (fit == local_.end()) continue;
    if (node->grad.size() == 0) {
      node->grad = Matrix::Zero(node->value.rows(), node->value.cols());
    }
    node->grad += fit->second;
  }
}

}  // namespace detail

// --------------------------------------------------------------------------
// arithmetic

static void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  return make_op(a.value() + b.value(), {a, b},
                 [an, bn](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) ctx.grad_of(an) += g;
                   if (ctx.wants(bn)) ctx.grad_of(bn) += g;
                 });
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  return make_op(a.value() - b.value(), {a, b},
                 [an, bn](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) ctx.grad_of(an) += g;
                   if (ctx.wants(bn)) ctx.grad_of(bn) -= g;
                 });
}

Tensor operator-(const Tensor& a) { return -1.0 * a; }

Tensor operator*(double c, const Tensor& a) {
  auto an = a.node();
  return make_op(c * a.value(), {a}, [an, c](BackwardCtx& ctx, const Matrix& g) {
    if (ctx.wants(an)) ctx.grad_of(an) += c * g;
  });
}

Tensor operator*(const Tensor& a, double c) { return c * a; }

Tensor add_scalar(const Tensor& a, double c) {
  auto an = a.node();
  return make_op(a.value().array() + c, {a},
                 [an](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) ctx.grad_of(an) += g;
                 });
}

Tensor cwise_mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "cwise_mul");
  auto an = a.node(), bn = b.node();
  return make_op(a.value().cwiseProduct(b.value()), {a, b},
                 [an, bn](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) ctx.grad_of(an) += g.cwiseProduct(bn->value);
                   if (ctx.wants(bn)) ctx.grad_of(bn) += g.cwiseProduct(an->value);
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree (" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  auto an = a.node(), bn = b.node();
  return make_op(a.value() * b.value(), {a, b},
                 [an, bn](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) ctx.grad_of(an) += g * bn->value.transpose();
                   if (ctx.wants(bn)) ctx.grad_of(bn) += an->value.transpose() * g;
                 });
}

Tensor transpose(const Tensor& a) {
  auto an = a.node();
  return make_op(a.value().transpose(), {a},
                 [an](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) ctx.grad_of(an) += g.transpose();
                 });
}

// --------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  auto an = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op(std::move(out), {a}, [an](BackwardCtx& ctx, const Matrix& g) {
    if (ctx.wants(an)) ctx.grad_of(an).array() += g(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  return inv * sum(a);
}

Tensor col_mean(const Tensor& a) {
  auto an = a.node();
  const double inv = 1.0 / static_cast<double>(a.rows());
  Matrix out = a.value().colwise().mean();
  return make_op(std::move(out), {a},
                 [an, inv](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   ctx.grad_of(an).rowwise() += inv * g.row(0);
                 });
}

Tensor row_sum(const Tensor& a) {
  auto an = a.node();
  Matrix out = a.value().rowwise().sum();
  return make_op(std::move(out), {a}, [an](BackwardCtx& ctx, const Matrix& g) {
    if (!ctx.wants(an)) return;
    ctx.grad_of(an).colwise() += g.col(0);
  });
}

// --------------------------------------------------------------------------
// elementwise

Tensor sigmoid(const Tensor& a) {
  auto an = a.node();
  Matrix y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Matrix ycopy = y;
  return make_op(std::move(y), {a},
                 [an, ycopy](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   ctx.grad_of(an).array() +=
                       g.array() * ycopy.array() * (1.0 - ycopy.array());
                 });
}

Tensor silu(const Tensor& a) {
  auto an = a.node();
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-a.value().array()).exp());
  Matrix y = (a.value().array() * s).matrix();
  return make_op(std::move(y), {a}, [an, s](BackwardCtx& ctx, const Matrix& g) {
    if (!ctx.wants(an)) return;
    ctx.grad_of(an).array() +=
        g.array() * (s + an->value.array() * s * (1.0 - s));
  });
}

Tensor exp_of(const Tensor& a) {
  auto an = a.node();
  Matrix y = a.value().array().exp().matrix();
  Matrix ycopy = y;
  return make_op(std::move(y), {a},
                 [an, ycopy](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   ctx.grad_of(an).array() += g.array() * ycopy.array();
                 });
}

Tensor log_of(const Tensor& a) {
  auto an = a.node();
  Matrix y = a.value().array().log().matrix();
  return make_op(std::move(y), {a}, [an](BackwardCtx& ctx, const Matrix& g) {
    if (!ctx.wants(an)) return;
    ctx.grad_of(an).array() += g.array() / an->value.array();
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  auto an = a.node();
  Matrix y = a.value().array().max(lo).min(hi).matrix();
  return make_op(std::move(y), {a},
                 [an, lo, hi](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   auto pass = (an->value.array() >= lo && an->value.array() <= hi)
                                   .cast<double>();
                   ctx.grad_of(an).array() += g.array() * pass;
                 });
}

Tensor square(const Tensor& a) { return cwise_mul(a, a); }

Tensor reciprocal(const Tensor& a) {
  auto an = a.node();
  Matrix y = a.value().array().inverse().matrix();
  Matrix ycopy = y;
  return make_op(std::move(y), {a},
                 [an, ycopy](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   ctx.grad_of(an).array() -=
                       g.array() * ycopy.array() * ycopy.array();
                 });
}

// --------------------------------------------------------------------------
// softmax family

Tensor softmax_rows(const Tensor& a, const Eigen::ArrayXXi& allowed) {
  const bool masked = allowed.size() > 0;
  if (masked && (allowed.rows() != a.rows() || allowed.cols() != a.cols())) {
    throw std::invalid_argument("softmax_rows: mask shape mismatch");
  }
  const auto R = a.rows(), C = a.cols();
  Matrix y(R, C);
  for (Eigen::Index i = 0; i < R; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < C; ++j) {
      if (!masked || allowed(i, j)) m = std::max(m, a.value()(i, j));
    }
    if (!std::isfinite(m)) {  // fully masked row
      y.row(i).setZero();
      continue;
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < C; ++j) {
      if (!masked || allowed(i, j)) {
        y(i, j) = std::exp(a.value()(i, j) - m);
        z += y(i, j);
      } else {
        y(i, j) = 0.0;
      }
    }
    y.row(i) /= z;
  }
  auto an = a.node();
  Matrix ycopy = y;
  return make_op(std::move(y), {a},
                 [an, ycopy](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   Matrix gy = g.cwiseProduct(ycopy);
                   Vector rs = gy.rowwise().sum();
                   ctx.grad_of(an) += gy - ycopy.cwiseProduct(rs.replicate(1, g.cols()));
                 });
}

Tensor log_softmax_rows(const Tensor& a) {
  const auto R = a.rows(), C = a.cols();
  Matrix y(R, C);
  for (Eigen::Index i = 0; i < R; ++i) {
    const double m = a.value().row(i).maxCoeff();
    const double lse = m + std::log((a.value().row(i).array() - m).exp().sum());
    y.row(i) = a.value().row(i).array() - lse;
  }
  auto an = a.node();
  Matrix ycopy = y;
  return make_op(std::move(y), {a},
                 [an, ycopy](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   Vector rs = g.rowwise().sum();
                   Matrix sm = ycopy.array().exp().matrix();
                   ctx.grad_of(an) += g - sm.cwiseProduct(rs.replicate(1, g.cols()));
                 });
}

// --------------------------------------------------------------------------
// shape / indexing

Tensor slice_cols(const Tensor& a, Eigen::Index c0, Eigen::Index n) {
  auto an = a.node();
  Matrix y = a.value().middleCols(c0, n);
  return make_op(std::move(y), {a},
                 [an, c0, n](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) ctx.grad_of(an).middleCols(c0, n) += g;
                 });
}

Tensor slice_rows(const Tensor& a, Eigen::Index r0, Eigen::Index n) {
  auto an = a.node();
  Matrix y = a.value().middleRows(r0, n);
  return make_op(std::move(y), {a},
                 [an, r0, n](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) ctx.grad_of(an).middleRows(r0, n) += g;
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p.cols();
  Matrix y(parts[0].rows(), total);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    offsets.push_back(at);
    at += p.cols();
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op(std::move(y), parts,
                 [nodes, offsets](BackwardCtx& ctx, const Matrix& g) {
                   for (size_t k = 0; k < nodes.size(); ++k) {
                     if (!ctx.wants(nodes[k])) continue;
                     ctx.grad_of(nodes[k]) +=
                         g.middleCols(offsets[k], nodes[k]->value.cols());
                   }
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p.rows();
  Matrix y(total, parts[0].cols());
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    offsets.push_back(at);
    at += p.rows();
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op(std::move(y), parts,
                 [nodes, offsets](BackwardCtx& ctx, const Matrix& g) {
                   for (size_t k = 0; k < nodes.size(); ++k) {
                     if (!ctx.wants(nodes[k])) continue;
                     ctx.grad_of(nodes[k]) +=
                         g.middleRows(offsets[k], nodes[k]->value.rows());
                   }
                 });
}

Tensor select_rows(const Tensor& a, const std::vector<Eigen::Index>& idx) {
  auto an = a.node();
  Matrix y(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (size_t i = 0; i < idx.size(); ++i) y.row(i) = a.value().row(idx[i]);
  return make_op(std::move(y), {a},
                 [an, idx](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   auto& ga = ctx.grad_of(an);
                   for (size_t i = 0; i < idx.size(); ++i)
                     ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                 });
}

Tensor scatter_add_rows(const Tensor& a, const std::vector<Eigen::Index>& idx,
                        Eigen::Index rows) {
  if (static_cast<Eigen::Index>(idx.size()) != a.rows()) {
    throw std::invalid_argument("scatter_add_rows: index count != rows");
  }
  auto an = a.node();
  Matrix y = Matrix::Zero(rows, a.cols());
  for (size_t i = 0; i < idx.size(); ++i)
    y.row(idx[i]) += a.value().row(static_cast<Eigen::Index>(i));
  return make_op(std::move(y), {a},
                 [an, idx](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   auto& ga = ctx.grad_of(an);
                   for (size_t i = 0; i < idx.size(); ++i)
                     ga.row(static_cast<Eigen::Index>(i)) += g.row(idx[i]);
                 });
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) {
    throw std::invalid_argument("scale_rows: scale must be Rx1");
  }
  auto an = a.node(), sn = s.node();
  Matrix y = a.value().array().colwise() * s.value().col(0).array();
  return make_op(std::move(y), {a, s},
                 [an, sn](BackwardCtx& ctx, const Matrix& g) {
                   if (ctx.wants(an)) {
                     ctx.grad_of(an).array() +=
                         g.array().colwise() * sn->value.col(0).array();
                   }
                   if (ctx.wants(sn)) {
                     ctx.grad_of(sn).col(0) +=
                         g.cwiseProduct(an->value).rowwise().sum();
                   }
                 });
}

Tensor gather_per_row(const Tensor& a, const std::vector<Eigen::Index>& idx) {
  if (static_cast<Eigen::Index>(idx.size()) != a.rows()) {
    throw std::invalid_argument("gather_per_row: index count != rows");
  }
  auto an = a.node();
  Matrix y(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) y(i, 0) = a.value()(i, idx[i]);
  return make_op(std::move(y), {a},
                 [an, idx](BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(an)) return;
                   auto& ga = ctx.grad_of(an);
                   for (Eigen::Index i = 0; i < ga.rows(); ++i)
                     ga(i, idx[i]) += g(i, 0);
                 });
}

// --------------------------------------------------------------------------
// fused layers

Tensor rmsnorm_zero_centered(const Tensor& x, const Tensor& gamma, double eps) {
  const auto R = x.rows(), C = x.cols();
  const bool with_gain = gamma.defined();
  if (with_gain && (gamma.rows() != 1 || gamma.cols() != C)) {
    throw std::invalid_argument("rmsnorm: gamma must be 1 x feature-dim");
  }
  Vector inv_r(R);
  for (Eigen::Index i = 0; i < R; ++i) {
    const double ms = x.value().row(i).squaredNorm() / static_cast<double>(C);
    inv_r(i) = 1.0 / std::sqrt(ms + eps);
  }
  Matrix y = x.value().array().colwise() * inv_r.array();
  Eigen::RowVectorXd gain =
      with_gain ? (gamma.value().row(0).array() + 1.0).matrix().eval()
                : Eigen::RowVectorXd::Ones(C);
  y = y.array().rowwise() * gain.array();

  auto xn = x.node();
  auto gn = with_gain ? gamma.node() : nullptr;
  std::vector<Tensor> parents = {x};
  if (with_gain) parents.push_back(gamma);
  return make_op(
      std::move(y), parents,
      [xn, gn, inv_r, gain, C](BackwardCtx& ctx, const Matrix& g) {
        // y_ij = x_ij * gain_j * inv_r_i,  inv_r_i = (mean_j x_ij^2 + eps)^-1/2
        const Matrix& xv = xn->value;
        if (ctx.wants(xn)) {
          Matrix gg = g.array().rowwise() * gain.array();
          Vector dot = gg.cwiseProduct(xv).rowwise().sum();
          Matrix dx = gg.array().colwise() * inv_r.array();
          Matrix corr = xv.array().colwise() *
                        (dot.array() * inv_r.array().cube() /
                         static_cast<double>(C));
          ctx.grad_of(xn) += dx - corr;
        }
        if (gn && ctx.wants(gn)) {
          Matrix xr = xv.array().colwise() * inv_r.array();
          ctx.grad_of(gn).row(0) += g.cwiseProduct(xr).colwise().sum();
        }
      });
}

}  // namespace moelab
