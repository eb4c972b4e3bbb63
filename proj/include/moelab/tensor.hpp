#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace moelab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IndexList = std::vector<Eigen::Index>;

class Tensor;

namespace detail {

class BackwardCtx;

struct TensorNode {
  Matrix value;
  Matrix grad;  // accumulated across backward() calls; same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Consumes this node's pass-local output gradient, deposits into parents.
  std::function<void(BackwardCtx&, const Matrix&)> backward_fn;
};

}  // namespace detail

/// Dense 2-D value (scalars are 1x1, vectors 1xN or Nx1) with define-by-run
/// reverse-mode differentiation. Handles share the underlying node, so a
/// Tensor is cheap to copy; leaf gradients accumulate additively across
/// backward() calls.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Matrix value, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Eigen::Index size() const { return node_->value.size(); }
  IndexList shape() const { return {rows(), cols()}; }

  double item() const;           // value of a 1x1 tensor
  void zero_grad();              // this node only
  void set_value(Matrix v);      // leaf update (optimizers)
  void add_to_value(const Matrix& dv);

  /// Reverse pass from a scalar root. Each call adds this graph's
  /// contribution into every reachable requires-grad node.
  void backward() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op(Matrix value, std::vector<Tensor> parents,
                        std::function<void(detail::BackwardCtx&, const Matrix&)> fn);
};

namespace detail {
class BackwardCtx {
 public:
  explicit BackwardCtx(const std::shared_ptr<TensorNode>& root);
  void run();
  /// Pass-local gradient accumulator for `n` (zero-initialized).
  Matrix& grad_of(const std::shared_ptr<TensorNode>& n);
  bool wants(const std::shared_ptr<TensorNode>& n) const {
    return n && n->requires_grad;
  }

 private:
  std::vector<std::shared_ptr<TensorNode>> topo_;
  std::unordered_map<TensorNode*, Matrix> local_;
};
}  // namespace detail

// ---- construction helpers ----
Tensor make_op(Matrix value, std::vector<Tensor> parents,
               std::function<void(detail::BackwardCtx&, const Matrix&)> fn);
Matrix randn(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
             double scale = 1.0);

// ---- arithmetic ----
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(double c, const Tensor& a);
Tensor operator*(const Tensor& a, double c);
Tensor cwise_mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);

// ---- reductions ----
Tensor sum(const Tensor& a);        // 1x1
Tensor mean(const Tensor& a);       // 1x1
Tensor col_mean(const Tensor& a);   // 1xC, mean over rows
Tensor row_sum(const Tensor& a);    // Rx1

// ---- elementwise ----
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor exp_of(const Tensor& a);
Tensor log_of(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor square(const Tensor& a);
Tensor reciprocal(const Tensor& a);

// ---- softmax family (row-wise) ----
/// Masked softmax over rows with max-subtraction. `allowed` (same shape,
/// may be empty for no mask) zeroes out disallowed entries; a fully masked
/// row yields an all-zero row.
Tensor softmax_rows(const Tensor& a, const Eigen::ArrayXXi& allowed = {});
Tensor log_softmax_rows(const Tensor& a);

// ---- shape / indexing ----
Tensor slice_cols(const Tensor& a, Eigen::Index c0, Eigen::Index n);
Tensor slice_rows(const Tensor& a, Eigen::Index r0, Eigen::Index n);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor select_rows(const Tensor& a, const std::vector<Eigen::Index>& idx);
/// rows x a.cols() zero matrix with a's rows added at positions idx
/// (duplicates accumulate).
Tensor scatter_add_rows(const Tensor& a, const std::vector<Eigen::Index>& idx,
                        Eigen::Index rows);
/// Per-row scaling: out.row(i) = a.row(i) * s(i); s is Rx1.
Tensor scale_rows(const Tensor& a, const Tensor& s);
/// Per-row column gather: out(i, 0) = a(i, idx[i]).
Tensor gather_per_row(const Tensor& a, const std::vector<Eigen::Index>& idx);

// ---- fused layers ----
/// y = x / sqrt(mean_row(x^2) + eps) .* (1 + gamma), gamma broadcast over
/// rows; pass an undefined gamma for unit gain.
Tensor rmsnorm_zero_centered(const Tensor& x, const Tensor& gamma, double eps);

}  // namespace moelab
