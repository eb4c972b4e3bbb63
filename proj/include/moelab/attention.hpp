#pragma once

#include "moelab/tensor.hpp"

#include <optional>
#include <vector>

namespace moelab {

enum class LayerKind { FULL, SWA };
enum class LayoutPattern { S3F1, S1F1, FFFF };

struct AttentionSpec {
  int n_q_heads = 8;
  int n_kv_heads = 4;
  int head_dim = 16;
  std::optional<int> window;  // absent = full attention
  double rope_theta = 1e4;
  int rope_dims = 16;  // leading dimensions rotated, even
  bool gated = true;
  bool qk_norm = true;

  void validate() const;
};

struct GateParams {
  // One gate vector of model-width length per query head, stacked as rows.
  Matrix w_gate;  // n_q_heads x model_width
};

/// Per-head observer record of the attention internals: raw scores s,
/// normalizers Z, weights alpha, gate values g, head outputs y.
struct AttentionTrace {
  std::vector<Matrix> scores;        // per head, T x T (masked entries -inf)
  std::vector<Vector> normalizers;   // per head, T
  std::vector<Matrix> weights;       // per head, T x T (masked entries 0)
  std::vector<Vector> gates;         // per head, T (empty when ungated)
  std::vector<Matrix> head_outputs;  // per head, T x head_dim (pre-gate)
};

/// First layer FULL, then the pattern motif repeats: (S,S,S,F) for S3F1,
/// (S,F) for S1F1; FFFF is all FULL.
std::vector<LayerKind> build_layout(int n_layers, LayoutPattern pattern);

/// Entry (i,j) allowed iff i-W < j <= i.
Eigen::ArrayXXi swa_mask(Eigen::Index seq_len, Eigen::Index window);
Eigen::ArrayXXi causal_mask(Eigen::Index seq_len);

/// Rotates the first rope_dims coordinates of each row pairwise by angle
/// pos * theta^(-2m/rope_dims); trailing coordinates pass through.
Tensor apply_rope(const Tensor& vectors, const std::vector<Eigen::Index>& positions,
                  double theta, int rope_dims);

/// Grouped-query attention over per-head tensors (q has n_q heads, k/v have
/// n_kv heads; each group of n_q/n_kv query heads shares one KV head).
/// q/k/v entries are T x head_dim.
std::vector<Tensor> gqa_attention(const std::vector<Tensor>& q,
                                  const std::vector<Tensor>& k,
                                  const std::vector<Tensor>& v,
                                  const Eigen::ArrayXXi& mask,
                                  const AttentionSpec& spec,
                                  AttentionTrace* trace = nullptr);

/// g = sigmoid(<w_gate, x_i>) per position; output = g * y.
Tensor head_gate(const Tensor& y, const Tensor& x, const Tensor& w_gate_row,
                 Vector* gate_values = nullptr);

struct AttentionLayerParams {
  Tensor w_q;     // width x (n_q * d)
  Tensor w_k;     // width x (n_kv * d)
  Tensor w_v;     // width x (n_kv * d)
  Tensor w_o;     // (n_q * d) x width
  Tensor w_gate;  // n_q x width (only used when spec.gated)
  // Learnable per-head sink logits, the input-independent comparison arm;
  // used only when sink_alternative is set on the layer config.
  Tensor sink_logits;  // 1 x n_q
  // Optional pre-norm gamma (1 x width). When defined, Q/K/V act on the
  // normed input while the gate reads the raw residual stream.
  Tensor in_norm_gamma;
};

struct AttentionLayerConfig {
  AttentionSpec spec;
  bool sink_alternative = false;  // replace head gating by a learnable sink
};

/// Pre-computed per-head gated attention over a projected residual stream,
/// with the residual connection applied: returns x + proj(concat(heads)).
Tensor attention_layer_forward(const Tensor& x, const AttentionLayerConfig& cfg,
                               const AttentionLayerParams& params,
                               AttentionTrace* trace = nullptr);

}  // namespace moelab
