#pragma once

#include "moelab/attention.hpp"
#include "moelab/moe.hpp"
#include "moelab/tensor.hpp"

#include <vector>

namespace moelab {

struct MTPConfig {
  int n_heads = 1;                     // H in 1..3
  std::vector<double> offset_weights;  // w_h > 0; empty = 0.5^(h-1)
  double global_weight = 0.3;          // mu

  std::vector<double> resolved_weights() const;
  void validate() const;
};

/// One prediction head: input combination projection, its own norm, a SWA
/// attention block and a dense FFN. The unembedding is shared with the
/// backbone and not part of the head.
struct MTPHeadParams {
  Tensor w_combine;  // (2*width) x width
  Tensor norm_gamma; // 1 x width
  AttentionLayerConfig attn_cfg;
  AttentionLayerParams attn;
  ExpertWeights ffn;

  MTPHeadParams deep_copy() const;
};

/// Logits for head h (1-based offset): row r scores token r + 1 + h given
/// backbone hidden state at r and the embedding of token r + h. Returns an
/// empty tensor when the sequence is too short to supervise any position.
Tensor mtp_forward(const Tensor& backbone_hidden, const Tensor& embeddings,
                   const std::vector<int>& tokens, int h,
                   const MTPHeadParams& head, const Tensor& unembed);

/// Number of supervised positions for head h on a length-T sequence:
/// max(0, T - 1 - h).
Eigen::Index mtp_supervised_positions(Eigen::Index seq_len, int h);

/// loss = mu * sum_h w_h * CE_h, CE_h the mean cross-entropy of head h over
/// its supervised positions. Heads with no supervised positions contribute 0.
/// loss_mask, when non-empty, excludes positions whose target is masked.
Tensor mtp_loss(const std::vector<Tensor>& per_head_logits,
                const std::vector<int>& tokens, const MTPConfig& config,
                const std::vector<uint8_t>& loss_mask = {});

/// Heads 2..H are parameter copies of head 1; afterwards they train
/// independently.
std::vector<MTPHeadParams> clone_heads(const MTPHeadParams& head1, int n_heads);

}  // namespace moelab
