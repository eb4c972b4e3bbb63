#include "moelab/mtp.hpp"

#include <cmath>
#include <stdexcept>

namespace moelab {

std::vector<double> MTPConfig::resolved_weights() const {
  if (!offset_weights.empty()) return offset_weights;
  std::vector<double> w(n_heads);
  for (int h = 0; h < n_heads; ++h) w[h] = std::pow(0.5, h);
  return w;
}

void MTPConfig::validate() const {
  if (n_heads < 0 || n_heads > 3) {
    throw std::invalid_argument("MTPConfig: n_heads must lie in 0..3");
  }
  if (global_weight < 0.0) {
    throw std::invalid_argument("MTPConfig: global_weight must be >= 0");
  }
  const auto w = resolved_weights();
  if (static_cast<int>(w.size()) != n_heads) {
    throw std::invalid_argument("MTPConfig: offset_weights size != n_heads");
  }
  for (double x : w) {
    if (x <= 0.0) throw std::invalid_argument("MTPConfig: weights must be > 0");
  }
}

static Tensor copy_leaf(const Tensor& t) {
  if (!t.defined()) return Tensor();
  return Tensor::leaf(t.value(), t.requires_grad());
}

MTPHeadParams MTPHeadParams::deep_copy() const {
  MTPHeadParams c;
  c.w_combine = copy_leaf(w_combine);
  c.norm_gamma = copy_leaf(norm_gamma);
  c.attn_cfg = attn_cfg;
  c.attn.w_q = copy_leaf(attn.w_q);
  c.attn.w_k = copy_leaf(attn.w_k);
  c.attn.w_v = copy_leaf(attn.w_v);
  c.attn.w_o = copy_leaf(attn.w_o);
  c.attn.w_gate = copy_leaf(attn.w_gate);
  c.attn.sink_logits = copy_leaf(attn.sink_logits);
  c.attn.in_norm_gamma = copy_leaf(attn.in_norm_gamma);
  c.ffn.w_gate = copy_leaf(ffn.w_gate);
  c.ffn.w_up = copy_leaf(ffn.w_up);
  c.ffn.w_down = copy_leaf(ffn.w_down);
  return c;
}

Eigen::Index mtp_supervised_positions(Eigen::Index seq_len, int h) {
  return std::max<Eigen::Index>(0, seq_len - 1 - h);
}

Tensor mtp_forward(const Tensor& backbone_hidden, const Tensor& embeddings,
                   const std::vector<int>& tokens, int h,
                   const MTPHeadParams& head, const Tensor& unembed) {
  if (h < 1) throw std::invalid_argument("mtp_forward: h must be >= 1");
  const auto T = backbone_hidden.rows();
  if (static_cast<Eigen::Index>(tokens.size()) != T) {
    throw std::invalid_argument("mtp_forward: token count != hidden rows");
  }
  const Eigen::Index n = mtp_supervised_positions(T, h);
  if (n == 0) return Tensor();

  // Row r pairs hidden state r with the embedding of token r + h.
  Tensor hidden = slice_rows(backbone_hidden, 0, n);
  std::vector<Eigen::Index> emb_idx(n);
  for (Eigen::Index r = 0; r < n; ++r) emb_idx[r] = tokens[r + h];
  Tensor tok_emb = select_rows(embeddings, emb_idx);

  Tensor combined = matmul(concat_cols({hidden, tok_emb}), head.w_combine);
  Tensor normed = rmsnorm_zero_centered(combined, head.norm_gamma, 1e-6);
  Tensor after_attn = attention_layer_forward(normed, head.attn_cfg, head.attn);
  Tensor out = after_attn + swiglu_forward(after_attn, head.ffn);
  return matmul(out, unembed);
}

Tensor mtp_loss(const std::vector<Tensor>& per_head_logits,
                const std::vector<int>& tokens, const MTPConfig& config,
                const std::vector<uint8_t>& loss_mask) {
  config.validate();
  if (static_cast<int>(per_head_logits.size()) != config.n_heads) {
    throw std::invalid_argument("mtp_loss: logits per head mismatch");
  }
  const auto w = config.resolved_weights();
  Tensor total = Tensor::scalar(0.0);
  for (int hi = 0; hi < config.n_heads; ++hi) {
    const int h = hi + 1;
    if (!per_head_logits[hi].defined()) continue;
    const Tensor& logits = per_head_logits[hi];
    std::vector<Eigen::Index> rows, targets;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const size_t tgt = static_cast<size_t>(r) + 1 + h;
      if (tgt >= tokens.size()) break;
      if (!loss_mask.empty() && !loss_mask[tgt]) continue;
      rows.push_back(r);
      targets.push_back(tokens[tgt]);
    }
    if (rows.empty()) continue;
    Tensor lp = log_softmax_rows(select_rows(logits, rows));
    Tensor ce = -1.0 * mean(gather_per_row(lp, targets));
    total = total + w[hi] * ce;
  }
  return config.global_weight * total;
}

std::vector<MTPHeadParams> clone_heads(const MTPHeadParams& head1, int n_heads) {
  if (n_heads < 2) throw std::invalid_argument("clone_heads: need H >= 2");
  std::vector<MTPHeadParams> heads;
  heads.push_back(head1);  // head 1 keeps its identity
  for (int h = 1; h < n_heads; ++h) heads.push_back(head1.deep_copy());
  return heads;
}

}  // namespace moelab
