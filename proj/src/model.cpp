#include "moelab/model.hpp"

#include "moelab/telemetry.hpp"

#include <cmath>
#include <stdexcept>

namespace moelab {

ModelConfig ModelConfig::toy_default() {
  ModelConfig c;
  c.vocab = 256;
  c.width = 128;
  c.n_layers = 9;
  c.pattern = LayoutPattern::S3F1;
  c.n_dense_first = 1;
  c.dense_hidden = 256;
  c.expert_hidden = 64;
  c.context = 512;

  c.full_attn.n_q_heads = 8;
  c.full_attn.n_kv_heads = 4;
  c.full_attn.head_dim = 16;
  c.full_attn.rope_dims = 8;
  c.full_attn.rope_theta = 1e4;
  c.full_attn.gated = true;
  c.full_attn.qk_norm = true;

  c.swa_attn = c.full_attn;
  c.swa_attn.n_q_heads = 12;  // augmented SWA query heads
  c.swa_attn.window = 16;
  c.swa_attn.rope_dims = 16;
  c.swa_attn.rope_theta = 1e4;

  c.moe.n_experts = 16;
  c.moe.top_k = 4;
  c.moe.n_groups = 4;
  c.moe.shared_scale = 1.0;
  c.moe.routed_scale = 1.0;
  c.moe.act_clip = 50.0;
  c.moe.ep_loss_coeff = 1e-3;

  c.mtp.n_heads = 1;
  c.mtp.global_weight = 0.3;
  return c;
}

void ModelConfig::validate() const {
  if (vocab < 2) throw std::invalid_argument("ModelConfig: vocab too small");
  if (n_dense_first > n_layers) {
    throw std::invalid_argument("ModelConfig: n_dense_first > n_layers");
  }
  full_attn.validate();
  swa_attn.validate();
  if (!swa_attn.window) {
    throw std::invalid_argument("ModelConfig: swa_attn needs a window");
  }
  moe.validate();
  mtp.validate();
  (void)build_layout(n_layers, pattern);  // throws on divisibility violation
}

SequenceExample SequenceExample::make(const std::vector<int>& meta,
                                      const std::vector<int>& payload,
                                      bool meta_mask_on) {
  SequenceExample ex;
  ex.meta_len = static_cast<Eigen::Index>(meta.size());
  ex.tokens = meta;
  ex.tokens.insert(ex.tokens.end(), payload.begin(), payload.end());
  ex.loss_mask.assign(ex.tokens.size(), 1);
  if (meta_mask_on) {
    for (size_t i = 0; i < meta.size(); ++i) ex.loss_mask[i] = 0;
  }
  return ex;
}

namespace {

Tensor init_weight(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  return Tensor::leaf(randn(r, c, rng, 1.0 / std::sqrt(double(r))), true);
}

ExpertWeights init_expert(int width, int hidden, std::mt19937_64& rng) {
  ExpertWeights w;
  w.w_gate = init_weight(width, hidden, rng);
  w.w_up = init_weight(width, hidden, rng);
  w.w_down = init_weight(hidden, width, rng);
  return w;
}

AttentionLayerParams init_attention(const AttentionSpec& spec, int width,
                                    bool sink, std::mt19937_64& rng) {
  AttentionLayerParams p;
  p.w_q = init_weight(width, spec.n_q_heads * spec.head_dim, rng);
  p.w_k = init_weight(width, spec.n_kv_heads * spec.head_dim, rng);
  p.w_v = init_weight(width, spec.n_kv_heads * spec.head_dim, rng);
  p.w_o = init_weight(spec.n_q_heads * spec.head_dim, width, rng);
  p.w_gate = Tensor::leaf(Matrix::Zero(spec.n_q_heads, width), true);
  if (sink) p.sink_logits = Tensor::leaf(Matrix::Zero(1, spec.n_q_heads), true);
  p.in_norm_gamma = Tensor::leaf(Matrix::Zero(1, width), true);
  return p;
}

struct BatchLoss {
  LossBreakdown loss;
  std::vector<Vector> dispatch_fe;  // per MoE layer, batch-averaged
  std::vector<ExpertHealthReport> health;  // from the last sequence
};

}  // namespace

Model::Model(ModelConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  layout_ = build_layout(cfg_.n_layers, cfg_.pattern);

  embed_ = Tensor::leaf(randn(cfg_.vocab, cfg_.width, rng, 0.02), true);
  unembed_ = init_weight(cfg_.width, cfg_.vocab, rng);
  final_norm_gamma_ = Tensor::leaf(Matrix::Zero(1, cfg_.width), true);

  for (int i = 0; i < cfg_.n_layers; ++i) {
    LayerParams lp;
    lp.kind = layout_[i];
    lp.is_moe = i >= cfg_.n_dense_first;
    lp.attn_cfg.spec = lp.kind == LayerKind::SWA ? cfg_.swa_attn : cfg_.full_attn;
    lp.attn_cfg.sink_alternative = cfg_.sink_alternative;
    if (cfg_.sink_alternative) lp.attn_cfg.spec.gated = false;
    lp.attn = init_attention(lp.attn_cfg.spec, cfg_.width,
                             cfg_.sink_alternative, rng);
    lp.norm1_gamma = lp.attn.in_norm_gamma;
    lp.norm2_gamma = Tensor::leaf(Matrix::Zero(1, cfg_.width), true);
    if (lp.is_moe) {
      lp.router.expert_embeddings =
          Tensor::leaf(randn(cfg_.moe.n_experts, cfg_.width, rng,
                             1.0 / std::sqrt(double(cfg_.width))),
                       true);
      lp.router.bias = Vector::Zero(cfg_.moe.n_experts);
      for (int e = 0; e < cfg_.moe.n_experts; ++e) {
        lp.experts.push_back(init_expert(cfg_.width, cfg_.expert_hidden, rng));
      }
      lp.shared_expert = init_expert(cfg_.width, cfg_.expert_hidden, rng);
    } else {
      lp.dense_ffn = init_expert(cfg_.width, cfg_.dense_hidden, rng);
    }
    layers_.push_back(std::move(lp));
  }

  for (int h = 0; h < cfg_.mtp.n_heads; ++h) {
    MTPHeadParams head;
    head.w_combine = init_weight(2 * cfg_.width, cfg_.width, rng);
    head.norm_gamma = Tensor::leaf(Matrix::Zero(1, cfg_.width), true);
    head.attn_cfg.spec = cfg_.swa_attn;
    head.attn = init_attention(head.attn_cfg.spec, cfg_.width, false, rng);
    head.attn.in_norm_gamma = Tensor();  // the head norm sits before the block
    head.ffn = init_expert(cfg_.width, cfg_.dense_hidden, rng);
    mtp_heads_.push_back(std::move(head));
  }

  rebuild_param_registry();
}

void Model::rebuild_param_registry() {
  params_.clear();
  auto add = [&](const std::string& name, const Tensor& t) {
    if (t.defined()) params_.emplace_back(name, t);
  };
  add("embed.weight", embed_);
  add("unembed.weight", unembed_);
  add("final_norm.gamma", final_norm_gamma_);
  for (size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto& l = layers_[i];
    add(p + "norm1.gamma", l.norm1_gamma);
    add(p + "norm2.gamma", l.norm2_gamma);
    add(p + "attn.w_q", l.attn.w_q);
    add(p + "attn.w_k", l.attn.w_k);
    add(p + "attn.w_v", l.attn.w_v);
    add(p + "attn.w_o", l.attn.w_o);
    add(p + "attn.gate_vecs", l.attn.w_gate);
    add(p + "attn.sink_logits", l.attn.sink_logits);
    if (l.is_moe) {
      add(p + "moe.router.embeddings", l.router.expert_embeddings);
      for (size_t e = 0; e < l.experts.size(); ++e) {
        const std::string ep = p + "moe.expert" + std::to_string(e) + ".";
        add(ep + "w_gate", l.experts[e].w_gate);
        add(ep + "w_up", l.experts[e].w_up);
        add(ep + "w_down", l.experts[e].w_down);
      }
      add(p + "moe.shared.w_gate", l.shared_expert.w_gate);
      add(p + "moe.shared.w_up", l.shared_expert.w_up);
      add(p + "moe.shared.w_down", l.shared_expert.w_down);
    } else {
      add(p + "ffn.w_gate", l.dense_ffn.w_gate);
      add(p + "ffn.w_up", l.dense_ffn.w_up);
      add(p + "ffn.w_down", l.dense_ffn.w_down);
    }
  }
  for (size_t h = 0; h < mtp_heads_.size(); ++h) {
    const std::string p = "mtp" + std::to_string(h + 1) + ".";
    auto& m = mtp_heads_[h];
    add(p + "w_combine", m.w_combine);
    add(p + "norm.gamma", m.norm_gamma);
    add(p + "attn.w_q", m.attn.w_q);
    add(p + "attn.w_k", m.attn.w_k);
    add(p + "attn.w_v", m.attn.w_v);
    add(p + "attn.w_o", m.attn.w_o);
    add(p + "attn.gate_vecs", m.attn.w_gate);
    add(p + "ffn.w_gate", m.ffn.w_gate);
    add(p + "ffn.w_up", m.ffn.w_up);
    add(p + "ffn.w_down", m.ffn.w_down);
  }
}

Tensor Model::param(const std::string& name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw std::invalid_argument("Model::param: unknown parameter " + name);
}

void Model::zero_grads() {
  for (auto& [n, t] : params_) t.zero_grad();
}

ForwardResult Model::forward(const std::vector<int>& tokens, bool want_traces) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty sequence");
  std::vector<Eigen::Index> ids(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg_.vocab) {
      throw std::invalid_argument("forward: token id " +
                                  std::to_string(tokens[i]) +
                                  " outside vocabulary of size " +
                                  std::to_string(cfg_.vocab));
    }
    ids[i] = tokens[i];
  }

  ForwardResult res;
  Tensor x = select_rows(embed_, ids);
  for (auto& l : layers_) {
    AttentionTrace trace;
    x = attention_layer_forward(x, l.attn_cfg, l.attn,
                                want_traces ? &trace : nullptr);
    if (want_traces) res.traces.push_back(std::move(trace));

    Tensor xn = rmsnorm_zero_centered(x, l.norm2_gamma, 1e-6);
    if (l.is_moe) {
      auto moe = moe_layer_forward(xn, cfg_.moe, l.router, l.experts,
                                   l.shared_expert);
      x = x + moe.output;
      res.ep_loss_sum = res.ep_loss_sum.defined()
                            ? res.ep_loss_sum + moe.ep_loss
                            : moe.ep_loss;
      res.selected.push_back({});
      auto& sel = res.selected.back();
      sel.resize(moe.stats.selection.rows());
      for (Eigen::Index t = 0; t < moe.stats.selection.rows(); ++t) {
        for (Eigen::Index e = 0; e < moe.stats.selection.cols(); ++e) {
          if (moe.stats.selection(t, e)) sel[t].push_back(static_cast<int>(e));
        }
      }
      res.routing.push_back(std::move(moe.stats));
      res.health.push_back(std::move(moe.health));
    } else {
      x = x + swiglu_forward(xn, l.dense_ffn);
    }
  }

  res.final_hidden = x;
  Tensor final_normed = rmsnorm_zero_centered(x, final_norm_gamma_, 1e-6);
  res.lm_logits = matmul(final_normed, unembed_);

  for (int h = 0; h < cfg_.mtp.n_heads; ++h) {
    res.mtp_logits.push_back(mtp_forward(res.final_hidden, embed_, tokens,
                                         h + 1, mtp_heads_[h], unembed_));
  }
  return res;
}

namespace {

BatchLoss batch_loss(Model& model, const std::vector<SequenceExample>& batch) {
  if (batch.empty()) throw std::invalid_argument("pretrain_loss: empty batch");
  BatchLoss out;
  Tensor ce_acc, mtp_acc, ep_acc;
  Eigen::Index n_seq = 0;

  for (const auto& ex : batch) {
    auto fwd = model.forward(ex.tokens);
    std::vector<Eigen::Index> rows, targets;
    for (size_t t = 1; t < ex.tokens.size(); ++t) {
      if (!ex.loss_mask[t]) continue;
      rows.push_back(static_cast<Eigen::Index>(t - 1));
      targets.push_back(ex.tokens[t]);
    }
    out.loss.supervised_positions += static_cast<Eigen::Index>(rows.size());
    if (!rows.empty()) {
      Tensor lp = log_softmax_rows(select_rows(fwd.lm_logits, rows));
      Tensor ce = -1.0 * mean(gather_per_row(lp, targets));
      ce_acc = ce_acc.defined() ? ce_acc + ce : ce;
    }
    if (model.config().mtp.n_heads > 0) {
      Tensor ml =
          mtp_loss(fwd.mtp_logits, ex.tokens, model.config().mtp, ex.loss_mask);
      mtp_acc = mtp_acc.defined() ? mtp_acc + ml : ml;
    }
    if (fwd.ep_loss_sum.defined()) {
      ep_acc = ep_acc.defined() ? ep_acc + fwd.ep_loss_sum : fwd.ep_loss_sum;
    }
    if (out.dispatch_fe.empty()) out.dispatch_fe.resize(fwd.routing.size());
    for (size_t li = 0; li < fwd.routing.size(); ++li) {
      if (out.dispatch_fe[li].size() == 0) {
        out.dispatch_fe[li] = Vector::Zero(fwd.routing[li].f_e.size());
      }
      out.dispatch_fe[li] += fwd.routing[li].f_e;
    }
    out.health = std::move(fwd.health);
    ++n_seq;
  }

  const double inv = 1.0 / static_cast<double>(n_seq);
  Tensor total = Tensor::scalar(0.0);
  if (ce_acc.defined()) {
    ce_acc = inv * ce_acc;
    out.loss.ce = ce_acc.item();
    total = total + ce_acc;
  }
  if (mtp_acc.defined()) {
    mtp_acc = inv * mtp_acc;
    out.loss.mtp = mtp_acc.item();
    total = total + mtp_acc;
  }
  if (ep_acc.defined()) {
    ep_acc = inv * ep_acc;
    out.loss.ep = ep_acc.item();
    total = total + model.config().moe.ep_loss_coeff * ep_acc;
  }
  for (auto& fe : out.dispatch_fe) fe *= inv;
  out.loss.total = total;
  return out;
}

}  // namespace

LossBreakdown Model::pretrain_loss(const std::vector<SequenceExample>& batch) {
  return batch_loss(*this, batch).loss;
}

StepResult train_step(Model& model, const std::vector<SequenceExample>& batch,
                      const TrainConfig& tc, TrainState& state) {
  StepResult sr;
  model.zero_grads();

  BatchLoss bl = batch_loss(model, batch);
  sr.loss = bl.loss.total.item();
  sr.ce = bl.loss.ce;
  sr.mtp = bl.loss.mtp;
  sr.ep = bl.loss.ep;
  sr.health = std::move(bl.health);
  if (!std::isfinite(sr.loss)) {
    sr.ok = false;
    sr.abort_reason = "non-finite loss";
    return sr;  // parameters and optimizer state preserved
  }

  bl.loss.total.backward();

  const bool frozen = model.config().router_frozen;
  std::vector<std::pair<std::string, IndexList>> part_input;
  for (auto& [name, t] : model.params()) part_input.emplace_back(name, t.shape());
  auto partition = param_partition(part_input);

  std::vector<std::pair<std::string, Tensor>> entries;
  std::vector<Matrix> grads;
  for (auto& [name, t] : model.params()) {
    if (frozen && name.find("router") != std::string::npos) continue;
    entries.emplace_back(name, t);
    grads.push_back(t.grad());
  }
  std::vector<Matrix*> grad_ptrs;
  grad_ptrs.reserve(grads.size());
  for (auto& g : grads) grad_ptrs.push_back(&g);
  sr.grad_norm = clip_global_grad_norm(grad_ptrs, tc.grad_clip_norm);

  state.muon.lr = tc.lr;
  state.muon.beta = tc.muon_beta;
  state.muon.weight_decay = tc.weight_decay;
  state.muon.iteration_steps = tc.polar_steps;
  state.muon.precision = tc.polar_precision;
  state.adam.lr = tc.lr;
  state.adam.weight_decay = tc.weight_decay;
  state.adam.step += 1;

  auto in_muon = [&](const std::string& n) {
    return std::find(partition.muon.begin(), partition.muon.end(), n) !=
           partition.muon.end();
  };
  for (size_t i = 0; i < entries.size(); ++i) {
    auto& [name, t] = entries[i];
    if (in_muon(name)) {
      sr.polar.push_back(muon_step(name, t, grads[i], state.muon));
    } else {
      adam_step(name, t, grads[i], state.adam);
    }
  }

  // Loss-free balancing: one bias update per batch from observed dispatch.
  if (!frozen && !bl.dispatch_fe.empty()) {
    size_t li = 0;
    for (auto& layer : model.layers()) {
      if (!layer.is_moe) continue;
      layer.router.update_rate = tc.bias_update_rate;
      update_bias(bl.dispatch_fe[li], layer.router);
      ++li;
    }
  }

  if (state.emitter) {
    auto& em = *state.emitter;
    em.emit("loss/total", sr.loss, MetricAgg::LAST);
    em.emit("loss/ce", sr.ce, MetricAgg::LAST);
    em.emit("loss/mtp", sr.mtp, MetricAgg::LAST);
    em.emit("loss/ep", sr.ep, MetricAgg::LAST);
    em.emit("grad/global_norm", sr.grad_norm, MetricAgg::LAST);
    for (size_t li = 0; li < sr.health.size(); ++li) {
      const auto& h = sr.health[li];
      const std::string p = "moe/layer" + std::to_string(li) + "/";
      em.emit(p + "max_to_median", h.max_to_median, MetricAgg::LAST);
      em.emit(p + "min_to_median", h.min_to_median, MetricAgg::LAST);
      em.emit(p + "dead_experts", double(h.dead_flags.size()), MetricAgg::LAST);
    }
    double worst_residual = 0.0, worst_extreme = 0.0;
    for (const auto& d : sr.polar) {
      worst_residual = std::max(worst_residual, d.ortho_residual);
      for (double e : d.step_max_abs) worst_extreme = std::max(worst_extreme, e);
    }
    em.emit("polar/max_residual", worst_residual, MetricAgg::LAST);
    em.emit("polar/max_intermediate", worst_extreme, MetricAgg::LAST);
    em.eoi(state.step);
  }

  state.step += 1;
  return sr;
}

}  // namespace moelab
