#pragma once

#include "moelab/attention.hpp"
#include "moelab/moe.hpp"
#include "moelab/mtp.hpp"
#include "moelab/muon.hpp"
#include "moelab/tensor.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace moelab {

class MetricEmitter;  // telemetry.hpp

struct ModelConfig {
  int vocab = 256;
  int width = 128;
  int n_layers = 9;
  LayoutPattern pattern = LayoutPattern::S3F1;
  int n_dense_first = 1;
  int dense_hidden = 256;
  int expert_hidden = 64;
  int context = 512;

  AttentionSpec full_attn;  // window unset
  AttentionSpec swa_attn;   // window set
  bool sink_alternative = false;

  MoEConfig moe;
  MTPConfig mtp;
  bool router_frozen = false;

  static ModelConfig toy_default();
  void validate() const;
};

/// Meta prefix plus payload with a per-position loss mask; the mask is
/// all-true over payload and all-false over meta when meta masking is on.
struct SequenceExample {
  std::vector<int> tokens;
  std::vector<uint8_t> loss_mask;  // per position
  Eigen::Index meta_len = 0;

  static SequenceExample make(const std::vector<int>& meta,
                              const std::vector<int>& payload,
                              bool meta_mask_on);
};

struct LayerParams {
  LayerKind kind;
  bool is_moe = false;
  Tensor norm1_gamma, norm2_gamma;
  AttentionLayerConfig attn_cfg;
  AttentionLayerParams attn;
  ExpertWeights dense_ffn;  // when !is_moe
  RouterParams router;      // when is_moe
  std::vector<ExpertWeights> experts;
  ExpertWeights shared_expert;
};

struct ForwardResult {
  Tensor lm_logits;                 // T x V
  std::vector<Tensor> mtp_logits;   // per head (may be undefined)
  Tensor ep_loss_sum;               // sum of per-MoE-layer L_EP (undefined if none)
  Tensor final_hidden;              // pre final-norm residual stream
  std::vector<RoutingBatchStats> routing;     // per MoE layer
  std::vector<ExpertHealthReport> health;     // per MoE layer
  std::vector<AttentionTrace> traces;         // per layer, when requested
  std::vector<std::vector<std::vector<int>>> selected;  // per MoE layer
};

struct LossBreakdown {
  Tensor total;
  double ce = 0.0;
  double mtp = 0.0;
  double ep = 0.0;  // sum of L_EP over layers (unscaled)
  Eigen::Index supervised_positions = 0;
};

class Model {
 public:
  Model(ModelConfig cfg, std::mt19937_64& rng);

  const ModelConfig& config() const { return cfg_; }
  ForwardResult forward(const std::vector<int>& tokens,
                        bool want_traces = false);
  LossBreakdown pretrain_loss(const std::vector<SequenceExample>& batch);

  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  Tensor param(const std::string& name) const;
  void zero_grads();

  std::vector<LayerParams>& layers() { return layers_; }
  Tensor embedding() const { return embed_; }
  Tensor unembedding() const { return unembed_; }
  std::vector<MTPHeadParams>& mtp_heads() { return mtp_heads_; }
  const std::vector<LayerKind>& layout() const { return layout_; }

  /// Re-register parameter list (after head cloning or checkpoint load).
  void rebuild_param_registry();

 private:
  ModelConfig cfg_;
  std::vector<LayerKind> layout_;
  Tensor embed_, unembed_, final_norm_gamma_;
  std::vector<LayerParams> layers_;
  std::vector<MTPHeadParams> mtp_heads_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

struct TrainConfig {
  double lr = 0.02;
  double weight_decay = 0.1;
  double muon_beta = 0.95;
  int polar_steps = 6;
  PrecisionMode polar_precision = PrecisionMode::EXACT64;
  double grad_clip_norm = 1.0;
  double bias_update_rate = 1e-3;
};

struct TrainState {
  long step = 0;
  std::uint64_t seed = 0;
  MuonState muon;
  AdamState adam;
  MetricEmitter* emitter = nullptr;  // optional
};

struct StepResult {
  bool ok = true;
  double loss = 0.0;
  double ce = 0.0;
  double mtp = 0.0;
  double ep = 0.0;
  double grad_norm = 0.0;
  std::string abort_reason;
  std::vector<ExpertHealthReport> health;
  std::vector<PolarDiagnostics> polar;
};

StepResult train_step(Model& model, const std::vector<SequenceExample>& batch,
                      const TrainConfig& tc, TrainState& state);

}  // namespace moelab
