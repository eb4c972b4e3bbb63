#pragma once

#include "moelab/tensor.hpp"

#include <optional>
#include <vector>

namespace moelab {

/// Router state. The bias participates in expert selection only; combine
/// weights always come from the pre-bias probabilities.
struct RouterParams {
  Tensor expert_embeddings;  // E x width
  Vector bias;               // E, selection-only
  double update_rate = 1e-3;
};

struct MoEConfig {
  int n_experts = 16;
  int top_k = 4;
  int n_groups = 4;
  std::vector<int> group_map;  // expert -> group; empty = contiguous blocks
  double shared_scale = 1.0;
  double routed_scale = 1.0;
  std::optional<double> act_clip;  // tau_act
  double ep_loss_coeff = 1e-3;

  std::vector<int> resolved_group_map() const;
  void validate() const;
};

struct ExpertWeights {
  Tensor w_gate;  // width x hidden
  Tensor w_up;    // width x hidden
  Tensor w_down;  // hidden x width
};

struct RoutingBatchStats {
  Eigen::Index tokens = 0;
  Vector p_e;  // mean routing probability per expert
  Vector f_e;  // dispatch fraction per expert, sums to 1
  Vector p_g;  // per-group sums of p_e
  Vector f_g;  // per-group sums of f_e
  Eigen::ArrayXXi selection;  // T x E, 0/1
  int n_groups = 0;
  std::vector<int> group_of;  // expert -> group
  Tensor probs;               // T x E; the differentiable source of p_e
};

struct ExpertHealthReport {
  Vector mean_output_rms;      // per expert; NaN for zero-dispatch experts
  Vector dispatch_fraction;    // per expert
  Vector param_frobenius;      // per expert, sqrt(|Wg|^2+|Wu|^2+|Wd|^2)
  double median_norm = 0.0;    // over experts that received tokens
  double max_norm = 0.0;
  double min_norm = 0.0;
  double max_to_median = 0.0;
  double min_to_median = 0.0;
  std::vector<int> dead_flags;  // experts with (near-)zero dispatch
};

struct RouteResult {
  std::vector<std::vector<int>> selected;  // per token, in selection order
  Tensor combine_weights;                  // T x K, rows sum to 1
  RoutingBatchStats stats;
};

/// probs = softmax over <x, expert_embedding_e>; rows sum to 1.
Tensor router_probs(const Tensor& x, const RouterParams& rp);

/// Top-K of (probs + bias) with ties broken by lowest expert index; combine
/// weights are the selected pre-bias probabilities renormalized per token.
RouteResult route(const Tensor& probs, const RouterParams& rp, int top_k,
                  const MoEConfig& config);

/// b_e += u * sign(mean(f) - f_e), with sign(0) = 0.
Vector update_bias(const Vector& f_e, RouterParams& rp);

/// L_EP = G * sum_g f_g p_g; differentiable through the probabilities,
/// dispatch fractions held constant.
Tensor ep_group_balance_loss(const RoutingBatchStats& stats);

/// h = SiLU(x W_gate) .* (x W_up), optionally clamped to [-tau, tau]
/// elementwise, then h W_down.
Tensor swiglu_forward(const Tensor& x, const ExpertWeights& w,
                      std::optional<double> act_clip = std::nullopt);

struct MoELayerOutput {
  Tensor output;   // lambda_sh * shared(x) + lambda_rt * combined routed
  Tensor ep_loss;  // unscaled L_EP
  RoutingBatchStats stats;
  ExpertHealthReport health;
};

MoELayerOutput moe_layer_forward(const Tensor& x, const MoEConfig& config,
                                 const RouterParams& router,
                                 const std::vector<ExpertWeights>& experts,
                                 const ExpertWeights& shared_expert);

/// Per-expert output norms and dispersion statistics. outputs_per_expert[e]
/// holds the rows expert e produced for its dispatched tokens.
ExpertHealthReport expert_health(const std::vector<Matrix>& outputs_per_expert,
                                 const std::vector<ExpertWeights>& experts,
                                 Eigen::Index total_dispatch);

/// If max_x ||x W|| over the calibration rows exceeds tau_w, rescale W by
/// tau_w / max so the new calibration max equals tau_w.
Matrix weight_clip(const Matrix& w, const Matrix& calibration_inputs,
                   double tau_w);

/// Mean over tokens of the probability mass on the selected experts.
double routing_confidence(const Matrix& probs,
                          const std::vector<std::vector<int>>& selected);

}  // namespace moelab
