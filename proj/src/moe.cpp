#include "moelab/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace moelab {

std::vector<int> MoEConfig::resolved_group_map() const {
  if (!group_map.empty()) return group_map;
  std::vector<int> m(n_experts);
  const int per = n_experts / n_groups;
  for (int e = 0; e < n_experts; ++e) m[e] = e / per;
  return m;
}

void MoEConfig::validate() const {
  if (n_experts < 1 || top_k < 1 || top_k > n_experts) {
    throw std::invalid_argument("MoEConfig: need 1 <= top_k <= n_experts");
  }
  if (n_groups < 1 || n_experts % n_groups != 0) {
    throw std::invalid_argument("MoEConfig: n_groups must divide n_experts");
  }
  if (shared_scale < 0.0 || routed_scale < 0.0) {
    throw std::invalid_argument("MoEConfig: scales must be non-negative");
  }
  const auto m = resolved_group_map();
  std::vector<int> count(n_groups, 0);
  for (int g : m) {
    if (g < 0 || g >= n_groups) throw std::invalid_argument("MoEConfig: bad group id");
    ++count[g];
  }
  for (int c : count) {
    if (c != n_experts / n_groups) {
      throw std::invalid_argument("MoEConfig: groups must be equal-sized");
    }
  }
}

Tensor router_probs(const Tensor& x, const RouterParams& rp) {
  if (x.cols() != rp.expert_embeddings.cols()) {
    throw std::invalid_argument("router_probs: width mismatch");
  }
  return softmax_rows(matmul(x, transpose(rp.expert_embeddings)));
}

RouteResult route(const Tensor& probs, const RouterParams& rp, int top_k,
                  const MoEConfig& config) {
  config.validate();
  const auto T = probs.rows();
  const auto E = probs.cols();
  if (top_k > E) throw std::invalid_argument("route: top_k > n_experts");
  if (rp.bias.size() != E) throw std::invalid_argument("route: bias size != E");

  RouteResult res;
  res.selected.resize(T);
  res.stats.tokens = T;
  res.stats.selection = Eigen::ArrayXXi::Zero(T, E);
  res.stats.n_groups = config.n_groups;
  res.stats.group_of = config.resolved_group_map();
  res.stats.probs = probs;

  for (Eigen::Index t = 0; t < T; ++t) {
    std::vector<int> order(E);
    std::iota(order.begin(), order.end(), 0);
    const auto score = [&](int e) { return probs.value()(t, e) + rp.bias(e); };
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (score(a) != score(b)) return score(a) > score(b);
      return a < b;
    });
    order.resize(top_k);
    res.selected[t] = order;
    for (int e : order) res.stats.selection(t, e) = 1;
  }

  // Combine weights: selected pre-bias probabilities, renormalized.
  std::vector<Tensor> cols;
  std::vector<Eigen::Index> idx(T);
  Tensor total;
  for (int k = 0; k < top_k; ++k) {
    for (Eigen::Index t = 0; t < T; ++t) idx[t] = res.selected[t][k];
    Tensor col = gather_per_row(probs, idx);
    total = k == 0 ? col : total + col;
    cols.push_back(std::move(col));
  }
  Tensor inv_total = reciprocal(total);
  for (auto& c : cols) c = cwise_mul(c, inv_total);
  res.combine_weights = concat_cols(cols);

  res.stats.p_e = probs.value().colwise().mean();
  res.stats.f_e = Vector::Zero(E);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int e : res.selected[t]) res.stats.f_e(e) += 1.0;
  }
  res.stats.f_e /= static_cast<double>(T * top_k);
  res.stats.p_g = Vector::Zero(config.n_groups);
  res.stats.f_g = Vector::Zero(config.n_groups);
  for (Eigen::Index e = 0; e < E; ++e) {
    res.stats.p_g(res.stats.group_of[e]) += res.stats.p_e(e);
    res.stats.f_g(res.stats.group_of[e]) += res.stats.f_e(e);
  }
  return res;
}

Vector update_bias(const Vector& f_e, RouterParams& rp) {
  if (f_e.size() != rp.bias.size()) {
    throw std::invalid_argument("update_bias: size mismatch");
  }
  const double m = f_e.mean();
  for (Eigen::Index e = 0; e < f_e.size(); ++e) {
    const double d = m - f_e(e);
    rp.bias(e) += rp.update_rate * ((d > 0.0) - (d < 0.0));
  }
  return rp.bias;
}

Tensor ep_group_balance_loss(const RoutingBatchStats& stats) {
  if (!stats.probs.defined() || stats.n_groups < 1) {
    throw std::invalid_argument("ep_group_balance_loss: stats not populated");
  }
  const auto E = stats.probs.cols();
  const int G = stats.n_groups;
  Matrix group_ind = Matrix::Zero(E, G);
  for (Eigen::Index e = 0; e < E; ++e) group_ind(e, stats.group_of[e]) = 1.0;

  Tensor p_e = col_mean(stats.probs);                       // 1 x E
  Tensor p_g = matmul(p_e, Tensor::leaf(group_ind));        // 1 x G
  Matrix f_row = stats.f_g.transpose();
  return static_cast<double>(G) *
         sum(cwise_mul(p_g, Tensor::leaf(std::move(f_row))));
}

Tensor swiglu_forward(const Tensor& x, const ExpertWeights& w,
                      std::optional<double> act_clip) {
  Tensor h = cwise_mul(silu(matmul(x, w.w_gate)), matmul(x, w.w_up));
  if (act_clip) h = clamp(h, -*act_clip, *act_clip);
  return matmul(h, w.w_down);
}

MoELayerOutput moe_layer_forward(const Tensor& x, const MoEConfig& config,
                                 const RouterParams& router,
                                 const std::vector<ExpertWeights>& experts,
                                 const ExpertWeights& shared_expert) {
  config.validate();
  const auto T = x.rows();
  if (T == 0) throw std::invalid_argument("moe_layer_forward: empty batch");
  if (static_cast<int>(experts.size()) != config.n_experts) {
    throw std::invalid_argument("moe_layer_forward: expert count mismatch");
  }

  MoELayerOutput out;
  Tensor probs = router_probs(x, router);
  RouteResult routed = route(probs, router, config.top_k, config);

  // Per-token renormalizer of selected probabilities.
  std::vector<Eigen::Index> idx(T);
  Tensor sel_total;
  for (int k = 0; k < config.top_k; ++k) {
    for (Eigen::Index t = 0; t < T; ++t) idx[t] = routed.selected[t][k];
    Tensor col = gather_per_row(probs, idx);
    sel_total = k == 0 ? col : sel_total + col;
  }
  Tensor inv_total = reciprocal(sel_total);

  std::vector<Matrix> expert_outputs(config.n_experts);
  Tensor routed_sum;
  for (int e = 0; e < config.n_experts; ++e) {
    std::vector<Eigen::Index> tok;
    for (Eigen::Index t = 0; t < T; ++t) {
      if (routed.stats.selection(t, e)) tok.push_back(t);
    }
    if (tok.empty()) {
      expert_outputs[e] = Matrix(0, x.cols());
      continue;
    }
    Tensor xe = select_rows(x, tok);
    Tensor oe = swiglu_forward(xe, experts[e], config.act_clip);
    expert_outputs[e] = oe.value();
    Tensor we = cwise_mul(
        gather_per_row(select_rows(probs, tok),
                       std::vector<Eigen::Index>(tok.size(), e)),
        select_rows(inv_total, tok));
    Tensor contrib = scatter_add_rows(scale_rows(oe, we), tok, T);
    routed_sum = routed_sum.defined() ? routed_sum + contrib : contrib;
  }

  Tensor result;
  if (config.shared_scale != 0.0) {
    result = config.shared_scale * swiglu_forward(x, shared_expert, config.act_clip);
  }
  if (routed_sum.defined() && config.routed_scale != 0.0) {
    Tensor r = config.routed_scale * routed_sum;
    result = result.defined() ? result + r : r;
  }
  if (!result.defined()) {
    result = Tensor::leaf(Matrix::Zero(T, x.cols()));
  }

  out.output = std::move(result);
  out.ep_loss = ep_group_balance_loss(routed.stats);
  out.stats = std::move(routed.stats);
  out.health = expert_health(expert_outputs, experts, T * config.top_k);
  return out;
}

ExpertHealthReport expert_health(const std::vector<Matrix>& outputs_per_expert,
                                 const std::vector<ExpertWeights>& experts,
                                 Eigen::Index total_dispatch) {
  const int E = static_cast<int>(outputs_per_expert.size());
  if (E == 0) throw std::invalid_argument("expert_health: no experts");
  if (total_dispatch <= 0) throw std::invalid_argument("expert_health: empty batch");

  ExpertHealthReport rep;
  rep.mean_output_rms = Vector::Constant(E, std::nan(""));
  rep.dispatch_fraction = Vector::Zero(E);
  rep.param_frobenius = Vector::Zero(E);

  std::vector<double> active;
  for (int e = 0; e < E; ++e) {
    const Matrix& o = outputs_per_expert[e];
    rep.dispatch_fraction(e) =
        static_cast<double>(o.rows()) / static_cast<double>(total_dispatch);
    if (e < static_cast<int>(experts.size())) {
      const auto& w = experts[e];
      rep.param_frobenius(e) = std::sqrt(w.w_gate.value().squaredNorm() +
                                         w.w_up.value().squaredNorm() +
                                         w.w_down.value().squaredNorm());
    }
    if (o.rows() == 0) {
      rep.dead_flags.push_back(e);
      continue;
    }
    double acc = 0.0;
    for (Eigen::Index i = 0; i < o.rows(); ++i) {
      acc += o.row(i).norm() / std::sqrt(static_cast<double>(o.cols()));
    }
    rep.mean_output_rms(e) = acc / static_cast<double>(o.rows());
    active.push_back(rep.mean_output_rms(e));
    if (rep.dispatch_fraction(e) < 1.0 / (10.0 * E)) rep.dead_flags.push_back(e);
  }
  if (active.empty()) throw std::invalid_argument("expert_health: no dispatched expert");

  std::sort(active.begin(), active.end());
  const size_t n = active.size();
  rep.min_norm = active.front();
  rep.max_norm = active.back();
  rep.median_norm = (n % 2 == 1) ? active[n / 2]
                                 : 0.5 * (active[n / 2 - 1] + active[n / 2]);
  if (rep.median_norm > 0.0) {
    rep.max_to_median = rep.max_norm / rep.median_norm;
    rep.min_to_median = rep.min_norm / rep.median_norm;
  } else {
    rep.max_to_median = rep.max_norm > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    rep.min_to_median = 1.0;
  }
  return rep;
}

Matrix weight_clip(const Matrix& w, const Matrix& calibration_inputs,
                   double tau_w) {
  if (calibration_inputs.rows() == 0) {
    throw std::invalid_argument("weight_clip: calibration set empty");
  }
  if (calibration_inputs.cols() != w.rows()) {
    throw std::invalid_argument("weight_clip: calibration width mismatch");
  }
  double max_norm = 0.0;
  for (Eigen::Index i = 0; i < calibration_inputs.rows(); ++i) {
    max_norm = std::max(max_norm, (calibration_inputs.row(i) * w).norm());
  }
  if (max_norm == 0.0) {
    throw std::invalid_argument("weight_clip: all calibration activations are zero");
  }
  if (max_norm <= tau_w) return w;
  return w * (tau_w / max_norm);
}

double routing_confidence(const Matrix& probs,
                          const std::vector<std::vector<int>>& selected) {
  if (probs.rows() == 0 ||
      static_cast<Eigen::Index>(selected.size()) != probs.rows()) {
    throw std::invalid_argument("routing_confidence: shape mismatch");
  }
  double acc = 0.0;
  for (Eigen::Index t = 0; t < probs.rows(); ++t) {
    for (int e : selected[t]) acc += probs(t, e);
  }
  return acc / static_cast<double>(probs.rows());
}

}  // namespace moelab
