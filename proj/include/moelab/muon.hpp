#pragma once

#include "moelab/numerics.hpp"
#include "moelab/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace moelab {

struct PolarDiagnostics {
  std::vector<double> step_max_abs;  // per iteration, max |intermediate|
  double ortho_residual = 0.0;       // ||O^T O - I||_inf on the thin side
  bool overflow = false;
};

/// Fixed-step polynomial iteration approximating the polar factor of G.
/// Inputs and intermediates of every iteration pass through quantize_round
/// under the given precision mode.
Matrix polar_express(const Matrix& g, int steps, PrecisionMode mode,
                     PolarDiagnostics* diag = nullptr);

struct MuonState {
  double lr = 0.02;
  double beta = 0.95;
  double weight_decay = 0.1;
  int iteration_steps = 6;
  PrecisionMode precision = PrecisionMode::EXACT64;
  double grad_clip_norm = 1.0;
  std::map<std::string, Matrix> momentum;  // per matrix parameter
};

/// m <- beta m + grad; param <- param - lr (s polar(m) + wd param) with
/// s = sqrt(max(r,c)/min(r,c)) for rectangular parameters.
PolarDiagnostics muon_step(const std::string& name, Tensor& param,
                           const Matrix& grad, MuonState& state);

/// Scales all gradients by max_norm / ||g||_2 when the global norm exceeds
/// max_norm. Returns the pre-clip global norm.
double clip_global_grad_norm(std::vector<Matrix*>& grads, double max_norm);

struct ParamPartition {
  std::vector<std::string> muon;
  std::vector<std::string> fallback;
};

/// 2-D weight matrices of attention/FFN/expert projections go to Muon;
/// embeddings, unembedding, norms, gates, router embeddings and any vector
/// go to the elementwise fallback optimizer.
ParamPartition param_partition(
    const std::vector<std::pair<std::string, IndexList>>& named_params);

/// Elementwise adaptive fallback (Adam with decoupled weight decay).
struct AdamState {
  double lr = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  long step = 0;
  std::map<std::string, Matrix> m, v;
};

void adam_step(const std::string& name, Tensor& param, const Matrix& grad,
               AdamState& state);

}  // namespace moelab
