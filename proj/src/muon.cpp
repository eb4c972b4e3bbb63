#include "moelab/muon.hpp"

#include <cmath>
#include <stdexcept>

namespace moelab {

namespace {

// Odd degree-5 polynomial schedule p(x) = a x + b x^3 + c x^5 built by the
// greedy minimax construction for normalized singular values in
// [0.008, 1.06]; the tail row has a triple fixed point at 1 and repeats for
// extra steps.
constexpr int kScheduleRows = 8;
constexpr double kSchedule[kScheduleRows][3] = {
    {7.7291112915860625, -20.16164556375043, 13.269931627027567},
    {3.766383139338505, -2.8152652314521527, 0.5471662200524342},
    {2.871107429492041, -2.145862980079069, 0.4714328779120182},
    {2.026595199840808, -1.4097580151905766, 0.3913005521172032},
    {1.875979996678752, -1.2510883484579953, 0.37510875621654927},
    {1.875, -1.25, 0.375},
    {1.875, -1.25, 0.375},
    {1.875, -1.25, 0.375},
};

// Largest-singular-value estimate via power iteration, iterating on the
// thin side, from two fixed seeded starts. A Rayleigh quotient never
// overestimates, so the caller adds a margin before dividing.
double spectral_norm_estimate(const Matrix& x) {
  Matrix a = x.rows() <= x.cols() ? x : Matrix(x.transpose());
  double best = 0.0;
  for (int s = 0; s < 2; ++s) {
    std::mt19937_64 rng(0x9E3779B97F4A7C15ull + s);
    std::normal_distribution<double> dist(0.0, 1.0);
    Vector v(a.rows());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = dist(rng);
    v.normalize();
    for (int it = 0; it < 100; ++it) {
      Vector w = a * (a.transpose() * v);
      const double n = w.norm();
      if (n == 0.0) break;
      v = w / n;
    }
    best = std::max(best, (a.transpose() * v).norm());
  }
  return best;
}

double max_abs(const Matrix& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

}  // namespace

Matrix polar_express(const Matrix& g, int steps, PrecisionMode mode,
                     PolarDiagnostics* diag) {
  if (steps < 1) throw std::invalid_argument("polar_express: steps must be >= 1");
  if (g.size() == 0 || g.norm() == 0.0) {
    throw std::invalid_argument("polar_express: zero matrix has no polar factor");
  }

  const bool transposed = g.rows() > g.cols();
  Matrix x = transposed ? Matrix(g.transpose()) : g;  // rows <= cols

  // Normalize so singular values land inside the schedule's design interval.
  // Emulated modes get extra headroom for elementwise rounding of X.
  double margin = 1.005;
  const FormatSpec fs = format_spec(mode);
  if (mode != PrecisionMode::EXACT64) {
    margin *= 1.0 + 4.0 * std::sqrt(static_cast<double>(x.rows())) *
                        std::ldexp(1.0, -(fs.mantissa_bits + 1));
  }
  const double sigma = spectral_norm_estimate(x);
  x /= sigma * margin;

  PolarDiagnostics local;
  PolarDiagnostics& d = diag ? *diag : local;
  d.step_max_abs.clear();
  d.overflow = false;

  x = quantize_round(x, mode);
  for (int t = 0; t < steps; ++t) {
    const auto& row = kSchedule[std::min(t, kScheduleRows - 1)];
    double extreme = max_abs(x);
    Matrix a = quantize_round(Matrix(x * x.transpose()), mode);
    extreme = std::max(extreme, max_abs(a));
    Matrix b = quantize_round(Matrix(row[1] * a + row[2] * a * a), mode);
    extreme = std::max(extreme, max_abs(b));
    x = quantize_round(Matrix(row[0] * x + b * x), mode);
    extreme = std::max(extreme, max_abs(x));
    d.step_max_abs.push_back(extreme);
    if (!x.allFinite()) {
      d.overflow = true;
      break;
    }
  }

  Matrix out = transposed ? Matrix(x.transpose()) : x;
  if (out.allFinite()) {
    // Residual on the thin side.
    const Matrix& o = out.rows() >= out.cols() ? out : Matrix(out.transpose());
    Matrix r = o.transpose() * o;
    r.diagonal().array() -= 1.0;
    d.ortho_residual = max_abs(r);
  } else {
    d.overflow = true;
    d.ortho_residual = std::numeric_limits<double>::infinity();
  }
  return out;
}

PolarDiagnostics muon_step(const std::string& name, Tensor& param,
                           const Matrix& grad, MuonState& state) {
  const auto r = param.rows(), c = param.cols();
  if (r < 2 || c < 2) {
    throw std::invalid_argument("muon_step: '" + name +
                                "' is not a matrix parameter");
  }
  auto it = state.momentum.find(name);
  if (it == state.momentum.end()) {
    it = state.momentum.emplace(name, Matrix::Zero(r, c)).first;
  }
  Matrix& m = it->second;
  m = state.beta * m + grad;

  PolarDiagnostics diag;
  Matrix update;
  if (m.norm() == 0.0) {
    update = Matrix::Zero(r, c);
  } else {
    update = polar_express(m, state.iteration_steps, state.precision, &diag);
    if (!update.allFinite()) {
      // Keep the parameter intact; diagnostics carry the overflow flag.
      update = Matrix::Zero(r, c);
    }
  }

  const double s =
      r == c ? 1.0
             : std::sqrt(static_cast<double>(std::max(r, c)) /
                         static_cast<double>(std::min(r, c)));
  param.add_to_value(-state.lr * (s * update + state.weight_decay * param.value()));
  return diag;
}

double clip_global_grad_norm(std::vector<Matrix*>& grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix* g : grads) sq += g->squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (Matrix* g : grads) *g *= scale;
  }
  return norm;
}

ParamPartition param_partition(
    const std::vector<std::pair<std::string, IndexList>>& named_params) {
  ParamPartition part;
  for (const auto& [name, shape] : named_params) {
    const bool is_matrix = shape.size() == 2 && shape[0] > 1 && shape[1] > 1;
    const bool excluded = name.find("embed") != std::string::npos ||
                          name.find("norm") != std::string::npos ||
                          name.find("gamma") != std::string::npos ||
                          name.find("gate_vec") != std::string::npos ||
                          name.find("sink") != std::string::npos ||
                          name.find("router") != std::string::npos ||
                          name.find("bias") != std::string::npos;
    if (is_matrix && !excluded) {
      part.muon.push_back(name);
    } else {
      part.fallback.push_back(name);
    }
  }
  return part;
}

void adam_step(const std::string& name, Tensor& param, const Matrix& grad,
               AdamState& state) {
  auto mi = state.m.find(name);
  if (mi == state.m.end()) {
    mi = state.m.emplace(name, Matrix::Zero(param.rows(), param.cols())).first;
    state.v.emplace(name, Matrix::Zero(param.rows(), param.cols()));
  }
  Matrix& m = mi->second;
  Matrix& v = state.v[name];
  m = state.beta1 * m + (1.0 - state.beta1) * grad;
  v = state.beta2 * v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  // Bias correction uses the shared step counter (advanced by the caller
  // once per optimization step).
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  Matrix mhat = m / bc1;
  Matrix vhat = v / bc2;
  Matrix upd =
      (mhat.array() / (vhat.array().sqrt() + state.eps)).matrix() +
      state.weight_decay * param.value();
  param.add_to_value(-state.lr * upd);
}

}  // namespace moelab
