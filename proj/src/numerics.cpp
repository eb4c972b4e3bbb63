#include "moelab/numerics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace moelab {

FormatSpec format_spec(PrecisionMode mode) {
  switch (mode) {
    case PrecisionMode::EXACT64:
      return {52, 1023, -1022};
    case PrecisionMode::EMULATED32:
      return {23, 127, -126};
    case PrecisionMode::EMULATED_BF16:
      return {7, 127, -126};
    case PrecisionMode::EMULATED_FP16:
      return {10, 15, -14};
  }
  throw std::logic_error("format_spec: bad mode");
}

double quantize_round(double x, PrecisionMode mode) {
  if (mode == PrecisionMode::EXACT64) return x;
  if (!std::isfinite(x)) return x;
  if (x == 0.0) return x;

  const FormatSpec fs = format_spec(mode);
  int e = 0;
  const double f = std::frexp(std::abs(x), &e);  // |x| = f * 2^e, f in [0.5,1)
  const int unbiased = e - 1;                    // |x| = (2f) * 2^(e-1)

  // Effective mantissa resolution; subnormals lose low bits.
  int mant = fs.mantissa_bits;
  if (unbiased < fs.min_exponent) {
    mant -= (fs.min_exponent - unbiased);
    if (mant < -1) return std::copysign(0.0, x);
  }

  // Round f (in [0.5,1)) to 1+mant significant binary digits. The scaling is
  // exact (power of two), so nearbyint under the default FP environment
  // performs round-to-nearest with ties to even.
  const double scale = std::ldexp(1.0, mant + 1);
  const double r = std::nearbyint(f * scale);
  double y = std::ldexp(r / scale, e);

  // Overflow past the largest finite value of the format.
  const double max_finite =
      std::ldexp(2.0 - std::ldexp(1.0, -fs.mantissa_bits), fs.max_exponent);
  if (y > max_finite) y = std::numeric_limits<double>::infinity();
  return std::copysign(y, x);
}

Matrix quantize_round(const Matrix& t, PrecisionMode mode) {
  if (mode == PrecisionMode::EXACT64) return t;
  Matrix out(t.rows(), t.cols());
  for (Eigen::Index j = 0; j < t.cols(); ++j)
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      out(i, j) = quantize_round(t(i, j), mode);
  return out;
}

Matrix zero_centered_rmsnorm(const Matrix& x, const NormParams& p) {
  if (p.gamma.size() != x.cols()) {
    throw std::invalid_argument("zero_centered_rmsnorm: gamma length " +
                                std::to_string(p.gamma.size()) +
                                " != feature dim " + std::to_string(x.cols()));
  }
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double ms = x.row(i).squaredNorm() / static_cast<double>(x.cols());
    y.row(i) = x.row(i).array() / std::sqrt(ms + p.eps) *
               (p.gamma.array() + 1.0);
  }
  return y;
}

CheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& function,
    std::vector<Tensor> inputs, double eps, double tol) {
  CheckReport report;
  if (eps < 1e-7 || eps > 1e-4) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-4]");
  }

  for (auto& in : inputs) in.zero_grad();
  Tensor out = function(inputs);
  if (!std::isfinite(out.item())) {
    report.diagnostic = "non-finite output at base point";
    return report;
  }
  out.backward();

  auto eval = [&](const std::vector<Tensor>& ins) {
    return function(ins).item();
  };

  for (size_t k = 0; k < inputs.size(); ++k) {
    CheckReport::Entry entry{static_cast<int>(k), 0.0, 0.0, 0.0};
    Matrix base = inputs[k].value();
    const Matrix& analytic = inputs[k].grad();
    for (Eigen::Index j = 0; j < base.cols(); ++j) {
      for (Eigen::Index i = 0; i < base.rows(); ++i) {
        Matrix bumped = base;
        bumped(i, j) = base(i, j) + eps;
        inputs[k].set_value(bumped);
        const double fp = eval(inputs);
        bumped(i, j) = base(i, j) - eps;
        inputs[k].set_value(bumped);
        const double fm = eval(inputs);
        inputs[k].set_value(base);
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
          report.diagnostic =
              "non-finite output while perturbing input " + std::to_string(k);
          return report;
        }
        const double fd = (fp - fm) / (2.0 * eps);
        const double an = analytic(i, j);
        const double rel =
            std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
        if (rel > entry.max_rel_err) {
          entry.max_rel_err = rel;
          entry.worst_analytic = an;
          entry.worst_numeric = fd;
        }
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_input.push_back(entry);
  }
  report.passed = report.max_rel_err <= tol;
  return report;
}

}  // namespace moelab
