#pragma once

#include "moelab/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace moelab {

/// Floating-point emulation target. All arithmetic stays in 64-bit; a mode
/// only controls how values are rounded by quantize_round.
enum class PrecisionMode { EXACT64, EMULATED32, EMULATED_BF16, EMULATED_FP16 };

struct FormatSpec {
  int mantissa_bits;  // stored (explicit) mantissa bits
  int max_exponent;   // largest unbiased exponent
  int min_exponent;   // smallest unbiased exponent of a normal number
};

FormatSpec format_spec(PrecisionMode mode);

/// Round-to-nearest-even into the target format, widened back to 64-bit.
/// Values beyond the format's largest finite magnitude become +/-infinity.
double quantize_round(double x, PrecisionMode mode);
Matrix quantize_round(const Matrix& t, PrecisionMode mode);

/// Per-feature gain parameterized as an offset from one; all-zero gamma is
/// the identity gain.
struct NormParams {
  Eigen::RowVectorXd gamma;
  double eps = 1e-6;
};

/// y = x / sqrt(mean(x^2) + eps) .* (1 + gamma), along the last dimension.
Matrix zero_centered_rmsnorm(const Matrix& x, const NormParams& p);

struct CheckReport {
  struct Entry {
    int input_index;
    double max_rel_err;
    double worst_analytic;
    double worst_numeric;
  };
  std::vector<Entry> per_input;
  double max_rel_err = 0.0;
  bool passed = false;
  std::string diagnostic;  // non-empty on non-finite outputs
};

/// Compares reverse-mode gradients of a scalar-valued function against
/// central finite differences, input by input.
CheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& function,
    std::vector<Tensor> inputs, double eps = 1e-5, double tol = 1e-5);

}  // namespace moelab
