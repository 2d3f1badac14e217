#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aquafuse/tensor.hpp"

// Central finite-difference verification of the explicit backward passes.
namespace aquafuse {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;
// Gradients smaller than this are compared on an absolute scale.
inline constexpr double kGradcheckFloor = 1e-3;

/// |analytic - numeric| / max(|analytic|, |numeric|, kGradcheckFloor).
double gradient_relative_error(double analytic, double numeric);

/// One tensor-valued input of a scalar loss: `values` are perturbed in place,
/// `analytic` holds the gradient computed by the backward pass.
struct FdTarget {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<target>[<index>]"
};

/// Compares analytic gradients against (L(x+h) - L(x-h)) / 2h. With
/// `max_samples` == 0 every entry is checked; otherwise that many entries are
/// drawn uniformly over all targets.
FdReport finite_difference_check(const std::function<double()>& loss, const std::vector<FdTarget>& targets,
                                 std::size_t max_samples = 0, std::uint64_t sample_seed = 0,
                                 double step = kGradcheckStep);

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = kGradcheckStep;
  double tolerance = kGradcheckTolerance;
  // Test hook: corrupt the analytic gradient of the named op before comparing.
  std::string perturb_op;
};

struct GradcheckResult {
  std::string scope;
  std::string op;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// "tensor_autograd", "cfi_attention", "gff_fusion", "backbone".
const std::vector<std::string>& gradcheck_scopes();

/// Runs the finite-difference suite of one scope, or of every scope for "all".
/// Throws ConfigError for unknown scopes.
std::vector<GradcheckResult> run_gradcheck(const std::string& scope, const GradcheckOptions& options = {});

/// Fills `t` with uniform values in [lo, hi].
void fill_uniform(Tensor& t, std::mt19937_64& rng, double lo, double hi);

}  // namespace aquafuse
