#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spattn/tensor.hpp"

namespace spattn {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates checked per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  /// Re-measure a missed coordinate at 10 eps, 100 eps, eps / 10 and eps / 100 (kept
  /// inside [1e-7, 1e-3]) and keep the best error. Rounding noise spoils tiny
  /// gradients at small steps and a ReLU kink within eps spoils large steps;
  /// a wrong gradient misses at every step.
  bool step_ladder = false;
};

/// Compares autodiff gradients of the scalar built by `f` against central
/// differences (f(p+eps) - f(p-eps)) / (2 eps) and returns the maximum of
/// |a - n| / max(1e-8, |a| + |n|) over the checked coordinates.
///
/// `f` must rebuild its graph on every call and be deterministic. Throws
/// ContractError for eps outside [1e-7, 1e-3] and Error when `f` is not
/// finite at a perturbed point.
double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                  const GradCheckOptions& options = {});

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

/// Deliberately wrong backward rule, used as a negative control.
enum class Fault { kNone, kSigmoidBackward };

/// Runs the op-level checks plus the full phase-1 loss of a small model
/// against sampled weights and every threshold.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, Fault fault = Fault::kNone);

}  // namespace spattn
