#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mima {

// Outcome of one seeded self-check against an independent oracle.
struct CheckReport {
  std::string name;
  bool passed = false;
  std::size_t instances = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  double seconds = 0.0;
  std::string detail;
};

// Merge forward: constraint residual and agreement with the explicit KKT solve.
CheckReport check_merge_forward(std::size_t instances = 100, std::uint64_t seed = 100);
// Merge backward: grads wrt every adapted kv weight vs central differences.
CheckReport check_merge_backward(std::size_t instances = 50, std::uint64_t seed = 500);
// Denoiser loss: kv, rest, embedding and input gradients vs central differences.
CheckReport check_denoiser_gradients(std::size_t configs = 5, std::uint64_t seed = 10);
// Bi-level step on a model with at most 30 parameters: full upper gradient vs
// central differences of the composite map, plus exact agreement of both
// gradient modes at alpha = 0.
CheckReport check_bilevel_gradient(std::uint64_t seed = 1);

// "all", "merge", "diffusion" or "immunize".
std::vector<CheckReport> run_gradient_checks(const std::string& module);

}  // namespace mima
