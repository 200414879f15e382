#pragma once

#include "xt2c/graph.hpp"
#include "xt2c/random.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace xt2c {

struct GradReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
  std::string diagnostic;
};

using GradCheckFn = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;

// Compares the reverse-mode gradient of a scalar reduction of `op` against
// central differences, element by element, over every input. Non-scalar
// outputs are reduced with a fixed pseudo-random weighting so that
// normalizing ops (softmax, layer norm) still have informative gradients.
// The relative error uses a unit floor: |a - n| / max(1, |a|, |n|).
GradReport grad_check(std::string op_name, const GradCheckFn& op, const std::vector<Matrix<double>>& inputs,
                      double eps = 1e-3, double tol = 1e-3);

using ParameterLossFn = std::function<Var<double>(Graph<double>&)>;

// The same comparison for trainable tensors reached through
// Graph::parameter. Up to `max_per_tensor` elements of each tensor are
// probed, chosen with `pick`.
GradReport grad_check_parameters(std::string name, const ParameterLossFn& loss,
                                 const std::vector<std::pair<std::string, Tensor<double>*>>& params, Rng& pick,
                                 std::size_t max_per_tensor = 16, double eps = 1e-5, double tol = 1e-3);

}  // namespace xt2c
