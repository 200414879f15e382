#pragma once

#include "xt2c/grad_check.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace xt2c {

struct GradSuiteOptions {
  int seeds = 10;
  std::uint64_t first_seed = 1;
  double tol = 1e-3;
};

// Every differentiable op and the model blocks built from them (attention
// with memory, layer norm, encoder layers, meshed decoder gates) plus the
// three training losses, once per seed. Report names carry the seed.
std::vector<GradReport> run_grad_suite(const GradSuiteOptions& options,
                                       const std::function<void(const GradReport&)>& on_report = {});

}  // namespace xt2c
