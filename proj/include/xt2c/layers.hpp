#pragma once

#include "xt2c/ops.hpp"
#include "xt2c/random.hpp"

#include <cmath>
#include <string>

namespace xt2c {

// Visitor signature shared by every parameter container:
//   f(const std::string& name, Tensor<T>& tensor)
// Empty tensors (unused slots) are skipped by callers.

template <typename T>
Tensor<T> xavier_uniform(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<T> t({in, out});
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t({rows, cols});
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // 1 x out; empty when the layer has no bias

  static Linear create(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    Linear l;
    l.weight = xavier_uniform<T>(in, out, rng);
    if (with_bias) l.bias = Tensor<T>({1, out});
    return l;
  }

  bool empty() const { return weight.empty(); }

  Var<T> apply(Graph<T>& g, Var<T> x) {
    if (x.cols() != weight.rows()) {
      throw DimensionError("linear: input width " + std::to_string(x.cols()) + " but weight expects " +
                           std::to_string(weight.rows()));
    }
    Var<T> b = bias.empty() ? Var<T>{} : g.parameter(bias);
    return linear(x, g.parameter(weight), b);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;

  static constexpr T kEps = T(1e-5);

  static LayerNormParams create(std::size_t width) {
    return {Tensor<T>({1, width}, T(1)), Tensor<T>({1, width})};
  }

  Var<T> apply(Graph<T>& g, Var<T> x) { return layer_norm(x, g.parameter(gain), g.parameter(bias), kEps); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
};

}  // namespace xt2c
