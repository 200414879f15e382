#include "xt2c/grad_check.hpp"

#include "xt2c/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace xt2c {
namespace {

constexpr std::uint64_t kReductionSeed = 0x5eed5eedULL;

struct Evaluation {
  double value = 0.0;
  bool finite = true;
};

Var<double> reduce(Var<double> out) {
  if (out.rows() == 1 && out.cols() == 1) return out;
  std::mt19937_64 rng(kReductionSeed);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  Matrix<double> w(out.rows(), out.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  return sum(mul(out, out.graph->constant(std::move(w))));
}

Evaluation evaluate(const GradCheckFn& op, const std::vector<Matrix<double>>& inputs) {
  Graph<double> g(false);
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& m : inputs) vars.push_back(g.constant(m));
  Var<double> out = op(g, vars);
  Evaluation e;
  e.finite = out.value().allFinite();
  e.value = e.finite ? reduce(out).value()(0, 0) : 0.0;
  return e;
}

}  // namespace

GradReport grad_check(std::string op_name, const GradCheckFn& op, const std::vector<Matrix<double>>& inputs,
                      double eps, double tol) {
  GradReport report;
  report.op_name = std::move(op_name);

  Graph<double> g(true);
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& m : inputs) vars.push_back(g.input(m));
  Var<double> out = op(g, vars);
  if (!out.value().allFinite()) {
    report.diagnostic = "non-finite forward output";
    return report;
  }
  Var<double> root = reduce(out);
  g.backward(root);

  std::vector<Matrix<double>> perturbed = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix<double>& analytic_full = g.grad(vars[k]);
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double original = inputs[k].data()[i];
      perturbed[k].data()[i] = original + eps;
      const Evaluation plus = evaluate(op, perturbed);
      perturbed[k].data()[i] = original - eps;
      const Evaluation minus = evaluate(op, perturbed);
      perturbed[k].data()[i] = original;
      if (!plus.finite || !minus.finite) {
        std::ostringstream os;
        os << "non-finite value while perturbing input " << k << " element " << i;
        report.diagnostic = os.str();
        report.passed = false;
        return report;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * eps);
      const double analytic = analytic_full.size() == 0 ? 0.0 : analytic_full.data()[i];
      const double abs_err = std::abs(analytic - numeric);
      const double rel_err = abs_err / std::max({1.0, std::abs(analytic), std::abs(numeric)});
      if (rel_err > report.max_rel_error) {
        std::ostringstream os;
        os << "worst at input " << k << " element " << i << ": analytic " << analytic << " numeric " << numeric;
        report.diagnostic = os.str();
      }
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, rel_err);
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

GradReport grad_check_parameters(std::string name, const ParameterLossFn& loss,
                                 const std::vector<std::pair<std::string, Tensor<double>*>>& params, Rng& pick,
                                 std::size_t max_per_tensor, double eps, double tol) {
  GradReport report;
  report.op_name = std::move(name);
  for (const auto& [_, t] : params) {
    t->set_requires_grad(true);
    t->clear_grad();
  }
  {
    Graph<double> g(true);
    Var<double> out = loss(g);
    if (!out.value().allFinite()) {
      report.diagnostic = "non-finite forward output";
      return report;
    }
    g.backward(reduce(out));
  }
  auto value = [&]() {
    Graph<double> g(false);
    Var<double> out = loss(g);
    return out.value().allFinite() ? reduce(out).value()(0, 0) : std::nan("");
  };

  for (const auto& [label, t] : params) {
    const std::vector<double> analytic = t->has_grad() ? std::vector<double>(t->grad().begin(), t->grad().end())
                                                       : std::vector<double>(t->size(), 0.0);
    std::vector<std::size_t> idx(t->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), pick);
      idx.resize(max_per_tensor);
    }
    for (std::size_t i : idx) {
      const double original = (*t)[i];
      (*t)[i] = original + eps;
      const double plus = value();
      (*t)[i] = original - eps;
      const double minus = value();
      (*t)[i] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        report.diagnostic = "non-finite value while perturbing " + label;
        report.passed = false;
        return report;
      }
      const double numeric = (plus - minus) / (2.0 * eps);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double rel_err = abs_err / std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      if (rel_err > report.max_rel_error) {
        std::ostringstream os;
        os << "worst at " << label << " element " << i << ": analytic " << analytic[i] << " numeric " << numeric;
        report.diagnostic = os.str();
      }
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, rel_err);
    }
    t->clear_grad();
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace xt2c
