#pragma once

// Central finite-difference gradient oracle. It only evaluates forward
// passes on fresh graphs; it never looks at adjoints.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "betail/ad/graph.hpp"

namespace betail::testing {

using ad::Graph;
using ad::Parameter;
using ad::Shape;
using ad::Tensor;
using ad::Var;

// Scalar objective from bound inputs. Non-scalar outputs are reduced by the
// caller (see weighted_sum).
using Objective = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

inline Var<double> weighted_sum(Graph<double>& g, Var<double> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> w(y.shape());
  for (auto& x : w.vec()) x = u(rng);
  return ad::sum(ad::mul(y, g.constant(w)));
}

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& x : t.vec()) x = u(rng);
  return t;
}

inline double evaluate(const Objective& f, const std::vector<Tensor<double>>& values) {
  Graph<double> g(false);
  std::vector<Var<double>> vars;
  for (const auto& v : values) vars.push_back(g.constant(v));
  return f(g, vars).value().item();
}

// Relative error |analytic - numeric| / max(|analytic|, |numeric|) over the
// concatenated gradient of all inputs marked in `wrt`.
struct GradCheck {
  double rel_error = 0.0;
  double norm = 0.0;
};

inline GradCheck check_gradient(const Objective& f, const std::vector<Tensor<double>>& values,
                                std::vector<bool> wrt = {}, double h = 1e-5) {
  if (wrt.empty()) wrt.assign(values.size(), true);
  std::vector<Parameter<double>> params;
  params.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) params.emplace_back("x" + std::to_string(i), values[i]);
  {
    Graph<double> g(true);
    std::vector<Var<double>> vars;
    for (std::size_t i = 0; i < values.size(); ++i) {
      vars.push_back(wrt[i] ? g.param(params[i]) : g.constant(values[i]));
    }
    g.backward(f(g, vars));
  }
  double num2 = 0, den_a = 0, den_n = 0;
  auto work = values;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!wrt[i]) continue;
    for (std::size_t k = 0; k < values[i].size(); ++k) {
      const double x0 = work[i][k];
      work[i][k] = x0 + h;
      const double fp = evaluate(f, work);
      work[i][k] = x0 - h;
      const double fm = evaluate(f, work);
      work[i][k] = x0;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = params[i].grad[k];
      num2 += (analytic - numeric) * (analytic - numeric);
      den_a += analytic * analytic;
      den_n += numeric * numeric;
    }
  }
  const double den = std::max({std::sqrt(den_a), std::sqrt(den_n), 1e-12});
  return {std::sqrt(num2) / den, std::sqrt(den_a)};
}

// Same oracle for parameters held by a model: `loss` rebuilds the objective
// from the current parameter values. Evaluation graphs keep gradients on so
// objectives that differentiate through their inputs can be rebuilt.
inline GradCheck check_parameter_gradient(const std::function<Var<double>(Graph<double>&)>& loss,
                                          const std::vector<Parameter<double>*>& params, double h = 1e-5,
                                          std::size_t max_per_tensor = 0) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g(true);
    g.backward(loss(g));
  }
  auto eval = [&] {
    Graph<double> g(true);
    return loss(g).value().item();
  };
  double num2 = 0, den_a = 0, den_n = 0;
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    const std::size_t stride = (max_per_tensor == 0 || n <= max_per_tensor) ? 1 : n / max_per_tensor;
    for (std::size_t k = 0; k < n; k += stride) {
      const double x0 = p->value[k];
      p->value[k] = x0 + h;
      const double fp = eval();
      p->value[k] = x0 - h;
      const double fm = eval();
      p->value[k] = x0;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = p->grad[k];
      num2 += (analytic - numeric) * (analytic - numeric);
      den_a += analytic * analytic;
      den_n += numeric * numeric;
    }
  }
  const double den = std::max({std::sqrt(den_a), std::sqrt(den_n), 1e-12});
  return {std::sqrt(num2) / den, std::sqrt(den_a)};
}

}  // namespace betail::testing
