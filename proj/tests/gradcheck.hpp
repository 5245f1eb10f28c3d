// Central-difference gradient checking for Graph<double> expressions.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "iclb/rng.hpp"
#include "iclb/tensor.hpp"

namespace iclb::testing {

inline constexpr double kFdStep = 1e-4;
inline constexpr double kFdTolerance = 1e-5;
inline constexpr double kFdFloor = 1e-8;

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFdFloor});
}

/// Builds an expression from variable leaves and reduces it to a scalar.
using Expr = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// Returns the worst relative error over every input coordinate.
inline double max_gradient_error(const Expr& expr, std::vector<Tensor<double>> inputs) {
  Graph<double> g;
  std::vector<Var<double>> leaves;
  for (const auto& in : inputs) leaves.push_back(g.variable(in));
  auto loss = expr(g, leaves);
  g.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (const auto& l : leaves) analytic.push_back(l.grad());

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Graph<double> h;
    std::vector<Var<double>> ls;
    for (const auto& x : xs) ls.push_back(h.variable(x));
    return expr(h, ls).value()[0];
  };

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      inputs[k][i] = x0 + kFdStep;
      const double up = eval(inputs);
      inputs[k][i] = x0 - kFdStep;
      const double down = eval(inputs);
      inputs[k][i] = x0;
      const double numeric = (up - down) / (2.0 * kFdStep);
      worst = std::max(worst, relative_error(analytic[k][i], numeric));
    }
  }
  return worst;
}

/// sum(out ⊙ W) with fixed random W, so every output coordinate matters.
inline Var<double> weighted_sum(Graph<double>& g, Var<double> out, std::uint64_t seed = 99) {
  auto w = g.constant(random_tensor(out.shape(), seed, 0.5, 1.5));
  return sum(mul(out, w));
}

}  // namespace iclb::testing
