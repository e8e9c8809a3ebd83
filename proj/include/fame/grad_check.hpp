#pragma once

// Central finite-difference verification of analytic gradients (f64).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fame/ops.hpp"
#include "fame/tensor.hpp"

namespace fame {

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  bool deterministic = true;  // false: f gave different outputs on identical inputs
  bool passed = false;
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares the tape gradient of f against central differences with step h for every coordinate
/// of every input. A non-scalar output is reduced to sum(f(x) * c) with fixed random weights c.
inline GradCheckReport grad_check(const GradFn& f, std::vector<Tensor<double>> inputs, double tolerance,
                                  double h = 1e-5, std::uint64_t seed = 0x5eed) {
  GradCheckReport report;
  for (auto& x : inputs) x.set_requires_grad(false);

  const Tensor<double> probe = f(inputs);
  const Tensor<double> probe_again = f(inputs);
  if (probe.shape() != probe_again.shape() ||
      !std::equal(probe.values().begin(), probe.values().end(), probe_again.values().begin())) {
    report.deterministic = false;
    return report;
  }

  Tensor<double> weights;
  if (probe.numel() != 1) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> c(probe.numel());
    for (auto& v : c) v = dist(rng);
    weights = Tensor<double>::from(probe.shape(), std::move(c));
  }
  auto objective = [&](const std::vector<Tensor<double>>& xs) {
    Tensor<double> y = f(xs);
    return weights.defined() ? sum(mul(y, weights)) : y;
  };

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    auto scope = tape.activate();
    for (auto& x : inputs) {
      x.set_requires_grad(true);
      x.zero_grad();
    }
    Tensor<double> loss = objective(inputs);
    if (tape.size() > 0) tape.backward(loss);
    for (auto& x : inputs) {
      analytic.emplace_back(x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                         : std::vector<double>(x.numel(), 0.0));
      x.set_requires_grad(false);
    }
  }

  std::vector<std::vector<double>> numeric(inputs.size());
  double max_numeric = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto xv = inputs[k].mutable_values();
    numeric[k].resize(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double saved = xv[i];
      xv[i] = saved + h;
      const double plus = objective(inputs).item();
      xv[i] = saved - h;
      const double minus = objective(inputs).item();
      xv[i] = saved;
      numeric[k][i] = (plus - minus) / (2.0 * h);
      max_numeric = std::max(max_numeric, std::abs(numeric[k][i]));
    }
  }

  // Relative error with a floor tied to the gradient scale, so coordinates whose true gradient is
  // (near) zero are judged against the magnitude of the rest of the gradient.
  const double floor = std::max(1e-3 * max_numeric, 1e-12);
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      const double a = analytic[k][i], n = numeric[k][i];
      const double abs_err = std::abs(a - n);
      const double rel = abs_err / std::max({std::abs(a), std::abs(n), floor});
      report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_input = k;
        report.worst_index = i;
      }
    }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

/// Single-input convenience overload.
inline GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  const Tensor<double>& input, double tolerance) {
  return grad_check([&f](const std::vector<Tensor<double>>& xs) { return f(xs[0]); },
                    std::vector<Tensor<double>>{input}, tolerance);
}

}  // namespace fame
