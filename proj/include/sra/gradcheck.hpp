#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sra/numerics.hpp"
#include "sra/rng.hpp"

namespace sra {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // relative error denominator is max(|analytic|, |numeric|, floor)
  double denominator_floor = 1e-6;
  // A ReLU or max switch inside [x-h, x+h] breaks the central difference
  // there; coordinates that fail are re-measured at step/10 and step/100.
  int refinements = 2;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t coordinates_refined = 0;

  std::string describe() const {
    return std::string(passed ? "pass" : "FAIL") + " max_rel_err=" + std::to_string(max_rel_error) +
           " worst input=" + std::to_string(worst_input) + "[" + std::to_string(worst_index) +
           "] analytic=" + std::to_string(worst_analytic) +
           " numeric=" + std::to_string(worst_numeric) +
           " refined=" + std::to_string(coordinates_refined);
  }
};

/// A differentiable op over a flat list of inputs (inputs and parameters alike).
template <typename T>
using DifferentiableOp = std::function<Traced<T>(const std::vector<Tensor<T>>&)>;

/// Compares the VJP of a random projection <r, op(inputs)> against central
/// finite differences on every input coordinate.
template <typename T>
GradCheckReport check_vjp(const DifferentiableOp<T>& op, std::vector<Tensor<T>> inputs,
                          const GradCheckOptions& options = {}) {
  auto traced = op(inputs);
  Rng rng = make_rng(options.seed, "check_vjp.projection");
  Tensor<T> projection(traced.value.dims());
  for (auto& v : projection.storage()) v = normal<T>(rng);

  const Cotangents<T> analytic = traced.vjp(projection);
  if (analytic.size() != inputs.size()) {
    throw ShapeError("check_vjp: op returned " + std::to_string(analytic.size()) +
                     " cotangents for " + std::to_string(inputs.size()) + " inputs");
  }

  auto objective = [&](const std::vector<Tensor<T>>& in) {
    const auto out = op(in).value;
    T s{0};
    for (std::size_t i = 0; i < out.size(); ++i) s += projection[i] * out[i];
    return s;
  };

  GradCheckReport report;
  const T h = static_cast<T>(options.step);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor<T>::require_same_dims(inputs[t], analytic[t], "check_vjp cotangent");
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const T saved = inputs[t][i];
      const double a = static_cast<double>(analytic[t][i]);
      auto measure = [&](T step, double& numeric_out) {
        inputs[t][i] = saved + step;
        const T plus = objective(inputs);
        inputs[t][i] = saved - step;
        const T minus = objective(inputs);
        inputs[t][i] = saved;
        numeric_out = static_cast<double>((plus - minus) / (T{2} * step));
        const double denom =
            std::max({std::abs(a), std::abs(numeric_out), options.denominator_floor});
        return std::abs(a - numeric_out) / denom;
      };
      double numeric = 0.0;
      double rel = measure(h, numeric);
      T step = h;
      for (int r = 0; r < options.refinements && rel >= options.tolerance; ++r) {
        step /= T{10};
        double refined_numeric = 0.0;
        const double refined = measure(step, refined_numeric);
        if (refined < options.tolerance) ++report.coordinates_refined;
        if (refined < rel) {
          rel = refined;
          numeric = refined_numeric;
        }
      }
      ++report.coordinates_checked;
      if (rel > report.max_rel_error || report.coordinates_checked == 1) {
        report.max_rel_error = rel;
        report.worst_input = t;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace sra
