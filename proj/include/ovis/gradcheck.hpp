#pragma once

// Central finite-difference verification of reverse-mode gradients, using the
// fourth-order five-point stencil
//   f'(x) ~ (-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ovis/rng.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

using LossFn = std::function<Tensor<double>(Tape<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<input>[<index>]" of the worst coordinate
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Below the floor the comparison is effectively absolute: structurally zero
// gradients meet a difference quotient of pure roundoff (~1e-13).
inline constexpr double kRelativeErrorFloor = 1e-6;

inline double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), kRelativeErrorFloor});
  return std::abs(a - b) / denom;
}

namespace detail {

inline double eval_loss(const LossFn& loss) {
  Tape<double> tape;
  return loss(tape).item();
}

// `at(step)` evaluates the loss with the perturbation scaled by step.
template <class F>
double central_difference(F&& at, double h) {
  return (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
}

inline std::vector<std::vector<double>> analytic_grads(const LossFn& loss,
                                                       std::vector<Tensor<double>>& inputs) {
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  Tape<double> tape;
  tape.backward(loss(tape));
  std::vector<std::vector<double>> grads;
  for (auto& t : inputs) {
    auto g = t.grad_buffer();
    grads.emplace_back(g.begin(), g.end());
    t.zero_grad();
  }
  return grads;
}

}  // namespace detail

// Per-coordinate check. With max_coords_per_input > 0 only a seeded random
// subset of coordinates is perturbed in each input.
inline GradCheckResult check_gradients(const LossFn& loss, std::vector<Tensor<double>> inputs,
                                       double h = 1e-3, std::size_t max_coords_per_input = 0,
                                       std::uint64_t seed = 0) {
  GradCheckResult result;
  const auto grads = detail::analytic_grads(loss, inputs);
  Rng rng(seed, "gradcheck.coords");
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].mutable_data();
    std::vector<std::size_t> coords;
    if (max_coords_per_input == 0 || values.size() <= max_coords_per_input) {
      for (std::size_t i = 0; i < values.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t c = 0; c < max_coords_per_input; ++c) {
        coords.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(values.size()) - 1)));
      }
    }
    for (std::size_t i : coords) {
      const double saved = values[i];
      const double numeric = detail::central_difference(
          [&](double step) {
            values[i] = saved + step;
            return detail::eval_loss(loss);
          },
          h);
      values[i] = saved;
      const double err = relative_error(grads[t][i], numeric);
      ++result.checked;
      if (err > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst = "input" + std::to_string(t) + "[" + std::to_string(i) + "]";
        result.worst_analytic = grads[t][i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

// Directional check: for each of `directions` random unit-variance directions
// u over all inputs jointly, compares <grad, u> with
// the stencil applied along u.
inline GradCheckResult check_directional(const LossFn& loss, std::vector<Tensor<double>> inputs,
                                         std::size_t directions, double h = 1e-3,
                                         std::uint64_t seed = 0) {
  GradCheckResult result;
  const auto grads = detail::analytic_grads(loss, inputs);
  for (std::size_t k = 0; k < directions; ++k) {
    Rng rng(seed, "gradcheck.direction", k);
    std::vector<std::vector<double>> dir;
    double analytic = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      auto& u = dir.emplace_back(inputs[t].size());
      for (std::size_t i = 0; i < u.size(); ++i) {
        u[i] = rng.normal(0.0, 1.0);
        analytic += grads[t][i] * u[i];
      }
    }
    std::vector<std::vector<double>> saved;
    for (auto& in : inputs) saved.emplace_back(in.data().begin(), in.data().end());
    auto shift = [&](double step) {
      for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto v = inputs[t].mutable_data();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = saved[t][i] + step * dir[t][i];
      }
    };
    const double numeric = detail::central_difference(
        [&](double step) {
          shift(step);
          return detail::eval_loss(loss);
        },
        h);
    shift(0.0);
    const double err = relative_error(analytic, numeric);
    ++result.checked;
    if (err > result.max_rel_error || result.worst.empty()) {
      result.max_rel_error = std::max(result.max_rel_error, err);
      result.worst = "direction" + std::to_string(k);
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace ovis
