#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "mtkd/error.hpp"
#include "mtkd/ops.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Same maximum, but counting an element as exact when |analytic - numeric|
  // is within `resolution`.
  double max_resolved_error = 0.0;
  // Smallest derivative difference a central difference of this loss can
  // resolve in double precision: 4 ulp(loss) / (2 eps).
  double resolution = 0.0;
  std::size_t checked = 0;
  // Elements whose stencil x +- eps crossed a non-smooth point (a relu,
  // abs_diff or pooling branch changed), where finite differences do not
  // estimate the derivative.
  std::size_t skipped = 0;
  // Location of the worst element.
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, elementwise over every input (or an evenly strided
/// subset of at most `max_per_input` elements of each input).
///
/// `inputs` are leaf tensors that `fn` reads; their values are perturbed in
/// place and restored. The error of an element is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// A finite difference of a loss L cannot resolve derivatives finer than
/// about ulp(L) / (2 eps), so `max_resolved_error` also reports the maximum
/// with differences inside that resolution treated as zero.
///
/// With `skip_kinks`, an element is left out (and counted in `skipped`) when
/// either perturbed evaluation takes a different branch at some non-smooth
/// op than the unperturbed one.
inline GradCheckResult grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double eps = 1e-5, std::size_t max_per_input = 0,
    bool skip_kinks = true) {
  for (auto& in : inputs) {
    if (!in.is_leaf()) throw Error("grad_check: inputs must be leaf tensors");
    in.set_requires_grad(true);
    in.zero_grad();
  }
  auto evaluate = [&](std::uint64_t& pattern) {
    detail::BranchTrace trace;
    detail::BranchTraceScope scope(trace);
    Tensor<double> out = fn(inputs);
    pattern = trace.hash;
    return out;
  };
  std::uint64_t base = 0;
  Tensor<double> loss = evaluate(base);
  if (loss.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
  const double magnitude = std::abs(loss.item());
  loss.backward();

  GradCheckResult result;
  result.resolution =
      4.0 * (std::nextafter(magnitude, std::numeric_limits<double>::infinity()) - magnitude) / (2.0 * eps);
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    const std::vector<double> analytic = in.grad();
    const std::size_t n = in.size();
    const std::size_t step =
        (max_per_input == 0 || n <= max_per_input) ? 1 : (n + max_per_input - 1) / max_per_input;
    auto values = in.mutable_data();
    for (std::size_t j = 0; j < n; j += step) {
      const double original = values[j];
      std::uint64_t up_pattern = 0, down_pattern = 0;
      values[j] = original + eps;
      const double up = evaluate(up_pattern).item();
      values[j] = original - eps;
      const double down = evaluate(down_pattern).item();
      values[j] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss under perturbation");
      }
      if (skip_kinks && (up_pattern != base || down_pattern != base)) {
        ++result.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[j];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.checked;
      if (std::abs(a - numeric) > result.resolution) {
        result.max_resolved_error = std::max(result.max_resolved_error, err);
      }
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.input = k;
        result.index = j;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace mtkd
