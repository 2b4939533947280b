#pragma once

#include "d2sdk/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace d2sdk {

struct GradCheckOptions {
  Scalar h = 1e-4;
  Scalar tol = 1e-5;
  // Denominator floor for the relative error, so coordinates whose true
  // derivative is ~0 are compared on an absolute scale.
  Scalar abs_floor = 1e-6;
  bool skip_kinks = true;
};

struct GradCheckReport {
  Scalar max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates where the function has a slope discontinuity within h
  // (one-sided differences disagree independently of the step size).
  std::size_t kinks_excluded = 0;
  std::string worst;  // "param[index]" of the largest error
  bool passed = false;
};

// |a - n| / max(|a|, |n|, floor)
Scalar relative_error(Scalar analytic, Scalar numeric, Scalar floor);

// Compares the tape gradient of `loss_fn` with respect to every entry of
// `params` against central differences (f(x+h) - f(x-h)) / 2h. Parameter
// values are restored afterwards; parameter grads are left holding the
// analytic gradient of a single backward pass.
GradCheckReport gradient_check(const std::function<Tensor(Tape&)>& loss_fn,
                               const std::vector<Tensor>& params,
                               const std::vector<std::string>& names = {},
                               const GradCheckOptions& options = {});

// Single-input convenience form: checks d f(x) / dx.
GradCheckReport gradient_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x,
                               Scalar h, Scalar tol);

}  // namespace d2sdk
