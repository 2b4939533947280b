#include "d2sdk/gradcheck.hpp"

#include "d2sdk/errors.hpp"

#include <algorithm>
#include <cmath>

namespace d2sdk {

Scalar relative_error(Scalar analytic, Scalar numeric, Scalar floor) {
  const Scalar denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

Scalar evaluate(const std::function<Tensor(Tape&)>& loss_fn) {
  Tape tape(false);
  const Scalar v = loss_fn(tape).item();
  if (!std::isfinite(v)) throw NumericError("gradient_check: non-finite loss value");
  return v;
}

}  // namespace

GradCheckReport gradient_check(const std::function<Tensor(Tape&)>& loss_fn,
                               const std::vector<Tensor>& params,
                               const std::vector<std::string>& names,
                               const GradCheckOptions& options) {
  for (auto p : params) {
    if (!p.requires_grad()) throw ContractError("gradient_check: parameter does not require grad");
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = loss_fn(tape);
    if (!std::isfinite(loss.item())) throw NumericError("gradient_check: non-finite loss value");
    tape.backward(loss);
  }

  GradCheckReport report;
  const Scalar h = options.h;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    const Matrix analytic = p.grad();
    if (!analytic.allFinite()) throw NumericError("gradient_check: non-finite analytic gradient");
    Scalar* w = p.mutable_value().data();
    for (Index i = 0; i < p.numel(); ++i) {
      const Scalar saved = w[i];
      auto at = [&](Scalar offset) {
        w[i] = saved + offset;
        const Scalar v = evaluate(loss_fn);
        w[i] = saved;
        return v;
      };
      const Scalar f_plus = at(h);
      const Scalar f_minus = at(-h);
      const Scalar numeric = (f_plus - f_minus) / (2.0 * h);
      const Scalar a = analytic.data()[i];
      Scalar err = relative_error(a, numeric, options.abs_floor);
      if (err >= options.tol && options.skip_kinks) {
        // For a smooth function the gap between forward and backward
        // one-sided slopes shrinks linearly with h; at a kink it does not.
        const Scalar f0 = at(0.0);
        const Scalar gap_h = std::abs((f_plus - f0) / h - (f0 - f_minus) / h);
        const Scalar f_plus2 = at(h / 2);
        const Scalar f_minus2 = at(-h / 2);
        const Scalar gap_h2 = std::abs((f_plus2 - f0) / (h / 2) - (f0 - f_minus2) / (h / 2));
        if (gap_h > 1e-7 && gap_h2 > 0.75 * gap_h) {
          ++report.kinks_excluded;
          continue;
        }
      }
      ++report.checked;
      if (err > report.max_rel_error || report.worst.empty()) {
        if (err >= report.max_rel_error) {
          report.max_rel_error = err;
          const std::string base = pi < names.size() ? names[pi] : "param" + std::to_string(pi);
          report.worst = base + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

GradCheckReport gradient_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x,
                               Scalar h, Scalar tol) {
  if (!x.requires_grad()) x.set_requires_grad(true);
  GradCheckOptions options;
  options.h = h;
  options.tol = tol;
  return gradient_check([&](Tape& tape) { return f(tape, x); }, {x}, {"x"}, options);
}

}  // namespace d2sdk
