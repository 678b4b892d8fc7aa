#pragma once

#include <cmath>
#include <functional>

#include "pmts/tensor.hpp"

namespace pmts {

// A scalar-valued differentiable function of one tensor. The tape argument is
// null during the finite-difference probes.
using ScalarFn = std::function<Tensor(const Tensor&, GradTape*)>;

// Central finite differences against the tape gradient, coordinate by
// coordinate. Returns the max relative error; coordinates where both the
// analytic and numeric values are below zero_tol are compared absolutely so a
// genuinely zero gradient does not blow up the ratio.
inline double grad_check(const ScalarFn& f, Tensor x, double h = 1e-5, double zero_tol = 1e-8) {
    x.set_requires_grad(true);
    x.zero_grad();

    GradTape tape;
    Tensor out = f(x, &tape);
    if (out.numel() != 1) throw ShapeError("grad_check: function output is not scalar");
    if (!std::isfinite(out.item())) throw NumericError("grad_check: non-finite function output");
    tape.backward(out);
    const std::vector<double> analytic = x.grad();

    double max_err = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x, nullptr).item();
        x[i] = orig - h;
        const double fm = f(x, nullptr).item();
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: non-finite output during perturbation");
        }
        const double fd = (fp - fm) / (2.0 * h);
        const double diff = std::abs(analytic[i] - fd);
        const double denom = std::max(std::abs(analytic[i]), std::abs(fd));
        const double err = denom < zero_tol ? diff : diff / denom;
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace pmts
