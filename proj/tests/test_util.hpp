#pragma once

#include <cmath>
#include <functional>

#include "tadsr/autograd.hpp"

namespace tadsr::testing {

/// Central-difference derivative of f with respect to x[i].
inline double central_difference(Tensor<double>& x, std::size_t i, const std::function<double()>& f,
                                 double h = 1e-6) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f();
    x[i] = orig - h;
    const double down = f();
    x[i] = orig;
    return (up - down) / (2 * h);
}

/// |a - b| / max(|a|, |b|, floor)
inline double rel_error(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between the analytic gradient of `loss(x)` and a
/// finite-difference estimate, over every element of x.
inline double max_grad_error(const Tensor<double>& x0, const std::function<Var<double>(const Var<double>&)>& loss) {
    Var<double> x = Var<double>::leaf(x0, true);
    backward(loss(x));
    const Tensor<double> analytic = x.grad();
    Tensor<double> probe = x0;
    // Entries far below the gradient's overall scale are compared against that scale.
    const double floor = std::max(1e-8, 1e-3 * max_abs(analytic));
    double worst = 0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double fd = central_difference(probe, i, [&] {
            NoGradGuard ng;
            return loss(Var<double>(probe)).item();
        });
        worst = std::max(worst, rel_error(analytic[i], fd, floor));
    }
    return worst;
}

}  // namespace tadsr::testing
