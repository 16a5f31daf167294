// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "refprop/tape.hpp"
#include "refprop/tensor.hpp"

namespace refprop {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/**
 * Central-difference check of reverse-mode gradients.
 *
 * f maps (tape, x) to a scalar tensor and must be a pure function of x's
 * values (any other tensors it captures are treated as constants). The
 * analytic gradient comes from one recorded forward + backward; the numeric
 * gradient perturbs one element at a time on a disabled tape.
 *
 * Relative error per element: |a - n| / max(|a|, |n|, 1e-8).
 * Intended for T = double; float loses too much precision for tight bounds.
 */
template <typename T, typename F>
GradCheckReport grad_check(F&& f, Tensor<T> x, T eps = T(1e-5)) {
    x.set_requires_grad(true);
    std::vector<T> analytic(x.numel(), T(0));
    {
        Tape<T> tape;
        Tensor<T> loss = f(tape, x);
        tape.backward(loss);
        auto g = tape.grad(x);
        std::copy(g.begin(), g.end(), analytic.begin());
    }

    GradCheckReport rep;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const T saved = x[i];
        Tape<T> quiet;
        quiet.set_enabled(false);
        x[i] = saved + eps;
        const double fp = static_cast<double>(f(quiet, x)[0]);
        x[i] = saved - eps;
        const double fm = static_cast<double>(f(quiet, x)[0]);
        x[i] = saved;
        const double num = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double ana = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
        const double rel = std::abs(ana - num) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
            rep.analytic = ana;
            rep.numeric = num;
        }
    }
    return rep;
}

}  // namespace refprop
