// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "refprop/layers.hpp"
#include "refprop/tensor.hpp"

namespace refprop {

/// Flat per-parameter gradient buffers aligned with a ParamRegistry's
/// parameter list. The trainer accumulates per-sample tape gradients here in
/// a fixed order, so the result never depends on thread count.
template <typename T>
struct GradBuffers {
    std::vector<std::vector<T>> g;

    explicit GradBuffers(const ParamRegistry<T>& reg) {
        g.reserve(reg.params.size());
        for (const auto& [_, t] : reg.params) g.emplace_back(t.numel(), T(0));
    }

    void zero() {
        for (auto& v : g)
            for (auto& x : v) x = T(0);
    }

    void scale_all(T s) {
        for (auto& v : g)
            for (auto& x : v) x *= s;
    }

    /// Global L2 norm across every buffer.
    T global_norm() const {
        T acc = T(0);
        for (const auto& v : g)
            for (T x : v) acc += x * x;
        return std::sqrt(acc);
    }

    /// Scales gradients down so the global norm is at most max_norm.
    void clip_global_norm(T max_norm) {
        const T n = global_norm();
        if (n > max_norm) scale_all(max_norm / n);
    }
};

/// Adam with bias correction. Moments are laid out exactly like the
/// registry's parameters.
template <typename T>
struct AdamOptimizer {
    T lr = T(0.001);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    long step_count = 0;
    std::vector<std::vector<T>> m, v;

    AdamOptimizer() = default;
    explicit AdamOptimizer(const ParamRegistry<T>& reg, T lr_ = T(0.001)) : lr(lr_) {
        m.reserve(reg.params.size());
        v.reserve(reg.params.size());
        for (const auto& [_, t] : reg.params) {
            m.emplace_back(t.numel(), T(0));
            v.emplace_back(t.numel(), T(0));
        }
    }

    void step(ParamRegistry<T>& reg, const GradBuffers<T>& grads) {
        if (grads.g.size() != reg.params.size() || m.size() != reg.params.size())
            throw std::invalid_argument("AdamOptimizer: registry/gradient shape mismatch");
        ++step_count;
        const T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_count));
        const T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_count));
        for (std::size_t p = 0; p < reg.params.size(); ++p) {
            Tensor<T>& w = reg.params[p].second;
            const auto& gp = grads.g[p];
            if (gp.size() != w.numel())
                throw std::invalid_argument("AdamOptimizer: parameter size changed");
            auto& mp = m[p];
            auto& vp = v[p];
            for (std::size_t i = 0; i < gp.size(); ++i) {
                mp[i] = beta1 * mp[i] + (T(1) - beta1) * gp[i];
                vp[i] = beta2 * vp[i] + (T(1) - beta2) * gp[i] * gp[i];
                const T mhat = mp[i] / bc1;
                const T vhat = vp[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

}  // namespace refprop
