// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "refprop/tape.hpp"
#include "refprop/tensor.hpp"

namespace refprop {

enum class Activation { linear, leaky_relu, sigmoid, tanh };

namespace detail {

inline bool check_finite_enabled() {
    static const bool v = [] {
        const char* e = std::getenv("REFPROP_CHECK_FINITE");
        return e && e[0] == '1';
    }();
    return v;
}

template <typename T>
inline void finite_guard(const char* op, const Tensor<T>& t) {
    if (!check_finite_enabled()) return;
    for (T x : t.values())
        if (!std::isfinite(static_cast<double>(x)))
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

template <typename T>
inline void require_rank(const char* op, const Tensor<T>& t, std::size_t r) {
    if (!t.defined() || t.rank() != r)
        shape_error(op, "expected rank-" + std::to_string(r) + " tensor, got " +
                            (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

template <typename T>
inline void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

/// a + b. Shapes must match, or b may be a rank-1 vector broadcast over a:
/// per-channel against a rank-3 (C,H,W) tensor, per-row against a rank-2
/// (R,C) matrix.
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    const bool channel = (a.rank() == 3 && b.rank() == 1 && b.dim(0) == a.dim(0));
    const bool rowwise = (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1));
    if (!channel && !rowwise) detail::require_same_shape("add", a, b);

    Tensor<T> out(a.shape());
    const std::size_t n = a.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    if (channel) {
        const std::size_t hw = a.dim(1) * a.dim(2);
        for (std::size_t c = 0; c < a.dim(0); ++c) {
            const T bc = pb[c];
            for (std::size_t i = 0; i < hw; ++i) po[c * hw + i] = pa[c * hw + i] + bc;
        }
    } else if (rowwise) {
        const std::size_t C = a.dim(1);
        for (std::size_t r = 0; r < a.dim(0); ++r)
            for (std::size_t c = 0; c < C; ++c) po[r * C + c] = pa[r * C + c] + pb[c];
    } else {
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    }
    detail::finite_guard("add", out);

    if (tape_should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        if (a.requires_grad()) tape.ensure_grad(a);
        if (b.requires_grad()) tape.ensure_grad(b);
        tape.record([&tape, a, b, out, channel, rowwise] {
            auto g = tape.grad_mut(out);
            if (a.requires_grad()) {
                auto ga = tape.grad_mut(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = tape.grad_mut(b);
                if (channel) {
                    const std::size_t hw = a.dim(1) * a.dim(2);
                    for (std::size_t c = 0; c < a.dim(0); ++c) {
                        T s = T(0);
                        for (std::size_t i = 0; i < hw; ++i) s += g[c * hw + i];
                        gb[c] += s;
                    }
                } else if (rowwise) {
                    const std::size_t C = a.dim(1);
                    for (std::size_t r = 0; r < a.dim(0); ++r)
                        for (std::size_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
            }
        });
    }
    return out;
}

/// Concatenation of two rank-1 tensors.
template <typename T>
Tensor<T> concat_vec(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank("concat_vec", a, 1);
    detail::require_rank("concat_vec", b, 1);
    const std::size_t na = a.numel(), nb = b.numel();
    Tensor<T> out({na + nb});
    std::copy(a.ptr(), a.ptr() + na, out.ptr());
    std::copy(b.ptr(), b.ptr() + nb, out.ptr() + na);
    if (tape_should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        if (a.requires_grad()) tape.ensure_grad(a);
        if (b.requires_grad()) tape.ensure_grad(b);
        tape.record([&tape, a, b, out, na, nb] {
            auto g = tape.grad_mut(out);
            if (a.requires_grad()) {
                auto ga = tape.grad_mut(a);
                for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = tape.grad_mut(b);
                for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
            }
        });
    }
    return out;
}

/// a - b, identical shapes.
template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a, b);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    detail::finite_guard("sub", out);
    if (tape_should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        if (a.requires_grad()) tape.ensure_grad(a);
        if (b.requires_grad()) tape.ensure_grad(b);
        tape.record([&tape, a, b, out] {
            auto g = tape.grad_mut(out);
            if (a.requires_grad()) {
                auto ga = tape.grad_mut(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = tape.grad_mut(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

/// a * b elementwise. Shapes must match, or b may be a rank-1 per-channel
/// vector scaling a rank-3 (C,H,W) tensor.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    const bool channel = (a.rank() == 3 && b.rank() == 1 && b.dim(0) == a.dim(0));
    if (!channel) detail::require_same_shape("mul", a, b);

    Tensor<T> out(a.shape());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    if (channel) {
        const std::size_t hw = a.dim(1) * a.dim(2);
        for (std::size_t c = 0; c < a.dim(0); ++c) {
            const T bc = pb[c];
            for (std::size_t i = 0; i < hw; ++i) po[c * hw + i] = pa[c * hw + i] * bc;
        }
    } else {
        for (std::size_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
    }
    detail::finite_guard("mul", out);

    if (tape_should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        if (a.requires_grad()) tape.ensure_grad(a);
        if (b.requires_grad()) tape.ensure_grad(b);
        tape.record([&tape, a, b, out, channel] {
            auto g = tape.grad_mut(out);
            if (channel) {
                const std::size_t hw = a.dim(1) * a.dim(2);
                if (a.requires_grad()) {
                    auto ga = tape.grad_mut(a);
                    for (std::size_t c = 0; c < a.dim(0); ++c) {
                        const T bc = b[c];
                        for (std::size_t i = 0; i < hw; ++i) ga[c * hw + i] += g[c * hw + i] * bc;
                    }
                }
                if (b.requires_grad()) {
                    auto gb = tape.grad_mut(b);
                    for (std::size_t c = 0; c < a.dim(0); ++c) {
                        T s = T(0);
                        for (std::size_t i = 0; i < hw; ++i) s += g[c * hw + i] * a[c * hw + i];
                        gb[c] += s;
                    }
                }
            } else {
                if (a.requires_grad()) {
                    auto ga = tape.grad_mut(a);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
                }
                if (b.requires_grad()) {
                    auto gb = tape.grad_mut(b);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
                }
            }
        });
    }
    return out;
}

/// s * x for a compile-time-known constant s.
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T s) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = s * x[i];
    detail::finite_guard("scale", out);
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, s] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
        });
    }
    return out;
}

/// 1 - x.
template <typename T>
Tensor<T> one_minus(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = T(1) - x[i];
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
        });
    }
    return out;
}

/// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
    T s = T(0);
    for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
    Tensor<T> out = Tensor<T>::scalar(s);
    detail::finite_guard("sum", out);
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out] {
            const T g = tape.grad_mut(out)[0];
            auto gx = tape.grad_mut(x);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Applies the given activation elementwise. The leaky slope applies only to
/// Activation::leaky_relu; its derivative at exactly 0 is the slope.
template <typename T>
Tensor<T> activation(Tape<T>& tape, Activation kind, const Tensor<T>& x, T slope = T(0.1)) {
    Tensor<T> out(x.shape());
    const std::size_t n = x.numel();
    switch (kind) {
        case Activation::linear:
            for (std::size_t i = 0; i < n; ++i) out[i] = x[i];
            break;
        case Activation::leaky_relu:
            for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : slope * x[i];
            break;
        case Activation::sigmoid:
            for (std::size_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
            break;
        case Activation::tanh:
            for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
            break;
    }
    detail::finite_guard("activation", out);
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, kind, slope] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            switch (kind) {
                case Activation::linear:
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                    break;
                case Activation::leaky_relu:
                    for (std::size_t i = 0; i < g.size(); ++i)
                        gx[i] += x[i] > T(0) ? g[i] : slope * g[i];
                    break;
                case Activation::sigmoid:
                    for (std::size_t i = 0; i < g.size(); ++i)
                        gx[i] += g[i] * out[i] * (T(1) - out[i]);
                    break;
                case Activation::tanh:
                    for (std::size_t i = 0; i < g.size(); ++i)
                        gx[i] += g[i] * (T(1) - out[i] * out[i]);
                    break;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& x, T slope = T(0.1)) {
    return activation(tape, Activation::leaky_relu, x, slope);
}
template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
    return activation(tape, Activation::sigmoid, x);
}
template <typename T>
Tensor<T> tanh_act(Tape<T>& tape, const Tensor<T>& x) {
    return activation(tape, Activation::tanh, x);
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// C = A(M,K) x B(K,N). For each output element, contributions accumulate in
/// ascending-k order.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    if (a.dim(1) != b.dim(0))
        detail::shape_error("matmul", "inner dims differ: " + shape_str(a.shape()) + " x " +
                                          shape_str(b.shape()));
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<T> out({M, N});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (std::size_t m = 0; m < M; ++m) {
        T* orow = po + m * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T amk = pa[m * K + k];
            const T* brow = pb + k * N;
            for (std::size_t n = 0; n < N; ++n) orow[n] += amk * brow[n];
        }
    }
    detail::finite_guard("matmul", out);

    if (tape_should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        if (a.requires_grad()) tape.ensure_grad(a);
        if (b.requires_grad()) tape.ensure_grad(b);
        tape.record([&tape, a, b, out, M, K, N] {
            auto g = tape.grad_mut(out);
            if (a.requires_grad()) {
                auto ga = tape.grad_mut(a);
                const T* pb2 = b.ptr();
                for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t k = 0; k < K; ++k) {
                        const T* brow = pb2 + k * N;
                        T s = T(0);
                        for (std::size_t n = 0; n < N; ++n) s += g[m * N + n] * brow[n];
                        ga[m * K + k] += s;
                    }
            }
            if (b.requires_grad()) {
                auto gb = tape.grad_mut(b);
                const T* pa2 = a.ptr();
                for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t k = 0; k < K; ++k) {
                        const T amk = pa2[m * K + k];
                        T* grow = gb.data() + k * N;
                        for (std::size_t n = 0; n < N; ++n) grow[n] += amk * g[m * N + n];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

/// Gathers conv patches. Layout 'KN': row k = (ci,ki,kj) holds the input value
/// for every output position n = (oh,ow). Layout 'NK' is the transpose.
template <typename T, bool KMajor>
void im2col(const T* x, std::size_t ci_n, std::size_t ih, std::size_t iw, std::size_t kh,
            std::size_t kw, int stride, int pad, int dil, std::size_t oh, std::size_t ow,
            T* col) {
    const std::size_t N = oh * ow;
    std::size_t k = 0;
    for (std::size_t ci = 0; ci < ci_n; ++ci)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj, ++k) {
                const T* xc = x + ci * ih * iw;
                std::size_t n = 0;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const long iy = static_cast<long>(oy) * stride - pad +
                                    static_cast<long>(ki) * dil;
                    for (std::size_t ox = 0; ox < ow; ++ox, ++n) {
                        const long ix = static_cast<long>(ox) * stride - pad +
                                        static_cast<long>(kj) * dil;
                        T v = T(0);
                        if (iy >= 0 && iy < static_cast<long>(ih) && ix >= 0 &&
                            ix < static_cast<long>(iw))
                            v = xc[static_cast<std::size_t>(iy) * iw + ix];
                        if constexpr (KMajor)
                            col[k * N + n] = v;
                        else
                            col[n * (ci_n * kh * kw) + k] = v;
                    }
                }
            }
}

template <typename T>
std::vector<T>& conv_scratch() {
    thread_local std::vector<T> buf;
    return buf;
}
template <typename T>
std::vector<T>& conv_scratch2() {
    thread_local std::vector<T> buf;
    return buf;
}

}  // namespace detail

/// 2-d convolution, x:(Ci,H,W), w:(Co,Ci,Kh,Kw), optional bias b:(Co).
/// Output spatial size: (H + 2p - d(K-1) - 1)/s + 1 per axis.
/// Per output element, the bias (or 0) seeds the accumulator and patch
/// contributions are added in ascending (ci,ki,kj) order.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int pad = 0, int dilation = 1) {
    detail::require_rank("conv2d", x, 3);
    detail::require_rank("conv2d", w, 4);
    if (w.dim(1) != x.dim(0))
        detail::shape_error("conv2d", "input channels " + std::to_string(x.dim(0)) +
                                          " vs weight " + std::to_string(w.dim(1)));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0)))
        detail::shape_error("conv2d", "bias must be rank-1 of size Co");
    if (stride < 1 || dilation < 1 || pad < 0)
        detail::shape_error("conv2d", "stride/dilation must be >=1 and pad >=0");

    const std::size_t Ci = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t Co = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
    const long oh_l = (static_cast<long>(H) + 2 * pad - dilation * (static_cast<long>(Kh) - 1) - 1) / stride + 1;
    const long ow_l = (static_cast<long>(W) + 2 * pad - dilation * (static_cast<long>(Kw) - 1) - 1) / stride + 1;
    if (oh_l < 1 || ow_l < 1) detail::shape_error("conv2d", "kernel larger than padded input");
    const std::size_t Oh = static_cast<std::size_t>(oh_l), Ow = static_cast<std::size_t>(ow_l);
    const std::size_t K = Ci * Kh * Kw, N = Oh * Ow;

    auto& col = detail::conv_scratch<T>();
    col.assign(K * N, T(0));
    detail::im2col<T, true>(x.ptr(), Ci, H, W, Kh, Kw, stride, pad, dilation, Oh, Ow, col.data());

    Tensor<T> out({Co, Oh, Ow});
    T* po = out.ptr();
    const T* pw = w.ptr();
    for (std::size_t co = 0; co < Co; ++co) {
        T* orow = po + co * N;
        if (b.defined()) {
            const T bias = b[co];
            for (std::size_t n = 0; n < N; ++n) orow[n] = bias;
        }
        const T* wrow = pw + co * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T wv = wrow[k];
            const T* crow = col.data() + k * N;
            for (std::size_t n = 0; n < N; ++n) orow[n] += wv * crow[n];
        }
    }
    detail::finite_guard("conv2d", out);

    if (tape_should_record(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        if (x.requires_grad()) tape.ensure_grad(x);
        if (w.requires_grad()) tape.ensure_grad(w);
        if (b.defined() && b.requires_grad()) tape.ensure_grad(b);
        tape.record([&tape, x, w, b, out, stride, pad, dilation, Ci, H, W, Co, Kh, Kw, Oh, Ow, K,
                     N] {
            auto g = tape.grad_mut(out);
            const bool need_dx = x.requires_grad();
            const bool need_dw = w.requires_grad();
            // Patches in n-major layout: row n holds all K patch values.
            auto& col2 = detail::conv_scratch<T>();
            if (need_dx || need_dw) {
                col2.assign(N * K, T(0));
                detail::im2col<T, false>(x.ptr(), Ci, H, W, Kh, Kw, stride, pad, dilation, Oh, Ow,
                                         col2.data());
            }
            if (need_dw) {
                auto gw = tape.grad_mut(w);
                for (std::size_t co = 0; co < Co; ++co) {
                    T* gwrow = gw.data() + co * K;
                    const T* grow = g.data() + co * N;
                    for (std::size_t n = 0; n < N; ++n) {
                        const T gv = grow[n];
                        const T* crow = col2.data() + n * K;
                        for (std::size_t k = 0; k < K; ++k) gwrow[k] += gv * crow[k];
                    }
                }
            }
            if (b.defined() && b.requires_grad()) {
                auto gb = tape.grad_mut(b);
                for (std::size_t co = 0; co < Co; ++co) {
                    T s = T(0);
                    const T* grow = g.data() + co * N;
                    for (std::size_t n = 0; n < N; ++n) s += grow[n];
                    gb[co] += s;
                }
            }
            if (need_dx) {
                auto gx = tape.grad_mut(x);
                auto& dcol = detail::conv_scratch2<T>();
                dcol.assign(N * K, T(0));
                const T* pw2 = w.ptr();
                for (std::size_t n = 0; n < N; ++n) {
                    T* drow = dcol.data() + n * K;
                    for (std::size_t co = 0; co < Co; ++co) {
                        const T gv = g[co * N + n];
                        const T* wrow = pw2 + co * K;
                        for (std::size_t k = 0; k < K; ++k) drow[k] += gv * wrow[k];
                    }
                }
                // col2im scatter, fixed (n,k) order.
                std::size_t k = 0;
                for (std::size_t ci = 0; ci < Ci; ++ci)
                    for (std::size_t ki = 0; ki < Kh; ++ki)
                        for (std::size_t kj = 0; kj < Kw; ++kj, ++k) {
                            T* xc = gx.data() + ci * H * W;
                            std::size_t n = 0;
                            for (std::size_t oy = 0; oy < Oh; ++oy) {
                                const long iy = static_cast<long>(oy) * stride - pad +
                                                static_cast<long>(ki) * dilation;
                                if (iy < 0 || iy >= static_cast<long>(H)) {
                                    n += Ow;
                                    continue;
                                }
                                for (std::size_t ox = 0; ox < Ow; ++ox, ++n) {
                                    const long ix = static_cast<long>(ox) * stride - pad +
                                                    static_cast<long>(kj) * dilation;
                                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                    xc[static_cast<std::size_t>(iy) * W + ix] +=
                                        dcol[n * K + k];
                                }
                            }
                        }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization (2-d feature maps)
// ---------------------------------------------------------------------------

enum class BnMode { train, eval };

/// Running statistics; variance is stored biased (divided by the count).
template <typename T>
struct BnStats {
    std::vector<T> mean, var;
    explicit BnStats(std::size_t c = 0) : mean(c, T(0)), var(c, T(1)) {}
};

/// One forward pass's batch statistics, for callers that defer the running
/// update (the trainer applies worker updates in sample order).
template <typename T>
struct BnBatch {
    std::vector<T> mean, var;
};

/// Per-channel mean and biased variance of x:(C,H,W), outside the tape.
template <typename T>
BnBatch<T> bn_batch_stats(const Tensor<T>& x) {
    detail::require_rank("bn_batch_stats", x, 3);
    const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
    BnBatch<T> b;
    b.mean.resize(C);
    b.var.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
        T m = T(0);
        for (std::size_t i = 0; i < HW; ++i) m += x[c * HW + i];
        m /= static_cast<T>(HW);
        T v = T(0);
        for (std::size_t i = 0; i < HW; ++i) {
            const T d = x[c * HW + i] - m;
            v += d * d;
        }
        b.mean[c] = m;
        b.var[c] = v / static_cast<T>(HW);
    }
    return b;
}

/// Normalizes x:(C,H,W) per channel over the spatial extent.
///   train: uses this tensor's own statistics; when batch_out is given the
///          running update is left to the caller, otherwise running is
///          updated in place as r = momentum*r + (1-momentum)*batch.
///   eval:  normalizes with the running statistics.
template <typename T>
Tensor<T> batch_norm2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, BnStats<T>* running, BnMode mode,
                       T eps = T(1e-5), T momentum = T(0.9), BnBatch<T>* batch_out = nullptr) {
    detail::require_rank("batch_norm2d", x, 3);
    detail::require_rank("batch_norm2d", gamma, 1);
    detail::require_rank("batch_norm2d", beta, 1);
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), HW = H * W;
    if (gamma.dim(0) != C || beta.dim(0) != C)
        detail::shape_error("batch_norm2d", "gamma/beta size must equal channel count");
    if (mode == BnMode::eval && !running)
        detail::shape_error("batch_norm2d", "eval mode requires running statistics");

    std::vector<T> mean(C), invstd(C);
    if (mode == BnMode::train) {
        std::vector<T> var(C);
        for (std::size_t c = 0; c < C; ++c) {
            const T* xc = x.ptr() + c * HW;
            T m = T(0);
            for (std::size_t i = 0; i < HW; ++i) m += xc[i];
            m /= static_cast<T>(HW);
            T v = T(0);
            for (std::size_t i = 0; i < HW; ++i) {
                const T d = xc[i] - m;
                v += d * d;
            }
            v /= static_cast<T>(HW);
            mean[c] = m;
            var[c] = v;
            invstd[c] = T(1) / std::sqrt(v + eps);
        }
        if (batch_out) {
            batch_out->mean = mean;
            batch_out->var = var;
        } else if (running) {
            for (std::size_t c = 0; c < C; ++c) {
                running->mean[c] = momentum * running->mean[c] + (T(1) - momentum) * mean[c];
                running->var[c] = momentum * running->var[c] + (T(1) - momentum) * var[c];
            }
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running->mean[c];
            invstd[c] = T(1) / std::sqrt(running->var[c] + eps);
        }
    }

    Tensor<T> out(x.shape());
    std::vector<T> xhat(C * HW);
    for (std::size_t c = 0; c < C; ++c) {
        const T m = mean[c], is = invstd[c], gm = gamma[c], bt = beta[c];
        const T* xc = x.ptr() + c * HW;
        T* oc = out.ptr() + c * HW;
        T* hc = xhat.data() + c * HW;
        for (std::size_t i = 0; i < HW; ++i) {
            const T h = (xc[i] - m) * is;
            hc[i] = h;
            oc[i] = gm * h + bt;
        }
    }
    detail::finite_guard("batch_norm2d", out);

    if (tape_should_record(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        if (x.requires_grad()) tape.ensure_grad(x);
        if (gamma.requires_grad()) tape.ensure_grad(gamma);
        if (beta.requires_grad()) tape.ensure_grad(beta);
        tape.record([&tape, x, gamma, beta, out, mode, C, HW, xhat = std::move(xhat),
                     invstd = std::move(invstd)] {
            auto g = tape.grad_mut(out);
            if (gamma.requires_grad()) {
                auto gg = tape.grad_mut(gamma);
                for (std::size_t c = 0; c < C; ++c) {
                    T s = T(0);
                    for (std::size_t i = 0; i < HW; ++i) s += g[c * HW + i] * xhat[c * HW + i];
                    gg[c] += s;
                }
            }
            if (beta.requires_grad()) {
                auto gb = tape.grad_mut(beta);
                for (std::size_t c = 0; c < C; ++c) {
                    T s = T(0);
                    for (std::size_t i = 0; i < HW; ++i) s += g[c * HW + i];
                    gb[c] += s;
                }
            }
            if (x.requires_grad()) {
                auto gx = tape.grad_mut(x);
                if (mode == BnMode::train) {
                    // dx = gamma*invstd*(g - mean(g) - xhat*mean(g.xhat))
                    for (std::size_t c = 0; c < C; ++c) {
                        T sg = T(0), sgh = T(0);
                        const T* gc = g.data() + c * HW;
                        const T* hc = xhat.data() + c * HW;
                        for (std::size_t i = 0; i < HW; ++i) {
                            sg += gc[i];
                            sgh += gc[i] * hc[i];
                        }
                        const T mg = sg / static_cast<T>(HW);
                        const T mgh = sgh / static_cast<T>(HW);
                        const T k = gamma[c] * invstd[c];
                        T* gxc = gx.data() + c * HW;
                        for (std::size_t i = 0; i < HW; ++i)
                            gxc[i] += k * (gc[i] - mg - hc[i] * mgh);
                    }
                } else {
                    for (std::size_t c = 0; c < C; ++c) {
                        const T k = gamma[c] * invstd[c];
                        for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] += k * g[c * HW + i];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Bilinear resize of x:(C,H,W) to (C,out_h,out_w), align-corners convention:
/// source coord = dst * (in-1)/(out-1), and 0 when the output axis has size 1.
template <typename T>
Tensor<T> bilinear_resize(Tape<T>& tape, const Tensor<T>& x, std::size_t out_h,
                          std::size_t out_w) {
    detail::require_rank("bilinear_resize", x, 3);
    if (out_h == 0 || out_w == 0) detail::shape_error("bilinear_resize", "zero output size");
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);

    struct Tap {
        std::size_t lo, hi;
        T f;
    };
    auto make_taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> taps(out);
        for (std::size_t o = 0; o < out; ++o) {
            double s = (out == 1 || in == 1)
                           ? 0.0
                           : static_cast<double>(o) * static_cast<double>(in - 1) /
                                 static_cast<double>(out - 1);
            std::size_t lo = static_cast<std::size_t>(s);
            if (lo >= in - 1 && in > 1) lo = in - 2;
            if (in == 1) lo = 0;
            double f = s - static_cast<double>(lo);
            taps[o] = {lo, std::min(lo + 1, in - 1), static_cast<T>(f)};
        }
        return taps;
    };
    const auto ty = make_taps(H, out_h);
    const auto tx = make_taps(W, out_w);

    Tensor<T> out({C, out_h, out_w});
    for (std::size_t c = 0; c < C; ++c) {
        const T* xc = x.ptr() + c * H * W;
        T* oc = out.ptr() + c * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const Tap& b = tx[ox];
                const T v00 = xc[a.lo * W + b.lo], v01 = xc[a.lo * W + b.hi];
                const T v10 = xc[a.hi * W + b.lo], v11 = xc[a.hi * W + b.hi];
                oc[oy * out_w + ox] = (T(1) - a.f) * ((T(1) - b.f) * v00 + b.f * v01) +
                                      a.f * ((T(1) - b.f) * v10 + b.f * v11);
            }
        }
    }
    detail::finite_guard("bilinear_resize", out);

    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, ty, tx, C, H, W, out_h, out_w] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t c = 0; c < C; ++c) {
                T* gxc = gx.data() + c * H * W;
                const T* gc = g.data() + c * out_h * out_w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto& a = ty[oy];
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto& b = tx[ox];
                        const T gv = gc[oy * out_w + ox];
                        gxc[a.lo * W + b.lo] += (T(1) - a.f) * (T(1) - b.f) * gv;
                        gxc[a.lo * W + b.hi] += (T(1) - a.f) * b.f * gv;
                        gxc[a.hi * W + b.lo] += a.f * (T(1) - b.f) * gv;
                        gxc[a.hi * W + b.hi] += a.f * b.f * gv;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions over logits
// ---------------------------------------------------------------------------

/// Softmax over a rank-1 tensor, max-subtracted for stability.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
    detail::require_rank("softmax", x, 1);
    const std::size_t n = x.numel();
    if (n == 0) detail::shape_error("softmax", "empty input");
    T mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    Tensor<T> out(x.shape());
    T z = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(x[i] - mx);
        z += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= z;
    detail::finite_guard("softmax", out);
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, n] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            T dot = T(0);
            for (std::size_t i = 0; i < n; ++i) dot += g[i] * out[i];
            for (std::size_t i = 0; i < n; ++i) gx[i] += out[i] * (g[i] - dot);
        });
    }
    return out;
}

/// Mean binary cross-entropy on logits, numerically stable:
///   max(z,0) - z*t + log(1 + exp(-|z|)), averaged over all elements.
/// Targets must lie in [0,1]; they are constants (no gradient).
template <typename T>
Tensor<T> bce_with_logits(Tape<T>& tape, const Tensor<T>& logits, const Tensor<T>& targets) {
    detail::require_same_shape("bce_with_logits", logits, targets);
    const std::size_t n = logits.numel();
    if (n == 0) detail::shape_error("bce_with_logits", "empty input");
    for (std::size_t i = 0; i < n; ++i)
        if (!(targets[i] >= T(0) && targets[i] <= T(1)))
            detail::shape_error("bce_with_logits", "target outside [0,1]");
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T z = logits[i], t = targets[i];
        acc += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
    detail::finite_guard("bce_with_logits", out);
    if (tape_should_record(tape, {&logits})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(logits);
        tape.record([&tape, logits, targets, out, n] {
            const T g = tape.grad_mut(out)[0];
            auto gl = tape.grad_mut(logits);
            const T inv_n = T(1) / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const T p = T(1) / (T(1) + std::exp(-logits[i]));
                gl[i] += g * (p - targets[i]) * inv_n;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape and gather ops
// ---------------------------------------------------------------------------

/// (C,S,S) feature map to (S*S, C) row matrix; row r = cell (r/S, r%S).
template <typename T>
Tensor<T> chw_to_rows(Tape<T>& tape, const Tensor<T>& x) {
    detail::require_rank("chw_to_rows", x, 3);
    const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
    Tensor<T> out({HW, C});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) out[i * C + c] = x[c * HW + i];
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, C, HW] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] += g[i * C + c];
        });
    }
    return out;
}

/// Inverse of chw_to_rows: (H*W, C) rows to a (C,H,W) map.
template <typename T>
Tensor<T> rows_to_chw(Tape<T>& tape, const Tensor<T>& x, std::size_t H, std::size_t W) {
    detail::require_rank("rows_to_chw", x, 2);
    if (x.dim(0) != H * W) detail::shape_error("rows_to_chw", "row count must equal H*W");
    const std::size_t C = x.dim(1), HW = H * W;
    Tensor<T> out({C, H, W});
    for (std::size_t i = 0; i < HW; ++i)
        for (std::size_t c = 0; c < C; ++c) out[c * HW + i] = x[i * C + c];
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, C, HW] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t i = 0; i < HW; ++i)
                for (std::size_t c = 0; c < C; ++c) gx[i * C + c] += g[c * HW + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose2d(Tape<T>& tape, const Tensor<T>& x) {
    detail::require_rank("transpose2d", x, 2);
    const std::size_t M = x.dim(0), N = x.dim(1);
    Tensor<T> out({N, M});
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n) out[n * M + m] = x[m * N + n];
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, M, N] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t m = 0; m < M; ++m)
                for (std::size_t n = 0; n < N; ++n) gx[m * N + n] += g[n * M + m];
        });
    }
    return out;
}

/// Concatenates rank-3 tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) detail::shape_error("concat_channels", "no inputs");
    const std::size_t H = xs[0].dim(1), W = xs[0].dim(2);
    std::size_t C = 0;
    for (const auto& t : xs) {
        detail::require_rank("concat_channels", t, 3);
        if (t.dim(1) != H || t.dim(2) != W)
            detail::shape_error("concat_channels", "spatial dims differ");
        C += t.dim(0);
    }
    Tensor<T> out({C, H, W});
    std::size_t off = 0;
    for (const auto& t : xs) {
        std::copy(t.ptr(), t.ptr() + t.numel(), out.ptr() + off);
        off += t.numel();
    }
    bool any = false;
    for (const auto& t : xs) any = any || t.requires_grad();
    if (tape.enabled() && any) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        for (const auto& t : xs)
            if (t.requires_grad()) tape.ensure_grad(t);
        tape.record([&tape, xs, out] {
            auto g = tape.grad_mut(out);
            std::size_t off2 = 0;
            for (const auto& t : xs) {
                if (t.requires_grad()) {
                    auto gt = tape.grad_mut(t);
                    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[off2 + i];
                }
                off2 += t.numel();
            }
        });
    }
    return out;
}

/// Extracts channel c of x:(C,H,W) as an (H,W) tensor.
template <typename T>
Tensor<T> select_channel(Tape<T>& tape, const Tensor<T>& x, std::size_t c) {
    detail::require_rank("select_channel", x, 3);
    if (c >= x.dim(0)) detail::shape_error("select_channel", "channel index out of range");
    const std::size_t HW = x.dim(1) * x.dim(2);
    Tensor<T> out({x.dim(1), x.dim(2)});
    std::copy(x.ptr() + c * HW, x.ptr() + (c + 1) * HW, out.ptr());
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, c, HW] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] += g[i];
        });
    }
    return out;
}

/// Extracts row r of x:(R,C) as a rank-1 tensor.
template <typename T>
Tensor<T> select_row(Tape<T>& tape, const Tensor<T>& x, std::size_t r) {
    detail::require_rank("select_row", x, 2);
    if (r >= x.dim(0)) detail::shape_error("select_row", "row index out of range");
    const std::size_t C = x.dim(1);
    Tensor<T> out({C});
    std::copy(x.ptr() + r * C, x.ptr() + (r + 1) * C, out.ptr());
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, r, C] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t i = 0; i < C; ++i) gx[r * C + i] += g[i];
        });
    }
    return out;
}

/// Stacks rank-1 tensors of equal size into a (rows, C) matrix.
template <typename T>
Tensor<T> stack_rows(Tape<T>& tape, const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) detail::shape_error("stack_rows", "no inputs");
    const std::size_t C = xs[0].numel();
    for (const auto& t : xs) {
        detail::require_rank("stack_rows", t, 1);
        if (t.numel() != C) detail::shape_error("stack_rows", "row sizes differ");
    }
    Tensor<T> out({xs.size(), C});
    for (std::size_t r = 0; r < xs.size(); ++r)
        std::copy(xs[r].ptr(), xs[r].ptr() + C, out.ptr() + r * C);
    bool any = false;
    for (const auto& t : xs) any = any || t.requires_grad();
    if (tape.enabled() && any) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        for (const auto& t : xs)
            if (t.requires_grad()) tape.ensure_grad(t);
        tape.record([&tape, xs, out, C] {
            auto g = tape.grad_mut(out);
            for (std::size_t r = 0; r < xs.size(); ++r) {
                if (!xs[r].requires_grad()) continue;
                auto gt = tape.grad_mut(xs[r]);
                for (std::size_t i = 0; i < C; ++i) gt[i] += g[r * C + i];
            }
        });
    }
    return out;
}

/// Spatial mean of x:(C,H,W) as (C,1,1).
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
    detail::require_rank("global_avg_pool", x, 3);
    const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
    Tensor<T> out({C, 1, 1});
    for (std::size_t c = 0; c < C; ++c) {
        T s = T(0);
        for (std::size_t i = 0; i < HW; ++i) s += x[c * HW + i];
        out[c] = s / static_cast<T>(HW);
    }
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, C, HW] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            const T inv = T(1) / static_cast<T>(HW);
            for (std::size_t c = 0; c < C; ++c) {
                const T gv = g[c] * inv;
                for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] += gv;
            }
        });
    }
    return out;
}

/// Tiles x:(C,1,1) to (C,H,W).
template <typename T>
Tensor<T> broadcast_spatial(Tape<T>& tape, const Tensor<T>& x, std::size_t H, std::size_t W) {
    detail::require_rank("broadcast_spatial", x, 3);
    if (x.dim(1) != 1 || x.dim(2) != 1)
        detail::shape_error("broadcast_spatial", "input spatial dims must be 1x1");
    const std::size_t C = x.dim(0), HW = H * W;
    Tensor<T> out({C, H, W});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] = x[c];
    if (tape_should_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(x);
        tape.record([&tape, x, out, C, HW] {
            auto g = tape.grad_mut(out);
            auto gx = tape.grad_mut(x);
            for (std::size_t c = 0; c < C; ++c) {
                T s = T(0);
                for (std::size_t i = 0; i < HW; ++i) s += g[c * HW + i];
                gx[c] += s;
            }
        });
    }
    return out;
}

/// Gathers rows of table:(V,C) by token id; ids are constants.
template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, const std::vector<int>& ids) {
    detail::require_rank("embedding_lookup", table, 2);
    if (ids.empty()) detail::shape_error("embedding_lookup", "empty id list");
    const std::size_t V = table.dim(0), C = table.dim(1);
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= V)
            detail::shape_error("embedding_lookup", "token id out of range");
    Tensor<T> out({ids.size(), C});
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy(table.ptr() + static_cast<std::size_t>(ids[r]) * C,
                  table.ptr() + (static_cast<std::size_t>(ids[r]) + 1) * C, out.ptr() + r * C);
    if (tape_should_record(tape, {&table})) {
        out.set_requires_grad(true);
        tape.ensure_grad(out);
        tape.ensure_grad(table);
        tape.record([&tape, table, out, ids, C] {
            auto g = tape.grad_mut(out);
            auto gt = tape.grad_mut(table);
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t i = 0; i < C; ++i)
                    gt[static_cast<std::size_t>(ids[r]) * C + i] += g[r * C + i];
        });
    }
    return out;
}

}  // namespace refprop
