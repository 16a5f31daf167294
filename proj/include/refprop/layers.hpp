// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "refprop/ops.hpp"
#include "refprop/rng.hpp"
#include "refprop/tape.hpp"
#include "refprop/tensor.hpp"

namespace refprop {

// ---------------------------------------------------------------------------
// Parameter registry and initialization
// ---------------------------------------------------------------------------

/// Flat, ordered view of a model's learnable tensors and running statistics.
/// Registration order defines the canonical parameter order used by the
/// optimizer, gradient flattening and checkpoints.
template <typename T>
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor<T>>> params;
    std::vector<std::pair<std::string, BnStats<T>*>> stats;

    void add(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        params.emplace_back(name, std::move(t));
    }
    void add_stats(const std::string& name, BnStats<T>* s) { stats.emplace_back(name, s); }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params) n += t.numel();
        return n;
    }
};

/// Gaussian init, stddev by fan-in. Convolutions and linear maps use
/// sqrt(2/fan_in) (matched to the leaky-relu regime); recurrent and output
/// maps pass their own scale.
template <typename T>
void init_normal(Tensor<T>& t, Pcg32& rng, double stddev) {
    for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<T>(rng.next_normal() * stddev);
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
    Tensor<T> w, b;
    int stride = 1, pad = 0, dil = 1;

    Conv2dLayer() = default;
    Conv2dLayer(std::size_t ci, std::size_t co, std::size_t k, int stride_, int pad_, int dil_,
                bool bias, Pcg32& rng)
        : w({co, ci, k, k}), stride(stride_), pad(pad_), dil(dil_) {
        init_normal(w, rng, std::sqrt(2.0 / static_cast<double>(ci * k * k)));
        if (bias) b = Tensor<T>({co});
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
        return conv2d(tape, x, w, b, stride, pad, dil);
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".w", w);
        if (b.defined()) reg.add(prefix + ".b", b);
    }
};

template <typename T>
struct BnRecorder;

template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma, beta;
    BnStats<T> running;
    T eps = T(1e-5), momentum = T(0.9);

    BatchNormLayer() = default;
    explicit BatchNormLayer(std::size_t c) : gamma({c}, T(1)), beta({c}), running(c) {}

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, BnMode mode,
                      BnBatch<T>* batch_out = nullptr) {
        return batch_norm2d(tape, x, gamma, beta, &running, mode, eps, momentum, batch_out);
    }

    /// Normalizes with the current pass's own per-channel statistics in both
    /// modes, recording them for the deferred running update when training.
    /// Samples run one at a time here, so the statistics are per sample;
    /// normalizing the evaluation pass with the running aggregates instead
    /// would evaluate a different function from the one training optimized,
    /// and the aggregates (a momentum-0.9 trail of the last few samples) are
    /// too noisy to stand in for them.
    Tensor<T> forward_sample(Tape<T>& tape, const Tensor<T>& x, BnMode mode,
                             BnRecorder<T>* rec = nullptr) {
        if (mode == BnMode::train && rec != nullptr) {
            rec->entries.emplace_back(this, BnBatch<T>{});
            return batch_norm2d(tape, x, gamma, beta, &running, BnMode::train, eps, momentum,
                                &rec->entries.back().second);
        }
        BnBatch<T> scratch;
        return batch_norm2d(tape, x, gamma, beta, &running, BnMode::train, eps, momentum,
                            &scratch);
    }

    /// Normalizes with the running aggregates even during training, while
    /// still recording this pass's batch statistics for the deferred running
    /// update. Used where the signal is constant across the spatial extent
    /// (a per-channel scale applied to the whole map): per-sample statistics
    /// would divide that scale right back out, leaving only its sign and a
    /// zero gradient for the layer that produced it.
    Tensor<T> forward_frozen(Tape<T>& tape, const Tensor<T>& x, BnMode mode,
                             BnRecorder<T>* rec = nullptr) {
        if (mode == BnMode::train && rec != nullptr)
            rec->entries.emplace_back(this, bn_batch_stats(x));
        return batch_norm2d(tape, x, gamma, beta, &running, BnMode::eval, eps, momentum,
                            static_cast<BnBatch<T>*>(nullptr));
    }

    void apply_batch(const BnBatch<T>& b) {
        for (std::size_t c = 0; c < running.mean.size(); ++c) {
            running.mean[c] = momentum * running.mean[c] + (T(1) - momentum) * b.mean[c];
            running.var[c] = momentum * running.var[c] + (T(1) - momentum) * b.var[c];
        }
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".gamma", gamma);
        reg.add(prefix + ".beta", beta);
        reg.add_stats(prefix + ".running", &running);
    }
};

/// Collects per-layer batch statistics during one forward pass so the caller
/// can apply running updates later, in a deterministic order.
template <typename T>
struct BnRecorder {
    std::vector<std::pair<BatchNormLayer<T>*, BnBatch<T>>> entries;
    void apply_all() {
        for (auto& [layer, batch] : entries) layer->apply_batch(batch);
    }
};

/// conv -> batch norm -> activation, the standard block. Pass
/// Activation::linear for a bare conv+norm.
template <typename T>
struct ConvBnAct {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;
    Activation act = Activation::leaky_relu;
    T slope = T(0.1);

    ConvBnAct() = default;
    ConvBnAct(std::size_t ci, std::size_t co, std::size_t k, int stride, int pad, int dil,
              Activation act_, T slope_, Pcg32& rng)
        : conv(ci, co, k, stride, pad, dil, /*bias=*/false, rng), bn(co), act(act_),
          slope(slope_) {}

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, BnMode mode,
                      BnRecorder<T>* rec = nullptr) {
        Tensor<T> y = conv.forward(tape, x);
        y = bn.forward_sample(tape, y, mode, rec);
        return activation(tape, act, y, slope);
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        conv.register_params(reg, prefix + ".conv");
        bn.register_params(reg, prefix + ".bn");
    }
};

/// y = x W (+ bias), weight stored (in, out).
template <typename T>
struct LinearLayer {
    Tensor<T> w, b;

    LinearLayer() = default;
    LinearLayer(std::size_t in, std::size_t out, bool bias, Pcg32& rng) : w({in, out}) {
        init_normal(w, rng, std::sqrt(1.0 / static_cast<double>(in)));
        if (bias) b = Tensor<T>({out});
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
        Tensor<T> y = matmul(tape, x, w);
        if (b.defined()) y = add(tape, y, b);
        return y;
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".w", w);
        if (b.defined()) reg.add(prefix + ".b", b);
    }
};

}  // namespace refprop
