// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "refprop/gridmap.hpp"
#include "refprop/layers.hpp"
#include "refprop/ops.hpp"

namespace refprop {

// ---------------------------------------------------------------------------
// Identification branch: F_ide -> instance-specific feature grid
// ---------------------------------------------------------------------------

/// Resizes the identification input to the S x S grid, then four 3x3 convs
/// (each + BN + leaky). Output position (i,j) is grid cell (i,j).
template <typename T>
struct IdentificationBranch {
    int S = 0;
    std::vector<ConvBnAct<T>> convs;

    IdentificationBranch() = default;
    IdentificationBranch(int S_, int c_in, int c_out, Pcg32& rng) : S(S_) {
        const auto ci = static_cast<std::size_t>(c_in);
        const auto co = static_cast<std::size_t>(c_out);
        convs.emplace_back(ci, co, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        for (int k = 1; k < 4; ++k)
            convs.emplace_back(co, co, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& f_ide, BnMode mode,
                      BnRecorder<T>* rec = nullptr) {
        Tensor<T> x = bilinear_resize(tape, f_ide, static_cast<std::size_t>(S),
                                      static_cast<std::size_t>(S));
        for (auto& c : convs) x = c.forward(tape, x, mode, rec);
        return x;
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        for (std::size_t k = 0; k < convs.size(); ++k)
            convs[k].register_params(reg, prefix + ".conv" + std::to_string(k));
    }
};

// ---------------------------------------------------------------------------
// Segmentation branch: F_seg -> one coarse mask logit map per grid cell
// ---------------------------------------------------------------------------

/// Four 3x3 convs, a multi-rate block (parallel 3x3 convs at dilations 1/2/4
/// plus a pooled branch broadcast back), a 1x1 merge, and a 1x1 head emitting
/// S*S mask channels as raw logits. head_channels overrides the channel
/// count for the single-mask variant.
template <typename T>
struct SegmentationBranch {
    int S = 0;
    std::vector<ConvBnAct<T>> convs;
    ConvBnAct<T> rate1, rate2, rate4;
    Conv2dLayer<T> pool_proj;  // 1x1 on the pooled vector, leaky after, no BN
    Conv2dLayer<T> merge;      // 1x1 over the concatenation, leaky after
    Conv2dLayer<T> head;

    SegmentationBranch() = default;
    SegmentationBranch(int S_, int c_in, int c_mid, Pcg32& rng, int head_channels = -1) : S(S_) {
        const auto ci = static_cast<std::size_t>(c_in);
        const auto cm = static_cast<std::size_t>(c_mid);
        const auto co = head_channels > 0 ? static_cast<std::size_t>(head_channels)
                                          : static_cast<std::size_t>(S_) * S_;
        convs.emplace_back(ci, cm, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        for (int k = 1; k < 4; ++k)
            convs.emplace_back(cm, cm, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        rate1 = ConvBnAct<T>(cm, cm, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        rate2 = ConvBnAct<T>(cm, cm, 3, 1, 2, 2, Activation::leaky_relu, T(0.1), rng);
        rate4 = ConvBnAct<T>(cm, cm, 3, 1, 4, 4, Activation::leaky_relu, T(0.1), rng);
        pool_proj = Conv2dLayer<T>(cm, cm, 1, 1, 0, 1, /*bias=*/true, rng);
        merge = Conv2dLayer<T>(cm * 4, cm, 1, 1, 0, 1, /*bias=*/true, rng);
        head = Conv2dLayer<T>(cm, co, 1, 1, 0, 1, /*bias=*/true, rng);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& f_seg, BnMode mode,
                      BnRecorder<T>* rec = nullptr) {
        Tensor<T> x = f_seg;
        for (auto& c : convs) x = c.forward(tape, x, mode, rec);
        Tensor<T> b1 = rate1.forward(tape, x, mode, rec);
        Tensor<T> b2 = rate2.forward(tape, x, mode, rec);
        Tensor<T> b4 = rate4.forward(tape, x, mode, rec);
        Tensor<T> bg = leaky_relu(tape, pool_proj.forward(tape, global_avg_pool(tape, x)), T(0.1));
        bg = broadcast_spatial(tape, bg, x.dim(1), x.dim(2));
        Tensor<T> cat = concat_channels(tape, {b1, b2, b4, bg});
        // The pooled branch is one value per channel across the whole map; a
        // norm here would subtract that constant straight back out of the
        // merge output and leave pool_proj without a gradient, so the merge
        // stays a bare conv.
        Tensor<T> m = leaky_relu(tape, merge.forward(tape, cat), T(0.1));
        return head.forward(tape, m);  // logits, no activation
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        for (std::size_t k = 0; k < convs.size(); ++k)
            convs[k].register_params(reg, prefix + ".conv" + std::to_string(k));
        rate1.register_params(reg, prefix + ".rate1");
        rate2.register_params(reg, prefix + ".rate2");
        rate4.register_params(reg, prefix + ".rate4");
        pool_proj.register_params(reg, prefix + ".pool_proj");
        merge.register_params(reg, prefix + ".merge");
        head.register_params(reg, prefix + ".head");
    }
};

// ---------------------------------------------------------------------------
// Channel lookup
// ---------------------------------------------------------------------------

/// Row-major argmax over an (S,S) or (1,S,S) logit map; ties resolve to the
/// smallest i, then smallest j, giving a total deterministic order.
template <typename T>
std::pair<int, int> argmax_grid(const Tensor<T>& id_map) {
    std::size_t S2 = id_map.numel();
    if (id_map.rank() == 3 && id_map.dim(0) != 1)
        throw std::invalid_argument("argmax_grid: logit map must have one channel");
    const std::size_t S = id_map.rank() == 3 ? id_map.dim(1) : id_map.dim(0);
    if (S * S != S2) throw std::invalid_argument("argmax_grid: map must be square");
    const T* p = id_map.ptr();
    std::size_t best = 0;
    for (std::size_t k = 1; k < S2; ++k)
        if (p[k] > p[best]) best = k;
    return {static_cast<int>(best / S), static_cast<int>(best % S)};
}

/// Picks the mask channel that the identifying map's argmax grid owns.
/// Differentiable through the selected channel only; the argmax itself is a
/// hard, gradient-free choice.
template <typename T>
Tensor<T> channel_lookup(Tape<T>& tape, const Tensor<T>& mask_stack, const Tensor<T>& id_map) {
    const auto [i, j] = argmax_grid(id_map);
    const std::size_t S = id_map.rank() == 3 ? id_map.dim(1) : id_map.dim(0);
    const int c = channel_index(i, j, static_cast<int>(S));
    if (mask_stack.rank() != 3 || mask_stack.dim(0) != S * S)
        throw std::invalid_argument("channel_lookup: mask stack must have S*S channels");
    return select_channel(tape, mask_stack, static_cast<std::size_t>(c));
}

// ---------------------------------------------------------------------------
// Assembled instance extraction
// ---------------------------------------------------------------------------

template <typename T>
struct InstanceExtraction {
    IdentificationBranch<T> ident;
    SegmentationBranch<T> seg;

    InstanceExtraction() = default;
    InstanceExtraction(int S, int c_f, int c_isf, Pcg32& rng)
        : ident(S, c_f, c_isf, rng), seg(S, c_f, c_isf, rng) {}

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        ident.register_params(reg, prefix + ".ident");
        seg.register_params(reg, prefix + ".seg");
    }
};

}  // namespace refprop
