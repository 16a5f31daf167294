// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "refprop/gridmap.hpp"
#include "refprop/instance.hpp"
#include "refprop/layers.hpp"
#include "refprop/ops.hpp"

namespace refprop {

// ---------------------------------------------------------------------------
// Grid target
// ---------------------------------------------------------------------------

/// Supervision for the identifying map: the cell the target's gravity center
/// falls into plus its in-bounds 8-neighborhood are positive, all other
/// cells negative.
template <typename T>
struct GridTarget {
    int S = 0;
    int center_i = 0, center_j = 0;        // cell owning the gravity center
    Tensor<T> y;                            // (S,S) of 0/1
    std::vector<std::pair<int, int>> pos;   // positive cells, row-major
};

template <typename T>
GridTarget<T> make_grid_target(int center_row, int center_col, int H, int W, int S) {
    GridTarget<T> t;
    t.S = S;
    auto [ci, cj] = grid_of_center(center_row, center_col, H, W, S);
    t.center_i = ci;
    t.center_j = cj;
    t.y = Tensor<T>({static_cast<std::size_t>(S), static_cast<std::size_t>(S)});
    for (int i = ci - 1; i <= ci + 1; ++i) {
        if (i < 0 || i >= S) continue;
        for (int j = cj - 1; j <= cj + 1; ++j) {
            if (j < 0 || j >= S) continue;
            t.pos.emplace_back(i, j);
            t.y[static_cast<std::size_t>(i) * S + j] = T(1);
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Mask plumbing
// ---------------------------------------------------------------------------

/// 0/1 byte mask to an (H,W) tensor of the same values.
template <typename T>
Tensor<T> mask_tensor(const std::vector<std::uint8_t>& mask, std::size_t H, std::size_t W) {
    if (mask.size() != H * W)
        throw std::invalid_argument("mask_tensor: mask size does not match H*W");
    Tensor<T> t({H, W});
    for (std::size_t i = 0; i < mask.size(); ++i) t[i] = mask[i] ? T(1) : T(0);
    return t;
}

/// Area-averages an (H,W) binary mask down to (h,w) (integer factor each
/// axis), then rebinarizes at 0.5: a low-resolution cell is positive when at
/// least half of its source pixels are.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& m, std::size_t h, std::size_t w) {
    detail::require_rank("downsample_mask", m, 2);
    const std::size_t H = m.dim(0), W = m.dim(1);
    if (h == 0 || w == 0 || H % h != 0 || W % w != 0)
        detail::shape_error("downsample_mask", "output must divide input evenly");
    const std::size_t fh = H / h, fw = W / w;
    const T half = T(0.5) * static_cast<T>(fh * fw);
    Tensor<T> out({h, w});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            T acc = T(0);
            for (std::size_t di = 0; di < fh; ++di)
                for (std::size_t dj = 0; dj < fw; ++dj)
                    acc += m[(i * fh + di) * W + (j * fw + dj)];
            out[i * w + j] = acc >= half ? T(1) : T(0);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

template <typename T>
struct LossWeights {
    T w_ide = T(10.0);
    T w_seg = T(0.03);
    T w_ref = T(0.5);
    T theta = T(0.3);
};

/// Mean BCE-with-logits between the (1,S,S) or (S,S) identifying map and the
/// grid target over all cells.
template <typename T>
Tensor<T> identifying_loss(Tape<T>& tape, const Tensor<T>& id_map, const GridTarget<T>& target) {
    const auto s = static_cast<std::size_t>(target.S);
    Tensor<T> logits = id_map.rank() == 3 ? id_map.reshape({s, s}) : id_map;
    return bce_with_logits(tape, logits, target.y);
}

/// Mean over the positive cells of BCE between that cell's mask channel and
/// the downsampled ground truth. Negative channels are never touched, so
/// their loss and gradient are exactly zero.
template <typename T>
Tensor<T> segmentation_loss(Tape<T>& tape, const Tensor<T>& mask_stack,
                            const GridTarget<T>& target, const Tensor<T>& m_ds) {
    if (target.pos.empty())
        throw std::invalid_argument("segmentation_loss: no positive grid cells");
    Tensor<T> acc;
    for (auto [i, j] : target.pos) {
        const auto c = static_cast<std::size_t>(channel_index(i, j, target.S));
        Tensor<T> term = bce_with_logits(tape, select_channel(tape, mask_stack, c), m_ds);
        acc = acc.defined() ? add(tape, acc, term) : term;
    }
    return scale(tape, acc, T(1) / static_cast<T>(target.pos.size()));
}

/// IoU of the binarized prediction (sigmoid >= 0.5, i.e. logit >= 0) against
/// a binary mask of the same shape. Both empty counts as 1, exactly one
/// empty as 0. Plain value, not differentiable.
template <typename T>
T coarse_iou(const Tensor<T>& logits, const Tensor<T>& m) {
    detail::require_same_shape("coarse_iou", logits, m);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const bool p = logits[i] >= T(0);
        const bool g = m[i] >= T(0.5);
        inter += static_cast<std::size_t>(p && g);
        uni += static_cast<std::size_t>(p || g);
    }
    if (uni == 0) return T(1);
    return static_cast<T>(inter) / static_cast<T>(uni);
}

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

/// Residual refinement of the selected coarse mask: the sigmoid of the
/// coarse logits is resized to image resolution and stacked under the image,
/// three k3 convs (norm + leaky between, a bare conv last) produce a
/// one-channel correction, and the resized coarse logits are added back so
/// that zero weights give the identity.
template <typename T>
struct RefinementModule {
    ConvBnAct<T> c1, c2;
    Conv2dLayer<T> c3;

    RefinementModule() = default;
    RefinementModule(std::size_t width, Pcg32& rng)
        : c1(4, width, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng),
          c2(width, width, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng),
          c3(width, 1, 3, 1, 1, 1, /*bias=*/true, rng) {}

    /// image: (3,H,W); coarse_logits: (h,w) or (1,h,w). Returns (H,W) logits.
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& image, const Tensor<T>& coarse_logits,
                      BnMode mode, BnRecorder<T>* rec = nullptr) {
        detail::require_rank("RefinementModule", image, 3);
        const std::size_t H = image.dim(1), W = image.dim(2);
        Tensor<T> coarse = coarse_logits.rank() == 2
                               ? coarse_logits.reshape({1, coarse_logits.dim(0),
                                                        coarse_logits.dim(1)})
                               : coarse_logits;
        Tensor<T> up_logits = bilinear_resize(tape, coarse, H, W);
        Tensor<T> prob = bilinear_resize(tape, sigmoid(tape, coarse), H, W);
        Tensor<T> x = concat_channels(tape, {image, prob});
        x = c1.forward(tape, x, mode, rec);
        x = c2.forward(tape, x, mode, rec);
        x = c3.forward(tape, x);
        return add(tape, x, up_logits).reshape({H, W});
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        c1.register_params(reg, prefix + ".c1");
        c2.register_params(reg, prefix + ".c2");
        c3.register_params(reg, prefix + ".c3");
    }
};

/// BCE against the full-resolution mask when the coarse selection was good
/// enough (iou_coarse >= theta, boundary active), otherwise a constant zero
/// that carries no gradient into anything.
template <typename T>
Tensor<T> refinement_loss(Tape<T>& tape, const Tensor<T>& final_logits, const Tensor<T>& m,
                          T iou_coarse, T theta) {
    if (iou_coarse >= theta) return bce_with_logits(tape, final_logits, m);
    return Tensor<T>::scalar(T(0));
}

/// l = w_ide*l_ide + w_seg*l_seg + w_ref*l_ref.
template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& l_ide, const Tensor<T>& l_seg,
                     const Tensor<T>& l_ref, const LossWeights<T>& w) {
    Tensor<T> out = add(tape, scale(tape, l_ide, w.w_ide), scale(tape, l_seg, w.w_seg));
    return add(tape, out, scale(tape, l_ref, w.w_ref));
}

}  // namespace refprop
