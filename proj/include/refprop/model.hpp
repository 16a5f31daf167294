// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "refprop/config.hpp"
#include "refprop/encoders.hpp"
#include "refprop/fpm.hpp"
#include "refprop/instance.hpp"
#include "refprop/refine.hpp"

namespace refprop {

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

/// The four ablation configurations.
///   baseline: one-channel segmentation head, no grid machinery.
///   iem:      grid extraction, but the propagation stage is a 1x1 conv.
///   iem_fpm:  grid extraction plus directional propagation.
///   full:     iem_fpm plus the refinement stage.
enum class ModelVariant { baseline, iem, iem_fpm, full };

inline ModelVariant parse_variant(const std::string& s) {
    if (s == "baseline") return ModelVariant::baseline;
    if (s == "iem") return ModelVariant::iem;
    if (s == "iem_fpm") return ModelVariant::iem_fpm;
    if (s == "full") return ModelVariant::full;
    throw ConfigError("variant must be one of baseline|iem|iem_fpm|full, got '" + s + "'");
}

inline const char* variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::baseline: return "baseline";
        case ModelVariant::iem: return "iem";
        case ModelVariant::iem_fpm: return "iem_fpm";
        case ModelVariant::full: return "full";
    }
    return "?";
}

inline bool variant_has_ident(ModelVariant v) { return v != ModelVariant::baseline; }
inline bool variant_has_fpm(ModelVariant v) {
    return v == ModelVariant::iem_fpm || v == ModelVariant::full;
}
inline bool variant_has_refine(ModelVariant v) { return v == ModelVariant::full; }

// ---------------------------------------------------------------------------
// Ground-truth substitution seams (evaluation-time upper bounds)
// ---------------------------------------------------------------------------

template <typename T>
struct GtOverride {
    bool force_cell = false;  // pin channel selection to the true center cell
    int cell_i = 0, cell_j = 0;
    bool substitute_mask = false;  // replace the selected coarse logits
    Tensor<T> mask_logits;         // (H_m,W_m), used when substitute_mask
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The assembled network for one variant. Parameter updates go through `reg`,
/// whose tensors share storage with the layer members.
template <typename T>
struct Model {
    TrainConfig cfg;
    ModelVariant variant = ModelVariant::full;
    Encoders<T> enc;
    IdentificationBranch<T> ident;
    FeaturePropagation<T> fpm;
    Conv2dLayer<T> ident_head;  // 1x1 projection used by the `iem` variant
    SegmentationBranch<T> seg;
    RefinementModule<T> refine;
    ParamRegistry<T> reg;

    Model() = default;

    Model(const TrainConfig& cfg_, Pcg32& rng) : cfg(cfg_), variant(parse_variant(cfg_.variant)) {
        validate_config(cfg);
        // These three constants are baked into the conv/norm blocks; the keys
        // exist so the config states them, but other values are not wired.
        if (cfg.leaky_slope != 0.1)
            throw ConfigError("config: this build supports leaky_slope = 0.1 only");
        if (cfg.bn_eps != 1e-5 || cfg.bn_momentum != 0.9)
            throw ConfigError("config: this build supports bn_eps = 1e-5, bn_momentum = 0.9");
        EncoderConfig ec;
        ec.c_v = cfg.c_v;
        ec.c_l = cfg.c_l;
        ec.c_f = cfg.c_f;
        ec.d_a = cfg.d_a;
        ec.vocab = cfg.vocab_size;
        ec.n_stages = cfg.n_stages;
        enc = Encoders<T>(ec, rng);
        if (variant_has_ident(variant)) {
            ident = IdentificationBranch<T>(cfg.grid_s, cfg.c_f, cfg.c_f, rng);
            if (variant_has_fpm(variant)) {
                fpm = FeaturePropagation<T>(cfg.grid_s, static_cast<std::size_t>(cfg.c_f),
                                            static_cast<T>(cfg.alpha),
                                            static_cast<T>(cfg.leaky_slope), rng);
            } else {
                ident_head = Conv2dLayer<T>(static_cast<std::size_t>(cfg.c_f), 1, 1, 1, 0, 1,
                                            /*bias=*/true, rng);
                // Same near-zero start as the propagation projection.
                for (std::size_t i = 0; i < ident_head.w.numel(); ++i) ident_head.w[i] *= T(0.1);
            }
        }
        seg = SegmentationBranch<T>(cfg.grid_s, cfg.c_f, cfg.c_seg, rng,
                                    variant_has_ident(variant) ? -1 : 1);
        if (variant_has_refine(variant))
            refine = RefinementModule<T>(static_cast<std::size_t>(cfg.refine_width), rng);
        enc.register_params(reg, "enc");
        if (variant_has_ident(variant)) {
            ident.register_params(reg, "ident");
            if (variant_has_fpm(variant)) fpm.register_params(reg, "fpm");
            else ident_head.register_params(reg, "ident_head");
        }
        seg.register_params(reg, "seg");
        if (variant_has_refine(variant)) refine.register_params(reg, "refine");
    }

    bool has_ident() const { return variant_has_ident(variant); }
    bool has_fpm() const { return variant_has_fpm(variant); }
    bool has_refine() const { return variant_has_refine(variant); }

    struct Out {
        typename Encoders<T>::Out enc;
        Tensor<T> id_map;              // (1,S,S) when the grid machinery runs
        std::pair<int, int> cell{0, 0};
        Tensor<T> mask_stack;          // (S*S,H_m,W_m), or (1,H_m,W_m) baseline
        Tensor<T> coarse;              // (H_m,W_m) selected coarse logits
    };

    /// Everything up to the coarse mask. Refinement is separate so training
    /// can skip it when the gate is closed.
    Out forward_coarse(Tape<T>& tape, const Tensor<T>& image, const std::vector<int>& ids,
                       BnMode mode, BnRecorder<T>* rec = nullptr,
                       const GtOverride<T>* sub = nullptr) {
        Out o;
        o.enc = enc.forward(tape, image, ids, mode, rec);
        o.mask_stack = seg.forward(tape, o.enc.f_seg, mode, rec);
        if (has_ident()) {
            Tensor<T> isf = ident.forward(tape, o.enc.f_ide, mode, rec);
            o.id_map = has_fpm() ? fpm.forward(tape, isf) : ident_head.forward(tape, isf);
            o.cell = (sub && sub->force_cell) ? std::pair<int, int>{sub->cell_i, sub->cell_j}
                                              : argmax_grid(o.id_map);
            const auto c = static_cast<std::size_t>(
                channel_index(o.cell.first, o.cell.second, cfg.grid_s));
            o.coarse = select_channel(tape, o.mask_stack, c);
        } else {
            o.coarse = select_channel(tape, o.mask_stack, 0);
        }
        if (sub && sub->substitute_mask) {
            detail::require_same_shape("GtOverride", sub->mask_logits, o.coarse);
            o.coarse = sub->mask_logits;
        }
        return o;
    }

    /// Refinement stage; callers gate it during training.
    Tensor<T> forward_refine(Tape<T>& tape, const Tensor<T>& image, const Tensor<T>& coarse,
                             BnMode mode, BnRecorder<T>* rec = nullptr) {
        return refine.forward(tape, image, coarse, mode, rec);
    }
};

}  // namespace refprop
