// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "refprop/dataset.hpp"
#include "refprop/metrics.hpp"
#include "refprop/model.hpp"
#include "refprop/refine.hpp"

namespace refprop {

// ---------------------------------------------------------------------------
// Sample preparation
// ---------------------------------------------------------------------------

/// Planar 8-bit image to a (3,H,W) tensor scaled into [0,1].
template <typename T>
Tensor<T> image_tensor(const std::vector<std::uint8_t>& img, std::size_t H, std::size_t W) {
    if (img.size() != 3 * H * W)
        throw std::invalid_argument("image_tensor: byte count does not match 3*H*W");
    Tensor<T> t({3, H, W});
    for (std::size_t i = 0; i < img.size(); ++i) t[i] = static_cast<T>(img[i]) / T(255);
    return t;
}

/// Everything the network consumes for one sample, in tensor form.
template <typename T>
struct SampleTensors {
    Tensor<T> image;        // (3,H,W) in [0,1]
    std::vector<int> ids;   // token ids, possibly empty
    GridTarget<T> gt;       // grid supervision from the stored center
    Tensor<T> m_full;       // (H,W) 0/1
    Tensor<T> m_ds;         // mask at the coarse resolution
};

/// Coarse (mask stack) resolution: the largest pyramid level, two stride-2
/// steps below the image.
inline int coarse_res(int image_dim, int n_stages) { return image_dim >> (n_stages - 2); }

template <typename T>
SampleTensors<T> prepare_sample(const TrainingSample& s, const TrainConfig& cfg) {
    SampleTensors<T> st;
    const auto H = static_cast<std::size_t>(cfg.image_h);
    const auto W = static_cast<std::size_t>(cfg.image_w);
    st.image = image_tensor<T>(s.image, H, W);
    st.ids = s.token_ids;
    st.gt = make_grid_target<T>(s.center_row, s.center_col, cfg.image_h, cfg.image_w, cfg.grid_s);
    st.m_full = mask_tensor<T>(s.mask, H, W);
    st.m_ds = downsample_mask(st.m_full,
                              static_cast<std::size_t>(coarse_res(cfg.image_h, cfg.n_stages)),
                              static_cast<std::size_t>(coarse_res(cfg.image_w, cfg.n_stages)));
    return st;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Which branch output, if any, is replaced by ground truth during
/// evaluation (upper-bound probes).
enum class SubMode { none, id_branch, seg_branch };

/// Strong logits standing in for a 0/1 mask when a branch output is
/// substituted: sigmoid(12) is within 1e-5 of 1.
template <typename T>
Tensor<T> mask_as_logits(const Tensor<T>& m) {
    Tensor<T> out(m.shape());
    for (std::size_t i = 0; i < m.numel(); ++i) out[i] = (T(2) * m[i] - T(1)) * T(12);
    return out;
}

/// Full-resolution prediction logits for one prepared sample. Runs the
/// refinement stage when the variant has one, otherwise upsamples the coarse
/// logits.
template <typename T>
Tensor<T> predict_logits(Model<T>& model, Tape<T>& tape, const SampleTensors<T>& st,
                         typename Model<T>::Out& o) {
    const auto H = static_cast<std::size_t>(model.cfg.image_h);
    const auto W = static_cast<std::size_t>(model.cfg.image_w);
    if (model.has_refine()) return model.forward_refine(tape, st.image, o.coarse, BnMode::eval);
    Tensor<T> c3 = o.coarse.reshape({1, o.coarse.dim(0), o.coarse.dim(1)});
    return bilinear_resize(tape, c3, H, W).reshape({H, W});
}

/// Deterministic pass over a split: per-sample IoU, cumulative IoU, Pr@X and
/// grid accuracy. No tape recording, eval-mode statistics.
template <typename T>
EvalReport evaluate_model(Model<T>& model, const std::vector<TrainingSample>& split,
                          SubMode sub = SubMode::none) {
    std::vector<double> ious;
    ious.reserve(split.size());
    std::size_t inter_sum = 0, uni_sum = 0;
    int grid_hits = 0;
    for (const TrainingSample& s : split) {
        SampleTensors<T> st = prepare_sample<T>(s, model.cfg);
        Tape<T> tape;
        tape.set_enabled(false);
        GtOverride<T> ov;
        const GtOverride<T>* ovp = nullptr;
        if (sub == SubMode::id_branch && model.has_ident()) {
            ov.force_cell = true;
            ov.cell_i = st.gt.center_i;
            ov.cell_j = st.gt.center_j;
            ovp = &ov;
        } else if (sub == SubMode::seg_branch) {
            ov.substitute_mask = true;
            ov.mask_logits = mask_as_logits(st.m_ds);
            ovp = &ov;
        }
        auto o = model.forward_coarse(tape, st.image, st.ids, BnMode::eval, nullptr, ovp);
        Tensor<T> logits = predict_logits(model, tape, st, o);
        const IouCounts c = iou_counts(logits, st.m_full);
        ious.push_back(c.uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.uni));
        inter_sum += c.inter;
        uni_sum += c.uni;
        if (model.has_ident() &&
            st.gt.y[static_cast<std::size_t>(o.cell.first) * model.cfg.grid_s + o.cell.second] >=
                T(0.5))
            ++grid_hits;
    }
    return finalize_report(ious, inter_sum, uni_sum, grid_hits, model.has_ident());
}

// ---------------------------------------------------------------------------
// Overlay rendering
// ---------------------------------------------------------------------------

/// Blends the binarized prediction in orange over the image, writes a PPM
/// plus a sidecar .txt holding the expression.
template <typename T>
void render_overlay(const TrainingSample& s, const Tensor<T>& pred_logits, int H, int W,
                    const std::filesystem::path& out_ppm) {
    if (pred_logits.numel() != static_cast<std::size_t>(H) * W)
        throw std::invalid_argument("render_overlay: prediction size mismatch");
    const T orange[3] = {T(255), T(165), T(0)};
    std::vector<std::uint8_t> out(s.image);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (std::size_t i = 0; i < plane; ++i) {
        if (pred_logits[i] < T(0)) continue;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const T mixed = T(0.5) * static_cast<T>(out[ch * plane + i]) + T(0.5) * orange[ch];
            out[ch * plane + i] = static_cast<std::uint8_t>(mixed);
        }
    }
    write_ppm(out_ppm, out, H, W);
    std::filesystem::path txt = out_ppm;
    txt.replace_extension(".txt");
    std::ofstream side(txt, std::ios::binary);
    if (!side) detail::io_fail(txt, "cannot open for write");
    side << s.expression << "\n";
}

}  // namespace refprop
