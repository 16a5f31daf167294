// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "refprop/ops.hpp"
#include "refprop/tensor.hpp"

namespace refprop {

/// Intersection and union pixel counts between a logit map binarized at
/// sigmoid >= 0.5 (logit >= 0) and a 0/1 mask of the same shape.
struct IouCounts {
    std::size_t inter = 0;
    std::size_t uni = 0;
};

template <typename T>
IouCounts iou_counts(const Tensor<T>& logits, const Tensor<T>& m) {
    detail::require_same_shape("iou_counts", logits, m);
    IouCounts c;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const bool p = logits[i] >= T(0);
        const bool g = m[i] >= T(0.5);
        c.inter += static_cast<std::size_t>(p && g);
        c.uni += static_cast<std::size_t>(p || g);
    }
    return c;
}

/// IoU with the empty-set conventions: both empty is a perfect 1, exactly
/// one empty is 0.
template <typename T>
T sample_iou(const Tensor<T>& logits, const Tensor<T>& m) {
    const IouCounts c = iou_counts(logits, m);
    if (c.uni == 0) return T(1);
    return static_cast<T>(c.inter) / static_cast<T>(c.uni);
}

inline constexpr std::array<double, 5> kPrThresholds = {0.5, 0.6, 0.7, 0.8, 0.9};

struct EvalReport {
    double mean_iou = 0.0;
    double overall_iou = 0.0;  // sum of intersections / sum of unions
    std::array<double, 5> pr_at{};  // fraction of samples with IoU above X
    double grid_accuracy = 0.0;     // argmax cell inside the positive set
    int n_samples = 0;
};

/// Aggregates per-sample IoUs (and the cumulative counts) into a report.
/// grid_hits is ignored when has_grid is false (single-mask variant).
inline EvalReport finalize_report(const std::vector<double>& ious, std::size_t inter_sum,
                                  std::size_t uni_sum, int grid_hits, bool has_grid) {
    EvalReport r;
    r.n_samples = static_cast<int>(ious.size());
    if (r.n_samples == 0) return r;
    double acc = 0.0;
    for (double v : ious) acc += v;
    r.mean_iou = acc / r.n_samples;
    r.overall_iou = uni_sum == 0 ? 1.0 : static_cast<double>(inter_sum) / static_cast<double>(uni_sum);
    for (std::size_t k = 0; k < kPrThresholds.size(); ++k) {
        int hits = 0;
        for (double v : ious) hits += v > kPrThresholds[k] ? 1 : 0;
        r.pr_at[k] = static_cast<double>(hits) / r.n_samples;
    }
    r.grid_accuracy = has_grid ? static_cast<double>(grid_hits) / r.n_samples : 0.0;
    return r;
}

}  // namespace refprop
