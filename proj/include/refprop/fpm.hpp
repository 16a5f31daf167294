// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "refprop/layers.hpp"
#include "refprop/ops.hpp"
#include "refprop/scan.hpp"

namespace refprop {

/**
 * One bidirectional propagation path: a scan in `first` followed by a scan
 * in the opposite direction that consumes the first leg's hidden states
 * directly (no input projection on the second leg). Each leg has its own
 * recurrent weight.
 */
template <typename T>
struct PropagationPath {
    ScanDirection first;
    Tensor<T> w1;        // (C,C) input projection, first leg only
    Tensor<T> w2_first;  // (C,C) recurrent weight, first leg
    Tensor<T> w2_second; // (C,C) recurrent weight, second leg

    PropagationPath() = default;
    PropagationPath(ScanDirection dir, std::size_t c, Pcg32& rng)
        : first(dir), w1({c, c}), w2_first({c, c}), w2_second({c, c}) {
        const double s = std::sqrt(1.0 / static_cast<double>(c));
        init_normal(w1, rng, s);
        init_normal(w2_first, rng, s * 0.5);
        init_normal(w2_second, rng, s * 0.5);
    }

    /// rows: (S*S, C) per-cell features. Returns second-leg hidden states.
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& rows, int S, T alpha, T slope,
                      const ScanExec& exec) const {
        Tensor<T> v = matmul(tape, rows, w1);
        Tensor<T> h1 = directional_scan(tape, v, S, w2_first, alpha, Activation::leaky_relu,
                                        slope, first, exec);
        return directional_scan(tape, h1, S, w2_second, alpha, Activation::leaky_relu, slope,
                                opposite_direction(first), exec);
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".w1", w1);
        reg.add(prefix + ".w2_first", w2_first);
        reg.add(prefix + ".w2_second", w2_second);
    }
};

/**
 * Feature propagation over the grid: four bidirectional paths starting from
 * each corner direction, summed together with the raw input features, then
 * projected to one logit per cell.
 *
 * Input: (C,S,S) cell features. Output: (1,S,S) cell logits.
 */
template <typename T>
struct FeaturePropagation {
    std::vector<PropagationPath<T>> paths;
    Tensor<T> out_w;  // (1,C,1,1) final projection
    Tensor<T> out_b;  // (1)
    T alpha = T(0.5);
    T slope = T(0.1);
    int S = 0;

    FeaturePropagation() = default;
    FeaturePropagation(int S_, std::size_t c, T alpha_, T slope_, Pcg32& rng)
        : out_w({1, c, 1, 1}), out_b({1}), alpha(alpha_), slope(slope_), S(S_) {
        for (ScanDirection d : kAllDirections) paths.emplace_back(d, c, rng);
        // Small but nonzero: the summed path features run large, and the
        // initial cell logits should hover near zero so the map starts as an
        // unbiased coin rather than confident noise.
        init_normal(out_w, rng, 0.1 * std::sqrt(1.0 / static_cast<double>(c)));
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& cell_features,
                      const ScanExec& exec = {}) const {
        detail::require_rank("FeaturePropagation", cell_features, 3);
        Tensor<T> rows = chw_to_rows(tape, cell_features);
        Tensor<T> acc;
        for (const auto& path : paths) {
            Tensor<T> h = path.forward(tape, rows, S, alpha, slope, exec);
            acc = acc.defined() ? add(tape, acc, h) : h;
        }
        acc = add(tape, acc, rows);  // carry the unpropagated features too
        Tensor<T> map = rows_to_chw(tape, acc, static_cast<std::size_t>(S),
                                    static_cast<std::size_t>(S));
        return conv2d(tape, map, out_w, out_b);
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        static const char* names[4] = {"down_right", "down_left", "up_right", "up_left"};
        for (std::size_t p = 0; p < paths.size(); ++p)
            paths[p].register_params(reg, prefix + "." + names[p]);
        reg.add(prefix + ".out_w", out_w);
        reg.add(prefix + ".out_b", out_b);
    }
};

}  // namespace refprop
