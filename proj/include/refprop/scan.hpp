// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "refprop/ops.hpp"
#include "refprop/pool.hpp"
#include "refprop/tape.hpp"
#include "refprop/tensor.hpp"

namespace refprop {

/// Corner-to-corner scan orders over an S×S grid, named by travel direction.
enum class ScanDirection { down_right, down_left, up_right, up_left };

constexpr std::array<ScanDirection, 4> kAllDirections = {
    ScanDirection::down_right, ScanDirection::down_left, ScanDirection::up_right,
    ScanDirection::up_left};

struct GridCell {
    int i, j;
};

/// Unit step of a direction; incoming neighbors sit one step behind.
struct DirectionInfo {
    int di, dj;
    /// Already-visited offsets feeding a cell, in the canonical accumulation
    /// order: same column, same row, diagonal.
    std::array<std::pair<int, int>, 3> incoming;
    /// Not-yet-visited offsets this cell feeds (mirror of incoming).
    std::array<std::pair<int, int>, 3> outgoing;
};

inline DirectionInfo direction_info(ScanDirection d) {
    int di = (d == ScanDirection::down_right || d == ScanDirection::down_left) ? 1 : -1;
    int dj = (d == ScanDirection::down_right || d == ScanDirection::up_right) ? 1 : -1;
    DirectionInfo info;
    info.di = di;
    info.dj = dj;
    info.incoming = {{{-di, 0}, {0, -dj}, {-di, -dj}}};
    info.outgoing = {{{di, 0}, {0, dj}, {di, dj}}};
    return info;
}

inline ScanDirection opposite_direction(ScanDirection d) {
    switch (d) {
        case ScanDirection::down_right: return ScanDirection::up_left;
        case ScanDirection::down_left: return ScanDirection::up_right;
        case ScanDirection::up_right: return ScanDirection::down_left;
        case ScanDirection::up_left: return ScanDirection::down_right;
    }
    return ScanDirection::down_right;
}

/// Cells in sequential scan order: rows advance along di, columns along dj.
inline std::vector<GridCell> sequential_order(int S, ScanDirection d) {
    const DirectionInfo info = direction_info(d);
    std::vector<GridCell> order;
    order.reserve(static_cast<std::size_t>(S) * S);
    for (int a = 0; a < S; ++a)
        for (int b = 0; b < S; ++b) {
            int i = info.di > 0 ? a : S - 1 - a;
            int j = info.dj > 0 ? b : S - 1 - b;
            order.push_back({i, j});
        }
    return order;
}

/// Anti-diagonal batches: cells within one batch are mutually independent,
/// and every dependency lives in an earlier batch. 2S-1 batches for S >= 1.
inline std::vector<std::vector<GridCell>> wavefront_schedule(int S, ScanDirection d) {
    if (S < 1) throw std::invalid_argument("wavefront_schedule: S must be >= 1");
    const DirectionInfo info = direction_info(d);
    std::vector<std::vector<GridCell>> batches(static_cast<std::size_t>(2 * S - 1));
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
            int depth = (info.di > 0 ? i : S - 1 - i) + (info.dj > 0 ? j : S - 1 - j);
            batches[static_cast<std::size_t>(depth)].push_back({i, j});
        }
    return batches;
}

enum class ScanMode { sequential, wavefront };

/// Execution policy for a scan. The pool is only consulted in wavefront mode;
/// both modes produce bit-identical results by construction.
struct ScanExec {
    ScanMode mode = ScanMode::sequential;
    ThreadPool* pool = nullptr;
    std::size_t min_batch_for_pool = 4;
};

namespace detail {

/// One recurrence step. noinline keeps a single instruction sequence shared
/// by both schedulers, which is what makes their outputs bit-identical.
///   h[cell] = act( v[cell] + sum_k alpha*inc[k] * W2[k,:] )
/// inc is the elementwise sum of up-to-3 incoming hidden rows in the
/// canonical order (column, row, diagonal predecessor).
template <typename T>
__attribute__((noinline)) void scan_cell_forward(const T* v_row, const T* h_base, T* h_row,
                                                 T* inc, const T* w2, int S, std::size_t C,
                                                 int i, int j, const DirectionInfo& info,
                                                 T alpha, Activation act, T slope) {
    for (std::size_t c = 0; c < C; ++c) inc[c] = T(0);
    for (const auto& [oi, oj] : info.incoming) {
        const int ni = i + oi, nj = j + oj;
        if (ni < 0 || ni >= S || nj < 0 || nj >= S) continue;
        const T* nrow = h_base + (static_cast<std::size_t>(ni) * S + nj) * C;
        for (std::size_t c = 0; c < C; ++c) inc[c] += nrow[c];
    }
    for (std::size_t c = 0; c < C; ++c) h_row[c] = v_row[c];
    for (std::size_t k = 0; k < C; ++k) {
        const T a = alpha * inc[k];
        const T* wrow = w2 + k * C;
        for (std::size_t c = 0; c < C; ++c) h_row[c] += a * wrow[c];
    }
    if (act == Activation::leaky_relu) {
        for (std::size_t c = 0; c < C; ++c)
            if (h_row[c] <= T(0)) h_row[c] *= slope;
    }
}

/// Reverse step, gather form. Reads consumers' d(pre) rows (already final),
/// produces this cell's d(pre) row; safe to run one anti-diagonal in
/// parallel.
template <typename T>
__attribute__((noinline)) void scan_cell_backward(const T* gout_row, const T* h_row,
                                                  const T* dpre_base, T* dpre_row, T* gh,
                                                  T* cons_sum, const T* w2, int S,
                                                  std::size_t C, int i, int j,
                                                  const DirectionInfo& info, T alpha,
                                                  Activation act, T slope) {
    for (std::size_t c = 0; c < C; ++c) cons_sum[c] = T(0);
    for (const auto& [oi, oj] : info.outgoing) {
        const int ni = i + oi, nj = j + oj;
        if (ni < 0 || ni >= S || nj < 0 || nj >= S) continue;
        const T* nrow = dpre_base + (static_cast<std::size_t>(ni) * S + nj) * C;
        for (std::size_t c = 0; c < C; ++c) cons_sum[c] += nrow[c];
    }
    // gh = gout + alpha * W2 . cons_sum  (dot over w2 row k)
    for (std::size_t k = 0; k < C; ++k) {
        const T* wrow = w2 + k * C;
        T s = T(0);
        for (std::size_t c = 0; c < C; ++c) s += wrow[c] * cons_sum[c];
        gh[k] = gout_row[k] + alpha * s;
    }
    if (act == Activation::leaky_relu) {
        for (std::size_t c = 0; c < C; ++c)
            dpre_row[c] = h_row[c] > T(0) ? gh[c] : slope * gh[c];
    } else {
        for (std::size_t c = 0; c < C; ++c) dpre_row[c] = gh[c];
    }
}

}  // namespace detail

/**
 * 2-d linear-chain recurrence over grid cell features.
 *
 * v: (S*S, C) per-cell input rows, row r = cell (r/S, r%S).
 * Each cell's pre-activation is v plus alpha * W2 applied to the sum of its
 * up-to-3 already-visited neighbors' hidden states; the activation is linear
 * or leaky. Returns hidden states h with v's layout.
 *
 * Sequential and wavefront execution share one per-cell kernel and differ
 * only in the order independent cells are visited, so their outputs are
 * bit-identical; the backward pass has the same property.
 */
template <typename T>
Tensor<T> directional_scan(Tape<T>& tape, const Tensor<T>& v, int S, const Tensor<T>& w2,
                           T alpha, Activation act, T slope, ScanDirection dir,
                           const ScanExec& exec = {}) {
    detail::require_rank("directional_scan", v, 2);
    detail::require_rank("directional_scan", w2, 2);
    const std::size_t C = v.dim(1);
    if (S < 1 || v.dim(0) != static_cast<std::size_t>(S) * S)
        detail::shape_error("directional_scan", "v rows must equal S*S");
    if (w2.dim(0) != C || w2.dim(1) != C)
        detail::shape_error("directional_scan", "w2 must be (C,C)");
    if (act != Activation::linear && act != Activation::leaky_relu)
        detail::shape_error("directional_scan", "activation must be linear or leaky_relu");

    const DirectionInfo info = direction_info(dir);
    Tensor<T> h({static_cast<std::size_t>(S) * S, C});

    auto run_cell = [&](int i, int j, std::vector<T>& inc) {
        const std::size_t r = static_cast<std::size_t>(i) * S + j;
        detail::scan_cell_forward(v.ptr() + r * C, h.ptr(), h.ptr() + r * C, inc.data(),
                                  w2.ptr(), S, C, i, j, info, alpha, act, slope);
    };

    if (exec.mode == ScanMode::sequential || !exec.pool) {
        std::vector<T> inc(C);
        if (exec.mode == ScanMode::sequential) {
            for (const GridCell& cell : sequential_order(S, dir)) run_cell(cell.i, cell.j, inc);
        } else {
            for (const auto& batch : wavefront_schedule(S, dir))
                for (const GridCell& cell : batch) run_cell(cell.i, cell.j, inc);
        }
    } else {
        for (const auto& batch : wavefront_schedule(S, dir)) {
            if (batch.size() < exec.min_batch_for_pool) {
                std::vector<T> inc(C);
                for (const GridCell& cell : batch) run_cell(cell.i, cell.j, inc);
            } else {
                exec.pool->parallel_for(0, batch.size(), [&](std::size_t b) {
                    std::vector<T> inc(C);
                    run_cell(batch[b].i, batch[b].j, inc);
                });
            }
        }
    }
    detail::finite_guard("directional_scan", h);

    if (tape_should_record(tape, {&v, &w2})) {
        h.set_requires_grad(true);
        tape.ensure_grad(h);
        if (v.requires_grad()) tape.ensure_grad(v);
        if (w2.requires_grad()) tape.ensure_grad(w2);
        // Copy the exec policy; the caller's may not outlive the tape.
        const ScanExec bexec = exec;
        tape.record([&tape, v, w2, h, S, C, info, alpha, act, slope, bexec, dir] {
            auto gout = tape.grad_mut(h);
            std::vector<T> dpre(static_cast<std::size_t>(S) * S * C);

            auto back_cell = [&](int i, int j, std::vector<T>& gh, std::vector<T>& cs) {
                const std::size_t r = static_cast<std::size_t>(i) * S + j;
                detail::scan_cell_backward(gout.data() + r * C, h.ptr() + r * C, dpre.data(),
                                           dpre.data() + r * C, gh.data(), cs.data(), w2.ptr(),
                                           S, C, i, j, info, alpha, act, slope);
            };

            if (bexec.mode == ScanMode::sequential || !bexec.pool) {
                std::vector<T> gh(C), cs(C);
                auto order = sequential_order(S, dir);
                for (auto it = order.rbegin(); it != order.rend(); ++it)
                    back_cell(it->i, it->j, gh, cs);
            } else {
                auto batches = wavefront_schedule(S, dir);
                for (auto bit = batches.rbegin(); bit != batches.rend(); ++bit) {
                    if (bit->size() < bexec.min_batch_for_pool) {
                        std::vector<T> gh(C), cs(C);
                        for (const GridCell& cell : *bit) back_cell(cell.i, cell.j, gh, cs);
                    } else {
                        const auto& batch = *bit;
                        bexec.pool->parallel_for(0, batch.size(), [&](std::size_t b) {
                            std::vector<T> gh(C), cs(C);
                            back_cell(batch[b].i, batch[b].j, gh, cs);
                        });
                    }
                }
            }

            if (v.requires_grad()) {
                auto gv = tape.grad_mut(v);
                for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += dpre[i];
            }
            if (w2.requires_grad()) {
                // dW2[k,c] += alpha * inc[k] * dpre[c], cells in row-major
                // grid order regardless of execution mode.
                auto gw = tape.grad_mut(w2);
                std::vector<T> inc(C);
                for (int i = 0; i < S; ++i)
                    for (int j = 0; j < S; ++j) {
                        for (std::size_t c = 0; c < C; ++c) inc[c] = T(0);
                        for (const auto& [oi, oj] : info.incoming) {
                            const int ni = i + oi, nj = j + oj;
                            if (ni < 0 || ni >= S || nj < 0 || nj >= S) continue;
                            const T* nrow = h.ptr() + (static_cast<std::size_t>(ni) * S + nj) * C;
                            for (std::size_t c = 0; c < C; ++c) inc[c] += nrow[c];
                        }
                        const T* dp = dpre.data() + (static_cast<std::size_t>(i) * S + j) * C;
                        for (std::size_t k = 0; k < C; ++k) {
                            const T a = alpha * inc[k];
                            T* grow = gw.data() + k * C;
                            for (std::size_t c = 0; c < C; ++c) grow[c] += a * dp[c];
                        }
                    }
            }
        });
    }
    return h;
}

}  // namespace refprop
