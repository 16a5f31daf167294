// SPDX-License-Identifier: Apache-2.0
//
// The 2-d recurrent scan and the propagation module. Oracles: hand-expanded
// closed forms on tiny grids, an op-composed reimplementation of the same
// recurrence (independent autodiff path), and finite differences.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "refprop/fpm.hpp"
#include "refprop/gradcheck.hpp"
#include "refprop/ops.hpp"
#include "refprop/pool.hpp"
#include "refprop/rng.hpp"
#include "refprop/scan.hpp"

using namespace refprop;

namespace {

template <typename T>
Tensor<T> rnd(Shape shape, Pcg32& rng, T lo = T(-1), T hi = T(1)) {
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = lo + static_cast<T>(rng.next_real()) * (hi - lo);
    return t;
}

template <typename T>
Tensor<T> identity_matrix(std::size_t c) {
    Tensor<T> w({c, c});
    for (std::size_t i = 0; i < c; ++i) w.at(i, i) = T(1);
    return w;
}

// The same recurrence composed from generic tape ops, cell by cell. Slow but
// structurally independent of the fused scan kernel and its custom backward.
template <typename T>
Tensor<T> scan_oracle(Tape<T>& tape, const Tensor<T>& v, int S, const Tensor<T>& w2, T alpha,
                      Activation act, T slope, ScanDirection dir) {
    const std::size_t C = v.dim(1);
    const DirectionInfo info = direction_info(dir);
    std::vector<Tensor<T>> cells(static_cast<std::size_t>(S) * S);
    for (const GridCell& cell : sequential_order(S, dir)) {
        const std::size_t r = static_cast<std::size_t>(cell.i) * S + cell.j;
        Tensor<T> vrow = select_row(tape, v, r);
        Tensor<T> inc;
        for (const auto& [oi, oj] : info.incoming) {
            const int ni = cell.i + oi, nj = cell.j + oj;
            if (ni < 0 || ni >= S || nj < 0 || nj >= S) continue;
            const Tensor<T>& n = cells[static_cast<std::size_t>(ni) * S + nj];
            inc = inc.defined() ? add(tape, inc, n) : n;
        }
        Tensor<T> pre = vrow;
        if (inc.defined()) {
            Tensor<T> m = matmul(tape, inc.reshape({1, C}), w2);
            pre = add(tape, vrow, scale(tape, m.reshape({C}), alpha));
        }
        cells[r] = activation(tape, act, pre, slope);
    }
    return stack_rows(tape, cells);
}

}  // namespace

TEST_CASE("direction steps and opposites") {
    auto dr = direction_info(ScanDirection::down_right);
    REQUIRE(dr.di == 1);
    REQUIRE(dr.dj == 1);
    REQUIRE(dr.incoming[0] == std::pair<int, int>{-1, 0});
    REQUIRE(dr.incoming[1] == std::pair<int, int>{0, -1});
    REQUIRE(dr.incoming[2] == std::pair<int, int>{-1, -1});

    auto ul = direction_info(ScanDirection::up_left);
    REQUIRE(ul.di == -1);
    REQUIRE(ul.dj == -1);

    for (ScanDirection d : kAllDirections)
        REQUIRE(opposite_direction(opposite_direction(d)) == d);
    REQUIRE(opposite_direction(ScanDirection::down_right) == ScanDirection::up_left);
    REQUIRE(opposite_direction(ScanDirection::down_left) == ScanDirection::up_right);
}

TEST_CASE("wavefront schedule partitions the grid and respects dependencies") {
    for (int S = 1; S <= 13; ++S) {
        for (ScanDirection d : kAllDirections) {
            CAPTURE(S, static_cast<int>(d));
            auto batches = wavefront_schedule(S, d);
            REQUIRE(batches.size() == static_cast<std::size_t>(2 * S - 1));

            std::vector<int> batch_of(static_cast<std::size_t>(S) * S, -1);
            for (std::size_t b = 0; b < batches.size(); ++b)
                for (const GridCell& c : batches[b]) {
                    REQUIRE(batch_of[static_cast<std::size_t>(c.i) * S + c.j] == -1);
                    batch_of[static_cast<std::size_t>(c.i) * S + c.j] = static_cast<int>(b);
                }
            for (int v : batch_of) REQUIRE(v >= 0);  // partition covers everything

            const DirectionInfo info = direction_info(d);
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j)
                    for (const auto& [oi, oj] : info.incoming) {
                        const int ni = i + oi, nj = j + oj;
                        if (ni < 0 || ni >= S || nj < 0 || nj >= S) continue;
                        REQUIRE(batch_of[static_cast<std::size_t>(ni) * S + nj] <
                                batch_of[static_cast<std::size_t>(i) * S + j]);
                    }
        }
    }
    REQUIRE_THROWS_AS(wavefront_schedule(0, ScanDirection::down_right), std::invalid_argument);
}

TEST_CASE("sequential order visits dependencies first") {
    for (int S : {1, 2, 5, 8}) {
        for (ScanDirection d : kAllDirections) {
            auto order = sequential_order(S, d);
            REQUIRE(order.size() == static_cast<std::size_t>(S) * S);
            std::vector<int> pos(order.size());
            for (std::size_t p = 0; p < order.size(); ++p)
                pos[static_cast<std::size_t>(order[p].i) * S + order[p].j] = static_cast<int>(p);
            const DirectionInfo info = direction_info(d);
            for (const GridCell& c : order)
                for (const auto& [oi, oj] : info.incoming) {
                    const int ni = c.i + oi, nj = c.j + oj;
                    if (ni < 0 || ni >= S || nj < 0 || nj >= S) continue;
                    REQUIRE(pos[static_cast<std::size_t>(ni) * S + nj] <
                            pos[static_cast<std::size_t>(c.i) * S + c.j]);
                }
        }
    }
}

TEST_CASE("scan matches hand-expanded closed forms on tiny grids") {
    // Identity recurrent weight, alpha=1, linear activation: every hidden
    // state is an integer combination of the inputs, exact in float.
    const std::size_t C = 3;
    Pcg32 rng(11);
    Tape<float> tape;
    tape.set_enabled(false);
    auto w2 = identity_matrix<float>(C);

    SECTION("2x2 down-right") {
        Tensor<float> v({4, C});
        for (std::size_t i = 0; i < v.numel(); ++i)
            v[i] = static_cast<float>(rng.next_range(0, 9));
        auto h = directional_scan(tape, v, 2, w2, 1.0f, Activation::linear, 0.1f,
                                  ScanDirection::down_right);
        for (std::size_t c = 0; c < C; ++c) {
            auto vv = [&](int i, int j) { return v.at(static_cast<std::size_t>(i) * 2 + j, c); };
            REQUIRE(h.at(0, c) == vv(0, 0));
            REQUIRE(h.at(1, c) == vv(0, 1) + vv(0, 0));
            REQUIRE(h.at(2, c) == vv(1, 0) + vv(0, 0));
            REQUIRE(h.at(3, c) == vv(1, 1) + vv(0, 1) + vv(1, 0) + 3 * vv(0, 0));
        }
    }

    SECTION("2x2 up-left mirrors the expansion") {
        Tensor<float> v({4, C});
        for (std::size_t i = 0; i < v.numel(); ++i)
            v[i] = static_cast<float>(rng.next_range(0, 9));
        auto h = directional_scan(tape, v, 2, w2, 1.0f, Activation::linear, 0.1f,
                                  ScanDirection::up_left);
        for (std::size_t c = 0; c < C; ++c) {
            auto vv = [&](int i, int j) { return v.at(static_cast<std::size_t>(i) * 2 + j, c); };
            REQUIRE(h.at(3, c) == vv(1, 1));
            REQUIRE(h.at(2, c) == vv(1, 0) + vv(1, 1));
            REQUIRE(h.at(1, c) == vv(0, 1) + vv(1, 1));
            REQUIRE(h.at(0, c) == vv(0, 0) + vv(0, 1) + vv(1, 0) + 3 * vv(1, 1));
        }
    }

    SECTION("3x3 down-right full expansion") {
        Tensor<float> v({9, C});
        for (std::size_t i = 0; i < v.numel(); ++i)
            v[i] = static_cast<float>(rng.next_range(0, 9));
        auto h = directional_scan(tape, v, 3, w2, 1.0f, Activation::linear, 0.1f,
                                  ScanDirection::down_right);
        for (std::size_t c = 0; c < C; ++c) {
            auto vv = [&](int i, int j) { return v.at(static_cast<std::size_t>(i) * 3 + j, c); };
            REQUIRE(h.at(0, c) == vv(0, 0));
            REQUIRE(h.at(1, c) == vv(0, 1) + vv(0, 0));
            REQUIRE(h.at(2, c) == vv(0, 2) + vv(0, 1) + vv(0, 0));
            REQUIRE(h.at(3, c) == vv(1, 0) + vv(0, 0));
            REQUIRE(h.at(4, c) == vv(1, 1) + vv(0, 1) + vv(1, 0) + 3 * vv(0, 0));
            REQUIRE(h.at(5, c) ==
                    vv(1, 2) + vv(0, 2) + vv(1, 1) + vv(1, 0) + 3 * vv(0, 1) + 5 * vv(0, 0));
            REQUIRE(h.at(6, c) == vv(2, 0) + vv(1, 0) + vv(0, 0));
            REQUIRE(h.at(7, c) ==
                    vv(2, 1) + vv(1, 1) + vv(2, 0) + vv(0, 1) + 3 * vv(1, 0) + 5 * vv(0, 0));
            REQUIRE(h.at(8, c) == vv(2, 2) + vv(1, 2) + vv(0, 2) + vv(2, 1) + vv(2, 0) +
                                      3 * vv(1, 1) + 5 * vv(0, 1) + 5 * vv(1, 0) +
                                      13 * vv(0, 0));
        }
    }
}

TEST_CASE("wavefront and sequential scans agree bit for bit, forward and backward") {
    Pcg32 rng(21);
    ThreadPool pool(3);
    const std::size_t C = 8;
    for (int S : {2, 3, 5, 8, 13}) {
        for (ScanDirection d : kAllDirections) {
            CAPTURE(S, static_cast<int>(d));
            auto v = rnd<float>({static_cast<std::size_t>(S) * S, C}, rng);
            auto w2 = rnd<float>({C, C}, rng, -0.3f, 0.3f);
            auto gw = rnd<float>({static_cast<std::size_t>(S) * S, C}, rng);
            v.set_requires_grad(true);
            w2.set_requires_grad(true);

            auto run = [&](ScanExec exec) {
                Tape<float> tape;
                auto h = directional_scan(tape, v, S, w2, 0.5f, Activation::leaky_relu, 0.1f, d,
                                          exec);
                auto loss = sum(tape, mul(tape, h, gw));
                tape.backward(loss);
                struct Out {
                    std::vector<float> h, gv, gw2;
                } o;
                o.h.assign(h.values().begin(), h.values().end());
                auto g1 = tape.grad(v);
                o.gv.assign(g1.begin(), g1.end());
                auto g2 = tape.grad(w2);
                o.gw2.assign(g2.begin(), g2.end());
                return o;
            };

            auto seq = run({ScanMode::sequential, nullptr});
            auto wf = run({ScanMode::wavefront, &pool, 1});
            REQUIRE(seq.h == wf.h);
            REQUIRE(seq.gv == wf.gv);
            REQUIRE(seq.gw2 == wf.gw2);
        }
    }
}

TEST_CASE("scan gradients agree with the op-composed oracle") {
    Pcg32 rng(31);
    const int S = 4;
    const std::size_t C = 6;
    for (ScanDirection d : kAllDirections) {
        CAPTURE(static_cast<int>(d));
        auto v = rnd<double>({static_cast<std::size_t>(S) * S, C}, rng);
        auto w2 = rnd<double>({C, C}, rng, -0.4, 0.4);
        auto weights = rnd<double>({static_cast<std::size_t>(S) * S, C}, rng);
        v.set_requires_grad(true);
        w2.set_requires_grad(true);

        Tape<double> t1;
        auto h1 = directional_scan(t1, v, S, w2, 0.5, Activation::leaky_relu, 0.1, d);
        t1.backward(sum(t1, mul(t1, h1, weights)));

        Tape<double> t2;
        auto h2 = scan_oracle(t2, v, S, w2, 0.5, Activation::leaky_relu, 0.1, d);
        t2.backward(sum(t2, mul(t2, h2, weights)));

        for (std::size_t i = 0; i < h1.numel(); ++i)
            REQUIRE(h1[i] == Catch::Approx(h2[i]).epsilon(1e-12).margin(1e-12));
        auto gv1 = t1.grad(v);
        auto gv2 = t2.grad(v);
        for (std::size_t i = 0; i < gv1.size(); ++i)
            REQUIRE(gv1[i] == Catch::Approx(gv2[i]).epsilon(1e-10).margin(1e-12));
        auto gw1 = t1.grad(w2);
        auto gw2 = t2.grad(w2);
        for (std::size_t i = 0; i < gw1.size(); ++i)
            REQUIRE(gw1[i] == Catch::Approx(gw2[i]).epsilon(1e-10).margin(1e-12));
    }
}

TEST_CASE("scan gradients agree with finite differences") {
    Pcg32 rng(41);
    const int S = 4;
    const std::size_t C = 8;
    // Inputs bounded into the positive regime so the leaky kink is never
    // crossed by the finite-difference probe.
    auto v = rnd<double>({static_cast<std::size_t>(S) * S, C}, rng, 0.5, 1.5);
    auto w2 = rnd<double>({C, C}, rng, -0.05, 0.05);
    auto weights = rnd<double>({static_cast<std::size_t>(S) * S, C}, rng);

    auto rep_v = grad_check(
        [&](Tape<double>& t, const Tensor<double>& q) {
            auto h = directional_scan(t, q, S, w2, 0.5, Activation::leaky_relu, 0.1,
                                      ScanDirection::down_right);
            return sum(t, mul(t, h, weights));
        },
        v);
    REQUIRE(rep_v.max_rel_err < 1e-4);

    auto rep_w = grad_check(
        [&](Tape<double>& t, const Tensor<double>& q) {
            auto h = directional_scan(t, v, S, q, 0.5, Activation::leaky_relu, 0.1,
                                      ScanDirection::up_left);
            return sum(t, mul(t, h, weights));
        },
        w2);
    REQUIRE(rep_w.max_rel_err < 1e-4);
}

TEST_CASE("propagation module produces grid logits and is fully connected") {
    Pcg32 rng(51);
    const int S = 8;
    const std::size_t C = 8;
    FeaturePropagation<double> fpm(S, C, 0.5, 0.1, rng);

    auto f = rnd<double>({C, static_cast<std::size_t>(S), static_cast<std::size_t>(S)}, rng);
    Tape<double> tape;
    tape.set_enabled(false);
    auto base = fpm.forward(tape, f);
    REQUIRE(base.shape() == Shape{1, static_cast<std::size_t>(S), static_cast<std::size_t>(S)});

    // Perturbing one far-corner input cell must move every output logit:
    // the four paths connect each cell pair in one leg or the other.
    auto f2 = f.clone();
    f2.at(3, 7, 7) += 0.25;
    auto moved = fpm.forward(tape, f2);
    for (std::size_t i = 0; i < moved.numel(); ++i)
        REQUIRE(std::abs(moved[i] - base[i]) > 1e-9);
}

TEST_CASE("propagation module gradients agree with finite differences") {
    Pcg32 rng(61);
    const int S = 3;
    const std::size_t C = 4;
    FeaturePropagation<double> fpm(S, C, 0.5, 0.1, rng);

    auto f = rnd<double>({C, static_cast<std::size_t>(S), static_cast<std::size_t>(S)}, rng);
    auto weights = rnd<double>({1, static_cast<std::size_t>(S), static_cast<std::size_t>(S)}, rng);

    auto rep = grad_check(
        [&](Tape<double>& t, const Tensor<double>& q) {
            return sum(t, mul(t, fpm.forward(t, q), weights));
        },
        f);
    REQUIRE(rep.max_rel_err < 1e-3);

    auto rep_w1 = grad_check(
        [&](Tape<double>& t, const Tensor<double>& q) {
            FeaturePropagation<double> probe = fpm;
            probe.paths[1].w1 = q;
            return sum(t, mul(t, probe.forward(t, f), weights));
        },
        fpm.paths[1].w1.clone());
    REQUIRE(rep_w1.max_rel_err < 1e-3);

    auto rep_w2 = grad_check(
        [&](Tape<double>& t, const Tensor<double>& q) {
            FeaturePropagation<double> probe = fpm;
            probe.paths[2].w2_second = q;
            return sum(t, mul(t, probe.forward(t, f), weights));
        },
        fpm.paths[2].w2_second.clone());
    REQUIRE(rep_w2.max_rel_err < 1e-3);

    auto rep_out = grad_check(
        [&](Tape<double>& t, const Tensor<double>& q) {
            FeaturePropagation<double> probe = fpm;
            probe.out_w = q;
            return sum(t, mul(t, probe.forward(t, f), weights));
        },
        fpm.out_w.clone());
    REQUIRE(rep_out.max_rel_err < 1e-3);
}
