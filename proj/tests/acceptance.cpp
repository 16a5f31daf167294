// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: twelve checks covering gradients, the propagation
// recurrence, scheduler equivalence, channel selection, loss gating,
// training targets, ablation direction, ground-truth substitution,
// determinism and the metric definitions. Each check prints one verdict
// line; the process exits nonzero if any check fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "refprop/checkpoint.hpp"
#include "refprop/config.hpp"
#include "refprop/dataset.hpp"
#include "refprop/eval.hpp"
#include "refprop/experiments.hpp"
#include "refprop/gradcheck.hpp"
#include "refprop/model.hpp"
#include "refprop/train.hpp"

namespace fs = std::filesystem;
using namespace refprop;

namespace {

int g_failures = 0;

void verdict(int idx, const char* name, bool ok, const std::string& detail) {
    std::printf("[%s] %2d. %s%s%s\n", ok ? "PASS" : "FAIL", idx, name,
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

Tensor<double> rand_tensor(Shape shape, Pcg32& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng.next_real();
    return t;
}

// How many epochs each ablation variant trains for; every variant gets the
// identical schedule so the comparison is fair.
constexpr int kAblationEpochs = 6;

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

bool criterion_gradients(std::string& detail) {
    const auto t0 = std::chrono::steady_clock::now();
    Pcg32 rng(2024);
    double worst_op = 0.0;
    std::string worst_op_name = "-";
    bool ok = true;

    auto op = [&](const char* name, auto f, Tensor<double> x, double tol = 1e-4) {
        auto rep = grad_check<double>(f, std::move(x));
        if (rep.max_rel_err > worst_op) {
            worst_op = rep.max_rel_err;
            worst_op_name = name;
        }
        if (!(rep.max_rel_err < tol)) {
            std::printf("      gradient FAIL %s: rel err %.3e (analytic %.6g numeric %.6g)\n",
                        name, rep.max_rel_err, rep.analytic, rep.numeric);
            ok = false;
        }
    };

    // Every check projects the op's output against a fixed random tensor, so
    // a misrouted element cannot cancel inside a plain sum (a transpose of
    // the right values in the wrong places would still fail).
    Tensor<double> b3 = rand_tensor({2, 3, 3}, rng);
    Tensor<double> mm_lhs = rand_tensor({3, 4}, rng);
    Tensor<double> conv_in = rand_tensor({2, 5, 5}, rng);
    Tensor<double> cc_other = rand_tensor({3, 3, 3}, rng);
    Tensor<double> sr_other = rand_tensor({4}, rng);
    auto wproj = [&](Shape shape) { return rand_tensor(std::move(shape), rng); };

    // Elementwise and reduction ops.
    Tensor<double> w_el = wproj({2, 3, 3});
    op("add",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, add(t, x, b3), w_el)); },
       rand_tensor({2, 3, 3}, rng));
    op("sub",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, sub(t, x, b3), w_el)); },
       rand_tensor({2, 3, 3}, rng));
    op("mul",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, mul(t, x, b3), w_el)); },
       rand_tensor({2, 3, 3}, rng));
    Tensor<double> cvec = rand_tensor({2}, rng);
    op("mul_channel",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, mul(t, x, cvec), w_el)); },
       rand_tensor({2, 3, 3}, rng));
    op("scale",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, scale(t, x, 1.7), w_el)); },
       rand_tensor({2, 3, 3}, rng));
    Tensor<double> w5 = wproj({5});
    op("one_minus",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, one_minus(t, x), w5)); },
       rand_tensor({5}, rng));
    op("sum", [&](Tape<double>& t, Tensor<double>& x) { return sum(t, x); },
       rand_tensor({4, 2, 2}, rng));
    Tensor<double> w_cat = wproj({5});
    op("concat_vec",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, concat_vec(t, x, cvec), w_cat));
       },
       rand_tensor({3}, rng));

    // Activations.
    Tensor<double> w_act = wproj({3, 4, 4});
    op("leaky_relu",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, leaky_relu(t, x, 0.1), w_act));
       },
       rand_tensor({3, 4, 4}, rng));
    op("sigmoid",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, sigmoid(t, x), w_act)); },
       rand_tensor({3, 4, 4}, rng));
    op("tanh",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, tanh_act(t, x), w_act)); },
       rand_tensor({3, 4, 4}, rng));
    Tensor<double> w6 = wproj({6});
    op("softmax",
       [&](Tape<double>& t, Tensor<double>& x) { return sum(t, mul(t, softmax(t, x), w6)); },
       rand_tensor({6}, rng));

    // Linear algebra and convolution.
    Tensor<double> mm_w = rand_tensor({4, 5}, rng);
    Tensor<double> w_mm = wproj({3, 5});
    op("matmul",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, matmul(t, x, mm_w), w_mm));
       },
       rand_tensor({3, 4}, rng));
    op("matmul_rhs",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, matmul(t, mm_lhs, x), w_mm));
       },
       rand_tensor({4, 5}, rng));
    Tensor<double> cw = rand_tensor({3, 2, 3, 3}, rng);
    Tensor<double> cb = rand_tensor({3}, rng);
    Tensor<double> w_cv1 = wproj({3, 3, 3});
    op("conv2d_input",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, conv2d(t, x, cw, cb, 2, 1, 2), w_cv1));
       },
       rand_tensor({2, 7, 7}, rng));
    Tensor<double> w_cv2 = wproj({3, 5, 5});
    op("conv2d_weight",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, conv2d(t, conv_in, x, cb, 1, 1), w_cv2));
       },
       rand_tensor({3, 2, 3, 3}, rng));

    // Normalization.
    Tensor<double> gamma = rand_tensor({3}, rng, 0.5, 1.5);
    Tensor<double> beta = rand_tensor({3}, rng);
    op("batch_norm_train",
       [&](Tape<double>& t, Tensor<double>& x) {
           BnBatch<double> batch;
           return sum(t, mul(t, batch_norm2d(t, x, gamma, beta,
                                             static_cast<BnStats<double>*>(nullptr),
                                             BnMode::train, 1e-5, 0.9, &batch),
                             w_act));
       },
       rand_tensor({3, 4, 4}, rng));
    BnStats<double> stats(3);
    for (int c = 0; c < 3; ++c) {
        stats.mean[c] = 0.1 * c;
        stats.var[c] = 1.0 + 0.2 * c;
    }
    op("batch_norm_eval",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, batch_norm2d(t, x, gamma, beta, &stats, BnMode::eval), w_act));
       },
       rand_tensor({3, 4, 4}, rng));

    // Resampling and layout.
    Tensor<double> w_up = wproj({2, 7, 9});
    op("bilinear_up",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, bilinear_resize(t, x, 7, 9), w_up));
       },
       rand_tensor({2, 4, 4}, rng));
    Tensor<double> w_dn = wproj({2, 3, 3});
    op("bilinear_down",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, bilinear_resize(t, x, 3, 3), w_dn));
       },
       rand_tensor({2, 6, 6}, rng));
    Tensor<double> w_rows = wproj({4, 3});
    op("chw_to_rows",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, chw_to_rows(t, x), w_rows));
       },
       rand_tensor({3, 2, 2}, rng));
    Tensor<double> w_chw = wproj({3, 2, 2});
    op("rows_to_chw",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, rows_to_chw(t, x, 2, 2), w_chw));
       },
       rand_tensor({4, 3}, rng));
    Tensor<double> w_tr = wproj({5, 3});
    op("transpose2d",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, transpose2d(t, x), w_tr));
       },
       rand_tensor({3, 5}, rng));
    Tensor<double> w_cc = wproj({5, 3, 3});
    op("concat_channels",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, concat_channels(t, {x, cc_other}), w_cc));
       },
       rand_tensor({2, 3, 3}, rng));
    Tensor<double> w_sc = wproj({2, 2});
    op("select_channel",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, select_channel(t, x, 1), w_sc));
       },
       rand_tensor({3, 2, 2}, rng));
    Tensor<double> w_sr = wproj({3});
    op("select_row",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, select_row(t, x, 2), w_sr));
       },
       rand_tensor({4, 3}, rng));
    Tensor<double> w_st = wproj({2, 4});
    op("stack_rows",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, stack_rows(t, {x, sr_other}), w_st));
       },
       rand_tensor({4}, rng));
    Tensor<double> w_gap = wproj({2, 1, 1});
    op("global_avg_pool",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, global_avg_pool(t, x), w_gap));
       },
       rand_tensor({2, 3, 3}, rng));
    Tensor<double> w_bc = wproj({2, 3, 4});
    op("broadcast_spatial",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, broadcast_spatial(t, x, 3, 4), w_bc));
       },
       rand_tensor({2, 1, 1}, rng));
    Tensor<double> w_emb = wproj({3, 3});
    op("embedding_lookup",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, embedding_lookup(t, x, {0, 2, 2}), w_emb));
       },
       rand_tensor({4, 3}, rng));

    // Losses.
    Tensor<double> targets({2, 3, 3});
    for (std::size_t i = 0; i < targets.numel(); ++i) targets[i] = (i % 3 == 0) ? 1.0 : 0.0;
    op("bce_with_logits",
       [&](Tape<double>& t, Tensor<double>& x) { return bce_with_logits(t, x, targets); },
       rand_tensor({2, 3, 3}, rng));

    // Recurrent scan, input and recurrent-weight sides, all directions.
    Tensor<double> w2 = rand_tensor({3, 3}, rng, -0.4, 0.4);
    Tensor<double> w_scan = wproj({9, 3});
    for (ScanDirection d : kAllDirections) {
        op("scan_input",
           [&](Tape<double>& t, Tensor<double>& x) {
               return sum(t, mul(t, directional_scan(t, x, 3, w2, 0.5, Activation::leaky_relu,
                                                     0.1, d),
                                 w_scan));
           },
           rand_tensor({9, 3}, rng));
    }
    Tensor<double> scan_v = rand_tensor({9, 3}, rng);
    op("scan_weight",
       [&](Tape<double>& t, Tensor<double>& x) {
           return sum(t, mul(t, directional_scan(t, scan_v, 3, x, 0.5, Activation::leaky_relu,
                                                 0.1, ScanDirection::down_right),
                             w_scan));
       },
       rand_tensor({3, 3}, rng, -0.4, 0.4));

    // Composed micro-model: grid 4, widths 4, coarse plus refinement loss,
    // checked against the image and representative parameters on each path.
    TrainConfig mc;
    mc.image_h = mc.image_w = 16;
    mc.grid_s = 4;
    mc.c_v = mc.c_l = mc.c_f = mc.d_a = mc.c_seg = 4;
    mc.refine_width = 4;
    mc.n_stages = 3;
    validate_config(mc);
    Pcg32 mrng(model_init_seed(mc.seed));
    Model<double> model(mc, mrng);
    Tensor<double> image = rand_tensor({3, 16, 16}, rng, 0.0, 1.0);
    const std::vector<int> ids = {1, 4, 2};
    auto target = make_grid_target<double>(7, 7, 16, 16, 4);
    Tensor<double> m_full({16, 16});
    for (int i = 5; i < 11; ++i)
        for (int j = 4; j < 10; ++j) m_full.at(i, j) = 1;
    Tensor<double> m_ds = downsample_mask(m_full, 8, 8);
    GtOverride<double> pin;
    pin.force_cell = true;
    pin.cell_i = target.center_i;
    pin.cell_j = target.center_j;

    auto full_loss = [&](Tape<double>& t) {
        auto o = model.forward_coarse(t, image, ids, BnMode::train, nullptr, &pin);
        Tensor<double> l = add(t, scale(t, identifying_loss(t, o.id_map, target), 10.0),
                               scale(t, segmentation_loss(t, o.mask_stack, target, m_ds), 0.03));
        Tensor<double> fin = model.forward_refine(t, image, o.coarse, BnMode::train, nullptr);
        return add(t, l, scale(t, bce_with_logits(t, fin, m_full), 0.5));
    };

    double worst_comp = 0.0;
    std::string worst_comp_name = "-";
    auto comp = [&](const char* name, Tensor<double> x) {
        auto rep = grad_check<double>(
            [&](Tape<double>& t, Tensor<double>&) { return full_loss(t); }, std::move(x));
        if (rep.max_rel_err > worst_comp) {
            worst_comp = rep.max_rel_err;
            worst_comp_name = name;
        }
        if (!(rep.max_rel_err < 1e-3)) {
            std::printf("      composite FAIL %s: rel err %.3e\n", name, rep.max_rel_err);
            ok = false;
        }
    };
    comp("image", image);
    auto param = [&](const std::string& needle) -> Tensor<double> {
        for (auto& [name, tensor] : model.reg.params)
            if (name.find(needle) != std::string::npos) return tensor;
        throw std::runtime_error("no parameter matches " + needle);
    };
    comp("language_embedding", param("embed"));
    comp("propagation_weight", param("fpm.down_right.w2_first"));
    comp("refine_weight", param("refine.c1.conv.w"));
    comp("backbone_weight", param("enc.backbone.stem.conv.w"));

    const double secs = seconds_since(t0);
    if (secs >= 120.0) ok = false;
    detail = fmt("worst op %.1e (%s), worst composite %.1e (%s), %.0fs", worst_op,
                 worst_op_name.c_str(), worst_comp, worst_comp_name.c_str(), secs);
    return ok;
}

// ---------------------------------------------------------------------------
// 2. Propagation recurrence closed forms
// ---------------------------------------------------------------------------

bool criterion_closed_forms(std::string& detail) {
    // Identity weights, alpha = 1, linear activation: each hidden state is
    // the cell input plus the plain sum of its visited neighbors, so the
    // scan must reproduce hand-expanded integer closed forms exactly.
    bool ok = true;
    auto ident = [](std::size_t c) {
        Tensor<double> w({c, c});
        for (std::size_t i = 0; i < c; ++i) w.at(i, i) = 1.0;
        return w;
    };

    {
        // 2x2 grid, C = 2; channels carry different integers.
        const std::size_t C = 2;
        Tensor<double> f({4, C});
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < C; ++c) f.at(r, c) = static_cast<double>(3 * r + c + 1);
        Tape<double> tape;
        tape.set_enabled(false);
        Tensor<double> h = directional_scan(tape, f, 2, ident(C), 1.0, Activation::linear, 0.0,
                                            ScanDirection::down_right);
        for (std::size_t c = 0; c < C; ++c) {
            const double f00 = f.at(0, c), f01 = f.at(1, c), f10 = f.at(2, c), f11 = f.at(3, c);
            ok = ok && h.at(0, c) == f00;
            ok = ok && h.at(1, c) == f01 + f00;
            ok = ok && h.at(2, c) == f10 + f00;
            ok = ok && h.at(3, c) == f11 + f10 + f01 + 3 * f00;
        }
    }
    {
        // 3x3 grid, C = 1, every coefficient expanded by hand.
        Tensor<double> f({9, 1});
        for (std::size_t r = 0; r < 9; ++r) f.at(r, 0) = static_cast<double>(r + 2);
        Tape<double> tape;
        tape.set_enabled(false);
        Tensor<double> h = directional_scan(tape, f, 3, ident(1), 1.0, Activation::linear, 0.0,
                                            ScanDirection::down_right);
        auto F = [&](int i, int j) { return f.at(static_cast<std::size_t>(i) * 3 + j, 0); };
        auto H = [&](int i, int j) { return h.at(static_cast<std::size_t>(i) * 3 + j, 0); };
        ok = ok && H(0, 0) == F(0, 0);
        ok = ok && H(0, 1) == F(0, 1) + F(0, 0);
        ok = ok && H(0, 2) == F(0, 2) + F(0, 1) + F(0, 0);
        ok = ok && H(1, 0) == F(1, 0) + F(0, 0);
        ok = ok && H(1, 1) == F(1, 1) + F(1, 0) + F(0, 1) + 3 * F(0, 0);
        ok = ok && H(1, 2) == F(1, 2) + F(0, 2) + F(1, 1) + F(1, 0) + 3 * F(0, 1) + 5 * F(0, 0);
        ok = ok && H(2, 0) == F(2, 0) + F(1, 0) + F(0, 0);
        ok = ok && H(2, 1) == F(2, 1) + F(1, 1) + F(2, 0) + F(0, 1) + 3 * F(1, 0) + 5 * F(0, 0);
        ok = ok && H(2, 2) == F(2, 2) + F(1, 2) + F(2, 1) + F(0, 2) + F(2, 0) + 3 * F(1, 1) +
                                  5 * F(0, 1) + 5 * F(1, 0) + 13 * F(0, 0);
    }
    detail = ok ? "2x2 and 3x3 expansions exact" : "hand expansion mismatch";
    return ok;
}

// ---------------------------------------------------------------------------
// 3. Scheduler equivalence
// ---------------------------------------------------------------------------

bool criterion_scheduler(std::string& detail) {
    const auto t0 = std::chrono::steady_clock::now();
    Pcg32 rng(77);
    ThreadPool pool(3);
    const std::size_t C = 6;
    Tensor<float> w2({C, C});
    for (std::size_t i = 0; i < w2.numel(); ++i)
        w2[i] = static_cast<float>(rng.next_real() - 0.5) * 0.6f;

    long compared = 0;
    for (int S = 2; S <= 13; ++S) {
        for (ScanDirection d : kAllDirections) {
            for (int trial = 0; trial < 100; ++trial) {
                Tensor<float> v({static_cast<std::size_t>(S) * S, C});
                for (std::size_t i = 0; i < v.numel(); ++i)
                    v[i] = static_cast<float>(rng.next_real() * 4.0 - 2.0);
                Tape<float> tape;
                tape.set_enabled(false);
                ScanExec seq;
                Tensor<float> a = directional_scan(tape, v, S, w2, 0.5f,
                                                   Activation::leaky_relu, 0.1f, d, seq);
                ScanExec wav;
                wav.mode = ScanMode::wavefront;
                wav.pool = &pool;
                wav.min_batch_for_pool = 2;
                Tensor<float> b = directional_scan(tape, v, S, w2, 0.5f,
                                                   Activation::leaky_relu, 0.1f, d, wav);
                for (std::size_t i = 0; i < a.numel(); ++i)
                    if (std::memcmp(&a[i], &b[i], sizeof(float)) != 0) {
                        detail = fmt("S=%d dir=%d trial=%d element %zu differs", S,
                                     static_cast<int>(d), trial, i);
                        return false;
                    }
                ++compared;
            }
        }
    }
    detail = fmt("%ld scans bit-identical across schedulers, %.1fs", compared,
                 seconds_since(t0));
    return true;
}

// ---------------------------------------------------------------------------
// 4. Reachability
// ---------------------------------------------------------------------------

bool criterion_reachability(std::string& detail) {
    const int S = 8;
    const std::size_t C = 32;
    Pcg32 rng(5150);
    FeaturePropagation<double> fpm(S, C, 0.5, 0.1, rng);
    Tensor<double> x({C, S, S});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.next_real() - 0.5;
    Tape<double> tape;
    tape.set_enabled(false);
    Tensor<double> base = fpm.forward(tape, x);

    double min_change = 1e300;
    for (int ci = 0; ci < S; ++ci)
        for (int cj = 0; cj < S; ++cj) {
            const std::size_t cell = static_cast<std::size_t>(ci) * S + cj;
            const std::size_t ch = cell % C;
            Tensor<double> p = x.clone();
            p[(ch * S + ci) * S + cj] += 0.25;
            Tensor<double> out = fpm.forward(tape, p);
            for (std::size_t k = 0; k < out.numel(); ++k)
                min_change = std::min(min_change, std::abs(out[k] - base[k]));
        }
    detail = fmt("smallest logit response %.3e over %d perturbations", min_change, S * S);
    return min_change > 1e-9;
}

// ---------------------------------------------------------------------------
// 5. Channel mapping
// ---------------------------------------------------------------------------

bool criterion_channel_mapping(std::string& detail) {
    Pcg32 rng(31);
    for (int S = 1; S <= 13; ++S) {
        // Bijection: every cell owns a distinct channel covering [0, S*S).
        std::set<int> seen;
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                const int c = channel_index(i, j, S);
                if (c < 0 || c >= S * S || !seen.insert(c).second) {
                    detail = fmt("channel_index not a bijection at S=%d", S);
                    return false;
                }
            }

        // Lookup equals brute force, including injected ties.
        for (int trial = 0; trial < 60; ++trial) {
            Tensor<float> map({1, static_cast<std::size_t>(S), static_cast<std::size_t>(S)});
            for (std::size_t k = 0; k < map.numel(); ++k)
                map[k] = static_cast<float>(rng.next_real() * 2.0 - 1.0);
            if (trial % 3 == 0 && S > 1) {
                // Duplicate the maximum into several cells; the first
                // row-major occurrence must win.
                float mx = map[0];
                for (std::size_t k = 1; k < map.numel(); ++k) mx = std::max(mx, map[k]);
                for (int dup = 0; dup < 3; ++dup)
                    map[rng.next_below(static_cast<std::uint32_t>(map.numel()))] = mx;
            }
            int bi = 0, bj = 0;
            float best = map[0];
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                    const float v = map[static_cast<std::size_t>(i) * S + j];
                    if (v > best) {
                        best = v;
                        bi = i;
                        bj = j;
                    }
                }
            Tensor<float> stack({static_cast<std::size_t>(S) * S, 2, 2});
            for (std::size_t k = 0; k < stack.numel(); ++k)
                stack[k] = static_cast<float>(rng.next_real());
            Tape<float> tape;
            tape.set_enabled(false);
            Tensor<float> picked = channel_lookup(tape, stack, map);
            const int expect = channel_index(bi, bj, S);
            for (std::size_t k = 0; k < 4; ++k)
                if (picked[k] != stack[static_cast<std::size_t>(expect) * 4 + k]) {
                    detail = fmt("lookup mismatch at S=%d trial=%d", S, trial);
                    return false;
                }
        }
    }
    detail = "bijection and lookup exact for S=1..13";
    return true;
}

// ---------------------------------------------------------------------------
// 6. Loss gating
// ---------------------------------------------------------------------------

bool criterion_loss_gating(std::string& detail) {
    TrainConfig cfg;  // desk defaults
    Pcg32 rng(model_init_seed(cfg.seed));
    Model<float> model(cfg, rng);

    // A 40x4 pixel strip downsamples to exactly 10 coarse mask pixels, so a
    // substituted prediction of k strip pixels has coarse IoU k/10.
    SampleTensors<float> st;
    Pcg32 irng(9);
    st.image = Tensor<float>({3, 64, 64});
    for (std::size_t i = 0; i < st.image.numel(); ++i)
        st.image[i] = static_cast<float>(irng.next_real());
    st.ids = {1, 2, 3};
    st.gt = make_grid_target<float>(20, 2, 64, 64, 8);
    st.m_full = Tensor<float>({64, 64});
    for (int i = 0; i < 40; ++i)
        for (int j = 0; j < 4; ++j) st.m_full.at(i, j) = 1;
    st.m_ds = downsample_mask(st.m_full, 16, 16);

    auto run_with_pred = [&](int k, Tape<float>& tape, StepLosses& out) {
        GtOverride<float> ov;
        ov.substitute_mask = true;
        ov.mask_logits = Tensor<float>({16, 16}, -5.0f);
        for (int b = 0; b < k; ++b) ov.mask_logits.at(b, 0) = 5.0f;
        BnRecorder<float> rec;
        out = sample_pass(model, st, tape, rec, &ov);
    };

    auto refine_grads = [&](Tape<float>& tape, bool& any_nonzero, bool& all_zero) {
        any_nonzero = false;
        all_zero = true;
        for (auto& [name, p] : model.reg.params) {
            if (name.rfind("refine", 0) != 0) continue;
            if (!tape.has_grad(p)) continue;
            auto g = tape.grad(p);
            for (float v : g)
                if (v != 0.0f) {
                    any_nonzero = true;
                    all_zero = false;
                }
        }
    };

    // Below the threshold: 2/10 = 0.2.
    Tape<float> t_closed;
    StepLosses closed;
    run_with_pred(2, t_closed, closed);
    bool nz = false, z = true;
    refine_grads(t_closed, nz, z);
    const bool closed_ok = !closed.gate_open && closed.ref == 0.0 && z && !nz;

    // Exactly at the threshold: 3/10 = 0.3 opens the gate (inclusive).
    Tape<float> t_edge;
    StepLosses edge;
    run_with_pred(3, t_edge, edge);
    refine_grads(t_edge, nz, z);
    const bool edge_ok = edge.gate_open && edge.ref > 0.0 && nz;

    // Clearly above: 6/10.
    Tape<float> t_open;
    StepLosses open_l;
    run_with_pred(6, t_open, open_l);
    refine_grads(t_open, nz, z);
    const bool open_ok = open_l.gate_open && open_l.ref > 0.0 && nz;

    detail = fmt("iou 0.2 silent=%s, 0.3 active=%s, 0.6 active=%s", closed_ok ? "yes" : "NO",
                 edge_ok ? "yes" : "NO", open_ok ? "yes" : "NO");
    return closed_ok && edge_ok && open_ok;
}

// ---------------------------------------------------------------------------
// 7. Grid-target law
// ---------------------------------------------------------------------------

bool criterion_grid_target(std::string& detail) {
    Pcg32 rng(404);
    for (int trial = 0; trial < 10000; ++trial) {
        const int S = 1 + static_cast<int>(rng.next_below(13));
        const int H = S * (1 + static_cast<int>(rng.next_below(8)));
        const int W = S * (1 + static_cast<int>(rng.next_below(8)));
        const int r = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(H)));
        const int c = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(W)));
        auto target = make_grid_target<double>(r, c, H, W, S);

        const int ci = r * S / H, cj = c * S / W;
        if (target.center_i != ci || target.center_j != cj) {
            detail = fmt("center cell mismatch at trial %d", trial);
            return false;
        }
        std::vector<std::pair<int, int>> expect;
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                const bool pos = std::max(std::abs(i - ci), std::abs(j - cj)) <= 1;
                const double y = target.y[static_cast<std::size_t>(i) * S + j];
                if (y != (pos ? 1.0 : 0.0)) {
                    detail = fmt("label mismatch at trial %d cell (%d,%d)", trial, i, j);
                    return false;
                }
                if (pos) expect.emplace_back(i, j);
            }
        if (target.pos != expect) {
            detail = fmt("positive set mismatch at trial %d", trial);
            return false;
        }
    }
    detail = "10000 random centers match the Chebyshev-1 oracle";
    return true;
}

// ---------------------------------------------------------------------------
// 8..11 share the generated dataset and the trained model
// ---------------------------------------------------------------------------

struct Shared {
    fs::path scratch;
    fs::path data_dir;
    std::vector<TrainingSample> train_set, val_set;
    Model<float> model;                 // trained full model (criterion 8)
    bool model_ready = false;
    std::vector<EvalReport> reports;    // every report emitted, for 12
};

bool criterion_training(Shared& sh, std::string& detail) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig cfg;  // desk defaults: 64x64, S=8, 2000/200, seed 42
    cfg.early_stop_iou = 0.60;
    cfg.early_stop_acc = 0.90;

    sh.data_dir = sh.scratch / "data";
    build_dataset(cfg.n_train, cfg.n_val, static_cast<std::uint64_t>(cfg.seed), sh.data_dir);
    sh.train_set = load_split(sh.data_dir / "manifest_train.jsonl");
    sh.val_set = load_split(sh.data_dir / "manifest_val.jsonl");

    Pcg32 rng(model_init_seed(cfg.seed));
    sh.model = Model<float>(cfg, rng);
    const fs::path run_dir = sh.scratch / "train_full";
    fs::create_directories(run_dir);
    std::ofstream log(run_dir / "metrics.jsonl", std::ios::binary);
    auto res = train_model(sh.model, sh.train_set, sh.val_set, run_dir, &log);
    sh.model_ready = true;
    sh.reports.push_back(res.final_val);

    const double mins = seconds_since(t0) / 60.0;
    const bool ok = res.epochs_run <= cfg.epochs && res.final_val.grid_accuracy >= 0.90 &&
                    res.final_val.mean_iou >= 0.60 && mins <= 45.0;
    detail = fmt("%d epochs, grid_acc %.3f, mean_iou %.3f, %.1f min single-threaded"
                 " (budget 45 min on 4 cores)",
                 res.epochs_run, res.final_val.grid_accuracy, res.final_val.mean_iou, mins);
    return ok;
}

bool criterion_ablation(Shared& sh, std::vector<AblationRow>& rows, std::string& detail) {
    TrainConfig cfg;
    cfg.epochs = kAblationEpochs;
    rows = ablation_run<float>(cfg, sh.train_set, sh.val_set, sh.scratch / "ablation", nullptr);
    for (const auto& r : rows) sh.reports.push_back(r.report);

    double base_iou = 0, iem_iou = 0, full_iou = 0;
    for (const auto& r : rows) {
        if (r.variant == "baseline") base_iou = r.report.mean_iou;
        if (r.variant == "iem") iem_iou = r.report.mean_iou;
        if (r.variant == "full") full_iou = r.report.mean_iou;
    }
    const bool ok = full_iou >= base_iou + 0.03 && full_iou >= iem_iou + 0.01;
    detail = fmt("mean IoU at %d epochs: baseline %.3f, iem %.3f, full %.3f", kAblationEpochs,
                 base_iou, iem_iou, full_iou);
    return ok;
}

bool criterion_gt_substitution(Shared& sh, std::string& detail) {
    if (!sh.model_ready) {
        detail = "skipped: no trained model";
        return false;
    }
    EvalReport plain = evaluate_model(sh.model, sh.val_set, SubMode::none);
    EvalReport with_id = gt_substitution_run(sh.model, sh.val_set, SubMode::id_branch);
    EvalReport with_seg = gt_substitution_run(sh.model, sh.val_set, SubMode::seg_branch);
    sh.reports.push_back(plain);
    sh.reports.push_back(with_id);
    sh.reports.push_back(with_seg);
    const bool ok =
        with_id.mean_iou >= plain.mean_iou && with_seg.mean_iou >= plain.mean_iou;
    detail = fmt("mean IoU plain %.3f, gt-cell %.3f, gt-mask %.3f", plain.mean_iou,
                 with_id.mean_iou, with_seg.mean_iou);
    return ok;
}

bool files_identical(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa || !fb) return false;
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return ba == bb;
}

bool criterion_determinism(Shared& sh, std::string& detail) {
    TrainConfig cfg;

    // Dataset bytes across two generations.
    const fs::path d1 = sh.scratch / "det_data1", d2 = sh.scratch / "det_data2";
    build_dataset(cfg.n_train, cfg.n_val, static_cast<std::uint64_t>(cfg.seed), d1);
    build_dataset(cfg.n_train, cfg.n_val, static_cast<std::uint64_t>(cfg.seed), d2);
    std::vector<fs::path> rel;
    for (const auto& e : fs::recursive_directory_iterator(d1))
        if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), d1));
    std::sort(rel.begin(), rel.end());
    if (rel.empty()) {
        detail = "dataset generation produced no files";
        return false;
    }
    for (const auto& r : rel)
        if (!files_identical(d1 / r, d2 / r)) {
            detail = "dataset bytes differ: " + r.string();
            return false;
        }

    // First three optimizer steps and the resulting checkpoint, twice.
    std::array<std::vector<double>, 2> losses;
    std::array<fs::path, 2> ckpts = {sh.scratch / "det_a.ckpt", sh.scratch / "det_b.ckpt"};
    for (int run = 0; run < 2; ++run) {
        Pcg32 rng(model_init_seed(cfg.seed));
        Model<float> model(cfg, rng);
        auto res = train_model(model, sh.train_set, sh.val_set, sh.scratch / "det_run", nullptr,
                               3);
        losses[static_cast<std::size_t>(run)] = res.step_losses;
        save_checkpoint(ckpts[static_cast<std::size_t>(run)],
                        snapshot_registry(model.reg, config_to_string(cfg)));
    }
    if (losses[0].size() != 3 || losses[0] != losses[1]) {
        detail = "first-3-step losses differ between runs";
        return false;
    }
    if (!files_identical(ckpts[0], ckpts[1])) {
        detail = "checkpoint bytes differ between runs";
        return false;
    }
    detail = fmt("%zu dataset files, 3-step losses and checkpoint bytes identical", rel.size());
    return true;
}

// ---------------------------------------------------------------------------
// 12. Metrics oracle
// ---------------------------------------------------------------------------

bool criterion_metrics(Shared& sh, std::string& detail) {
    Pcg32 rng(616);
    std::vector<double> ious;
    std::size_t inter_sum = 0, uni_sum = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t H = 24, W = 24;
        Tensor<float> logits({H, W});
        Tensor<float> mask({H, W});
        // A few degenerate pairs exercise the empty-set conventions.
        const int kind = trial % 250 == 0 ? trial / 250 : 4;
        for (std::size_t i = 0; i < H * W; ++i) {
            logits[i] = kind == 0 || kind == 2 ? -1.0f
                                               : static_cast<float>(rng.next_real() * 2.0 - 1.0);
            mask[i] = kind == 0 || kind == 1 ? 0.0f
                                             : static_cast<float>(rng.next_below(2));
        }

        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < H * W; ++i) {
            const bool p = logits[i] >= 0.0f;
            const bool g = mask[i] >= 0.5f;
            inter += (p && g) ? 1u : 0u;
            uni += (p || g) ? 1u : 0u;
        }
        const double oracle = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
        const double got = static_cast<double>(sample_iou(logits, mask));
        if (got != oracle) {
            detail = fmt("sample_iou mismatch at trial %d: %.17g vs %.17g", trial, got, oracle);
            return false;
        }
        ious.push_back(got);
        inter_sum += inter;
        uni_sum += uni;
    }

    EvalReport rep = finalize_report(ious, inter_sum, uni_sum, 0, false);
    for (std::size_t k = 0; k < kPrThresholds.size(); ++k) {
        int cnt = 0;
        for (double v : ious) cnt += v > kPrThresholds[k] ? 1 : 0;
        const double oracle = static_cast<double>(cnt) / static_cast<double>(ious.size());
        if (rep.pr_at[k] != oracle) {
            detail = fmt("Pr@%.1f mismatch: %.17g vs %.17g", kPrThresholds[k], rep.pr_at[k],
                         oracle);
            return false;
        }
    }

    sh.reports.push_back(rep);
    for (const EvalReport& r : sh.reports)
        for (std::size_t k = 1; k < r.pr_at.size(); ++k)
            if (r.pr_at[k] > r.pr_at[k - 1]) {
                detail = "Pr@X monotonicity violated in an emitted report";
                return false;
            }
    detail = fmt("1000 pairs exact, Pr@X monotone across %zu emitted reports",
                 sh.reports.size());
    return true;
}

}  // namespace

int main() {
    std::printf("acceptance gate: 12 checks\n");
    Shared sh;
    sh.scratch = fs::current_path() / "acceptance_scratch";
    std::error_code ec;
    fs::remove_all(sh.scratch, ec);
    fs::create_directories(sh.scratch);

    auto guard = [](int idx, const char* name, auto&& fn) {
        std::string detail;
        bool ok = false;
        try {
            ok = fn(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        verdict(idx, name, ok, detail);
    };

    guard(1, "gradient suite", [&](std::string& d) { return criterion_gradients(d); });
    guard(2, "propagation closed forms", [&](std::string& d) { return criterion_closed_forms(d); });
    guard(3, "scheduler equivalence", [&](std::string& d) { return criterion_scheduler(d); });
    guard(4, "reachability", [&](std::string& d) { return criterion_reachability(d); });
    guard(5, "channel mapping", [&](std::string& d) { return criterion_channel_mapping(d); });
    guard(6, "loss gating", [&](std::string& d) { return criterion_loss_gating(d); });
    guard(7, "grid-target law", [&](std::string& d) { return criterion_grid_target(d); });
    guard(8, "training target", [&](std::string& d) { return criterion_training(sh, d); });
    std::vector<AblationRow> rows;
    guard(9, "ablation direction",
          [&](std::string& d) { return criterion_ablation(sh, rows, d); });
    if (!rows.empty()) std::fputs(format_ablation_table(rows).c_str(), stdout);
    guard(10, "gt-substitution dominance",
          [&](std::string& d) { return criterion_gt_substitution(sh, d); });
    guard(11, "determinism", [&](std::string& d) { return criterion_determinism(sh, d); });
    guard(12, "metrics oracle", [&](std::string& d) { return criterion_metrics(sh, d); });

    std::printf("%d of 12 checks passed\n", 12 - g_failures);
    return g_failures == 0 ? 0 : 1;
}
