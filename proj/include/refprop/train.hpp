// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "refprop/adam.hpp"
#include "refprop/checkpoint.hpp"
#include "refprop/eval.hpp"
#include "refprop/model.hpp"
#include "refprop/refine.hpp"

namespace refprop {

// ---------------------------------------------------------------------------
// One sample, forward + backward
// ---------------------------------------------------------------------------

struct StepLosses {
    double total = 0, ide = 0, seg = 0, ref = 0;
    bool gate_open = false;
};

/// Runs one training sample on its own tape: forward, the three loss terms
/// with the refinement gate, backward. The refinement stage is skipped
/// entirely when the gate is closed, which makes its zero-gradient exact.
/// ov lets callers pin a branch output (the gate tests drive the coarse
/// mask to an exact overlap this way).
template <typename T>
StepLosses sample_pass(Model<T>& model, const SampleTensors<T>& st, Tape<T>& tape,
                       BnRecorder<T>& rec, const GtOverride<T>* ov = nullptr) {
    const LossWeights<T> w{static_cast<T>(model.cfg.w_ide), static_cast<T>(model.cfg.w_seg),
                           static_cast<T>(model.cfg.w_ref), static_cast<T>(model.cfg.theta)};
    auto o = model.forward_coarse(tape, st.image, st.ids, BnMode::train, &rec, ov);
    StepLosses out;
    Tensor<T> total;
    if (model.has_ident()) {
        Tensor<T> l_ide = identifying_loss(tape, o.id_map, st.gt);
        Tensor<T> l_seg = segmentation_loss(tape, o.mask_stack, st.gt, st.m_ds);
        out.ide = static_cast<double>(l_ide[0]);
        out.seg = static_cast<double>(l_seg[0]);
        total = add(tape, scale(tape, l_ide, w.w_ide), scale(tape, l_seg, w.w_seg));
    } else {
        Tensor<T> l_seg = bce_with_logits(tape, o.coarse, st.m_ds);
        out.seg = static_cast<double>(l_seg[0]);
        total = scale(tape, l_seg, w.w_seg);
    }
    if (model.has_refine()) {
        const T iou = coarse_iou(o.coarse, st.m_ds);
        if (iou >= w.theta) {
            out.gate_open = true;
            Tensor<T> final_logits =
                model.forward_refine(tape, st.image, o.coarse, BnMode::train, &rec);
            Tensor<T> l_ref = bce_with_logits(tape, final_logits, st.m_full);
            out.ref = static_cast<double>(l_ref[0]);
            total = add(tape, total, scale(tape, l_ref, w.w_ref));
        }
    }
    out.total = static_cast<double>(total[0]);
    if (!std::isfinite(out.total))
        throw std::runtime_error("training diverged: non-finite loss");
    tape.backward(total);
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

template <typename T>
struct TrainResult {
    int epochs_run = 0;
    int steps_run = 0;
    EvalReport final_val;
    std::filesystem::path final_checkpoint;
    std::vector<double> step_losses;  // batch-mean total loss per optimizer step
};

namespace detail {

/// Seeded Fisher-Yates; the epoch stream is disjoint from the dataset's.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Pcg32 rng(derive_seed(seed, 10, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.next_below(static_cast<std::uint32_t>(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

}  // namespace detail

/// Trains in logical batches: every sample runs on its own tape (optionally
/// on worker threads), gradients and norm statistics merge in sample index
/// order, so the result is independent of the thread count. Writes one JSONL
/// metrics line and one checkpoint per epoch.
///
/// max_steps > 0 stops after that many optimizer steps (validation and
/// checkpoints are skipped); used by determinism checks.
template <typename T>
TrainResult<T> train_model(Model<T>& model, const std::vector<TrainingSample>& train_set,
                           const std::vector<TrainingSample>& val_set,
                           const std::filesystem::path& out_dir, std::ostream* log_jsonl,
                           int max_steps = 0) {
    if (train_set.empty()) throw std::invalid_argument("train_model: empty training set");
    const TrainConfig& cfg = model.cfg;
    const bool full_run = max_steps <= 0;
    if (full_run) std::filesystem::create_directories(out_dir);
    AdamOptimizer<T> opt(model.reg, static_cast<T>(cfg.lr));
    opt.beta1 = static_cast<T>(cfg.adam_beta1);
    opt.beta2 = static_cast<T>(cfg.adam_beta2);
    opt.eps = static_cast<T>(cfg.adam_eps);
    GradBuffers<T> grads(model.reg);
    TrainResult<T> result;

    const std::size_t n = train_set.size();
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const int workers = cfg.threads;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto order =
            detail::shuffled_indices(n, static_cast<std::uint64_t>(cfg.seed), epoch);
        double ep_total = 0, ep_ide = 0, ep_seg = 0, ep_ref = 0;
        std::size_t ep_samples = 0, ep_gates = 0;

        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t nb = std::min(bs, n - start);
            std::vector<std::unique_ptr<Tape<T>>> tapes(nb);
            std::vector<BnRecorder<T>> recs(nb);
            std::vector<StepLosses> losses(nb);
            std::vector<std::string> errors(nb);

            auto run_sample = [&](std::size_t k) {
                try {
                    tapes[k] = std::make_unique<Tape<T>>();
                    SampleTensors<T> st =
                        prepare_sample<T>(train_set[order[start + k]], cfg);
                    losses[k] = sample_pass(model, st, *tapes[k], recs[k]);
                } catch (const std::exception& e) {
                    errors[k] = e.what();
                }
            };
            if (workers > 1 && nb > 1) {
                std::atomic<std::size_t> next{0};
                auto worker = [&] {
                    for (std::size_t k = next.fetch_add(1); k < nb; k = next.fetch_add(1))
                        run_sample(k);
                };
                std::vector<std::thread> pool;
                const std::size_t nw = std::min<std::size_t>(workers, nb);
                pool.reserve(nw);
                for (std::size_t t = 0; t < nw; ++t) pool.emplace_back(worker);
                for (auto& th : pool) th.join();
            } else {
                for (std::size_t k = 0; k < nb; ++k) run_sample(k);
            }
            for (std::size_t k = 0; k < nb; ++k)
                if (!errors[k].empty()) throw std::runtime_error(errors[k]);

            // Merge in sample order: gradients, then the deferred norm
            // statistics. Both are order-sensitive, neither depends on which
            // thread produced them.
            grads.zero();
            for (std::size_t k = 0; k < nb; ++k) {
                for (std::size_t p = 0; p < model.reg.params.size(); ++p) {
                    const Tensor<T>& param = model.reg.params[p].second;
                    if (!tapes[k]->has_grad(param)) continue;
                    const auto g = tapes[k]->grad(param);
                    auto& acc = grads.g[p];
                    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
                }
            }
            grads.scale_all(T(1) / static_cast<T>(nb));
            grads.clip_global_norm(static_cast<T>(cfg.clip_norm));
            opt.step(model.reg, grads);
            for (std::size_t k = 0; k < nb; ++k) recs[k].apply_all();

            double batch_total = 0;
            for (std::size_t k = 0; k < nb; ++k) {
                batch_total += losses[k].total;
                ep_total += losses[k].total;
                ep_ide += losses[k].ide;
                ep_seg += losses[k].seg;
                ep_ref += losses[k].ref;
                ep_gates += losses[k].gate_open ? 1 : 0;
            }
            ep_samples += nb;
            result.step_losses.push_back(batch_total / static_cast<double>(nb));
            ++result.steps_run;
            if (!full_run && result.steps_run >= max_steps) return result;
        }

        result.epochs_run = epoch + 1;
        const EvalReport val = evaluate_model(model, val_set);
        result.final_val = val;
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (log_jsonl) {
            nlohmann::ordered_json line;
            line["epoch"] = epoch + 1;
            line["train_loss"] = ep_total / static_cast<double>(ep_samples);
            line["l_ide"] = ep_ide / static_cast<double>(ep_samples);
            line["l_seg"] = ep_seg / static_cast<double>(ep_samples);
            line["l_ref"] = ep_ref / static_cast<double>(ep_samples);
            line["gate_frac"] = static_cast<double>(ep_gates) / static_cast<double>(ep_samples);
            line["val_grid_accuracy"] = val.grid_accuracy;
            line["val_mean_iou"] = val.mean_iou;
            line["seconds"] = seconds;
            (*log_jsonl) << line.dump() << "\n";
            log_jsonl->flush();
        }
        if (full_run) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%02d.ckpt", epoch + 1);
            const CheckpointData snap =
                snapshot_registry(model.reg, config_to_string(cfg));
            save_checkpoint(out_dir / name, snap);
            result.final_checkpoint = out_dir / "final.ckpt";
            save_checkpoint(result.final_checkpoint, snap);
        }
        const bool iou_ok = cfg.early_stop_iou > 0 && val.mean_iou >= cfg.early_stop_iou;
        const bool acc_ok = cfg.early_stop_acc <= 0 || val.grid_accuracy >= cfg.early_stop_acc;
        if (iou_ok && acc_ok) break;
    }
    return result;
}

}  // namespace refprop
