// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "refprop/eval.hpp"
#include "refprop/train.hpp"

namespace refprop {

/// Model init stream: distinct from the dataset (1,2), expression (3) and
/// shuffle (10) streams.
inline std::uint64_t model_init_seed(long seed) {
    return derive_seed(static_cast<std::uint64_t>(seed), 7);
}

struct AblationRow {
    std::string variant;
    EvalReport report;
};

/// Trains the four variants on the same split with the same init seed and
/// schedule, and evaluates each on the validation split.
template <typename T>
std::vector<AblationRow> ablation_run(const TrainConfig& base,
                                      const std::vector<TrainingSample>& train_set,
                                      const std::vector<TrainingSample>& val_set,
                                      const std::filesystem::path& out_dir,
                                      std::ostream* progress = nullptr) {
    static const std::array<const char*, 4> variants = {"baseline", "iem", "iem_fpm", "full"};
    std::vector<AblationRow> rows;
    for (const char* v : variants) {
        TrainConfig cfg = base;
        cfg.variant = v;
        Pcg32 rng(model_init_seed(cfg.seed));
        Model<T> model(cfg, rng);
        const std::filesystem::path run_dir = out_dir / v;
        std::filesystem::create_directories(run_dir);
        std::ofstream log(run_dir / "metrics.jsonl", std::ios::binary);
        train_model(model, train_set, val_set, run_dir, &log);
        AblationRow row;
        row.variant = v;
        row.report = evaluate_model(model, val_set);
        rows.push_back(row);
        if (progress) {
            (*progress) << v << ": mean_iou=" << row.report.mean_iou
                        << " grid_acc=" << row.report.grid_accuracy << "\n";
            progress->flush();
        }
    }
    return rows;
}

/// Text table over the ablation rows, one row per variant.
inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-10s %7s %7s %7s %7s %7s %9s %9s %9s\n", "variant",
                  "Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "mean_iou", "oall_iou",
                  "grid_acc");
    out += buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf),
                      "%-10s %7.3f %7.3f %7.3f %7.3f %7.3f %9.4f %9.4f %9.4f\n",
                      r.variant.c_str(), r.report.pr_at[0], r.report.pr_at[1], r.report.pr_at[2],
                      r.report.pr_at[3], r.report.pr_at[4], r.report.mean_iou,
                      r.report.overall_iou, r.report.grid_accuracy);
        out += buf;
    }
    return out;
}

/// Evaluates one checkpointed model with a branch output replaced by ground
/// truth, next to the unsubstituted run.
template <typename T>
EvalReport gt_substitution_run(Model<T>& model, const std::vector<TrainingSample>& split,
                               SubMode mode) {
    return evaluate_model(model, split, mode);
}

}  // namespace refprop
