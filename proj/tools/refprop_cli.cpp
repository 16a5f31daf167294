// SPDX-License-Identifier: Apache-2.0
//
// Command line front end: dataset generation, training, evaluation,
// ablations, ground-truth substitution probes, a quick demo renderer,
// a gradient self-check and a propagation micro-benchmark.

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

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

TrainConfig make_config(const std::string& config_path, const std::vector<std::string>& sets,
                        long seed, int threads, const std::string& variant) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    for (const std::string& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed >= 0) cfg.seed = seed;
    if (threads > 0) cfg.threads = threads;
    if (!variant.empty()) cfg.variant = variant;
    validate_config(cfg);
    return cfg;
}

struct Splits {
    std::vector<TrainingSample> train;
    std::vector<TrainingSample> val;
};

Splits load_data(const std::string& data_dir, bool need_train) {
    Splits s;
    const fs::path root(data_dir);
    if (need_train) s.train = load_split(root / "manifest_train.jsonl");
    s.val = load_split(root / "manifest_val.jsonl");
    return s;
}

void print_report(const char* label, const EvalReport& r) {
    std::printf("%s  n=%d\n", label, r.n_samples);
    std::printf("  mean_iou     %.4f\n", r.mean_iou);
    std::printf("  overall_iou  %.4f\n", r.overall_iou);
    std::printf("  grid_acc     %.4f\n", r.grid_accuracy);
    for (std::size_t k = 0; k < kPrThresholds.size(); ++k)
        std::printf("  Pr@%.1f       %.4f\n", kPrThresholds[k], r.pr_at[k]);
}

/// Rebuilds the model a checkpoint was trained with from the config text
/// stored inside it, then loads the weights and statistics.
Model<float> model_from_checkpoint(const std::string& path, const CheckpointData& data) {
    TrainConfig cfg = parse_config(data.config_text);
    Pcg32 rng(model_init_seed(cfg.seed));
    Model<float> model(cfg, rng);
    try {
        apply_checkpoint(model.reg, data);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path + ": " + e.what());
    }
    return model;
}

int cmd_gen(int n_train, int n_val, long seed, const std::string& out) {
    auto m = build_dataset(n_train, n_val, static_cast<std::uint64_t>(seed), out);
    std::printf("wrote %d train / %d val samples under %s\n", m.n_train, m.n_val, out.c_str());
    return 0;
}

int cmd_train(const std::string& data, const TrainConfig& cfg, const std::string& out) {
    Splits s = load_data(data, true);
    Pcg32 rng(model_init_seed(cfg.seed));
    Model<float> model(cfg, rng);
    std::printf("training variant=%s  params=%zu  train=%zu val=%zu threads=%d\n",
                cfg.variant.c_str(), model.reg.total_size(), s.train.size(), s.val.size(),
                cfg.threads);
    fs::create_directories(out);
    std::ofstream log(fs::path(out) / "metrics.jsonl", std::ios::binary);
    auto res = train_model(model, s.train, s.val, out, &log);
    std::printf("finished after %d epochs (%d steps)\n", res.epochs_run, res.steps_run);
    print_report("validation", res.final_val);
    std::printf("checkpoint: %s\n", res.final_checkpoint.string().c_str());
    return 0;
}

int cmd_eval(const std::string& data, const std::string& ckpt_path, const std::string& sub_name,
             const std::string& overlay_dir, int overlay_count) {
    CheckpointData data_ck = load_checkpoint(ckpt_path);
    Model<float> model = model_from_checkpoint(ckpt_path, data_ck);
    Splits s = load_data(data, false);

    SubMode sub = SubMode::none;
    if (sub_name == "id")
        sub = SubMode::id_branch;
    else if (sub_name == "seg")
        sub = SubMode::seg_branch;
    else if (sub_name != "none")
        throw ConfigError("--sub expects none|id|seg, got '" + sub_name + "'");

    EvalReport r = evaluate_model(model, s.val, sub);
    print_report("validation", r);

    if (!overlay_dir.empty()) {
        fs::create_directories(overlay_dir);
        const int n = std::min<int>(overlay_count, static_cast<int>(s.val.size()));
        for (int i = 0; i < n; ++i) {
            const TrainingSample& smp = s.val[static_cast<std::size_t>(i)];
            SampleTensors<float> st = prepare_sample<float>(smp, model.cfg);
            Tape<float> tape;
            tape.set_enabled(false);
            auto o = model.forward_coarse(tape, st.image, st.ids, BnMode::eval);
            Tensor<float> logits = predict_logits(model, tape, st, o);
            char name[32];
            std::snprintf(name, sizeof(name), "overlay_%03d.ppm", i);
            render_overlay(smp, logits, model.cfg.image_h, model.cfg.image_w,
                           fs::path(overlay_dir) / name);
        }
        std::printf("wrote %d overlays under %s\n", n, overlay_dir.c_str());
    }
    return 0;
}

int cmd_ablate(const std::string& data, const TrainConfig& cfg, const std::string& out) {
    Splits s = load_data(data, true);
    auto rows = ablation_run<float>(cfg, s.train, s.val, out, &std::cout);
    const std::string table = format_ablation_table(rows);
    std::fputs(table.c_str(), stdout);
    std::ofstream tf(fs::path(out) / "ablation.txt", std::ios::binary);
    tf << table;
    return 0;
}

int cmd_gt_sub(const std::string& data, const std::string& ckpt_path) {
    CheckpointData data_ck = load_checkpoint(ckpt_path);
    Model<float> model = model_from_checkpoint(ckpt_path, data_ck);
    Splits s = load_data(data, false);
    print_report("plain", evaluate_model(model, s.val, SubMode::none));
    print_report("gt identifying cell", gt_substitution_run(model, s.val, SubMode::id_branch));
    print_report("gt coarse mask", gt_substitution_run(model, s.val, SubMode::seg_branch));
    return 0;
}

int cmd_demo(const std::string& out, long seed, int count) {
    fs::create_directories(out);
    build_dataset(count, 0, static_cast<std::uint64_t>(seed), out);
    auto samples = load_split(fs::path(out) / "manifest_train.jsonl");
    TrainConfig cfg;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        // Ground-truth overlay: strong logits where the mask is set.
        SampleTensors<float> st = prepare_sample<float>(samples[i], cfg);
        Tensor<float> logits({static_cast<std::size_t>(cfg.image_h),
                              static_cast<std::size_t>(cfg.image_w)});
        for (std::size_t k = 0; k < logits.numel(); ++k)
            logits[k] = st.m_full[k] >= 0.5f ? 12.0f : -12.0f;
        char name[32];
        std::snprintf(name, sizeof(name), "demo_%03zu.ppm", i);
        render_overlay(samples[i], logits, cfg.image_h, cfg.image_w, fs::path(out) / name);
        std::printf("%s  \"%s\"\n", name, samples[i].expression.c_str());
    }
    return 0;
}

int cmd_gradcheck() {
    // Same double-precision sweep the test suite runs, exposed as a command
    // so a user can confirm the math on their own build.
    int failures = 0;
    auto row = [&](const char* name, double err, double tol) {
        const bool ok = err < tol;
        std::printf("  %-28s max_rel_err %.3e  (tol %.0e)  %s\n", name, err, tol,
                    ok ? "ok" : "FAIL");
        if (!ok) ++failures;
    };

    Pcg32 rng(99);
    auto rand_t = [&](Shape shape) {
        Tensor<double> t(shape);
        for (std::size_t i = 0; i < t.numel(); ++i)
            t[i] = (rng.next_real() - 0.5) * 2.0;
        return t;
    };

    {
        auto x = rand_t({3, 5, 5});
        auto r = grad_check<double>(
            [](Tape<double>& t, Tensor<double>& v) {
                return sum(t, leaky_relu(t, v, 0.1));
            },
            x);
        row("leaky_relu", r.max_rel_err, 1e-4);
    }
    {
        auto x = rand_t({2, 4, 4});
        Tensor<double> w = rand_t({3, 2, 3, 3});
        auto r = grad_check<double>(
            [&](Tape<double>& t, Tensor<double>& v) {
                return sum(t, conv2d(t, v, w, Tensor<double>({3}), 1, 1));
            },
            x);
        row("conv2d", r.max_rel_err, 1e-4);
    }
    {
        auto x = rand_t({2, 4, 4});
        auto r = grad_check<double>(
            [](Tape<double>& t, Tensor<double>& v) {
                return sum(t, bilinear_resize(t, v, 8, 8));
            },
            x);
        row("bilinear_resize", r.max_rel_err, 1e-4);
    }
    {
        TrainConfig cfg;
        cfg.image_h = cfg.image_w = 32;
        cfg.grid_s = 4;
        cfg.c_v = cfg.c_l = cfg.c_f = cfg.d_a = cfg.c_seg = 8;
        cfg.refine_width = 4;
        cfg.n_stages = 3;
        validate_config(cfg);
        Pcg32 mrng(model_init_seed(cfg.seed));
        Model<double> model(cfg, mrng);
        Tensor<double> image = rand_t({3, 32, 32});
        for (std::size_t i = 0; i < image.numel(); ++i) image[i] = std::abs(image[i]);
        std::vector<int> ids = {1, 2, 3};
        auto target = make_grid_target<double>(16, 16, 32, 32, 4);
        Tensor<double> m_ds({16, 16});
        for (int i = 5; i < 11; ++i)
            for (int j = 5; j < 11; ++j) m_ds.at(i, j) = 1;
        auto r = grad_check<double>(
            [&](Tape<double>& t, Tensor<double>& v) {
                auto o = model.forward_coarse(t, v, ids, BnMode::train);
                auto l_ide = identifying_loss(t, o.id_map, target);
                auto l_seg = segmentation_loss(t, o.mask_stack, target, m_ds);
                return add(t, scale(t, l_ide, 10.0), scale(t, l_seg, 0.03));
            },
            image);
        row("coarse model loss", r.max_rel_err, 1e-3);
    }
    std::printf("%s\n", failures == 0 ? "all gradient checks passed" : "gradient checks FAILED");
    return failures == 0 ? 0 : 1;
}

int cmd_bench_fpm(int S, int C, int threads) {
    Pcg32 rng(7);
    FeaturePropagation<float> fpm(S, C, 0.5f, 0.1f, rng);
    Tensor<float> x({static_cast<std::size_t>(C), static_cast<std::size_t>(S),
                     static_cast<std::size_t>(S)});
    for (std::size_t i = 0; i < x.numel(); ++i)
        x[i] = static_cast<float>(rng.next_real()) - 0.5f;
    Tape<float> tape;
    tape.set_enabled(false);

    std::unique_ptr<ThreadPool> pool;
    ScanExec exec;
    if (threads > 1) {
        pool = std::make_unique<ThreadPool>(static_cast<std::size_t>(threads));
        exec.mode = ScanMode::wavefront;
        exec.pool = pool.get();
    }

    // Warm up once, then time enough repetitions to fill ~one second.
    fpm.forward(tape, x, exec);
    const auto t0 = std::chrono::steady_clock::now();
    int reps = 0;
    double elapsed = 0;
    do {
        fpm.forward(tape, x, exec);
        ++reps;
        elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } while (elapsed < 1.0);
    const double cells = static_cast<double>(S) * S * reps;
    std::printf("grid %dx%d, %d channels, %d threads: %.0f cells/sec (%d sweeps in %.2fs)\n", S,
                S, C, threads, cells / elapsed, reps, elapsed);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Referring expression segmentation on procedural desk scenes"};
    app.require_subcommand(1);

    // gen
    int g_train = 2000, g_val = 200;
    long g_seed = 42;
    std::string g_out;
    auto* gen = app.add_subcommand("gen", "Generate a dataset (images, masks, manifests)");
    gen->add_option("--train", g_train, "Training samples")->capture_default_str();
    gen->add_option("--val", g_val, "Validation samples")->capture_default_str();
    gen->add_option("--seed", g_seed, "Dataset seed")->capture_default_str();
    gen->add_option("--out", g_out, "Output directory")->required();

    // shared train-like options
    std::string t_data, t_config, t_out, t_variant;
    std::vector<std::string> t_sets;
    long t_seed = -1;
    int t_threads = 0;
    auto add_train_opts = [&](CLI::App* c, bool with_variant) {
        c->add_option("--data", t_data, "Dataset directory (from gen)")->required();
        c->add_option("--config", t_config, "Config file (key = value lines)");
        c->add_option("--set", t_sets, "Override one config key, e.g. --set epochs=5")
            ->take_all();
        c->add_option("--seed", t_seed, "Override the config seed");
        c->add_option("--threads", t_threads, "Worker threads (result is identical)");
        c->add_option("--out", t_out, "Run directory for checkpoints and metrics")->required();
        if (with_variant)
            c->add_option("--variant", t_variant,
                          "Model variant: baseline|iem|iem_fpm|full");
    };
    auto* train = app.add_subcommand("train", "Train a model");
    add_train_opts(train, true);
    auto* ablate = app.add_subcommand("ablate", "Train all four variants, print the table");
    add_train_opts(ablate, false);

    // eval
    std::string e_data, e_ckpt, e_sub = "none", e_overlay;
    int e_overlay_count = 16;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
    eval->add_option("--data", e_data, "Dataset directory")->required();
    eval->add_option("--checkpoint", e_ckpt, "Checkpoint file")->required();
    eval->add_option("--sub", e_sub, "Substitute a branch with ground truth: none|id|seg")
        ->capture_default_str();
    eval->add_option("--overlay-dir", e_overlay, "Write prediction overlays here");
    eval->add_option("--overlay-count", e_overlay_count, "How many overlays")
        ->capture_default_str();

    // gt-sub
    std::string s_data, s_ckpt;
    auto* gtsub = app.add_subcommand("gt-sub", "Compare plain vs ground-truth-substituted eval");
    gtsub->add_option("--data", s_data, "Dataset directory")->required();
    gtsub->add_option("--checkpoint", s_ckpt, "Checkpoint file")->required();

    // demo
    std::string d_out;
    long d_seed = 7;
    int d_count = 8;
    auto* demo = app.add_subcommand("demo", "Render a few scenes with their target overlays");
    demo->add_option("--out", d_out, "Output directory")->required();
    demo->add_option("--seed", d_seed, "Scene seed")->capture_default_str();
    demo->add_option("--count", d_count, "Scene count")->capture_default_str();

    // gradcheck
    app.add_subcommand("gradcheck", "Finite-difference check of the core gradients");

    // bench-fpm
    int b_grid = 8, b_channels = 32, b_threads = 1;
    auto* bench = app.add_subcommand("bench-fpm", "Benchmark the propagation sweeps");
    bench->add_option("--grid", b_grid, "Grid side length")->capture_default_str();
    bench->add_option("--channels", b_channels, "Feature channels")->capture_default_str();
    bench->add_option("--threads", b_threads, "Wavefront threads")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(g_train, g_val, g_seed, g_out);
        if (train->parsed() || ablate->parsed()) {
            TrainConfig cfg = make_config(t_config, t_sets, t_seed, t_threads, t_variant);
            return train->parsed() ? cmd_train(t_data, cfg, t_out)
                                   : cmd_ablate(t_data, cfg, t_out);
        }
        if (eval->parsed()) return cmd_eval(e_data, e_ckpt, e_sub, e_overlay, e_overlay_count);
        if (gtsub->parsed()) return cmd_gt_sub(s_data, s_ckpt);
        if (demo->parsed()) return cmd_demo(d_out, d_seed, d_count);
        if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
        if (bench->parsed()) return cmd_bench_fpm(b_grid, b_channels, b_threads);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
