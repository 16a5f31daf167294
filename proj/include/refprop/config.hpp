// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace refprop {

/// Raised for malformed or out-of-range configuration input. The CLI maps
/// this to its validation exit code.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Every tunable constant in one flat struct, parsed from `key = value`
/// lines. Unknown keys are rejected so typos fail loudly instead of running
/// with defaults.
struct TrainConfig {
    // data
    int image_h = 64;
    int image_w = 64;
    int grid_s = 8;
    int n_train = 2000;
    int n_val = 200;
    long seed = 42;
    // widths
    int c_v = 32;
    int c_l = 32;
    int c_f = 32;
    int d_a = 32;
    int c_seg = 32;
    int n_stages = 4;
    int refine_width = 16;
    int vocab_size = 22;
    // propagation
    double alpha = 0.5;
    double leaky_slope = 0.1;
    // optimization
    int batch_size = 8;
    int epochs = 30;
    double lr = 0.001;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 5.0;
    double bn_eps = 1e-5;
    double bn_momentum = 0.9;
    // loss
    double w_ide = 10.0;
    double w_seg = 0.03;
    double w_ref = 0.5;
    double theta = 0.3;
    // run shape
    std::string variant = "full";
    int threads = 1;
    double early_stop_iou = 0.0;  // 0 disables early stopping
    double early_stop_acc = 0.0;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline long cfg_long(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long out = 0;
    try {
        out = std::stol(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
    if (used != v.size())
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

inline int cfg_int(const std::string& key, const std::string& v) {
    return static_cast<int>(cfg_long(key, v));
}

inline double cfg_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
    if (used != v.size())
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    return out;
}

}  // namespace detail

/// Applies one `key = value` assignment. Throws ConfigError on unknown keys
/// or unparsable values.
inline void config_set(TrainConfig& c, const std::string& key, const std::string& value) {
    using detail::cfg_double;
    using detail::cfg_int;
    using detail::cfg_long;
    if (key == "image_h") c.image_h = cfg_int(key, value);
    else if (key == "image_w") c.image_w = cfg_int(key, value);
    else if (key == "grid_s") c.grid_s = cfg_int(key, value);
    else if (key == "n_train") c.n_train = cfg_int(key, value);
    else if (key == "n_val") c.n_val = cfg_int(key, value);
    else if (key == "seed") c.seed = cfg_long(key, value);
    else if (key == "c_v") c.c_v = cfg_int(key, value);
    else if (key == "c_l") c.c_l = cfg_int(key, value);
    else if (key == "c_f") c.c_f = cfg_int(key, value);
    else if (key == "d_a") c.d_a = cfg_int(key, value);
    else if (key == "c_seg") c.c_seg = cfg_int(key, value);
    else if (key == "n_stages") c.n_stages = cfg_int(key, value);
    else if (key == "refine_width") c.refine_width = cfg_int(key, value);
    else if (key == "vocab_size") c.vocab_size = cfg_int(key, value);
    else if (key == "alpha") c.alpha = cfg_double(key, value);
    else if (key == "leaky_slope") c.leaky_slope = cfg_double(key, value);
    else if (key == "batch_size") c.batch_size = cfg_int(key, value);
    else if (key == "epochs") c.epochs = cfg_int(key, value);
    else if (key == "lr") c.lr = cfg_double(key, value);
    else if (key == "adam_beta1") c.adam_beta1 = cfg_double(key, value);
    else if (key == "adam_beta2") c.adam_beta2 = cfg_double(key, value);
    else if (key == "adam_eps") c.adam_eps = cfg_double(key, value);
    else if (key == "clip_norm") c.clip_norm = cfg_double(key, value);
    else if (key == "bn_eps") c.bn_eps = cfg_double(key, value);
    else if (key == "bn_momentum") c.bn_momentum = cfg_double(key, value);
    else if (key == "w_ide") c.w_ide = cfg_double(key, value);
    else if (key == "w_seg") c.w_seg = cfg_double(key, value);
    else if (key == "w_ref") c.w_ref = cfg_double(key, value);
    else if (key == "theta") c.theta = cfg_double(key, value);
    else if (key == "variant") c.variant = value;
    else if (key == "threads") c.threads = cfg_int(key, value);
    else if (key == "early_stop_iou") c.early_stop_iou = cfg_double(key, value);
    else if (key == "early_stop_acc") c.early_stop_acc = cfg_double(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

/// Sanity checks that catch inconsistent setups before any allocation.
inline void validate_config(const TrainConfig& c) {
    auto positive = [](long v, const char* name) {
        if (v <= 0) throw ConfigError(std::string("config: ") + name + " must be positive");
    };
    positive(c.image_h, "image_h");
    positive(c.image_w, "image_w");
    positive(c.grid_s, "grid_s");
    positive(c.n_train, "n_train");
    positive(c.n_val, "n_val");
    positive(c.c_v, "c_v");
    positive(c.c_l, "c_l");
    positive(c.c_f, "c_f");
    positive(c.d_a, "d_a");
    positive(c.c_seg, "c_seg");
    positive(c.n_stages, "n_stages");
    positive(c.refine_width, "refine_width");
    positive(c.vocab_size, "vocab_size");
    positive(c.batch_size, "batch_size");
    positive(c.epochs, "epochs");
    positive(c.threads, "threads");
    if (c.c_l % 2 != 0) throw ConfigError("config: c_l must be even (two scan directions)");
    if (c.n_stages < 3) throw ConfigError("config: n_stages must be at least 3");
    if (!(c.theta > 0.0 && c.theta < 1.0)) throw ConfigError("config: theta must be in (0,1)");
    if (!(c.lr > 0.0)) throw ConfigError("config: lr must be positive");
    if (!(c.w_ide > 0.0 && c.w_seg > 0.0 && c.w_ref > 0.0))
        throw ConfigError("config: loss weights must be positive");
    if (!(c.bn_momentum >= 0.0 && c.bn_momentum < 1.0))
        throw ConfigError("config: bn_momentum must be in [0,1)");
    if (c.variant != "full" && c.variant != "baseline" && c.variant != "iem" &&
        c.variant != "iem_fpm")
        throw ConfigError("config: variant must be one of baseline|iem|iem_fpm|full");
    if (c.image_h % c.grid_s != 0 || c.image_w % c.grid_s != 0)
        throw ConfigError("config: grid must divide the image size evenly");
}

/// Parses flat `key = value` text. '#' starts a comment; blank lines are
/// skipped.
inline TrainConfig parse_config(const std::string& text) {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) +
                              " is not a key = value assignment");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("config: line " + std::to_string(lineno) +
                              " has an empty key or value");
        config_set(c, key, value);
    }
    validate_config(c);
    return c;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

/// Round-trippable serialization of every key, used for the checkpoint echo.
inline std::string config_to_string(const TrainConfig& c) {
    std::ostringstream out;
    auto put_i = [&](const char* k, long v) { out << k << " = " << v << "\n"; };
    auto put_d = [&](const char* k, double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << k << " = " << buf << "\n";
    };
    put_i("image_h", c.image_h);
    put_i("image_w", c.image_w);
    put_i("grid_s", c.grid_s);
    put_i("n_train", c.n_train);
    put_i("n_val", c.n_val);
    put_i("seed", c.seed);
    put_i("c_v", c.c_v);
    put_i("c_l", c.c_l);
    put_i("c_f", c.c_f);
    put_i("d_a", c.d_a);
    put_i("c_seg", c.c_seg);
    put_i("n_stages", c.n_stages);
    put_i("refine_width", c.refine_width);
    put_i("vocab_size", c.vocab_size);
    put_d("alpha", c.alpha);
    put_d("leaky_slope", c.leaky_slope);
    put_i("batch_size", c.batch_size);
    put_i("epochs", c.epochs);
    put_d("lr", c.lr);
    put_d("adam_beta1", c.adam_beta1);
    put_d("adam_beta2", c.adam_beta2);
    put_d("adam_eps", c.adam_eps);
    put_d("clip_norm", c.clip_norm);
    put_d("bn_eps", c.bn_eps);
    put_d("bn_momentum", c.bn_momentum);
    put_d("w_ide", c.w_ide);
    put_d("w_seg", c.w_seg);
    put_d("w_ref", c.w_ref);
    put_d("theta", c.theta);
    out << "variant = " << c.variant << "\n";
    put_i("threads", c.threads);
    put_d("early_stop_iou", c.early_stop_iou);
    put_d("early_stop_acc", c.early_stop_acc);
    return out.str();
}

}  // namespace refprop
