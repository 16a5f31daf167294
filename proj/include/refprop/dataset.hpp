// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "refprop/image_io.hpp"
#include "refprop/synth.hpp"

namespace refprop {

/// The on-disk unit: everything training and evaluation need, nothing the
/// generator keeps to itself (per-instance metadata stays in Scene).
struct TrainingSample {
    std::vector<std::uint8_t> image;  // planar (3,H,W)
    std::vector<std::uint8_t> mask;   // (H,W), values 0/1
    std::string expression;
    std::vector<int> token_ids;
    int center_row = 0;
    int center_col = 0;
    std::uint64_t seed = 0;
};

struct DatasetManifest {
    std::filesystem::path train_manifest;
    std::filesystem::path val_manifest;
    int n_train = 0;
    int n_val = 0;
};

namespace detail {

inline std::string index_name(const char* stem, int idx, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%05d.%s", stem, idx, ext);
    return buf;
}

inline void write_split(const std::filesystem::path& out_dir, const std::string& split,
                        int count, std::uint64_t base_seed, std::uint64_t split_id,
                        const SceneConfig& cfg, const std::filesystem::path& manifest_path) {
    std::filesystem::create_directories(out_dir / split);
    std::ofstream manifest(manifest_path, std::ios::binary);
    if (!manifest) detail::io_fail(manifest_path, "cannot open for write");
    for (int i = 0; i < count; ++i) {
        const std::uint64_t sample_seed = derive_seed(base_seed, split_id, static_cast<std::uint64_t>(i));
        const Sample s = make_sample(sample_seed, cfg);
        const std::string img_rel = split + "/" + index_name("img", i, "ppm");
        const std::string msk_rel = split + "/" + index_name("msk", i, "pgm");
        write_ppm(out_dir / img_rel, s.scene.image, cfg.H, cfg.W);
        std::vector<std::uint8_t> mask255(s.target_mask.size());
        for (std::size_t k = 0; k < mask255.size(); ++k) mask255[k] = s.target_mask[k] ? 255 : 0;
        write_pgm(out_dir / msk_rel, mask255, cfg.H, cfg.W);

        nlohmann::ordered_json line;
        line["image_path"] = img_rel;
        line["mask_path"] = msk_rel;
        line["expression"] = expression_text(s.expression.ast);
        line["target_center"] = {s.center_row, s.center_col};
        line["seed"] = sample_seed;
        manifest << line.dump() << "\n";
    }
    if (!manifest) detail::io_fail(manifest_path, "write failed");
}

}  // namespace detail

/// Writes PPM images, PGM masks and one JSONL manifest per split. Splits draw
/// from disjoint seed streams; re-running with identical arguments reproduces
/// every byte.
inline DatasetManifest build_dataset(int n_train, int n_val, std::uint64_t seed,
                                     const std::filesystem::path& out_dir,
                                     const SceneConfig& cfg = {}) {
    DatasetManifest m;
    m.n_train = n_train;
    m.n_val = n_val;
    m.train_manifest = out_dir / "manifest_train.jsonl";
    m.val_manifest = out_dir / "manifest_val.jsonl";
    detail::write_split(out_dir, "train", n_train, seed, 1, cfg, m.train_manifest);
    detail::write_split(out_dir, "val", n_val, seed, 2, cfg, m.val_manifest);
    return m;
}

/// Loads one manifest back into memory; paths inside the manifest are
/// relative to its parent directory.
inline std::vector<TrainingSample> load_split(const std::filesystem::path& manifest_path,
                                              const Vocab& vocab = Vocab::standard()) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) detail::io_fail(manifest_path, "cannot open for read");
    const std::filesystem::path root = manifest_path.parent_path();
    std::vector<TrainingSample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            detail::io_fail(manifest_path,
                            "line " + std::to_string(line_no) + ": " + e.what());
        }
        TrainingSample s;
        int h = 0, w = 0;
        s.image = read_ppm(root / j.at("image_path").get<std::string>(), h, w);
        int mh = 0, mw = 0;
        s.mask = read_pgm(root / j.at("mask_path").get<std::string>(), mh, mw);
        if (mh != h || mw != w)
            detail::io_fail(manifest_path,
                            "line " + std::to_string(line_no) + ": image/mask size mismatch");
        for (auto& v : s.mask) v = v ? 1 : 0;
        s.expression = j.at("expression").get<std::string>();
        s.token_ids = encode_tokens(tokenize(s.expression), vocab);
        s.center_row = j.at("target_center").at(0).get<int>();
        s.center_col = j.at("target_center").at(1).get<int>();
        s.seed = j.at("seed").get<std::uint64_t>();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace refprop
