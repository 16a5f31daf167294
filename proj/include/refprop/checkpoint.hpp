// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "refprop/layers.hpp"
#include "refprop/tensor.hpp"

namespace refprop {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

/// On-disk model state: a config echo, every named parameter as a 32-bit
/// little-endian payload, and the running norm statistics. Saving the same
/// state twice produces identical bytes.
struct CheckpointData {
    std::string config_text;
    std::vector<std::pair<std::string, std::pair<Shape, std::vector<float>>>> tensors;
    std::vector<std::pair<std::string, std::pair<std::vector<float>, std::vector<float>>>> stats;
};

namespace detail {

inline constexpr char kCkptMagic[5] = {'R', 'F', 'P', 'M', '1'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void wr_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void wr_u64(std::ostream& out, std::uint64_t v) {
    wr_u32(out, static_cast<std::uint32_t>(v));
    wr_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void wr_f32(std::ostream& out, float v) { wr_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void wr_str(std::ostream& out, const std::string& s) {
    wr_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t rd_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw CheckpointError(std::string("checkpoint: truncated while reading ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t rd_u64(std::istream& in, const char* what) {
    const std::uint64_t lo = rd_u32(in, what);
    const std::uint64_t hi = rd_u32(in, what);
    return lo | (hi << 32);
}

inline float rd_f32(std::istream& in, const char* what) {
    return std::bit_cast<float>(rd_u32(in, what));
}

inline std::string rd_str(std::istream& in, const char* what) {
    const std::uint64_t n = rd_u64(in, what);
    if (n > (1ull << 30))
        throw CheckpointError(std::string("checkpoint: implausible string length in ") + what);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw CheckpointError(std::string("checkpoint: truncated while reading ") + what);
    return s;
}

}  // namespace detail

/// Snapshot of a registry's parameters and running stats plus the config
/// text that built the model.
template <typename T>
CheckpointData snapshot_registry(const ParamRegistry<T>& reg, const std::string& config_text) {
    CheckpointData d;
    d.config_text = config_text;
    d.tensors.reserve(reg.params.size());
    for (const auto& [name, t] : reg.params) {
        std::vector<float> vals(t.numel());
        for (std::size_t i = 0; i < t.numel(); ++i) vals[i] = static_cast<float>(t[i]);
        d.tensors.emplace_back(name, std::make_pair(t.shape(), std::move(vals)));
    }
    for (const auto& [name, s] : reg.stats) {
        std::vector<float> mean(s->mean.size()), var(s->var.size());
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = static_cast<float>(s->mean[i]);
        for (std::size_t i = 0; i < var.size(); ++i) var[i] = static_cast<float>(s->var[i]);
        d.stats.emplace_back(name, std::make_pair(std::move(mean), std::move(var)));
    }
    return d;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot open '" + path.string() + "' for write");
    out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    detail::wr_u32(out, detail::kCkptVersion);
    detail::wr_str(out, d.config_text);
    detail::wr_u32(out, static_cast<std::uint32_t>(d.tensors.size()));
    for (const auto& [name, payload] : d.tensors) {
        const auto& [shape, vals] = payload;
        detail::wr_str(out, name);
        detail::wr_u32(out, static_cast<std::uint32_t>(shape.size()));
        for (std::size_t dim : shape) detail::wr_u64(out, dim);
        detail::wr_u64(out, vals.size());
        for (float v : vals) detail::wr_f32(out, v);
    }
    detail::wr_u32(out, static_cast<std::uint32_t>(d.stats.size()));
    for (const auto& [name, mv] : d.stats) {
        detail::wr_str(out, name);
        detail::wr_u64(out, mv.first.size());
        for (float v : mv.first) detail::wr_f32(out, v);
        for (float v : mv.second) detail::wr_f32(out, v);
    }
    if (!out) throw CheckpointError("checkpoint: write failed for '" + path.string() + "'");
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
    char magic[sizeof(detail::kCkptMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
        throw CheckpointError("checkpoint: bad magic in '" + path.string() + "'");
    const std::uint32_t version = detail::rd_u32(in, "version");
    if (version != detail::kCkptVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) +
                              " (expected " + std::to_string(detail::kCkptVersion) + ")");
    CheckpointData d;
    d.config_text = detail::rd_str(in, "config");
    const std::uint32_t n_tensors = detail::rd_u32(in, "tensor count");
    d.tensors.reserve(n_tensors);
    for (std::uint32_t k = 0; k < n_tensors; ++k) {
        std::string name = detail::rd_str(in, "tensor name");
        const std::uint32_t rank = detail::rd_u32(in, "tensor rank");
        if (rank > 8) throw CheckpointError("checkpoint: implausible tensor rank");
        Shape shape(rank);
        for (auto& dim : shape) dim = detail::rd_u64(in, "tensor dim");
        const std::uint64_t n = detail::rd_u64(in, "tensor size");
        if (n != shape_numel(shape))
            throw CheckpointError("checkpoint: size/shape mismatch for '" + name + "'");
        std::vector<float> vals(n);
        for (auto& v : vals) v = detail::rd_f32(in, "tensor data");
        d.tensors.emplace_back(std::move(name), std::make_pair(std::move(shape), std::move(vals)));
    }
    const std::uint32_t n_stats = detail::rd_u32(in, "stats count");
    d.stats.reserve(n_stats);
    for (std::uint32_t k = 0; k < n_stats; ++k) {
        std::string name = detail::rd_str(in, "stats name");
        const std::uint64_t c = detail::rd_u64(in, "stats size");
        if (c > (1ull << 24)) throw CheckpointError("checkpoint: implausible stats size");
        std::vector<float> mean(c), var(c);
        for (auto& v : mean) v = detail::rd_f32(in, "stats mean");
        for (auto& v : var) v = detail::rd_f32(in, "stats var");
        d.stats.emplace_back(std::move(name), std::make_pair(std::move(mean), std::move(var)));
    }
    return d;
}

/// Writes checkpoint tensors back into a registry built from the same
/// config. Every name must match in order and shape; running stats likewise.
template <typename T>
void apply_checkpoint(ParamRegistry<T>& reg, const CheckpointData& d) {
    if (d.tensors.size() != reg.params.size() || d.stats.size() != reg.stats.size())
        throw CheckpointError("checkpoint: parameter list does not match the model");
    for (std::size_t p = 0; p < reg.params.size(); ++p) {
        const auto& [name, payload] = d.tensors[p];
        auto& [reg_name, t] = reg.params[p];
        if (name != reg_name)
            throw CheckpointError("checkpoint: expected parameter '" + reg_name + "', found '" +
                                  name + "'");
        if (payload.first != t.shape())
            throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(payload.second[i]);
    }
    for (std::size_t k = 0; k < reg.stats.size(); ++k) {
        const auto& [name, mv] = d.stats[k];
        auto& [reg_name, s] = reg.stats[k];
        if (name != reg_name)
            throw CheckpointError("checkpoint: expected stats '" + reg_name + "', found '" + name +
                                  "'");
        if (mv.first.size() != s->mean.size())
            throw CheckpointError("checkpoint: stats size mismatch for '" + name + "'");
        for (std::size_t i = 0; i < mv.first.size(); ++i) {
            s->mean[i] = static_cast<T>(mv.first[i]);
            s->var[i] = static_cast<T>(mv.second[i]);
        }
    }
}

}  // namespace refprop
