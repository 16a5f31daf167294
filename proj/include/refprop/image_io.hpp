// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace refprop {

namespace detail {

inline void io_fail(const std::filesystem::path& p, const std::string& what) {
    throw std::runtime_error(p.string() + ": " + what);
}

/// Reads one whitespace-delimited PNM header token, skipping '#' comments.
inline std::string pnm_token(std::FILE* f, const std::filesystem::path& p) {
    std::string tok;
    int c;
    while ((c = std::fgetc(f)) != EOF) {
        if (c == '#') {
            while ((c = std::fgetc(f)) != EOF && c != '\n') {}
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) io_fail(p, "truncated header");
    return tok;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& p, const char* mode) {
    FilePtr f(std::fopen(p.string().c_str(), mode));
    if (!f) io_fail(p, std::string("cannot open for ") + (mode[0] == 'r' ? "read" : "write"));
    return f;
}

}  // namespace detail

/// Writes a binary PPM (P6, maxval 255). rgb is planar (3,H,W).
inline void write_ppm(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb,
                      int H, int W) {
    if (rgb.size() != static_cast<std::size_t>(3) * H * W)
        throw std::invalid_argument("write_ppm: buffer size mismatch");
    auto f = detail::open_file(path, "wb");
    std::string header = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    if (std::fwrite(header.data(), 1, header.size(), f.get()) != header.size())
        detail::io_fail(path, "short header write");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<std::uint8_t> row(static_cast<std::size_t>(W) * 3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<std::size_t>(x) * 3 + c] =
                    rgb[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * W + x];
        if (std::fwrite(row.data(), 1, row.size(), f.get()) != row.size())
            detail::io_fail(path, "short pixel write");
    }
}

/// Reads a binary PPM (P6) into planar (3,H,W) bytes.
inline std::vector<std::uint8_t> read_ppm(const std::filesystem::path& path, int& H, int& W) {
    auto f = detail::open_file(path, "rb");
    if (detail::pnm_token(f.get(), path) != "P6") detail::io_fail(path, "not a P6 PPM");
    W = std::stoi(detail::pnm_token(f.get(), path));
    H = std::stoi(detail::pnm_token(f.get(), path));
    if (detail::pnm_token(f.get(), path) != "255") detail::io_fail(path, "maxval must be 255");
    if (H <= 0 || W <= 0) detail::io_fail(path, "bad dimensions");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<std::uint8_t> inter(plane * 3);
    if (std::fread(inter.data(), 1, inter.size(), f.get()) != inter.size())
        detail::io_fail(path, "truncated pixel data");
    std::vector<std::uint8_t> rgb(plane * 3);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) rgb[c * plane + i] = inter[i * 3 + c];
    return rgb;
}

/// Writes a binary PGM (P5, maxval 255).
inline void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& gray,
                      int H, int W) {
    if (gray.size() != static_cast<std::size_t>(H) * W)
        throw std::invalid_argument("write_pgm: buffer size mismatch");
    auto f = detail::open_file(path, "wb");
    std::string header = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    if (std::fwrite(header.data(), 1, header.size(), f.get()) != header.size())
        detail::io_fail(path, "short header write");
    if (std::fwrite(gray.data(), 1, gray.size(), f.get()) != gray.size())
        detail::io_fail(path, "short pixel write");
}

/// Reads a binary PGM (P5).
inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& H, int& W) {
    auto f = detail::open_file(path, "rb");
    if (detail::pnm_token(f.get(), path) != "P5") detail::io_fail(path, "not a P5 PGM");
    W = std::stoi(detail::pnm_token(f.get(), path));
    H = std::stoi(detail::pnm_token(f.get(), path));
    if (detail::pnm_token(f.get(), path) != "255") detail::io_fail(path, "maxval must be 255");
    if (H <= 0 || W <= 0) detail::io_fail(path, "bad dimensions");
    std::vector<std::uint8_t> gray(static_cast<std::size_t>(H) * W);
    if (std::fread(gray.data(), 1, gray.size(), f.get()) != gray.size())
        detail::io_fail(path, "truncated pixel data");
    return gray;
}

}  // namespace refprop
