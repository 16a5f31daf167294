// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "refprop/gridmap.hpp"
#include "refprop/rng.hpp"

namespace refprop {

// ---------------------------------------------------------------------------
// Scene model
// ---------------------------------------------------------------------------

enum class ShapeKind { circle, square, triangle };
enum class ColorName { red, green, blue, yellow };
enum class SizeClass { small, large };

struct SceneConfig {
    int H = 64;
    int W = 64;
    int S = 8;
    int min_instances = 3;
    int max_instances = 7;
};

struct Instance {
    ShapeKind shape = ShapeKind::circle;
    ColorName color = ColorName::red;
    SizeClass size = SizeClass::small;
    int center_row = 0;  // gravity center of mask, rounded to nearest pixel
    int center_col = 0;
    std::vector<std::uint8_t> mask;  // H*W, values 0/1
};

struct Scene {
    int H = 0;
    int W = 0;
    int S = 0;
    std::vector<std::uint8_t> image;  // planar (3,H,W), quantized bytes; 255 = 1.0
    std::vector<Instance> instances;
    std::uint64_t rng_seed = 0;
};

// ---------------------------------------------------------------------------
// Expression model
// ---------------------------------------------------------------------------

enum class Ordinal {
    leftmost,
    rightmost,
    topmost,
    bottommost,
    second_from_left,
    second_from_right,
};

enum class Relation { left_of, right_of, above, below };

/// shape == nullopt means the wildcard noun "object".
struct NounPhrase {
    std::optional<SizeClass> size;
    std::optional<ColorName> color;
    std::optional<ShapeKind> shape;
};

struct RelClause {
    Relation rel = Relation::left_of;
    NounPhrase ref;  // grammar allows only [COLOR] SHAPE here
};

struct ExprAst {
    std::optional<Ordinal> ordinal;
    NounPhrase np;
    std::optional<RelClause> rel;
};

struct Expression {
    std::vector<std::string> tokens;
    ExprAst ast;
    int target_index = -1;
};

struct Sample {
    Scene scene;
    Expression expression;
    std::vector<std::uint8_t> target_mask;  // H*W, values 0/1
    int center_row = 0;
    int center_col = 0;
};

// ---------------------------------------------------------------------------
// Word tables
// ---------------------------------------------------------------------------

inline const char* shape_word(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        default: return "triangle";
    }
}

inline const char* color_word(ColorName c) {
    switch (c) {
        case ColorName::red: return "red";
        case ColorName::green: return "green";
        case ColorName::blue: return "blue";
        default: return "yellow";
    }
}

inline const char* size_word(SizeClass s) {
    return s == SizeClass::small ? "small" : "large";
}

/// Spelled with spaces, as it appears in expression text.
inline const char* ordinal_phrase(Ordinal o) {
    switch (o) {
        case Ordinal::leftmost: return "leftmost";
        case Ordinal::rightmost: return "rightmost";
        case Ordinal::topmost: return "topmost";
        case Ordinal::bottommost: return "bottommost";
        case Ordinal::second_from_left: return "second from left";
        default: return "second from right";
    }
}

inline const char* relation_phrase(Relation r) {
    switch (r) {
        case Relation::left_of: return "left of";
        case Relation::right_of: return "right of";
        case Relation::above: return "above";
        default: return "below";
    }
}

struct Vocab {
    std::unordered_map<std::string, int> word_to_id;
    std::vector<std::string> id_to_word;
    int pad_id = 0;
    int unk_id = 1;

    int size() const { return static_cast<int>(id_to_word.size()); }

    int id_of(const std::string& word) const {
        auto it = word_to_id.find(word);
        return it == word_to_id.end() ? unk_id : it->second;
    }

    static const Vocab& standard() {
        static const Vocab v = [] {
            Vocab vb;
            const char* words[] = {
                "<pad>", "<unk>", "circle", "square", "triangle", "object",
                "red", "green", "blue", "yellow", "small", "large",
                "leftmost", "rightmost", "topmost", "bottommost",
                "second_from_left", "second_from_right",
                "left_of", "right_of", "above", "below",
            };
            for (const char* w : words) {
                vb.word_to_id.emplace(w, static_cast<int>(vb.id_to_word.size()));
                vb.id_to_word.emplace_back(w);
            }
            return vb;
        }();
        return v;
    }
};

// ---------------------------------------------------------------------------
// Tokenizer: lowercase, split on spaces, multiword phrases kept atomic
// ---------------------------------------------------------------------------

inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) words.emplace_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) words.emplace_back(std::move(cur));

    std::vector<std::string> tokens;
    for (std::size_t i = 0; i < words.size();) {
        if (i + 2 < words.size() && words[i] == "second" && words[i + 1] == "from" &&
            (words[i + 2] == "left" || words[i + 2] == "right")) {
            tokens.push_back("second_from_" + words[i + 2]);
            i += 3;
        } else if (i + 1 < words.size() && words[i + 1] == "of" &&
                   (words[i] == "left" || words[i] == "right")) {
            tokens.push_back(words[i] + "_of");
            i += 2;
        } else {
            tokens.push_back(words[i]);
            i += 1;
        }
    }
    return tokens;
}

inline std::vector<int> encode_tokens(const std::vector<std::string>& tokens, const Vocab& vocab) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(vocab.id_of(t));
    return ids;
}

inline std::string np_text(const NounPhrase& np) {
    std::string out;
    if (np.size) out += std::string(size_word(*np.size)) + " ";
    if (np.color) out += std::string(color_word(*np.color)) + " ";
    out += np.shape ? shape_word(*np.shape) : "object";
    return out;
}

inline std::string expression_text(const ExprAst& ast) {
    std::string out;
    if (ast.ordinal) out += std::string(ordinal_phrase(*ast.ordinal)) + " ";
    out += np_text(ast.np);
    if (ast.rel) {
        out += " " + std::string(relation_phrase(ast.rel->rel)) + " " + np_text(ast.rel->ref);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resolver: the ground-truth semantics of the mini-language
// ---------------------------------------------------------------------------

enum class ResolveKind { unique, ambiguous, empty };

struct Resolution {
    ResolveKind kind = ResolveKind::empty;
    int index = -1;  // valid only when kind == unique

    bool is_unique(int expected) const { return kind == ResolveKind::unique && index == expected; }
};

inline bool np_matches(const NounPhrase& np, const Instance& inst) {
    if (np.size && *np.size != inst.size) return false;
    if (np.color && *np.color != inst.color) return false;
    if (np.shape && *np.shape != inst.shape) return false;
    return true;
}

inline bool relation_holds(Relation rel, const Instance& cand, const Instance& ref) {
    switch (rel) {
        case Relation::left_of: return cand.center_col < ref.center_col;
        case Relation::right_of: return cand.center_col > ref.center_col;
        case Relation::above: return cand.center_row < ref.center_row;
        default: return cand.center_row > ref.center_row;
    }
}

inline bool ordinal_is_horizontal(Ordinal o) {
    return o != Ordinal::topmost && o != Ordinal::bottommost;
}

/// Filters by the noun phrase, restricts by the relation clause (whose
/// reference must match exactly one instance in the whole scene), then lets an
/// ordinal pick a position in axis-sorted order. Sort keys are (col,row) for
/// horizontal ordinals and (row,col) for vertical ones, so the order is total
/// even when two centers share a coordinate.
inline Resolution resolve_expression(const ExprAst& ast, const Scene& scene) {
    std::vector<int> cand;
    for (int i = 0; i < static_cast<int>(scene.instances.size()); ++i)
        if (np_matches(ast.np, scene.instances[i])) cand.push_back(i);

    if (ast.rel) {
        std::vector<int> refs;
        for (int i = 0; i < static_cast<int>(scene.instances.size()); ++i)
            if (np_matches(ast.rel->ref, scene.instances[i])) refs.push_back(i);
        if (refs.empty()) return {ResolveKind::empty, -1};
        if (refs.size() > 1) return {ResolveKind::ambiguous, -1};
        const Instance& ref = scene.instances[refs[0]];
        std::vector<int> kept;
        for (int i : cand)
            if (relation_holds(ast.rel->rel, scene.instances[i], ref)) kept.push_back(i);
        cand = std::move(kept);
    }

    if (ast.ordinal) {
        const bool horiz = ordinal_is_horizontal(*ast.ordinal);
        std::sort(cand.begin(), cand.end(), [&](int a, int b) {
            const Instance& ia = scene.instances[a];
            const Instance& ib = scene.instances[b];
            if (horiz) {
                if (ia.center_col != ib.center_col) return ia.center_col < ib.center_col;
                return ia.center_row < ib.center_row;
            }
            if (ia.center_row != ib.center_row) return ia.center_row < ib.center_row;
            return ia.center_col < ib.center_col;
        });
        const int n = static_cast<int>(cand.size());
        int pos = -1;
        switch (*ast.ordinal) {
            case Ordinal::leftmost:
            case Ordinal::topmost: pos = 0; break;
            case Ordinal::rightmost:
            case Ordinal::bottommost: pos = n - 1; break;
            case Ordinal::second_from_left: pos = 1; break;
            default: pos = n - 2; break;
        }
        if (pos < 0 || pos >= n) return {ResolveKind::empty, -1};
        return {ResolveKind::unique, cand[pos]};
    }

    if (cand.empty()) return {ResolveKind::empty, -1};
    if (cand.size() > 1) return {ResolveKind::ambiguous, -1};
    return {ResolveKind::unique, cand[0]};
}

// ---------------------------------------------------------------------------
// Rasterizers
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::uint8_t> raster_shape(ShapeKind kind, int H, int W, int cy, int cx,
                                              int r) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(H) * W, 0);
    auto set = [&](int y, int x) { mask[static_cast<std::size_t>(y) * W + x] = 1; };
    switch (kind) {
        case ShapeKind::circle:
            for (int y = cy - r; y <= cy + r; ++y)
                for (int x = cx - r; x <= cx + r; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) set(y, x);
            break;
        case ShapeKind::square:
            for (int y = cy - r; y <= cy + r; ++y)
                for (int x = cx - r; x <= cx + r; ++x) set(y, x);
            break;
        case ShapeKind::triangle:
            // apex-up isoceles: single pixel at the top row, base 2r+1 wide
            for (int dy = 0; dy <= 2 * r; ++dy) {
                const int hw = (dy + 1) / 2;
                for (int x = cx - hw; x <= cx + hw; ++x) set(cy - r + dy, x);
            }
            break;
    }
    return mask;
}

struct GravityCenter {
    int row;
    int col;
};

inline GravityCenter gravity_center(const std::vector<std::uint8_t>& mask, int H, int W) {
    double sum_r = 0.0, sum_c = 0.0;
    long count = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask[static_cast<std::size_t>(y) * W + x]) {
                sum_r += y;
                sum_c += x;
                ++count;
            }
    return {static_cast<int>(std::lround(sum_r / count)),
            static_cast<int>(std::lround(sum_c / count))};
}

inline bool masks_overlap(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] && b[i]) return true;
    return false;
}

// sRGB-ish base colors; per-pixel noise is added on top of these.
inline const double* color_base(ColorName c) {
    static const double table[4][3] = {
        {0.85, 0.15, 0.15},  // red
        {0.15, 0.75, 0.20},  // green
        {0.20, 0.30, 0.85},  // blue
        {0.90, 0.85, 0.20},  // yellow
    };
    return table[static_cast<int>(c)];
}

inline std::uint8_t quantize_unit(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

/// One scene-building round. Fails (returns false) when an instance cannot be
/// placed within 100 attempts; the caller then restarts with a fresh sub-seed.
inline bool try_build_scene(Pcg32& rng, const SceneConfig& cfg, Scene& out) {
    const int n = rng.next_range(cfg.min_instances, cfg.max_instances);
    std::vector<Instance> placed;
    placed.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            Instance inst;
            inst.shape = static_cast<ShapeKind>(rng.next_below(3));
            inst.color = static_cast<ColorName>(rng.next_below(4));
            inst.size = static_cast<SizeClass>(rng.next_below(2));
            const int r = inst.size == SizeClass::small
                              ? 3 + static_cast<int>(rng.next_below(2))
                              : 6 + static_cast<int>(rng.next_below(3));
            const int cy = rng.next_range(r, cfg.H - 1 - r);
            const int cx = rng.next_range(r, cfg.W - 1 - r);
            inst.mask = raster_shape(inst.shape, cfg.H, cfg.W, cy, cx, r);
            const GravityCenter g = gravity_center(inst.mask, cfg.H, cfg.W);
            inst.center_row = g.row;
            inst.center_col = g.col;

            const auto cell = grid_of_center(g.row, g.col, cfg.H, cfg.W, cfg.S);
            bool reject = false;
            for (const Instance& other : placed) {
                if (grid_of_center(other.center_row, other.center_col, cfg.H, cfg.W, cfg.S) ==
                    cell) {
                    reject = true;
                    break;
                }
                if (masks_overlap(inst.mask, other.mask)) {
                    reject = true;
                    break;
                }
            }
            if (reject) continue;
            placed.push_back(std::move(inst));
            ok = true;
        }
        if (!ok) return false;
    }

    out.H = cfg.H;
    out.W = cfg.W;
    out.S = cfg.S;
    out.instances = std::move(placed);
    const std::size_t plane = static_cast<std::size_t>(cfg.H) * cfg.W;
    // Gray background whose level varies per scene, so no pixel value is a
    // constant of the corpus.
    const double bg = 0.45 + rng.next_real() * 0.1;
    out.image.assign(plane * 3, quantize_unit(bg));
    for (const Instance& inst : out.instances) {
        const double* base = color_base(inst.color);
        // One tint offset per object on top of the class base color. Class
        // bases are at least 0.4 apart per deciding channel, so +-0.06 of
        // tint plus +-0.05 of pixel noise keeps the classes separable.
        double tint[3];
        for (int c = 0; c < 3; ++c) tint[c] = base[c] + (rng.next_real() * 0.12 - 0.06);
        for (int y = 0; y < cfg.H; ++y)
            for (int x = 0; x < cfg.W; ++x) {
                if (!inst.mask[static_cast<std::size_t>(y) * cfg.W + x]) continue;
                for (int c = 0; c < 3; ++c) {
                    const double noise = rng.next_real() * 0.1 - 0.05;
                    out.image[static_cast<std::size_t>(c) * plane +
                              static_cast<std::size_t>(y) * cfg.W + x] =
                        quantize_unit(tint[c] + noise);
                }
            }
    }
    return true;
}

}  // namespace detail

/// Deterministic for a fixed seed; never fails outward. A placement dead end
/// restarts the whole scene under a derived sub-seed.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
    for (std::uint64_t round = 0;; ++round) {
        Pcg32 rng(derive_seed(seed, round));
        Scene scene;
        if (detail::try_build_scene(rng, cfg, scene)) {
            scene.rng_seed = seed;
            return scene;
        }
    }
}

// ---------------------------------------------------------------------------
// Expression generator
// ---------------------------------------------------------------------------

namespace detail {

inline Expression finish_expression(const ExprAst& ast, int target) {
    Expression e;
    e.ast = ast;
    e.target_index = target;
    e.tokens = tokenize(expression_text(ast));
    return e;
}

/// Attribute-only template; attribute inclusion is randomized but always drawn
/// from the target's true attributes.
inline std::optional<ExprAst> try_attribute_template(Pcg32& rng, const Instance& t) {
    ExprAst ast;
    ast.np.shape = rng.next_below(100) < 85 ? std::optional<ShapeKind>(t.shape) : std::nullopt;
    if (rng.next_below(100) < 60) ast.np.color = t.color;
    if (rng.next_below(100) < 30) ast.np.size = t.size;
    return ast;
}

/// Ordinal template: find which ordinals select the target among the noun
/// phrase's candidates and pick one. The template is only emitted when the
/// primary-axis coordinates of all candidates are strictly distinct, so its
/// meaning never hinges on the tie-break.
inline std::optional<ExprAst> try_ordinal_template(Pcg32& rng, const Scene& scene, int target) {
    const Instance& t = scene.instances[target];
    ExprAst ast;
    ast.np.shape = rng.next_below(100) < 70 ? std::optional<ShapeKind>(t.shape) : std::nullopt;
    if (rng.next_below(100) < 30) ast.np.color = t.color;
    if (rng.next_below(100) < 15) ast.np.size = t.size;

    std::vector<int> cand;
    for (int i = 0; i < static_cast<int>(scene.instances.size()); ++i)
        if (np_matches(ast.np, scene.instances[i])) cand.push_back(i);
    if (std::find(cand.begin(), cand.end(), target) == cand.end()) return std::nullopt;

    std::vector<Ordinal> options;
    for (int axis = 0; axis < 2; ++axis) {  // 0 = horizontal, 1 = vertical
        auto key = [&](int i) {
            const Instance& inst = scene.instances[i];
            return axis == 0 ? inst.center_col : inst.center_row;
        };
        bool distinct = true;
        for (std::size_t a = 0; a < cand.size() && distinct; ++a)
            for (std::size_t b = a + 1; b < cand.size() && distinct; ++b)
                if (key(cand[a]) == key(cand[b])) distinct = false;
        if (!distinct) continue;
        std::vector<int> order = cand;
        std::sort(order.begin(), order.end(), [&](int a, int b) { return key(a) < key(b); });
        const int n = static_cast<int>(order.size());
        const int pos = static_cast<int>(
            std::find(order.begin(), order.end(), target) - order.begin());
        if (axis == 0) {
            if (pos == 0) options.push_back(Ordinal::leftmost);
            if (pos == n - 1) options.push_back(Ordinal::rightmost);
            if (pos == 1 && n >= 2) options.push_back(Ordinal::second_from_left);
            if (pos == n - 2 && n >= 2) options.push_back(Ordinal::second_from_right);
        } else {
            if (pos == 0) options.push_back(Ordinal::topmost);
            if (pos == n - 1) options.push_back(Ordinal::bottommost);
        }
    }
    if (options.empty()) return std::nullopt;
    ast.ordinal = options[rng.next_below(static_cast<std::uint32_t>(options.size()))];
    return ast;
}

/// Relation template: pick a reference instance that a color+shape phrase
/// identifies uniquely, then describe the target's position relative to it.
inline std::optional<ExprAst> try_relation_template(Pcg32& rng, const Scene& scene, int target) {
    const int n = static_cast<int>(scene.instances.size());
    if (n < 2) return std::nullopt;
    const Instance& t = scene.instances[target];
    int ref = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(n)));
    if (ref == target) return std::nullopt;
    const Instance& r = scene.instances[ref];

    NounPhrase ref_np;
    ref_np.shape = r.shape;
    if (rng.next_below(100) < 70) ref_np.color = r.color;
    int ref_matches = 0;
    for (const Instance& inst : scene.instances)
        if (np_matches(ref_np, inst)) ++ref_matches;
    if (ref_matches != 1) return std::nullopt;

    std::vector<Relation> options;
    if (t.center_col < r.center_col) options.push_back(Relation::left_of);
    if (t.center_col > r.center_col) options.push_back(Relation::right_of);
    if (t.center_row < r.center_row) options.push_back(Relation::above);
    if (t.center_row > r.center_row) options.push_back(Relation::below);
    if (options.empty()) return std::nullopt;

    ExprAst ast;
    ast.np.shape = rng.next_below(100) < 80 ? std::optional<ShapeKind>(t.shape) : std::nullopt;
    if (rng.next_below(100) < 40) ast.np.color = t.color;
    if (rng.next_below(100) < 20) ast.np.size = t.size;
    ast.rel = RelClause{options[rng.next_below(static_cast<std::uint32_t>(options.size()))],
                        ref_np};
    return ast;
}

}  // namespace detail

/// Draws up to 50 candidate templates and returns the first whose resolution
/// is uniquely the target. Falls back to the full size+color+shape
/// conjunction; when even that is ambiguous the caller must regenerate the
/// scene, signalled by nullopt.
inline std::optional<Expression> generate_expression(const Scene& scene, int target_index,
                                                     std::uint64_t seed) {
    Pcg32 rng(seed);
    const Instance& t = scene.instances[static_cast<std::size_t>(target_index)];
    for (int attempt = 0; attempt < 50; ++attempt) {
        const std::uint32_t roll = rng.next_below(100);
        std::optional<ExprAst> ast;
        if (roll < 35) {
            ast = detail::try_attribute_template(rng, t);
        } else if (roll < 65) {
            ast = detail::try_ordinal_template(rng, scene, target_index);
        } else {
            ast = detail::try_relation_template(rng, scene, target_index);
        }
        if (!ast) continue;
        if (resolve_expression(*ast, scene).is_unique(target_index))
            return detail::finish_expression(*ast, target_index);
    }
    ExprAst fallback;
    fallback.np = NounPhrase{t.size, t.color, t.shape};
    if (resolve_expression(fallback, scene).is_unique(target_index))
        return detail::finish_expression(fallback, target_index);
    return std::nullopt;
}

/// Scene + expression + ground truth, regenerating the scene under derived
/// sub-seeds until the expression generator succeeds. Never fails outward.
inline Sample make_sample(std::uint64_t seed, const SceneConfig& cfg = {}) {
    for (std::uint64_t round = 0;; ++round) {
        Scene scene = generate_scene(derive_seed(seed, 1, round), cfg);
        Pcg32 pick(derive_seed(seed, 2, round));
        const int target =
            static_cast<int>(pick.next_below(static_cast<std::uint32_t>(scene.instances.size())));
        auto expr = generate_expression(scene, target, derive_seed(seed, 3, round));
        if (!expr) continue;
        Sample s;
        s.target_mask = scene.instances[static_cast<std::size_t>(target)].mask;
        s.center_row = scene.instances[static_cast<std::size_t>(target)].center_row;
        s.center_col = scene.instances[static_cast<std::size_t>(target)].center_col;
        s.scene = std::move(scene);
        s.expression = std::move(*expr);
        return s;
    }
}

}  // namespace refprop
