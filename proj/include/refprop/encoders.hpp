// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "refprop/layers.hpp"
#include "refprop/ops.hpp"
#include "refprop/rng.hpp"

namespace refprop {

template <typename T>
struct Pyramid {
    Tensor<T> f_vl;  // (C_v, H/4,  W/4)
    Tensor<T> f_vm;  // (C_v, H/8,  W/8)
    Tensor<T> f_vs;  // (C_v, H/16, W/16)
};

// ---------------------------------------------------------------------------
// Vision backbone: small randomly initialized conv net + feature pyramid
// ---------------------------------------------------------------------------

/// Stem at full resolution, then n_stages blocks of [conv s2, conv s1] (each
/// conv + BN + leaky). The last three stage outputs pass through 1x1 lateral
/// convs and a top-down add chain to form the pyramid.
template <typename T>
struct Backbone {
    ConvBnAct<T> stem;
    std::vector<ConvBnAct<T>> reduce, refine;
    Conv2dLayer<T> lat_l, lat_m, lat_s;

    Backbone() = default;
    Backbone(int cv, int n_stages, Pcg32& rng) {
        if (n_stages < 3) throw std::invalid_argument("Backbone: need at least 3 stages");
        const auto c = static_cast<std::size_t>(cv);
        stem = ConvBnAct<T>(3, c, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        for (int s = 0; s < n_stages; ++s) {
            reduce.emplace_back(c, c, 3, 2, 1, 1, Activation::leaky_relu, T(0.1), rng);
            refine.emplace_back(c, c, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        }
        lat_l = Conv2dLayer<T>(c, c, 1, 1, 0, 1, /*bias=*/true, rng);
        lat_m = Conv2dLayer<T>(c, c, 1, 1, 0, 1, /*bias=*/true, rng);
        lat_s = Conv2dLayer<T>(c, c, 1, 1, 0, 1, /*bias=*/true, rng);
    }

    Pyramid<T> forward(Tape<T>& tape, const Tensor<T>& image, BnMode mode,
                       BnRecorder<T>* rec = nullptr) {
        if (image.rank() != 3 || image.dim(0) != 3)
            throw std::invalid_argument("Backbone: input must be (3,H,W)");
        Tensor<T> x = stem.forward(tape, image, mode, rec);
        std::vector<Tensor<T>> stages;
        stages.reserve(reduce.size());
        for (std::size_t s = 0; s < reduce.size(); ++s) {
            x = reduce[s].forward(tape, x, mode, rec);
            x = refine[s].forward(tape, x, mode, rec);
            stages.push_back(x);
        }
        const std::size_t n = stages.size();
        Tensor<T> pl = lat_l.forward(tape, stages[n - 3]);
        Tensor<T> pm = lat_m.forward(tape, stages[n - 2]);
        Tensor<T> ps = lat_s.forward(tape, stages[n - 1]);
        pm = add(tape, pm, bilinear_resize(tape, ps, pm.dim(1), pm.dim(2)));
        pl = add(tape, pl, bilinear_resize(tape, pm, pl.dim(1), pl.dim(2)));
        return {pl, pm, ps};
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        stem.register_params(reg, prefix + ".stem");
        for (std::size_t s = 0; s < reduce.size(); ++s) {
            reduce[s].register_params(reg, prefix + ".stage" + std::to_string(s) + ".reduce");
            refine[s].register_params(reg, prefix + ".stage" + std::to_string(s) + ".refine");
        }
        lat_l.register_params(reg, prefix + ".lat_l");
        lat_m.register_params(reg, prefix + ".lat_m");
        lat_s.register_params(reg, prefix + ".lat_s");
    }
};

// ---------------------------------------------------------------------------
// Language encoder: embeddings -> bi-GRU -> word attention
// ---------------------------------------------------------------------------

/// One GRU direction, bias-free:
///   z = sig(x Wz + h Uz), r = sig(x Wr + h Ur),
///   hc = tanh(x Wh + (r*h) Uh), h' = (1-z)*h + z*hc
template <typename T>
struct GruDirection {
    Tensor<T> wz, uz, wr, ur, wh, uh;

    GruDirection() = default;
    GruDirection(int in, int hidden, Pcg32& rng) {
        const auto i = static_cast<std::size_t>(in);
        const auto h = static_cast<std::size_t>(hidden);
        for (Tensor<T>* w : {&wz, &wr, &wh}) {
            *w = Tensor<T>({i, h});
            init_normal(*w, rng, std::sqrt(1.0 / in));
        }
        for (Tensor<T>* u : {&uz, &ur, &uh}) {
            *u = Tensor<T>({h, h});
            init_normal(*u, rng, std::sqrt(1.0 / hidden));
        }
    }

    Tensor<T> step(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& h) const {
        Tensor<T> z = sigmoid(tape, add(tape, matmul(tape, x, wz), matmul(tape, h, uz)));
        Tensor<T> r = sigmoid(tape, add(tape, matmul(tape, x, wr), matmul(tape, h, ur)));
        Tensor<T> hc = tanh_act(
            tape, add(tape, matmul(tape, x, wh), matmul(tape, mul(tape, r, h), uh)));
        return add(tape, mul(tape, one_minus(tape, z), h), mul(tape, z, hc));
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".wz", wz);
        reg.add(prefix + ".uz", uz);
        reg.add(prefix + ".wr", wr);
        reg.add(prefix + ".ur", ur);
        reg.add(prefix + ".wh", wh);
        reg.add(prefix + ".uh", uh);
    }
};

/// Both directions over the sequence; per-direction hidden size is half the
/// output width, states concatenated per position. An empty sequence yields a
/// single zero row.
template <typename T>
struct BiGru {
    int c_l = 0;
    GruDirection<T> fwd, bwd;

    BiGru() = default;
    BiGru(int in, int c_l_, Pcg32& rng) : c_l(c_l_) {
        if (c_l % 2 != 0) throw std::invalid_argument("BiGru: output width must be even");
        fwd = GruDirection<T>(in, c_l / 2, rng);
        bwd = GruDirection<T>(in, c_l / 2, rng);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& emb) const {
        const std::size_t t = emb.dim(0);
        if (t == 0) return Tensor<T>({1, static_cast<std::size_t>(c_l)});
        const std::size_t half = static_cast<std::size_t>(c_l) / 2;
        std::vector<Tensor<T>> fstate(t), bstate(t);
        Tensor<T> h({1, half});
        for (std::size_t i = 0; i < t; ++i) {
            Tensor<T> x = select_row(tape, emb, i).reshape({1, emb.dim(1)});
            h = fwd.step(tape, x, h);
            fstate[i] = h;
        }
        h = Tensor<T>({1, half});
        for (std::size_t i = t; i-- > 0;) {
            Tensor<T> x = select_row(tape, emb, i).reshape({1, emb.dim(1)});
            h = bwd.step(tape, x, h);
            bstate[i] = h;
        }
        std::vector<Tensor<T>> rows;
        rows.reserve(t);
        for (std::size_t i = 0; i < t; ++i)
            rows.push_back(concat_vec(tape, fstate[i].reshape({half}), bstate[i].reshape({half})));
        return stack_rows(tape, rows);
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        fwd.register_params(reg, prefix + ".fwd");
        bwd.register_params(reg, prefix + ".bwd");
    }
};

/// Additive attention: score_i = v . tanh(A f_i), softmaxed over positions.
template <typename T>
struct WordAttention {
    Tensor<T> a;  // (C_l, d_a), transposed form of the score projection
    Tensor<T> v;  // (d_a, 1)

    WordAttention() = default;
    WordAttention(int c_l, int d_a, Pcg32& rng) {
        a = Tensor<T>({static_cast<std::size_t>(c_l), static_cast<std::size_t>(d_a)});
        init_normal(a, rng, std::sqrt(1.0 / c_l));
        v = Tensor<T>({static_cast<std::size_t>(d_a), 1});
        init_normal(v, rng, std::sqrt(1.0 / d_a));
    }

    struct Out {
        Tensor<T> w_w;  // (t, 1), positive, sums to 1
        Tensor<T> f_t;  // (1, C_l)
    };

    Out forward(Tape<T>& tape, const Tensor<T>& f_w) const {
        const std::size_t t = f_w.dim(0);
        Tensor<T> scores = matmul(tape, tanh_act(tape, matmul(tape, f_w, a)), v);  // (t,1)
        Tensor<T> w_w = softmax(tape, scores.reshape({t})).reshape({t, 1});
        Tensor<T> f_t = matmul(tape, transpose2d(tape, w_w), f_w);
        return {w_w, f_t};
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".a", a);
        reg.add(prefix + ".v", v);
    }
};

template <typename T>
struct LanguageEncoder {
    Tensor<T> embed;  // (V, C_l)
    BiGru<T> gru;
    WordAttention<T> attn;

    LanguageEncoder() = default;
    LanguageEncoder(int vocab, int c_l, int d_a, Pcg32& rng) {
        embed = Tensor<T>({static_cast<std::size_t>(vocab), static_cast<std::size_t>(c_l)});
        init_normal(embed, rng, std::sqrt(1.0 / c_l));
        gru = BiGru<T>(c_l, c_l, rng);
        attn = WordAttention<T>(c_l, d_a, rng);
    }

    struct Out {
        Tensor<T> f_w;  // (t, C_l)
        Tensor<T> w_w;  // (t, 1)
        Tensor<T> f_t;  // (1, C_l)
    };

    Out forward(Tape<T>& tape, const std::vector<int>& token_ids) const {
        Tensor<T> f_w;
        if (token_ids.empty()) {
            f_w = Tensor<T>({1, embed.dim(1)});
        } else {
            f_w = gru.forward(tape, embedding_lookup(tape, embed, token_ids));
        }
        auto at = attn.forward(tape, f_w);
        return {f_w, at.w_w, at.f_t};
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".embed", embed);
        gru.register_params(reg, prefix + ".gru");
        attn.register_params(reg, prefix + ".attn");
    }
};

// ---------------------------------------------------------------------------
// Vision-language fusion
// ---------------------------------------------------------------------------

/// Per pixel: fused(i,j) = (f_v(i,j) Wv) * (F_t Wt), then BN + leaky. Wv is
/// per level, Wt shared across levels; both projections are bias-free.
template <typename T>
struct Fusion {
    Tensor<T> w_v[3];  // (C_v, C_f), levels l/m/s
    Tensor<T> w_t;     // (C_l, C_f)
    BatchNormLayer<T> bn[3];
    T slope = T(0.1);

    Fusion() = default;
    Fusion(int c_v, int c_l, int c_f, Pcg32& rng) {
        for (int k = 0; k < 3; ++k) {
            w_v[k] = Tensor<T>({static_cast<std::size_t>(c_v), static_cast<std::size_t>(c_f)});
            init_normal(w_v[k], rng, std::sqrt(1.0 / c_v));
            bn[k] = BatchNormLayer<T>(static_cast<std::size_t>(c_f));
        }
        w_t = Tensor<T>({static_cast<std::size_t>(c_l), static_cast<std::size_t>(c_f)});
        init_normal(w_t, rng, std::sqrt(1.0 / c_l));
    }

    Tensor<T> forward(Tape<T>& tape, int level, const Tensor<T>& f_v, const Tensor<T>& f_t,
                      BnMode mode, BnRecorder<T>* rec = nullptr) {
        const std::size_t h = f_v.dim(1), w = f_v.dim(2);
        const std::size_t c_f = w_v[level].dim(1);
        Tensor<T> vis = rows_to_chw(tape, matmul(tape, chw_to_rows(tape, f_v), w_v[level]), h, w);
        Tensor<T> lang = matmul(tape, f_t, w_t).reshape({c_f});
        Tensor<T> fused = mul(tape, vis, lang);
        // The language embedding enters the product as one scale per channel,
        // the same value at every pixel. Normalizing with this sample's own
        // statistics would divide that scale right back out (only its sign
        // survives) and the language weights would get no gradient, so the
        // norm here runs on the running aggregates in both modes.
        fused = bn[level].forward_frozen(tape, fused, mode, rec);
        return leaky_relu(tape, fused, slope);
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        const char* names[3] = {"l", "m", "s"};
        for (int k = 0; k < 3; ++k) {
            reg.add(prefix + ".w_v_" + names[k], w_v[k]);
            bn[k].register_params(reg, prefix + ".bn_" + names[k]);
        }
        reg.add(prefix + ".w_t", w_t);
    }
};

// ---------------------------------------------------------------------------
// Cross-level pathways
// ---------------------------------------------------------------------------

/// Downsampling pathway (large to small) ends in the identification input
/// F_ide; the mirrored upsampling pathway ends in the segmentation input
/// F_seg. Each step: resize, conv k3 + BN + leaky, add to the next level.
template <typename T>
struct Pathways {
    ConvBnAct<T> down1, down2, up1, up2;

    Pathways() = default;
    Pathways(int c_f, Pcg32& rng) {
        const auto c = static_cast<std::size_t>(c_f);
        down1 = ConvBnAct<T>(c, c, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        down2 = ConvBnAct<T>(c, c, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        up1 = ConvBnAct<T>(c, c, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
        up2 = ConvBnAct<T>(c, c, 3, 1, 1, 1, Activation::leaky_relu, T(0.1), rng);
    }

    struct Out {
        Tensor<T> f_ide;  // (C_f, hs, ws), smallest level
        Tensor<T> f_seg;  // (C_f, hl, wl), largest level
    };

    Out forward(Tape<T>& tape, const Tensor<T>& fused_l, const Tensor<T>& fused_m,
                const Tensor<T>& fused_s, BnMode mode, BnRecorder<T>* rec = nullptr) {
        auto step = [&](ConvBnAct<T>& block, const Tensor<T>& x, const Tensor<T>& into) {
            Tensor<T> r = bilinear_resize(tape, x, into.dim(1), into.dim(2));
            return add(tape, block.forward(tape, r, mode, rec), into);
        };
        Tensor<T> dm = step(down1, fused_l, fused_m);
        Tensor<T> f_ide = step(down2, dm, fused_s);
        Tensor<T> um = step(up1, fused_s, fused_m);
        Tensor<T> f_seg = step(up2, um, fused_l);
        return {f_ide, f_seg};
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        down1.register_params(reg, prefix + ".down1");
        down2.register_params(reg, prefix + ".down2");
        up1.register_params(reg, prefix + ".up1");
        up2.register_params(reg, prefix + ".up2");
    }
};

// ---------------------------------------------------------------------------
// Assembled encoder front end
// ---------------------------------------------------------------------------

struct EncoderConfig {
    int c_v = 32;
    int c_l = 32;
    int c_f = 32;
    int d_a = 32;
    int vocab = 22;
    int n_stages = 4;
};

template <typename T>
struct Encoders {
    EncoderConfig cfg;
    Backbone<T> backbone;
    LanguageEncoder<T> lang;
    Fusion<T> fusion;
    Pathways<T> pathways;

    Encoders() = default;
    Encoders(const EncoderConfig& cfg_, Pcg32& rng)
        : cfg(cfg_),
          backbone(cfg_.c_v, cfg_.n_stages, rng),
          lang(cfg_.vocab, cfg_.c_l, cfg_.d_a, rng),
          fusion(cfg_.c_v, cfg_.c_l, cfg_.c_f, rng),
          pathways(cfg_.c_f, rng) {}

    struct Out {
        Pyramid<T> pyramid;
        Tensor<T> f_w, w_w, f_t;
        Tensor<T> fused_l, fused_m, fused_s;
        Tensor<T> f_ide, f_seg;
    };

    Out forward(Tape<T>& tape, const Tensor<T>& image, const std::vector<int>& token_ids,
                BnMode mode, BnRecorder<T>* rec = nullptr) {
        Out o;
        o.pyramid = backbone.forward(tape, image, mode, rec);
        auto lo = lang.forward(tape, token_ids);
        o.f_w = lo.f_w;
        o.w_w = lo.w_w;
        o.f_t = lo.f_t;
        o.fused_l = fusion.forward(tape, 0, o.pyramid.f_vl, o.f_t, mode, rec);
        o.fused_m = fusion.forward(tape, 1, o.pyramid.f_vm, o.f_t, mode, rec);
        o.fused_s = fusion.forward(tape, 2, o.pyramid.f_vs, o.f_t, mode, rec);
        auto po = pathways.forward(tape, o.fused_l, o.fused_m, o.fused_s, mode, rec);
        o.f_ide = po.f_ide;
        o.f_seg = po.f_seg;
        return o;
    }

    void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
        backbone.register_params(reg, prefix + ".backbone");
        lang.register_params(reg, prefix + ".lang");
        fusion.register_params(reg, prefix + ".fusion");
        pathways.register_params(reg, prefix + ".path");
    }
};

}  // namespace refprop
