#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "declip/errors.hpp"
#include "declip/mat.hpp"
#include "declip/numerics.hpp"
#include "declip/rng.hpp"

namespace declip {

constexpr float kLayerNormEps = 1e-5f;
constexpr int kFfnRatio = 4;

struct EncoderConfig {
    int image_size = 32;
    int patch_size = 16;
    int depth = 2;
    int heads = 2;
    int dim = 8;
    int vl_dim = 8;
    bool has_vl_proj = true;
    std::array<float, 3> norm_mean = {0.5f, 0.5f, 0.5f};
    std::array<float, 3> norm_std = {0.5f, 0.5f, 0.5f};

    int grid_size() const { return image_size / patch_size; }
    int patch_tokens() const { return grid_size() * grid_size(); }
    int tokens() const { return 1 + patch_tokens(); }
    int out_dim() const { return has_vl_proj ? vl_dim : dim; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw IoError("encoder config: image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
        if (dim <= 0 || heads <= 0 || dim % heads != 0)
            throw IoError("encoder config: dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
        if (depth < 1) throw IoError("encoder config: depth must be >= 1");
        if (has_vl_proj && vl_dim <= 0) throw IoError("encoder config: vl_dim must be positive");
    }
};

/// One [CLS] embedding plus an H x W grid of patch-token embeddings.
struct TokenSeq {
    std::vector<float> cls;
    Grid grid;

    /// (1 + HW) x D matrix, cls first then row-major patch tokens.
    Mat to_mat() const {
        Mat m(1 + grid.h * grid.w, grid.c);
        std::copy(cls.begin(), cls.end(), m.data.begin());
        std::copy(grid.data.begin(), grid.data.end(), m.data.begin() + grid.c);
        return m;
    }

    static TokenSeq from_mat(const Mat& m, int h, int w) {
        TokenSeq ts;
        ts.cls.assign(m.data.begin(), m.data.begin() + m.cols);
        ts.grid = Grid(h, w, m.cols);
        std::copy(m.data.begin() + m.cols, m.data.end(), ts.grid.data.begin());
        return ts;
    }
};

struct BlockParams {
    Mat ln1_gain, ln1_bias;
    Mat wq, bq, wk, bk, wv, bv, wo, bo;
    Mat ln2_gain, ln2_bias;
    Mat w1, b1, w2, b2;
};

struct EncoderParams {
    Mat patch_w; // [patch*patch*3 x D]
    Mat patch_b; // [1 x D]
    Mat pos;     // [(1+HW) x D]
    Mat cls;     // [1 x D]
    std::vector<BlockParams> blocks;
    Mat vl_w; // [D x C], empty when has_vl_proj is false
    Mat vl_b; // [1 x C]

    /// Visit every tensor in a stable order. The order defines checkpoint
    /// layout and optimizer slot assignment.
    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        fn("patch_embed.weight", patch_w);
        fn("patch_embed.bias", patch_b);
        fn("pos_embed", pos);
        fn("cls_token", cls);
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i) + ".";
            BlockParams& b = blocks[i];
            fn(p + "ln1.gain", b.ln1_gain);
            fn(p + "ln1.bias", b.ln1_bias);
            fn(p + "attn.wq", b.wq);
            fn(p + "attn.bq", b.bq);
            fn(p + "attn.wk", b.wk);
            fn(p + "attn.bk", b.bk);
            fn(p + "attn.wv", b.wv);
            fn(p + "attn.bv", b.bv);
            fn(p + "attn.wo", b.wo);
            fn(p + "attn.bo", b.bo);
            fn(p + "ln2.gain", b.ln2_gain);
            fn(p + "ln2.bias", b.ln2_bias);
            fn(p + "ffn.w1", b.w1);
            fn(p + "ffn.b1", b.b1);
            fn(p + "ffn.w2", b.w2);
            fn(p + "ffn.b2", b.b2);
        }
        if (vl_w.numel() > 0) {
            fn("vl_proj.weight", vl_w);
            fn("vl_proj.bias", vl_b);
        }
    }

    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        const_cast<EncoderParams*>(this)->for_each_tensor(
            [&](const std::string& name, Mat& m) { fn(name, static_cast<const Mat&>(m)); });
    }
};

/// Everything encode() exposes: projected [CLS], dense feature grid,
/// per-layer head-averaged attention, and the final block's input and Q/K/V
/// so the decoupled head can replace that block.
struct EncodeOutput {
    std::vector<float> cls_token; // length C (vl-projected when configured)
    Grid dense;                   // H x W x C
    std::vector<Mat> attn_maps;   // depth entries, (1+HW) x (1+HW)
    std::vector<Grid> layer_tokens; // per-layer patch-token outputs, H x W x D
    TokenSeq last_block_input;
    Mat last_q, last_k, last_v;   // final block, full width D
};

inline Mat uniform_init(Rng& rng, int rows, int cols, int fan_in) {
    Mat m(rows, cols);
    const float s = 1.0f / std::sqrt(static_cast<float>(fan_in));
    for (float& v : m.data) v = rng.uniform_float(-s, s);
    return m;
}

inline EncoderParams init_encoder_params(const EncoderConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    EncoderParams p;
    const int d = cfg.dim;
    const int f = kFfnRatio * d;
    const int pvec = cfg.patch_size * cfg.patch_size * 3;
    p.patch_w = uniform_init(rng, pvec, d, pvec);
    p.patch_b = Mat(1, d);
    p.pos = uniform_init(rng, cfg.tokens(), d, d);
    p.cls = uniform_init(rng, 1, d, d);
    p.blocks.resize(cfg.depth);
    for (BlockParams& b : p.blocks) {
        b.ln1_gain = Mat(1, d);
        std::fill(b.ln1_gain.data.begin(), b.ln1_gain.data.end(), 1.0f);
        b.ln1_bias = Mat(1, d);
        b.wq = uniform_init(rng, d, d, d);
        b.bq = Mat(1, d);
        b.wk = uniform_init(rng, d, d, d);
        b.bk = Mat(1, d);
        b.wv = uniform_init(rng, d, d, d);
        b.bv = Mat(1, d);
        b.wo = uniform_init(rng, d, d, d);
        b.bo = Mat(1, d);
        b.ln2_gain = Mat(1, d);
        std::fill(b.ln2_gain.data.begin(), b.ln2_gain.data.end(), 1.0f);
        b.ln2_bias = Mat(1, d);
        b.w1 = uniform_init(rng, d, f, d);
        b.b1 = Mat(1, f);
        b.w2 = uniform_init(rng, f, d, f);
        b.b2 = Mat(1, d);
    }
    if (cfg.has_vl_proj) {
        p.vl_w = uniform_init(rng, d, cfg.vl_dim, d);
        p.vl_b = Mat(1, cfg.vl_dim);
    }
    return p;
}

inline Mat layer_norm_rows(const Mat& x, const Mat& gain, const Mat& bias, float eps) {
    Mat out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) layer_norm(x.row(i), gain.row(0), bias.row(0), eps, out.row(i));
    return out;
}

/// Linear patch stem: per-channel normalization, patch flattening, linear map,
/// learned positional terms, prepended [CLS].
inline TokenSeq patch_embed(const Grid& image, const EncoderParams& params, const EncoderConfig& cfg) {
    if (image.h != cfg.image_size || image.w != cfg.image_size || image.c != 3)
        throw IoError("patch_embed: expected " + std::to_string(cfg.image_size) + "x" +
                      std::to_string(cfg.image_size) + "x3 image, got " + std::to_string(image.h) + "x" +
                      std::to_string(image.w) + "x" + std::to_string(image.c));
    const int g = cfg.grid_size();
    const int ps = cfg.patch_size;
    const int pvec = ps * ps * 3;
    Mat patches(g * g, pvec);
    for (int gy = 0; gy < g; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
            float* row = &patches.data[static_cast<size_t>(gy * g + gx) * pvec];
            int k = 0;
            for (int py = 0; py < ps; ++py)
                for (int px = 0; px < ps; ++px)
                    for (int ch = 0; ch < 3; ++ch)
                        row[k++] = (image.at(gy * ps + py, gx * ps + px, ch) - cfg.norm_mean[ch]) / cfg.norm_std[ch];
        }
    }
    Mat tok = add_row_broadcast(matmul(patches, params.patch_w), params.patch_b);
    TokenSeq ts;
    ts.cls.resize(cfg.dim);
    for (int j = 0; j < cfg.dim; ++j) ts.cls[j] = params.cls(0, j) + params.pos(0, j);
    ts.grid = Grid(g, g, cfg.dim);
    for (int i = 0; i < g * g; ++i)
        for (int j = 0; j < cfg.dim; ++j) ts.grid.data[static_cast<size_t>(i) * cfg.dim + j] = tok(i, j) + params.pos(1 + i, j);
    return ts;
}

namespace detail {

struct AttnResult {
    Mat out;      // attention output after Wo/bo, N x D
    Mat attn_avg; // head-averaged post-softmax weights, N x N
    Mat q, k, v;  // full-width projections of the normed input
};

inline AttnResult multihead_attention(const Mat& xn, const BlockParams& b, int heads) {
    AttnResult r;
    r.q = add_row_broadcast(matmul(xn, b.wq), b.bq);
    r.k = add_row_broadcast(matmul(xn, b.wk), b.bk);
    r.v = add_row_broadcast(matmul(xn, b.wv), b.bv);
    const int d = xn.cols;
    const int dh = d / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Mat> outs;
    outs.reserve(heads);
    r.attn_avg = Mat(xn.rows, xn.rows);
    for (int h = 0; h < heads; ++h) {
        Mat qh = slice_cols(r.q, h * dh, dh);
        Mat kh = slice_cols(r.k, h * dh, dh);
        Mat vh = slice_cols(r.v, h * dh, dh);
        Mat ah = softmax_rows(matmul_nt(qh, kh), sc);
        add_inplace(r.attn_avg, ah);
        outs.push_back(matmul(ah, vh));
    }
    r.attn_avg = scale(r.attn_avg, 1.0f / static_cast<float>(heads));
    r.out = add_row_broadcast(matmul(concat_cols(outs), b.wo), b.bo);
    return r;
}

} // namespace detail

struct BlockResult {
    TokenSeq tokens;
    Mat attn; // head-averaged, (1+HW) x (1+HW)
};

/// Pre-norm transformer block. Returns the output tokens and the
/// head-averaged post-softmax attention map.
inline BlockResult block_forward(const TokenSeq& x, const BlockParams& b, int heads, int layer_index = -1) {
    const Mat xm = x.to_mat();
    const Mat xn = layer_norm_rows(xm, b.ln1_gain, b.ln1_bias, kLayerNormEps);
    detail::AttnResult ar = detail::multihead_attention(xn, b, heads);
    Mat y = add(xm, ar.out);
    Mat yn = layer_norm_rows(y, b.ln2_gain, b.ln2_bias, kLayerNormEps);
    Mat hmat = add_row_broadcast(matmul(yn, b.w1), b.b1);
    for (float& v : hmat.data) v = gelu(v);
    Mat z = add(y, add_row_broadcast(matmul(hmat, b.w2), b.b2));
    if (!z.finite())
        throw NumericError("block_forward: non-finite activations in layer " +
                           (layer_index >= 0 ? std::to_string(layer_index) : std::string("?")));
    BlockResult r;
    r.tokens = TokenSeq::from_mat(z, x.grid.h, x.grid.w);
    r.attn = std::move(ar.attn_avg);
    return r;
}

/// Full forward pass. Records per-layer attention and the final block's input
/// and Q/K/V so a decoupled head can replace that block.
inline EncodeOutput encode(const Grid& image, const EncoderParams& params, const EncoderConfig& cfg) {
    cfg.validate();
    if (static_cast<int>(params.blocks.size()) != cfg.depth)
        throw IoError("encode: params hold " + std::to_string(params.blocks.size()) + " blocks, config depth is " +
                      std::to_string(cfg.depth));
    EncodeOutput out;
    TokenSeq x = patch_embed(image, params, cfg);
    out.attn_maps.reserve(cfg.depth);
    for (int l = 0; l < cfg.depth; ++l) {
        if (l == cfg.depth - 1) {
            out.last_block_input = x;
            const Mat xn = layer_norm_rows(x.to_mat(), params.blocks[l].ln1_gain, params.blocks[l].ln1_bias,
                                           kLayerNormEps);
            detail::AttnResult ar = detail::multihead_attention(xn, params.blocks[l], cfg.heads);
            out.last_q = ar.q;
            out.last_k = ar.k;
            out.last_v = ar.v;
        }
        BlockResult br = block_forward(x, params.blocks[l], cfg.heads, l);
        x = std::move(br.tokens);
        out.attn_maps.push_back(std::move(br.attn));
        out.layer_tokens.push_back(x.grid);
    }
    Mat final_tokens = x.to_mat();
    Mat projected = cfg.has_vl_proj ? add_row_broadcast(matmul(final_tokens, params.vl_w), params.vl_b)
                                    : final_tokens;
    out.cls_token.assign(projected.row(0).begin(), projected.row(0).end());
    out.dense = mat_to_grid(slice_rows(projected, 1, cfg.patch_tokens()), cfg.grid_size(), cfg.grid_size());
    return out;
}

} // namespace declip
