#pragma once

#include <string>
#include <vector>

#include "declip/encoder.hpp"

namespace declip {

/// Which projection defines the context features of the decoupled head.
enum class ContextType { Q, K, Q_PLUS_K };

inline ContextType context_type_from_string(const std::string& s) {
    if (s == "q") return ContextType::Q;
    if (s == "k") return ContextType::K;
    if (s == "qk") return ContextType::Q_PLUS_K;
    throw IoError("context_type must be one of q, k, qk (got '" + s + "')");
}

inline std::string to_string(ContextType t) {
    switch (t) {
        case ContextType::Q: return "q";
        case ContextType::K: return "k";
        default: return "qk";
    }
}

struct DecoupledOutput {
    Grid context;     // H x W x D, pre-attention projected tokens
    Grid content;     // H x W x C, Proj(Attn_context . V) after V-L projection
    Mat attn_context; // HW x HW, head-averaged, row-stochastic
};

namespace detail {

inline void require_projection(const Mat& w, int dim, const char* name) {
    if (w.rows != dim || w.cols != dim)
        throw IoError(std::string("decoupled_forward: projection ") + name + " missing or misshaped (" +
                      std::to_string(w.rows) + "x" + std::to_string(w.cols) + ", need " + std::to_string(dim) + "x" +
                      std::to_string(dim) + ")");
}

} // namespace detail

/// Replacement for the final attention block: no residual, no FFN, and the
/// [CLS] token is excluded from the context attention. Multi-head structure is
/// preserved (per-head softmax, heads concatenated before the output
/// projection). For Q_PLUS_K the two post-softmax attention maps are averaged,
/// which keeps rows stochastic.
inline DecoupledOutput decoupled_forward(const TokenSeq& x, const BlockParams& b, const Mat& vl_w, const Mat& vl_b,
                                         int heads, ContextType ctype) {
    const int d = x.grid.c;
    const bool need_q = ctype != ContextType::K;
    const bool need_k = ctype != ContextType::Q;
    if (need_q) detail::require_projection(b.wq, d, "Proj_q");
    if (need_k) detail::require_projection(b.wk, d, "Proj_k");
    detail::require_projection(b.wv, d, "Proj_v");
    detail::require_projection(b.wo, d, "Proj");

    const Mat tokens = grid_to_mat(x.grid); // patch tokens only
    const int n = tokens.rows;
    Mat q, k;
    if (need_q) q = add_row_broadcast(matmul(tokens, b.wq), b.bq);
    if (need_k) k = add_row_broadcast(matmul(tokens, b.wk), b.bk);
    const Mat v = add_row_broadcast(matmul(tokens, b.wv), b.bv);

    const int dh = d / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    Mat attn_avg(n, n);
    std::vector<Mat> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Mat ah;
        if (ctype == ContextType::Q) {
            Mat qh = slice_cols(q, h * dh, dh);
            ah = softmax_rows(matmul_nt(qh, qh), sc);
        } else if (ctype == ContextType::K) {
            Mat kh = slice_cols(k, h * dh, dh);
            ah = softmax_rows(matmul_nt(kh, kh), sc);
        } else {
            Mat qh = slice_cols(q, h * dh, dh);
            Mat kh = slice_cols(k, h * dh, dh);
            ah = scale(add(softmax_rows(matmul_nt(qh, qh), sc), softmax_rows(matmul_nt(kh, kh), sc)), 0.5f);
        }
        add_inplace(attn_avg, ah);
        outs.push_back(matmul(ah, slice_cols(v, h * dh, dh)));
    }
    attn_avg = scale(attn_avg, 1.0f / static_cast<float>(heads));

    Mat content_tok = add_row_broadcast(matmul(concat_cols(outs), b.wo), b.bo);
    if (vl_w.numel() > 0) content_tok = add_row_broadcast(matmul(content_tok, vl_w), vl_b);

    Mat context_tok;
    if (ctype == ContextType::Q) context_tok = q;
    else if (ctype == ContextType::K) context_tok = k;
    else context_tok = scale(add(q, k), 0.5f);

    DecoupledOutput out;
    out.context = mat_to_grid(context_tok, x.grid.h, x.grid.w);
    out.content = mat_to_grid(content_tok, x.grid.h, x.grid.w);
    out.attn_context = std::move(attn_avg);
    return out;
}

/// Student forward used everywhere downstream: standard blocks 0..depth-2,
/// decoupled head in place of the final block.
inline DecoupledOutput decoupled_encode(const Grid& image, const EncoderParams& params, const EncoderConfig& cfg,
                                        ContextType ctype) {
    cfg.validate();
    TokenSeq x = patch_embed(image, params, cfg);
    for (int l = 0; l + 1 < cfg.depth; ++l) x = block_forward(x, params.blocks[l], cfg.heads, l).tokens;
    return decoupled_forward(x, params.blocks[cfg.depth - 1], params.vl_w, params.vl_b, cfg.heads, ctype);
}

/// The student's dense representation for region evaluation and segmentation.
inline Grid dense_for_inference(const Grid& image, const EncoderParams& params, const EncoderConfig& cfg,
                                ContextType ctype) {
    return decoupled_encode(image, params, cfg, ctype).content;
}

} // namespace declip
