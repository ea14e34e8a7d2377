#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "declip/autodiff.hpp"
#include "declip/decoupled.hpp"
#include "declip/encoder.hpp"
#include "declip/region_ops.hpp"

namespace declip {

/// How the correlation discrepancy is normalized: mean over anchor tokens of
/// the per-row L2 norm, or mean of |discrepancy| over all token pairs.
enum class ContextNorm { Rows, Pairs };

/// Decoupled training (content from pooled head output, context from the
/// projection tokens) versus the coupled baseline that applies both losses to
/// one undecoupled dense feature.
enum class DistillScheme { Decoupled, Coupled };

inline ContextNorm context_norm_from_string(const std::string& s) {
    if (s == "rows") return ContextNorm::Rows;
    if (s == "pairs") return ContextNorm::Pairs;
    throw IoError("context_norm must be rows or pairs (got '" + s + "')");
}

inline DistillScheme scheme_from_string(const std::string& s) {
    if (s == "decoupled") return DistillScheme::Decoupled;
    if (s == "coupled") return DistillScheme::Coupled;
    throw IoError("scheme must be decoupled or coupled (got '" + s + "')");
}

struct DistillOptions {
    float lambda = 0.25f;
    ContextType context_type = ContextType::Q;
    ContextNorm context_norm = ContextNorm::Rows;
    DistillScheme scheme = DistillScheme::Decoupled;
    int finetune_layers = 0; // 0 = all blocks
    int grid_lo = 1;
    int grid_hi = 6;
    int teacher_crop_px = 0; // 0 = student image size
    float lr = 1e-5f;
    float weight_decay = 0.1f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float adam_eps = 1e-8f;
    int epochs = 6;
    int batch = 2;
    uint64_t seed = 0;
    int max_steps = 0; // 0 = epochs * batches
    int log_every = 10;
    int roi_bins = 1;
    int roi_samples = 2;
    bool vl_proj_trainable = true;

    int effective_finetune_layers(int depth) const {
        const int f = finetune_layers <= 0 ? depth : finetune_layers;
        return f > depth ? depth : f;
    }
    int effective_teacher_crop(const EncoderConfig& cfg) const {
        return teacher_crop_px > 0 ? teacher_crop_px : cfg.image_size;
    }
};

struct LossReport {
    float content = 0.0f;
    float context = 0.0f;
    float total = 0.0f;
    int step = 0;
};

/// HW x HW matrix of pairwise token cosine similarities; diagonal forced to 1,
/// exactly symmetric by construction.
struct CorrVolume {
    int n = 0;
    Mat vals;
};

inline CorrVolume corr_volume(const Grid& tokens) {
    const int n = tokens.h * tokens.w;
    CorrVolume cv;
    cv.n = n;
    cv.vals = Mat(n, n);
    for (int i = 0; i < n; ++i) {
        cv.vals(i, i) = 1.0f;
        const auto ti = std::span<const float>(tokens.data.data() + static_cast<size_t>(i) * tokens.c,
                                               static_cast<size_t>(tokens.c));
        for (int j = i + 1; j < n; ++j) {
            const auto tj = std::span<const float>(tokens.data.data() + static_cast<size_t>(j) * tokens.c,
                                                   static_cast<size_t>(tokens.c));
            const float c = cosine(ti, tj);
            cv.vals(i, j) = c;
            cv.vals(j, i) = c;
        }
    }
    return cv;
}

namespace detail {

inline bool degenerate_region(const RegionBox& box, int img_w, int img_h) {
    return (box.x1 - box.x0) * static_cast<float>(img_w) < 1.0f ||
           (box.y1 - box.y0) * static_cast<float>(img_h) < 1.0f;
}

} // namespace detail

/// Eq-style content alignment: pooled student region features against the
/// teacher's [CLS] output on the matching crops, (1/k) * sum(1 - cos).
inline float content_loss(const Grid& student_content, const RegionSet& regions, const EncoderParams& teacher,
                          const EncoderConfig& teacher_cfg, const Grid& image, const DistillOptions& opt) {
    if (regions.boxes.empty()) throw IoError("content_loss: empty region set");
    const int crop_px = opt.effective_teacher_crop(teacher_cfg);
    float sum = 0.0f;
    int k = 0;
    for (const RegionBox& box : regions.boxes) {
        if (detail::degenerate_region(box, image.w, image.h)) {
            std::fprintf(stderr, "warning: skipping degenerate region [%g,%g,%g,%g]\n", box.x0, box.y0, box.x1,
                         box.y1);
            continue;
        }
        const std::vector<float> fs = roi_align(student_content, box, opt.roi_bins, opt.roi_samples);
        const EncodeOutput t = encode(crop_resize(image, box, crop_px), teacher, teacher_cfg);
        sum += 1.0f - cosine(t.cls_token, fs);
        ++k;
    }
    if (k == 0) throw IoError("content_loss: all regions degenerate");
    return sum / static_cast<float>(k);
}

/// Correlation-volume discrepancy between two token grids with identical H x W
/// but possibly different widths.
inline float context_loss(const Grid& student_context, const Grid& vfm_dense, ContextNorm norm) {
    if (student_context.h != vfm_dense.h || student_context.w != vfm_dense.w)
        throw IoError("context_loss: grid shapes differ, student " + std::to_string(student_context.h) + "x" +
                      std::to_string(student_context.w) + " vs vfm " + std::to_string(vfm_dense.h) + "x" +
                      std::to_string(vfm_dense.w));
    const CorrVolume rs = corr_volume(student_context);
    const CorrVolume rv = corr_volume(vfm_dense);
    const int n = rs.n;
    if (norm == ContextNorm::Rows) {
        float sum = 0.0f;
        for (int i = 0; i < n; ++i) {
            float row = 0.0f;
            for (int j = 0; j < n; ++j) {
                const float d = rv.vals(i, j) - rs.vals(i, j);
                row += d * d;
            }
            sum += std::sqrt(row);
        }
        return sum / static_cast<float>(n);
    }
    float sum = 0.0f;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) sum += std::fabs(rv.vals(i, j) - rs.vals(i, j));
    return sum / static_cast<float>(n) / static_cast<float>(n);
}

/// Mean |r_vfm - r| over all token pairs; the scale-free discrepancy metric
/// used by convergence diagnostics.
inline double mean_abs_corr_discrepancy(const Grid& tokens, const Grid& vfm_dense) {
    const CorrVolume rs = corr_volume(tokens);
    const CorrVolume rv = corr_volume(vfm_dense);
    double sum = 0.0;
    for (size_t i = 0; i < rs.vals.data.size(); ++i)
        sum += std::fabs(static_cast<double>(rv.vals.data[i]) - rs.vals.data[i]);
    return sum / static_cast<double>(rs.vals.numel());
}

// ---------------------------------------------------------------------------
// Training graph
// ---------------------------------------------------------------------------

struct TrainablePlan {
    struct Entry {
        std::string name;
        Mat* param;
    };
    std::vector<Entry> entries;

    bool contains(const std::string& name) const {
        for (const Entry& e : entries)
            if (e.name == name) return true;
        return false;
    }
};

/// Which student tensors receive gradient updates: the last finetune_layers
/// blocks plus the decoupled head's projections (and the V-L projection when
/// trainable). The stem, positional terms and [CLS] stay frozen. Under the
/// decoupled scheme the final block's norm/FFN tensors and any projection the
/// context type does not use are excluded.
inline TrainablePlan plan_trainable(EncoderParams& p, const EncoderConfig& cfg, const DistillOptions& opt) {
    TrainablePlan plan;
    const int depth = cfg.depth;
    const int ft = opt.effective_finetune_layers(depth);
    const int first = depth - ft;
    const bool need_q = opt.context_type != ContextType::K;
    const bool need_k = opt.context_type != ContextType::Q;
    for (int l = first; l < depth; ++l) {
        BlockParams& b = p.blocks[l];
        const std::string pre = "blocks." + std::to_string(l) + ".";
        const bool final_block = l == depth - 1;
        const bool decoupled_final = final_block && opt.scheme == DistillScheme::Decoupled;
        auto addt = [&](const char* name, Mat& m) { plan.entries.push_back({pre + name, &m}); };
        if (!decoupled_final) {
            addt("ln1.gain", b.ln1_gain);
            addt("ln1.bias", b.ln1_bias);
        }
        if (!decoupled_final || need_q) {
            addt("attn.wq", b.wq);
            addt("attn.bq", b.bq);
        }
        if (!decoupled_final || need_k) {
            addt("attn.wk", b.wk);
            addt("attn.bk", b.bk);
        }
        addt("attn.wv", b.wv);
        addt("attn.bv", b.bv);
        addt("attn.wo", b.wo);
        addt("attn.bo", b.bo);
        if (!decoupled_final) {
            addt("ln2.gain", b.ln2_gain);
            addt("ln2.bias", b.ln2_bias);
            addt("ffn.w1", b.w1);
            addt("ffn.b1", b.b1);
            addt("ffn.w2", b.w2);
            addt("ffn.b2", b.b2);
        }
    }
    if (cfg.has_vl_proj && opt.vl_proj_trainable) {
        plan.entries.push_back({"vl_proj.weight", &p.vl_w});
        plan.entries.push_back({"vl_proj.bias", &p.vl_b});
    }
    return plan;
}

namespace detail {

/// Per-image differentiable forward: trunk (frozen prefix runs outside the
/// tape), final block (decoupled head or standard block per scheme), both
/// losses, combined objective.
struct DistillGraph {
    ad::Tape tape;
    ad::Tape::Var content_tokens; // HW x C
    ad::Tape::Var context_tokens; // HW x D
    ad::Tape::Var content_loss_v;
    ad::Tape::Var context_loss_v;
    ad::Tape::Var total_v;
    std::vector<std::pair<std::string, ad::Tape::Var>> param_vars;
};

struct BlockVars {
    ad::Tape::Var ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2;
};

inline ad::Tape::Var reg_param(DistillGraph& g, const std::string& name, const Mat& m, bool trainable) {
    ad::Tape::Var v = g.tape.input(m, trainable);
    if (trainable) g.param_vars.emplace_back(name, v);
    return v;
}

inline ad::Tape::Var block_forward_tape(ad::Tape& t, ad::Tape::Var x, const BlockVars& b, int heads) {
    ad::Tape::Var xn = t.layer_norm_rows(x, b.ln1g, b.ln1b, kLayerNormEps);
    ad::Tape::Var q = t.add_row_broadcast(t.matmul(xn, b.wq), b.bq);
    ad::Tape::Var k = t.add_row_broadcast(t.matmul(xn, b.wk), b.bk);
    ad::Tape::Var v = t.add_row_broadcast(t.matmul(xn, b.wv), b.bv);
    const int d = t.cols(q);
    const int dh = d / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<ad::Tape::Var> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        ad::Tape::Var qh = t.slice_cols(q, h * dh, dh);
        ad::Tape::Var kh = t.slice_cols(k, h * dh, dh);
        ad::Tape::Var vh = t.slice_cols(v, h * dh, dh);
        ad::Tape::Var ah = t.softmax_rows(t.matmul_nt_op(qh, kh), sc);
        outs.push_back(t.matmul(ah, vh));
    }
    ad::Tape::Var attn_out = t.add_row_broadcast(t.matmul(t.concat_cols(outs), b.wo), b.bo);
    ad::Tape::Var y = t.add(x, attn_out);
    ad::Tape::Var yn = t.layer_norm_rows(y, b.ln2g, b.ln2b, kLayerNormEps);
    ad::Tape::Var f = t.add_row_broadcast(t.matmul(t.gelu(t.add_row_broadcast(t.matmul(yn, b.w1), b.b1)), b.w2),
                                          b.b2);
    return t.add(y, f);
}

inline DistillGraph build_distill_graph(const Grid& image, EncoderParams& student, const EncoderParams& teacher,
                                        const EncoderParams& vfm, const EncoderConfig& scfg,
                                        const EncoderConfig& vcfg, const DistillOptions& opt,
                                        const RegionSet& regions) {
    DistillGraph g;
    ad::Tape& t = g.tape;
    const int depth = scfg.depth;
    const int ft = opt.effective_finetune_layers(depth);
    const int first_trainable = depth - ft;
    const int hw = scfg.patch_tokens();

    // frozen prefix outside the tape
    TokenSeq x = patch_embed(image, student, scfg);
    int l = 0;
    for (; l < first_trainable && l + 1 < depth; ++l) x = block_forward(x, student.blocks[l], scfg.heads, l).tokens;
    ad::Tape::Var xv = t.input(x.to_mat(), false);

    // trainable trunk blocks
    for (; l + 1 < depth; ++l) {
        const BlockParams& b = student.blocks[l];
        const std::string pre = "blocks." + std::to_string(l) + ".";
        BlockVars bv;
        bv.ln1g = reg_param(g, pre + "ln1.gain", b.ln1_gain, true);
        bv.ln1b = reg_param(g, pre + "ln1.bias", b.ln1_bias, true);
        bv.wq = reg_param(g, pre + "attn.wq", b.wq, true);
        bv.bq = reg_param(g, pre + "attn.bq", b.bq, true);
        bv.wk = reg_param(g, pre + "attn.wk", b.wk, true);
        bv.bk = reg_param(g, pre + "attn.bk", b.bk, true);
        bv.wv = reg_param(g, pre + "attn.wv", b.wv, true);
        bv.bv = reg_param(g, pre + "attn.bv", b.bv, true);
        bv.wo = reg_param(g, pre + "attn.wo", b.wo, true);
        bv.bo = reg_param(g, pre + "attn.bo", b.bo, true);
        bv.ln2g = reg_param(g, pre + "ln2.gain", b.ln2_gain, true);
        bv.ln2b = reg_param(g, pre + "ln2.bias", b.ln2_bias, true);
        bv.w1 = reg_param(g, pre + "ffn.w1", b.w1, true);
        bv.b1 = reg_param(g, pre + "ffn.b1", b.b1, true);
        bv.w2 = reg_param(g, pre + "ffn.w2", b.w2, true);
        bv.b2 = reg_param(g, pre + "ffn.b2", b.b2, true);
        xv = block_forward_tape(t, xv, bv, scfg.heads);
    }

    // final block
    const BlockParams& fb = student.blocks[depth - 1];
    const std::string fpre = "blocks." + std::to_string(depth - 1) + ".";
    const bool final_trainable = first_trainable <= depth - 1;
    const int dh = scfg.dim / scfg.heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));

    if (opt.scheme == DistillScheme::Decoupled) {
        const bool need_q = opt.context_type != ContextType::K;
        const bool need_k = opt.context_type != ContextType::Q;
        ad::Tape::Var xp = t.slice_rows(xv, 1, hw); // drop [CLS]
        ad::Tape::Var q, k;
        if (need_q) {
            ad::Tape::Var wq = reg_param(g, fpre + "attn.wq", fb.wq, final_trainable);
            ad::Tape::Var bq = reg_param(g, fpre + "attn.bq", fb.bq, final_trainable);
            q = t.add_row_broadcast(t.matmul(xp, wq), bq);
        }
        if (need_k) {
            ad::Tape::Var wk = reg_param(g, fpre + "attn.wk", fb.wk, final_trainable);
            ad::Tape::Var bk = reg_param(g, fpre + "attn.bk", fb.bk, final_trainable);
            k = t.add_row_broadcast(t.matmul(xp, wk), bk);
        }
        ad::Tape::Var wv = reg_param(g, fpre + "attn.wv", fb.wv, final_trainable);
        ad::Tape::Var bvv = reg_param(g, fpre + "attn.bv", fb.bv, final_trainable);
        ad::Tape::Var v = t.add_row_broadcast(t.matmul(xp, wv), bvv);
        std::vector<ad::Tape::Var> outs;
        outs.reserve(scfg.heads);
        for (int h = 0; h < scfg.heads; ++h) {
            ad::Tape::Var ah;
            if (opt.context_type == ContextType::Q) {
                ah = t.softmax_rows(t.matmul_nt_self(t.slice_cols(q, h * dh, dh)), sc);
            } else if (opt.context_type == ContextType::K) {
                ah = t.softmax_rows(t.matmul_nt_self(t.slice_cols(k, h * dh, dh)), sc);
            } else {
                ad::Tape::Var aq = t.softmax_rows(t.matmul_nt_self(t.slice_cols(q, h * dh, dh)), sc);
                ad::Tape::Var ak = t.softmax_rows(t.matmul_nt_self(t.slice_cols(k, h * dh, dh)), sc);
                ah = t.affine(t.add(aq, ak), 0.5f, 0.0f);
            }
            outs.push_back(t.matmul(ah, t.slice_cols(v, h * dh, dh)));
        }
        ad::Tape::Var wo = reg_param(g, fpre + "attn.wo", fb.wo, final_trainable);
        ad::Tape::Var bo = reg_param(g, fpre + "attn.bo", fb.bo, final_trainable);
        ad::Tape::Var content = t.add_row_broadcast(t.matmul(t.concat_cols(outs), wo), bo);
        if (scfg.has_vl_proj) {
            ad::Tape::Var vw = reg_param(g, "vl_proj.weight", student.vl_w, opt.vl_proj_trainable);
            ad::Tape::Var vb = reg_param(g, "vl_proj.bias", student.vl_b, opt.vl_proj_trainable);
            content = t.add_row_broadcast(t.matmul(content, vw), vb);
        }
        g.content_tokens = content;
        if (opt.context_type == ContextType::Q) g.context_tokens = q;
        else if (opt.context_type == ContextType::K) g.context_tokens = k;
        else g.context_tokens = t.affine(t.add(q, k), 0.5f, 0.0f);
    } else {
        BlockVars bv;
        bv.ln1g = reg_param(g, fpre + "ln1.gain", fb.ln1_gain, final_trainable);
        bv.ln1b = reg_param(g, fpre + "ln1.bias", fb.ln1_bias, final_trainable);
        bv.wq = reg_param(g, fpre + "attn.wq", fb.wq, final_trainable);
        bv.bq = reg_param(g, fpre + "attn.bq", fb.bq, final_trainable);
        bv.wk = reg_param(g, fpre + "attn.wk", fb.wk, final_trainable);
        bv.bk = reg_param(g, fpre + "attn.bk", fb.bk, final_trainable);
        bv.wv = reg_param(g, fpre + "attn.wv", fb.wv, final_trainable);
        bv.bv = reg_param(g, fpre + "attn.bv", fb.bv, final_trainable);
        bv.wo = reg_param(g, fpre + "attn.wo", fb.wo, final_trainable);
        bv.bo = reg_param(g, fpre + "attn.bo", fb.bo, final_trainable);
        bv.ln2g = reg_param(g, fpre + "ln2.gain", fb.ln2_gain, final_trainable);
        bv.ln2b = reg_param(g, fpre + "ln2.bias", fb.ln2_bias, final_trainable);
        bv.w1 = reg_param(g, fpre + "ffn.w1", fb.w1, final_trainable);
        bv.b1 = reg_param(g, fpre + "ffn.b1", fb.b1, final_trainable);
        bv.w2 = reg_param(g, fpre + "ffn.w2", fb.w2, final_trainable);
        bv.b2 = reg_param(g, fpre + "ffn.b2", fb.b2, final_trainable);
        ad::Tape::Var z = block_forward_tape(t, xv, bv, scfg.heads);
        ad::Tape::Var dense = t.slice_rows(z, 1, hw);
        ad::Tape::Var content = dense;
        if (scfg.has_vl_proj) {
            ad::Tape::Var vw = reg_param(g, "vl_proj.weight", student.vl_w, opt.vl_proj_trainable);
            ad::Tape::Var vb = reg_param(g, "vl_proj.bias", student.vl_b, opt.vl_proj_trainable);
            content = t.add_row_broadcast(t.matmul(dense, vw), vb);
        }
        g.content_tokens = content;
        g.context_tokens = dense;
    }

    // content loss against frozen teacher [CLS] targets
    const int crop_px = opt.effective_teacher_crop(scfg);
    const int gsz = scfg.grid_size();
    ad::Tape::Var cos_sum;
    int k_used = 0;
    for (const RegionBox& box : regions.boxes) {
        if (degenerate_region(box, image.w, image.h)) {
            std::fprintf(stderr, "warning: skipping degenerate region [%g,%g,%g,%g]\n", box.x0, box.y0, box.x1,
                         box.y1);
            continue;
        }
        const EncodeOutput te = encode(crop_resize(image, box, crop_px), teacher, scfg);
        Mat target(1, static_cast<int>(te.cls_token.size()));
        std::copy(te.cls_token.begin(), te.cls_token.end(), target.data.begin());
        ad::Tape::Var pooled =
            t.weighted_row_sum(g.content_tokens, roi_align_weights(gsz, gsz, box, opt.roi_bins, opt.roi_samples));
        ad::Tape::Var ci = t.cosine_vs_const(pooled, std::move(target));
        cos_sum = k_used == 0 ? ci : t.add(cos_sum, ci);
        ++k_used;
    }
    if (k_used == 0) throw IoError("distill: all regions degenerate");
    g.content_loss_v = t.affine(cos_sum, -1.0f / static_cast<float>(k_used), 1.0f);

    // context loss against the frozen VFM correlation volume
    RegionBox full;
    const Grid vfm_input = crop_resize(image, full, vcfg.image_size);
    const EncodeOutput ve = encode(vfm_input, vfm, vcfg);
    if (ve.dense.h != gsz || ve.dense.w != gsz)
        throw IoError("distill: token-count mismatch, student grid " + std::to_string(gsz) + " vs vfm grid " +
                      std::to_string(ve.dense.h));
    ad::Tape::Var rv = t.input(corr_volume(ve.dense).vals, false);
    ad::Tape::Var rs = t.set_diag_one(t.matmul_nt_self(t.normalize_rows(g.context_tokens)));
    ad::Tape::Var diff = t.sub(rv, rs);
    g.context_loss_v = opt.context_norm == ContextNorm::Rows ? t.mean_all(t.row_l2_norms(diff))
                                                             : t.mean_all(t.abs(diff));

    g.total_v = t.add_scaled(g.content_loss_v, g.context_loss_v, opt.lambda);
    return g;
}

} // namespace detail

/// One student forward shared by both losses; the teachers stay frozen.
inline LossReport total_loss(const Grid& image, EncoderParams& student, const EncoderParams& teacher,
                             const EncoderParams& vfm, const EncoderConfig& scfg, const EncoderConfig& vcfg,
                             const DistillOptions& opt, const RegionSet& regions) {
    detail::DistillGraph g =
        detail::build_distill_graph(image, student, teacher, vfm, scfg, vcfg, opt, regions);
    LossReport r;
    r.content = g.tape.value(g.content_loss_v)(0, 0);
    r.context = g.tape.value(g.context_loss_v)(0, 0);
    r.total = g.tape.value(g.total_v)(0, 0);
    return r;
}

struct LossAndGrads {
    LossReport report;
    /// One entry per student tensor in for_each_tensor order; frozen tensors
    /// carry exact zeros.
    std::vector<std::pair<std::string, Mat>> grads;

    const Mat& grad(const std::string& name) const {
        for (const auto& [n, m] : grads)
            if (n == name) return m;
        throw IoError("no gradient entry for tensor " + name);
    }
};

inline LossAndGrads loss_and_gradients(const Grid& image, EncoderParams& student, const EncoderParams& teacher,
                                       const EncoderParams& vfm, const EncoderConfig& scfg,
                                       const EncoderConfig& vcfg, const DistillOptions& opt,
                                       const RegionSet& regions) {
    detail::DistillGraph g =
        detail::build_distill_graph(image, student, teacher, vfm, scfg, vcfg, opt, regions);
    g.tape.backward(g.total_v);

    LossAndGrads out;
    out.report.content = g.tape.value(g.content_loss_v)(0, 0);
    out.report.context = g.tape.value(g.context_loss_v)(0, 0);
    out.report.total = g.tape.value(g.total_v)(0, 0);

    student.for_each_tensor([&](const std::string& name, Mat& m) {
        Mat grad(m.rows, m.cols);
        for (const auto& [n, var] : g.param_vars) {
            if (n == name) {
                grad = g.tape.grad(var);
                break;
            }
        }
        if (!grad.finite()) throw NumericError("loss_and_gradients: non-finite gradient for " + name);
        out.grads.emplace_back(name, std::move(grad));
    });
    return out;
}

/// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
public:
    AdamW(const TrainablePlan& plan, float lr, float weight_decay, float beta1, float beta2, float eps)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        m_.reserve(plan.entries.size());
        v_.reserve(plan.entries.size());
        for (const auto& e : plan.entries) {
            m_.emplace_back(e.param->rows, e.param->cols);
            v_.emplace_back(e.param->rows, e.param->cols);
        }
    }

    void step(const TrainablePlan& plan, const std::vector<Mat>& grads) {
        ++t_;
        const float bc1 = 1.0f - std::pow(b1_, static_cast<float>(t_));
        const float bc2 = 1.0f - std::pow(b2_, static_cast<float>(t_));
        for (size_t i = 0; i < plan.entries.size(); ++i) {
            Mat& p = *plan.entries[i].param;
            const Mat& gm = grads[i];
            for (size_t j = 0; j < p.data.size(); ++j) {
                const float gj = gm.data[j];
                m_[i].data[j] = b1_ * m_[i].data[j] + (1.0f - b1_) * gj;
                v_[i].data[j] = b2_ * v_[i].data[j] + (1.0f - b2_) * gj * gj;
                const float mh = m_[i].data[j] / bc1;
                const float vh = v_[i].data[j] / bc2;
                p.data[j] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * p.data[j]);
            }
        }
    }

private:
    float lr_, wd_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<Mat> m_, v_;
};

struct TrainResult {
    std::vector<LossReport> log;
    int steps = 0;
};

/// Deterministic training loop: per step, sample a region grid, average losses
/// and gradients over the batch, apply one optimizer update. Reports are
/// emitted every log_every steps plus the first and last step.
inline TrainResult train(const std::vector<Grid>& images, EncoderParams& student, const EncoderParams& teacher,
                         const EncoderParams& vfm, const EncoderConfig& scfg, const EncoderConfig& vcfg,
                         const DistillOptions& opt,
                         const std::function<void(const LossReport&)>& on_report = nullptr) {
    if (images.empty()) throw IoError("train: empty dataset");
    TrainablePlan plan = plan_trainable(student, scfg, opt);
    AdamW adam(plan, opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.adam_eps);
    Rng rng(opt.seed);

    const int n = static_cast<int>(images.size());
    const int batch = std::min(opt.batch, n);
    const int steps_per_epoch = (n + batch - 1) / batch;
    const int total_steps = opt.max_steps > 0 ? opt.max_steps : opt.epochs * steps_per_epoch;

    TrainResult result;
    LossReport last;
    std::vector<int> order(n);
    int step = 0;
    while (step < total_steps) {
        for (int i = 0; i < n; ++i) order[i] = i;
        for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
        for (int b0 = 0; b0 < n && step < total_steps; b0 += batch) {
            const int bs = std::min(batch, n - b0);
            const RegionSet regions = sample_grid(rng, opt.grid_lo, opt.grid_hi);
            std::vector<Mat> acc(plan.entries.size());
            for (size_t i = 0; i < plan.entries.size(); ++i)
                acc[i] = Mat(plan.entries[i].param->rows, plan.entries[i].param->cols);
            LossReport rep;
            rep.step = step;
            const float inv = 1.0f / static_cast<float>(bs);
            for (int bi = 0; bi < bs; ++bi) {
                LossAndGrads lg = loss_and_gradients(images[order[b0 + bi]], student, teacher, vfm, scfg, vcfg,
                                                     opt, regions);
                rep.content += lg.report.content * inv;
                rep.context += lg.report.context * inv;
                rep.total += lg.report.total * inv;
                for (size_t i = 0; i < plan.entries.size(); ++i) {
                    const Mat& gm = lg.grad(plan.entries[i].name);
                    for (size_t j = 0; j < acc[i].data.size(); ++j) acc[i].data[j] += gm.data[j] * inv;
                }
            }
            if (!std::isfinite(rep.total)) {
                if (on_report) on_report(last);
                throw NumericError("train: loss diverged at step " + std::to_string(step) + " (last total " +
                                   std::to_string(last.total) + ")");
            }
            last = rep;
            if (step % opt.log_every == 0 || step + 1 == total_steps) {
                result.log.push_back(rep);
                if (on_report) on_report(rep);
            }
            adam.step(plan, acc);
            ++step;
        }
    }
    result.steps = step;
    return result;
}

} // namespace declip
