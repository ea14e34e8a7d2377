#pragma once

// Double-precision re-implementation of the distillation forward pass.
// Written as straight loops, independent of the float32 kernels, so it can
// serve as the finite-difference oracle for gradient verification.

#include <cmath>
#include <vector>

#include "declip/decoupled.hpp"
#include "declip/distill.hpp"
#include "declip/encoder.hpp"
#include "declip/region_ops.hpp"

namespace declip::ref {

struct DMat {
    int rows = 0, cols = 0;
    std::vector<double> data;
    DMat() = default;
    DMat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

inline DMat to_double(const Mat& m) {
    DMat d(m.rows, m.cols);
    for (size_t i = 0; i < m.data.size(); ++i) d.data[i] = m.data[i];
    return d;
}

struct DBlock {
    DMat ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2;
};

struct DParams {
    DMat patch_w, patch_b, pos, cls, vl_w, vl_b;
    std::vector<DBlock> blocks;
};

inline DParams to_double(const EncoderParams& p) {
    DParams d;
    d.patch_w = to_double(p.patch_w);
    d.patch_b = to_double(p.patch_b);
    d.pos = to_double(p.pos);
    d.cls = to_double(p.cls);
    d.vl_w = to_double(p.vl_w);
    d.vl_b = to_double(p.vl_b);
    d.blocks.reserve(p.blocks.size());
    for (const BlockParams& b : p.blocks)
        d.blocks.push_back(DBlock{to_double(b.ln1_gain), to_double(b.ln1_bias), to_double(b.wq), to_double(b.bq),
                                  to_double(b.wk), to_double(b.bk), to_double(b.wv), to_double(b.bv),
                                  to_double(b.wo), to_double(b.bo), to_double(b.ln2_gain), to_double(b.ln2_bias),
                                  to_double(b.w1), to_double(b.b1), to_double(b.w2), to_double(b.b2)});
    return d;
}

inline DMat dmatmul(const DMat& a, const DMat& b) {
    DMat c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i)
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            for (int j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

inline void dadd_row(DMat& a, const DMat& row) {
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) a(i, j) += row(0, j);
}

inline DMat dlayer_norm(const DMat& x, const DMat& g, const DMat& b, double eps) {
    DMat out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < x.cols; ++j) mean += x(i, j);
        mean /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= x.cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < x.cols; ++j) out(i, j) = g(0, j) * (x(i, j) - mean) * inv + b(0, j);
    }
    return out;
}

inline DMat dsoftmax_rows(const DMat& m, double scale) {
    DMat out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        double mx = -1e300;
        for (int j = 0; j < m.cols; ++j) mx = std::max(mx, m(i, j) * scale);
        double sum = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            out(i, j) = std::exp(m(i, j) * scale - mx);
            sum += out(i, j);
        }
        for (int j = 0; j < m.cols; ++j) out(i, j) /= sum;
    }
    return out;
}

inline double dcosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::max(-1.0, std::min(1.0, dot / (std::sqrt(na) * std::sqrt(nb))));
}

// image sampling in double, same coordinate convention as the float path
struct DImage {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;
};

inline DImage to_double(const Grid& g) {
    DImage d{g.h, g.w, g.c, {}};
    d.data.assign(g.data.begin(), g.data.end());
    return d;
}

inline std::vector<double> dbilinear(const DImage& g, double x, double y) {
    const double cx = std::min(std::max(x, 0.0), static_cast<double>(g.w - 1));
    const double cy = std::min(std::max(y, 0.0), static_cast<double>(g.h - 1));
    const int x0 = static_cast<int>(std::floor(cx));
    const int y0 = static_cast<int>(std::floor(cy));
    const int x1 = std::min(x0 + 1, g.w - 1);
    const int y1 = std::min(y0 + 1, g.h - 1);
    const double fx = cx - x0, fy = cy - y0;
    std::vector<double> out(g.c);
    for (int ch = 0; ch < g.c; ++ch) {
        const double v00 = g.data[(static_cast<size_t>(y0) * g.w + x0) * g.c + ch];
        const double v01 = g.data[(static_cast<size_t>(y0) * g.w + x1) * g.c + ch];
        const double v10 = g.data[(static_cast<size_t>(y1) * g.w + x0) * g.c + ch];
        const double v11 = g.data[(static_cast<size_t>(y1) * g.w + x1) * g.c + ch];
        out[ch] = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11;
    }
    return out;
}

inline DImage dcrop_resize(const DImage& image, const RegionBox& box, int out) {
    DImage res{out, out, image.c, std::vector<double>(static_cast<size_t>(out) * out * image.c)};
    const double bw = static_cast<double>(box.x1) - box.x0;
    const double bh = static_cast<double>(box.y1) - box.y0;
    for (int oy = 0; oy < out; ++oy) {
        const double v = box.y0 + (oy + 0.5) / out * bh;
        for (int ox = 0; ox < out; ++ox) {
            const double u = box.x0 + (ox + 0.5) / out * bw;
            const std::vector<double> s = dbilinear(image, u * image.w - 0.5, v * image.h - 0.5);
            for (int ch = 0; ch < image.c; ++ch)
                res.data[(static_cast<size_t>(oy) * out + ox) * image.c + ch] = s[ch];
        }
    }
    return res;
}

inline DMat dpatch_embed(const DImage& image, const DParams& p, const EncoderConfig& cfg) {
    const int g = cfg.grid_size();
    const int ps = cfg.patch_size;
    const int d = cfg.dim;
    DMat x(1 + g * g, d);
    for (int j = 0; j < d; ++j) x(0, j) = p.cls(0, j) + p.pos(0, j);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            const int ti = gy * g + gx;
            for (int j = 0; j < d; ++j) {
                double acc = p.patch_b(0, j);
                int k = 0;
                for (int py = 0; py < ps; ++py)
                    for (int px = 0; px < ps; ++px)
                        for (int ch = 0; ch < 3; ++ch) {
                            const double v =
                                (image.data[(static_cast<size_t>(gy * ps + py) * image.w + gx * ps + px) * 3 + ch] -
                                 cfg.norm_mean[ch]) /
                                cfg.norm_std[ch];
                            acc += v * p.patch_w(k++, j);
                        }
                x(1 + ti, j) = acc + p.pos(1 + ti, j);
            }
        }
    return x;
}

inline DMat dproject(const DMat& x, const DMat& w, const DMat& b) {
    DMat y = dmatmul(x, w);
    dadd_row(y, b);
    return y;
}

inline DMat dblock_forward(const DMat& x, const DBlock& b, int heads) {
    const DMat xn = dlayer_norm(x, b.ln1g, b.ln1b, kLayerNormEps);
    const DMat q = dproject(xn, b.wq, b.bq);
    const DMat k = dproject(xn, b.wk, b.bk);
    const DMat v = dproject(xn, b.wv, b.bv);
    const int n = x.rows, d = x.cols, dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    DMat o(n, d);
    for (int h = 0; h < heads; ++h) {
        DMat logits(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int e = 0; e < dh; ++e) s += q(i, h * dh + e) * k(j, h * dh + e);
                logits(i, j) = s;
            }
        const DMat a = dsoftmax_rows(logits, sc);
        for (int i = 0; i < n; ++i)
            for (int e = 0; e < dh; ++e) {
                double s = 0.0;
                for (int j = 0; j < n; ++j) s += a(i, j) * v(j, h * dh + e);
                o(i, h * dh + e) = s;
            }
    }
    DMat y = dproject(o, b.wo, b.bo);
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
    const DMat yn = dlayer_norm(y, b.ln2g, b.ln2b, kLayerNormEps);
    DMat hmat = dproject(yn, b.w1, b.b1);
    for (double& v2 : hmat.data) v2 = 0.5 * v2 * (1.0 + std::erf(v2 / std::sqrt(2.0)));
    DMat f = dproject(hmat, b.w2, b.b2);
    for (size_t i = 0; i < f.data.size(); ++i) f.data[i] += y.data[i];
    return f;
}

struct DEncodeOut {
    std::vector<double> cls;
    DMat dense; // HW x out_dim
};

inline DEncodeOut dencode(const DImage& image, const DParams& p, const EncoderConfig& cfg) {
    DMat x = dpatch_embed(image, p, cfg);
    for (int l = 0; l < cfg.depth; ++l) x = dblock_forward(x, p.blocks[l], cfg.heads);
    DMat proj = x;
    if (cfg.has_vl_proj) proj = dproject(x, p.vl_w, p.vl_b);
    DEncodeOut out;
    out.cls.assign(proj.data.begin(), proj.data.begin() + proj.cols);
    out.dense = DMat(cfg.patch_tokens(), proj.cols);
    std::copy(proj.data.begin() + proj.cols, proj.data.end(), out.dense.data.begin());
    return out;
}

struct DStudentOut {
    DMat content; // HW x C
    DMat context; // HW x D
};

inline DStudentOut dstudent_forward(const DImage& image, const DParams& p, const EncoderConfig& cfg,
                                    const DistillOptions& opt) {
    DMat x = dpatch_embed(image, p, cfg);
    for (int l = 0; l + 1 < cfg.depth; ++l) x = dblock_forward(x, p.blocks[l], cfg.heads);
    const int hw = cfg.patch_tokens();
    DStudentOut out;
    if (opt.scheme == DistillScheme::Coupled) {
        DMat z = dblock_forward(x, p.blocks[cfg.depth - 1], cfg.heads);
        DMat dense(hw, cfg.dim);
        std::copy(z.data.begin() + cfg.dim, z.data.end(), dense.data.begin());
        out.context = dense;
        out.content = cfg.has_vl_proj ? dproject(dense, p.vl_w, p.vl_b) : dense;
        return out;
    }
    const DBlock& b = p.blocks[cfg.depth - 1];
    DMat tokens(hw, cfg.dim);
    std::copy(x.data.begin() + cfg.dim, x.data.end(), tokens.data.begin());
    const bool need_q = opt.context_type != ContextType::K;
    const bool need_k = opt.context_type != ContextType::Q;
    DMat q, k;
    if (need_q) q = dproject(tokens, b.wq, b.bq);
    if (need_k) k = dproject(tokens, b.wk, b.bk);
    const DMat v = dproject(tokens, b.wv, b.bv);
    const int dh = cfg.dim / cfg.heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    auto self_attn = [&](const DMat& f, int h) {
        DMat logits(hw, hw);
        for (int i = 0; i < hw; ++i)
            for (int j = 0; j < hw; ++j) {
                double s = 0.0;
                for (int e = 0; e < dh; ++e) s += f(i, h * dh + e) * f(j, h * dh + e);
                logits(i, j) = s;
            }
        return dsoftmax_rows(logits, sc);
    };
    DMat o(hw, cfg.dim);
    for (int h = 0; h < cfg.heads; ++h) {
        DMat a;
        if (opt.context_type == ContextType::Q) a = self_attn(q, h);
        else if (opt.context_type == ContextType::K) a = self_attn(k, h);
        else {
            const DMat aq = self_attn(q, h);
            const DMat ak = self_attn(k, h);
            a = DMat(hw, hw);
            for (size_t i = 0; i < a.data.size(); ++i) a.data[i] = 0.5 * (aq.data[i] + ak.data[i]);
        }
        for (int i = 0; i < hw; ++i)
            for (int e = 0; e < dh; ++e) {
                double s = 0.0;
                for (int j = 0; j < hw; ++j) s += a(i, j) * v(j, h * dh + e);
                o(i, h * dh + e) = s;
            }
    }
    DMat content = dproject(o, b.wo, b.bo);
    if (cfg.has_vl_proj) content = dproject(content, p.vl_w, p.vl_b);
    out.content = std::move(content);
    if (opt.context_type == ContextType::Q) out.context = q;
    else if (opt.context_type == ContextType::K) out.context = k;
    else {
        out.context = DMat(hw, cfg.dim);
        for (size_t i = 0; i < out.context.data.size(); ++i) out.context.data[i] = 0.5 * (q.data[i] + k.data[i]);
    }
    return out;
}

inline std::vector<double> droi_weights(int h, int w, const RegionBox& box, int bins, int samples) {
    std::vector<double> weights(static_cast<size_t>(h) * w, 0.0);
    const double fx0 = static_cast<double>(box.x0) * w - 0.5;
    const double fy0 = static_cast<double>(box.y0) * h - 0.5;
    const double bw = (static_cast<double>(box.x1) - box.x0) * w / bins;
    const double bh = (static_cast<double>(box.y1) - box.y0) * h / bins;
    const double contrib = 1.0 / (static_cast<double>(bins) * bins * samples * samples);
    for (int by = 0; by < bins; ++by)
        for (int bx = 0; bx < bins; ++bx)
            for (int sy = 0; sy < samples; ++sy)
                for (int sx = 0; sx < samples; ++sx) {
                    const double y = fy0 + (by + (sy + 0.5) / samples) * bh;
                    const double x = fx0 + (bx + (sx + 0.5) / samples) * bw;
                    const double cy = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
                    const double cx = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
                    const int y0 = static_cast<int>(std::floor(cy));
                    const int x0 = static_cast<int>(std::floor(cx));
                    const int y1 = std::min(y0 + 1, h - 1);
                    const int x1 = std::min(x0 + 1, w - 1);
                    const double fy = cy - y0, fx = cx - x0;
                    weights[static_cast<size_t>(y0) * w + x0] += contrib * (1 - fx) * (1 - fy);
                    weights[static_cast<size_t>(y0) * w + x1] += contrib * fx * (1 - fy);
                    weights[static_cast<size_t>(y1) * w + x0] += contrib * (1 - fx) * fy;
                    weights[static_cast<size_t>(y1) * w + x1] += contrib * fx * fy;
                }
    return weights;
}

inline DMat dcorr(const DMat& tokens) {
    const int n = tokens.rows;
    DMat r(n, n);
    for (int i = 0; i < n; ++i) {
        r(i, i) = 1.0;
        for (int j = i + 1; j < n; ++j) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int e = 0; e < tokens.cols; ++e) {
                dot += tokens(i, e) * tokens(j, e);
                na += tokens(i, e) * tokens(i, e);
                nb += tokens(j, e) * tokens(j, e);
            }
            const double c = (na == 0.0 || nb == 0.0) ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
            r(i, j) = c;
            r(j, i) = c;
        }
    }
    return r;
}

struct DLoss {
    double content = 0.0, context = 0.0, total = 0.0;
};

inline DLoss total_loss(const Grid& image, const DParams& student, const DParams& teacher, const DParams& vfm,
                        const EncoderConfig& scfg, const EncoderConfig& vcfg, const DistillOptions& opt,
                        const RegionSet& regions) {
    const DImage img = to_double(image);
    const DStudentOut so = dstudent_forward(img, student, scfg, opt);
    const int gsz = scfg.grid_size();
    const int crop_px = opt.effective_teacher_crop(scfg);

    DLoss loss;
    int k_used = 0;
    for (const RegionBox& box : regions.boxes) {
        if ((box.x1 - box.x0) * image.w < 1.0f || (box.y1 - box.y0) * image.h < 1.0f) continue;
        const DEncodeOut te = dencode(dcrop_resize(img, box, crop_px), teacher, scfg);
        const std::vector<double> wts = droi_weights(gsz, gsz, box, opt.roi_bins, opt.roi_samples);
        std::vector<double> pooled(so.content.cols, 0.0);
        for (int i = 0; i < so.content.rows; ++i)
            for (int j = 0; j < so.content.cols; ++j) pooled[j] += wts[i] * so.content(i, j);
        loss.content += 1.0 - dcosine(te.cls, pooled);
        ++k_used;
    }
    loss.content /= k_used;

    RegionBox full;
    const DEncodeOut ve = dencode(dcrop_resize(img, full, vcfg.image_size), vfm, vcfg);
    const DMat rv = dcorr(ve.dense);
    const DMat rs = dcorr(so.context);
    const int n = rs.rows;
    if (opt.context_norm == ContextNorm::Rows) {
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            double row = 0.0;
            for (int j = 0; j < n; ++j) row += (rv(i, j) - rs(i, j)) * (rv(i, j) - rs(i, j));
            sum += std::sqrt(row);
        }
        loss.context = sum / n;
    } else {
        double sum = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) sum += std::fabs(rv(i, j) - rs(i, j));
        loss.context = sum / n / n;
    }
    loss.total = loss.content + static_cast<double>(opt.lambda) * loss.context;
    return loss;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    int coords_checked = 0;
    std::string worst_tensor;
    int worst_index = -1;
    double worst_analytic = 0.0;
    double worst_fd = 0.0;
};

/// Central finite differences (double, step h) against the analytic float32
/// gradients on randomly sampled trainable coordinates.
inline GradCheckResult grad_check(const Grid& image, EncoderParams& student, const EncoderParams& teacher,
                                  const EncoderParams& vfm, const EncoderConfig& scfg, const EncoderConfig& vcfg,
                                  const DistillOptions& opt, const RegionSet& regions, int n_coords, double h,
                                  uint64_t seed) {
    const LossAndGrads lg = loss_and_gradients(image, student, teacher, vfm, scfg, vcfg, opt, regions);
    const TrainablePlan plan = plan_trainable(student, scfg, opt);
    DParams ds = to_double(student);
    const DParams dt = to_double(teacher);
    const DParams dv = to_double(vfm);

    // map plan names onto the double mirror
    auto dtensor = [&](const std::string& name) -> DMat& {
        if (name == "vl_proj.weight") return ds.vl_w;
        if (name == "vl_proj.bias") return ds.vl_b;
        // blocks.<i>.<field>
        const size_t p1 = name.find('.');
        const size_t p2 = name.find('.', p1 + 1);
        const int bi = std::stoi(name.substr(p1 + 1, p2 - p1 - 1));
        const std::string field = name.substr(p2 + 1);
        DBlock& b = ds.blocks[bi];
        if (field == "ln1.gain") return b.ln1g;
        if (field == "ln1.bias") return b.ln1b;
        if (field == "attn.wq") return b.wq;
        if (field == "attn.bq") return b.bq;
        if (field == "attn.wk") return b.wk;
        if (field == "attn.bk") return b.bk;
        if (field == "attn.wv") return b.wv;
        if (field == "attn.bv") return b.bv;
        if (field == "attn.wo") return b.wo;
        if (field == "attn.bo") return b.bo;
        if (field == "ln2.gain") return b.ln2g;
        if (field == "ln2.bias") return b.ln2b;
        if (field == "ffn.w1") return b.w1;
        if (field == "ffn.b1") return b.b1;
        if (field == "ffn.w2") return b.w2;
        if (field == "ffn.b2") return b.b2;
        throw IoError("grad_check: unknown tensor " + name);
    };

    Rng rng(seed);
    GradCheckResult res;
    for (int c = 0; c < n_coords; ++c) {
        const int ti = rng.uniform_int(0, static_cast<int>(plan.entries.size()) - 1);
        const std::string& name = plan.entries[ti].name;
        DMat& dm = dtensor(name);
        const int idx = rng.uniform_int(0, static_cast<int>(dm.data.size()) - 1);
        const double orig = dm.data[idx];
        dm.data[idx] = orig + h;
        const double lp = total_loss(image, ds, dt, dv, scfg, vcfg, opt, regions).total;
        dm.data[idx] = orig - h;
        const double lm = total_loss(image, ds, dt, dv, scfg, vcfg, opt, regions).total;
        dm.data[idx] = orig;
        const double fd = (lp - lm) / (2.0 * h);
        const double analytic = lg.grad(name).data[idx];
        const double rel = std::fabs(analytic - fd) / std::max(std::fabs(analytic) + std::fabs(fd), 1e-3);
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_tensor = name;
            res.worst_index = idx;
            res.worst_analytic = analytic;
            res.worst_fd = fd;
        }
        ++res.coords_checked;
    }
    return res;
}

} // namespace declip::ref
