#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "declip/decoupled.hpp"
#include "declip/region_ops.hpp"

namespace declip {

constexpr uint8_t kIgnoreLabel = 255;

/// Per-class label embeddings (unit norm, unique names). Stands in for a text
/// encoder: embeddings arrive as a file.
struct ClassBank {
    std::vector<std::string> names;
    Mat embeds; // K x C

    int classes() const { return embeds.rows; }
    int dim() const { return embeds.cols; }
};

struct SegPrediction {
    int h = 0, w = 0;
    std::vector<uint8_t> labels;

    uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }
};

struct PixelClassification {
    std::vector<uint8_t> labels; // H*W
    Grid scores;                 // H x W x K
};

/// Per-cell argmax of cosine similarity against the bank; ties break to the
/// lowest class index.
inline PixelClassification classify_pixels(const Grid& dense, const ClassBank& bank) {
    if (bank.classes() == 0) throw IoError("classify_pixels: empty class bank");
    if (bank.dim() != dense.c)
        throw IoError("classify_pixels: bank dim " + std::to_string(bank.dim()) + " vs feature dim " +
                      std::to_string(dense.c));
    PixelClassification out;
    out.scores = Grid(dense.h, dense.w, bank.classes());
    out.labels.resize(static_cast<size_t>(dense.h) * dense.w);
    for (int y = 0; y < dense.h; ++y)
        for (int x = 0; x < dense.w; ++x) {
            int best = 0;
            float best_score = -2.0f;
            for (int k = 0; k < bank.classes(); ++k) {
                const float s = cosine(dense.cell(y, x), bank.embeds.row(k));
                out.scores.at(y, x, k) = s;
                if (s > best_score) {
                    best_score = s;
                    best = k;
                }
            }
            out.labels[static_cast<size_t>(y) * dense.w + x] = static_cast<uint8_t>(best);
        }
    return out;
}

/// Bilinearly upsample the per-class score grid, then argmax per output pixel.
inline SegPrediction upsample_labels(const Grid& scores, int out_h, int out_w) {
    if (out_h < scores.h || out_w < scores.w)
        throw IoError("upsample_labels: output smaller than input");
    SegPrediction pred;
    pred.h = out_h;
    pred.w = out_w;
    pred.labels.resize(static_cast<size_t>(out_h) * out_w);
    std::vector<float> cell(scores.c);
    for (int oy = 0; oy < out_h; ++oy) {
        const float sy = norm_to_cell((static_cast<float>(oy) + 0.5f) / static_cast<float>(out_h), scores.h);
        for (int ox = 0; ox < out_w; ++ox) {
            const float sx = norm_to_cell((static_cast<float>(ox) + 0.5f) / static_cast<float>(out_w), scores.w);
            bilinear_sample(scores, sx, sy, cell);
            int best = 0;
            for (int k = 1; k < scores.c; ++k)
                if (cell[k] > cell[best]) best = k;
            pred.labels[static_cast<size_t>(oy) * out_w + ox] = static_cast<uint8_t>(best);
        }
    }
    return pred;
}

struct StudentModel {
    const EncoderParams& params;
    const EncoderConfig& cfg;
    ContextType ctype = ContextType::Q;
};

/// Run the decoupled dense pass per window and average features where windows
/// overlap. Window must equal the model resolution; offsets stay patch-aligned
/// so window features land on the global patch grid.
inline Grid sliding_window_dense(const Grid& image, const StudentModel& model, int window, int stride) {
    if (window != model.cfg.image_size)
        throw IoError("sliding_window_dense: window " + std::to_string(window) + " must equal model resolution " +
                      std::to_string(model.cfg.image_size));
    if (window > image.h || window > image.w) throw IoError("sliding_window_dense: window larger than image");
    if (stride <= 0 || stride > window) throw IoError("sliding_window_dense: stride must be in [1, window]");
    const int patch = model.cfg.patch_size;
    if (stride % patch != 0 || image.h % patch != 0 || image.w % patch != 0)
        throw IoError("sliding_window_dense: stride and image dims must be multiples of the patch size");

    auto offsets = [&](int extent) {
        std::vector<int> off;
        for (int o = 0; o + window < extent; o += stride) off.push_back(o);
        off.push_back(extent - window); // cover the far edge
        return off;
    };
    const std::vector<int> ys = offsets(image.h);
    const std::vector<int> xs = offsets(image.w);

    const int gh = image.h / patch, gw = image.w / patch;
    const int wg = window / patch;
    Grid sum(gh, gw, model.cfg.out_dim());
    std::vector<int> counts(static_cast<size_t>(gh) * gw, 0);
    Grid win(window, window, image.c);
    for (int oy : ys)
        for (int ox : xs) {
            for (int y = 0; y < window; ++y)
                for (int x = 0; x < window; ++x)
                    for (int ch = 0; ch < image.c; ++ch) win.at(y, x, ch) = image.at(oy + y, ox + x, ch);
            const Grid dense = dense_for_inference(win, model.params, model.cfg, model.ctype);
            const int cy = oy / patch, cx = ox / patch;
            for (int y = 0; y < wg; ++y)
                for (int x = 0; x < wg; ++x) {
                    counts[static_cast<size_t>(cy + y) * gw + (cx + x)] += 1;
                    for (int ch = 0; ch < dense.c; ++ch) sum.at(cy + y, cx + x, ch) += dense.at(y, x, ch);
                }
        }
    for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) {
            const float inv = 1.0f / static_cast<float>(counts[static_cast<size_t>(y) * gw + x]);
            for (int ch = 0; ch < sum.c; ++ch) sum.at(y, x, ch) *= inv;
        }
    return sum;
}

enum class PoolMode { Box, Mask };

struct LabeledRegion {
    RegionBox box;
    int class_id = 0;
    std::vector<uint8_t> mask; // feature-grid mask, used in Mask mode
};

/// Pool per region and classify against the bank.
inline std::vector<int> region_classify(const Grid& dense, const std::vector<LabeledRegion>& regions,
                                        const ClassBank& bank, PoolMode mode, int roi_bins = 1,
                                        int roi_samples = 2) {
    std::vector<int> preds;
    preds.reserve(regions.size());
    for (const LabeledRegion& r : regions) {
        const std::vector<float> pooled = mode == PoolMode::Box
                                              ? roi_align(dense, r.box, roi_bins, roi_samples)
                                              : mask_pool(dense, r.mask);
        int best = 0;
        float best_score = -2.0f;
        for (int k = 0; k < bank.classes(); ++k) {
            const float s = cosine(pooled, bank.embeds.row(k));
            if (s > best_score) {
                best_score = s;
                best = k;
            }
        }
        preds.push_back(best);
    }
    return preds;
}

struct MiouResult {
    std::vector<double> per_class; // -1 when the class is absent from pred and gt
    double mean = 0.0;
};

/// IoU per class over a prediction/ground-truth pair; classes absent from both
/// are excluded from the mean, pixels labeled 255 in gt are ignored.
inline MiouResult miou(const SegPrediction& pred, const std::vector<uint8_t>& gt, int k_classes) {
    if (static_cast<size_t>(pred.h) * pred.w != gt.size())
        throw IoError("miou: prediction and ground truth sizes differ");
    std::vector<long> inter(k_classes, 0), uni(k_classes, 0);
    for (size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] == kIgnoreLabel) continue;
        const int p = pred.labels[i];
        const int g = gt[i];
        if (p == g) ++inter[g];
        else {
            ++uni[p];
            ++uni[g];
        }
    }
    MiouResult r;
    r.per_class.assign(k_classes, -1.0);
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < k_classes; ++c) {
        const long u = uni[c] + inter[c];
        if (u == 0) continue; // absent from both
        r.per_class[c] = static_cast<double>(inter[c]) / static_cast<double>(u);
        sum += r.per_class[c];
        ++counted;
    }
    r.mean = counted > 0 ? sum / counted : 0.0;
    return r;
}

/// Integer count accumulator for dataset-level mIoU; merges associatively so
/// per-image evaluation order cannot change the result.
struct IouAccumulator {
    std::vector<long> inter, uni;

    explicit IouAccumulator(int k_classes) : inter(k_classes, 0), uni(k_classes, 0) {}

    void add(const SegPrediction& pred, const std::vector<uint8_t>& gt) {
        if (static_cast<size_t>(pred.h) * pred.w != gt.size())
            throw IoError("IouAccumulator: prediction and ground truth sizes differ");
        for (size_t i = 0; i < gt.size(); ++i) {
            if (gt[i] == kIgnoreLabel) continue;
            const int p = pred.labels[i];
            const int g = gt[i];
            if (p == g) ++inter[g];
            else {
                ++uni[p];
                ++uni[g];
            }
        }
    }

    MiouResult result() const {
        MiouResult r;
        r.per_class.assign(inter.size(), -1.0);
        double sum = 0.0;
        int counted = 0;
        for (size_t c = 0; c < inter.size(); ++c) {
            const long u = uni[c] + inter[c];
            if (u == 0) continue;
            r.per_class[c] = static_cast<double>(inter[c]) / static_cast<double>(u);
            sum += r.per_class[c];
            ++counted;
        }
        r.mean = counted > 0 ? sum / counted : 0.0;
        return r;
    }
};

struct MaccResult {
    std::vector<double> per_class; // -1 when the class never appears in gts
    double mean = 0.0;
};

/// Mean per-class top-1 accuracy over classes present in the ground truth.
inline MaccResult macc(const std::vector<int>& preds, const std::vector<int>& gts, int k_classes) {
    if (preds.size() != gts.size() || preds.empty())
        throw IoError("macc: inputs must be nonempty and equal length");
    std::vector<long> correct(k_classes, 0), total(k_classes, 0);
    for (size_t i = 0; i < preds.size(); ++i) {
        ++total[gts[i]];
        if (preds[i] == gts[i]) ++correct[gts[i]];
    }
    MaccResult r;
    r.per_class.assign(k_classes, -1.0);
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < k_classes; ++c) {
        if (total[c] == 0) continue;
        r.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(total[c]);
        sum += r.per_class[c];
        ++counted;
    }
    r.mean = counted > 0 ? sum / counted : 0.0;
    return r;
}

} // namespace declip
