#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "declip/mat.hpp"
#include "declip/numerics.hpp"
#include "declip/rng.hpp"

namespace declip {

/// Axis-aligned rectangle in normalized image coordinates.
struct RegionBox {
    float x0 = 0.0f, y0 = 0.0f, x1 = 1.0f, y1 = 1.0f;

    bool valid() const {
        return x0 >= 0.0f && y0 >= 0.0f && x1 <= 1.0f && y1 <= 1.0f && x0 < x1 && y0 < y1;
    }
    float area() const { return (x1 - x0) * (y1 - y0); }
};

enum class RegionOrigin { Grid, Annotation };

struct RegionSet {
    std::vector<RegionBox> boxes;
    RegionOrigin origin = RegionOrigin::Grid;
    int grid_m = 0; // rows, when origin == Grid
    int grid_n = 0; // cols
};

/// m x n equal cells with m, n drawn independently uniform in [lo, hi],
/// row-major order. The cells tile the unit square exactly.
inline RegionSet sample_grid(Rng& rng, int lo, int hi) {
    RegionSet rs;
    rs.origin = RegionOrigin::Grid;
    rs.grid_m = rng.uniform_int(lo, hi);
    rs.grid_n = rng.uniform_int(lo, hi);
    rs.boxes.reserve(static_cast<size_t>(rs.grid_m) * rs.grid_n);
    for (int i = 0; i < rs.grid_m; ++i) {
        for (int j = 0; j < rs.grid_n; ++j) {
            RegionBox b;
            b.x0 = static_cast<float>(j) / static_cast<float>(rs.grid_n);
            b.x1 = static_cast<float>(j + 1) / static_cast<float>(rs.grid_n);
            b.y0 = static_cast<float>(i) / static_cast<float>(rs.grid_m);
            b.y1 = static_cast<float>(i + 1) / static_cast<float>(rs.grid_m);
            rs.boxes.push_back(b);
        }
    }
    return rs;
}

/// Normalized coordinate u in [0,1] to the continuous cell frame of an n-cell
/// axis (cell centers at integers). Shared by every resampling routine.
inline float norm_to_cell(float u, int n) { return u * static_cast<float>(n) - 0.5f; }

/// Bilinear resample of the box contents to an out x out grid.
inline Grid crop_resize(const Grid& image, const RegionBox& box, int out) {
    Grid res(out, out, image.c);
    const float bw = box.x1 - box.x0;
    const float bh = box.y1 - box.y0;
    for (int oy = 0; oy < out; ++oy) {
        const float v = box.y0 + (static_cast<float>(oy) + 0.5f) / static_cast<float>(out) * bh;
        const float sy = norm_to_cell(v, image.h);
        for (int ox = 0; ox < out; ++ox) {
            const float u = box.x0 + (static_cast<float>(ox) + 0.5f) / static_cast<float>(out) * bw;
            bilinear_sample(image, norm_to_cell(u, image.w), sy, res.cell(oy, ox));
        }
    }
    return res;
}

inline Grid resize_image(const Grid& image, int out_h, int out_w) {
    Grid res(out_h, out_w, image.c);
    for (int oy = 0; oy < out_h; ++oy) {
        const float sy = norm_to_cell((static_cast<float>(oy) + 0.5f) / static_cast<float>(out_h), image.h);
        for (int ox = 0; ox < out_w; ++ox) {
            const float sx = norm_to_cell((static_cast<float>(ox) + 0.5f) / static_cast<float>(out_w), image.w);
            bilinear_sample(image, sx, sy, res.cell(oy, ox));
        }
    }
    return res;
}

/// Per-cell pooling weights for a box: bins x bins bins, samples x samples
/// bilinear taps per bin, everything averaged into one weight vector over the
/// H*W cells. roi_align is then a single weighted sum, and the same weights
/// drive the training graph.
inline std::vector<float> roi_align_weights(int h, int w, const RegionBox& box, int bins, int samples) {
    std::vector<float> weights(static_cast<size_t>(h) * w, 0.0f);
    const float fx0 = norm_to_cell(box.x0, w);
    const float fy0 = norm_to_cell(box.y0, h);
    const float bw = (box.x1 - box.x0) * static_cast<float>(w) / static_cast<float>(bins);
    const float bh = (box.y1 - box.y0) * static_cast<float>(h) / static_cast<float>(bins);
    const float contrib = 1.0f / (static_cast<float>(bins) * bins * samples * samples);
    for (int by = 0; by < bins; ++by) {
        for (int bx = 0; bx < bins; ++bx) {
            for (int sy = 0; sy < samples; ++sy) {
                const float y = fy0 + (static_cast<float>(by) + (static_cast<float>(sy) + 0.5f) / samples) * bh;
                const float cy = std::min(std::max(y, 0.0f), static_cast<float>(h - 1));
                const int y0 = static_cast<int>(std::floor(cy));
                const int y1 = std::min(y0 + 1, h - 1);
                const float fy = cy - static_cast<float>(y0);
                for (int sx = 0; sx < samples; ++sx) {
                    const float x = fx0 + (static_cast<float>(bx) + (static_cast<float>(sx) + 0.5f) / samples) * bw;
                    const float cx = std::min(std::max(x, 0.0f), static_cast<float>(w - 1));
                    const int x0 = static_cast<int>(std::floor(cx));
                    const int x1 = std::min(x0 + 1, w - 1);
                    const float fx = cx - static_cast<float>(x0);
                    weights[static_cast<size_t>(y0) * w + x0] += contrib * (1.0f - fx) * (1.0f - fy);
                    weights[static_cast<size_t>(y0) * w + x1] += contrib * fx * (1.0f - fy);
                    weights[static_cast<size_t>(y1) * w + x0] += contrib * (1.0f - fx) * fy;
                    weights[static_cast<size_t>(y1) * w + x1] += contrib * fx * fy;
                }
            }
        }
    }
    return weights;
}

/// Single pooled vector per region: mean over bins of bilinear samples.
inline std::vector<float> roi_align(const Grid& feat, const RegionBox& box, int bins = 1, int samples = 2) {
    const std::vector<float> w = roi_align_weights(feat.h, feat.w, box, bins, samples);
    std::vector<float> out(feat.c, 0.0f);
    for (int i = 0; i < feat.h * feat.w; ++i) {
        if (w[i] == 0.0f) continue;
        const float* cell = &feat.data[static_cast<size_t>(i) * feat.c];
        for (int ch = 0; ch < feat.c; ++ch) out[ch] += w[i] * cell[ch];
    }
    return out;
}

/// Mean feature over the set cells of a binary mask.
inline std::vector<float> mask_pool(const Grid& feat, const std::vector<uint8_t>& mask) {
    if (static_cast<int>(mask.size()) != feat.h * feat.w)
        throw IoError("mask_pool: mask size " + std::to_string(mask.size()) + " does not match grid " +
                      std::to_string(feat.h) + "x" + std::to_string(feat.w));
    std::vector<float> out(feat.c, 0.0f);
    int count = 0;
    for (int i = 0; i < feat.h * feat.w; ++i) {
        if (!mask[i]) continue;
        ++count;
        const float* cell = &feat.data[static_cast<size_t>(i) * feat.c];
        for (int ch = 0; ch < feat.c; ++ch) out[ch] += cell[ch];
    }
    if (count == 0) throw IoError("mask_pool: empty mask");
    const float inv = 1.0f / static_cast<float>(count);
    for (float& v : out) v *= inv;
    return out;
}

} // namespace declip
