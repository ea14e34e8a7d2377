#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "declip/encoder.hpp"
#include "declip/region_ops.hpp"

namespace declip {

namespace detail {
inline const Mat& attn_at(const EncodeOutput& out, int layer) {
    if (layer < 0 || layer >= static_cast<int>(out.attn_maps.size()))
        throw IoError("probe: layer " + std::to_string(layer) + " out of range, depth is " +
                      std::to_string(out.attn_maps.size()));
    return out.attn_maps[layer];
}
} // namespace detail

/// Attention from the [CLS] token to every patch token at the given layer.
inline std::vector<float> cls_attention(const EncodeOutput& out, int layer) {
    const Mat& m = detail::attn_at(out, layer);
    return {m.row(0).begin() + 1, m.row(0).end()};
}

/// Attention from the patch token at grid coordinate (row, col).
inline std::vector<float> anchor_attention(const EncodeOutput& out, int layer, int row, int col) {
    const Mat& m = detail::attn_at(out, layer);
    const int g = out.dense.h;
    if (row < 0 || row >= g || col < 0 || col >= out.dense.w)
        throw IoError("probe: anchor (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                      std::to_string(g) + "x" + std::to_string(out.dense.w) + " grid");
    const int r = 1 + row * out.dense.w + col;
    return {m.row(r).begin() + 1, m.row(r).end()};
}

/// Cosine of the anchor token against every patch token of a feature grid.
inline std::vector<float> feature_correlation(const Grid& tokens, int row, int col) {
    if (row < 0 || row >= tokens.h || col < 0 || col >= tokens.w)
        throw IoError("probe: anchor (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                      std::to_string(tokens.h) + "x" + std::to_string(tokens.w) + " grid");
    const auto anchor = tokens.cell(row, col);
    std::vector<float> out(static_cast<size_t>(tokens.h) * tokens.w);
    for (int y = 0; y < tokens.h; ++y)
        for (int x = 0; x < tokens.w; ++x) out[static_cast<size_t>(y) * tokens.w + x] = cosine(anchor, tokens.cell(y, x));
    return out;
}

/// Concentration of patch-token attention on the columns the [CLS] token
/// attends to most. Mean over anchor rows of the mass on the top ceil(p * HW)
/// [CLS]-ranked patch columns; a uniform map scores about p, full collapse
/// onto shared columns scores 1.
inline float proxy_score(const EncodeOutput& out, int layer, float top_frac = 0.02f) {
    const Mat& m = detail::attn_at(out, layer);
    const int hw = m.rows - 1;
    const int top = std::max(1, static_cast<int>(std::lround(static_cast<double>(top_frac) * hw)));
    std::vector<int> idx(hw);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return m(0, 1 + a) > m(0, 1 + b); });
    float total = 0.0f;
    for (int i = 1; i <= hw; ++i) {
        float mass = 0.0f;
        for (int t = 0; t < top; ++t) mass += m(i, 1 + idx[t]);
        total += mass;
    }
    return total / static_cast<float>(hw);
}

/// 8-bit grayscale raster, min-max normalized; constant maps render mid-gray.
struct HeatmapImage {
    int width = 0, height = 0;
    std::vector<uint8_t> pixels;
};

inline HeatmapImage render_heatmap(const std::vector<float>& vec, int grid_h, int grid_w, int out_px) {
    if (static_cast<int>(vec.size()) != grid_h * grid_w)
        throw IoError("render_heatmap: vector length " + std::to_string(vec.size()) + " does not fill " +
                      std::to_string(grid_h) + "x" + std::to_string(grid_w));
    Grid g(grid_h, grid_w, 1);
    std::copy(vec.begin(), vec.end(), g.data.begin());
    const Grid up = resize_image(g, out_px, out_px);
    float lo = up.data[0], hi = up.data[0];
    for (float v : up.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    HeatmapImage img;
    img.width = out_px;
    img.height = out_px;
    img.pixels.resize(up.data.size());
    if (hi - lo < 1e-12f) {
        std::fill(img.pixels.begin(), img.pixels.end(), static_cast<uint8_t>(128));
        return img;
    }
    const float inv = 255.0f / (hi - lo);
    for (size_t i = 0; i < up.data.size(); ++i)
        img.pixels[i] = static_cast<uint8_t>(std::lround((up.data[i] - lo) * inv));
    return img;
}

} // namespace declip
