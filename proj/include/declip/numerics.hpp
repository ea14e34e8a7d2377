#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "declip/errors.hpp"
#include "declip/mat.hpp"

namespace declip {

/// Row-wise softmax of (scale * m) with per-row max subtraction.
/// Every output row sums to 1 and is strictly positive.
inline Mat softmax_rows(const Mat& m, float scale) {
    if (scale <= 0.0f) throw NumericError("softmax_rows: scale must be positive");
    Mat out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < m.cols; ++j) {
            const float v = m(i, j);
            if (!std::isfinite(v))
                throw NumericError("softmax_rows: non-finite input in row " + std::to_string(i));
            mx = std::max(mx, v * scale);
        }
        float sum = 0.0f;
        for (int j = 0; j < m.cols; ++j) {
            const float e = std::exp(m(i, j) * scale - mx);
            out(i, j) = e;
            sum += e;
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < m.cols; ++j) out(i, j) *= inv;
    }
    return out;
}

/// Cosine similarity clamped to [-1, 1]. A zero-norm argument yields 0 so that
/// correlation volumes stay finite when a token collapses.
inline float cosine(std::span<const float> a, std::span<const float> b) {
    float dot = 0.0f, na = 0.0f, nb = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0f || nb == 0.0f) return 0.0f;
    const float c = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::clamp(c, -1.0f, 1.0f);
}

/// y = gain * (x - mean) / sqrt(var + eps) + bias, population variance.
inline void layer_norm(std::span<const float> x, std::span<const float> gain, std::span<const float> bias,
                       float eps, std::span<float> out) {
    const int n = static_cast<int>(x.size());
    float mean = 0.0f;
    for (float v : x) mean += v;
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<float>(n);
    const float inv = 1.0f / std::sqrt(var + eps);
    for (int i = 0; i < n; ++i) out[i] = gain[i] * (x[i] - mean) * inv + bias[i];
}

/// Bilinear sample of a C-channel grid at continuous (x, y). Cell centers sit
/// at integer coordinates; out-of-range coordinates clamp to the border.
inline void bilinear_sample(const Grid& g, float x, float y, std::span<float> out) {
    const float cx = std::clamp(x, 0.0f, static_cast<float>(g.w - 1));
    const float cy = std::clamp(y, 0.0f, static_cast<float>(g.h - 1));
    const int x0 = static_cast<int>(std::floor(cx));
    const int y0 = static_cast<int>(std::floor(cy));
    const int x1 = std::min(x0 + 1, g.w - 1);
    const int y1 = std::min(y0 + 1, g.h - 1);
    const float fx = cx - static_cast<float>(x0);
    const float fy = cy - static_cast<float>(y0);
    const float w00 = (1.0f - fx) * (1.0f - fy);
    const float w01 = fx * (1.0f - fy);
    const float w10 = (1.0f - fx) * fy;
    const float w11 = fx * fy;
    auto c00 = g.cell(y0, x0);
    auto c01 = g.cell(y0, x1);
    auto c10 = g.cell(y1, x0);
    auto c11 = g.cell(y1, x1);
    for (int ch = 0; ch < g.c; ++ch)
        out[ch] = w00 * c00[ch] + w01 * c01[ch] + w10 * c10[ch] + w11 * c11[ch];
}

inline std::vector<float> bilinear_sample(const Grid& g, float x, float y) {
    std::vector<float> out(g.c);
    bilinear_sample(g, x, y, out);
    return out;
}

inline float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * 0.7071067811865475f));
}

inline float gelu_grad(float x) {
    const float phi = std::exp(-0.5f * x * x) * 0.3989422804014327f; // N(0,1) pdf
    return 0.5f * (1.0f + std::erf(x * 0.7071067811865475f)) + x * phi;
}

} // namespace declip
