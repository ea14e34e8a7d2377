#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "declip/errors.hpp"

namespace declip {

/// Dense row-major float32 matrix. The storage type for every parameter,
/// token sequence, and attention map in the library.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}
    Mat(int r, int c, std::vector<float> d) : rows(r), cols(c), data(std::move(d)) {}

    float& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<float> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
    std::span<const float> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    size_t numel() const { return data.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// H x W grid of C-dimensional cells, stored (y, x, channel). Used for images
/// (C = 3), dense feature maps, and per-class score grids.
struct Grid {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<float> data;

    Grid() = default;
    Grid(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, 0.0f) {}

    float& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    float at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }

    std::span<float> cell(int y, int x) { return {data.data() + (static_cast<size_t>(y) * w + x) * c, static_cast<size_t>(c)}; }
    std::span<const float> cell(int y, int x) const {
        return {data.data() + (static_cast<size_t>(y) * w + x) * c, static_cast<size_t>(c)};
    }

    int cells() const { return h * w; }

    bool finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// Reinterpret a token grid as a (H*W) x C matrix, row-major cell order.
inline Mat grid_to_mat(const Grid& g) {
    Mat m(g.h * g.w, g.c);
    m.data = g.data;
    return m;
}

inline Grid mat_to_grid(const Mat& m, int h, int w) {
    if (m.rows != h * w)
        throw IoError("mat_to_grid: " + std::to_string(m.rows) + " rows cannot fill a " + std::to_string(h) + "x" +
                      std::to_string(w) + " grid");
    Grid g(h, w, m.cols);
    g.data = m.data;
    return g;
}

// ---- basic matrix products (fixed loop order, deterministic) ----

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const float aik = a(i, k);
            const float* brow = &b.data[static_cast<size_t>(k) * b.cols];
            float* crow = &c.data[static_cast<size_t>(i) * c.cols];
            for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

/// a * b^T
inline Mat matmul_nt(const Mat& a, const Mat& b) {
    Mat c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.rows; ++j) {
            float s = 0.0f;
            const float* ar = &a.data[static_cast<size_t>(i) * a.cols];
            const float* br = &b.data[static_cast<size_t>(j) * b.cols];
            for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            c(i, j) = s;
        }
    }
    return c;
}

/// a^T * b
inline Mat matmul_tn(const Mat& a, const Mat& b) {
    Mat c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        for (int i = 0; i < a.cols; ++i) {
            const float aki = a(k, i);
            const float* brow = &b.data[static_cast<size_t>(k) * b.cols];
            float* crow = &c.data[static_cast<size_t>(i) * c.cols];
            for (int j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

inline void add_inplace(Mat& a, const Mat& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline Mat add(const Mat& a, const Mat& b) {
    Mat c = a;
    add_inplace(c, b);
    return c;
}

inline Mat sub(const Mat& a, const Mat& b) {
    Mat c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline Mat scale(const Mat& a, float s) {
    Mat c = a;
    for (float& v : c.data) v *= s;
    return c;
}

/// Add a 1 x C row vector to every row of a.
inline Mat add_row_broadcast(const Mat& a, const Mat& rowvec) {
    Mat c = a;
    for (int i = 0; i < c.rows; ++i)
        for (int j = 0; j < c.cols; ++j) c(i, j) += rowvec(0, j);
    return c;
}

inline Mat slice_rows(const Mat& a, int r0, int n) {
    Mat c(n, a.cols);
    std::copy(a.data.begin() + static_cast<size_t>(r0) * a.cols,
              a.data.begin() + static_cast<size_t>(r0 + n) * a.cols, c.data.begin());
    return c;
}

inline Mat slice_cols(const Mat& a, int c0, int n) {
    Mat c(a.rows, n);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < n; ++j) c(i, j) = a(i, c0 + j);
    return c;
}

inline Mat concat_cols(const std::vector<Mat>& parts) {
    int total = 0;
    for (const Mat& p : parts) total += p.cols;
    Mat c(parts.empty() ? 0 : parts[0].rows, total);
    int off = 0;
    for (const Mat& p : parts) {
        for (int i = 0; i < p.rows; ++i)
            for (int j = 0; j < p.cols; ++j) c(i, off + j) = p(i, j);
        off += p.cols;
    }
    return c;
}

} // namespace declip
