#pragma once

#include <vector>

#include "declip/mat.hpp"
#include "declip/rng.hpp"

namespace testutil {

inline declip::Mat random_mat(declip::Rng& rng, int rows, int cols, float lo = -1.0f, float hi = 1.0f) {
    declip::Mat m(rows, cols);
    for (float& v : m.data) v = rng.uniform_float(lo, hi);
    return m;
}

inline declip::Grid random_grid(declip::Rng& rng, int h, int w, int c, float lo = -1.0f, float hi = 1.0f) {
    declip::Grid g(h, w, c);
    for (float& v : g.data) v = rng.uniform_float(lo, hi);
    return g;
}

inline declip::Grid random_image(declip::Rng& rng, int px) {
    return random_grid(rng, px, px, 3, 0.0f, 1.0f);
}

inline float max_abs_diff(const declip::Mat& a, const declip::Mat& b) {
    float m = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

inline float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    float m = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

} // namespace testutil
