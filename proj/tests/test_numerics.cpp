#include <catch2/catch_amalgamated.hpp>

#include "declip/numerics.hpp"
#include "declip/rng.hpp"
#include "helpers.hpp"

using namespace declip;
using testutil::random_mat;

TEST_CASE("softmax_rows basics") {
    SECTION("uniform row") {
        Mat m(1, 3);
        const Mat s = softmax_rows(m, 1.0f);
        for (int j = 0; j < 3; ++j) CHECK(s(0, j) == Catch::Approx(1.0 / 3.0).margin(1e-7));
    }
    SECTION("two-entry shift identity") {
        for (float c : {0.0f, 0.5f, 2.0f, -1.5f}) {
            Mat m(1, 2);
            m(0, 0) = 0.3f;
            m(0, 1) = 0.3f + c;
            const Mat s = softmax_rows(m, 1.0f);
            CHECK(s(0, 1) == Catch::Approx(1.0 / (1.0 + std::exp(-static_cast<double>(c)))).margin(1e-6));
        }
    }
    SECTION("row sums vs 64-bit oracle") {
        Rng rng(11);
        const Mat m = random_mat(rng, 5, 5, -3.0f, 3.0f);
        const Mat s = softmax_rows(m, 0.7f);
        for (int i = 0; i < 5; ++i) {
            double sum = 0.0;
            // double re-evaluation
            double mx = -1e300;
            for (int j = 0; j < 5; ++j) mx = std::max(mx, static_cast<double>(m(i, j)) * 0.7);
            double z = 0.0;
            std::vector<double> e(5);
            for (int j = 0; j < 5; ++j) {
                e[j] = std::exp(static_cast<double>(m(i, j)) * 0.7 - mx);
                z += e[j];
            }
            for (int j = 0; j < 5; ++j) {
                CHECK(std::fabs(s(i, j) - e[j] / z) < 1e-6);
                CHECK(s(i, j) > 0.0f);
                sum += s(i, j);
            }
            CHECK(std::fabs(sum - 1.0) < 1e-6);
        }
    }
    SECTION("per-row constant shift invariance up to 1e4") {
        Rng rng(12);
        for (int it = 0; it < 50; ++it) {
            const Mat m = random_mat(rng, 3, 4, -1e4f, 1e4f);
            Mat shifted = m;
            for (int i = 0; i < 3; ++i) {
                const float c = rng.uniform_float(-100.0f, 100.0f);
                for (int j = 0; j < 4; ++j) shifted(i, j) += c;
            }
            CHECK(testutil::max_abs_diff(softmax_rows(m, 1e-3f), softmax_rows(shifted, 1e-3f)) < 1e-6f);
        }
    }
    SECTION("non-finite input rejected naming the row") {
        Mat m(3, 2);
        m(2, 1) = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_WITH(softmax_rows(m, 1.0f), Catch::Matchers::ContainsSubstring("row 2"));
    }
    SECTION("positive scale required") {
        CHECK_THROWS_AS(softmax_rows(Mat(1, 1), 0.0f), NumericError);
    }
}

TEST_CASE("cosine") {
    Rng rng(21);
    SECTION("self similarity") {
        std::vector<float> a{1.0f, -2.0f, 0.5f};
        CHECK(cosine(a, a) == Catch::Approx(1.0).margin(1e-7));
    }
    SECTION("orthogonal") {
        std::vector<float> a{1.0f, 0.0f}, b{0.0f, 3.0f};
        CHECK(cosine(a, b) == 0.0f);
    }
    SECTION("zero norm defined as 0") {
        std::vector<float> z{0.0f, 0.0f}, b{1.0f, 1.0f};
        CHECK(cosine(z, b) == 0.0f);
        CHECK(cosine(b, z) == 0.0f);
    }
    SECTION("random vs 64-bit oracle") {
        for (int it = 0; it < 200; ++it) {
            std::vector<float> a(16), b(16);
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int i = 0; i < 16; ++i) {
                a[i] = rng.uniform_float(-2.0f, 2.0f);
                b[i] = rng.uniform_float(-2.0f, 2.0f);
            }
            for (int i = 0; i < 16; ++i) {
                dot += static_cast<double>(a[i]) * b[i];
                na += static_cast<double>(a[i]) * a[i];
                nb += static_cast<double>(b[i]) * b[i];
            }
            CHECK(std::fabs(cosine(a, b) - dot / (std::sqrt(na) * std::sqrt(nb))) < 1e-6);
        }
    }
    SECTION("symmetry, positive-scale invariance, sign flip") {
        for (int it = 0; it < 100; ++it) {
            std::vector<float> a(8), b(8), a2(8), bneg(8);
            const float s = rng.uniform_float(0.1f, 10.0f);
            for (int i = 0; i < 8; ++i) {
                a[i] = rng.uniform_float(-1.0f, 1.0f);
                b[i] = rng.uniform_float(-1.0f, 1.0f);
                a2[i] = a[i] * s;
                bneg[i] = -b[i];
            }
            const float c = cosine(a, b);
            CHECK(std::fabs(c - cosine(b, a)) < 1e-7);
            CHECK(std::fabs(c - cosine(a2, b)) < 1e-6);
            CHECK(std::fabs(c + cosine(a, bneg)) < 1e-7);
            CHECK(c >= -1.0f);
            CHECK(c <= 1.0f);
        }
    }
}

TEST_CASE("layer_norm") {
    SECTION("constant vector maps to bias") {
        std::vector<float> x(6, 3.7f), gain(6, 1.0f), bias(6, 0.0f), out(6);
        layer_norm(x, gain, bias, 1e-5f, out);
        for (float v : out) CHECK(std::fabs(v) < 1e-6f);
    }
    SECTION("already normalized passes through") {
        std::vector<float> x{1.0f, -1.0f}, gain(2, 1.0f), bias(2, 0.0f), out(2);
        layer_norm(x, gain, bias, 1e-12f, out);
        CHECK(out[0] == Catch::Approx(1.0).margin(1e-5));
        CHECK(out[1] == Catch::Approx(-1.0).margin(1e-5));
    }
    SECTION("random vectors: mean 0, var 1 before affine") {
        Rng rng(31);
        for (int it = 0; it < 50; ++it) {
            std::vector<float> x(8), gain(8, 1.0f), bias(8, 0.0f), out(8);
            for (float& v : x) v = rng.uniform_float(-5.0f, 5.0f);
            layer_norm(x, gain, bias, 1e-7f, out);
            double mean = 0.0, var = 0.0;
            for (float v : out) mean += v;
            mean /= 8;
            for (float v : out) var += (v - mean) * (v - mean);
            var /= 8;
            CHECK(std::fabs(mean) < 1e-5);
            CHECK(std::fabs(var - 1.0) < 1e-4);
        }
    }
}

TEST_CASE("bilinear_sample") {
    Rng rng(41);
    const Grid g = testutil::random_grid(rng, 4, 5, 3);
    SECTION("exact at cell centers") {
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 5; ++x) {
                const std::vector<float> v = bilinear_sample(g, static_cast<float>(x), static_cast<float>(y));
                for (int ch = 0; ch < 3; ++ch) CHECK(v[ch] == g.at(y, x, ch));
            }
    }
    SECTION("constant grid everywhere") {
        Grid c(3, 3, 2);
        std::fill(c.data.begin(), c.data.end(), 0.25f);
        for (float x : {-1.0f, 0.3f, 1.7f, 5.0f})
            for (float y : {-0.4f, 0.0f, 2.9f}) {
                const std::vector<float> v = bilinear_sample(c, x, y);
                CHECK(v[0] == 0.25f);
                CHECK(v[1] == 0.25f);
            }
    }
    SECTION("midpoint of 4 cells is their mean") {
        const std::vector<float> v = bilinear_sample(g, 1.5f, 2.5f);
        for (int ch = 0; ch < 3; ++ch) {
            const float mean = 0.25f * (g.at(2, 1, ch) + g.at(2, 2, ch) + g.at(3, 1, ch) + g.at(3, 2, ch));
            CHECK(v[ch] == Catch::Approx(mean).margin(1e-6));
        }
    }
    SECTION("linear along an axis between adjacent centers") {
        for (int it = 0; it < 20; ++it) {
            const float t = rng.uniform_float(0.0f, 1.0f);
            const std::vector<float> v = bilinear_sample(g, 2.0f + t, 1.0f);
            for (int ch = 0; ch < 3; ++ch)
                CHECK(v[ch] == Catch::Approx((1.0f - t) * g.at(1, 2, ch) + t * g.at(1, 3, ch)).margin(1e-6));
        }
    }
    SECTION("out-of-range clamps to border") {
        const std::vector<float> v = bilinear_sample(g, -3.0f, 10.0f);
        for (int ch = 0; ch < 3; ++ch) CHECK(v[ch] == g.at(3, 0, ch));
    }
}

TEST_CASE("rng determinism") {
    Rng a(123), b(123), c(124);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const uint64_t va = a.next_u64();
        all_equal = all_equal && va == b.next_u64();
        any_diff = any_diff || va != c.next_u64();
    }
    CHECK(all_equal);
    CHECK(any_diff);

    Rng d(7);
    for (int i = 0; i < 1000; ++i) {
        const int v = d.uniform_int(2, 5);
        CHECK(v >= 2);
        CHECK(v <= 5);
        const double u = d.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}
