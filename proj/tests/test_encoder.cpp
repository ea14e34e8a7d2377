#include <catch2/catch_amalgamated.hpp>

#include "declip/encoder.hpp"
#include "helpers.hpp"

using namespace declip;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.dim = 8;
    cfg.vl_dim = 6;
    cfg.has_vl_proj = false;
    return cfg;
}

void zero_all(EncoderParams& p) {
    p.for_each_tensor([](const std::string&, Mat& m) { std::fill(m.data.begin(), m.data.end(), 0.0f); });
}

} // namespace

TEST_CASE("patch_embed shapes and linearity") {
    EncoderConfig cfg = tiny_cfg();
    Rng rng(5);

    SECTION("32px image with patch 16 gives a 2x2 grid plus cls") {
        EncoderParams p = init_encoder_params(cfg, 1);
        const TokenSeq ts = patch_embed(testutil::random_image(rng, 32), p, cfg);
        CHECK(ts.grid.h == 2);
        CHECK(ts.grid.w == 2);
        CHECK(ts.grid.c == 8);
        CHECK(ts.to_mat().rows == 5);
    }
    SECTION("zero image and zero positional terms reduce to the stem bias") {
        cfg.norm_mean = {0.0f, 0.0f, 0.0f};
        cfg.norm_std = {1.0f, 1.0f, 1.0f};
        EncoderParams p = init_encoder_params(cfg, 1);
        std::fill(p.pos.data.begin(), p.pos.data.end(), 0.0f);
        for (int j = 0; j < cfg.dim; ++j) p.patch_b(0, j) = 0.1f * static_cast<float>(j);
        Grid zero(32, 32, 3);
        const TokenSeq ts = patch_embed(zero, p, cfg);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < cfg.dim; ++j)
                CHECK(ts.grid.data[static_cast<size_t>(i) * cfg.dim + j] == Catch::Approx(0.1f * j).margin(1e-6));
    }
    SECTION("224px with patch 16 gives 197 tokens") {
        cfg.image_size = 224;
        cfg.depth = 1;
        EncoderParams p = init_encoder_params(cfg, 1);
        const TokenSeq ts = patch_embed(testutil::random_image(rng, 224), p, cfg);
        CHECK(ts.to_mat().rows == 197);
    }
    SECTION("dimension mismatch rejected with sizes") {
        EncoderParams p = init_encoder_params(cfg, 1);
        CHECK_THROWS_WITH(patch_embed(testutil::random_image(rng, 16), p, cfg),
                          Catch::Matchers::ContainsSubstring("32") && Catch::Matchers::ContainsSubstring("16"));
    }
}

TEST_CASE("block_forward") {
    EncoderConfig cfg = tiny_cfg();
    Rng rng(6);

    SECTION("all-zero weights pass tokens through") {
        EncoderParams p = init_encoder_params(cfg, 2);
        zero_all(p);
        TokenSeq x;
        x.cls.assign(cfg.dim, 0.0f);
        x.grid = testutil::random_grid(rng, 2, 2, cfg.dim);
        for (int j = 0; j < cfg.dim; ++j) x.cls[j] = rng.uniform_float(-1.0f, 1.0f);
        const BlockResult r = block_forward(x, p.blocks[0], cfg.heads);
        CHECK(testutil::max_abs_diff(r.tokens.to_mat(), x.to_mat()) == 0.0f);
    }
    SECTION("single head matches direct softmax recomputation") {
        cfg.heads = 1;
        EncoderParams p = init_encoder_params(cfg, 3);
        TokenSeq x;
        x.cls.assign(cfg.dim, 0.1f);
        x.grid = testutil::random_grid(rng, 2, 2, cfg.dim);
        const BlockResult r = block_forward(x, p.blocks[0], 1);
        const Mat xn = layer_norm_rows(x.to_mat(), p.blocks[0].ln1_gain, p.blocks[0].ln1_bias, kLayerNormEps);
        const Mat q = add_row_broadcast(matmul(xn, p.blocks[0].wq), p.blocks[0].bq);
        const Mat k = add_row_broadcast(matmul(xn, p.blocks[0].wk), p.blocks[0].bk);
        const Mat direct = softmax_rows(matmul_nt(q, k), 1.0f / std::sqrt(static_cast<float>(cfg.dim)));
        CHECK(testutil::max_abs_diff(r.attn, direct) < 1e-6f);
    }
    SECTION("attention rows sum to 1") {
        EncoderParams p = init_encoder_params(cfg, 4);
        TokenSeq x;
        x.cls.assign(cfg.dim, -0.2f);
        x.grid = testutil::random_grid(rng, 2, 2, cfg.dim);
        const BlockResult r = block_forward(x, p.blocks[0], cfg.heads);
        for (int i = 0; i < r.attn.rows; ++i) {
            float sum = 0.0f;
            for (int j = 0; j < r.attn.cols; ++j) sum += r.attn(i, j);
            CHECK(sum == Catch::Approx(1.0).margin(1e-5));
        }
    }
}

TEST_CASE("encode") {
    EncoderConfig cfg = tiny_cfg();
    Rng rng(7);

    SECTION("depth 1 composes patch_embed and block_forward exactly") {
        cfg.depth = 1;
        EncoderParams p = init_encoder_params(cfg, 8);
        const Grid img = testutil::random_image(rng, 32);
        const EncodeOutput out = encode(img, p, cfg);
        const TokenSeq embedded = patch_embed(img, p, cfg);
        const BlockResult br = block_forward(embedded, p.blocks[0], cfg.heads);
        CHECK(testutil::max_abs_diff(grid_to_mat(out.dense), grid_to_mat(br.tokens.grid)) == 0.0f);
        CHECK(testutil::max_abs_diff(out.attn_maps[0], br.attn) == 0.0f);
        CHECK(testutil::max_abs_diff(out.last_block_input.to_mat(), embedded.to_mat()) == 0.0f);
    }
    SECTION("attention map count and shape follow the config") {
        for (int depth : {1, 2, 4}) {
            cfg.depth = depth;
            EncoderParams p = init_encoder_params(cfg, 9);
            const EncodeOutput out = encode(testutil::random_image(rng, 32), p, cfg);
            REQUIRE(static_cast<int>(out.attn_maps.size()) == depth);
            for (const Mat& m : out.attn_maps) {
                CHECK(m.rows == 5);
                CHECK(m.cols == 5);
                for (int i = 0; i < m.rows; ++i) {
                    float sum = 0.0f;
                    for (int j = 0; j < m.cols; ++j) sum += m(i, j);
                    CHECK(sum == Catch::Approx(1.0).margin(1e-5));
                }
            }
        }
    }
    SECTION("v-l projection produces C-width outputs") {
        cfg.has_vl_proj = true;
        EncoderParams p = init_encoder_params(cfg, 10);
        const EncodeOutput out = encode(testutil::random_image(rng, 32), p, cfg);
        CHECK(static_cast<int>(out.cls_token.size()) == cfg.vl_dim);
        CHECK(out.dense.c == cfg.vl_dim);
        CHECK(out.dense.h == 2);
    }
    SECTION("zeroed attention output and FFN reduce to patch embedding") {
        EncoderParams p = init_encoder_params(cfg, 11);
        for (BlockParams& b : p.blocks) {
            std::fill(b.wo.data.begin(), b.wo.data.end(), 0.0f);
            std::fill(b.bo.data.begin(), b.bo.data.end(), 0.0f);
            std::fill(b.w2.data.begin(), b.w2.data.end(), 0.0f);
            std::fill(b.b2.data.begin(), b.b2.data.end(), 0.0f);
        }
        const Grid img = testutil::random_image(rng, 32);
        const EncodeOutput out = encode(img, p, cfg);
        const TokenSeq embedded = patch_embed(img, p, cfg);
        CHECK(testutil::max_abs_diff(grid_to_mat(out.dense), grid_to_mat(embedded.grid)) == 0.0f);
    }
    SECTION("deterministic: identical runs produce identical bytes") {
        EncoderParams p = init_encoder_params(cfg, 12);
        const Grid img = testutil::random_image(rng, 32);
        const EncodeOutput a = encode(img, p, cfg);
        const EncodeOutput b = encode(img, p, cfg);
        CHECK(a.dense.data == b.dense.data);
        CHECK(a.cls_token == b.cls_token);
        CHECK(a.last_q.data == b.last_q.data);
    }
    SECTION("token shapes hold across valid configs") {
        for (int img_px : {32, 64}) {
            for (int patch : {8, 16}) {
                cfg.image_size = img_px;
                cfg.patch_size = patch;
                cfg.depth = 1;
                EncoderParams p = init_encoder_params(cfg, 13);
                const EncodeOutput out = encode(testutil::random_image(rng, img_px), p, cfg);
                const int g = img_px / patch;
                CHECK(out.dense.h == g);
                CHECK(out.dense.w == g);
                CHECK(out.attn_maps[0].rows == 1 + g * g);
            }
        }
    }
}
