// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"

#include "dalg/backbone.hpp"
#include "dalg/grad_check.hpp"

#include "test_util.hpp"

using namespace dalg;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 1;
    cfg.depths = {1, 1, 1, 1};
    cfg.dims = {4, 8, 16, 32};
    cfg.heads = {1, 2, 4, 8};
    cfg.window = 4;
    return cfg;
}

void zero_block(TransformerBlockParams& b) {
    for (Parameter* p : {&b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_o, &b.ffn.w1, &b.ffn.w2}) {
        for (std::int64_t i = 0; i < p->value.size(); ++i) p->value[i] = 0.0;
    }
}

}  // namespace

TEST_CASE("patch_embed maps a 32x32 image with patch 4 onto an 8x8 grid") {
    BackboneConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 4;
    cfg.dims = {16, 32, 64, 128};
    cfg.heads = {1, 2, 4, 8};
    Rng rng(1);
    BackboneParams p = BackboneParams::init(cfg, rng);
    Graph g;
    Value tokens = patch_embed(g.constant(Tensor(Shape{2, 32, 32, 3})), p, cfg);
    CHECK(tokens.shape() == Shape{2, 8, 8, 16});
}

TEST_CASE("patch_embed of a zero image with zero bias is zero") {
    BackboneConfig cfg = tiny_config();
    Rng rng(2);
    BackboneParams p = BackboneParams::init(cfg, rng);
    Graph g;
    Value tokens = patch_embed(g.constant(Tensor(Shape{1, 8, 8, 3})), p, cfg);
    for (std::int64_t i = 0; i < tokens.size(); ++i) CHECK(tokens.tensor()[i] == 0.0);
}

TEST_CASE("patch_embed gradients match finite differences") {
    BackboneConfig cfg = tiny_config();
    Rng rng(3);
    BackboneParams p = BackboneParams::init(cfg, rng);
    Parameter img("img", rng.uniform_tensor({1, 8, 8, 3}, 0.0, 1.0));
    std::vector<Parameter*> params{&img, &p.patch_w, &p.patch_b};
    p.patch_norm.collect(params);
    Rng rng2(4);
    testutil::randomize(params, rng2, -0.9, 0.9);
    auto f = [&](Graph& g) {
        Value t = patch_embed(g.param(img), p, cfg);
        return sum(mul(t, t), {0, 1, 2, 3});
    };
    CHECK(grad_check(f, params, 1e-6) < 1e-5);
}

TEST_CASE("stage_forward with no blocks is the identity") {
    Rng rng(5);
    std::vector<TransformerBlockParams> blocks;
    Tensor in = rng.uniform_tensor({1, 4, 4, 4}, -1.0, 1.0);
    Graph g;
    Value out = stage_forward(g.constant(in), blocks, 2);
    for (std::int64_t i = 0; i < in.size(); ++i) CHECK(out.tensor()[i] == in[i]);
}

TEST_CASE("stage_forward with zero-weight blocks reduces to the identity via residuals") {
    Rng rng(6);
    std::vector<TransformerBlockParams> blocks;
    blocks.push_back(TransformerBlockParams::init("b0", 4, 2, 8, rng));
    blocks.push_back(TransformerBlockParams::init("b1", 4, 2, 8, rng));  // shifted slot
    for (auto& b : blocks) zero_block(b);
    Tensor in = rng.uniform_tensor({2, 8, 8, 4}, -1.0, 1.0);
    Graph g;
    Value out = stage_forward(g.constant(in), blocks, 4);
    REQUIRE(out.shape() == in.shape());
    for (std::int64_t i = 0; i < in.size(); ++i) CHECK(out.tensor()[i] == doctest::Approx(in[i]).epsilon(1e-14));
}

TEST_CASE("patch_merge halves the grid and doubles channels") {
    Rng rng(7);
    PatchMergeParams p = PatchMergeParams::init("m", 2, rng);
    Graph g;
    Value out = patch_merge(g.constant(Tensor(Shape{1, 4, 4, 2})), p);
    CHECK(out.shape() == Shape{1, 2, 2, 4});
    Graph g2;
    CHECK_THROWS_AS(patch_merge(g2.constant(Tensor(Shape{1, 3, 4, 2})), p), ShapeError);
}

TEST_CASE("patch_merge with identity-block weights selects the expected channels") {
    // Reduction 4c -> 2c with the identity on the first 2c rows keeps the
    // channels of the top-left and top-right cells of each 2x2 neighborhood.
    Rng rng(8);
    PatchMergeParams p = PatchMergeParams::init("m", 1, rng);
    for (std::int64_t i = 0; i < p.w.value.size(); ++i) p.w.value[i] = 0.0;
    p.w.value.at({0, 0}) = 1.0;  // TL channel -> out 0
    p.w.value.at({1, 1}) = 1.0;  // TR channel -> out 1
    for (std::int64_t i = 0; i < p.b.value.size(); ++i) p.b.value[i] = 0.0;
    Tensor in(Shape{1, 2, 2, 1}, {10.0, 20.0, 30.0, 40.0});
    Graph g;
    Value out = patch_merge(g.constant(in), p);
    CHECK(out.tensor().at({0, 0, 0, 0}) == 10.0);
    CHECK(out.tensor().at({0, 0, 0, 1}) == 20.0);
}

TEST_CASE("patch_merge gradients match finite differences") {
    Rng rng(9);
    PatchMergeParams p = PatchMergeParams::init("m", 2, rng);
    Parameter x("x", rng.uniform_tensor({1, 4, 4, 2}, -1.0, 1.0));
    std::vector<Parameter*> params{&x};
    p.collect(params);
    Rng rng2(10);
    testutil::randomize(params, rng2);
    auto f = [&](Graph& g) {
        Value out = patch_merge(g.param(x), p);
        return sum(mul(out, out), {0, 1, 2, 3});
    };
    CHECK(grad_check(f, params, 1e-6) < 1e-5);
}

TEST_CASE("backbone shapes follow the stage contract") {
    // 32x32 input, patch 2: grid 16, stages at 16/8/4/2, so the mid-level map
    // is 4x4 with half the descriptor width and the pooled feature is 128-d.
    BackboneConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 2;
    cfg.depths = {1, 1, 2, 1};
    cfg.dims = {16, 32, 64, 128};
    cfg.heads = {1, 2, 4, 8};
    cfg.window = 4;
    Rng rng(11);
    BackboneParams p = BackboneParams::init(cfg, rng);
    Graph g;
    Rng data_rng(12);
    BackboneOutput out = backbone_forward(g.constant(data_rng.uniform_tensor({2, 32, 32, 3}, 0.0, 1.0)), p, cfg);
    CHECK(out.f2.shape() == Shape{2, 4, 4, 64});
    CHECK(out.f4.shape() == Shape{2, 2, 2, 128});
    CHECK(out.f_g.shape() == Shape{2, 128});
    // f2 carries exactly half the descriptor width at twice the final
    // spatial extent.
    CHECK(out.f2.extent(3) * 2 == out.f_g.extent(1));
    CHECK(out.f2.extent(1) == 2 * out.f4.extent(1));
    // f_g equals the spatial mean of f4.
    for (std::int64_t b = 0; b < 2; ++b) {
        for (std::int64_t c = 0; c < 128; ++c) {
            double m = 0.0;
            for (std::int64_t y = 0; y < 2; ++y) {
                for (std::int64_t x = 0; x < 2; ++x) m += out.f4.tensor().at({b, y, x, c});
            }
            CHECK(out.f_g.tensor().at({b, c}) == doctest::Approx(m / 4.0).epsilon(1e-13));
        }
    }
}

TEST_CASE("paper-size configuration keeps the published shape contract") {
    BackboneConfig cfg;
    cfg.image_size = 224;
    cfg.patch_size = 4;
    cfg.depths = {2, 2, 6, 2};
    cfg.dims = {96, 192, 384, 768};
    cfg.heads = {3, 6, 12, 24};
    cfg.window = 7;
    cfg.validate();
    CHECK(cfg.grid() == 56);
    CHECK(cfg.f2_extent() == 14);   // mid-level map is 14 x 14 x 384
    CHECK(cfg.f2_dim() == 384);
    CHECK(cfg.out_dim() == 768);    // pooled global feature width
    CHECK(cfg.f2_dim() * 2 == cfg.out_dim());
}

TEST_CASE("constant images produce finite pooled features") {
    BackboneConfig cfg = tiny_config();
    Rng rng(13);
    BackboneParams p = BackboneParams::init(cfg, rng);
    Graph g;
    BackboneOutput out = backbone_forward(g.constant(Tensor::full({1, 8, 8, 3}, 0.5)), p, cfg);
    CHECK(out.f_g.tensor().all_finite());
}

TEST_CASE("batch items are independent") {
    BackboneConfig cfg = tiny_config();
    Rng rng(14);
    BackboneParams p = BackboneParams::init(cfg, rng);
    Rng data_rng(15);
    Tensor two = data_rng.uniform_tensor({2, 8, 8, 3}, 0.0, 1.0);
    Tensor first(Shape{1, 8, 8, 3});
    Tensor second(Shape{1, 8, 8, 3});
    for (std::int64_t i = 0; i < first.size(); ++i) {
        first[i] = two[i];
        second[i] = two[first.size() + i];
    }
    Graph g;
    BackboneOutput batched = backbone_forward(g.constant(two), p, cfg);
    Graph g1;
    BackboneOutput alone1 = backbone_forward(g1.constant(first), p, cfg);
    Graph g2;
    BackboneOutput alone2 = backbone_forward(g2.constant(second), p, cfg);
    const std::int64_t per_item = alone1.f_g.size();
    for (std::int64_t c = 0; c < per_item; ++c) {
        CHECK(std::abs(batched.f_g.tensor()[c] - alone1.f_g.tensor()[c]) < 1e-12);
        CHECK(std::abs(batched.f_g.tensor()[per_item + c] - alone2.f_g.tensor()[c]) < 1e-12);
    }
}

TEST_CASE("full backbone passes grad_check at tiny scale") {
    BackboneConfig cfg = tiny_config();
    cfg.depths = {2, 1, 1, 1};  // include a shifted block at 8x8
    Rng rng(16);
    BackboneParams p = BackboneParams::init(cfg, rng);
    Parameter img("img", rng.uniform_tensor({1, 8, 8, 3}, 0.0, 1.0));
    std::vector<Parameter*> params{&img};
    p.collect(params);
    Rng rng2(17);
    testutil::randomize(params, rng2, -0.35, 0.35);
    auto f = [&](Graph& g) {
        BackboneOutput out = backbone_forward(g.param(img), p, cfg);
        Value base = add(mean(mul(out.f_g, out.f_g), {0, 1}), mean(mul(out.f2, out.f2), {0, 1, 2, 3}));
        return testutil::probe_loss(g, base, params, 1.0, 2.0, 4242);
    };
    CHECK(grad_check(f, params, 1e-6) < 1e-5);
}
