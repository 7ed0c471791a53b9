// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"

#include "dalg/grad_check.hpp"
#include "dalg/local_branch.hpp"

#include "test_util.hpp"

using namespace dalg;

namespace {

LocalBranchConfig small_config() {
    LocalBranchConfig cfg;
    cfg.window = 2;
    cfg.stride = 1;
    cfg.n_blocks = 2;
    cfg.n_heads = 2;
    cfg.in_dim = 4;
    cfg.out_dim = 8;
    cfg.ffn_hidden = 8;
    cfg.n_classes = 3;
    return cfg;
}

void zero_blocks(LocalBranchParams& p) {
    for (auto& b : p.blocks) {
        for (Parameter* w : {&b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_o, &b.ffn.w1, &b.ffn.w2}) {
            for (std::int64_t i = 0; i < w->value.size(); ++i) w->value[i] = 0.0;
        }
    }
}

}  // namespace

TEST_CASE("local branch maps an 8x8x32 mid-level map to 4x4x64 with positive attention") {
    LocalBranchConfig cfg;
    cfg.window = 4;
    cfg.stride = 2;
    cfg.n_blocks = 4;
    cfg.n_heads = 4;
    cfg.in_dim = 32;
    cfg.out_dim = 64;
    cfg.ffn_hidden = 128;
    cfg.n_classes = 5;
    Rng rng(21);
    LocalBranchParams p = LocalBranchParams::init(cfg, rng);
    Graph g;
    Rng data_rng(22);
    LocalOutput out = local_forward(g.constant(data_rng.uniform_tensor({2, 8, 8, 32}, -1.0, 1.0)), p, cfg);
    CHECK(out.f_l.shape() == Shape{2, 4, 4, 64});
    CHECK(out.s_a.shape() == Shape{2, 4, 4});
    CHECK(out.f_l_prime.shape() == Shape{2, 64});
    CHECK(out.aux_logits.shape() == Shape{2, 5});
    for (std::int64_t i = 0; i < out.s_a.size(); ++i) CHECK(out.s_a.tensor()[i] > 0.0);
}

TEST_CASE("paper-width local branch doubles 384 channels to 768") {
    // Channel contract at the published widths; a small spatial extent keeps
    // the check fast and exercises the padded-window path (window > extent).
    LocalBranchConfig cfg;
    cfg.window = 7;
    cfg.stride = 3;
    cfg.n_blocks = 4;
    cfg.n_heads = 6;
    cfg.in_dim = 384;
    cfg.out_dim = 768;
    cfg.ffn_hidden = 1536;
    cfg.n_classes = 2;
    Rng rng(23);
    LocalBranchParams p = LocalBranchParams::init(cfg, rng);
    Graph g;
    Rng data_rng(24);
    LocalOutput out = local_forward(g.constant(data_rng.uniform_tensor({1, 6, 6, 384}, -1.0, 1.0)), p, cfg);
    CHECK(out.f_l.shape() == Shape{1, 3, 3, 768});
    CHECK(out.s_a.shape() == Shape{1, 3, 3});
}

TEST_CASE("window stack with zero weights leaves windows unchanged") {
    LocalBranchConfig cfg = small_config();
    Rng rng(25);
    LocalBranchParams p = LocalBranchParams::init(cfg, rng);
    zero_blocks(p);
    Graph g;
    Rng data_rng(26);
    Tensor in = data_rng.uniform_tensor({6, 4, cfg.in_dim}, -1.0, 1.0);
    Value out = window_attention_stack(g.constant(in), p, nullptr);
    for (std::int64_t i = 0; i < in.size(); ++i) {
        CHECK(out.tensor()[i] == doctest::Approx(in[i]).epsilon(1e-14));
    }
}

TEST_CASE("weight sharing: identical windows produce identical outputs") {
    LocalBranchConfig cfg = small_config();
    Rng rng(27);
    LocalBranchParams p = LocalBranchParams::init(cfg, rng);
    Rng data_rng(28);
    Tensor one = data_rng.uniform_tensor({1, 4, cfg.in_dim}, -1.0, 1.0);
    Tensor three(Shape{3, 4, cfg.in_dim});
    for (std::int64_t w = 0; w < 3; ++w) {
        for (std::int64_t i = 0; i < one.size(); ++i) three[w * one.size() + i] = one[i];
    }
    Graph g;
    Value out = window_attention_stack(g.constant(three), p, nullptr);
    for (std::int64_t w = 1; w < 3; ++w) {
        for (std::int64_t i = 0; i < one.size(); ++i) {
            CHECK(out.tensor()[w * one.size() + i] == out.tensor()[i]);
        }
    }
}

TEST_CASE("a single whole-map window equals a plain transformer stack") {
    LocalBranchConfig cfg = small_config();
    cfg.window = 4;
    cfg.stride = 4;  // one window covering a 4x4 map
    Rng rng(29);
    LocalBranchParams p = LocalBranchParams::init(cfg, rng);
    Rng data_rng(30);
    Tensor fmap = data_rng.uniform_tensor({1, 4, 4, cfg.in_dim}, -1.0, 1.0);

    WindowGrid grid = WindowGrid::plan(1, 4, 4, cfg.in_dim, 4, 4);
    REQUIRE(grid.windows_per_item() == 1);
    Graph g;
    Value windows = window_partition(g.constant(fmap), grid);
    Value stacked = window_attention_stack(windows, p, nullptr);

    Graph g2;
    Value tokens = g2.constant(Tensor(Shape{16, cfg.in_dim}, fmap.vec()));
    Value direct = tokens;
    for (auto& b : p.blocks) direct = transformer_block(direct, b);
    for (std::int64_t i = 0; i < direct.size(); ++i) {
        CHECK(stacked.tensor()[i] == doctest::Approx(direct.tensor()[i]).epsilon(1e-13));
    }
}

TEST_CASE("attention-bypassed merge reconstructs the input map exactly") {
    LocalBranchConfig cfg = small_config();
    Rng rng(31);
    LocalBranchParams p = LocalBranchParams::init(cfg, rng);
    zero_blocks(p);
    Rng data_rng(32);

    auto reconstruct = [&](std::int64_t H, std::int64_t W) {
        Tensor in = data_rng.uniform_tensor({2, H, W, cfg.in_dim}, -1.0, 1.0);
        WindowGrid grid = WindowGrid::plan(2, H, W, cfg.in_dim, cfg.window, cfg.stride);
        Graph g;
        Value windows = window_partition(g.constant(in), grid);
        const Tensor mask = grid.key_mask();
        Value stacked = window_attention_stack(windows, p, grid.any_padding ? &mask : nullptr);
        Value back = window_merge_average(stacked, grid);
        double worst = 0.0;
        for (std::int64_t i = 0; i < in.size(); ++i) {
            worst = std::max(worst, std::abs(back.tensor()[i] - in[i]));
        }
        return worst;
    };
    CHECK(reconstruct(4, 4) < 1e-12);
    CHECK(reconstruct(5, 3) < 1e-12);  // padding mask engaged
}

TEST_CASE("spatial attention with zero weights is softplus(0) everywhere") {
    Rng rng(33);
    SpatialAttnParams p = SpatialAttnParams::init("s", 4, rng);
    for (Parameter* w : {&p.conv1_w, &p.conv1_b, &p.conv2_w, &p.conv2_b}) {
        for (std::int64_t i = 0; i < w->value.size(); ++i) w->value[i] = 0.0;
    }
    Graph g;
    Rng data_rng(34);
    Value s_a = spatial_attention(g.constant(data_rng.uniform_tensor({1, 3, 3, 4}, -1.0, 1.0)), p);
    for (std::int64_t i = 0; i < s_a.size(); ++i) {
        CHECK(s_a.tensor()[i] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    }
}

TEST_CASE("spatial attention stays positive for random parameter draws") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        SpatialAttnParams p = SpatialAttnParams::init("s", 6, rng);
        std::vector<Parameter*> params;
        p.collect(params);
        testutil::randomize(params, rng);
        Graph g;
        Value s_a = spatial_attention(g.constant(rng.uniform_tensor({1, 4, 4, 6}, -2.0, 2.0)), p);
        for (std::int64_t i = 0; i < s_a.size(); ++i) CHECK(s_a.tensor()[i] > 0.0);
    }
}

TEST_CASE("spatial attention gradients match finite differences") {
    Rng rng(35);
    SpatialAttnParams p = SpatialAttnParams::init("s", 4, rng);
    Parameter x("x", rng.uniform_tensor({1, 3, 3, 4}, -1.0, 1.0));
    std::vector<Parameter*> params{&x};
    p.collect(params);
    Rng rng2(36);
    testutil::randomize(params, rng2);
    auto f = [&](Graph& g) {
        Value s = spatial_attention(g.param(x), p);
        return sum(mul(s, s), {0, 1, 2});
    };
    CHECK(grad_check(f, params, 1e-6) < 1e-5);
}

TEST_CASE("modulate scales each position by its attention value") {
    Graph g;
    Rng rng(37);
    Tensor fmap = rng.uniform_tensor({1, 2, 2, 3}, -1.0, 1.0);
    SUBCASE("identity map") {
        Value out = modulate(g.constant(fmap), g.constant(Tensor::full({1, 2, 2}, 1.0)));
        for (std::int64_t i = 0; i < fmap.size(); ++i) CHECK(out.tensor()[i] == fmap[i]);
    }
    SUBCASE("uniform halving") {
        Value out = modulate(g.constant(fmap), g.constant(Tensor::full({1, 2, 2}, 0.5)));
        for (std::int64_t i = 0; i < fmap.size(); ++i) CHECK(out.tensor()[i] == 0.5 * fmap[i]);
    }
    SUBCASE("mixed map checked elementwise") {
        Tensor s(Shape{1, 2, 2}, {1.0, 2.0, 0.25, -3.0});
        Value out = modulate(g.constant(fmap), g.constant(s));
        for (std::int64_t y = 0; y < 2; ++y) {
            for (std::int64_t x = 0; x < 2; ++x) {
                for (std::int64_t c = 0; c < 3; ++c) {
                    CHECK(out.tensor().at({0, y, x, c}) == fmap.at({0, y, x, c}) * s.at({0, y, x}));
                }
            }
        }
    }
}

TEST_CASE("shape contract holds across valid configurations") {
    Rng rng(38);
    for (auto [H2, W2, in_dim] : {std::tuple<std::int64_t, std::int64_t, std::int64_t>{4, 4, 4},
                                  {6, 4, 8},
                                  {8, 6, 4}}) {
        LocalBranchConfig cfg = small_config();
        cfg.in_dim = in_dim;
        cfg.out_dim = 2 * in_dim;
        LocalBranchParams p = LocalBranchParams::init(cfg, rng);
        Graph g;
        LocalOutput out = local_forward(g.constant(rng.uniform_tensor({1, H2, W2, in_dim}, -1.0, 1.0)), p, cfg);
        CHECK(out.f_l.shape() == Shape{1, H2 / 2, W2 / 2, 2 * in_dim});
        CHECK(out.s_a.shape() == Shape{1, H2 / 2, W2 / 2});
    }
}

TEST_CASE("ablation hooks: no attention stack and forced-unit spatial map") {
    LocalBranchConfig cfg = small_config();
    Rng rng(39);
    LocalBranchParams p = LocalBranchParams::init(cfg, rng);
    Rng data_rng(40);
    Tensor in = data_rng.uniform_tensor({1, 4, 4, cfg.in_dim}, -1.0, 1.0);

    Graph g;
    LocalBranchMode no_spatial;
    no_spatial.spatial = false;
    LocalOutput out = local_forward(g.constant(in), p, cfg, no_spatial);
    for (std::int64_t i = 0; i < out.s_a.size(); ++i) CHECK(out.s_a.tensor()[i] == 1.0);
    for (std::int64_t i = 0; i < out.f_l.size(); ++i) CHECK(out.f_l.tensor()[i] == out.f_r.tensor()[i]);

    Graph g2;
    LocalBranchMode no_winmsa;
    no_winmsa.win_msa = false;
    LocalOutput bypassed = local_forward(g2.constant(in), p, cfg, no_winmsa);
    CHECK(bypassed.f_l.shape() == Shape{1, 2, 2, cfg.out_dim});

    // The bypassed branch differs from the full branch on generic inputs.
    Graph g3;
    LocalOutput full = local_forward(g3.constant(in), p, cfg);
    double diff = 0.0;
    for (std::int64_t i = 0; i < full.f_l.size(); ++i) {
        diff = std::max(diff, std::abs(full.f_l.tensor()[i] - bypassed.f_l.tensor()[i]));
    }
    CHECK(diff > 0.0);
}

TEST_CASE("whole local branch passes grad_check") {
    LocalBranchConfig cfg = small_config();
    Rng rng(41);
    LocalBranchParams p = LocalBranchParams::init(cfg, rng);
    Parameter x("x", rng.uniform_tensor({1, 4, 4, cfg.in_dim}, -1.0, 1.0));
    std::vector<Parameter*> params{&x};
    p.collect(params);
    Rng rng2(42);
    testutil::randomize(params, rng2, -0.7, 0.7);
    auto f = [&](Graph& g) {
        LocalOutput out = local_forward(g.param(x), p, cfg);
        Value a = sum(mul(out.f_l, out.f_l), {0, 1, 2, 3});
        Value b = sum(mul(out.aux_logits, out.aux_logits), {0, 1});
        return add(a, b);
    };
    CHECK(grad_check(f, params, 1e-6) < 1e-5);
}
