// SPDX-License-Identifier: Apache-2.0

#include "dalg/backbone.hpp"

namespace dalg {

void BackboneConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
        throw SchemaError("backbone: image size " + std::to_string(image_size) +
                          " not divisible by patch size " + std::to_string(patch_size));
    }
    for (int s = 0; s < 4; ++s) {
        if (depths[static_cast<std::size_t>(s)] < 0) throw SchemaError("backbone: negative stage depth");
        const auto dim = dims[static_cast<std::size_t>(s)];
        const auto h = heads[static_cast<std::size_t>(s)];
        if (h <= 0 || dim % h != 0) {
            throw SchemaError("backbone: stage " + std::to_string(s) + " dim " + std::to_string(dim) +
                              " not divisible by heads " + std::to_string(h));
        }
    }
    for (int s = 1; s < 4; ++s) {
        if (dims[static_cast<std::size_t>(s)] != 2 * dims[static_cast<std::size_t>(s - 1)]) {
            throw SchemaError("backbone: stage dims must double per stage");
        }
    }
    if (window < 1) throw SchemaError("backbone: window must be >= 1");
    if (grid() % 8 != 0) {
        throw SchemaError("backbone: patch grid " + std::to_string(grid()) +
                          " must be divisible by 8 (three 2x merges)");
    }
}

PatchMergeParams PatchMergeParams::init(const std::string& prefix, std::int64_t in_dim, Rng& rng) {
    PatchMergeParams p;
    p.w = Parameter(prefix + ".w", rng.trunc_normal_tensor({4 * in_dim, 2 * in_dim}, 0.02));
    p.b = Parameter(prefix + ".b", Tensor(Shape{2 * in_dim}), /*weight_decay=*/false);
    return p;
}

void PatchMergeParams::collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
}

BackboneParams BackboneParams::init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneParams p;
    const std::int64_t patch_in = cfg.patch_size * cfg.patch_size * 3;
    p.patch_w = Parameter("backbone.patch_embed.w", rng.trunc_normal_tensor({patch_in, cfg.dims[0]}, 0.02));
    p.patch_b = Parameter("backbone.patch_embed.b", Tensor(Shape{cfg.dims[0]}), /*weight_decay=*/false);
    p.patch_norm = LayerNormParams::init("backbone.patch_embed.norm", cfg.dims[0]);
    for (int s = 0; s < 4; ++s) {
        for (int d = 0; d < cfg.depths[static_cast<std::size_t>(s)]; ++d) {
            const std::string prefix =
                "backbone.stage" + std::to_string(s) + ".block" + std::to_string(d);
            p.stages[static_cast<std::size_t>(s)].push_back(TransformerBlockParams::init(
                prefix, cfg.dims[static_cast<std::size_t>(s)], cfg.heads[static_cast<std::size_t>(s)],
                cfg.dims[static_cast<std::size_t>(s)] * cfg.ffn_ratio, rng));
        }
        if (s < 3) {
            p.merges[static_cast<std::size_t>(s)] = PatchMergeParams::init(
                "backbone.merge" + std::to_string(s), cfg.dims[static_cast<std::size_t>(s)], rng);
        }
    }
    return p;
}

void BackboneParams::collect(std::vector<Parameter*>& out) {
    out.push_back(&patch_w);
    out.push_back(&patch_b);
    patch_norm.collect(out);
    for (auto& stage : stages) {
        for (auto& block : stage) block.collect(out);
    }
    for (auto& merge : merges) merge.collect(out);
}

Value patch_embed(Value images, BackboneParams& p, const BackboneConfig& cfg) {
    Graph& g = *images.graph();
    const Tensor& t = images.tensor();
    if (t.rank() != 4 || t.extent(1) != cfg.image_size || t.extent(2) != cfg.image_size ||
        t.extent(3) != 3) {
        throw ShapeError("patch_embed: images " + shape_str(t.shape()) + " do not match config (" +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x3)");
    }
    const std::int64_t B = t.extent(0), G = cfg.grid(), C0 = cfg.dims[0];
    Value patches = space_to_depth(images, cfg.patch_size);  // B,G,G,p*p*3
    Value flat = reshape(patches, {B * G * G, cfg.patch_size * cfg.patch_size * 3});
    Value projected = add(matmul(flat, g.param(p.patch_w)), g.param(p.patch_b));
    Value normed = layer_norm(projected, g.param(p.patch_norm.gain), g.param(p.patch_norm.bias));
    return reshape(normed, {B, G, G, C0});
}

Value patch_merge(Value grid_map, PatchMergeParams& p) {
    Graph& g = *grid_map.graph();
    const Tensor& t = grid_map.tensor();
    if (t.rank() != 4 || t.extent(1) % 2 != 0 || t.extent(2) % 2 != 0) {
        throw ShapeError("patch_merge: needs even spatial extents, got " + shape_str(t.shape()));
    }
    const std::int64_t B = t.extent(0), H = t.extent(1), W = t.extent(2), C = t.extent(3);
    Value grouped = space_to_depth(grid_map, 2);  // B,H/2,W/2,4C
    Value flat = reshape(grouped, {B * (H / 2) * (W / 2), 4 * C});
    Value reduced = add(matmul(flat, g.param(p.w)), g.param(p.b));
    return reshape(reduced, {B, H / 2, W / 2, 2 * C});
}

namespace {

Value windowed_block(Value fmap, TransformerBlockParams& block, std::int64_t window, std::int64_t shift) {
    const std::int64_t B = fmap.extent(0), H = fmap.extent(1), W = fmap.extent(2), C = fmap.extent(3);
    const std::int64_t win = std::min(window, std::min(H, W));
    const bool shifted = shift > 0 && win < H && win < W;
    Value x = shifted ? cyclic_shift(fmap, -shift, -shift) : fmap;
    WindowGrid grid = WindowGrid::plan(B, H, W, C, win, win);
    Value tokens = window_partition(x, grid);
    Value out;
    if (shifted) {
        Tensor mask = shifted_window_mask(H, W, win, shift);
        out = transformer_block(tokens, block, &mask);
    } else if (grid.any_padding) {
        Tensor mask = grid.key_mask();
        out = transformer_block(tokens, block, &mask);
    } else {
        out = transformer_block(tokens, block);
    }
    Value merged = window_merge_average(out, grid);
    return shifted ? cyclic_shift(merged, shift, shift) : merged;
}

}  // namespace

Value stage_forward(Value grid_map, std::vector<TransformerBlockParams>& blocks, std::int64_t window) {
    Value x = grid_map;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::int64_t win = std::min(window, std::min(x.extent(1), x.extent(2)));
        const std::int64_t shift = (i % 2 == 1) ? win / 2 : 0;
        x = windowed_block(x, blocks[i], window, shift);
    }
    return x;
}

BackboneOutput backbone_forward(Value images, BackboneParams& p, const BackboneConfig& cfg) {
    BackboneOutput out;
    Value x = patch_embed(images, p, cfg);
    for (int s = 0; s < 4; ++s) {
        x = stage_forward(x, p.stages[static_cast<std::size_t>(s)], cfg.window);
        out.stage_outputs.push_back(x);
        if (s < 3) x = patch_merge(x, p.merges[static_cast<std::size_t>(s)]);
    }
    out.f2 = out.stage_outputs[2];
    out.f4 = out.stage_outputs[3];
    out.f_g = mean(out.f4, {1, 2});
    return out;
}

}  // namespace dalg
