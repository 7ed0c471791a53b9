// SPDX-License-Identifier: Apache-2.0

#include "dalg/local_branch.hpp"

namespace dalg {

void LocalBranchConfig::validate() const {
    if (window < 1) throw SchemaError("local branch: window must be >= 1");
    if (stride < 1 || stride > window) {
        throw SchemaError("local branch: stride " + std::to_string(stride) + " must lie in [1, " +
                          std::to_string(window) + "]");
    }
    if (out_dim != 2 * in_dim) {
        throw SchemaError("local branch: out dim " + std::to_string(out_dim) + " must be twice the in dim " +
                          std::to_string(in_dim));
    }
    if (n_heads <= 0 || in_dim % n_heads != 0) {
        throw SchemaError("local branch: in dim " + std::to_string(in_dim) + " not divisible by heads " +
                          std::to_string(n_heads));
    }
    if (n_blocks < 0) throw SchemaError("local branch: negative block count");
    if (n_classes < 1) throw SchemaError("local branch: need at least one class");
}

SpatialAttnParams SpatialAttnParams::init(const std::string& prefix, std::int64_t dim, Rng& rng) {
    SpatialAttnParams p;
    p.conv1_w = Parameter(prefix + ".conv1.w", rng.trunc_normal_tensor({dim, dim}, 0.02));
    p.conv1_b = Parameter(prefix + ".conv1.b", Tensor(Shape{dim}), /*weight_decay=*/false);
    p.conv2_w = Parameter(prefix + ".conv2.w", rng.trunc_normal_tensor({dim, 1}, 0.02));
    p.conv2_b = Parameter(prefix + ".conv2.b", Tensor(Shape{1}), /*weight_decay=*/false);
    return p;
}

void SpatialAttnParams::collect(std::vector<Parameter*>& out) {
    out.push_back(&conv1_w);
    out.push_back(&conv1_b);
    out.push_back(&conv2_w);
    out.push_back(&conv2_b);
}

LocalBranchParams LocalBranchParams::init(const LocalBranchConfig& cfg, Rng& rng) {
    cfg.validate();
    LocalBranchParams p;
    for (int d = 0; d < cfg.n_blocks; ++d) {
        p.blocks.push_back(TransformerBlockParams::init("local.block" + std::to_string(d), cfg.in_dim,
                                                        cfg.n_heads, cfg.ffn_hidden, rng));
    }
    p.merge_w = Parameter("local.merge.w", rng.trunc_normal_tensor({2 * cfg.out_dim, cfg.out_dim}, 0.02));
    p.merge_b = Parameter("local.merge.b", Tensor(Shape{cfg.out_dim}), /*weight_decay=*/false);
    p.spatial = SpatialAttnParams::init("local.spatial", cfg.out_dim, rng);
    p.classifier_w =
        Parameter("local.classifier.w", rng.trunc_normal_tensor({cfg.out_dim, cfg.n_classes}, 0.02));
    p.classifier_b = Parameter("local.classifier.b", Tensor(Shape{cfg.n_classes}), /*weight_decay=*/false);
    return p;
}

void LocalBranchParams::collect(std::vector<Parameter*>& out) {
    for (auto& b : blocks) b.collect(out);
    out.push_back(&merge_w);
    out.push_back(&merge_b);
    spatial.collect(out);
    out.push_back(&classifier_w);
    out.push_back(&classifier_b);
}

Value window_attention_stack(Value windows, LocalBranchParams& p, const Tensor* mask) {
    Value x = windows;
    for (auto& block : p.blocks) x = transformer_block(x, block, mask);
    return x;
}

Value spatial_attention(Value f_r, SpatialAttnParams& p) {
    Graph& g = *f_r.graph();
    const Tensor& t = f_r.tensor();
    if (t.rank() != 4 || t.extent(3) != p.conv1_w.value.extent(0)) {
        throw ShapeError("spatial_attention: map " + shape_str(t.shape()) + " incompatible with conv1 " +
                         shape_str(p.conv1_w.value.shape()));
    }
    const std::int64_t B = t.extent(0), H = t.extent(1), W = t.extent(2), C = t.extent(3);
    Value flat = reshape(f_r, {B * H * W, C});
    Value hidden = relu(add(matmul(flat, g.param(p.conv1_w)), g.param(p.conv1_b)));
    Value logits = add(matmul(hidden, g.param(p.conv2_w)), g.param(p.conv2_b));
    return reshape(softplus(logits), {B, H, W});
}

Value modulate(Value f_r, Value s_a) {
    const Tensor& tr = f_r.tensor();
    const Tensor& ta = s_a.tensor();
    if (tr.rank() != 4 || ta.rank() != 3 || tr.extent(0) != ta.extent(0) || tr.extent(1) != ta.extent(1) ||
        tr.extent(2) != ta.extent(2)) {
        throw ShapeError("modulate: map " + shape_str(tr.shape()) + " vs attention " + shape_str(ta.shape()));
    }
    const std::int64_t B = tr.extent(0), H = tr.extent(1), W = tr.extent(2), C = tr.extent(3);
    Value scaled = rowwise_scale(reshape(f_r, {B * H * W, C}), reshape(s_a, {B * H * W}));
    return reshape(scaled, {B, H, W, C});
}

LocalOutput local_forward(Value f2, LocalBranchParams& p, const LocalBranchConfig& cfg,
                          const LocalBranchMode& mode) {
    Graph& g = *f2.graph();
    const Tensor& t = f2.tensor();
    if (t.rank() != 4 || t.extent(3) != cfg.in_dim) {
        throw ShapeError("local_forward: map " + shape_str(t.shape()) + " does not carry " +
                         std::to_string(cfg.in_dim) + " channels");
    }
    if (t.extent(1) % 2 != 0 || t.extent(2) % 2 != 0) {
        throw ShapeError("local_forward: spatial extents of " + shape_str(t.shape()) +
                         " must be even for the space-to-depth step");
    }
    const std::int64_t B = t.extent(0), H2 = t.extent(1), W2 = t.extent(2);

    Value merged;
    if (mode.win_msa && cfg.n_blocks > 0) {
        WindowGrid grid = WindowGrid::plan(B, H2, W2, cfg.in_dim, cfg.window, cfg.stride);
        Value windows = window_partition(f2, grid);
        if (grid.any_padding) {
            Tensor mask = grid.key_mask();
            windows = window_attention_stack(windows, p, &mask);
        } else {
            windows = window_attention_stack(windows, p, nullptr);
        }
        merged = window_merge_average(windows, grid);
    } else {
        // Attention stack disabled: overlap-averaged reassembly of untouched
        // windows is the identity, so the split/merge pair can be skipped.
        merged = f2;
    }

    Value deep = space_to_depth(merged, 2);  // B,H,W,2C
    const std::int64_t H = H2 / 2, W = W2 / 2;
    Value projected = add(matmul(reshape(deep, {B * H * W, 2 * cfg.out_dim}), g.param(p.merge_w)),
                          g.param(p.merge_b));

    LocalOutput out;
    out.f_r = reshape(projected, {B, H, W, cfg.out_dim});
    if (mode.spatial) {
        out.s_a = spatial_attention(out.f_r, p.spatial);
        out.f_l = modulate(out.f_r, out.s_a);
    } else {
        out.s_a = g.constant(Tensor::full({B, H, W}, 1.0));
        out.f_l = out.f_r;
    }
    out.f_l_prime = mean(out.f_l, {1, 2});
    out.aux_logits = add(matmul(out.f_l_prime, g.param(p.classifier_w)), g.param(p.classifier_b));
    return out;
}

}  // namespace dalg
