// SPDX-License-Identifier: Apache-2.0

#include "dalg/fusion.hpp"

#include <cmath>

namespace dalg {

void FusionConfig::validate() const {
    if (stages < 1) throw SchemaError("fusion: need at least one stage");
    if (n_heads <= 0 || dim % n_heads != 0) {
        throw SchemaError("fusion: dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(n_heads));
    }
    if (ffn_hidden <= 0) throw SchemaError("fusion: ffn hidden must be positive");
}

CrossAttnStageParams CrossAttnStageParams::init(const std::string& prefix, const FusionConfig& cfg,
                                                Rng& rng) {
    CrossAttnStageParams p;
    const std::int64_t dh = cfg.dim / cfg.n_heads;
    for (int h = 0; h < cfg.n_heads; ++h) {
        const std::string hp = prefix + ".head" + std::to_string(h);
        p.w_q.emplace_back(hp + ".wq", rng.trunc_normal_tensor({cfg.dim, dh}, 0.02));
        p.w_k.emplace_back(hp + ".wk", rng.trunc_normal_tensor({cfg.dim, dh}, 0.02));
        p.w_v.emplace_back(hp + ".wv", rng.trunc_normal_tensor({cfg.dim, dh}, 0.02));
    }
    p.w_out = Parameter(prefix + ".wo", rng.trunc_normal_tensor({cfg.dim, cfg.dim}, 0.02));
    p.ffn = FfnParams::init(prefix + ".ffn", 2 * cfg.dim, cfg.ffn_hidden, cfg.dim, rng);
    if (cfg.pre_norm) {
        p.ln_in = LayerNormParams::init(prefix + ".ln_in", cfg.dim);
        p.ln_cat = LayerNormParams::init(prefix + ".ln_cat", 2 * cfg.dim);
    }
    return p;
}

void CrossAttnStageParams::collect(std::vector<Parameter*>& out) {
    for (auto& w : w_q) out.push_back(&w);
    for (auto& w : w_k) out.push_back(&w);
    for (auto& w : w_v) out.push_back(&w);
    out.push_back(&w_out);
    ffn.collect(out);
    if (ln_in) ln_in->collect(out);
    if (ln_cat) ln_cat->collect(out);
}

FusionParams FusionParams::init(const FusionConfig& cfg, Rng& rng) {
    cfg.validate();
    FusionParams p;
    for (int m = 0; m < cfg.stages; ++m) {
        p.stages.push_back(CrossAttnStageParams::init("fusion.stage" + std::to_string(m), cfg, rng));
    }
    return p;
}

void FusionParams::collect(std::vector<Parameter*>& out) {
    for (auto& s : stages) s.collect(out);
}

Value cross_attention_stage(Value fg_prev, Value fl, CrossAttnStageParams& p, const FusionConfig& cfg) {
    Graph& g = *fg_prev.graph();
    const Tensor& tg = fg_prev.tensor();
    const Tensor& tl = fl.tensor();
    if (tg.rank() != 2 || tl.rank() != 3 || tg.extent(1) != cfg.dim || tl.extent(2) != cfg.dim ||
        tg.extent(0) != tl.extent(0)) {
        throw ShapeError("cross_attention_stage: f_g " + shape_str(tg.shape()) + " vs f_l " +
                         shape_str(tl.shape()));
    }
    if (tl.extent(1) < 1) throw ShapeError("cross_attention_stage: empty local feature set");
    const std::int64_t B = tg.extent(0), C = cfg.dim, HW = tl.extent(1);
    const std::int64_t dh = C / cfg.n_heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Value q_src = fg_prev;
    if (p.ln_in) {
        q_src = layer_norm(fg_prev, g.param(p.ln_in->gain), g.param(p.ln_in->bias));
    }
    Value fl_flat = reshape(fl, {B * HW, C});

    std::vector<Value> heads;
    for (int h = 0; h < cfg.n_heads; ++h) {
        Value q = matmul(q_src, g.param(p.w_q[static_cast<std::size_t>(h)]));           // B x dh
        Value k = reshape(matmul(fl_flat, g.param(p.w_k[static_cast<std::size_t>(h)])), {B, HW, dh});
        Value v = reshape(matmul(fl_flat, g.param(p.w_v[static_cast<std::size_t>(h)])), {B, HW, dh});
        Value scores = scale(matmul(reshape(q, {B, 1, dh}), transpose(k, {0, 2, 1})), inv_scale);
        Value attn = softmax(scores, 2);  // B x 1 x HW
        heads.push_back(reshape(matmul(attn, v), {B, dh}));
    }
    Value mca = matmul(concat(heads, 1), g.param(p.w_out));  // B x C
    Value cat = concat({mca, fg_prev}, 1);                   // B x 2C
    if (p.ln_cat) {
        cat = layer_norm(cat, g.param(p.ln_cat->gain), g.param(p.ln_cat->bias));
    }
    return add(ffn(cat, p.ffn), fg_prev);
}

Value fuse(Value f_g, Value f_l, FusionParams& p, const FusionConfig& cfg) {
    const Tensor& tl = f_l.tensor();
    if (tl.rank() != 4) throw ShapeError("fuse: f_l must be B,H,W,C, got " + shape_str(tl.shape()));
    const std::int64_t B = tl.extent(0), HW = tl.extent(1) * tl.extent(2), C = tl.extent(3);
    Value fl3 = reshape(f_l, {B, HW, C});
    Value fg = f_g;
    for (auto& stage : p.stages) fg = cross_attention_stage(fg, fl3, stage, cfg);
    return cfg.normalize_output ? l2_normalize(fg, 1) : fg;
}

Value fuse_add(Value f_g, Value f_l_prime, bool normalize) {
    Value s = add(f_g, f_l_prime);
    return normalize ? l2_normalize(s, 1) : s;
}

OrthogonalFusionParams OrthogonalFusionParams::init(std::int64_t dim, Rng& rng) {
    OrthogonalFusionParams p;
    p.w = Parameter("fusion.orth.w", rng.trunc_normal_tensor({2 * dim, dim}, 0.02));
    p.b = Parameter("fusion.orth.b", Tensor(Shape{dim}), /*weight_decay=*/false);
    return p;
}

void OrthogonalFusionParams::collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
}

Value fuse_orthogonal(Value f_g, Value f_l, OrthogonalFusionParams& p, bool normalize) {
    Graph& g = *f_g.graph();
    const Tensor& tg = f_g.tensor();
    const Tensor& tl = f_l.tensor();
    if (tg.rank() != 2 || tl.rank() != 4 || tl.extent(3) != tg.extent(1) || tl.extent(0) != tg.extent(0)) {
        throw ShapeError("fuse_orthogonal: f_g " + shape_str(tg.shape()) + " vs f_l " +
                         shape_str(tl.shape()));
    }
    const std::int64_t B = tg.extent(0), C = tg.extent(1), HW = tl.extent(1) * tl.extent(2);
    for (std::int64_t b = 0; b < B; ++b) {
        double n2 = 0.0;
        for (std::int64_t c = 0; c < C; ++c) n2 += tg[b * C + c] * tg[b * C + c];
        if (n2 == 0.0) throw NumericError("fuse_orthogonal: zero-norm global feature");
    }
    Value fl3 = reshape(f_l, {B, HW, C});
    Value norms2 = sum(mul(f_g, f_g), {1});                                // B
    Value dots = reshape(matmul(fl3, reshape(f_g, {B, C, 1})), {B, HW});   // <f_l, f_g> per position
    Value coef = rowwise_scale(dots, reciprocal(norms2));                  // B x HW
    Value parallel = matmul(reshape(coef, {B, HW, 1}), reshape(f_g, {B, 1, C}));
    Value orth = sub(fl3, parallel);
    Value pooled = mean(orth, {1});  // B x C
    Value cat = concat({pooled, f_g}, 1);
    Value projected = add(matmul(cat, g.param(p.w)), g.param(p.b));
    return normalize ? l2_normalize(projected, 1) : projected;
}

}  // namespace dalg
