// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dalg/attention.hpp"

namespace dalg {

struct FusionConfig {
    int stages = 2;          // number of stacked cross-attention functions
    int n_heads = 4;
    std::int64_t dim = 128;  // descriptor width C
    std::int64_t ffn_hidden = 256;
    bool pre_norm = false;   // off by default: the block is Proj/MCA/concat/FFN/residual only
    bool normalize_output = true;

    void validate() const;
};

/// One cross-attention function: the global vector queries the local feature
/// map, heads are concatenated and projected, the result is concatenated with
/// the incoming global vector, passed through an FFN and added residually.
struct CrossAttnStageParams {
    std::vector<Parameter> w_q, w_k, w_v;  // per head, C x C/n_h, no biases
    Parameter w_out;                       // C x C
    FfnParams ffn;                         // 2C -> hidden -> C
    std::optional<LayerNormParams> ln_in, ln_cat;  // present only with pre_norm

    static CrossAttnStageParams init(const std::string& prefix, const FusionConfig& cfg, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

struct FusionParams {
    std::vector<CrossAttnStageParams> stages;

    static FusionParams init(const FusionConfig& cfg, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

Value cross_attention_stage(Value fg_prev, Value fl, CrossAttnStageParams& p, const FusionConfig& cfg);

/// Applies the stage stack to f_g (B x C) against f_l (B x H x W x C) and
/// L2-normalizes the result when configured.
Value fuse(Value f_g, Value f_l, FusionParams& p, const FusionConfig& cfg);

/// Baseline: normalize(f_g + f_l').
Value fuse_add(Value f_g, Value f_l_prime, bool normalize = true);

struct OrthogonalFusionParams {
    Parameter w, b;  // 2C x C projection after concatenation

    static OrthogonalFusionParams init(std::int64_t dim, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

/// Baseline: per position, the component of f_l orthogonal to f_g, mean
/// pooled, concatenated with f_g, projected back to C and normalized.
Value fuse_orthogonal(Value f_g, Value f_l, OrthogonalFusionParams& p, bool normalize = true);

}  // namespace dalg
