// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "dalg/attention.hpp"

namespace dalg {

/// Local branch: overlapped window split of the mid-level map, a stack of
/// window attention blocks with shared weights, overlap-averaged merge with a
/// space-to-depth reduction, and a positive spatial attention map.
struct LocalBranchConfig {
    std::int64_t window = 4;   // spatial window size
    std::int64_t stride = 2;   // window stride; < window means overlapped
    int n_blocks = 4;
    int n_heads = 4;
    std::int64_t in_dim = 64;   // channel dim of the incoming map (C/2)
    std::int64_t out_dim = 128; // descriptor width C
    std::int64_t ffn_hidden = 256;
    std::int64_t n_classes = 8;

    bool overlapped() const { return stride < window; }
    void validate() const;
};

struct SpatialAttnParams {
    Parameter conv1_w, conv1_b;  // 1x1 conv C -> C
    Parameter conv2_w, conv2_b;  // 1x1 conv C -> 1, SoftPlus activated

    static SpatialAttnParams init(const std::string& prefix, std::int64_t dim, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

struct LocalBranchParams {
    std::vector<TransformerBlockParams> blocks;
    Parameter merge_w, merge_b;  // 2C x C projection after space-to-depth
    SpatialAttnParams spatial;
    Parameter classifier_w, classifier_b;  // C x n_classes auxiliary head

    static LocalBranchParams init(const LocalBranchConfig& cfg, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

/// Ablation hooks: drop the window attention stack, or force the spatial
/// attention map to one.
struct LocalBranchMode {
    bool win_msa = true;
    bool spatial = true;
};

struct LocalOutput {
    Value f_r;        // B x H x W x C merged map
    Value s_a;        // B x H x W positive attention map
    Value f_l;        // B x H x W x C modulated local features
    Value f_l_prime;  // B x C spatial mean of f_l
    Value aux_logits; // B x n_classes
};

/// Window token sets pass through the shared block stack.
Value window_attention_stack(Value windows, LocalBranchParams& p, const Tensor* mask);

/// softplus(conv2(relu(conv1(f_r)))): strictly positive everywhere.
Value spatial_attention(Value f_r, SpatialAttnParams& p);

/// Scales the channel vector at each position by the scalar map value there.
Value modulate(Value f_r, Value s_a);

LocalOutput local_forward(Value f2, LocalBranchParams& p, const LocalBranchConfig& cfg,
                          const LocalBranchMode& mode = {});

}  // namespace dalg
