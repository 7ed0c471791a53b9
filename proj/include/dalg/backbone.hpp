// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "dalg/attention.hpp"

namespace dalg {

/// Hierarchical windowed-attention backbone configuration. Stage dims double
/// per stage (C0, 2C0, 4C0, 8C0); the descriptor width downstream is the
/// stage-4 dim, and the mid-level map handed to the local branch has half
/// that width at twice the final spatial resolution.
struct BackboneConfig {
    std::int64_t image_size = 32;
    std::int64_t patch_size = 2;
    std::array<int, 4> depths{1, 1, 2, 1};
    std::array<std::int64_t, 4> dims{16, 32, 64, 128};
    std::array<int, 4> heads{1, 2, 4, 8};
    std::int64_t window = 4;
    std::int64_t ffn_ratio = 4;

    std::int64_t grid() const { return image_size / patch_size; }
    std::int64_t out_dim() const { return dims[3]; }
    /// Spatial extent of the map exposed to the local branch (grid / 4).
    std::int64_t f2_extent() const { return grid() / 4; }
    std::int64_t f2_dim() const { return dims[2]; }
    void validate() const;
};

struct PatchMergeParams {
    Parameter w, b;  // 4c x 2c reduction
    static PatchMergeParams init(const std::string& prefix, std::int64_t in_dim, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

struct BackboneParams {
    Parameter patch_w, patch_b;  // (patch^2 * 3) x C0
    LayerNormParams patch_norm;
    std::array<std::vector<TransformerBlockParams>, 4> stages;
    std::array<PatchMergeParams, 3> merges;

    static BackboneParams init(const BackboneConfig& cfg, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

struct BackboneOutput {
    Value f2;   // B x 2H x 2W x C/2, input to the local branch
    Value f4;   // B x H x W x C, final stage map
    Value f_g;  // B x C, spatial mean of f4
    std::vector<Value> stage_outputs;
};

/// Non-overlapping p x p patches, flattened, linearly projected, layer-normed.
Value patch_embed(Value images, BackboneParams& p, const BackboneConfig& cfg);

/// 2x2 neighborhood concatenation (4c) followed by a linear reduction to 2c.
Value patch_merge(Value grid_map, PatchMergeParams& p);

/// Runs `blocks` transformer blocks over the map with window attention,
/// alternating plain and shifted partitions (shift = window/2, dropped when a
/// single window covers the map).
Value stage_forward(Value grid_map, std::vector<TransformerBlockParams>& blocks, std::int64_t window);

BackboneOutput backbone_forward(Value images, BackboneParams& p, const BackboneConfig& cfg);

}  // namespace dalg
