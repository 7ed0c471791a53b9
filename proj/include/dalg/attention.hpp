// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dalg/graph.hpp"
#include "dalg/rng.hpp"

namespace dalg {

/// Packed multi-head self-attention weights. Head h reads columns
/// [h*d_h, (h+1)*d_h) of each projection, d_h = dim / n_heads.
struct MhsaParams {
    Parameter w_q, w_k, w_v, w_o;
    int n_heads = 1;

    std::int64_t dim() const { return w_q.value.extent(0); }
    std::int64_t head_dim() const { return dim() / n_heads; }

    static MhsaParams init(const std::string& prefix, std::int64_t dim, int n_heads, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

/// Two-layer feed-forward net with GELU between the layers.
struct FfnParams {
    Parameter w1, b1, w2, b2;

    static FfnParams init(const std::string& prefix, std::int64_t in_dim, std::int64_t hidden,
                          std::int64_t out_dim, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

struct LayerNormParams {
    Parameter gain, bias;

    static LayerNormParams init(const std::string& prefix, std::int64_t dim);
    void collect(std::vector<Parameter*>& out);
};

/// Pre-norm residual block: x + MHSA(LN(x)), then + FFN(LN(.)).
struct TransformerBlockParams {
    LayerNormParams ln1, ln2;
    MhsaParams attn;
    FfnParams ffn;

    static TransformerBlockParams init(const std::string& prefix, std::int64_t dim, int n_heads,
                                       std::int64_t ffn_hidden, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

/// Anchor layout of a (possibly overlapped, possibly padded) window split of a
/// B x H x W x C map. Anchors sit at multiples of the stride; the last anchor
/// row/column may reach past the source extent, in which case the padded cells
/// are tracked by a validity mask and excluded from attention normalization
/// and merge averaging.
struct WindowGrid {
    std::int64_t batch = 0, height = 0, width = 0, channels = 0;
    std::int64_t win = 0, stride = 0;
    std::int64_t n_h = 0, n_w = 0;       // anchors per axis
    std::vector<double> coverage;        // height*width: windows covering each source cell
    std::vector<double> valid;           // n_h*n_w*win*win: 1 for in-bounds token, 0 for padding
    bool any_padding = false;

    std::int64_t windows_per_item() const { return n_h * n_w; }
    std::int64_t tokens_per_window() const { return win * win; }

    static WindowGrid plan(std::int64_t batch, std::int64_t height, std::int64_t width,
                           std::int64_t channels, std::int64_t win, std::int64_t stride);

    /// Key-side attention mask (windows, tokens, tokens): pair (i, j) allowed
    /// iff token j is in bounds. Identical across batch items.
    Tensor key_mask() const;
};

/// Gathers window token sets: (B*windows, win*win, C); padded cells are zero.
Value window_partition(Value fmap, const WindowGrid& grid);

/// Scatters window tokens back to B x H x W x C, averaging each source cell
/// over the windows that cover it. Padding cells never contribute.
Value window_merge_average(Value windows, const WindowGrid& grid);

/// Multi-head self-attention over token sets (G, N, C); optional mask of
/// shape (W, N, N) with G == batch_items * W * 1 group layout (the mask slab
/// for row g is (g) % ... see softmax_masked). Pass grid-derived masks here.
Value mhsa_tokens(Value tokens, MhsaParams& p, const Tensor* mask = nullptr);

/// Spec-level single-set MHSA: tokens (N, C) -> (N, C).
Value mhsa(Value tokens, MhsaParams& p);

/// Per-row affine-GELU-affine: (R, C_in) -> (R, C_out).
Value ffn(Value x, FfnParams& p);

/// Pre-norm residual transformer block over token sets (G, N, C) or (N, C).
Value transformer_block(Value tokens, TransformerBlockParams& p, const Tensor* mask = nullptr);

/// Pairwise attention mask for a shifted non-overlapped window split: tokens
/// may attend only within the contiguous source region they came from.
/// Returns (windows, win*win, win*win).
Tensor shifted_window_mask(std::int64_t height, std::int64_t width, std::int64_t win, std::int64_t shift);

}  // namespace dalg
