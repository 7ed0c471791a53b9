// SPDX-License-Identifier: Apache-2.0

#include "dalg/attention.hpp"

#include <cmath>

namespace dalg {

MhsaParams MhsaParams::init(const std::string& prefix, std::int64_t dim, int n_heads, Rng& rng) {
    if (n_heads <= 0 || dim % n_heads != 0) {
        throw SchemaError("attention dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(n_heads));
    }
    MhsaParams p;
    p.n_heads = n_heads;
    p.w_q = Parameter(prefix + ".wq", rng.trunc_normal_tensor({dim, dim}, 0.02));
    p.w_k = Parameter(prefix + ".wk", rng.trunc_normal_tensor({dim, dim}, 0.02));
    p.w_v = Parameter(prefix + ".wv", rng.trunc_normal_tensor({dim, dim}, 0.02));
    p.w_o = Parameter(prefix + ".wo", rng.trunc_normal_tensor({dim, dim}, 0.02));
    return p;
}

void MhsaParams::collect(std::vector<Parameter*>& out) {
    out.push_back(&w_q);
    out.push_back(&w_k);
    out.push_back(&w_v);
    out.push_back(&w_o);
}

FfnParams FfnParams::init(const std::string& prefix, std::int64_t in_dim, std::int64_t hidden,
                          std::int64_t out_dim, Rng& rng) {
    if (hidden <= 0) throw SchemaError("ffn hidden size must be positive");
    FfnParams p;
    p.w1 = Parameter(prefix + ".w1", rng.trunc_normal_tensor({in_dim, hidden}, 0.02));
    p.b1 = Parameter(prefix + ".b1", Tensor(Shape{hidden}), /*weight_decay=*/false);
    p.w2 = Parameter(prefix + ".w2", rng.trunc_normal_tensor({hidden, out_dim}, 0.02));
    p.b2 = Parameter(prefix + ".b2", Tensor(Shape{out_dim}), /*weight_decay=*/false);
    return p;
}

void FfnParams::collect(std::vector<Parameter*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
}

LayerNormParams LayerNormParams::init(const std::string& prefix, std::int64_t dim) {
    LayerNormParams p;
    p.gain = Parameter(prefix + ".gain", Tensor::full({dim}, 1.0), /*weight_decay=*/false);
    p.bias = Parameter(prefix + ".bias", Tensor(Shape{dim}), /*weight_decay=*/false);
    return p;
}

void LayerNormParams::collect(std::vector<Parameter*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
}

TransformerBlockParams TransformerBlockParams::init(const std::string& prefix, std::int64_t dim,
                                                    int n_heads, std::int64_t ffn_hidden, Rng& rng) {
    TransformerBlockParams p;
    p.ln1 = LayerNormParams::init(prefix + ".ln1", dim);
    p.ln2 = LayerNormParams::init(prefix + ".ln2", dim);
    p.attn = MhsaParams::init(prefix + ".attn", dim, n_heads, rng);
    p.ffn = FfnParams::init(prefix + ".ffn", dim, ffn_hidden, dim, rng);
    return p;
}

void TransformerBlockParams::collect(std::vector<Parameter*>& out) {
    ln1.collect(out);
    ln2.collect(out);
    attn.collect(out);
    ffn.collect(out);
}

// ---- window planning --------------------------------------------------------

namespace {

std::int64_t anchors_for(std::int64_t extent, std::int64_t win, std::int64_t stride) {
    if (extent <= win) return 1;
    return (extent - win + stride - 1) / stride + 1;
}

}  // namespace

WindowGrid WindowGrid::plan(std::int64_t batch, std::int64_t height, std::int64_t width,
                            std::int64_t channels, std::int64_t win, std::int64_t stride) {
    if (win < 1) throw ShapeError("window size must be >= 1");
    if (stride < 1 || stride > win) {
        throw ShapeError("window stride " + std::to_string(stride) + " must lie in [1, " +
                         std::to_string(win) + "]");
    }
    WindowGrid g;
    g.batch = batch;
    g.height = height;
    g.width = width;
    g.channels = channels;
    g.win = win;
    g.stride = stride;
    g.n_h = anchors_for(height, win, stride);
    g.n_w = anchors_for(width, win, stride);
    g.any_padding = (g.n_h - 1) * stride + win > height || (g.n_w - 1) * stride + win > width;

    g.coverage.assign(static_cast<std::size_t>(height * width), 0.0);
    g.valid.assign(static_cast<std::size_t>(g.windows_per_item() * g.tokens_per_window()), 0.0);
    for (std::int64_t wy = 0; wy < g.n_h; ++wy) {
        for (std::int64_t wx = 0; wx < g.n_w; ++wx) {
            const std::int64_t w_idx = wy * g.n_w + wx;
            for (std::int64_t ty = 0; ty < win; ++ty) {
                for (std::int64_t tx = 0; tx < win; ++tx) {
                    const std::int64_t y = wy * stride + ty;
                    const std::int64_t x = wx * stride + tx;
                    if (y < height && x < width) {
                        g.valid[static_cast<std::size_t>(w_idx * win * win + ty * win + tx)] = 1.0;
                        g.coverage[static_cast<std::size_t>(y * width + x)] += 1.0;
                    }
                }
            }
        }
    }
    return g;
}

Tensor WindowGrid::key_mask() const {
    const std::int64_t cnt = windows_per_item();
    const std::int64_t n = tokens_per_window();
    Tensor mask(Shape{cnt, n, n});
    for (std::int64_t w = 0; w < cnt; ++w) {
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                mask[(w * n + i) * n + j] = valid[static_cast<std::size_t>(w * n + j)];
            }
        }
    }
    return mask;
}

Value window_partition(Value fmap, const WindowGrid& grid) {
    const Tensor& tx = fmap.tensor();
    if (tx.rank() != 4 || tx.extent(0) != grid.batch || tx.extent(1) != grid.height ||
        tx.extent(2) != grid.width || tx.extent(3) != grid.channels) {
        throw ShapeError("window_partition: map " + shape_str(tx.shape()) + " does not match grid plan");
    }
    const std::int64_t B = grid.batch, H = grid.height, W = grid.width, C = grid.channels;
    const std::int64_t cnt = grid.windows_per_item(), n = grid.tokens_per_window(), win = grid.win;
    Tensor out(Shape{B * cnt, n, C});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t wy = 0; wy < grid.n_h; ++wy) {
            for (std::int64_t wx = 0; wx < grid.n_w; ++wx) {
                const std::int64_t w_idx = wy * grid.n_w + wx;
                double* dst = out.data() + ((b * cnt + w_idx) * n) * C;
                for (std::int64_t ty = 0; ty < win; ++ty) {
                    for (std::int64_t tx2 = 0; tx2 < win; ++tx2) {
                        const std::int64_t y = wy * grid.stride + ty;
                        const std::int64_t x = wx * grid.stride + tx2;
                        if (y < H && x < W) {
                            const double* src = tx.data() + ((b * H + y) * W + x) * C;
                            std::copy(src, src + C, dst);
                        }
                        dst += C;
                    }
                }
            }
        }
    }
    Graph& g = *fmap.graph();
    const auto ix = fmap.id();
    const WindowGrid gcopy = grid;
    return g.make_node("window_partition", std::move(out), {fmap}, [ix, gcopy](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        Tensor* gx = gg.grad_of(ix);
        if (!gx) return;
        const std::int64_t B = gcopy.batch, H = gcopy.height, W = gcopy.width, C = gcopy.channels;
        const std::int64_t cnt = gcopy.windows_per_item(), n = gcopy.tokens_per_window(), win = gcopy.win;
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t wy = 0; wy < gcopy.n_h; ++wy) {
                for (std::int64_t wx = 0; wx < gcopy.n_w; ++wx) {
                    const std::int64_t w_idx = wy * gcopy.n_w + wx;
                    const double* src = dy.data() + ((b * cnt + w_idx) * n) * C;
                    for (std::int64_t ty = 0; ty < win; ++ty) {
                        for (std::int64_t tx2 = 0; tx2 < win; ++tx2) {
                            const std::int64_t y = wy * gcopy.stride + ty;
                            const std::int64_t x = wx * gcopy.stride + tx2;
                            if (y < H && x < W) {
                                double* dst = gx->data() + ((b * H + y) * W + x) * C;
                                for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
                            }
                            src += C;
                        }
                    }
                }
            }
        }
    });
}

Value window_merge_average(Value windows, const WindowGrid& grid) {
    const Tensor& tw = windows.tensor();
    const std::int64_t cnt = grid.windows_per_item(), n = grid.tokens_per_window();
    if (tw.rank() != 3 || tw.extent(0) != grid.batch * cnt || tw.extent(1) != n ||
        tw.extent(2) != grid.channels) {
        throw ShapeError("window_merge_average: windows " + shape_str(tw.shape()) +
                         " do not match grid plan");
    }
    const std::int64_t B = grid.batch, H = grid.height, W = grid.width, C = grid.channels;
    const std::int64_t win = grid.win;
    for (std::int64_t i = 0; i < H * W; ++i) {
        if (grid.coverage[static_cast<std::size_t>(i)] <= 0.0) {
            throw Error("window_merge_average: uncovered source cell (grid plan is inconsistent)");
        }
    }
    Tensor out(Shape{B, H, W, C});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t wy = 0; wy < grid.n_h; ++wy) {
            for (std::int64_t wx = 0; wx < grid.n_w; ++wx) {
                const std::int64_t w_idx = wy * grid.n_w + wx;
                const double* src = tw.data() + ((b * cnt + w_idx) * n) * C;
                for (std::int64_t ty = 0; ty < win; ++ty) {
                    for (std::int64_t tx2 = 0; tx2 < win; ++tx2) {
                        const std::int64_t y = wy * grid.stride + ty;
                        const std::int64_t x = wx * grid.stride + tx2;
                        if (y < H && x < W) {
                            const double inv = 1.0 / grid.coverage[static_cast<std::size_t>(y * W + x)];
                            double* dst = out.data() + ((b * H + y) * W + x) * C;
                            for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                        }
                        src += C;
                    }
                }
            }
        }
    }
    Graph& g = *windows.graph();
    const auto iw = windows.id();
    const WindowGrid gcopy = grid;
    return g.make_node("window_merge_average", std::move(out), {windows},
                       [iw, gcopy](Graph& gg, std::int32_t self) {
                           const Tensor& dy = gg.grad_value(self);
                           Tensor* gw = gg.grad_of(iw);
                           if (!gw) return;
                           const std::int64_t B = gcopy.batch, H = gcopy.height, W = gcopy.width,
                                              C = gcopy.channels;
                           const std::int64_t cnt = gcopy.windows_per_item(), n = gcopy.tokens_per_window(),
                                              win = gcopy.win;
                           for (std::int64_t b = 0; b < B; ++b) {
                               for (std::int64_t wy = 0; wy < gcopy.n_h; ++wy) {
                                   for (std::int64_t wx = 0; wx < gcopy.n_w; ++wx) {
                                       const std::int64_t w_idx = wy * gcopy.n_w + wx;
                                       double* dst = gw->data() + ((b * cnt + w_idx) * n) * C;
                                       for (std::int64_t ty = 0; ty < win; ++ty) {
                                           for (std::int64_t tx2 = 0; tx2 < win; ++tx2) {
                                               const std::int64_t y = wy * gcopy.stride + ty;
                                               const std::int64_t x = wx * gcopy.stride + tx2;
                                               if (y < H && x < W) {
                                                   const double inv =
                                                       1.0 / gcopy.coverage[static_cast<std::size_t>(y * W + x)];
                                                   const double* src = dy.data() + ((b * H + y) * W + x) * C;
                                                   for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                                               }
                                               dst += C;
                                           }
                                       }
                                   }
                               }
                           }
                       });
}

// ---- attention --------------------------------------------------------------

Value mhsa_tokens(Value tokens, MhsaParams& p, const Tensor* mask) {
    const Tensor& tt = tokens.tensor();
    if (tt.rank() != 3 || tt.extent(2) != p.dim()) {
        throw ShapeError("mhsa: tokens " + shape_str(tt.shape()) + " incompatible with dim " +
                         std::to_string(p.dim()));
    }
    Graph& g = *tokens.graph();
    const std::int64_t G = tt.extent(0), N = tt.extent(1), C = tt.extent(2);
    const std::int64_t h = p.n_heads, dh = p.head_dim();

    Value flat = reshape(tokens, {G * N, C});
    auto split_heads = [&](Value projected) {
        Value r = reshape(projected, {G, N, h, dh});
        Value t = transpose(r, {0, 2, 1, 3});
        return reshape(t, {G * h, N, dh});
    };
    Value q = split_heads(matmul(flat, g.param(p.w_q)));
    Value k = split_heads(matmul(flat, g.param(p.w_k)));
    Value v = split_heads(matmul(flat, g.param(p.w_v)));

    Value scores = scale(matmul(q, transpose(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    Value attn = mask ? softmax_masked(scores, *mask, h) : softmax(scores, 2);
    Value ctx = matmul(attn, v);  // (G*h, N, dh)
    Value merged = reshape(transpose(reshape(ctx, {G, h, N, dh}), {0, 2, 1, 3}), {G * N, C});
    Value out = matmul(merged, g.param(p.w_o));
    return reshape(out, {G, N, C});
}

Value mhsa(Value tokens, MhsaParams& p) {
    const Tensor& tt = tokens.tensor();
    if (tt.rank() != 2) throw ShapeError("mhsa: expected (N, C) tokens, got " + shape_str(tt.shape()));
    Value out = mhsa_tokens(reshape(tokens, {1, tt.extent(0), tt.extent(1)}), p);
    return reshape(out, {tt.extent(0), tt.extent(1)});
}

Value ffn(Value x, FfnParams& p) {
    Graph& g = *x.graph();
    const Tensor& tx = x.tensor();
    if (tx.rank() != 2 || tx.extent(1) != p.w1.value.extent(0)) {
        throw ShapeError("ffn: input " + shape_str(tx.shape()) + " incompatible with w1 " +
                         shape_str(p.w1.value.shape()));
    }
    Value hdn = gelu(add(matmul(x, g.param(p.w1)),
                         g.param(p.b1)));
    return add(matmul(hdn, g.param(p.w2)), g.param(p.b2));
}

Value transformer_block(Value tokens, TransformerBlockParams& p, const Tensor* mask) {
    Graph& g = *tokens.graph();
    const Tensor& tt = tokens.tensor();
    const bool rank2 = tt.rank() == 2;
    Value x3 = rank2 ? reshape(tokens, {1, tt.extent(0), tt.extent(1)}) : tokens;
    const std::int64_t G = x3.extent(0), N = x3.extent(1), C = x3.extent(2);

    Value n1 = layer_norm(reshape(x3, {G * N, C}), g.param(p.ln1.gain),
                          g.param(p.ln1.bias));
    Value a = mhsa_tokens(reshape(n1, {G, N, C}), p.attn, mask);
    Value x1 = add(x3, a);

    Value n2 = layer_norm(reshape(x1, {G * N, C}), g.param(p.ln2.gain),
                          g.param(p.ln2.bias));
    Value f = ffn(n2, p.ffn);
    Value x2 = add(reshape(x1, {G * N, C}), f);
    Value out = reshape(x2, {G, N, C});
    return rank2 ? reshape(out, {N, C}) : out;
}

Tensor shifted_window_mask(std::int64_t height, std::int64_t width, std::int64_t win, std::int64_t shift) {
    if (height % win != 0 || width % win != 0) {
        throw ShapeError("shifted_window_mask: extents must be divisible by the window size");
    }
    if (shift <= 0 || shift >= win) throw ShapeError("shifted_window_mask: shift must lie in (0, win)");
    auto region = [&](std::int64_t v, std::int64_t extent) -> std::int64_t {
        if (v < extent - win) return 0;
        if (v < extent - shift) return 1;
        return 2;
    };
    const std::int64_t n_h = height / win, n_w = width / win;
    const std::int64_t n = win * win;
    Tensor mask(Shape{n_h * n_w, n, n});
    std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
    for (std::int64_t wy = 0; wy < n_h; ++wy) {
        for (std::int64_t wx = 0; wx < n_w; ++wx) {
            for (std::int64_t ty = 0; ty < win; ++ty) {
                for (std::int64_t tx = 0; tx < win; ++tx) {
                    ids[static_cast<std::size_t>(ty * win + tx)] =
                        3 * region(wy * win + ty, height) + region(wx * win + tx, width);
                }
            }
            double* m = mask.data() + (wy * n_w + wx) * n * n;
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < n; ++j) {
                    m[i * n + j] = ids[static_cast<std::size_t>(i)] == ids[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
                }
            }
        }
    }
    return mask;
}

}  // namespace dalg
