// SPDX-License-Identifier: Apache-2.0

#include "dalg/model.hpp"

#include <cmath>

namespace dalg {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

std::string to_string(LocalVariant v) {
    switch (v) {
        case LocalVariant::kFull: return "full";
        case LocalVariant::kNoLocal: return "no-local";
        case LocalVariant::kNoWinMsa: return "no-winmsa";
        case LocalVariant::kNoSpatial: return "no-spatial";
    }
    return "?";
}

std::string to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::kMsa: return "msa";
        case AttentionVariant::kNWin: return "n-win";
        case AttentionVariant::kOWin: return "o-win";
    }
    return "?";
}

std::string to_string(FusionVariant v) {
    switch (v) {
        case FusionVariant::kCross: return "cross";
        case FusionVariant::kAdd: return "add";
        case FusionVariant::kOrthogonal: return "orthogonal";
    }
    return "?";
}

std::string to_string(StopVariant v) {
    switch (v) {
        case StopVariant::kBoth: return "both";
        case StopVariant::kCeAtF2: return "ce-at-f2";
        case StopVariant::kArcFaceAtFl: return "arcface-at-fl";
        case StopVariant::kNone: return "none";
    }
    return "?";
}

LocalVariant local_variant_from(const std::string& s) {
    if (s == "full") return LocalVariant::kFull;
    if (s == "no-local") return LocalVariant::kNoLocal;
    if (s == "no-winmsa") return LocalVariant::kNoWinMsa;
    if (s == "no-spatial") return LocalVariant::kNoSpatial;
    throw SchemaError("unknown local variant: " + s);
}

AttentionVariant attention_variant_from(const std::string& s) {
    if (s == "msa") return AttentionVariant::kMsa;
    if (s == "n-win") return AttentionVariant::kNWin;
    if (s == "o-win") return AttentionVariant::kOWin;
    throw SchemaError("unknown attention variant: " + s);
}

FusionVariant fusion_variant_from(const std::string& s) {
    if (s == "cross") return FusionVariant::kCross;
    if (s == "add") return FusionVariant::kAdd;
    if (s == "orthogonal") return FusionVariant::kOrthogonal;
    throw SchemaError("unknown fusion variant: " + s);
}

StopVariant stop_variant_from(const std::string& s) {
    if (s == "both") return StopVariant::kBoth;
    if (s == "ce-at-f2") return StopVariant::kCeAtF2;
    if (s == "arcface-at-fl") return StopVariant::kArcFaceAtFl;
    if (s == "none") return StopVariant::kNone;
    throw SchemaError("unknown stop-gradient variant: " + s);
}

std::string VariantConfig::label() const {
    return to_string(local) + "/" + to_string(attention) + "/" + to_string(fusion) + "/" + to_string(stop);
}

ArcFaceParams ArcFaceParams::init(std::int64_t n_classes, std::int64_t dim, double margin, double scale,
                                  Rng& rng) {
    if (margin < 0.0 || margin >= kPi / 2.0) {
        throw SchemaError("arcface margin must lie in [0, pi/2), got " + std::to_string(margin));
    }
    if (scale <= 0.0) throw SchemaError("arcface scale must be positive");
    ArcFaceParams p;
    p.margin = margin;
    p.scale = scale;
    p.class_weights = Parameter("arcface.class_weights", rng.trunc_normal_tensor({n_classes, dim}, 0.02));
    return p;
}

void ArcFaceParams::collect(std::vector<Parameter*>& out) { out.push_back(&class_weights); }

void ModelConfig::validate() const {
    backbone.validate();
    local.validate();
    fusion.validate();
    if (local.in_dim != backbone.f2_dim()) {
        throw SchemaError("model: local in dim " + std::to_string(local.in_dim) +
                          " must equal the backbone mid-level dim " + std::to_string(backbone.f2_dim()));
    }
    if (local.out_dim != backbone.out_dim() || fusion.dim != backbone.out_dim()) {
        throw SchemaError("model: descriptor width mismatch across backbone/local/fusion");
    }
    if (n_classes < 1) throw SchemaError("model: need at least one class");
    if (local.n_classes != n_classes) {
        throw SchemaError("model: local head classes " + std::to_string(local.n_classes) +
                          " differ from model classes " + std::to_string(n_classes));
    }
    if (arcface_margin < 0.0 || arcface_margin >= kPi / 2.0) {
        throw SchemaError("model: arcface margin out of range");
    }
    if (arcface_scale <= 0.0) throw SchemaError("model: arcface scale must be positive");
}

ModelConfig ModelConfig::paper_preset(std::int64_t n_classes) {
    ModelConfig m;
    m.backbone.image_size = 224;
    m.backbone.patch_size = 4;
    m.backbone.depths = {2, 2, 6, 2};
    m.backbone.dims = {96, 192, 384, 768};
    m.backbone.heads = {3, 6, 12, 24};
    m.backbone.window = 7;
    m.local.window = 7;
    m.local.stride = 3;  // floor(7 / 2)
    m.local.n_blocks = 4;
    m.local.n_heads = 6;
    m.local.in_dim = 384;
    m.local.out_dim = 768;
    m.local.ffn_hidden = 1536;
    m.local.n_classes = n_classes;
    m.fusion.stages = 2;
    m.fusion.n_heads = 12;
    m.fusion.dim = 768;
    m.fusion.ffn_hidden = 1536;
    m.n_classes = n_classes;
    return m;
}

ModelConfig ModelConfig::toy_preset(std::int64_t n_classes) {
    ModelConfig m;
    m.backbone.image_size = 32;
    m.backbone.patch_size = 2;
    m.backbone.depths = {1, 1, 2, 1};
    m.backbone.dims = {16, 32, 64, 128};
    m.backbone.heads = {1, 2, 4, 8};
    m.backbone.window = 4;
    m.local.window = 2;
    m.local.stride = 1;
    m.local.n_blocks = 4;
    m.local.n_heads = 4;
    m.local.in_dim = 64;
    m.local.out_dim = 128;
    m.local.ffn_hidden = 256;
    m.local.n_classes = n_classes;
    m.fusion.stages = 2;
    m.fusion.n_heads = 4;
    m.fusion.dim = 128;
    m.fusion.ffn_hidden = 256;
    m.n_classes = n_classes;
    return m;
}

ModelConfig ModelConfig::micro_preset(std::int64_t n_classes) {
    ModelConfig m;
    m.backbone.image_size = 16;
    m.backbone.patch_size = 1;
    m.backbone.depths = {2, 1, 1, 1};
    m.backbone.dims = {8, 16, 32, 64};
    m.backbone.heads = {1, 2, 4, 8};
    m.backbone.window = 4;
    m.local.window = 2;
    m.local.stride = 1;
    m.local.n_blocks = 2;
    m.local.n_heads = 4;
    m.local.in_dim = 32;
    m.local.out_dim = 64;
    m.local.ffn_hidden = 64;
    m.local.n_classes = n_classes;
    m.fusion.stages = 2;
    m.fusion.n_heads = 4;
    m.fusion.dim = 64;
    m.fusion.ffn_hidden = 128;
    m.n_classes = n_classes;
    return m;
}

LocalBranchConfig resolve_local_config(const ModelConfig& cfg, const VariantConfig& v) {
    LocalBranchConfig lc = cfg.local;
    const std::int64_t f2_extent = cfg.backbone.f2_extent();
    switch (v.attention) {
        case AttentionVariant::kOWin:
            if (lc.stride >= lc.window && lc.window > 1) lc.stride = lc.window / 2;
            break;
        case AttentionVariant::kNWin:
            lc.stride = lc.window;
            break;
        case AttentionVariant::kMsa:
            // one window spanning the whole mid-level map
            lc.window = f2_extent;
            lc.stride = f2_extent;
            break;
    }
    if (v.local == LocalVariant::kNoWinMsa) lc.n_blocks = 0;
    return lc;
}

DalgModel::DalgModel(const ModelConfig& cfg, const VariantConfig& variants, std::uint64_t seed)
    : cfg_(cfg), variants_(variants), resolved_local_(resolve_local_config(cfg, variants)) {
    cfg_.validate();
    resolved_local_.validate();
    Rng rng(seed);
    backbone_params = BackboneParams::init(cfg_.backbone, rng);
    if (variants_.local != LocalVariant::kNoLocal) {
        local_params = LocalBranchParams::init(resolved_local_, rng);
        if (variants_.fusion == FusionVariant::kCross) {
            fusion_params = FusionParams::init(cfg_.fusion, rng);
        } else if (variants_.fusion == FusionVariant::kOrthogonal) {
            orth_params = OrthogonalFusionParams::init(cfg_.fusion.dim, rng);
        }
    }
    arcface = ArcFaceParams::init(cfg_.n_classes, cfg_.descriptor_dim(), cfg_.arcface_margin,
                                  cfg_.arcface_scale, rng);
}

DalgModel::Outputs DalgModel::forward(Graph& g, Value images) {
    if (images.graph() != &g) throw Error("forward: images recorded on a different graph");
    images_seen_ += images.extent(0);
    BackboneOutput bb = backbone_forward(images, backbone_params, cfg_.backbone);
    Outputs out;
    out.f2 = bb.f2;
    out.f_g = bb.f_g;

    if (variants_.local == LocalVariant::kNoLocal) {
        out.f = cfg_.fusion.normalize_output ? l2_normalize(bb.f_g, 1) : bb.f_g;
        return out;
    }

    const bool stop_at_f2 =
        variants_.stop == StopVariant::kBoth || variants_.stop == StopVariant::kCeAtF2;
    const bool stop_at_fl =
        variants_.stop == StopVariant::kBoth || variants_.stop == StopVariant::kArcFaceAtFl;

    Value f2_in = stop_at_f2 ? stop_gradient(bb.f2) : bb.f2;
    LocalBranchMode mode;
    mode.win_msa = variants_.local != LocalVariant::kNoWinMsa;
    mode.spatial = variants_.local != LocalVariant::kNoSpatial;
    out.local = local_forward(f2_in, local_params, resolved_local_, mode);

    Value fl_for_fusion = stop_at_fl ? stop_gradient(out.local->f_l) : out.local->f_l;
    switch (variants_.fusion) {
        case FusionVariant::kCross:
            out.f = fuse(bb.f_g, fl_for_fusion, fusion_params, cfg_.fusion);
            break;
        case FusionVariant::kAdd:
            out.f = fuse_add(bb.f_g, mean(fl_for_fusion, {1, 2}), cfg_.fusion.normalize_output);
            break;
        case FusionVariant::kOrthogonal:
            out.f = fuse_orthogonal(bb.f_g, fl_for_fusion, *orth_params, cfg_.fusion.normalize_output);
            break;
    }
    return out;
}

Value DalgModel::descriptor(Graph& g, Value images) { return forward(g, images).f; }

std::vector<Parameter*> DalgModel::parameters() {
    std::vector<Parameter*> out;
    backbone_params.collect(out);
    if (variants_.local != LocalVariant::kNoLocal) {
        local_params.collect(out);
        if (variants_.fusion == FusionVariant::kCross) fusion_params.collect(out);
        if (orth_params) orth_params->collect(out);
    }
    arcface.collect(out);
    check_unique_names(out);
    return out;
}

void DalgModel::zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
}

}  // namespace dalg
