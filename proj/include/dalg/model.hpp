// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dalg/backbone.hpp"
#include "dalg/fusion.hpp"
#include "dalg/local_branch.hpp"

namespace dalg {

enum class LocalVariant { kFull, kNoLocal, kNoWinMsa, kNoSpatial };
enum class AttentionVariant { kMsa, kNWin, kOWin };
enum class FusionVariant { kCross, kAdd, kOrthogonal };
enum class StopVariant { kBoth, kCeAtF2, kArcFaceAtFl, kNone };

std::string to_string(LocalVariant v);
std::string to_string(AttentionVariant v);
std::string to_string(FusionVariant v);
std::string to_string(StopVariant v);
LocalVariant local_variant_from(const std::string& s);
AttentionVariant attention_variant_from(const std::string& s);
FusionVariant fusion_variant_from(const std::string& s);
StopVariant stop_variant_from(const std::string& s);

struct VariantConfig {
    LocalVariant local = LocalVariant::kFull;
    AttentionVariant attention = AttentionVariant::kOWin;
    FusionVariant fusion = FusionVariant::kCross;
    StopVariant stop = StopVariant::kBoth;

    std::string label() const;
};

/// Additive-angular-margin classification head over unit descriptors.
struct ArcFaceParams {
    Parameter class_weights;  // n_classes x C, rows are class directions
    double margin = 0.25;
    double scale = 30.0;

    static ArcFaceParams init(std::int64_t n_classes, std::int64_t dim, double margin, double scale,
                              Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

struct ModelConfig {
    BackboneConfig backbone;
    LocalBranchConfig local;
    FusionConfig fusion;
    std::int64_t n_classes = 8;
    double arcface_margin = 0.25;
    double arcface_scale = 30.0;

    std::int64_t descriptor_dim() const { return backbone.out_dim(); }
    std::int64_t image_size() const { return backbone.image_size; }
    void validate() const;

    /// Full-size configuration: Swin-T shaped backbone, 7x7 local windows
    /// with stride 3, 768-wide descriptor, 2 fusion stages of 12 heads.
    static ModelConfig paper_preset(std::int64_t n_classes = 8);
    /// Desk-scale configuration for 32x32 inputs (128-wide descriptor).
    static ModelConfig toy_preset(std::int64_t n_classes = 8);
    /// Minimal configuration for 16x16 inputs; used for exhaustive gradient
    /// checks and the ablation matrix where runtime dominates.
    static ModelConfig micro_preset(std::int64_t n_classes = 4);
};

/// Local branch geometry after the attention variant is applied: the o-win
/// and n-win variants differ only in the stride field; msa widens the window
/// to the whole mid-level map; no-winmsa empties the block stack.
LocalBranchConfig resolve_local_config(const ModelConfig& cfg, const VariantConfig& variants);

class DalgModel {
public:
    DalgModel(const ModelConfig& cfg, const VariantConfig& variants, std::uint64_t seed);

    struct Outputs {
        Value f2;                        // backbone mid-level map
        Value f_g;                       // pooled global feature
        Value f;                         // final unit descriptor
        std::optional<LocalOutput> local;
    };

    Outputs forward(Graph& g, Value images);
    /// Inference-only path; returns the descriptor f.
    Value descriptor(Graph& g, Value images);

    std::vector<Parameter*> parameters();
    void zero_grad();

    const ModelConfig& config() const { return cfg_; }
    const VariantConfig& variants() const { return variants_; }
    /// Local branch geometry after applying the attention variant.
    const LocalBranchConfig& resolved_local() const { return resolved_local_; }
    std::int64_t images_seen() const { return images_seen_; }

    BackboneParams backbone_params;
    LocalBranchParams local_params;
    FusionParams fusion_params;
    std::optional<OrthogonalFusionParams> orth_params;
    ArcFaceParams arcface;

private:
    ModelConfig cfg_;
    VariantConfig variants_;
    LocalBranchConfig resolved_local_;
    std::int64_t images_seen_ = 0;
};

}  // namespace dalg
