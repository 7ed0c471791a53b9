// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dalg/model.hpp"

namespace dalg {

/// ArcFace logits: cos angles between the unit descriptor and unit class
/// directions, with the margin added to the target-class angle. For
/// theta + margin > pi the linearized fallback cos(theta) - m*sin(m) keeps
/// logits monotone. margin == 0 reduces exactly to scale * cos(theta).
Value arcface_logits(Value f, const std::vector<std::int64_t>& labels, ArcFaceParams& p);

/// Stable log-sum-exp cross entropy, averaged over the batch rows.
Value softmax_cross_entropy(Value logits, const std::vector<std::int64_t>& labels);

struct DalgLoss {
    Value global_loss;
    Value local_loss;  // zero constant when the local branch is disabled
    Value total;
};

/// Global ArcFace loss on the descriptor plus the auxiliary local CE loss.
/// Gradient detachment is already wired inside the model forward per its
/// stop-gradient variant; forward loss values are identical across variants.
DalgLoss dalg_loss(DalgModel& model, const DalgModel::Outputs& out,
                   const std::vector<std::int64_t>& labels, double local_weight = 1.0);

}  // namespace dalg
