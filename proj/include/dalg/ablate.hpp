// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dalg/config.hpp"

namespace dalg {

struct AblateRow {
    VariantConfig variants;
    std::string label;
    LocalBranchConfig resolved_local;
    double global_loss = 0.0;
    double local_loss = 0.0;
    double map = 0.0;
    bool ok = false;
    std::string error;
};

/// Trains and evaluates every variant combination of the config's ablation
/// matrix with a shared seed; rows are keyed by variant labels.
std::vector<AblateRow> run_ablation(const RunConfig& base);

nlohmann::json ablation_report(const RunConfig& base, const std::vector<AblateRow>& rows);

}  // namespace dalg
