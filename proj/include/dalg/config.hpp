// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "dalg/model.hpp"
#include "dalg/retrieval.hpp"
#include "dalg/train.hpp"

namespace dalg {

struct AblateSpec {
    std::vector<std::string> local{"full", "no-local", "no-winmsa", "no-spatial"};
    std::vector<std::string> attention{"msa", "n-win", "o-win"};
    std::vector<std::string> fusion{"cross", "add", "orthogonal"};
    std::vector<std::string> stop{"both", "ce-at-f2", "arcface-at-fl", "none"};
    std::int64_t steps = 1;
};

/// One fully-resolved run: model, variants, training recipe, dataset, split
/// and evaluation parameters. Parsed from a strict JSON document; unknown
/// keys are rejected before any computation starts.
struct RunConfig {
    std::string preset = "toy";  // toy | paper | explicit
    ModelConfig model;
    VariantConfig variants;
    TrainConfig train;
    SyntheticSpec dataset;
    std::int64_t gallery_per_class = 5;
    std::int64_t query_per_class = 3;
    std::int64_t eval_k = 100;
    std::vector<std::int64_t> mp_ks{5, 10};
    Protocol protocol = Protocol::kMedium;
    std::uint64_t seed = 42;
    AblateSpec ablate;

    void validate() const;

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_file(const std::string& path);

    /// Every field after preset expansion and variant resolution; embedded in
    /// run outputs for provenance.
    nlohmann::json resolved_json() const;
};

nlohmann::json eval_report_to_json(const EvalReport& report);

}  // namespace dalg
