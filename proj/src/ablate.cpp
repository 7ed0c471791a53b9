// SPDX-License-Identifier: Apache-2.0

#include "dalg/ablate.hpp"

namespace dalg {

using nlohmann::json;

std::vector<AblateRow> run_ablation(const RunConfig& base) {
    base.validate();
    std::vector<AblateRow> rows;
    for (const auto& ls : base.ablate.local) {
        for (const auto& as : base.ablate.attention) {
            for (const auto& fs : base.ablate.fusion) {
                for (const auto& ss : base.ablate.stop) {
                    AblateRow row;
                    row.variants.local = local_variant_from(ls);
                    row.variants.attention = attention_variant_from(as);
                    row.variants.fusion = fusion_variant_from(fs);
                    row.variants.stop = stop_variant_from(ss);
                    row.label = row.variants.label();
                    row.resolved_local = resolve_local_config(base.model, row.variants);
                    try {
                        DalgModel model(base.model, row.variants, base.seed);
                        DatasetSplits splits =
                            split_synthetic(base.dataset, base.gallery_per_class, base.query_per_class);
                        TrainConfig tc = base.train;
                        tc.total_steps = base.ablate.steps;
                        tc.warmup_steps = 0;
                        TrainResult r = train_model(model, base.dataset, splits, tc);
                        row.map = r.final_map;

                        // loss values of the shared-seed model after training
                        Graph g;
                        std::vector<Sample> probe(splits.train.begin(),
                                                  splits.train.begin() +
                                                      std::min<std::size_t>(splits.train.size(),
                                                                            static_cast<std::size_t>(
                                                                                tc.batch_size)));
                        std::vector<std::int64_t> labels;
                        for (const auto& s : probe) labels.push_back(s.label);
                        auto out = model.forward(g, g.constant(synthetic_batch(base.dataset, probe)));
                        DalgLoss loss = dalg_loss(model, out, labels, tc.local_loss_weight);
                        row.global_loss = loss.global_loss.scalar();
                        row.local_loss = loss.local_loss.scalar();
                        row.ok = true;
                    } catch (const std::exception& e) {
                        row.ok = false;
                        row.error = e.what();
                    }
                    rows.push_back(std::move(row));
                }
            }
        }
    }
    return rows;
}

json ablation_report(const RunConfig& base, const std::vector<AblateRow>& rows) {
    json report;
    report["config"] = base.resolved_json();
    json out_rows = json::array();
    for (const auto& r : rows) {
        json row;
        row["label"] = r.label;
        row["variants"] = {{"local", to_string(r.variants.local)},
                           {"attention", to_string(r.variants.attention)},
                           {"fusion", to_string(r.variants.fusion)},
                           {"stop_grad", to_string(r.variants.stop)}};
        row["resolved_local"] = {{"window", r.resolved_local.window},
                                 {"stride", r.resolved_local.stride},
                                 {"blocks", r.resolved_local.n_blocks},
                                 {"heads", r.resolved_local.n_heads},
                                 {"ffn_hidden", r.resolved_local.ffn_hidden},
                                 {"in_dim", r.resolved_local.in_dim},
                                 {"out_dim", r.resolved_local.out_dim}};
        row["ok"] = r.ok;
        if (r.ok) {
            row["global_loss"] = r.global_loss;
            row["local_loss"] = r.local_loss;
            row["map"] = r.map;
        } else {
            row["error"] = r.error;
        }
        if (r.variants.fusion == FusionVariant::kOrthogonal) {
            row["note"] = "orthogonal fusion is a handcrafted reconstruction used as an ablation baseline";
        }
        out_rows.push_back(std::move(row));
    }
    report["rows"] = out_rows;
    return report;
}

}  // namespace dalg
