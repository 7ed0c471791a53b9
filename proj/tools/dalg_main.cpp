// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: train, extract, index, search, eval, ablate and
// viz-attn subcommands over JSON run configurations.
// Exit codes: 0 success, 1 usage/schema error, 2 runtime error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "dalg/ablate.hpp"
#include "dalg/config.hpp"
#include "dalg/image_io.hpp"
#include "dalg/param.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dalg;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = RunConfig::from_file(args.config_path);
    if (args.seed) {
        cfg.seed = *args.seed;
        cfg.train.seed = *args.seed;
    }
    return cfg;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw SchemaError(path + " is not valid JSON: " + std::string(e.what()));
    }
    return j;
}

const std::vector<Sample>& pick_split(const DatasetSplits& splits, const std::string& name) {
    if (name == "train") return splits.train;
    if (name == "gallery") return splits.gallery;
    if (name == "query") return splits.query;
    throw SchemaError("unknown split '" + name + "' (expected train | gallery | query)");
}

Descriptors descriptors_from_index(const GalleryIndex& idx) {
    Descriptors d;
    d.ids = idx.ids();
    d.rows = Tensor(Shape{idx.size(), idx.dim()});
    for (std::int64_t i = 0; i < idx.size(); ++i) {
        for (std::int64_t c = 0; c < idx.dim(); ++c) {
            d.rows[i * idx.dim() + c] = static_cast<double>(idx.row(i)[c]);
        }
    }
    return d;
}

GroundTruth parse_ground_truth(const json& j) {
    GroundTruth gt;
    if (!j.is_object()) throw SchemaError("ground truth must map query ids to objects");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const json& entry = it.value();
        QueryGt q;
        const bool flat = entry.contains("positive");
        if (flat && (entry.contains("easy") || entry.contains("hard"))) {
            throw SchemaError("ground truth for " + it.key() + " mixes flat and protocol forms");
        }
        for (auto field = entry.begin(); field != entry.end(); ++field) {
            const std::string& k = field.key();
            if (k != "easy" && k != "hard" && k != "junk" && k != "positive") {
                throw SchemaError("unknown ground-truth field '" + k + "' for " + it.key());
            }
            if (!field.value().is_array()) {
                throw SchemaError("ground-truth field '" + k + "' for " + it.key() + " must be an array");
            }
            for (const auto& id : field.value()) {
                const std::string s = id.get<std::string>();
                if (k == "easy" || k == "positive") {
                    q.easy.push_back(s);
                } else if (k == "hard") {
                    q.hard.push_back(s);
                } else {
                    q.junk.push_back(s);
                }
            }
        }
        gt[it.key()] = std::move(q);
    }
    return gt;
}

std::map<std::string, std::int64_t> parse_labels(const std::string& path) {
    json j = read_json(path);
    std::map<std::string, std::int64_t> out;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!it.value().is_number_integer()) {
            throw SchemaError("label for " + it.key() + " must be an integer");
        }
        out[it.key()] = it.value().get<std::int64_t>();
    }
    return out;
}

Tensor load_viz_image(const RunConfig& cfg, const std::string& spec) {
    if (spec.rfind("synthetic:", 0) == 0) {
        const std::string rest = spec.substr(10);
        const auto comma = rest.find(',');
        if (comma == std::string::npos) {
            throw SchemaError("synthetic image spec must be synthetic:CLASS,INDEX");
        }
        const std::int64_t cls = std::stoll(rest.substr(0, comma));
        const std::int64_t idx = std::stoll(rest.substr(comma + 1));
        return synthetic_image(cfg.dataset, cls, idx);
    }
    Tensor img = read_ppm(spec);
    if (img.extent(0) != cfg.model.backbone.image_size || img.extent(1) != cfg.model.backbone.image_size) {
        throw Error("image " + spec + " is " + shape_str(img.shape()) + ", model expects " +
                    std::to_string(cfg.model.backbone.image_size) + "x" +
                    std::to_string(cfg.model.backbone.image_size));
    }
    return img;
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    fs::create_directories(args.out);
    DalgModel model(cfg.model, cfg.variants, cfg.seed);
    DatasetSplits splits = split_synthetic(cfg.dataset, cfg.gallery_per_class, cfg.query_per_class);

    std::ofstream log(fs::path(args.out) / "train_log.ndjson");
    if (!log) throw IoError("cannot open training log in " + args.out);
    log << json({{"config", cfg.resolved_json()}}).dump() << "\n";
    TrainResult result = train_model(model, cfg.dataset, splits, cfg.train, &log);

    save_checkpoint(model.parameters(), (fs::path(args.out) / "checkpoint.dalg").string());
    json summary;
    summary["config"] = cfg.resolved_json();
    summary["initial_total_loss"] = result.initial_total_loss;
    summary["final_total_loss"] = result.final_total_loss;
    summary["train_accuracy"] = result.train_accuracy;
    summary["final_map"] = result.final_map;
    summary["steps_run"] = result.steps_run;
    write_json((fs::path(args.out) / "summary.json").string(), summary);
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_extract(const CommonArgs& args, const std::string& checkpoint, const std::string& split) {
    RunConfig cfg = load_config(args);
    DalgModel model(cfg.model, cfg.variants, cfg.seed);
    load_checkpoint(model.parameters(), checkpoint);
    DatasetSplits splits = split_synthetic(cfg.dataset, cfg.gallery_per_class, cfg.query_per_class);
    Descriptors d = extract_descriptors(model, cfg.dataset, pick_split(splits, split), cfg.train.batch_size);
    GalleryIndex::build(d).save(args.out);
    std::cout << json({{"descriptors", d.count()}, {"dim", d.dim()}, {"out", args.out}}).dump() << "\n";
    return 0;
}

int cmd_index(const std::string& descriptors, const std::string& out) {
    GalleryIndex idx = GalleryIndex::load(descriptors);
    idx.save(out);
    std::cout << json({{"indexed", idx.size()}, {"dim", idx.dim()}, {"out", out}}).dump() << "\n";
    return 0;
}

int cmd_search(const std::string& index_path, const std::string& queries_path, std::int64_t k,
               const std::string& out) {
    GalleryIndex index = GalleryIndex::load(index_path);
    GalleryIndex queries = GalleryIndex::load(queries_path);
    json results = json::array();
    for (std::int64_t qi = 0; qi < queries.size(); ++qi) {
        std::vector<double> q = queries.row_as_double(qi);
        std::vector<SearchHit> hits = search(index, q.data(), k);
        json row;
        row["query"] = queries.ids()[static_cast<std::size_t>(qi)];
        json hj = json::array();
        for (const auto& h : hits) hj.push_back({{"id", h.id}, {"score", h.score}});
        row["hits"] = hj;
        results.push_back(std::move(row));
    }
    if (!out.empty()) {
        write_json(out, results);
    } else {
        std::cout << results.dump(2) << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& index_path, const std::string& queries_path, const std::string& gt_path,
             const std::string& protocol, std::int64_t k, const std::vector<std::int64_t>& mp_ks,
             const std::string& query_labels_path, const std::string& gallery_labels_path,
             const std::string& out) {
    GalleryIndex index = GalleryIndex::load(index_path);
    Descriptors queries = descriptors_from_index(GalleryIndex::load(queries_path));
    GroundTruth gt = parse_ground_truth(read_json(gt_path));
    std::optional<std::map<std::string, std::int64_t>> qlabels, glabels;
    if (!query_labels_path.empty()) qlabels = parse_labels(query_labels_path);
    if (!gallery_labels_path.empty()) glabels = parse_labels(gallery_labels_path);
    EvalReport report = evaluate(index, queries, gt, protocol_from(protocol), k, mp_ks,
                                 qlabels ? &*qlabels : nullptr, glabels ? &*glabels : nullptr);
    json j = eval_report_to_json(report);
    j["invocation"] = {{"index", index_path},
                       {"queries", queries_path},
                       {"gt", gt_path},
                       {"protocol", protocol},
                       {"k", k}};
    if (!out.empty()) {
        write_json(out, j);
    } else {
        std::cout << j.dump(2) << "\n";
    }
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    std::vector<AblateRow> rows = run_ablation(cfg);
    json report = ablation_report(cfg, rows);
    write_json(args.out, report);
    std::int64_t failures = 0;
    for (const auto& r : rows) {
        if (!r.ok) ++failures;
    }
    std::cout << json({{"rows", rows.size()}, {"failures", failures}, {"out", args.out}}).dump() << "\n";
    return failures == 0 ? 0 : 2;
}

int cmd_viz_attn(const CommonArgs& args, const std::string& checkpoint, const std::string& image_spec) {
    RunConfig cfg = load_config(args);
    if (cfg.variants.local == LocalVariant::kNoLocal) {
        throw Error("viz-attn requires a model with the local branch enabled");
    }
    DalgModel model(cfg.model, cfg.variants, cfg.seed);
    load_checkpoint(model.parameters(), checkpoint);
    Tensor img = load_viz_image(cfg, image_spec);
    Tensor batch(Shape{1, img.extent(0), img.extent(1), 3}, img.vec());
    Graph g;
    auto out = model.forward(g, g.constant(batch));
    const Tensor& s_a = out.local->s_a.tensor();
    Tensor map(Shape{s_a.extent(1), s_a.extent(2)});
    for (std::int64_t i = 0; i < map.size(); ++i) map[i] = s_a[i];
    write_pgm(args.out, map);
    std::cout << json({{"out", args.out}, {"height", map.extent(0)}, {"width", map.extent(1)}}).dump()
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DALG image retrieval: training, extraction, search and evaluation"};
    app.require_subcommand(1);

    CommonArgs common;

    auto* train = app.add_subcommand("train", "Train a model on the synthetic dataset");
    train->add_option("--config", common.config_path, "Run configuration (JSON)")->required();
    train->add_option("--seed", common.seed, "Override the config seed");
    train->add_option("--out", common.out, "Output directory")->required();

    auto* extract = app.add_subcommand("extract", "Extract descriptors for a dataset split");
    std::string checkpoint, split = "gallery";
    extract->add_option("--config", common.config_path, "Run configuration (JSON)")->required();
    extract->add_option("--seed", common.seed, "Override the config seed");
    extract->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    extract->add_option("--split", split, "Dataset split: train | gallery | query");
    extract->add_option("--out", common.out, "Output descriptor file")->required();

    auto* index_cmd = app.add_subcommand("index", "Validate descriptors and write a gallery index");
    std::string descriptors_path, index_out;
    index_cmd->add_option("--descriptors", descriptors_path, "Descriptor file")->required();
    index_cmd->add_option("--out", index_out, "Output index file")->required();

    auto* search_cmd = app.add_subcommand("search", "Exact cosine top-k search");
    std::string index_path, queries_path, search_out;
    std::int64_t k = 5;
    search_cmd->add_option("--index", index_path, "Gallery index")->required();
    search_cmd->add_option("--queries", queries_path, "Query descriptor file")->required();
    search_cmd->add_option("--k", k, "Results per query");
    search_cmd->add_option("--out", search_out, "Output file (stdout when omitted)");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a ranking against ground truth");
    std::string gt_path, protocol = "medium", qlabels_path, glabels_path, eval_out;
    std::int64_t eval_k = 100;
    std::vector<std::int64_t> mp_ks{5, 10};
    eval_cmd->add_option("--index", index_path, "Gallery index")->required();
    eval_cmd->add_option("--queries", queries_path, "Query descriptor file")->required();
    eval_cmd->add_option("--gt", gt_path, "Ground-truth JSON")->required();
    eval_cmd->add_option("--protocol", protocol, "medium | hard");
    eval_cmd->add_option("--k", eval_k, "Ranking depth for mAP");
    eval_cmd->add_option("--mp-ks", mp_ks, "Depths for mP@K");
    eval_cmd->add_option("--query-labels", qlabels_path, "Query label JSON (enables GAP)");
    eval_cmd->add_option("--gallery-labels", glabels_path, "Gallery label JSON (enables GAP)");
    eval_cmd->add_option("--out", eval_out, "Output file (stdout when omitted)");

    auto* ablate_cmd = app.add_subcommand("ablate", "Run the variant ablation matrix");
    ablate_cmd->add_option("--config", common.config_path, "Run configuration (JSON)")->required();
    ablate_cmd->add_option("--seed", common.seed, "Override the config seed");
    ablate_cmd->add_option("--out", common.out, "Output report file")->required();

    auto* viz_cmd = app.add_subcommand("viz-attn", "Export the spatial attention map as PGM");
    std::string viz_image;
    viz_cmd->add_option("--config", common.config_path, "Run configuration (JSON)")->required();
    viz_cmd->add_option("--seed", common.seed, "Override the config seed");
    viz_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    viz_cmd->add_option("--image", viz_image, "synthetic:CLASS,INDEX or a P6 PPM path")->required();
    viz_cmd->add_option("--out", common.out, "Output PGM path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (train->parsed()) return cmd_train(common);
        if (extract->parsed()) return cmd_extract(common, checkpoint, split);
        if (index_cmd->parsed()) return cmd_index(descriptors_path, index_out);
        if (search_cmd->parsed()) return cmd_search(index_path, queries_path, k, search_out);
        if (eval_cmd->parsed()) {
            return cmd_eval(index_path, queries_path, gt_path, protocol, eval_k, mp_ks, qlabels_path,
                            glabels_path, eval_out);
        }
        if (ablate_cmd->parsed()) return cmd_ablate(common);
        if (viz_cmd->parsed()) return cmd_viz_attn(common, checkpoint, viz_image);
    } catch (const SchemaError& e) {
        std::cerr << "schema error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
