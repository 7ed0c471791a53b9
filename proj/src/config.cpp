// SPDX-License-Identifier: Apache-2.0

#include "dalg/config.hpp"

#include <fstream>
#include <set>

namespace dalg {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw SchemaError(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw SchemaError("unknown key '" + it.key() + "' in " + where);
        }
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw SchemaError("bad value for '" + std::string(key) + "' in " + where);
    }
}

template <typename T, std::size_t N>
std::array<T, N> get_array(const json& j, const char* key, std::array<T, N> fallback,
                           const std::string& where) {
    if (!j.contains(key)) return fallback;
    const json& a = j.at(key);
    if (!a.is_array() || a.size() != N) {
        throw SchemaError("'" + std::string(key) + "' in " + where + " must be an array of " +
                          std::to_string(N));
    }
    std::array<T, N> out{};
    for (std::size_t i = 0; i < N; ++i) {
        try {
            out[i] = a[i].get<T>();
        } catch (const json::exception&) {
            throw SchemaError("bad element in '" + std::string(key) + "' of " + where);
        }
    }
    return out;
}

ModelConfig preset_model(const std::string& preset, std::int64_t n_classes) {
    if (preset == "toy") return ModelConfig::toy_preset(n_classes);
    if (preset == "paper") return ModelConfig::paper_preset(n_classes);
    if (preset == "explicit") return ModelConfig::toy_preset(n_classes);  // base; overridden below
    throw SchemaError("unknown preset '" + preset + "' (expected toy | paper | explicit)");
}

void apply_model_overrides(ModelConfig& m, const json& j) {
    check_keys(j, "$.model", {"backbone", "local", "fusion", "arcface"});
    if (j.contains("backbone")) {
        const json& b = j.at("backbone");
        check_keys(b, "$.model.backbone",
                   {"image_size", "patch_size", "depths", "dims", "heads", "window", "ffn_ratio"});
        m.backbone.image_size = get_or<std::int64_t>(b, "image_size", m.backbone.image_size, "$.model.backbone");
        m.backbone.patch_size = get_or<std::int64_t>(b, "patch_size", m.backbone.patch_size, "$.model.backbone");
        m.backbone.depths = get_array<int, 4>(b, "depths", m.backbone.depths, "$.model.backbone");
        m.backbone.dims = get_array<std::int64_t, 4>(b, "dims", m.backbone.dims, "$.model.backbone");
        m.backbone.heads = get_array<int, 4>(b, "heads", m.backbone.heads, "$.model.backbone");
        m.backbone.window = get_or<std::int64_t>(b, "window", m.backbone.window, "$.model.backbone");
        m.backbone.ffn_ratio = get_or<std::int64_t>(b, "ffn_ratio", m.backbone.ffn_ratio, "$.model.backbone");
    }
    if (j.contains("local")) {
        const json& l = j.at("local");
        check_keys(l, "$.model.local", {"window", "stride", "blocks", "heads", "ffn_hidden"});
        m.local.window = get_or<std::int64_t>(l, "window", m.local.window, "$.model.local");
        m.local.stride = get_or<std::int64_t>(l, "stride", m.local.stride, "$.model.local");
        m.local.n_blocks = get_or<int>(l, "blocks", m.local.n_blocks, "$.model.local");
        m.local.n_heads = get_or<int>(l, "heads", m.local.n_heads, "$.model.local");
        m.local.ffn_hidden = get_or<std::int64_t>(l, "ffn_hidden", m.local.ffn_hidden, "$.model.local");
    }
    if (j.contains("fusion")) {
        const json& f = j.at("fusion");
        check_keys(f, "$.model.fusion",
                   {"stages", "heads", "ffn_hidden", "pre_norm", "normalize_output"});
        m.fusion.stages = get_or<int>(f, "stages", m.fusion.stages, "$.model.fusion");
        m.fusion.n_heads = get_or<int>(f, "heads", m.fusion.n_heads, "$.model.fusion");
        m.fusion.ffn_hidden = get_or<std::int64_t>(f, "ffn_hidden", m.fusion.ffn_hidden, "$.model.fusion");
        m.fusion.pre_norm = get_or<bool>(f, "pre_norm", m.fusion.pre_norm, "$.model.fusion");
        m.fusion.normalize_output =
            get_or<bool>(f, "normalize_output", m.fusion.normalize_output, "$.model.fusion");
    }
    if (j.contains("arcface")) {
        const json& a = j.at("arcface");
        check_keys(a, "$.model.arcface", {"margin", "scale"});
        m.arcface_margin = get_or<double>(a, "margin", m.arcface_margin, "$.model.arcface");
        m.arcface_scale = get_or<double>(a, "scale", m.arcface_scale, "$.model.arcface");
    }
    // widths derive from the backbone dims, never set directly
    m.local.in_dim = m.backbone.f2_dim();
    m.local.out_dim = m.backbone.out_dim();
    m.fusion.dim = m.backbone.out_dim();
}

std::vector<std::string> get_string_list(const json& j, const char* key,
                                         std::vector<std::string> fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const json& a = j.at(key);
    if (!a.is_array() || a.empty()) {
        throw SchemaError("'" + std::string(key) + "' in " + where + " must be a nonempty array");
    }
    std::vector<std::string> out;
    for (const auto& e : a) {
        if (!e.is_string()) throw SchemaError("non-string entry in '" + std::string(key) + "' of " + where);
        out.push_back(e.get<std::string>());
    }
    return out;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    dataset.validate();
    resolve_local_config(model, variants).validate();
    if (dataset.image_size != model.backbone.image_size) {
        throw SchemaError("dataset image size " + std::to_string(dataset.image_size) +
                          " does not match the model image size " +
                          std::to_string(model.backbone.image_size));
    }
    if (dataset.n_classes != model.n_classes) {
        throw SchemaError("dataset classes " + std::to_string(dataset.n_classes) +
                          " do not match the model head " + std::to_string(model.n_classes));
    }
    if (gallery_per_class < 0 || query_per_class < 0 ||
        gallery_per_class + query_per_class >= dataset.images_per_class) {
        throw SchemaError("split leaves no training images");
    }
    if (eval_k < 1) throw SchemaError("eval k must be >= 1");
    for (auto k : mp_ks) {
        if (k < 1) throw SchemaError("mp_ks entries must be >= 1");
    }
    if (ablate.steps < 1) throw SchemaError("ablate steps must be >= 1");
    for (const auto& s : ablate.local) (void)local_variant_from(s);
    for (const auto& s : ablate.attention) (void)attention_variant_from(s);
    for (const auto& s : ablate.fusion) (void)fusion_variant_from(s);
    for (const auto& s : ablate.stop) (void)stop_variant_from(s);
}

RunConfig RunConfig::from_json(const json& j) {
    check_keys(j, "$",
               {"preset", "model", "variants", "train", "dataset", "split", "eval", "ablate", "seed"});
    RunConfig cfg;
    cfg.preset = get_or<std::string>(j, "preset", "toy", "$");
    cfg.seed = get_or<std::uint64_t>(j, "seed", 42, "$");

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_keys(d, "$.dataset",
                   {"classes", "images_per_class", "image_size", "noise_std", "max_translation", "seed"});
        cfg.dataset.n_classes = get_or<std::int64_t>(d, "classes", cfg.dataset.n_classes, "$.dataset");
        cfg.dataset.images_per_class =
            get_or<std::int64_t>(d, "images_per_class", cfg.dataset.images_per_class, "$.dataset");
        cfg.dataset.image_size = get_or<std::int64_t>(d, "image_size", cfg.dataset.image_size, "$.dataset");
        cfg.dataset.noise_std = get_or<double>(d, "noise_std", cfg.dataset.noise_std, "$.dataset");
        cfg.dataset.max_translation =
            get_or<std::int64_t>(d, "max_translation", cfg.dataset.max_translation, "$.dataset");
        cfg.dataset.seed = get_or<std::uint64_t>(d, "seed", cfg.dataset.seed, "$.dataset");
    }

    cfg.model = preset_model(cfg.preset, cfg.dataset.n_classes);
    if (j.contains("model")) {
        if (cfg.preset != "explicit") {
            throw SchemaError("'model' overrides require preset \"explicit\"");
        }
        apply_model_overrides(cfg.model, j.at("model"));
    }
    cfg.model.n_classes = cfg.dataset.n_classes;
    cfg.model.local.n_classes = cfg.dataset.n_classes;

    if (j.contains("variants")) {
        const json& v = j.at("variants");
        check_keys(v, "$.variants", {"local", "attention", "fusion", "stop_grad"});
        cfg.variants.local = local_variant_from(get_or<std::string>(v, "local", "full", "$.variants"));
        cfg.variants.attention =
            attention_variant_from(get_or<std::string>(v, "attention", "o-win", "$.variants"));
        cfg.variants.fusion = fusion_variant_from(get_or<std::string>(v, "fusion", "cross", "$.variants"));
        cfg.variants.stop = stop_variant_from(get_or<std::string>(v, "stop_grad", "both", "$.variants"));
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "$.train",
                   {"base_lr", "weight_decay", "batch_size", "total_steps", "warmup_steps",
                    "local_loss_weight", "map_k"});
        cfg.train.base_lr = get_or<double>(t, "base_lr", cfg.train.base_lr, "$.train");
        cfg.train.weight_decay = get_or<double>(t, "weight_decay", cfg.train.weight_decay, "$.train");
        cfg.train.batch_size = get_or<std::int64_t>(t, "batch_size", cfg.train.batch_size, "$.train");
        cfg.train.total_steps = get_or<std::int64_t>(t, "total_steps", cfg.train.total_steps, "$.train");
        cfg.train.warmup_steps = get_or<std::int64_t>(t, "warmup_steps", cfg.train.warmup_steps, "$.train");
        cfg.train.local_loss_weight =
            get_or<double>(t, "local_loss_weight", cfg.train.local_loss_weight, "$.train");
        cfg.train.map_k = get_or<std::int64_t>(t, "map_k", cfg.train.map_k, "$.train");
    }
    cfg.train.seed = cfg.seed;

    if (j.contains("split")) {
        const json& s = j.at("split");
        check_keys(s, "$.split", {"gallery_per_class", "query_per_class"});
        cfg.gallery_per_class = get_or<std::int64_t>(s, "gallery_per_class", cfg.gallery_per_class, "$.split");
        cfg.query_per_class = get_or<std::int64_t>(s, "query_per_class", cfg.query_per_class, "$.split");
    }

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        check_keys(e, "$.eval", {"k", "mp_ks", "protocol"});
        cfg.eval_k = get_or<std::int64_t>(e, "k", cfg.eval_k, "$.eval");
        if (e.contains("mp_ks")) {
            if (!e.at("mp_ks").is_array()) throw SchemaError("'mp_ks' in $.eval must be an array");
            cfg.mp_ks.clear();
            for (const auto& k : e.at("mp_ks")) {
                if (!k.is_number_integer()) throw SchemaError("'mp_ks' entries must be integers");
                cfg.mp_ks.push_back(k.get<std::int64_t>());
            }
        }
        cfg.protocol = protocol_from(get_or<std::string>(e, "protocol", "medium", "$.eval"));
    }

    if (j.contains("ablate")) {
        const json& a = j.at("ablate");
        check_keys(a, "$.ablate", {"local", "attention", "fusion", "stop_grad", "steps"});
        cfg.ablate.local = get_string_list(a, "local", cfg.ablate.local, "$.ablate");
        cfg.ablate.attention = get_string_list(a, "attention", cfg.ablate.attention, "$.ablate");
        cfg.ablate.fusion = get_string_list(a, "fusion", cfg.ablate.fusion, "$.ablate");
        cfg.ablate.stop = get_string_list(a, "stop_grad", cfg.ablate.stop, "$.ablate");
        cfg.ablate.steps = get_or<std::int64_t>(a, "steps", cfg.ablate.steps, "$.ablate");
    }

    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw SchemaError("config " + path + " is not valid JSON: " + std::string(e.what()));
    }
    return from_json(j);
}

json RunConfig::resolved_json() const {
    const LocalBranchConfig rl = resolve_local_config(model, variants);
    json j;
    j["preset"] = preset;
    j["seed"] = seed;
    j["model"] = {
        {"backbone",
         {{"image_size", model.backbone.image_size},
          {"patch_size", model.backbone.patch_size},
          {"depths", model.backbone.depths},
          {"dims", model.backbone.dims},
          {"heads", model.backbone.heads},
          {"window", model.backbone.window},
          {"ffn_ratio", model.backbone.ffn_ratio}}},
        {"local",
         {{"window", model.local.window},
          {"stride", model.local.stride},
          {"blocks", model.local.n_blocks},
          {"heads", model.local.n_heads},
          {"ffn_hidden", model.local.ffn_hidden},
          {"in_dim", model.local.in_dim},
          {"out_dim", model.local.out_dim}}},
        {"fusion",
         {{"stages", model.fusion.stages},
          {"heads", model.fusion.n_heads},
          {"dim", model.fusion.dim},
          {"ffn_hidden", model.fusion.ffn_hidden},
          {"pre_norm", model.fusion.pre_norm},
          {"normalize_output", model.fusion.normalize_output}}},
        {"arcface", {{"margin", model.arcface_margin}, {"scale", model.arcface_scale}}},
        {"classes", model.n_classes}};
    j["variants"] = {{"local", to_string(variants.local)},
                     {"attention", to_string(variants.attention)},
                     {"fusion", to_string(variants.fusion)},
                     {"stop_grad", to_string(variants.stop)}};
    j["resolved_local"] = {{"window", rl.window},
                           {"stride", rl.stride},
                           {"blocks", rl.n_blocks},
                           {"heads", rl.n_heads},
                           {"ffn_hidden", rl.ffn_hidden},
                           {"in_dim", rl.in_dim},
                           {"out_dim", rl.out_dim}};
    j["train"] = {{"base_lr", train.base_lr},
                  {"weight_decay", train.weight_decay},
                  {"batch_size", train.batch_size},
                  {"total_steps", train.total_steps},
                  {"warmup_steps", train.warmup_steps},
                  {"local_loss_weight", train.local_loss_weight},
                  {"map_k", train.map_k}};
    j["dataset"] = {{"classes", dataset.n_classes},
                    {"images_per_class", dataset.images_per_class},
                    {"image_size", dataset.image_size},
                    {"noise_std", dataset.noise_std},
                    {"max_translation", dataset.max_translation},
                    {"seed", dataset.seed}};
    j["split"] = {{"gallery_per_class", gallery_per_class}, {"query_per_class", query_per_class}};
    j["eval"] = {{"k", eval_k}, {"mp_ks", mp_ks}, {"protocol", to_string(protocol)}};
    return j;
}

json eval_report_to_json(const EvalReport& report) {
    json j;
    j["protocol"] = report.protocol;
    j["k"] = report.k;
    j["map"] = report.map;
    json mp = json::object();
    for (const auto& [k, v] : report.mp) mp[std::to_string(k)] = v;
    j["mp"] = mp;
    if (report.gap) j["gap"] = *report.gap;
    j["counted"] = report.counted;
    j["skipped"] = report.skipped;
    json per = json::array();
    for (const auto& q : report.per_query) {
        per.push_back({{"id", q.id}, {"ap", q.ap}, {"counted", q.counted}});
    }
    j["per_query"] = per;
    return j;
}

}  // namespace dalg
