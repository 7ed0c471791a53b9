// SPDX-License-Identifier: Apache-2.0
//
// End-to-end CLI checks: the pipeline round trip, schema rejection, exit
// codes, determinism of artifacts, and the PGM export.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

#include "dalg/image_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

#ifndef DALG_CLI_PATH
#error "DALG_CLI_PATH must point at the dalg binary"
#endif

const char* kCli = DALG_CLI_PATH;

struct RunResult {
    int code = -1;
    std::string output;
};

RunResult run(const std::string& args) {
    const std::string out_file = "/tmp/dalg_cli_out.txt";
    const std::string cmd = std::string(kCli) + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WEXITSTATUS(status);
    std::ifstream f(out_file);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path work_dir() {
    fs::path dir = "/tmp/dalg_cli_tests";
    fs::create_directories(dir);
    return dir;
}

void write_micro_config(const fs::path& path, int steps = 6) {
    json cfg = {
        {"preset", "explicit"},
        {"seed", 9},
        {"model",
         {{"backbone",
           {{"image_size", 16},
            {"patch_size", 1},
            {"depths", {1, 1, 1, 1}},
            {"dims", {8, 16, 32, 64}},
            {"heads", {1, 2, 4, 8}},
            {"window", 4}}},
          {"local", {{"window", 2}, {"stride", 1}, {"blocks", 1}, {"heads", 4}, {"ffn_hidden", 32}}},
          {"fusion", {{"stages", 2}, {"heads", 4}, {"ffn_hidden", 128}}}}},
        {"dataset",
         {{"classes", 3},
          {"images_per_class", 5},
          {"image_size", 16},
          {"noise_std", 0.03},
          {"max_translation", 1},
          {"seed", 4}}},
        {"train",
         {{"base_lr", 0.002}, {"batch_size", 6}, {"total_steps", steps}, {"warmup_steps", 1}, {"map_k", 2}}},
        {"split", {{"gallery_per_class", 2}, {"query_per_class", 1}}},
        {"eval", {{"k", 10}, {"mp_ks", {2}}, {"protocol", "medium"}}},
        {"ablate", {{"steps", 1}}}};
    std::ofstream os(path);
    os << cfg.dump(2);
}

}  // namespace

TEST_CASE("cli round trip: train, extract, index, search, eval, viz") {
    const fs::path dir = work_dir();
    write_micro_config(dir / "config.json");

    RunResult train = run("train --config " + (dir / "config.json").string() + " --out " +
                          (dir / "run").string());
    REQUIRE_MESSAGE(train.code == 0, train.output);
    CHECK(fs::exists(dir / "run" / "checkpoint.dalg"));
    CHECK(fs::exists(dir / "run" / "train_log.ndjson"));

    // log opens with the resolved config
    {
        std::ifstream log(dir / "run" / "train_log.ndjson");
        std::string first;
        std::getline(log, first);
        json j = json::parse(first);
        CHECK(j.contains("config"));
        CHECK(j["config"]["resolved_local"]["stride"] == 1);
    }

    RunResult gal = run("extract --config " + (dir / "config.json").string() + " --checkpoint " +
                        (dir / "run/checkpoint.dalg").string() + " --split gallery --out " +
                        (dir / "gallery.didx").string());
    REQUIRE_MESSAGE(gal.code == 0, gal.output);
    RunResult qry = run("extract --config " + (dir / "config.json").string() + " --checkpoint " +
                        (dir / "run/checkpoint.dalg").string() + " --split query --out " +
                        (dir / "query.didx").string());
    REQUIRE(qry.code == 0);

    RunResult idx = run("index --descriptors " + (dir / "gallery.didx").string() + " --out " +
                        (dir / "gallery.index").string());
    REQUIRE(idx.code == 0);

    // querying with a gallery descriptor returns its own id first
    RunResult self = run("search --index " + (dir / "gallery.index").string() + " --queries " +
                         (dir / "gallery.didx").string() + " --k 1 --out " + (dir / "self.json").string());
    REQUIRE(self.code == 0);
    json self_hits = json::parse(slurp(dir / "self.json"));
    for (const auto& row : self_hits) {
        CHECK(row["hits"][0]["id"] == row["query"]);
    }

    // hand-built ground truth: same-class gallery images are positives
    json gt = json::object();
    json qlabels = json::object(), glabels = json::object();
    for (int c = 0; c < 3; ++c) {
        const std::string qid = "c" + std::to_string(c) + "_i4";
        gt[qid] = {{"positive", {"c" + std::to_string(c) + "_i2", "c" + std::to_string(c) + "_i3"}},
                   {"junk", json::array()}};
        qlabels[qid] = c;
        glabels["c" + std::to_string(c) + "_i2"] = c;
        glabels["c" + std::to_string(c) + "_i3"] = c;
    }
    std::ofstream(dir / "gt.json") << gt.dump();
    std::ofstream(dir / "qlabels.json") << qlabels.dump();
    std::ofstream(dir / "glabels.json") << glabels.dump();

    RunResult ev = run("eval --index " + (dir / "gallery.index").string() + " --queries " +
                       (dir / "query.didx").string() + " --gt " + (dir / "gt.json").string() +
                       " --k 10 --query-labels " + (dir / "qlabels.json").string() +
                       " --gallery-labels " + (dir / "glabels.json").string() + " --out " +
                       (dir / "eval.json").string());
    REQUIRE_MESSAGE(ev.code == 0, ev.output);
    json report = json::parse(slurp(dir / "eval.json"));
    CHECK(report["counted"] == 3);
    CHECK(report["map"].get<double>() >= 0.0);
    CHECK(report["map"].get<double>() <= 1.0);
    CHECK(report.contains("gap"));

    RunResult viz = run("viz-attn --config " + (dir / "config.json").string() + " --checkpoint " +
                        (dir / "run/checkpoint.dalg").string() + " --image synthetic:1,0 --out " +
                        (dir / "sa.pgm").string());
    REQUIRE_MESSAGE(viz.code == 0, viz.output);
    dalg::PgmImage pgm = dalg::read_pgm((dir / "sa.pgm").string());
    CHECK(pgm.width == 2);   // f_l spatial extent of the 16px/1px-patch model
    CHECK(pgm.height == 2);
}

TEST_CASE("cli schema violations exit with code 1 before computing") {
    const fs::path dir = work_dir();
    std::ofstream(dir / "bad.json") << R"({"preset": "toy", "unknown_field": 3})";
    RunResult r = run("train --config " + (dir / "bad.json").string() + " --out " +
                      (dir / "never").string());
    CHECK(r.code == 1);
    CHECK(r.output.find("unknown_field") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "never"));

    std::ofstream(dir / "notjson.json") << "{nope";
    RunResult r2 = run("train --config " + (dir / "notjson.json").string() + " --out " +
                       (dir / "never2").string());
    CHECK(r2.code == 1);

    RunResult r3 = run("definitely-not-a-command");
    CHECK(r3.code == 1);
}

TEST_CASE("cli runtime failures exit with code 2") {
    const fs::path dir = work_dir();
    RunResult r = run("index --descriptors " + (dir / "missing.didx").string() + " --out " +
                      (dir / "whatever.didx").string());
    CHECK(r.code == 2);
}

TEST_CASE("training twice with the same seed produces identical checkpoints") {
    const fs::path dir = work_dir();
    write_micro_config(dir / "config_det.json", 4);
    RunResult a = run("train --config " + (dir / "config_det.json").string() + " --out " +
                      (dir / "det_a").string());
    RunResult b = run("train --config " + (dir / "config_det.json").string() + " --out " +
                      (dir / "det_b").string());
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(slurp(dir / "det_a/checkpoint.dalg") == slurp(dir / "det_b/checkpoint.dalg"));
    CHECK(slurp(dir / "det_a/summary.json") == slurp(dir / "det_b/summary.json"));
}

TEST_CASE("ablate produces one row per matrix entry") {
    const fs::path dir = work_dir();
    write_micro_config(dir / "config_ab.json", 2);
    // shrink the matrix for speed: 2 x 2 x 1 x 2 = 8 rows
    json cfg = json::parse(slurp(dir / "config_ab.json"));
    cfg["ablate"] = {{"local", {"full", "no-spatial"}},
                     {"attention", {"o-win", "n-win"}},
                     {"fusion", {"cross"}},
                     {"stop_grad", {"both", "none"}},
                     {"steps", 1}};
    std::ofstream(dir / "config_ab.json") << cfg.dump(2);

    RunResult r = run("ablate --config " + (dir / "config_ab.json").string() + " --out " +
                      (dir / "ablate.json").string());
    REQUIRE_MESSAGE(r.code == 0, r.output);
    json report = json::parse(slurp(dir / "ablate.json"));
    REQUIRE(report["rows"].size() == 8);
    for (const auto& row : report["rows"]) CHECK(row["ok"] == true);

    // o-win and n-win rows differ only in the stride of the resolved config
    json owin, nwin;
    for (const auto& row : report["rows"]) {
        if (row["label"] == "full/o-win/cross/both") owin = row["resolved_local"];
        if (row["label"] == "full/n-win/cross/both") nwin = row["resolved_local"];
    }
    REQUIRE_FALSE(owin.is_null());
    REQUIRE_FALSE(nwin.is_null());
    CHECK(owin["stride"] != nwin["stride"]);
    for (const auto& key : {"window", "blocks", "heads", "ffn_hidden", "in_dim", "out_dim"}) {
        CHECK(owin[key] == nwin[key]);
    }
}
