// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "dtm/container.hpp"
#include "dtm/error.hpp"
#include "dtm/pipeline.hpp"
#include "test_util.hpp"

using namespace dtm;
using dtm_test::TempDir;
using nlohmann::json;

namespace {

// small substrate so each pipeline run stays well under a second
PipelineConfig tiny_config(uint64_t seed) {
    PipelineConfig cfg = make_default_config(seed);
    cfg.bias.samples_per_cluster = 150;
    cfg.bias.val_samples = 100;
    cfg.hidden_dim = 16;
    cfg.train.epochs = 2;
    cfg.pilot.passes_per_portion = 1;
    return cfg;
}

}  // namespace

TEST_CASE("vanilla mode trains one model and skips the merge stage") {
    TempDir dir;
    PipelineConfig cfg = tiny_config(9);
    cfg.mode = PipelineMode::vanilla;
    json report = run_pipeline(cfg, dir.path());

    CHECK(report["models"].contains("vanilla"));
    CHECK_FALSE(report["models"].contains("merged"));
    CHECK_FALSE(report["models"].contains("submodels"));
    CHECK_FALSE(report["models"].contains("ensemble"));
    CHECK(std::filesystem::exists(dir.file("vanilla.ct")));
    CHECK_FALSE(std::filesystem::exists(dir.file("merged.ct")));
    CHECK(report["format_version"] == kReportFormatVersion);
}

TEST_CASE("default dtm mode produces K sub-model entries plus merged, vanilla, ensemble") {
    TempDir dir;
    PipelineConfig cfg = tiny_config(10);
    json report = run_pipeline(cfg, dir.path());

    REQUIRE(report["models"].contains("submodels"));
    CHECK(report["models"]["submodels"].size() == static_cast<size_t>(cfg.k));
    CHECK(report["models"].contains("merged"));
    CHECK(report["models"].contains("vanilla"));
    CHECK(report["models"].contains("ensemble"));

    for (int j = 0; j < cfg.k; ++j) {
        CHECK(std::filesystem::exists(dir.file("sub_" + std::to_string(j) + ".ct")));
        CHECK(std::filesystem::exists(dir.file("eval_sub_" + std::to_string(j) + ".json")));
    }
    CHECK(std::filesystem::exists(dir.file("train.jsonl")));
    CHECK(std::filesystem::exists(dir.file("val.jsonl")));
    CHECK(std::filesystem::exists(dir.file("assignment.json")));
    CHECK(std::filesystem::exists(dir.file("init.ct")));
    CHECK(std::filesystem::exists(dir.file("merged.ct")));
    CHECK(std::filesystem::exists(dir.file("error_sets.json")));
    CHECK(std::filesystem::exists(dir.file("pilot_trace.json")));
    CHECK(std::filesystem::exists(dir.file("report.json")));

    // the resolved config is embedded for replayability
    CHECK(report["config"]["k"] == cfg.k);
    CHECK(report["config"]["bias"]["samples_per_cluster"] == 150);

    // error analysis invariants
    double venn_total = 0.0;
    for (const auto& [sig, frac] : report["error_analysis"]["venn_fractions"].items()) {
        venn_total += frac.get<double>();
    }
    CHECK(venn_total == doctest::Approx(1.0).epsilon(1e-9));
    size_t bucket_total = 0;
    for (const auto& b : report["error_analysis"]["buckets"]) {
        bucket_total += b["count"].get<size_t>();
    }
    CHECK(bucket_total == static_cast<size_t>(cfg.bias.val_samples));
}

TEST_CASE("k=1 dtm merge equals its single sub-model") {
    TempDir dir;
    PipelineConfig cfg = tiny_config(11);
    cfg.k = 1;
    cfg.pilot.enabled = false;
    json report = run_pipeline(cfg, dir.path());
    const double merged = report["models"]["merged"]["val_accuracy"].get<double>();
    const double sub = report["models"]["submodels"][0]["val_accuracy"].get<double>();
    CHECK(merged == doctest::Approx(sub).epsilon(1e-9));
}

TEST_CASE("uniform soup trains hyperparameter variants on the full corpus") {
    TempDir dir;
    PipelineConfig cfg = tiny_config(12);
    cfg.mode = PipelineMode::uniform_soup;
    cfg.pilot.enabled = false;
    json report = run_pipeline(cfg, dir.path());
    CHECK(report["models"]["submodels"].size() == static_cast<size_t>(cfg.k));
    CHECK(report["models"].contains("merged"));
    CHECK_FALSE(std::filesystem::exists(dir.file("assignment.json")));
}

TEST_CASE("pipeline runs are deterministic apart from the timing section") {
    TempDir a, b;
    PipelineConfig cfg = tiny_config(13);
    json ra = run_pipeline(cfg, a.path());
    json rb = run_pipeline(cfg, b.path());
    ra.erase("timing");
    rb.erase("timing");
    CHECK(ra == rb);
}

TEST_CASE("config json round trip preserves overrides and derives seeds") {
    json obj = {
        {"seed", 123},
        {"k", 3},
        {"mode", "dtm"},
        {"dispersal", {{"method", "kmeans"}, {"tol", 1e-5}}},
        {"model", {{"layout", "linear"}}},
        {"bias", {{"classes", 5}, {"noise", 0.25}}},
        {"train", {{"learning_rate", 0.5}, {"optimizer", "momentum"}}},
        {"merge", {{"method", "ties"}, {"density", 0.3}}},
        {"pilot", {{"portions", 8}}},
        {"sweep", {2, 3}},
    };
    PipelineConfig cfg = config_from_json(obj);
    CHECK(cfg.seed == 123);
    CHECK(cfg.k == 3);
    CHECK(cfg.dispersal == DispersalMethod::kmeans);
    CHECK(cfg.kmeans_tol == 1e-5);
    CHECK(cfg.layout == ModelLayout::linear);
    CHECK(cfg.bias.num_classes == 5);
    CHECK(cfg.bias.noise == 0.25);
    CHECK(cfg.train.learning_rate == 0.5);
    CHECK(cfg.train.optimizer == Optimizer::momentum);
    CHECK(cfg.recipe.method == MergeMethod::ties);
    CHECK(cfg.recipe.density == 0.3);
    CHECK(cfg.pilot.portions == 8);
    CHECK(cfg.sweep == std::vector<int>{2, 3});

    // stage seeds are derived from the master seed, distinct from each other
    CHECK(cfg.bias.seed != cfg.train.seed);
    CHECK(cfg.bias.seed != cfg.dispersal_seed);
    CHECK(config_from_json(config_to_json(cfg)).bias.seed == cfg.bias.seed);

    // explicit stage seeds win over derivation
    json with_seed = obj;
    with_seed["bias"]["seed"] = 777;
    CHECK(config_from_json(with_seed).bias.seed == 777);
}

TEST_CASE("sweep emits one row per k and is deterministic") {
    TempDir a, b;
    PipelineConfig cfg = tiny_config(14);
    cfg.sweep = {2, 3};
    cfg.pilot.enabled = false;
    json ra = run_sweep(cfg, a.path());
    REQUIRE(ra["rows"].size() == 2);
    CHECK(ra["rows"][0]["k"] == 2);
    CHECK(ra["rows"][1]["k"] == 3);
    for (const auto& row : ra["rows"]) {
        CHECK(row["status"] == "ok");
        CHECK(row.contains("merged_accuracy"));
    }
    json rb = run_sweep(cfg, b.path());
    CHECK(ra == rb);

    PipelineConfig bad = cfg;
    bad.sweep = {1};
    CHECK_THROWS_AS(run_sweep(bad, a.path()), ValidationError);
    bad.sweep.clear();
    CHECK_THROWS_AS(run_sweep(bad, a.path()), ValidationError);
}

TEST_CASE("sweep single entry") {
    TempDir dir;
    PipelineConfig cfg = tiny_config(15);
    cfg.sweep = {2};
    cfg.pilot.enabled = false;
    json report = run_sweep(cfg, dir.path());
    CHECK(report["rows"].size() == 1);
    CHECK(std::filesystem::exists(dir.file("sweep_report.json")));
    CHECK(std::filesystem::exists(dir.path() / "k_2" / "report.json"));
}

TEST_CASE("stage failures carry the stage name") {
    TempDir dir;
    PipelineConfig cfg = tiny_config(16);
    cfg.bias.bias_strength = 2.0;  // invalid, fails in the generate stage
    try {
        run_pipeline(cfg, dir.path());
        FAIL("expected Error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("stage 'generate'") != std::string::npos);
    }
}
