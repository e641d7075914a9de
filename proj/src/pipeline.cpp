// SPDX-License-Identifier: Apache-2.0

#include "dtm/pipeline.hpp"

#include <algorithm>
#include <cstdio>

#include "dtm/analysis.hpp"
#include "dtm/container.hpp"
#include "dtm/error.hpp"
#include "dtm/rng.hpp"

namespace dtm {

using nlohmann::json;

const char* pipeline_mode_name(PipelineMode m) {
    switch (m) {
        case PipelineMode::dtm: return "dtm";
        case PipelineMode::vanilla: return "vanilla";
        case PipelineMode::uniform_soup: return "uniform_soup";
    }
    return "dtm";
}

PipelineMode pipeline_mode_from_name(std::string_view name) {
    if (name == "dtm") return PipelineMode::dtm;
    if (name == "vanilla") return PipelineMode::vanilla;
    if (name == "uniform_soup") return PipelineMode::uniform_soup;
    throw ValidationError("unknown pipeline mode '" + std::string(name) + "'");
}

PipelineConfig make_default_config(uint64_t master_seed) {
    PipelineConfig cfg;
    cfg.seed = master_seed;
    cfg.dispersal_seed = derive_seed(master_seed, "dispersal");
    cfg.bias.seed = derive_seed(master_seed, "bias");
    cfg.train.seed = derive_seed(master_seed, "train");
    cfg.recipe.seed = derive_seed(master_seed, "merge");
    return cfg;
}

PipelineConfig config_from_json(const json& obj) {
    try {
        PipelineConfig cfg = make_default_config(obj.value("seed", uint64_t{42}));
        cfg.k = obj.value("k", cfg.k);
        if (obj.contains("mode")) cfg.mode = pipeline_mode_from_name(obj["mode"].get<std::string>());

        if (obj.contains("dispersal")) {
            const json& d = obj["dispersal"];
            if (d.contains("method")) {
                cfg.dispersal = dispersal_method_from_name(d["method"].get<std::string>());
            }
            cfg.dispersal_seed = d.value("seed", cfg.dispersal_seed);
            cfg.kmeans_max_iter = d.value("max_iter", cfg.kmeans_max_iter);
            cfg.kmeans_tol = d.value("tol", cfg.kmeans_tol);
        }
        if (obj.contains("model")) {
            const json& m = obj["model"];
            if (m.contains("layout")) cfg.layout = model_layout_from_name(m["layout"].get<std::string>());
            cfg.hidden_dim = m.value("hidden_dim", cfg.hidden_dim);
        }
        if (obj.contains("bias")) {
            const json& b = obj["bias"];
            cfg.bias.num_classes = b.value("classes", cfg.bias.num_classes);
            cfg.bias.signal_dim = b.value("signal_dim", cfg.bias.signal_dim);
            cfg.bias.clusters = b.value("clusters", cfg.bias.clusters);
            cfg.bias.bias_strength = b.value("bias_strength", cfg.bias.bias_strength);
            cfg.bias.samples_per_cluster = b.value("samples_per_cluster", cfg.bias.samples_per_cluster);
            cfg.bias.val_samples = b.value("val_samples", cfg.bias.val_samples);
            cfg.bias.noise = b.value("noise", cfg.bias.noise);
            cfg.bias.label_skew = b.value("label_skew", cfg.bias.label_skew);
            cfg.bias.seed = b.value("seed", cfg.bias.seed);
        }
        if (obj.contains("train")) {
            const json& t = obj["train"];
            cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
            cfg.train.epochs = t.value("epochs", cfg.train.epochs);
            cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
            cfg.train.seed = t.value("seed", cfg.train.seed);
            cfg.train.l2_coeff = t.value("l2_coeff", cfg.train.l2_coeff);
            if (t.contains("optimizer")) {
                cfg.train.optimizer = optimizer_from_name(t["optimizer"].get<std::string>());
            }
            cfg.train.momentum_beta = t.value("momentum_beta", cfg.train.momentum_beta);
            if (t.contains("lr_schedule")) {
                cfg.train.lr_schedule = lr_schedule_from_name(t["lr_schedule"].get<std::string>());
            }
        }
        if (obj.contains("merge")) {
            json m = obj["merge"];
            if (!m.contains("method")) m["method"] = merge_method_name(cfg.recipe.method);
            if (!m.contains("seed")) m["seed"] = cfg.recipe.seed;
            cfg.recipe = MergeRecipe::from_json(m);
        }
        if (obj.contains("pilot")) {
            const json& p = obj["pilot"];
            cfg.pilot.enabled = p.value("enabled", cfg.pilot.enabled);
            cfg.pilot.portions = p.value("portions", cfg.pilot.portions);
            cfg.pilot.passes_per_portion = p.value("passes_per_portion", cfg.pilot.passes_per_portion);
            cfg.pilot.learning_rate = p.value("learning_rate", cfg.pilot.learning_rate);
        }
        if (obj.contains("sweep")) cfg.sweep = obj["sweep"].get<std::vector<int>>();
        return cfg;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad pipeline config: ") + e.what());
    }
}

json config_to_json(const PipelineConfig& cfg) {
    return json{
        {"seed", cfg.seed},
        {"k", cfg.k},
        {"mode", pipeline_mode_name(cfg.mode)},
        {"dispersal",
         {{"method", dispersal_method_name(cfg.dispersal)},
          {"seed", cfg.dispersal_seed},
          {"max_iter", cfg.kmeans_max_iter},
          {"tol", cfg.kmeans_tol}}},
        {"model", {{"layout", model_layout_name(cfg.layout)}, {"hidden_dim", cfg.hidden_dim}}},
        {"bias",
         {{"classes", cfg.bias.num_classes},
          {"signal_dim", cfg.bias.signal_dim},
          {"clusters", cfg.bias.clusters},
          {"bias_strength", cfg.bias.bias_strength},
          {"samples_per_cluster", cfg.bias.samples_per_cluster},
          {"val_samples", cfg.bias.val_samples},
          {"noise", cfg.bias.noise},
          {"label_skew", cfg.bias.label_skew},
          {"seed", cfg.bias.seed}}},
        {"train",
         {{"learning_rate", cfg.train.learning_rate},
          {"epochs", cfg.train.epochs},
          {"batch_size", cfg.train.batch_size},
          {"seed", cfg.train.seed},
          {"l2_coeff", cfg.train.l2_coeff},
          {"optimizer", optimizer_name(cfg.train.optimizer)},
          {"momentum_beta", cfg.train.momentum_beta},
          {"lr_schedule", lr_schedule_name(cfg.train.lr_schedule)}}},
        {"merge", cfg.recipe.to_json()},
        {"pilot",
         {{"enabled", cfg.pilot.enabled},
          {"portions", cfg.pilot.portions},
          {"passes_per_portion", cfg.pilot.passes_per_portion},
          {"learning_rate", cfg.pilot.learning_rate}}},
        {"sweep", cfg.sweep},
    };
}

namespace {

template <class F>
auto stage(const char* name, bool verbose, F&& f) {
    if (verbose) {
        std::printf("[dtm] %s\n", name);
        std::fflush(stdout);
    }
    try {
        return f();
    } catch (const std::exception& e) {
        throw Error(std::string("stage '") + name + "' failed: " + e.what());
    }
}

json model_entry(const std::string& name, const EvalReport& report) {
    return json{
        {"name", name},
        {"val_accuracy", report.accuracy},
        {"val_mean_loss", report.mean_loss},
    };
}

TinyModel merged_as_model(const TinyModel& reference, Checkpoint merged) {
    merged.metadata = reference.to_checkpoint().metadata;
    return TinyModel::from_checkpoint(std::move(merged));
}

}  // namespace

json run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir, bool verbose) {
    namespace fs = std::filesystem;
    if (cfg.k < 1) {
        throw ValidationError("pipeline: k must be >= 1");
    }
    fs::create_directories(out_dir);

    json report;
    report["format_version"] = kReportFormatVersion;
    report["config"] = config_to_json(cfg);
    report["mode"] = pipeline_mode_name(cfg.mode);

    // generate the synthetic corpus
    auto [train_corpus, val_corpus] = stage("generate", verbose, [&] {
        auto pair = generate_biased_dataset(cfg.bias);
        save_corpus(pair.first, out_dir / "train.jsonl");
        save_corpus(pair.second, out_dir / "val.jsonl");
        return pair;
    });

    const TinyModel init_model = stage("init", verbose, [&] {
        TinyModel m = TinyModel::init(cfg.layout, cfg.bias.feature_dim(), cfg.hidden_dim,
                                      cfg.bias.num_classes, derive_seed(cfg.seed, "model"));
        write_checkpoint(m.to_checkpoint(), out_dir / "init.ct");
        return m;
    });

    json models = json::object();
    json timing = json::object();

    // full-data baseline, shared by every mode
    const TinyModel vanilla_model = stage("train_vanilla", verbose, [&] {
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(cfg.train.seed, "vanilla");
        TrainResult r = train_submodel(init_model, train_corpus, tc, &val_corpus);
        write_checkpoint(r.model.to_checkpoint(), out_dir / "vanilla.ct");
        save_json_file(loss_trace_to_json(r.trace), out_dir / "trace_vanilla.json");
        return std::move(r.model);
    });
    const EvalReport vanilla_report = stage("eval_vanilla", verbose, [&] {
        EvalReport rep = evaluate(vanilla_model, val_corpus);
        save_json_file(eval_report_to_json(rep), out_dir / "eval_vanilla.json");
        return rep;
    });
    models["vanilla"] = model_entry("vanilla", vanilla_report);

    if (cfg.mode != PipelineMode::vanilla) {
        // assemble the K sub-models: cluster portions for dtm, full-corpus
        // hyperparameter variants for uniform_soup
        std::vector<TinyModel> submodels;
        std::vector<Corpus> portions;

        if (cfg.mode == PipelineMode::dtm) {
            const ClusterAssignment assignment = stage("disperse", verbose, [&] {
                ClusterAssignment a =
                    cfg.dispersal == DispersalMethod::random
                        ? random_split(train_corpus, cfg.k, cfg.dispersal_seed)
                        : kmeans_disperse(train_corpus, cfg.k, cfg.dispersal_seed,
                                          cfg.kmeans_max_iter, cfg.kmeans_tol);
                save_assignment(a, out_dir / "assignment.json");
                return a;
            });
            portions = split_by_assignment(train_corpus, assignment);
            stage("train_submodels", verbose, [&] {
                for (int j = 0; j < cfg.k; ++j) {
                    TrainConfig tc = cfg.train;
                    tc.seed = derive_seed(cfg.train.seed, static_cast<uint64_t>(j));
                    TrainResult r = train_submodel(init_model, portions[static_cast<size_t>(j)], tc,
                                                   &val_corpus);
                    const std::string name = "sub_" + std::to_string(j);
                    write_checkpoint(r.model.to_checkpoint(), out_dir / (name + ".ct"));
                    save_json_file(loss_trace_to_json(r.trace), out_dir / ("trace_" + name + ".json"));
                    submodels.push_back(std::move(r.model));
                }
                return 0;
            });
        } else {
            stage("train_soup", verbose, [&] {
                for (int j = 0; j < cfg.k; ++j) {
                    TrainConfig tc = cfg.train;
                    tc.seed = derive_seed(cfg.train.seed, 3000 + static_cast<uint64_t>(j));
                    // distinct learning rates across the soup, spanning [0.5, 1.5]x
                    const double factor =
                        cfg.k > 1 ? 0.5 + static_cast<double>(j) / static_cast<double>(cfg.k - 1)
                                  : 1.0;
                    tc.learning_rate = cfg.train.learning_rate * factor;
                    TrainResult r = train_submodel(init_model, train_corpus, tc, &val_corpus);
                    const std::string name = "sub_" + std::to_string(j);
                    write_checkpoint(r.model.to_checkpoint(), out_dir / (name + ".ct"));
                    save_json_file(loss_trace_to_json(r.trace), out_dir / ("trace_" + name + ".json"));
                    submodels.push_back(std::move(r.model));
                }
                return 0;
            });
        }

        // fisher estimates feed fisher merging; estimated on each sub-model's
        // own training portion (full corpus for soup members)
        std::vector<Checkpoint> fishers;
        if (cfg.recipe.method == MergeMethod::fisher) {
            stage("fisher", verbose, [&] {
                for (int j = 0; j < cfg.k; ++j) {
                    const Corpus& source =
                        cfg.mode == PipelineMode::dtm ? portions[static_cast<size_t>(j)] : train_corpus;
                    const size_t sample = std::min<size_t>(512, source.size());
                    Checkpoint f = estimate_fisher(submodels[static_cast<size_t>(j)], source, sample,
                                                   derive_seed(cfg.recipe.seed, 100 + static_cast<uint64_t>(j)));
                    write_checkpoint(f, out_dir / ("fisher_" + std::to_string(j) + ".ct"));
                    fishers.push_back(std::move(f));
                }
                return 0;
            });
        }

        const TinyModel merged_model = stage("merge", verbose, [&] {
            std::vector<Checkpoint> model_ckpts;
            model_ckpts.reserve(submodels.size());
            for (const auto& m : submodels) {
                model_ckpts.push_back(m.params);
            }
            const Checkpoint base = init_model.params;
            Checkpoint merged = apply_recipe(cfg.recipe, &base, model_ckpts, fishers);
            TinyModel m = merged_as_model(init_model, std::move(merged));
            write_checkpoint(m.to_checkpoint(), out_dir / "merged.ct");
            return m;
        });

        const EvalReport merged_report = stage("eval_merged", verbose, [&] {
            EvalReport rep = evaluate(merged_model, val_corpus);
            save_json_file(eval_report_to_json(rep), out_dir / "eval_merged.json");
            return rep;
        });
        models["merged"] = model_entry("merged", merged_report);
        timing["merged_eval_sec"] = merged_report.wall_time_sec;

        std::vector<EvalReport> sub_reports = stage("eval_submodels", verbose, [&] {
            std::vector<EvalReport> reps;
            json arr = json::array();
            for (size_t j = 0; j < submodels.size(); ++j) {
                EvalReport rep = evaluate(submodels[j], val_corpus);
                const std::string name = "sub_" + std::to_string(j);
                save_json_file(eval_report_to_json(rep), out_dir / ("eval_" + name + ".json"));
                arr.push_back(model_entry(name, rep));
                reps.push_back(std::move(rep));
            }
            models["submodels"] = arr;
            return reps;
        });

        const EvalReport ensemble_report = stage("eval_ensemble", verbose, [&] {
            EvalReport rep = ensemble_evaluate(submodels, val_corpus);
            save_json_file(eval_report_to_json(rep), out_dir / "eval_ensemble.json");
            return rep;
        });
        models["ensemble"] = model_entry("ensemble", ensemble_report);
        timing["ensemble_eval_sec"] = ensemble_report.wall_time_sec;

        stage("error_analysis", verbose, [&] {
            ErrorSets errs = error_sets_from_reports(sub_reports);
            save_json_file(error_sets_to_json(errs), out_dir / "error_sets.json");
            json analysis;
            analysis["venn_fractions"] = venn_fractions(errs);
            json buckets = json::array();
            for (const Bucket& b : bucket_accuracy(errs, merged_report)) {
                buckets.push_back({{"n", b.appearances}, {"count", b.count}, {"accuracy", b.accuracy}});
            }
            analysis["buckets"] = buckets;
            report["error_analysis"] = analysis;
            return 0;
        });
    }

    if (cfg.pilot.enabled) {
        stage("pilot", verbose, [&] {
            TrainConfig tc = cfg.train;
            tc.seed = derive_seed(cfg.train.seed, "pilot");
            if (cfg.pilot.learning_rate > 0.0) {
                tc.learning_rate = cfg.pilot.learning_rate;
            }
            TrainResult r = train_pilot(init_model, train_corpus, tc, cfg.pilot.portions,
                                        cfg.pilot.passes_per_portion);
            save_json_file(loss_trace_to_json(r.trace), out_dir / "pilot_trace.json");

            json pilot;
            json ratios = json::array();
            for (const LossRatio& lr : loss_ratio_trace(r.trace)) {
                ratios.push_back({{"ratio", lr.ratio}, {"degenerate", lr.degenerate}});
            }
            pilot["loss_ratios"] = ratios;
            const size_t last = r.trace.checkpoints.size() - 1;
            pilot["spearman_early"] = per_class_spearman(r.trace, 1, 2);
            pilot["spearman_late"] = per_class_spearman(r.trace, last - 1, last);
            pilot["note"] =
                "per-class losses stand in for per-token losses; spearman_early covers the "
                "first-to-second portion, spearman_late the last portion";
            json contributors = json::array();
            const size_t top = std::min<size_t>(5, r.trace.checkpoints[0].per_class_train_loss.size());
            for (const BiasContributor& c : top_bias_contributors(r.trace, top)) {
                contributors.push_back({{"class", c.class_index}, {"gap", c.gap}});
            }
            pilot["top_bias_contributors"] = contributors;
            report["pilot"] = pilot;
            return 0;
        });
    }

    report["models"] = models;
    report["timing"] = timing;
    save_json_file(report, out_dir / "report.json");
    return report;
}

json run_sweep(const PipelineConfig& cfg, const std::filesystem::path& out_dir, bool verbose) {
    if (cfg.sweep.empty()) {
        throw ValidationError("run_sweep: sweep list is empty");
    }
    for (int k : cfg.sweep) {
        if (k < 2) {
            throw ValidationError("run_sweep: sweep values must be >= 2");
        }
    }
    std::filesystem::create_directories(out_dir);

    json sweep_report;
    sweep_report["format_version"] = kReportFormatVersion;
    sweep_report["config"] = config_to_json(cfg);
    json rows = json::array();

    for (int k : cfg.sweep) {
        PipelineConfig sub = cfg;
        sub.k = k;
        sub.sweep.clear();
        json row;
        row["k"] = k;
        try {
            json rep = run_pipeline(sub, out_dir / ("k_" + std::to_string(k)), verbose);
            row["status"] = "ok";
            const json& models = rep["models"];
            if (models.contains("merged")) row["merged_accuracy"] = models["merged"]["val_accuracy"];
            if (models.contains("vanilla")) row["vanilla_accuracy"] = models["vanilla"]["val_accuracy"];
            if (models.contains("ensemble")) row["ensemble_accuracy"] = models["ensemble"]["val_accuracy"];
            if (models.contains("submodels")) {
                double mean = 0.0;
                for (const auto& e : models["submodels"]) {
                    mean += e["val_accuracy"].get<double>();
                }
                row["submodel_mean_accuracy"] = mean / std::max<size_t>(1, models["submodels"].size());
            }
        } catch (const std::exception& e) {
            row["status"] = std::string("error: ") + e.what();
        }
        rows.push_back(std::move(row));
    }
    sweep_report["rows"] = rows;
    save_json_file(sweep_report, out_dir / "sweep_report.json");
    return sweep_report;
}

}  // namespace dtm
