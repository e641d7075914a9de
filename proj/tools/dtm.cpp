// SPDX-License-Identifier: Apache-2.0

// dtm: disperse an instruction corpus, train sub-models on the portions,
// merge the checkpoints, and analyze what the merge forgets.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dtm/analysis.hpp"
#include "dtm/bias_lab.hpp"
#include "dtm/container.hpp"
#include "dtm/corpus.hpp"
#include "dtm/dispersal.hpp"
#include "dtm/error.hpp"
#include "dtm/merge.hpp"
#include "dtm/pipeline.hpp"
#include "dtm/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalOpts {
    uint64_t seed = 42;
    bool seed_set = false;
    std::string config_path;
    std::string out;
    bool quiet = false;
};

void say(const GlobalOpts& g, const std::string& msg) {
    if (!g.quiet) {
        std::printf("%s\n", msg.c_str());
    }
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

dtm::TinyModel load_model(const std::string& path) {
    return dtm::TinyModel::from_checkpoint(dtm::read_checkpoint(path));
}

int infer_num_classes(const dtm::Corpus& corpus) {
    int max_label = -1;
    for (const auto& rec : corpus.records) {
        if (rec.label) {
            max_label = std::max(max_label, *rec.label);
        }
    }
    if (max_label < 1) {
        throw dtm::ValidationError("cannot infer the class count: need labels covering >= 2 classes");
    }
    return max_label + 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"disperse-then-merge toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    app.add_option("--seed", g.seed, "master seed")->each([&](const std::string&) { g.seed_set = true; });
    app.add_option("--config", g.config_path, "pipeline config JSON");
    app.add_option("--out", g.out, "output path (file or directory, command dependent)");
    app.add_flag("--quiet", g.quiet, "suppress progress output");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic biased dataset");
    dtm::BiasSpec bias_spec;
    std::string synth_train = "train.jsonl";
    std::string synth_val = "val.jsonl";
    synth->add_option("--classes", bias_spec.num_classes, "class count");
    synth->add_option("--signal-dim", bias_spec.signal_dim, "signal block width");
    synth->add_option("--clusters", bias_spec.clusters, "planted bias clusters");
    synth->add_option("--bias-strength", bias_spec.bias_strength, "probability the bias block encodes the label");
    synth->add_option("--samples-per-cluster", bias_spec.samples_per_cluster, "training rows per cluster");
    synth->add_option("--val-samples", bias_spec.val_samples, "validation rows");
    synth->add_option("--noise", bias_spec.noise, "signal noise sigma");
    synth->add_option("--label-skew", bias_spec.label_skew, "Zipf exponent of the label marginal (0 = uniform)");
    synth->add_option("--out-train", synth_train, "training corpus path");
    synth->add_option("--out-val", synth_val, "validation corpus path");

    // disperse
    auto* disperse = app.add_subcommand("disperse", "split a corpus into k clusters");
    std::string disperse_corpus;
    std::string disperse_method = "random";
    int disperse_k = 4;
    int disperse_max_iter = 100;
    double disperse_tol = 1e-4;
    disperse->add_option("--corpus", disperse_corpus, "corpus JSONL")->required();
    disperse->add_option("--k", disperse_k, "cluster count");
    disperse->add_option("--method", disperse_method, "random or kmeans");
    disperse->add_option("--max-iter", disperse_max_iter, "kmeans iteration cap");
    disperse->add_option("--tol", disperse_tol, "kmeans centroid movement tolerance");

    // train
    auto* train = app.add_subcommand("train", "train a classifier on a corpus");
    std::string train_data;
    std::string train_val;
    std::string train_init;
    std::string train_layout = "mlp";
    std::string train_optimizer = "sgd";
    std::string train_trace;
    int train_hidden = 128;
    int train_classes = 0;
    int train_pilot_portions = 0;
    int train_passes = 1;
    dtm::TrainConfig train_cfg;
    train->add_option("--data", train_data, "training corpus JSONL")->required();
    train->add_option("--val", train_val, "validation corpus JSONL");
    train->add_option("--init", train_init, "initial checkpoint (.ct); otherwise a fresh seeded init");
    train->add_option("--layout", train_layout, "linear or mlp (fresh init)");
    train->add_option("--hidden-dim", train_hidden, "hidden width for mlp");
    train->add_option("--classes", train_classes, "class count (default: inferred from labels)");
    train->add_option("--lr", train_cfg.learning_rate, "learning rate");
    train->add_option("--epochs", train_cfg.epochs, "epochs");
    train->add_option("--batch-size", train_cfg.batch_size, "mini-batch size");
    train->add_option("--l2", train_cfg.l2_coeff, "L2 penalty coefficient");
    train->add_option("--optimizer", train_optimizer, "sgd or momentum");
    train->add_option("--momentum-beta", train_cfg.momentum_beta, "momentum coefficient");
    std::string train_schedule = "cosine";
    train->add_option("--lr-schedule", train_schedule, "constant or cosine");
    train->add_option("--pilot", train_pilot_portions, "portion count for portion-sequential training (0 = off)");
    train->add_option("--passes-per-portion", train_passes, "passes over each portion in pilot mode");
    train->add_option("--trace", train_trace, "loss trace JSON output");

    // fisher
    auto* fisher = app.add_subcommand("fisher", "estimate a diagonal Fisher for a model");
    std::string fisher_model;
    std::string fisher_data;
    size_t fisher_samples = 512;
    fisher->add_option("--model", fisher_model, "model checkpoint (.ct)")->required();
    fisher->add_option("--data", fisher_data, "labeled corpus JSONL")->required();
    fisher->add_option("--sample-size", fisher_samples, "rows sampled for the estimate");

    // merge
    auto* merge = app.add_subcommand("merge", "fuse checkpoints into one");
    std::string merge_recipe_path;
    std::string merge_method;
    std::string merge_base;
    std::vector<std::string> merge_models;
    std::vector<std::string> merge_fishers;
    merge->add_option("--recipe", merge_recipe_path, "merge recipe JSON");
    merge->add_option("--method", merge_method, "override the recipe method");
    merge->add_option("--base", merge_base, "base checkpoint (task_vector/ties/dare)");
    merge->add_option("--models", merge_models, "model checkpoints")->required()->expected(-1);
    merge->add_option("--fishers", merge_fishers, "fisher checkpoints (fisher merging)")->expected(-1);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a model on a labeled corpus");
    std::string eval_model;
    std::string eval_data;
    eval_cmd->add_option("--model", eval_model, "model checkpoint (.ct)")->required();
    eval_cmd->add_option("--data", eval_data, "labeled corpus JSONL")->required();

    // ensemble
    auto* ensemble_cmd = app.add_subcommand("ensemble", "evaluate a logit-averaging ensemble");
    std::vector<std::string> ensemble_models;
    std::string ensemble_data;
    ensemble_cmd->add_option("--models", ensemble_models, "model checkpoints")->required()->expected(-1);
    ensemble_cmd->add_option("--data", ensemble_data, "labeled corpus JSONL")->required();

    // analyze
    auto* analyze = app.add_subcommand("analyze", "diagnostics over traces and reports");
    analyze->require_subcommand(1);

    auto* a_ratio = analyze->add_subcommand("loss-ratio", "train/val loss reduction ratios");
    std::string ratio_trace;
    a_ratio->add_option("--trace", ratio_trace, "loss trace JSON")->required();

    auto* a_spearman = analyze->add_subcommand("spearman", "per-class loss reduction correlation");
    std::string spearman_trace;
    size_t spearman_t0 = 0;
    size_t spearman_t1 = 1;
    a_spearman->add_option("--trace", spearman_trace, "loss trace JSON")->required();
    a_spearman->add_option("--t0", spearman_t0, "earlier checkpoint index");
    a_spearman->add_option("--t1", spearman_t1, "later checkpoint index");

    auto* a_bias = analyze->add_subcommand("bias-top", "classes with the widest train/val reduction gap");
    std::string bias_trace;
    size_t bias_top = 5;
    a_bias->add_option("--trace", bias_trace, "loss trace JSON")->required();
    a_bias->add_option("--top", bias_top, "entries to report");

    auto* a_errors = analyze->add_subcommand("error-sets", "venn fractions and bucket accuracies");
    std::vector<std::string> err_reports;
    std::string err_sets_path;
    std::string err_fused;
    a_errors->add_option("--reports", err_reports, "sub-model eval reports")->expected(-1);
    a_errors->add_option("--errors", err_sets_path, "precomputed error sets JSON");
    a_errors->add_option("--fused", err_fused, "fused model eval report")->required();

    // run / sweep
    auto* run = app.add_subcommand("run", "execute the full experiment pipeline");
    auto* sweep = app.add_subcommand("sweep", "run the pipeline for each k in a sweep list");
    std::vector<int> sweep_list;
    sweep->add_option("--sweep", sweep_list, "k values, e.g. --sweep 2 3 4 5 6")->expected(-1);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            bias_spec.seed = dtm::derive_seed(g.seed, "bias");
            auto [train_c, val_c] = dtm::generate_biased_dataset(bias_spec);
            dtm::save_corpus(train_c, synth_train);
            dtm::save_corpus(val_c, synth_val);
            say(g, "wrote " + synth_train + " (" + std::to_string(train_c.size()) + " rows) and " +
                       synth_val + " (" + std::to_string(val_c.size()) + " rows)");
        } else if (*disperse) {
            const std::string out = g.out.empty() ? "assignment.json" : g.out;
            dtm::Corpus corpus = dtm::load_corpus(disperse_corpus);
            dtm::ClusterAssignment a =
                dtm::dispersal_method_from_name(disperse_method) == dtm::DispersalMethod::random
                    ? dtm::random_split(corpus, disperse_k, g.seed)
                    : dtm::kmeans_disperse(corpus, disperse_k, g.seed, disperse_max_iter, disperse_tol);
            dtm::save_assignment(a, out);
            std::string sizes;
            for (size_t s : a.cluster_sizes()) {
                sizes += (sizes.empty() ? "" : ",") + std::to_string(s);
            }
            say(g, "wrote " + out + " (cluster sizes " + sizes + ")");
        } else if (*train) {
            const std::string out = g.out.empty() ? "model.ct" : g.out;
            dtm::Corpus data = dtm::load_corpus(train_data);
            std::optional<dtm::Corpus> val;
            if (!train_val.empty()) {
                val = dtm::load_corpus(train_val);
            }
            dtm::TinyModel init;
            if (!train_init.empty()) {
                init = load_model(train_init);
            } else {
                if (data.empty() || !data.records[0].features) {
                    throw dtm::ValidationError("training corpus has no feature rows");
                }
                const int dim = static_cast<int>(data.records[0].features->size());
                const int classes = train_classes > 0 ? train_classes : infer_num_classes(data);
                init = dtm::TinyModel::init(dtm::model_layout_from_name(train_layout), dim,
                                            train_hidden, classes, dtm::derive_seed(g.seed, "model"));
            }
            train_cfg.seed = dtm::derive_seed(g.seed, "train");
            train_cfg.optimizer = dtm::optimizer_from_name(train_optimizer);
            train_cfg.lr_schedule = dtm::lr_schedule_from_name(train_schedule);
            dtm::TrainResult result;
            if (train_pilot_portions > 0) {
                result = dtm::train_pilot(init, data, train_cfg, train_pilot_portions, train_passes);
            } else {
                result = dtm::train_submodel(init, data, train_cfg, val ? &*val : nullptr);
            }
            dtm::write_checkpoint(result.model.to_checkpoint(), out);
            if (!train_trace.empty()) {
                dtm::save_json_file(dtm::loss_trace_to_json(result.trace), train_trace);
            }
            say(g, "wrote " + out + " (final train loss " +
                       std::to_string(result.trace.checkpoints.back().mean_train_loss) + ")");
        } else if (*fisher) {
            const std::string out = g.out.empty() ? "fisher.ct" : g.out;
            dtm::TinyModel model = load_model(fisher_model);
            dtm::Corpus data = dtm::load_corpus(fisher_data);
            dtm::Checkpoint f = dtm::estimate_fisher(model, data, std::min(fisher_samples, data.size()),
                                                     dtm::derive_seed(g.seed, "fisher"));
            dtm::write_checkpoint(f, out);
            say(g, "wrote " + out);
        } else if (*merge) {
            const std::string out = g.out.empty() ? "fused.ct" : g.out;
            dtm::MergeRecipe recipe;
            if (!merge_recipe_path.empty()) {
                recipe = dtm::MergeRecipe::from_json(dtm::load_json_file(merge_recipe_path));
            }
            if (!merge_method.empty()) {
                recipe.method = dtm::merge_method_from_name(merge_method);
            }
            std::vector<dtm::Checkpoint> models;
            for (const auto& p : merge_models) {
                models.push_back(dtm::read_checkpoint(p));
            }
            std::vector<dtm::Checkpoint> fishers;
            for (const auto& p : merge_fishers) {
                fishers.push_back(dtm::read_checkpoint(p));
            }
            std::optional<dtm::Checkpoint> base;
            if (!merge_base.empty()) {
                base = dtm::read_checkpoint(merge_base);
            }
            dtm::Checkpoint fused =
                dtm::apply_recipe(recipe, base ? &*base : nullptr, models, fishers);
            fused.metadata = models[0].metadata;  // layout metadata travels with the weights
            dtm::write_checkpoint(fused, out);
            say(g, "wrote " + out + " (" + dtm::merge_method_name(recipe.method) + " over " +
                       std::to_string(models.size()) + " models)");
        } else if (*eval_cmd) {
            const std::string out = g.out.empty() ? "eval.json" : g.out;
            dtm::EvalReport rep = dtm::evaluate(load_model(eval_model), dtm::load_corpus(eval_data));
            dtm::save_json_file(dtm::eval_report_to_json(rep), out);
            say(g, "wrote " + out + " (accuracy " + std::to_string(rep.accuracy) + ")");
        } else if (*ensemble_cmd) {
            const std::string out = g.out.empty() ? "ensemble.json" : g.out;
            std::vector<dtm::TinyModel> models;
            for (const auto& p : ensemble_models) {
                models.push_back(load_model(p));
            }
            dtm::EvalReport rep = dtm::ensemble_evaluate(models, dtm::load_corpus(ensemble_data));
            dtm::save_json_file(dtm::eval_report_to_json(rep), out);
            say(g, "wrote " + out + " (accuracy " + std::to_string(rep.accuracy) + ")");
        } else if (*a_ratio) {
            const std::string out = g.out.empty() ? "loss_ratio" : g.out;
            dtm::LossTrace trace = dtm::loss_trace_from_json(dtm::load_json_file(ratio_trace));
            auto ratios = dtm::loss_ratio_trace(trace);
            json arr = json::array();
            std::string csv = "step,ratio,degenerate\n";
            for (size_t i = 0; i < ratios.size(); ++i) {
                arr.push_back({{"ratio", ratios[i].ratio}, {"degenerate", ratios[i].degenerate}});
                csv += std::to_string(i + 1) + "," + std::to_string(ratios[i].ratio) + "," +
                       (ratios[i].degenerate ? "1" : "0") + "\n";
            }
            dtm::save_json_file(json{{"ratios", arr}}, out + ".json");
            dtm::save_text_file(csv, out + ".csv");
            say(g, "wrote " + out + ".json and " + out + ".csv");
        } else if (*a_spearman) {
            const std::string out = g.out.empty() ? "spearman" : g.out;
            dtm::LossTrace trace = dtm::loss_trace_from_json(dtm::load_json_file(spearman_trace));
            const double rho = dtm::per_class_spearman(trace, spearman_t0, spearman_t1);
            dtm::save_json_file(json{{"t0", spearman_t0},
                                     {"t1", spearman_t1},
                                     {"spearman", rho},
                                     {"note", "per-class losses stand in for per-token losses"}},
                                out + ".json");
            dtm::save_text_file("t0,t1,spearman\n" + std::to_string(spearman_t0) + "," +
                                    std::to_string(spearman_t1) + "," + std::to_string(rho) + "\n",
                                out + ".csv");
            say(g, "spearman(" + std::to_string(spearman_t0) + "->" + std::to_string(spearman_t1) +
                       ") = " + std::to_string(rho));
        } else if (*a_bias) {
            const std::string out = g.out.empty() ? "bias_top" : g.out;
            dtm::LossTrace trace = dtm::loss_trace_from_json(dtm::load_json_file(bias_trace));
            auto top = dtm::top_bias_contributors(trace, bias_top);
            json arr = json::array();
            std::string csv = "class,gap\n";
            for (const auto& c : top) {
                arr.push_back({{"class", c.class_index}, {"gap", c.gap}});
                csv += std::to_string(c.class_index) + "," + std::to_string(c.gap) + "\n";
            }
            dtm::save_json_file(json{{"contributors", arr}}, out + ".json");
            dtm::save_text_file(csv, out + ".csv");
            say(g, "wrote " + out + ".json and " + out + ".csv");
        } else if (*a_errors) {
            const std::string out = g.out.empty() ? "error_analysis" : g.out;
            dtm::ErrorSets errs;
            if (!err_sets_path.empty()) {
                errs = dtm::error_sets_from_json(dtm::load_json_file(err_sets_path));
            } else if (!err_reports.empty()) {
                std::vector<dtm::EvalReport> reports;
                for (const auto& p : err_reports) {
                    reports.push_back(dtm::eval_report_from_json(dtm::load_json_file(p)));
                }
                errs = dtm::error_sets_from_reports(reports);
            } else {
                throw dtm::ValidationError("error-sets needs --errors or --reports");
            }
            dtm::EvalReport fused = dtm::eval_report_from_json(dtm::load_json_file(err_fused));
            auto venn = dtm::venn_fractions(errs);
            auto buckets = dtm::bucket_accuracy(errs, fused);

            json venn_json = json::object();
            std::string venn_csv = "signature,fraction\n";
            for (const auto& [sig, frac] : venn) {
                venn_json[sig] = frac;
                venn_csv += csv_escape(sig) + "," + std::to_string(frac) + "\n";
            }
            json bucket_json = json::array();
            std::string bucket_csv = "n,count,accuracy\n";
            for (const auto& b : buckets) {
                bucket_json.push_back({{"n", b.appearances}, {"count", b.count}, {"accuracy", b.accuracy}});
                bucket_csv += std::to_string(b.appearances) + "," + std::to_string(b.count) + "," +
                              std::to_string(b.accuracy) + "\n";
            }
            dtm::save_json_file(json{{"venn_fractions", venn_json}, {"buckets", bucket_json}},
                                out + ".json");
            dtm::save_text_file(venn_csv, out + ".venn.csv");
            dtm::save_text_file(bucket_csv, out + ".buckets.csv");
            say(g, "wrote " + out + ".json, " + out + ".venn.csv, " + out + ".buckets.csv");
        } else if (*run || *sweep) {
            json cfg_obj = json::object();
            if (!g.config_path.empty()) {
                cfg_obj = dtm::load_json_file(g.config_path);
            }
            if (g.seed_set || !cfg_obj.contains("seed")) {
                cfg_obj["seed"] = g.seed;
            }
            dtm::PipelineConfig cfg = dtm::config_from_json(cfg_obj);
            const std::string out = g.out.empty() ? "dtm_out" : g.out;
            if (*run) {
                json report = dtm::run_pipeline(cfg, out, !g.quiet);
                say(g, "wrote " + (fs::path(out) / "report.json").string());
            } else {
                if (!sweep_list.empty()) {
                    cfg.sweep = sweep_list;
                }
                if (cfg.sweep.empty()) {
                    cfg.sweep = {2, 3, 4, 5, 6};
                }
                json report = dtm::run_sweep(cfg, out, !g.quiet);
                say(g, "wrote " + (fs::path(out) / "sweep_report.json").string());
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "dtm: error: %s\n", e.what());
        return 1;
    }
    return 0;
}
