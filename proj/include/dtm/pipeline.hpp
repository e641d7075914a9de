// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"

#include "dtm/bias_lab.hpp"
#include "dtm/dispersal.hpp"
#include "dtm/merge.hpp"

namespace dtm {

enum class PipelineMode { dtm, vanilla, uniform_soup };

const char* pipeline_mode_name(PipelineMode m);
PipelineMode pipeline_mode_from_name(std::string_view name);

struct PilotOptions {
    bool enabled = true;
    int portions = 10;
    int passes_per_portion = 4;
    // the pilot is a measurement instrument: a gentler peak rate keeps the
    // recorded loss curves smooth; 0 means "use the training rate"
    double learning_rate = 0.3;
};

// Full experiment description. Stage seeds are derived from the master seed
// by make_default_config / config_from_json; explicit JSON values win.
struct PipelineConfig {
    uint64_t seed = 42;
    int k = 4;
    PipelineMode mode = PipelineMode::dtm;

    DispersalMethod dispersal = DispersalMethod::random;
    uint64_t dispersal_seed = 0;
    int kmeans_max_iter = 100;
    double kmeans_tol = 1e-4;

    ModelLayout layout = ModelLayout::mlp;
    int hidden_dim = 128;

    BiasSpec bias;
    TrainConfig train;
    MergeRecipe recipe;
    PilotOptions pilot;

    std::vector<int> sweep;
};

PipelineConfig make_default_config(uint64_t master_seed);
PipelineConfig config_from_json(const nlohmann::json& obj);
nlohmann::json config_to_json(const PipelineConfig& cfg);

inline constexpr const char* kReportFormatVersion = "dtm-report/1";

// generate -> disperse -> K sub-model trainings -> merge -> evaluations
// (merged, each sub-model, full-data baseline, logit ensemble) -> pilot
// trace -> error-set analyses. Writes every intermediate artifact plus
// report.json into out_dir. Deterministic given the config, except for the
// measured wall times under "timing".
nlohmann::json run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                            bool verbose = false);

// one pipeline run per k in cfg.sweep; failures are recorded per row and do
// not abort the remaining runs
nlohmann::json run_sweep(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                         bool verbose = false);

}  // namespace dtm
