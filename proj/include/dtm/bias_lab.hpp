// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dtm/corpus.hpp"
#include "dtm/tensor.hpp"

namespace dtm {

enum class ModelLayout { linear, mlp };

const char* model_layout_name(ModelLayout m);
ModelLayout model_layout_from_name(std::string_view name);

// Tiny differentiable softmax classifier. Parameters live in a Checkpoint
// under fixed names: "w0" [C,D] and "b0" [C] for the linear layout; the mlp
// layout adds a tanh hidden layer with "w0" [H,D], "b0" [H], "w1" [C,H],
// "b1" [C].
struct TinyModel {
    ModelLayout layout = ModelLayout::linear;
    int input_dim = 0;
    int hidden_dim = 0;
    int num_classes = 0;
    Checkpoint params;

    static TinyModel init(ModelLayout layout, int input_dim, int hidden_dim, int num_classes,
                          uint64_t seed);
    // round trip through the container format; layout travels in metadata
    static TinyModel from_checkpoint(Checkpoint ckpt);
    Checkpoint to_checkpoint() const;

    // logits for one input row; scratch buffers reused across calls
    struct Forward {
        std::vector<float> hidden;
        std::vector<float> logits;
    };
    void forward(std::span<const float> x, Forward& buf) const;

    bool same_structure(const TinyModel& other) const;
};

enum class Optimizer { sgd, momentum };

const char* optimizer_name(Optimizer o);
Optimizer optimizer_from_name(std::string_view name);

enum class LrSchedule { constant, cosine };

const char* lr_schedule_name(LrSchedule s);
LrSchedule lr_schedule_from_name(std::string_view name);

struct TrainConfig {
    double learning_rate = 1.0;
    int epochs = 10;
    int batch_size = 32;
    uint64_t seed = 0;
    double l2_coeff = 0.0;
    Optimizer optimizer = Optimizer::sgd;
    double momentum_beta = 0.9;
    // cosine decays to zero over the full training horizon
    LrSchedule lr_schedule = LrSchedule::cosine;
};

// Synthetic biased dataset. Each input is a Gaussian signal block (class
// means on the unit sphere, noise sigma) followed by `clusters` bias blocks
// of `num_classes` entries each. In cluster j's training rows, block j is
// the one-hot of the label with probability bias_strength, otherwise a
// uniform random one-hot; all other blocks are uniform. Validation rows have
// every block uniform, so the blocks carry no label information there.
struct BiasSpec {
    int num_classes = 10;
    int signal_dim = 6;
    int clusters = 4;
    double bias_strength = 0.9;
    int samples_per_cluster = 2000;
    int val_samples = 2000;
    double noise = 0.4;
    // Zipf exponent of the label marginal; 0 for uniform labels. A long
    // tail mirrors token inventories: rare classes supply the slowly-fitted,
    // weakly-generalizing loss mass.
    double label_skew = 1.5;
    uint64_t seed = 0;

    int feature_dim() const { return signal_dim + clusters * num_classes; }
};

// returns (train corpus with features+labels+cluster tags, validation corpus)
std::pair<Corpus, Corpus> generate_biased_dataset(const BiasSpec& spec);

struct LossCheckpointEntry {
    double mean_train_loss = 0.0;
    double mean_val_loss = 0.0;
    std::vector<double> per_class_train_loss;
    std::vector<double> per_class_val_loss;
};

struct LossTrace {
    std::vector<LossCheckpointEntry> checkpoints;
};

struct TrainResult {
    TinyModel model;
    LossTrace trace;
};

// Mini-batch SGD on mean cross-entropy + l2_coeff*||theta||^2 with seeded
// per-epoch shuffling. Records a trace entry before training and after each
// epoch; val==nullptr records the train losses in the val slots.
TrainResult train_submodel(const TinyModel& init, const Corpus& data, const TrainConfig& cfg,
                           const Corpus* val = nullptr);

// Portion-sequential training: shuffle once, split into `portions` chunks,
// hold the last chunk out as the pilot's evaluation set, and run
// `passes_per_portion` epochs over each remaining chunk in turn without
// resetting optimizer state. Records a trace entry initially and at every
// portion boundary; train losses cover the trained portions, val losses the
// held-out portion.
TrainResult train_pilot(const TinyModel& init, const Corpus& data, const TrainConfig& cfg,
                        int portions = 10, int passes_per_portion = 1);

struct EvalReport {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double wall_time_sec = 0.0;
    std::map<std::string, bool> per_case_correct;
    std::vector<double> per_class_loss;
};

// argmax of logits, ties to the lowest class index
EvalReport evaluate(const TinyModel& model, const Corpus& data);

// logits averaged uniformly across models before argmax
EvalReport ensemble_evaluate(std::span<const TinyModel> models, const Corpus& data);

// cross-entropy gradient for one example (no regularizer); tensors mirror
// the model parameters
Checkpoint loss_gradient(const TinyModel& model, std::span<const float> x, int label);

// diagonal empirical Fisher: mean of squared per-example gradients over a
// seeded sample of `sample_size` rows (without replacement)
Checkpoint estimate_fisher(const TinyModel& model, const Corpus& data, size_t sample_size,
                           uint64_t seed);

}  // namespace dtm
