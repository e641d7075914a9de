// SPDX-License-Identifier: Apache-2.0

#include "dtm/bias_lab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>

#include "dtm/error.hpp"
#include "dtm/kernels.hpp"
#include "dtm/rng.hpp"

namespace dtm {

const char* model_layout_name(ModelLayout m) { return m == ModelLayout::linear ? "linear" : "mlp"; }

ModelLayout model_layout_from_name(std::string_view name) {
    if (name == "linear") return ModelLayout::linear;
    if (name == "mlp") return ModelLayout::mlp;
    throw ValidationError("unknown model layout '" + std::string(name) + "'");
}

const char* optimizer_name(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "momentum"; }

Optimizer optimizer_from_name(std::string_view name) {
    if (name == "sgd") return Optimizer::sgd;
    if (name == "momentum") return Optimizer::momentum;
    throw ValidationError("unknown optimizer '" + std::string(name) + "'");
}

const char* lr_schedule_name(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

LrSchedule lr_schedule_from_name(std::string_view name) {
    if (name == "constant") return LrSchedule::constant;
    if (name == "cosine") return LrSchedule::cosine;
    throw ValidationError("unknown lr schedule '" + std::string(name) + "'");
}

TinyModel TinyModel::init(ModelLayout layout, int input_dim, int hidden_dim, int num_classes,
                          uint64_t seed) {
    if (input_dim < 1 || num_classes < 2) {
        throw ValidationError("TinyModel::init: need input_dim >= 1 and num_classes >= 2");
    }
    if (layout == ModelLayout::mlp && hidden_dim < 1) {
        throw ValidationError("TinyModel::init: mlp layout needs hidden_dim >= 1");
    }
    TinyModel m;
    m.layout = layout;
    m.input_dim = input_dim;
    m.hidden_dim = layout == ModelLayout::mlp ? hidden_dim : 0;
    m.num_classes = num_classes;

    SplitMix64 rng(derive_seed(seed, "init"));
    auto gaussian_tensor = [&](int rows, int cols) {
        std::vector<float> v(static_cast<size_t>(rows) * cols);
        const float s = 1.0f / std::sqrt(static_cast<float>(cols));
        for (auto& x : v) {
            x = static_cast<float>(rng.next_gaussian()) * s;
        }
        return v;
    };

    if (layout == ModelLayout::linear) {
        // convex objective, zero start; avoids seeding every model with the
        // same random feature noise
        m.params.tensors.emplace("w0", Tensor::zeros(Dtype::f32, {num_classes, input_dim}));
        m.params.tensors.emplace("b0", Tensor::zeros(Dtype::f32, {num_classes}));
    } else {
        m.params.tensors.emplace("w0", Tensor::make(Dtype::f32, {hidden_dim, input_dim},
                                                    gaussian_tensor(hidden_dim, input_dim)));
        m.params.tensors.emplace("b0", Tensor::zeros(Dtype::f32, {hidden_dim}));
        m.params.tensors.emplace("w1", Tensor::make(Dtype::f32, {num_classes, hidden_dim},
                                                    gaussian_tensor(num_classes, hidden_dim)));
        m.params.tensors.emplace("b1", Tensor::zeros(Dtype::f32, {num_classes}));
    }
    return m;
}

Checkpoint TinyModel::to_checkpoint() const {
    Checkpoint ckpt = params;
    ckpt.metadata["layout"] = model_layout_name(layout);
    ckpt.metadata["D"] = std::to_string(input_dim);
    ckpt.metadata["H"] = std::to_string(hidden_dim);
    ckpt.metadata["C"] = std::to_string(num_classes);
    return ckpt;
}

TinyModel TinyModel::from_checkpoint(Checkpoint ckpt) {
    TinyModel m;
    try {
        m.layout = model_layout_from_name(ckpt.metadata.at("layout"));
        m.input_dim = std::stoi(ckpt.metadata.at("D"));
        m.hidden_dim = std::stoi(ckpt.metadata.at("H"));
        m.num_classes = std::stoi(ckpt.metadata.at("C"));
    } catch (const std::out_of_range&) {
        throw FormatError("checkpoint is missing TinyModel metadata (layout/D/H/C)");
    } catch (const std::invalid_argument&) {
        throw FormatError("checkpoint has non-numeric TinyModel metadata");
    }
    const int64_t d = m.input_dim;
    const int64_t h = m.hidden_dim;
    const int64_t c = m.num_classes;
    auto expect = [&](const char* name, std::vector<int64_t> shape) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            throw FormatError(std::string("checkpoint is missing tensor '") + name + "'");
        }
        if (it->second.shape != shape) {
            throw FormatError(std::string("checkpoint tensor '") + name +
                              "' shape does not match the model metadata");
        }
    };
    if (m.layout == ModelLayout::linear) {
        expect("w0", {c, d});
        expect("b0", {c});
    } else {
        expect("w0", {h, d});
        expect("b0", {h});
        expect("w1", {c, h});
        expect("b1", {c});
    }
    m.params = std::move(ckpt);
    return m;
}

bool TinyModel::same_structure(const TinyModel& other) const {
    return layout == other.layout && input_dim == other.input_dim &&
           hidden_dim == other.hidden_dim && num_classes == other.num_classes;
}

void TinyModel::forward(std::span<const float> x, Forward& buf) const {
    if (x.size() != static_cast<size_t>(input_dim)) {
        throw ValidationError("forward: feature length " + std::to_string(x.size()) +
                              " does not match model input dim " + std::to_string(input_dim));
    }
    const Kernels& k = active_kernels();
    const size_t d = static_cast<size_t>(input_dim);
    const size_t c = static_cast<size_t>(num_classes);
    buf.logits.resize(c);

    if (layout == ModelLayout::linear) {
        const float* w0 = params.tensors.at("w0").values.data();
        const float* b0 = params.tensors.at("b0").values.data();
        for (size_t i = 0; i < c; ++i) {
            buf.logits[i] = k.dot(w0 + i * d, x.data(), d) + b0[i];
        }
        return;
    }

    const size_t h = static_cast<size_t>(hidden_dim);
    const float* w0 = params.tensors.at("w0").values.data();
    const float* b0 = params.tensors.at("b0").values.data();
    const float* w1 = params.tensors.at("w1").values.data();
    const float* b1 = params.tensors.at("b1").values.data();
    buf.hidden.resize(h);
    for (size_t i = 0; i < h; ++i) {
        buf.hidden[i] = std::tanh(k.dot(w0 + i * d, x.data(), d) + b0[i]);
    }
    for (size_t i = 0; i < c; ++i) {
        buf.logits[i] = k.dot(w1 + i * h, buf.hidden.data(), h) + b1[i];
    }
}

namespace {

// dense row-major copy of the labeled rows, validated against the corpus
struct DatasetView {
    std::vector<float> features;  // n x dim
    std::vector<int> labels;
    std::vector<const std::string*> ids;
    size_t n = 0;
    size_t dim = 0;

    const float* row(size_t i) const { return features.data() + i * dim; }
};

DatasetView make_view(const Corpus& corpus, int expect_dim, int num_classes) {
    DatasetView v;
    v.n = corpus.size();
    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto& rec = corpus.records[i];
        if (!rec.features) {
            throw ValidationError("record '" + rec.id + "' has no features");
        }
        if (!rec.label) {
            throw ValidationError("record '" + rec.id + "' has no label");
        }
        if (*rec.label < 0 || *rec.label >= num_classes) {
            throw ValidationError("record '" + rec.id + "' label " + std::to_string(*rec.label) +
                                  " outside [0," + std::to_string(num_classes) + ")");
        }
        if (i == 0) {
            v.dim = rec.features->size();
            if (expect_dim >= 0 && v.dim != static_cast<size_t>(expect_dim)) {
                throw ValidationError("record '" + rec.id + "' feature length " +
                                      std::to_string(v.dim) + " does not match model input dim " +
                                      std::to_string(expect_dim));
            }
            v.features.resize(v.n * v.dim);
        } else if (rec.features->size() != v.dim) {
            throw ValidationError("record '" + rec.id + "' feature length differs");
        }
        std::copy(rec.features->begin(), rec.features->end(), v.features.begin() + i * v.dim);
        v.labels.push_back(*rec.label);
        v.ids.push_back(&rec.id);
    }
    return v;
}

// log(sum(exp(logits))) against the max; returns the cross-entropy in double
double ce_loss(std::span<const float> logits, int label) {
    float m = logits[0];
    for (float l : logits) m = std::max(m, l);
    double lse = 0.0;
    for (float l : logits) lse += std::exp(static_cast<double>(l) - m);
    return std::log(lse) + static_cast<double>(m) - static_cast<double>(logits[label]);
}

int argmax_tie_low(std::span<const float> logits) {
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = static_cast<int>(i);
        }
    }
    return best;
}

struct GradBuf {
    std::vector<float> w0, b0, w1, b1;

    static GradBuf like(const TinyModel& m) {
        GradBuf g;
        g.w0.assign(m.params.tensors.at("w0").numel(), 0.0f);
        g.b0.assign(m.params.tensors.at("b0").numel(), 0.0f);
        if (m.layout == ModelLayout::mlp) {
            g.w1.assign(m.params.tensors.at("w1").numel(), 0.0f);
            g.b1.assign(m.params.tensors.at("b1").numel(), 0.0f);
        }
        return g;
    }

    void zero() {
        std::fill(w0.begin(), w0.end(), 0.0f);
        std::fill(b0.begin(), b0.end(), 0.0f);
        std::fill(w1.begin(), w1.end(), 0.0f);
        std::fill(b1.begin(), b1.end(), 0.0f);
    }
};

// adds scale * dCE/dtheta for one example
void accumulate_gradient(const TinyModel& model, const float* x, int label, float scale,
                         TinyModel::Forward& buf, GradBuf& g) {
    const Kernels& k = active_kernels();
    const size_t d = static_cast<size_t>(model.input_dim);
    const size_t c = static_cast<size_t>(model.num_classes);
    model.forward(std::span<const float>(x, d), buf);

    // softmax probabilities
    float m = buf.logits[0];
    for (float l : buf.logits) m = std::max(m, l);
    float z = 0.0f;
    std::vector<float> p(c);
    for (size_t i = 0; i < c; ++i) {
        p[i] = std::exp(buf.logits[i] - m);
        z += p[i];
    }
    for (size_t i = 0; i < c; ++i) {
        p[i] /= z;
    }
    std::vector<float> dlogit(c);
    for (size_t i = 0; i < c; ++i) {
        dlogit[i] = (p[i] - (static_cast<int>(i) == label ? 1.0f : 0.0f)) * scale;
    }

    if (model.layout == ModelLayout::linear) {
        for (size_t i = 0; i < c; ++i) {
            k.axpy(g.w0.data() + i * d, x, dlogit[i], d);
            g.b0[i] += dlogit[i];
        }
        return;
    }

    const size_t h = static_cast<size_t>(model.hidden_dim);
    const float* w1 = model.params.tensors.at("w1").values.data();
    std::vector<float> dhidden(h, 0.0f);
    for (size_t i = 0; i < c; ++i) {
        k.axpy(dhidden.data(), w1 + i * h, dlogit[i], h);
        k.axpy(g.w1.data() + i * h, buf.hidden.data(), dlogit[i], h);
        g.b1[i] += dlogit[i];
    }
    for (size_t j = 0; j < h; ++j) {
        const float dpre = dhidden[j] * (1.0f - buf.hidden[j] * buf.hidden[j]);
        k.axpy(g.w0.data() + j * d, x, dpre, d);
        g.b0[j] += dpre;
    }
}

struct LossSummary {
    double mean = 0.0;
    std::vector<double> per_class;
};

LossSummary dataset_loss(const TinyModel& model, const DatasetView& v) {
    LossSummary s;
    s.per_class.assign(static_cast<size_t>(model.num_classes), 0.0);
    std::vector<size_t> counts(static_cast<size_t>(model.num_classes), 0);
    TinyModel::Forward buf;
    double total = 0.0;
    for (size_t i = 0; i < v.n; ++i) {
        model.forward(std::span<const float>(v.row(i), v.dim), buf);
        double loss = ce_loss(buf.logits, v.labels[i]);
        total += loss;
        s.per_class[static_cast<size_t>(v.labels[i])] += loss;
        counts[static_cast<size_t>(v.labels[i])]++;
    }
    s.mean = v.n ? total / static_cast<double>(v.n) : 0.0;
    for (size_t c = 0; c < s.per_class.size(); ++c) {
        s.per_class[c] = counts[c] ? s.per_class[c] / static_cast<double>(counts[c]) : 0.0;
    }
    return s;
}

class Trainer {
  public:
    Trainer(TinyModel model, const TrainConfig& cfg)
        : model_(std::move(model)),
          cfg_(cfg),
          rng_(cfg.seed),
          grad_(GradBuf::like(model_)),
          vel_(GradBuf::like(model_)) {
        if (cfg.learning_rate <= 0.0) {
            throw ValidationError("train: learning_rate must be positive");
        }
        if (cfg.epochs < 0) {
            throw ValidationError("train: epochs must be >= 0");
        }
        if (cfg.batch_size < 1) {
            throw ValidationError("train: batch_size must be >= 1");
        }
        if (cfg.l2_coeff < 0.0) {
            throw ValidationError("train: l2_coeff must be >= 0");
        }
    }

    // the cosine schedule needs the full horizon before the first step
    void set_total_steps(size_t total) { total_steps_ = std::max<size_t>(total, 1); }

    // one pass over `indices` in a fresh shuffled order
    void run_pass(const DatasetView& v, std::vector<size_t> indices) {
        shuffle(indices, rng_);
        const size_t bs = static_cast<size_t>(cfg_.batch_size);
        for (size_t start = 0; start < indices.size(); start += bs) {
            const size_t end = std::min(start + bs, indices.size());
            grad_.zero();
            const float scale = 1.0f / static_cast<float>(end - start);
            for (size_t t = start; t < end; ++t) {
                accumulate_gradient(model_, v.row(indices[t]), v.labels[indices[t]], scale, buf_,
                                    grad_);
            }
            step();
        }
    }

    static size_t steps_per_pass(size_t rows, int batch_size) {
        const size_t bs = static_cast<size_t>(batch_size);
        return (rows + bs - 1) / bs;
    }

    TinyModel& model() { return model_; }

  private:
    double current_lr() const {
        if (cfg_.lr_schedule == LrSchedule::constant) {
            return cfg_.learning_rate;
        }
        const double progress =
            std::min(1.0, static_cast<double>(step_count_) / static_cast<double>(total_steps_));
        constexpr double pi = 3.14159265358979323846;
        return cfg_.learning_rate * 0.5 * (1.0 + std::cos(pi * progress));
    }

    void step() {
        const float lr = static_cast<float>(current_lr());
        ++step_count_;
        apply("w0", grad_.w0, vel_.w0, lr);
        apply("b0", grad_.b0, vel_.b0, lr);
        if (model_.layout == ModelLayout::mlp) {
            apply("w1", grad_.w1, vel_.w1, lr);
            apply("b1", grad_.b1, vel_.b1, lr);
        }
    }

    void apply(const char* name, std::vector<float>& g, std::vector<float>& vel, float lr) {
        const Kernels& k = active_kernels();
        Tensor& t = model_.params.tensors.at(name);
        const size_t n = t.numel();
        if (cfg_.l2_coeff > 0.0) {
            k.axpy(g.data(), t.values.data(), static_cast<float>(2.0 * cfg_.l2_coeff), n);
        }
        if (cfg_.optimizer == Optimizer::sgd) {
            k.axpy(t.values.data(), g.data(), -lr, n);
        } else {
            const float beta = static_cast<float>(cfg_.momentum_beta);
            for (size_t i = 0; i < n; ++i) {
                vel[i] = beta * vel[i] + g[i];
            }
            k.axpy(t.values.data(), vel.data(), -lr, n);
        }
    }

    TinyModel model_;
    TrainConfig cfg_;
    SplitMix64 rng_;
    GradBuf grad_, vel_;
    TinyModel::Forward buf_;
    size_t step_count_ = 0;
    size_t total_steps_ = 1;
};

void record(LossTrace& trace, const TinyModel& model, const DatasetView& train,
            const DatasetView* val) {
    LossCheckpointEntry e;
    LossSummary ts = dataset_loss(model, train);
    e.mean_train_loss = ts.mean;
    e.per_class_train_loss = ts.per_class;
    if (val) {
        LossSummary vs = dataset_loss(model, *val);
        e.mean_val_loss = vs.mean;
        e.per_class_val_loss = vs.per_class;
    } else {
        e.mean_val_loss = ts.mean;
        e.per_class_val_loss = ts.per_class;
    }
    trace.checkpoints.push_back(std::move(e));
}

}  // namespace

TrainResult train_submodel(const TinyModel& init, const Corpus& data, const TrainConfig& cfg,
                           const Corpus* val) {
    DatasetView train_view = make_view(data, init.input_dim, init.num_classes);
    std::optional<DatasetView> val_view;
    if (val) {
        val_view = make_view(*val, init.input_dim, init.num_classes);
    }

    Trainer trainer(init, cfg);
    trainer.set_total_steps(static_cast<size_t>(cfg.epochs) *
                            Trainer::steps_per_pass(train_view.n, cfg.batch_size));
    TrainResult result;
    record(result.trace, trainer.model(), train_view, val_view ? &*val_view : nullptr);

    std::vector<size_t> all(train_view.n);
    std::iota(all.begin(), all.end(), 0);
    for (int e = 0; e < cfg.epochs; ++e) {
        trainer.run_pass(train_view, all);
        record(result.trace, trainer.model(), train_view, val_view ? &*val_view : nullptr);
    }
    result.model = std::move(trainer.model());
    return result;
}

TrainResult train_pilot(const TinyModel& init, const Corpus& data, const TrainConfig& cfg,
                        int portions, int passes_per_portion) {
    if (portions < 2) {
        throw ValidationError("train_pilot: need at least 2 portions");
    }
    if (passes_per_portion < 1) {
        throw ValidationError("train_pilot: passes_per_portion must be >= 1");
    }
    DatasetView full_view = make_view(data, init.input_dim, init.num_classes);
    if (full_view.n < static_cast<size_t>(portions)) {
        throw ValidationError("train_pilot: corpus smaller than the portion count");
    }

    // one seeded shuffle fixes the portion membership; the last portion is
    // never trained on, it is the pilot's evaluation set
    std::vector<size_t> order(full_view.n);
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 portion_rng(derive_seed(cfg.seed, "portions"));
    shuffle(order, portion_rng);

    const size_t n = full_view.n;
    const size_t p = static_cast<size_t>(portions);
    const size_t holdout_begin = (p - 1) * n / p;

    auto subset_view = [&](size_t begin, size_t end) {
        DatasetView v;
        v.n = end - begin;
        v.dim = full_view.dim;
        v.features.resize(v.n * v.dim);
        for (size_t i = begin; i < end; ++i) {
            const size_t src = order[i];
            std::copy(full_view.features.begin() + static_cast<std::ptrdiff_t>(src * v.dim),
                      full_view.features.begin() + static_cast<std::ptrdiff_t>((src + 1) * v.dim),
                      v.features.begin() + static_cast<std::ptrdiff_t>((i - begin) * v.dim));
            v.labels.push_back(full_view.labels[src]);
            v.ids.push_back(full_view.ids[src]);
        }
        return v;
    };
    DatasetView train_view = subset_view(0, holdout_begin);
    DatasetView holdout_view = subset_view(holdout_begin, n);

    Trainer trainer(init, cfg);
    {
        size_t total = 0;
        for (size_t portion = 0; portion + 1 < p; ++portion) {
            const size_t rows = (portion + 1) * n / p - portion * n / p;
            total += static_cast<size_t>(passes_per_portion) *
                     Trainer::steps_per_pass(rows, cfg.batch_size);
        }
        trainer.set_total_steps(total);
    }
    TrainResult result;
    record(result.trace, trainer.model(), train_view, &holdout_view);

    for (size_t portion = 0; portion + 1 < p; ++portion) {
        const size_t begin = portion * n / p;
        const size_t end = (portion + 1) * n / p;
        std::vector<size_t> chunk(end - begin);
        std::iota(chunk.begin(), chunk.end(), begin);  // indices into train_view
        for (int pass = 0; pass < passes_per_portion; ++pass) {
            trainer.run_pass(train_view, chunk);
        }
        record(result.trace, trainer.model(), train_view, &holdout_view);
    }
    result.model = std::move(trainer.model());
    return result;
}

namespace {

EvalReport evaluate_logits(const std::function<void(size_t, TinyModel::Forward&)>& forward_row,
                           const DatasetView& v, int num_classes) {
    EvalReport report;
    report.per_class_loss.assign(static_cast<size_t>(num_classes), 0.0);
    std::vector<size_t> counts(static_cast<size_t>(num_classes), 0);
    std::vector<uint8_t> correct(v.n, 0);
    TinyModel::Forward buf;
    double total_loss = 0.0;
    size_t total_correct = 0;

    const auto t0 = std::chrono::steady_clock::now();
    for (size_t i = 0; i < v.n; ++i) {
        forward_row(i, buf);
        const int label = v.labels[i];
        const int pred = argmax_tie_low(buf.logits);
        correct[i] = pred == label ? 1 : 0;
        total_correct += correct[i];
        const double loss = ce_loss(buf.logits, label);
        total_loss += loss;
        report.per_class_loss[static_cast<size_t>(label)] += loss;
        counts[static_cast<size_t>(label)]++;
    }
    const auto t1 = std::chrono::steady_clock::now();

    report.wall_time_sec = std::chrono::duration<double>(t1 - t0).count();
    report.accuracy = v.n ? static_cast<double>(total_correct) / static_cast<double>(v.n) : 0.0;
    report.mean_loss = v.n ? total_loss / static_cast<double>(v.n) : 0.0;
    for (size_t c = 0; c < report.per_class_loss.size(); ++c) {
        report.per_class_loss[c] = counts[c] ? report.per_class_loss[c] / static_cast<double>(counts[c]) : 0.0;
    }
    for (size_t i = 0; i < v.n; ++i) {
        report.per_case_correct[*v.ids[i]] = correct[i] != 0;
    }
    return report;
}

}  // namespace

EvalReport evaluate(const TinyModel& model, const Corpus& data) {
    DatasetView v = make_view(data, model.input_dim, model.num_classes);
    return evaluate_logits(
        [&](size_t i, TinyModel::Forward& buf) {
            model.forward(std::span<const float>(v.row(i), v.dim), buf);
        },
        v, model.num_classes);
}

EvalReport ensemble_evaluate(std::span<const TinyModel> models, const Corpus& data) {
    if (models.empty()) {
        throw ValidationError("ensemble_evaluate requires at least one model");
    }
    for (const auto& m : models) {
        if (!m.same_structure(models[0])) {
            throw ValidationError("ensemble_evaluate: models have heterogeneous layouts");
        }
    }
    DatasetView v = make_view(data, models[0].input_dim, models[0].num_classes);
    const Kernels& k = active_kernels();
    const float inv = 1.0f / static_cast<float>(models.size());
    TinyModel::Forward member_buf;
    return evaluate_logits(
        [&](size_t i, TinyModel::Forward& buf) {
            buf.logits.assign(static_cast<size_t>(models[0].num_classes), 0.0f);
            for (const auto& m : models) {
                m.forward(std::span<const float>(v.row(i), v.dim), member_buf);
                k.axpy(buf.logits.data(), member_buf.logits.data(), inv, buf.logits.size());
            }
        },
        v, models[0].num_classes);
}

Checkpoint loss_gradient(const TinyModel& model, std::span<const float> x, int label) {
    if (label < 0 || label >= model.num_classes) {
        throw ValidationError("loss_gradient: label outside [0,C)");
    }
    GradBuf g = GradBuf::like(model);
    TinyModel::Forward buf;
    accumulate_gradient(model, x.data(), label, 1.0f, buf, g);

    Checkpoint out;
    auto put = [&](const char* name, std::vector<float>& values) {
        const Tensor& ref = model.params.tensors.at(name);
        out.tensors.emplace(name, Tensor::make(ref.dtype, ref.shape, std::move(values)));
    };
    put("w0", g.w0);
    put("b0", g.b0);
    if (model.layout == ModelLayout::mlp) {
        put("w1", g.w1);
        put("b1", g.b1);
    }
    return out;
}

Checkpoint estimate_fisher(const TinyModel& model, const Corpus& data, size_t sample_size,
                           uint64_t seed) {
    DatasetView v = make_view(data, model.input_dim, model.num_classes);
    if (sample_size == 0 || v.n == 0) {
        throw ValidationError("estimate_fisher: empty sample");
    }
    if (sample_size > v.n) {
        throw ValidationError("estimate_fisher: sample_size " + std::to_string(sample_size) +
                              " exceeds corpus size " + std::to_string(v.n));
    }

    std::vector<size_t> indices(v.n);
    std::iota(indices.begin(), indices.end(), 0);
    SplitMix64 rng(seed);
    shuffle(indices, rng);
    indices.resize(sample_size);

    // mean of squared per-example gradients, accumulated in double
    std::map<std::string, std::vector<double>> acc;
    for (const auto& [name, t] : model.params.tensors) {
        acc[name].assign(t.numel(), 0.0);
    }
    GradBuf g = GradBuf::like(model);
    TinyModel::Forward buf;
    for (size_t idx : indices) {
        g.zero();
        accumulate_gradient(model, v.row(idx), v.labels[idx], 1.0f, buf, g);
        auto add_sq = [&](const char* name, const std::vector<float>& grad) {
            std::vector<double>& a = acc[name];
            for (size_t i = 0; i < grad.size(); ++i) {
                a[i] += static_cast<double>(grad[i]) * static_cast<double>(grad[i]);
            }
        };
        add_sq("w0", g.w0);
        add_sq("b0", g.b0);
        if (model.layout == ModelLayout::mlp) {
            add_sq("w1", g.w1);
            add_sq("b1", g.b1);
        }
    }

    Checkpoint out;
    for (const auto& [name, t] : model.params.tensors) {
        const std::vector<double>& a = acc[name];
        std::vector<float> values(a.size());
        for (size_t i = 0; i < a.size(); ++i) {
            values[i] = static_cast<float>(a[i] / static_cast<double>(sample_size));
        }
        out.tensors.emplace(name, Tensor::make(t.dtype, t.shape, std::move(values)));
    }
    return out;
}

std::pair<Corpus, Corpus> generate_biased_dataset(const BiasSpec& spec) {
    if (spec.num_classes < 2) {
        throw ValidationError("generate_biased_dataset: need at least 2 classes");
    }
    if (spec.bias_strength < 0.0 || spec.bias_strength > 1.0) {
        throw ValidationError("generate_biased_dataset: bias_strength must lie in [0,1]");
    }
    if (spec.signal_dim < 1 || spec.clusters < 1) {
        throw ValidationError("generate_biased_dataset: signal_dim and clusters must be >= 1");
    }
    if (spec.samples_per_cluster < 1 || spec.val_samples < 0) {
        throw ValidationError("generate_biased_dataset: bad sample counts");
    }
    if (spec.noise < 0.0) {
        throw ValidationError("generate_biased_dataset: noise must be >= 0");
    }
    if (spec.label_skew < 0.0) {
        throw ValidationError("generate_biased_dataset: label_skew must be >= 0");
    }

    const int C = spec.num_classes;
    const int K = spec.clusters;
    const size_t dim = static_cast<size_t>(spec.feature_dim());

    // cumulative label distribution: p(c) proportional to (c+1)^-label_skew
    std::vector<double> label_cdf(static_cast<size_t>(C));
    {
        double total = 0.0;
        for (int c = 0; c < C; ++c) {
            total += std::pow(static_cast<double>(c + 1), -spec.label_skew);
            label_cdf[static_cast<size_t>(c)] = total;
        }
        for (auto& x : label_cdf) {
            x /= total;
        }
    }
    auto draw_label = [&](SplitMix64& rng) {
        const double u = rng.next_double();
        for (int c = 0; c < C; ++c) {
            if (u < label_cdf[static_cast<size_t>(c)]) {
                return c;
            }
        }
        return C - 1;
    };

    // class means on the unit sphere of the signal block
    SplitMix64 mean_rng(derive_seed(spec.seed, "means"));
    std::vector<std::vector<float>> means(static_cast<size_t>(C));
    for (auto& mu : means) {
        mu.resize(static_cast<size_t>(spec.signal_dim));
        double norm = 0.0;
        for (auto& x : mu) {
            x = static_cast<float>(mean_rng.next_gaussian());
            norm += static_cast<double>(x) * x;
        }
        norm = std::sqrt(std::max(norm, 1e-30));
        for (auto& x : mu) {
            x = static_cast<float>(x / norm);
        }
    }

    auto make_row = [&](SplitMix64& rng, int label, int bias_cluster, bool biased) {
        std::vector<float> f(dim, 0.0f);
        for (int t = 0; t < spec.signal_dim; ++t) {
            f[static_cast<size_t>(t)] =
                means[static_cast<size_t>(label)][static_cast<size_t>(t)] +
                static_cast<float>(spec.noise * rng.next_gaussian());
        }
        for (int block = 0; block < K; ++block) {
            int pos;
            if (biased && block == bias_cluster && rng.next_double() < spec.bias_strength) {
                pos = label;
            } else {
                pos = static_cast<int>(rng.next_below(static_cast<uint64_t>(C)));
            }
            f[static_cast<size_t>(spec.signal_dim + block * C + pos)] = 1.0f;
        }
        return f;
    };

    Corpus train;
    SplitMix64 train_rng(derive_seed(spec.seed, "train"));
    int row_id = 0;
    char idbuf[32];
    for (int cluster = 0; cluster < K; ++cluster) {
        for (int s = 0; s < spec.samples_per_cluster; ++s) {
            const int label = draw_label(train_rng);
            InstructionRecord rec;
            std::snprintf(idbuf, sizeof(idbuf), "train-%06d", row_id++);
            rec.id = idbuf;
            rec.instruction = "classify sample " + std::to_string(row_id - 1);
            rec.response = "class " + std::to_string(label);
            rec.features = make_row(train_rng, label, cluster, true);
            rec.label = label;
            rec.cluster = cluster;
            // cluster-aligned embedding so k-means dispersal can recover the
            // planted portions
            std::vector<float> emb(static_cast<size_t>(K), 0.0f);
            emb[static_cast<size_t>(cluster)] = 1.0f;
            double norm = 0.0;
            for (auto& e : emb) {
                e += static_cast<float>(0.05 * train_rng.next_gaussian());
                norm += static_cast<double>(e) * e;
            }
            norm = std::sqrt(std::max(norm, 1e-30));
            for (auto& e : emb) {
                e = static_cast<float>(e / norm);
            }
            rec.embedding = std::move(emb);
            train.records.push_back(std::move(rec));
        }
    }

    Corpus val;
    SplitMix64 val_rng(derive_seed(spec.seed, "val"));
    for (int s = 0; s < spec.val_samples; ++s) {
        const int label = draw_label(val_rng);
        InstructionRecord rec;
        std::snprintf(idbuf, sizeof(idbuf), "val-%06d", s);
        rec.id = idbuf;
        rec.instruction = "classify sample " + std::to_string(s);
        rec.response = "class " + std::to_string(label);
        rec.features = make_row(val_rng, label, -1, false);
        rec.label = label;
        std::vector<float> emb(static_cast<size_t>(K), 0.0f);
        double norm = 0.0;
        for (auto& e : emb) {
            e = static_cast<float>(val_rng.next_gaussian());
            norm += static_cast<double>(e) * e;
        }
        norm = std::sqrt(std::max(norm, 1e-30));
        for (auto& e : emb) {
            e = static_cast<float>(e / norm);
        }
        rec.embedding = std::move(emb);
        val.records.push_back(std::move(rec));
    }
    return {std::move(train), std::move(val)};
}

}  // namespace dtm
