// SPDX-License-Identifier: Apache-2.0

#include "dtm/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dtm/error.hpp"
#include "dtm/kernels.hpp"
#include "dtm/rng.hpp"

namespace dtm {

using nlohmann::json;

const char* merge_method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::average: return "average";
        case MergeMethod::fisher: return "fisher";
        case MergeMethod::task_vector: return "task_vector";
        case MergeMethod::ties: return "ties";
        case MergeMethod::dare: return "dare";
    }
    return "average";
}

MergeMethod merge_method_from_name(std::string_view name) {
    if (name == "average") return MergeMethod::average;
    if (name == "fisher") return MergeMethod::fisher;
    if (name == "task_vector") return MergeMethod::task_vector;
    if (name == "ties") return MergeMethod::ties;
    if (name == "dare") return MergeMethod::dare;
    throw ValidationError("unknown merge method '" + std::string(name) + "'");
}

MergeRecipe MergeRecipe::from_json(const json& obj) {
    MergeRecipe r;
    try {
        r.method = merge_method_from_name(obj.at("method").get<std::string>());
        if (obj.contains("alpha")) r.alpha = obj["alpha"].get<std::vector<double>>();
        if (obj.contains("lambda")) r.lambda = obj["lambda"].get<double>();
        r.density = obj.value("density", r.density);
        r.drop_rate = obj.value("drop_rate", r.drop_rate);
        r.epsilon = obj.value("epsilon", r.epsilon);
        r.seed = obj.value("seed", r.seed);
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad merge recipe: ") + e.what());
    }
    if (r.density <= 0.0 || r.density > 1.0) {
        throw ValidationError("merge recipe: density must lie in (0,1]");
    }
    if (r.drop_rate < 0.0 || r.drop_rate >= 1.0) {
        throw ValidationError("merge recipe: drop_rate must lie in [0,1)");
    }
    if (r.epsilon <= 0.0) {
        throw ValidationError("merge recipe: epsilon must be positive");
    }
    return r;
}

json MergeRecipe::to_json() const {
    json obj = {
        {"method", merge_method_name(method)},
        {"density", density},
        {"drop_rate", drop_rate},
        {"epsilon", epsilon},
        {"seed", seed},
    };
    if (alpha) obj["alpha"] = *alpha;
    if (lambda) obj["lambda"] = *lambda;
    return obj;
}

Checkpoint merge_average(std::span<const Checkpoint> models, std::span<const double> alpha) {
    if (models.empty()) {
        throw ValidationError("merge_average requires at least one model");
    }
    if (models.size() != alpha.size()) {
        throw ValidationError("merge_average: " + std::to_string(models.size()) + " models but " +
                              std::to_string(alpha.size()) + " weights");
    }
    double sum = 0.0;
    for (double a : alpha) {
        if (a < 0.0) {
            throw ValidationError("merge_average: negative weight " + std::to_string(a));
        }
        sum += a;
    }
    if (std::fabs(sum - 1.0) > 1e-6) {
        throw ValidationError("merge_average: weights sum to " + std::to_string(sum) +
                              ", expected 1");
    }
    require_compatible(models);

    const Kernels& k = active_kernels();
    Checkpoint out;
    for (const auto& [name, first] : models[0].tensors) {
        const size_t n = first.numel();
        std::vector<float> acc(n, 0.0f);
        std::vector<float> lo(first.values);
        std::vector<float> hi(first.values);
        for (size_t j = 0; j < models.size(); ++j) {
            const Tensor& t = models[j].tensors.at(name);
            k.axpy(acc.data(), t.values.data(), static_cast<float>(alpha[j]), n);
            if (j > 0) {
                k.min_inplace(lo.data(), t.values.data(), n);
                k.max_inplace(hi.data(), t.values.data(), n);
            }
        }
        // convex combinations stay inside the input envelope; clamping removes
        // the last-ulp rounding excursions
        k.clamp(acc.data(), lo.data(), hi.data(), n);
        out.tensors.emplace(name, Tensor::make(first.dtype, first.shape, std::move(acc)));
    }
    return out;
}

TaskVector extract_task_vector(const Checkpoint& model, const Checkpoint& base) {
    if (auto msg = incompatibility(model, base)) {
        throw ValidationError("incompatible checkpoints: " + *msg);
    }
    const Kernels& k = active_kernels();
    TaskVector out;
    for (const auto& [name, mt] : model.tensors) {
        const Tensor& bt = base.tensors.at(name);
        std::vector<float> diff(mt.numel());
        k.add_scaled(diff.data(), mt.values.data(), bt.values.data(), -1.0f, mt.numel());
        out.tensors.emplace(name, Tensor::make(mt.dtype, mt.shape, std::move(diff)));
    }
    return out;
}

Checkpoint merge_task_vectors(const Checkpoint& base, std::span<const TaskVector> taus,
                              double lambda) {
    if (taus.empty()) {
        throw ValidationError("merge_task_vectors requires at least one task vector");
    }
    for (const auto& tau : taus) {
        if (auto msg = incompatibility(base, tau)) {
            throw ValidationError("incompatible checkpoints: " + *msg);
        }
    }
    const Kernels& k = active_kernels();
    Checkpoint out;
    for (const auto& [name, bt] : base.tensors) {
        const size_t n = bt.numel();
        std::vector<float> acc(n, 0.0f);
        for (const auto& tau : taus) {
            k.axpy(acc.data(), tau.tensors.at(name).values.data(), 1.0f, n);
        }
        std::vector<float> merged(n);
        k.add_scaled(merged.data(), bt.values.data(), acc.data(), static_cast<float>(lambda), n);
        out.tensors.emplace(name, Tensor::make(bt.dtype, bt.shape, std::move(merged)));
    }
    return out;
}

namespace {

// keep the top ceil(density*n) entries by |value|, magnitude ties broken by
// lower flat index; returns the trimmed copy
std::vector<float> trim_tensor(const std::vector<float>& v, double density) {
    const size_t n = v.size();
    size_t keep = static_cast<size_t>(std::ceil(density * static_cast<double>(n)));
    if (keep >= n) {
        return v;
    }
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    auto stronger = [&](size_t a, size_t b) {
        float ma = std::fabs(v[a]);
        float mb = std::fabs(v[b]);
        if (ma != mb) return ma > mb;
        return a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), stronger);
    std::vector<float> out(n, 0.0f);
    for (size_t i = 0; i < keep; ++i) {
        out[idx[i]] = v[idx[i]];
    }
    return out;
}

}  // namespace

Checkpoint ties_merge(const Checkpoint& base, std::span<const TaskVector> taus, double density,
                      double lambda) {
    if (density <= 0.0 || density > 1.0) {
        throw ValidationError("ties_merge: density must lie in (0,1]");
    }
    if (taus.empty()) {
        throw ValidationError("ties_merge requires at least one task vector");
    }
    for (const auto& tau : taus) {
        if (auto msg = incompatibility(base, tau)) {
            throw ValidationError("incompatible checkpoints: " + *msg);
        }
    }

    const Kernels& k = active_kernels();
    Checkpoint out;
    for (const auto& [name, bt] : base.tensors) {
        const size_t n = bt.numel();
        std::vector<std::vector<float>> trimmed;
        trimmed.reserve(taus.size());
        for (const auto& tau : taus) {
            trimmed.push_back(trim_tensor(tau.tensors.at(name).values, density));
        }
        // elect a sign per coordinate, then average the entries agreeing with it
        std::vector<float> merged_tau(n, 0.0f);
        for (size_t i = 0; i < n; ++i) {
            float sum = 0.0f;
            for (const auto& t : trimmed) {
                sum += t[i];
            }
            const bool positive = sum >= 0.0f;  // exact zero elects positive
            float agree_sum = 0.0f;
            int agree_count = 0;
            for (const auto& t : trimmed) {
                float x = t[i];
                if (x == 0.0f) {
                    continue;
                }
                if ((x > 0.0f) == positive) {
                    agree_sum += x;
                    ++agree_count;
                }
            }
            merged_tau[i] = agree_count > 0 ? agree_sum / static_cast<float>(agree_count) : 0.0f;
        }
        std::vector<float> merged(n);
        k.add_scaled(merged.data(), bt.values.data(), merged_tau.data(), static_cast<float>(lambda), n);
        out.tensors.emplace(name, Tensor::make(bt.dtype, bt.shape, std::move(merged)));
    }
    return out;
}

TaskVector dare_transform(const TaskVector& tau, double drop_rate, uint64_t seed) {
    if (drop_rate < 0.0 || drop_rate >= 1.0) {
        throw ValidationError("dare_transform: drop_rate must lie in [0,1)");
    }
    const float rescale = static_cast<float>(1.0 / (1.0 - drop_rate));
    TaskVector out;
    out.metadata = tau.metadata;
    for (const auto& [name, t] : tau.tensors) {
        const uint64_t stream = derive_seed(seed, name);
        std::vector<float> values(t.numel());
        for (size_t i = 0; i < values.size(); ++i) {
            // counter-based draw keyed on the flat index: order independent
            const bool keep = counter_uniform(stream, i) >= drop_rate;
            values[i] = keep ? t.values[i] * rescale : 0.0f;
        }
        out.tensors.emplace(name, Tensor::make(t.dtype, t.shape, std::move(values)));
    }
    return out;
}

Checkpoint merge_fisher(std::span<const Checkpoint> models, std::span<const Checkpoint> fishers,
                        double epsilon) {
    if (models.empty()) {
        throw ValidationError("merge_fisher requires at least one model");
    }
    if (models.size() != fishers.size()) {
        throw ValidationError("merge_fisher: " + std::to_string(models.size()) + " models but " +
                              std::to_string(fishers.size()) + " fisher estimates");
    }
    require_compatible(models);
    for (size_t j = 0; j < fishers.size(); ++j) {
        if (auto msg = incompatibility(models[0], fishers[j])) {
            throw ValidationError("incompatible checkpoints: " + *msg);
        }
        for (const auto& [name, t] : fishers[j].tensors) {
            for (float v : t.values) {
                if (v < 0.0f) {
                    throw ValidationError("merge_fisher: fisher tensor '" + name +
                                          "' has a negative entry");
                }
            }
        }
    }

    const Kernels& k = active_kernels();
    Checkpoint out;
    for (const auto& [name, first] : models[0].tensors) {
        const size_t n = first.numel();
        std::vector<float> num(n, 0.0f);
        std::vector<float> den(n, 0.0f);
        for (size_t j = 0; j < models.size(); ++j) {
            const Tensor& mt = models[j].tensors.at(name);
            const Tensor& ft = fishers[j].tensors.at(name);
            k.mul_accum(num.data(), ft.values.data(), mt.values.data(), n);
            k.axpy(den.data(), ft.values.data(), 1.0f, n);
        }
        std::vector<float> merged(n);
        k.guarded_div(merged.data(), num.data(), den.data(), static_cast<float>(epsilon), n);
        out.tensors.emplace(name, Tensor::make(first.dtype, first.shape, std::move(merged)));
    }
    return out;
}

Checkpoint apply_recipe(const MergeRecipe& recipe, const Checkpoint* base,
                        std::span<const Checkpoint> models, std::span<const Checkpoint> fishers) {
    if (models.empty()) {
        throw ValidationError("apply_recipe requires at least one model");
    }
    const size_t kcount = models.size();
    const double lambda = recipe.lambda.value_or(1.0 / static_cast<double>(kcount));

    auto require_base = [&]() -> const Checkpoint& {
        if (!base) {
            throw ValidationError(std::string("merge method '") + merge_method_name(recipe.method) +
                                  "' requires a base checkpoint");
        }
        return *base;
    };

    switch (recipe.method) {
        case MergeMethod::average: {
            std::vector<double> alpha =
                recipe.alpha.value_or(std::vector<double>(kcount, 1.0 / static_cast<double>(kcount)));
            return merge_average(models, alpha);
        }
        case MergeMethod::fisher: {
            if (fishers.size() != kcount) {
                throw ValidationError("fisher merging needs one fisher checkpoint per model");
            }
            return merge_fisher(models, fishers, recipe.epsilon);
        }
        case MergeMethod::task_vector: {
            const Checkpoint& b = require_base();
            std::vector<TaskVector> taus;
            taus.reserve(kcount);
            for (const auto& m : models) {
                taus.push_back(extract_task_vector(m, b));
            }
            return merge_task_vectors(b, taus, lambda);
        }
        case MergeMethod::ties: {
            const Checkpoint& b = require_base();
            std::vector<TaskVector> taus;
            taus.reserve(kcount);
            for (const auto& m : models) {
                taus.push_back(extract_task_vector(m, b));
            }
            return ties_merge(b, taus, recipe.density, lambda);
        }
        case MergeMethod::dare: {
            const Checkpoint& b = require_base();
            std::vector<TaskVector> taus;
            taus.reserve(kcount);
            for (size_t j = 0; j < kcount; ++j) {
                TaskVector tau = extract_task_vector(models[j], b);
                taus.push_back(dare_transform(tau, recipe.drop_rate, derive_seed(recipe.seed, j)));
            }
            return merge_task_vectors(b, taus, lambda);
        }
    }
    throw ValidationError("unhandled merge method");
}

}  // namespace dtm
