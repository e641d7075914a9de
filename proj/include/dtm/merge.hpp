// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dtm/tensor.hpp"

namespace dtm {

enum class MergeMethod { average, fisher, task_vector, ties, dare };

const char* merge_method_name(MergeMethod m);
MergeMethod merge_method_from_name(std::string_view name);

// Method selector plus every knob the merge family needs. alpha applies to
// averaging; lambda scales the task-vector family and defaults to 1/K so
// task-vector merging of a shared base coincides with plain averaging.
struct MergeRecipe {
    MergeMethod method = MergeMethod::average;
    std::optional<std::vector<double>> alpha;
    std::optional<double> lambda;
    double density = 0.2;     // TIES: fraction of entries kept per tensor
    double drop_rate = 0.5;   // DARE: per-entry drop probability
    double epsilon = 1e-8;    // Fisher: denominator guard
    uint64_t seed = 0;        // DARE randomness

    static MergeRecipe from_json(const nlohmann::json& obj);
    nlohmann::json to_json() const;
};

// elementwise convex combination; requires sum(alpha)=1 within 1e-6 and all
// alpha >= 0; every output element is clamped into the inputs' min/max
Checkpoint merge_average(std::span<const Checkpoint> models, std::span<const double> alpha);

// tau = model - base, elementwise
TaskVector extract_task_vector(const Checkpoint& model, const Checkpoint& base);

// base + lambda * sum(taus)
Checkpoint merge_task_vectors(const Checkpoint& base, std::span<const TaskVector> taus, double lambda);

// trim to the top ceil(density*n) magnitudes per tensor, elect a sign per
// coordinate (zero sum elects positive), average the sign-matching entries,
// then return base + lambda * merged_tau
Checkpoint ties_merge(const Checkpoint& base, std::span<const TaskVector> taus, double density,
                      double lambda);

// drop each entry with probability drop_rate, rescale survivors by
// 1/(1-drop_rate); one PRNG stream per tensor name so the result does not
// depend on iteration order
TaskVector dare_transform(const TaskVector& tau, double drop_rate, uint64_t seed);

// per element: sum(F_j * M_j) / (sum(F_j) + eps)
Checkpoint merge_fisher(std::span<const Checkpoint> models, std::span<const Checkpoint> fishers,
                        double epsilon);

// dispatch on recipe.method; base required for the task-vector family,
// fishers required for fisher merging
Checkpoint apply_recipe(const MergeRecipe& recipe, const Checkpoint* base,
                        std::span<const Checkpoint> models, std::span<const Checkpoint> fishers = {});

}  // namespace dtm
