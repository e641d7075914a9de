// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "dtm/error.hpp"
#include "dtm/merge.hpp"
#include "dtm/rng.hpp"
#include "test_util.hpp"

using namespace dtm;

namespace {

Checkpoint single(std::vector<float> v, Dtype dtype = Dtype::f32) {
    const int64_t n = static_cast<int64_t>(v.size());
    Checkpoint c;
    c.tensors.emplace("w", Tensor::make(dtype, {n}, std::move(v)));
    return c;
}

const std::vector<float>& vals(const Checkpoint& c) { return c.tensors.at("w").values; }

// Straightforward reference TIES: full sort for the trim, explicit loops for
// elect and disjoint mean, computed in double. Independent of the library's
// nth_element implementation.
std::vector<double> ties_reference(const std::vector<std::vector<double>>& taus, double density) {
    const size_t n = taus[0].size();
    std::vector<std::vector<double>> trimmed;
    for (const auto& tau : taus) {
        const size_t keep = static_cast<size_t>(std::ceil(density * static_cast<double>(n)));
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
            double ma = std::fabs(tau[a]);
            double mb = std::fabs(tau[b]);
            if (ma != mb) return ma > mb;
            return a < b;
        });
        std::vector<double> t(n, 0.0);
        for (size_t i = 0; i < std::min(keep, n); ++i) {
            t[idx[i]] = tau[idx[i]];
        }
        trimmed.push_back(std::move(t));
    }
    std::vector<double> merged(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (const auto& t : trimmed) sum += t[i];
        const bool positive = sum >= 0.0;
        double agree = 0.0;
        int count = 0;
        for (const auto& t : trimmed) {
            if (t[i] == 0.0) continue;
            if ((t[i] > 0.0) == positive) {
                agree += t[i];
                ++count;
            }
        }
        merged[i] = count ? agree / count : 0.0;
    }
    return merged;
}

}  // namespace

TEST_CASE("merge_average spec examples") {
    SUBCASE("uniform quarter weights give the arithmetic mean") {
        Checkpoint models[4] = {single({1, 2}), single({3, 4}), single({5, 6}), single({7, 8})};
        const double alpha[4] = {0.25, 0.25, 0.25, 0.25};
        Checkpoint out = merge_average(models, alpha);
        CHECK(vals(out) == std::vector<float>{4.0f, 5.0f});
    }
    SUBCASE("unit weight vector returns the selected model exactly") {
        Checkpoint models[3] = {single({1.25f, -9}), single({3.5f, 0.125f}), single({5, 6})};
        const double alpha[3] = {0.0, 1.0, 0.0};
        Checkpoint out = merge_average(models, alpha);
        CHECK(vals(out) == vals(models[1]));
    }
    SUBCASE("identical models are a fixed point") {
        Checkpoint models[4] = {single({0.3f, -1.7f}), single({0.3f, -1.7f}), single({0.3f, -1.7f}),
                                single({0.3f, -1.7f})};
        const double alpha[4] = {0.25, 0.25, 0.25, 0.25};
        Checkpoint out = merge_average(models, alpha);
        for (size_t i = 0; i < 2; ++i) {
            CHECK(static_cast<double>(vals(out)[i]) ==
                  doctest::Approx(static_cast<double>(vals(models[0])[i])).epsilon(1e-6));
        }
    }
    SUBCASE("weight validation") {
        Checkpoint models[2] = {single({1}), single({2})};
        const double bad_sum[2] = {0.6, 0.6};
        CHECK_THROWS_AS(merge_average(models, bad_sum), ValidationError);
        const double negative[2] = {1.5, -0.5};
        CHECK_THROWS_AS(merge_average(models, negative), ValidationError);
        const double within_tolerance[2] = {0.5 + 4e-7, 0.5};
        CHECK_NOTHROW(merge_average(models, within_tolerance));
    }
}

TEST_CASE("merge_average output stays inside the input envelope") {
    SplitMix64 rng(5150);
    for (int trial = 0; trial < 200; ++trial) {
        const size_t n = 1 + rng.next_below(33);
        const size_t k = 2 + rng.next_below(4);
        std::vector<Checkpoint> models;
        for (size_t j = 0; j < k; ++j) {
            models.push_back(single(dtm_test::random_values(rng, n)));
        }
        std::vector<double> alpha(k);
        double sum = 0.0;
        for (auto& a : alpha) {
            a = rng.next_double();
            sum += a;
        }
        for (auto& a : alpha) a /= sum;
        Checkpoint out = merge_average(models, alpha);
        for (size_t i = 0; i < n; ++i) {
            float lo = vals(models[0])[i];
            float hi = lo;
            for (size_t j = 1; j < k; ++j) {
                lo = std::min(lo, vals(models[j])[i]);
                hi = std::max(hi, vals(models[j])[i]);
            }
            CHECK(vals(out)[i] >= lo);
            CHECK(vals(out)[i] <= hi);
        }
    }
}

TEST_CASE("task vector extraction and application") {
    SUBCASE("subtraction") {
        TaskVector tau = extract_task_vector(single({3, 0}), single({1, 1}));
        CHECK(vals(tau) == std::vector<float>{2.0f, -1.0f});
    }
    SUBCASE("model equal to base gives a zero vector") {
        TaskVector tau = extract_task_vector(single({4, 5}), single({4, 5}));
        CHECK(vals(tau) == std::vector<float>{0.0f, 0.0f});
    }
    SUBCASE("extract then apply with lambda 1 reconstructs the model") {
        Checkpoint base = single({1.5f, -2.0f, 0.25f});
        Checkpoint model = single({3.5f, 1.0f, -0.75f});
        TaskVector tau = extract_task_vector(model, base);
        Checkpoint back = merge_task_vectors(base, {&tau, 1}, 1.0);
        CHECK(vals(back) == vals(model));
    }
    SUBCASE("incompatible inputs") {
        CHECK_THROWS_AS(extract_task_vector(single({1}), single({1, 2})), ValidationError);
    }
}

TEST_CASE("merge_task_vectors spec examples") {
    SUBCASE("arithmetic") {
        TaskVector taus[2] = {single({2, 0}), single({0, 2})};
        Checkpoint out = merge_task_vectors(single({0, 0}), taus, 0.5);
        CHECK(vals(out) == std::vector<float>{1.0f, 1.0f});
    }
    SUBCASE("all-zero task vectors return the base") {
        TaskVector taus[2] = {single({0, 0}), single({0, 0})};
        Checkpoint out = merge_task_vectors(single({3, -4}), taus, 7.5);
        CHECK(vals(out) == std::vector<float>{3.0f, -4.0f});
    }
    SUBCASE("K identical models with lambda 1/K reconstruct that model") {
        Checkpoint base = single({1.0f, 2.0f, -0.5f});
        Checkpoint model = single({2.5f, -1.0f, 0.75f});
        std::vector<TaskVector> taus;
        for (int j = 0; j < 4; ++j) taus.push_back(extract_task_vector(model, base));
        Checkpoint out = merge_task_vectors(base, taus, 0.25);
        for (size_t i = 0; i < 3; ++i) {
            CHECK(static_cast<double>(vals(out)[i]) ==
                  doctest::Approx(static_cast<double>(vals(model)[i])).epsilon(1e-6));
        }
    }
}

TEST_CASE("ties_merge hand-computed spec examples") {
    SUBCASE("two 2d vectors, density 1") {
        // dim0: sum 4 elects +, agreeing {1,3} -> 2; dim1: sum -1 elects -, agreeing {-2} -> -2
        TaskVector taus[2] = {single({1, -2}), single({3, 1})};
        Checkpoint out = ties_merge(single({0, 0}), taus, 1.0, 1.0);
        CHECK(vals(out) == std::vector<float>{2.0f, -2.0f});
    }
    SUBCASE("trim keeps the top half by magnitude") {
        // density 0.5 on [0.1,-2,0.5,3] keeps {-2, 3}
        TaskVector tau = single({0.1f, -2, 0.5f, 3});
        Checkpoint out = ties_merge(single({0, 0, 0, 0}), {&tau, 1}, 0.5, 1.0);
        CHECK(vals(out) == std::vector<float>{0.0f, -2.0f, 0.0f, 3.0f});
    }
    SUBCASE("single model at density 1 equals task-vector merging") {
        Checkpoint base = single({0.5f, -0.25f, 1.0f});
        TaskVector tau = single({1.5f, 2.5f, -3.0f});
        Checkpoint via_ties = ties_merge(base, {&tau, 1}, 1.0, 1.0);
        Checkpoint via_tv = merge_task_vectors(base, {&tau, 1}, 1.0);
        CHECK(vals(via_ties) == vals(via_tv));
    }
    SUBCASE("zero-sum coordinate elects positive") {
        TaskVector taus[2] = {single({2}), single({-2})};
        Checkpoint out = ties_merge(single({0}), taus, 1.0, 1.0);
        CHECK(vals(out) == std::vector<float>{2.0f});
    }
    SUBCASE("density validation") {
        TaskVector tau = single({1});
        Checkpoint base = single({0});
        CHECK_THROWS_AS(ties_merge(base, {&tau, 1}, 0.0, 1.0), ValidationError);
        CHECK_THROWS_AS(ties_merge(base, {&tau, 1}, 1.1, 1.0), ValidationError);
    }
}

TEST_CASE("ties_merge matches the straightforward reference on random integer vectors") {
    SplitMix64 rng(31337);
    const double densities[] = {0.25, 0.5, 0.75, 1.0};
    for (int trial = 0; trial < 300; ++trial) {
        const size_t n = 8;
        std::vector<std::vector<double>> ref_taus(2, std::vector<double>(n));
        std::vector<TaskVector> taus;
        for (auto& tau : ref_taus) {
            std::vector<float> v(n);
            for (size_t i = 0; i < n; ++i) {
                tau[i] = static_cast<double>(static_cast<int>(rng.next_below(5))) - 2.0;
                v[i] = static_cast<float>(tau[i]);
            }
            taus.push_back(single(v));
        }
        const double density = densities[rng.next_below(4)];
        Checkpoint out = ties_merge(single(std::vector<float>(n, 0.0f)), taus, density, 1.0);
        std::vector<double> expect = ties_reference(ref_taus, density);
        for (size_t i = 0; i < n; ++i) {
            CHECK(static_cast<double>(vals(out)[i]) == expect[i]);
        }
    }
}

TEST_CASE("ties sign property: merged coordinates carry the elected sign or are zero") {
    SplitMix64 rng(999);
    for (int trial = 0; trial < 100; ++trial) {
        const size_t n = 16;
        std::vector<TaskVector> taus;
        std::vector<std::vector<float>> raw;
        for (int j = 0; j < 3; ++j) {
            raw.push_back(dtm_test::random_values(rng, n));
            taus.push_back(single(raw.back()));
        }
        Checkpoint out = ties_merge(single(std::vector<float>(n, 0.0f)), taus, 1.0, 1.0);
        for (size_t i = 0; i < n; ++i) {
            float sum = raw[0][i] + raw[1][i] + raw[2][i];
            const bool positive = sum >= 0.0f;
            float merged = vals(out)[i];
            if (merged != 0.0f) {
                CHECK((merged > 0.0f) == positive);
            }
        }
    }
}

TEST_CASE("dare_transform spec examples") {
    SUBCASE("p=0 is the identity") {
        TaskVector tau = single({1.5f, -2.5f, 0.0f, 3.25f});
        TaskVector out = dare_transform(tau, 0.0, 42);
        CHECK(vals(out) == vals(tau));
    }
    SUBCASE("p=0.5 doubles every survivor") {
        SplitMix64 value_rng(3);
        TaskVector tau = single(dtm_test::random_values(value_rng, 64));
        TaskVector out = dare_transform(tau, 0.5, 7);
        bool any_zero = false, any_kept = false;
        for (size_t i = 0; i < 64; ++i) {
            if (vals(out)[i] == 0.0f) {
                any_zero = true;
            } else {
                CHECK(vals(out)[i] == vals(tau)[i] * 2.0f);
                any_kept = true;
            }
        }
        CHECK(any_zero);
        CHECK(any_kept);
    }
    SUBCASE("deterministic given the seed") {
        TaskVector tau = single({1, 2, 3, 4, 5, 6, 7, 8});
        CHECK(vals(dare_transform(tau, 0.3, 11)) == vals(dare_transform(tau, 0.3, 11)));
        CHECK(vals(dare_transform(tau, 0.3, 11)) != vals(dare_transform(tau, 0.3, 12)));
    }
    SUBCASE("drop rate validation") {
        TaskVector tau = single({1});
        CHECK_THROWS_AS(dare_transform(tau, 1.0, 0), ValidationError);
        CHECK_THROWS_AS(dare_transform(tau, -0.1, 0), ValidationError);
    }
}

TEST_CASE("dare is unbiased in expectation (small monte-carlo)") {
    SplitMix64 rng(4242);
    const size_t n = 64;
    std::vector<float> base = dtm_test::random_values(rng, n, 0.5f, 2.0f);
    TaskVector tau = single(base);
    std::vector<double> acc(n, 0.0);
    const int draws = 2000;
    for (int s = 0; s < draws; ++s) {
        TaskVector out = dare_transform(tau, 0.5, static_cast<uint64_t>(s));
        for (size_t i = 0; i < n; ++i) acc[i] += vals(out)[i];
    }
    for (size_t i = 0; i < n; ++i) {
        const double mean = acc[i] / draws;
        CHECK(mean == doctest::Approx(base[i]).epsilon(0.12));
    }
}

TEST_CASE("merge_fisher spec examples") {
    SUBCASE("hand-computed elementwise fisher average") {
        Checkpoint models[2] = {single({1, 0}), single({3, 4})};
        Checkpoint fishers[2] = {single({3, 1}), single({1, 1})};
        Checkpoint out = merge_fisher(models, fishers, 1e-12);
        CHECK(static_cast<double>(vals(out)[0]) == doctest::Approx(1.5).epsilon(1e-6));
        CHECK(static_cast<double>(vals(out)[1]) == doctest::Approx(2.0).epsilon(1e-6));
    }
    SUBCASE("equal fishers reduce to the arithmetic mean") {
        Checkpoint models[2] = {single({1, 5}), single({3, -1})};
        Checkpoint fishers[2] = {single({0.7f, 0.7f}), single({0.7f, 0.7f})};
        Checkpoint out = merge_fisher(models, fishers, 1e-8);
        CHECK(static_cast<double>(vals(out)[0]) == doctest::Approx(2.0).epsilon(1e-6));
        CHECK(static_cast<double>(vals(out)[1]) == doctest::Approx(2.0).epsilon(1e-6));
    }
    SUBCASE("all-zero fishers fall back to zero via the epsilon guard") {
        Checkpoint models[2] = {single({5, -5}), single({7, 9})};
        Checkpoint fishers[2] = {single({0, 0}), single({0, 0})};
        Checkpoint out = merge_fisher(models, fishers, 1e-8);
        CHECK(vals(out)[0] == 0.0f);
        CHECK(vals(out)[1] == 0.0f);
    }
    SUBCASE("negative fisher entries are rejected") {
        Checkpoint models[1] = {single({1})};
        Checkpoint fishers[1] = {single({-0.5f})};
        CHECK_THROWS_AS(merge_fisher(models, fishers, 1e-8), ValidationError);
    }
}

TEST_CASE("merges are invariant to sub-model ordering") {
    SplitMix64 rng(606);
    const size_t n = 24;
    std::vector<Checkpoint> models;
    std::vector<Checkpoint> fishers;
    for (int j = 0; j < 3; ++j) {
        models.push_back(single(dtm_test::random_values(rng, n)));
        fishers.push_back(single(dtm_test::random_values(rng, n, 0.0f, 2.0f)));
    }
    Checkpoint base = single(dtm_test::random_values(rng, n));
    std::vector<double> alpha = {0.2, 0.3, 0.5};

    std::vector<size_t> perm = {2, 0, 1};
    std::vector<Checkpoint> pm, pf;
    std::vector<double> pa;
    for (size_t j : perm) {
        pm.push_back(models[j]);
        pf.push_back(fishers[j]);
        pa.push_back(alpha[j]);
    }

    auto check_close = [&](const Checkpoint& a, const Checkpoint& b) {
        for (size_t i = 0; i < n; ++i) {
            CHECK(static_cast<double>(vals(a)[i]) ==
                  doctest::Approx(static_cast<double>(vals(b)[i])).epsilon(1e-6));
        }
    };

    check_close(merge_average(models, alpha), merge_average(pm, pa));
    check_close(merge_fisher(models, fishers, 1e-8), merge_fisher(pm, pf, 1e-8));

    std::vector<TaskVector> taus, ptaus;
    for (size_t j = 0; j < 3; ++j) taus.push_back(extract_task_vector(models[j], base));
    for (size_t j : perm) ptaus.push_back(extract_task_vector(models[j], base));
    check_close(merge_task_vectors(base, taus, 0.5), merge_task_vectors(base, ptaus, 0.5));
    check_close(ties_merge(base, taus, 0.6, 0.5), ties_merge(base, ptaus, 0.6, 0.5));
}

TEST_CASE("recipe JSON round trip and validation") {
    MergeRecipe r;
    r.method = MergeMethod::ties;
    r.alpha = std::vector<double>{0.5, 0.5};
    r.lambda = 0.7;
    r.density = 0.4;
    r.seed = 99;
    MergeRecipe back = MergeRecipe::from_json(r.to_json());
    CHECK(back.method == MergeMethod::ties);
    CHECK(*back.alpha == *r.alpha);
    CHECK(*back.lambda == 0.7);
    CHECK(back.density == 0.4);
    CHECK(back.seed == 99);

    CHECK_THROWS_AS(MergeRecipe::from_json({{"method", "nope"}}), ValidationError);
    CHECK_THROWS_AS(MergeRecipe::from_json({{"method", "ties"}, {"density", 0.0}}), ValidationError);
    CHECK_THROWS_AS(MergeRecipe::from_json({{"method", "dare"}, {"drop_rate", 1.0}}), ValidationError);
}

TEST_CASE("apply_recipe dispatches and validates per method") {
    Checkpoint base = single({0, 0});
    std::vector<Checkpoint> models = {single({2, 0}), single({0, 2})};

    MergeRecipe avg;  // default: average, uniform alpha
    Checkpoint out = apply_recipe(avg, nullptr, models);
    CHECK(vals(out) == std::vector<float>{1.0f, 1.0f});

    MergeRecipe tv;
    tv.method = MergeMethod::task_vector;  // default lambda 1/K makes this match averaging
    Checkpoint out_tv = apply_recipe(tv, &base, models);
    CHECK(vals(out_tv) == std::vector<float>{1.0f, 1.0f});

    CHECK_THROWS_WITH_AS(apply_recipe(tv, nullptr, models), doctest::Contains("base"),
                         ValidationError);

    MergeRecipe fisher;
    fisher.method = MergeMethod::fisher;
    CHECK_THROWS_AS(apply_recipe(fisher, nullptr, models), ValidationError);

    MergeRecipe dare;
    dare.method = MergeMethod::dare;
    dare.drop_rate = 0.0;  // identity transform, so the result is exact
    Checkpoint out_dare = apply_recipe(dare, &base, models);
    CHECK(vals(out_dare) == std::vector<float>{1.0f, 1.0f});
}
