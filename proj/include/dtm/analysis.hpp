// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dtm/bias_lab.hpp"

namespace dtm {

// delta(train)/delta(val) for one consecutive checkpoint pair; degenerate
// marks |delta(val)| < 1e-9, where the ratio is meaningless
struct LossRatio {
    double ratio = 0.0;
    bool degenerate = false;
};

inline constexpr double kRatioGuard = 1e-9;

// one entry per consecutive checkpoint pair; reductions are signed
std::vector<LossRatio> loss_ratio_trace(const LossTrace& trace);

// Spearman's rho with average ranks for ties; throws ValidationError when
// either input has zero rank variance
double spearman_rho(std::span<const double> x, std::span<const double> y);

// rho between the per-class train and val loss reductions from checkpoint t0
// to t1
double per_class_spearman(const LossTrace& trace, size_t t0, size_t t1);

struct BiasContributor {
    int class_index = 0;
    double gap = 0.0;  // train reduction minus val reduction, first to last checkpoint
};

// classes sorted by descending gap, ties by class index; k must be <= C
std::vector<BiasContributor> top_bias_contributors(const LossTrace& trace, size_t k);

struct ErrorSets {
    std::set<std::string> universe;
    std::vector<std::set<std::string>> per_model;
};

// universe from the reports' case ids; error set j holds the cases model j
// answered incorrectly
ErrorSets error_sets_from_reports(std::span<const EvalReport> reports);

struct Bucket {
    int appearances = 0;  // number of error sets containing the case
    size_t count = 0;
    double accuracy = 0.0;  // 0 for empty buckets
};

// fused-model accuracy per appearance count n in [0, K]
std::vector<Bucket> bucket_accuracy(const ErrorSets& errs, const EvalReport& fused);

// fraction of the error-set union per membership signature; key character j
// is '1' when the case lies in model j's error set; fractions sum to 1
std::map<std::string, double> venn_fractions(const ErrorSets& errs);

// JSON round trips for the report types
nlohmann::json loss_trace_to_json(const LossTrace& trace);
LossTrace loss_trace_from_json(const nlohmann::json& obj);
nlohmann::json eval_report_to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& obj);
nlohmann::json error_sets_to_json(const ErrorSets& errs);
ErrorSets error_sets_from_json(const nlohmann::json& obj);

nlohmann::json load_json_file(const std::filesystem::path& path);
void save_json_file(const nlohmann::json& obj, const std::filesystem::path& path);
void save_text_file(const std::string& text, const std::filesystem::path& path);

}  // namespace dtm
