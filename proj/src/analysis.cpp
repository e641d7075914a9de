// SPDX-License-Identifier: Apache-2.0

#include "dtm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dtm/error.hpp"

namespace dtm {

using nlohmann::json;

std::vector<LossRatio> loss_ratio_trace(const LossTrace& trace) {
    if (trace.checkpoints.size() < 2) {
        throw ValidationError("loss_ratio_trace: need at least 2 checkpoints");
    }
    std::vector<LossRatio> out;
    out.reserve(trace.checkpoints.size() - 1);
    for (size_t t = 1; t < trace.checkpoints.size(); ++t) {
        const double d_train =
            trace.checkpoints[t - 1].mean_train_loss - trace.checkpoints[t].mean_train_loss;
        const double d_val =
            trace.checkpoints[t - 1].mean_val_loss - trace.checkpoints[t].mean_val_loss;
        LossRatio r;
        if (std::fabs(d_val) < kRatioGuard) {
            r.degenerate = true;
            r.ratio = 0.0;
        } else {
            r.ratio = d_train / d_val;
        }
        out.push_back(r);
    }
    return out;
}

namespace {

// fractional ranks, 1-based, ties averaged
std::vector<double> fractional_ranks(std::span<const double> v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) {
            ++j;
        }
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t t = i; t <= j; ++t) {
            ranks[idx[t]] = avg;
        }
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman_rho(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw ValidationError("spearman_rho: input lengths differ");
    }
    if (x.size() < 2) {
        throw ValidationError("spearman_rho: need at least 2 observations");
    }
    std::vector<double> rx = fractional_ranks(x);
    std::vector<double> ry = fractional_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double num = 0.0, vx = 0.0, vy = 0.0;
    for (size_t i = 0; i < rx.size(); ++i) {
        const double a = rx[i] - mx;
        const double b = ry[i] - my;
        num += a * b;
        vx += a * a;
        vy += b * b;
    }
    if (vx <= 0.0 || vy <= 0.0) {
        throw ValidationError("spearman_rho: undefined correlation (zero rank variance)");
    }
    return num / std::sqrt(vx * vy);
}

namespace {

void check_checkpoint_index(const LossTrace& trace, size_t t) {
    if (t >= trace.checkpoints.size()) {
        throw ValidationError("loss trace has " + std::to_string(trace.checkpoints.size()) +
                              " checkpoints, index " + std::to_string(t) + " is out of range");
    }
}

}  // namespace

double per_class_spearman(const LossTrace& trace, size_t t0, size_t t1) {
    check_checkpoint_index(trace, t0);
    check_checkpoint_index(trace, t1);
    const auto& a = trace.checkpoints[t0];
    const auto& b = trace.checkpoints[t1];
    const size_t c = a.per_class_train_loss.size();
    if (c < 2 || b.per_class_train_loss.size() != c || a.per_class_val_loss.size() != c ||
        b.per_class_val_loss.size() != c) {
        throw ValidationError("per_class_spearman: need >= 2 classes with consistent vectors");
    }
    std::vector<double> train_red(c), val_red(c);
    for (size_t i = 0; i < c; ++i) {
        train_red[i] = a.per_class_train_loss[i] - b.per_class_train_loss[i];
        val_red[i] = a.per_class_val_loss[i] - b.per_class_val_loss[i];
    }
    return spearman_rho(train_red, val_red);
}

std::vector<BiasContributor> top_bias_contributors(const LossTrace& trace, size_t k) {
    if (trace.checkpoints.size() < 2) {
        throw ValidationError("top_bias_contributors: need at least 2 checkpoints");
    }
    const auto& first = trace.checkpoints.front();
    const auto& last = trace.checkpoints.back();
    const size_t c = first.per_class_train_loss.size();
    if (k > c) {
        throw ValidationError("top_bias_contributors: k=" + std::to_string(k) + " exceeds class count " +
                              std::to_string(c));
    }
    std::vector<BiasContributor> all(c);
    for (size_t i = 0; i < c; ++i) {
        const double train_red = first.per_class_train_loss[i] - last.per_class_train_loss[i];
        const double val_red = first.per_class_val_loss[i] - last.per_class_val_loss[i];
        all[i] = {static_cast<int>(i), train_red - val_red};
    }
    std::sort(all.begin(), all.end(), [](const BiasContributor& a, const BiasContributor& b) {
        if (a.gap != b.gap) return a.gap > b.gap;
        return a.class_index < b.class_index;
    });
    all.resize(k);
    return all;
}

ErrorSets error_sets_from_reports(std::span<const EvalReport> reports) {
    ErrorSets errs;
    errs.per_model.resize(reports.size());
    for (size_t j = 0; j < reports.size(); ++j) {
        for (const auto& [id, correct] : reports[j].per_case_correct) {
            errs.universe.insert(id);
            if (!correct) {
                errs.per_model[j].insert(id);
            }
        }
    }
    for (const auto& s : errs.per_model) {
        for (const auto& id : s) {
            if (!errs.universe.count(id)) {
                throw ValidationError("error set contains id '" + id + "' outside the universe");
            }
        }
    }
    return errs;
}

std::vector<Bucket> bucket_accuracy(const ErrorSets& errs, const EvalReport& fused) {
    const size_t k = errs.per_model.size();
    std::vector<Bucket> buckets(k + 1);
    std::vector<size_t> correct(k + 1, 0);
    for (size_t n = 0; n <= k; ++n) {
        buckets[n].appearances = static_cast<int>(n);
    }
    for (const auto& id : errs.universe) {
        auto it = fused.per_case_correct.find(id);
        if (it == fused.per_case_correct.end()) {
            throw ValidationError("fused report is missing case '" + id + "'");
        }
        size_t n = 0;
        for (const auto& s : errs.per_model) {
            n += s.count(id) ? 1 : 0;
        }
        buckets[n].count++;
        correct[n] += it->second ? 1 : 0;
    }
    for (size_t n = 0; n <= k; ++n) {
        buckets[n].accuracy =
            buckets[n].count ? static_cast<double>(correct[n]) / static_cast<double>(buckets[n].count) : 0.0;
    }
    return buckets;
}

std::map<std::string, double> venn_fractions(const ErrorSets& errs) {
    const size_t k = errs.per_model.size();
    if (k > 6) {
        throw ValidationError("venn_fractions: more than 6 error sets (2^k signatures explode)");
    }
    std::map<std::string, size_t> counts;
    size_t union_size = 0;
    for (const auto& id : errs.universe) {
        std::string sig(k, '0');
        bool any = false;
        for (size_t j = 0; j < k; ++j) {
            if (errs.per_model[j].count(id)) {
                sig[j] = '1';
                any = true;
            }
        }
        if (any) {
            counts[sig]++;
            ++union_size;
        }
    }
    if (union_size == 0) {
        throw ValidationError("venn_fractions: the union of error sets is empty");
    }
    std::map<std::string, double> out;
    for (const auto& [sig, c] : counts) {
        out[sig] = static_cast<double>(c) / static_cast<double>(union_size);
    }
    return out;
}

json loss_trace_to_json(const LossTrace& trace) {
    json arr = json::array();
    for (const auto& e : trace.checkpoints) {
        arr.push_back({
            {"mean_train_loss", e.mean_train_loss},
            {"mean_val_loss", e.mean_val_loss},
            {"per_class_train_loss", e.per_class_train_loss},
            {"per_class_val_loss", e.per_class_val_loss},
        });
    }
    return json{{"checkpoints", arr}};
}

LossTrace loss_trace_from_json(const json& obj) {
    try {
        LossTrace trace;
        for (const auto& e : obj.at("checkpoints")) {
            LossCheckpointEntry entry;
            entry.mean_train_loss = e.at("mean_train_loss").get<double>();
            entry.mean_val_loss = e.at("mean_val_loss").get<double>();
            entry.per_class_train_loss = e.at("per_class_train_loss").get<std::vector<double>>();
            entry.per_class_val_loss = e.at("per_class_val_loss").get<std::vector<double>>();
            trace.checkpoints.push_back(std::move(entry));
        }
        return trace;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad loss trace JSON: ") + e.what());
    }
}

json eval_report_to_json(const EvalReport& report) {
    return json{
        {"accuracy", report.accuracy},
        {"mean_loss", report.mean_loss},
        {"wall_time_sec", report.wall_time_sec},
        {"per_class_loss", report.per_class_loss},
        {"per_case_correct", report.per_case_correct},
    };
}

EvalReport eval_report_from_json(const json& obj) {
    try {
        EvalReport report;
        report.accuracy = obj.at("accuracy").get<double>();
        report.mean_loss = obj.at("mean_loss").get<double>();
        report.wall_time_sec = obj.value("wall_time_sec", 0.0);
        report.per_class_loss = obj.at("per_class_loss").get<std::vector<double>>();
        report.per_case_correct = obj.at("per_case_correct").get<std::map<std::string, bool>>();
        return report;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad eval report JSON: ") + e.what());
    }
}

json error_sets_to_json(const ErrorSets& errs) {
    json sets = json::array();
    for (const auto& s : errs.per_model) {
        sets.push_back(s);
    }
    return json{{"universe", errs.universe}, {"error_sets", sets}};
}

ErrorSets error_sets_from_json(const json& obj) {
    try {
        ErrorSets errs;
        errs.universe = obj.at("universe").get<std::set<std::string>>();
        for (const auto& s : obj.at("error_sets")) {
            errs.per_model.push_back(s.get<std::set<std::string>>());
        }
        for (const auto& s : errs.per_model) {
            for (const auto& id : s) {
                if (!errs.universe.count(id)) {
                    throw FormatError("error set id '" + id + "' is not in the universe");
                }
            }
        }
        return errs;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad error sets JSON: ") + e.what());
    }
}

json load_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    try {
        json obj;
        in >> obj;
        return obj;
    } catch (const json::exception& e) {
        throw FormatError("bad JSON in '" + path.string() + "': " + e.what());
    }
}

void save_json_file(const json& obj, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << obj.dump(2) << '\n';
    if (!out) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

void save_text_file(const std::string& text, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << text;
    if (!out) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

}  // namespace dtm
