// SPDX-License-Identifier: Apache-2.0

#include "dtm/dispersal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "dtm/error.hpp"
#include "dtm/kernels.hpp"
#include "dtm/rng.hpp"

namespace dtm {

using nlohmann::json;

const char* dispersal_method_name(DispersalMethod m) {
    return m == DispersalMethod::random ? "random" : "kmeans";
}

DispersalMethod dispersal_method_from_name(std::string_view name) {
    if (name == "random") return DispersalMethod::random;
    if (name == "kmeans") return DispersalMethod::kmeans;
    throw ValidationError("unknown dispersal method '" + std::string(name) + "'");
}

std::vector<size_t> ClusterAssignment::cluster_sizes() const {
    std::vector<size_t> sizes(static_cast<size_t>(k), 0);
    for (const auto& [id, c] : assignment) {
        sizes.at(static_cast<size_t>(c))++;
    }
    return sizes;
}

ClusterAssignment random_split(const Corpus& corpus, int k, uint64_t seed) {
    if (corpus.empty()) {
        throw ValidationError("random_split: corpus is empty");
    }
    if (k < 1) {
        throw ValidationError("random_split: k must be at least 1");
    }
    if (static_cast<size_t>(k) > corpus.size()) {
        throw ValidationError("random_split: k=" + std::to_string(k) + " exceeds corpus size " +
                              std::to_string(corpus.size()));
    }
    std::vector<size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 rng(seed);
    shuffle(order, rng);

    ClusterAssignment out;
    out.k = k;
    out.method = DispersalMethod::random;
    out.seed = seed;
    for (size_t pos = 0; pos < order.size(); ++pos) {
        out.assignment[corpus.records[order[pos]].id] = static_cast<int>(pos % static_cast<size_t>(k));
    }
    return out;
}

namespace {

struct EmbeddingMatrix {
    std::vector<float> data;  // n x d row-major, rows L2-normalized
    size_t n = 0;
    size_t d = 0;

    const float* row(size_t i) const { return data.data() + i * d; }
    float* row(size_t i) { return data.data() + i * d; }
};

EmbeddingMatrix normalized_embeddings(const Corpus& corpus) {
    EmbeddingMatrix m;
    m.n = corpus.size();
    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto& rec = corpus.records[i];
        if (!rec.embedding) {
            throw ValidationError("kmeans_disperse: record '" + rec.id + "' has no embedding");
        }
        if (i == 0) {
            m.d = rec.embedding->size();
            m.data.resize(m.n * m.d);
        } else if (rec.embedding->size() != m.d) {
            throw ValidationError("kmeans_disperse: record '" + rec.id + "' embedding length differs");
        }
        const Kernels& k = active_kernels();
        float norm_sq = k.dot(rec.embedding->data(), rec.embedding->data(), m.d);
        if (!(norm_sq > 0.0f)) {
            throw ValidationError("kmeans_disperse: record '" + rec.id + "' has a zero-norm embedding");
        }
        k.scale(m.row(i), rec.embedding->data(), 1.0f / std::sqrt(norm_sq), m.d);
    }
    return m;
}

// cosine distance between unit vectors
double cos_dist(const float* a, const float* b, size_t d) {
    return 1.0 - static_cast<double>(active_kernels().dot(a, b, d));
}

std::vector<std::vector<float>> kmeanspp_seed(const EmbeddingMatrix& m, size_t k, SplitMix64& rng) {
    std::vector<std::vector<float>> centroids;
    centroids.reserve(k);
    size_t first = static_cast<size_t>(rng.next_below(m.n));
    centroids.emplace_back(m.row(first), m.row(first) + m.d);

    // squared distance to the nearest chosen centroid
    std::vector<double> weight(m.n);
    while (centroids.size() < k) {
        double total = 0.0;
        for (size_t i = 0; i < m.n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : centroids) {
                best = std::min(best, cos_dist(m.row(i), c.data(), m.d));
            }
            weight[i] = best * best;
            total += weight[i];
        }
        size_t pick;
        if (total <= 0.0) {
            pick = static_cast<size_t>(rng.next_below(m.n));  // all points on chosen centroids
        } else {
            double r = rng.next_double() * total;
            double run = 0.0;
            pick = m.n - 1;
            for (size_t i = 0; i < m.n; ++i) {
                run += weight[i];
                if (r < run) {
                    pick = i;
                    break;
                }
            }
        }
        centroids.emplace_back(m.row(pick), m.row(pick) + m.d);
    }
    return centroids;
}

}  // namespace

ClusterAssignment kmeans_disperse(const Corpus& corpus, int k, uint64_t seed, int max_iter,
                                  double tol, KmeansStats* stats) {
    if (corpus.empty()) {
        throw ValidationError("kmeans_disperse: corpus is empty");
    }
    if (k < 1) {
        throw ValidationError("kmeans_disperse: k must be at least 1");
    }
    const size_t n = corpus.size();
    const size_t kk = static_cast<size_t>(k);
    if (kk > n) {
        throw ValidationError("kmeans_disperse: k=" + std::to_string(k) + " exceeds corpus size " +
                              std::to_string(n));
    }

    EmbeddingMatrix m = normalized_embeddings(corpus);
    SplitMix64 rng(seed);
    std::vector<std::vector<float>> centroids = kmeanspp_seed(m, kk, rng);
    std::vector<int> assign(n, 0);
    if (stats) {
        *stats = KmeansStats{};
    }

    for (int iter = 0; iter < max_iter; ++iter) {
        // assignment step; ties go to the lowest centroid index
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int best_j = 0;
            for (size_t j = 0; j < kk; ++j) {
                double d = cos_dist(m.row(i), centroids[j].data(), m.d);
                if (d < best) {
                    best = d;
                    best_j = static_cast<int>(j);
                }
            }
            assign[i] = best_j;
        }

        // refill empty clusters with the point farthest from its centroid
        std::vector<size_t> counts(kk, 0);
        for (int a : assign) counts[static_cast<size_t>(a)]++;
        for (size_t j = 0; j < kk; ++j) {
            if (counts[j] != 0) {
                continue;
            }
            double worst = -1.0;
            size_t worst_i = 0;
            for (size_t i = 0; i < n; ++i) {
                if (counts[static_cast<size_t>(assign[i])] <= 1) {
                    continue;  // do not empty another cluster
                }
                double d = cos_dist(m.row(i), centroids[static_cast<size_t>(assign[i])].data(), m.d);
                if (d > worst) {
                    worst = d;
                    worst_i = i;
                }
            }
            counts[static_cast<size_t>(assign[worst_i])]--;
            assign[worst_i] = static_cast<int>(j);
            counts[j] = 1;
            centroids[j].assign(m.row(worst_i), m.row(worst_i) + m.d);
            if (stats) {
                stats->repairs++;
            }
        }

        if (stats) {
            double obj = 0.0;
            for (size_t i = 0; i < n; ++i) {
                obj += cos_dist(m.row(i), centroids[static_cast<size_t>(assign[i])].data(), m.d);
            }
            stats->objective.push_back(obj);
            stats->iterations = iter + 1;
        }

        // update step: normalized mean of the assigned points
        double movement = 0.0;
        std::vector<double> mean(kk * m.d, 0.0);
        for (size_t i = 0; i < n; ++i) {
            double* row = mean.data() + static_cast<size_t>(assign[i]) * m.d;
            const float* x = m.row(i);
            for (size_t t = 0; t < m.d; ++t) {
                row[t] += x[t];
            }
        }
        std::vector<size_t> sizes(kk, 0);
        for (int a : assign) sizes[static_cast<size_t>(a)]++;
        for (size_t j = 0; j < kk; ++j) {
            double* row = mean.data() + j * m.d;
            double norm = 0.0;
            for (size_t t = 0; t < m.d; ++t) {
                norm += row[t] * row[t];
            }
            norm = std::sqrt(norm);
            if (norm <= 0.0) {
                continue;  // degenerate cancellation, keep the previous centroid
            }
            double move_sq = 0.0;
            for (size_t t = 0; t < m.d; ++t) {
                float nv = static_cast<float>(row[t] / norm);
                double diff = static_cast<double>(nv) - static_cast<double>(centroids[j][t]);
                move_sq += diff * diff;
                centroids[j][t] = nv;
            }
            movement = std::max(movement, std::sqrt(move_sq));
        }
        if (movement < tol) {
            break;
        }
    }

    // final assignment against the converged centroids
    for (size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int best_j = 0;
        for (size_t j = 0; j < kk; ++j) {
            double d = cos_dist(m.row(i), centroids[j].data(), m.d);
            if (d < best) {
                best = d;
                best_j = static_cast<int>(j);
            }
        }
        assign[i] = best_j;
    }
    // the last assignment pass may have emptied a cluster; repair once more
    {
        std::vector<size_t> counts(kk, 0);
        for (int a : assign) counts[static_cast<size_t>(a)]++;
        for (size_t j = 0; j < kk; ++j) {
            if (counts[j] != 0) {
                continue;
            }
            double worst = -1.0;
            size_t worst_i = 0;
            for (size_t i = 0; i < n; ++i) {
                if (counts[static_cast<size_t>(assign[i])] <= 1) {
                    continue;
                }
                double d = cos_dist(m.row(i), centroids[static_cast<size_t>(assign[i])].data(), m.d);
                if (d > worst) {
                    worst = d;
                    worst_i = i;
                }
            }
            counts[static_cast<size_t>(assign[worst_i])]--;
            assign[worst_i] = static_cast<int>(j);
            counts[j] = 1;
            if (stats) {
                stats->repairs++;
            }
        }
    }

    ClusterAssignment out;
    out.k = k;
    out.method = DispersalMethod::kmeans;
    out.seed = seed;
    for (size_t i = 0; i < n; ++i) {
        out.assignment[corpus.records[i].id] = assign[i];
    }
    return out;
}

void save_assignment(const ClusterAssignment& a, const std::filesystem::path& path) {
    json obj = {
        {"k", a.k},
        {"method", dispersal_method_name(a.method)},
        {"seed", a.seed},
        {"assignment", a.assignment},
    };
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << obj.dump(2) << '\n';
    if (!out) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

ClusterAssignment load_assignment(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    json obj;
    try {
        in >> obj;
        ClusterAssignment a;
        a.k = obj.at("k").get<int>();
        a.method = dispersal_method_from_name(obj.at("method").get<std::string>());
        a.seed = obj.at("seed").get<uint64_t>();
        a.assignment = obj.at("assignment").get<std::map<std::string, int>>();
        for (const auto& [id, c] : a.assignment) {
            if (c < 0 || c >= a.k) {
                throw FormatError("assignment '" + path.string() + "': id '" + id +
                                  "' has cluster " + std::to_string(c) + " outside [0," +
                                  std::to_string(a.k) + ")");
            }
        }
        return a;
    } catch (const json::exception& e) {
        throw FormatError("assignment '" + path.string() + "': " + e.what());
    }
}

std::vector<Corpus> split_by_assignment(const Corpus& corpus, const ClusterAssignment& a) {
    if (a.assignment.size() != corpus.size()) {
        throw ValidationError("assignment covers " + std::to_string(a.assignment.size()) +
                              " ids but the corpus has " + std::to_string(corpus.size()));
    }
    std::vector<Corpus> parts(static_cast<size_t>(a.k));
    for (const auto& rec : corpus.records) {
        auto it = a.assignment.find(rec.id);
        if (it == a.assignment.end()) {
            throw ValidationError("assignment is missing id '" + rec.id + "'");
        }
        parts[static_cast<size_t>(it->second)].records.push_back(rec);
    }
    return parts;
}

}  // namespace dtm
