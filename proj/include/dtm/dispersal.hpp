// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dtm/corpus.hpp"

namespace dtm {

enum class DispersalMethod { random, kmeans };

const char* dispersal_method_name(DispersalMethod m);
DispersalMethod dispersal_method_from_name(std::string_view name);

// Non-overlapping partition of a corpus into k clusters. Every id is
// assigned exactly once; cluster indices lie in [0, k).
struct ClusterAssignment {
    int k = 0;
    DispersalMethod method = DispersalMethod::random;
    uint64_t seed = 0;
    std::map<std::string, int> assignment;

    std::vector<size_t> cluster_sizes() const;
};

// seeded shuffle then round-robin; cluster sizes differ by at most one
ClusterAssignment random_split(const Corpus& corpus, int k, uint64_t seed);

// per-iteration diagnostics; objective is the sum of cosine distances to the
// assigned centroid, recorded after each assignment step
struct KmeansStats {
    std::vector<double> objective;
    int iterations = 0;
    int repairs = 0;
};

// spherical k-means: embeddings L2-normalized, k-means++ seeding, Lloyd
// iterations under cosine distance, empty clusters refilled with the point
// farthest from its centroid
ClusterAssignment kmeans_disperse(const Corpus& corpus, int k, uint64_t seed, int max_iter = 100,
                                  double tol = 1e-4, KmeansStats* stats = nullptr);

void save_assignment(const ClusterAssignment& a, const std::filesystem::path& path);
ClusterAssignment load_assignment(const std::filesystem::path& path);

// materialize the k sub-corpora (record order follows the corpus order)
std::vector<Corpus> split_by_assignment(const Corpus& corpus, const ClusterAssignment& a);

}  // namespace dtm
