// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace dtm {

constexpr uint64_t kGolden64 = 0x9E3779B97F4A7C15ull;

// splitmix64 finalizer; full avalanche on 64 bits
constexpr uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Sequential splitmix64 stream. The project-wide seeded generator: every
// randomized operation owns one, seeded from its config, so results are
// reproducible across runs and platforms.
class SplitMix64 {
  public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() { return mix64(state_ += kGolden64); }

    // uniform in [0,1), 53 random bits
    double next_double() { return double(next() >> 11) * 0x1.0p-53; }

    uint64_t next_below(uint64_t n) { return n ? next() % n : 0; }

    // Box-Muller; consumes exactly two draws
    double next_gaussian() {
        double u1 = 1.0 - next_double();
        double u2 = next_double();
        constexpr double two_pi = 6.283185307179586;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

  private:
    uint64_t state_;
};

// FNV-1a over the bytes of a string
constexpr uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

// independent sub-seed for stage `salt` of a seeded computation
constexpr uint64_t derive_seed(uint64_t seed, uint64_t salt) {
    return mix64(seed ^ mix64(salt + kGolden64));
}

constexpr uint64_t derive_seed(uint64_t seed, std::string_view salt) {
    return derive_seed(seed, hash_str(salt));
}

// counter-based draw: the i-th output of SplitMix64(stream), computable
// out of order so per-element randomness is independent of iteration order
constexpr uint64_t counter_rand(uint64_t stream, uint64_t i) {
    return mix64(stream + (i + 1) * kGolden64);
}

constexpr double counter_uniform(uint64_t stream, uint64_t i) {
    return double(counter_rand(stream, i) >> 11) * 0x1.0p-53;
}

// seeded Fisher-Yates
template <class T>
void shuffle(std::vector<T>& v, SplitMix64& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.next_below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace dtm
