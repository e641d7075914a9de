// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"

#include "dtm/kernels.hpp"
#include "dtm/rng.hpp"

using namespace dtm;

namespace {

std::vector<float> random_floats(SplitMix64& rng, size_t n, float lo = -8.0f, float hi = 8.0f) {
    std::vector<float> v(n);
    for (auto& x : v) {
        x = lo + static_cast<float>(rng.next_double()) * (hi - lo);
    }
    return v;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (std::bit_cast<uint32_t>(a[i]) != std::bit_cast<uint32_t>(b[i])) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("scalar dot matches a plain double reference closely") {
    SplitMix64 rng(11);
    for (size_t n : {0ul, 1ul, 7ul, 8ul, 9ul, 63ul, 200ul}) {
        auto a = random_floats(rng, n);
        auto b = random_floats(rng, n);
        double ref = 0.0;
        for (size_t i = 0; i < n; ++i) {
            ref += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        }
        float got = scalar_kernels().dot(a.data(), b.data(), n);
        CHECK(got == doctest::Approx(ref).epsilon(1e-5));
    }
}

TEST_CASE("f16 conversion round-trips every finite half") {
    for (uint32_t h = 0; h < 0x10000; ++h) {
        const uint16_t bits = static_cast<uint16_t>(h);
        const uint32_t exp = (h >> 10) & 0x1F;
        if (exp == 0x1F) continue;  // inf/nan
        float f = f16_bits_to_f32(bits);
        CHECK(f32_to_f16_bits(f) == bits);
    }
}

TEST_CASE("f16 conversion rounds to nearest even") {
    // 1 + 1/2048 sits halfway between 1.0 and the next half; ties go to even
    CHECK(f32_to_f16_bits(1.0f + 1.0f / 2048.0f) == 0x3C00);  // 1.0
    CHECK(f32_to_f16_bits(1.0f + 3.0f / 2048.0f) == 0x3C02);  // 1 + 2/1024
    CHECK(f32_to_f16_bits(65504.0f) == 0x7BFF);               // f16 max
    CHECK(f32_to_f16_bits(65520.0f) == 0x7C00);               // overflow to inf
    CHECK(f32_to_f16_bits(1e-8f) == 0x0000);                  // underflow to zero
    CHECK(f32_to_f16_bits(-0.0f) == 0x8000);
}

TEST_CASE("avx2 kernels are bit-identical to the scalar reference") {
    const Kernels* avx2 = avx2_kernels();
    if (!avx2) {
        MESSAGE("avx2 unavailable, skipping equivalence checks");
        return;
    }
    const Kernels& ref = scalar_kernels();
    SplitMix64 rng(17);

    for (int trial = 0; trial < 200; ++trial) {
        const size_t n = static_cast<size_t>(rng.next_below(70));
        auto a = random_floats(rng, n);
        auto b = random_floats(rng, n);
        auto c = random_floats(rng, n);
        const float coeff = static_cast<float>(rng.next_double() * 4.0 - 2.0);

        {
            auto d1 = c, d2 = c;
            ref.axpy(d1.data(), a.data(), coeff, n);
            avx2->axpy(d2.data(), a.data(), coeff, n);
            CHECK(bit_equal(d1, d2));
        }
        {
            std::vector<float> d1(n), d2(n);
            ref.scale(d1.data(), a.data(), coeff, n);
            avx2->scale(d2.data(), a.data(), coeff, n);
            CHECK(bit_equal(d1, d2));
        }
        {
            auto d1 = c, d2 = c;
            ref.mul_accum(d1.data(), a.data(), b.data(), n);
            avx2->mul_accum(d2.data(), a.data(), b.data(), n);
            CHECK(bit_equal(d1, d2));
        }
        {
            std::vector<float> d1(n), d2(n);
            ref.add_scaled(d1.data(), c.data(), a.data(), coeff, n);
            avx2->add_scaled(d2.data(), c.data(), a.data(), coeff, n);
            CHECK(bit_equal(d1, d2));
        }
        {
            std::vector<float> den(n);
            for (size_t i = 0; i < n; ++i) den[i] = std::fabs(b[i]) + 0.5f;
            std::vector<float> d1(n), d2(n);
            ref.guarded_div(d1.data(), a.data(), den.data(), 1e-8f, n);
            avx2->guarded_div(d2.data(), a.data(), den.data(), 1e-8f, n);
            CHECK(bit_equal(d1, d2));
        }
        {
            auto d1 = c, d2 = c;
            ref.min_inplace(d1.data(), a.data(), n);
            avx2->min_inplace(d2.data(), a.data(), n);
            CHECK(bit_equal(d1, d2));
            d1 = c;
            d2 = c;
            ref.max_inplace(d1.data(), a.data(), n);
            avx2->max_inplace(d2.data(), a.data(), n);
            CHECK(bit_equal(d1, d2));
        }
        {
            std::vector<float> lo(n), hi(n);
            for (size_t i = 0; i < n; ++i) {
                lo[i] = std::min(a[i], b[i]);
                hi[i] = std::max(a[i], b[i]);
            }
            auto d1 = c, d2 = c;
            ref.clamp(d1.data(), lo.data(), hi.data(), n);
            avx2->clamp(d2.data(), lo.data(), hi.data(), n);
            CHECK(bit_equal(d1, d2));
        }
        {
            float r1 = ref.dot(a.data(), b.data(), n);
            float r2 = avx2->dot(a.data(), b.data(), n);
            CHECK(std::bit_cast<uint32_t>(r1) == std::bit_cast<uint32_t>(r2));
        }
        {
            std::vector<uint16_t> h1(n), h2(n);
            ref.f32_to_f16(h1.data(), a.data(), n);
            avx2->f32_to_f16(h2.data(), a.data(), n);
            CHECK(h1 == h2);
            std::vector<float> f1(n), f2(n);
            ref.f16_to_f32(f1.data(), h1.data(), n);
            avx2->f16_to_f32(f2.data(), h1.data(), n);
            CHECK(bit_equal(f1, f2));
        }
    }
}

TEST_CASE("f16c matches the scalar converter on hard values") {
    const Kernels* avx2 = avx2_kernels();
    if (!avx2) {
        return;
    }
    // denormal halves, overflow, rounding boundaries
    std::vector<float> probes = {0.0f,       -0.0f,      65504.0f,  -65504.0f, 65519.9f,
                                 65520.0f,   1e-7f,      5.96e-8f,  6.0e-8f,   1.0f + 1.0f / 2048.0f,
                                 -1.0f - 1.0f / 2048.0f, 3.14159f,  1e30f,     -1e30f,
                                 1.5e-7f,    2.98e-8f,   1e-40f};
    std::vector<uint16_t> h1(probes.size()), h2(probes.size());
    scalar_kernels().f32_to_f16(h1.data(), probes.data(), probes.size());
    avx2->f32_to_f16(h2.data(), probes.data(), probes.size());
    for (size_t i = 0; i < probes.size(); ++i) {
        CAPTURE(probes[i]);
        CHECK(h1[i] == h2[i]);
    }
}

TEST_CASE("active kernel table is one of the registered tables") {
    const Kernels& k = active_kernels();
    const bool is_scalar = &k == &scalar_kernels();
    const bool is_avx2 = avx2_kernels() && &k == avx2_kernels();
    CHECK((is_scalar || is_avx2));
}
