// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

namespace dtm {

// Float kernel table. The scalar implementations are the reference; SIMD
// variants must produce bit-identical results. Elementwise kernels get that
// for free (same mul/add per element, no FMA). dot is specified as an 8-lane
// stride accumulation with a fixed sequential lane combine, so a 256-bit
// vector accumulator rounds identically to the scalar loop.
struct Kernels {
    const char* name;

    // dst[i] += a * x[i]
    void (*axpy)(float* dst, const float* x, float a, size_t n);
    // dst[i] = a * x[i]
    void (*scale)(float* dst, const float* x, float a, size_t n);
    // dst[i] += a[i] * b[i]
    void (*mul_accum)(float* dst, const float* a, const float* b, size_t n);
    // dst[i] = base[i] + a * x[i]
    void (*add_scaled)(float* dst, const float* base, const float* x, float a, size_t n);
    // dst[i] = num[i] / (den[i] + eps)
    void (*guarded_div)(float* dst, const float* num, const float* den, float eps, size_t n);
    // dst[i] = min(dst[i], x[i]) / max(dst[i], x[i]); finite inputs only
    void (*min_inplace)(float* dst, const float* x, size_t n);
    void (*max_inplace)(float* dst, const float* x, size_t n);
    // v[i] clamped into [lo[i], hi[i]]
    void (*clamp)(float* v, const float* lo, const float* hi, size_t n);
    // 8-lane fixed-order reduction of sum a[i]*b[i]
    float (*dot)(const float* a, const float* b, size_t n);
    // IEEE half conversions, round to nearest even
    void (*f32_to_f16)(uint16_t* dst, const float* src, size_t n);
    void (*f16_to_f32)(float* dst, const uint16_t* src, size_t n);
};

const Kernels& scalar_kernels();

// nullptr when the build or the running CPU lacks AVX2+F16C
const Kernels* avx2_kernels();

// best available table; override with DTM_KERNELS={scalar,avx2}
const Kernels& active_kernels();

// scalar one-value helpers (round to nearest even)
uint16_t f32_to_f16_bits(float f);
float f16_bits_to_f32(uint16_t h);

}  // namespace dtm
