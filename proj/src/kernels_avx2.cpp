// SPDX-License-Identifier: Apache-2.0

// AVX2 + F16C kernel variants. Compiled with -mavx2 -mf16c; only dispatched
// at runtime when the CPU reports both features. Elementwise kernels use
// mul/add (never FMA) so each output element rounds exactly like the scalar
// reference; dot mirrors the reference's 8-lane accumulation and sequential
// lane combine.

#include "dtm/kernels.hpp"

#if defined(__AVX2__) && defined(__F16C__)

#include <immintrin.h>

namespace dtm {
namespace {

void axpy_avx2(float* dst, const float* x, float a, size_t n) {
    const __m256 va = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 d = _mm256_loadu_ps(dst + i);
        __m256 v = _mm256_loadu_ps(x + i);
        d = _mm256_add_ps(d, _mm256_mul_ps(va, v));
        _mm256_storeu_ps(dst + i, d);
    }
    for (; i < n; ++i) {
        dst[i] += a * x[i];
    }
}

void scale_avx2(float* dst, const float* x, float a, size_t n) {
    const __m256 va = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
    }
    for (; i < n; ++i) {
        dst[i] = a * x[i];
    }
}

void mul_accum_avx2(float* dst, const float* a, const float* b, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 d = _mm256_loadu_ps(dst + i);
        d = _mm256_add_ps(d, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
        _mm256_storeu_ps(dst + i, d);
    }
    for (; i < n; ++i) {
        dst[i] += a[i] * b[i];
    }
}

void add_scaled_avx2(float* dst, const float* base, const float* x, float a, size_t n) {
    const __m256 va = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 r = _mm256_add_ps(_mm256_loadu_ps(base + i),
                                 _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
        _mm256_storeu_ps(dst + i, r);
    }
    for (; i < n; ++i) {
        dst[i] = base[i] + a * x[i];
    }
}

void guarded_div_avx2(float* dst, const float* num, const float* den, float eps, size_t n) {
    const __m256 veps = _mm256_set1_ps(eps);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 d = _mm256_add_ps(_mm256_loadu_ps(den + i), veps);
        _mm256_storeu_ps(dst + i, _mm256_div_ps(_mm256_loadu_ps(num + i), d));
    }
    for (; i < n; ++i) {
        dst[i] = num[i] / (den[i] + eps);
    }
}

void min_inplace_avx2(float* dst, const float* x, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(dst + i, _mm256_min_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(dst + i)));
    }
    for (; i < n; ++i) {
        dst[i] = x[i] < dst[i] ? x[i] : dst[i];
    }
}

void max_inplace_avx2(float* dst, const float* x, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(dst + i, _mm256_max_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(dst + i)));
    }
    for (; i < n; ++i) {
        dst[i] = x[i] > dst[i] ? x[i] : dst[i];
    }
}

void clamp_avx2(float* v, const float* lo, const float* hi, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 t = _mm256_max_ps(_mm256_loadu_ps(v + i), _mm256_loadu_ps(lo + i));
        t = _mm256_min_ps(t, _mm256_loadu_ps(hi + i));
        _mm256_storeu_ps(v + i, t);
    }
    for (; i < n; ++i) {
        float t = v[i] < lo[i] ? lo[i] : v[i];
        v[i] = t > hi[i] ? hi[i] : t;
    }
}

float dot_avx2(const float* a, const float* b, size_t n) {
    __m256 acc = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc = _mm256_add_ps(acc, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    }
    alignas(32) float lane[8];
    _mm256_store_ps(lane, acc);
    for (size_t l = 0; i < n; ++i, ++l) {
        lane[l] += a[i] * b[i];
    }
    float s = lane[0];
    for (size_t l = 1; l < 8; ++l) {
        s += lane[l];
    }
    return s;
}

void f32_to_f16_avx2(uint16_t* dst, const float* src, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m128i h = _mm256_cvtps_ph(_mm256_loadu_ps(src + i),
                                    _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
        _mm_storeu_si128(reinterpret_cast<__m128i*>(dst + i), h);
    }
    for (; i < n; ++i) {
        dst[i] = f32_to_f16_bits(src[i]);
    }
}

void f16_to_f32_avx2(float* dst, const uint16_t* src, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m128i h = _mm_loadu_si128(reinterpret_cast<const __m128i*>(src + i));
        _mm256_storeu_ps(dst + i, _mm256_cvtph_ps(h));
    }
    for (; i < n; ++i) {
        dst[i] = f16_bits_to_f32(src[i]);
    }
}

}  // namespace

const Kernels* avx2_kernels() {
    static const Kernels* table = []() -> const Kernels* {
        if (!__builtin_cpu_supports("avx2") || !__builtin_cpu_supports("f16c")) {
            return nullptr;
        }
        static const Kernels k = {
            "avx2",          axpy_avx2,       scale_avx2, mul_accum_avx2,
            add_scaled_avx2, guarded_div_avx2, min_inplace_avx2, max_inplace_avx2,
            clamp_avx2,      dot_avx2,        f32_to_f16_avx2, f16_to_f32_avx2,
        };
        return &k;
    }();
    return table;
}

}  // namespace dtm

#else

namespace dtm {
const Kernels* avx2_kernels() { return nullptr; }
}  // namespace dtm

#endif
