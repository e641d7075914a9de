// SPDX-License-Identifier: Apache-2.0

#include "dtm/kernels.hpp"

#include <bit>

namespace dtm {

uint16_t f32_to_f16_bits(float f) {
    uint32_t x = std::bit_cast<uint32_t>(f);
    uint32_t sign = (x >> 16) & 0x8000u;
    uint32_t exp = (x >> 23) & 0xFFu;
    uint32_t mant = x & 0x7FFFFFu;

    if (exp == 0xFF) {  // inf / nan
        return static_cast<uint16_t>(sign | 0x7C00u | (mant ? (0x200u | (mant >> 13)) : 0u));
    }

    int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 0x1F) {  // overflow to inf
        return static_cast<uint16_t>(sign | 0x7C00u);
    }
    if (e <= 0) {  // subnormal half or zero
        if (e < -10) {
            return static_cast<uint16_t>(sign);
        }
        mant |= 0x800000u;
        uint32_t shift = static_cast<uint32_t>(14 - e);
        uint32_t half = mant >> shift;
        uint32_t rem = mant & ((1u << shift) - 1u);
        uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) {
            ++half;
        }
        return static_cast<uint16_t>(sign | half);
    }

    uint32_t h = sign | (static_cast<uint32_t>(e) << 10) | (mant >> 13);
    uint32_t rem = mant & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) {
        ++h;  // mantissa carry may roll into the exponent; that is the correct rounding
    }
    return static_cast<uint16_t>(h);
}

float f16_bits_to_f32(uint16_t h) {
    uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1Fu;
    uint32_t mant = h & 0x3FFu;
    uint32_t x;

    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {  // subnormal: renormalize
            uint32_t e = 0;
            uint32_t m = mant;
            while (!(m & 0x400u)) {
                m <<= 1;
                ++e;
            }
            x = sign | ((113u - e) << 23) | ((m & 0x3FFu) << 13);
        }
    } else if (exp == 0x1F) {
        x = sign | 0x7F800000u | (mant << 13);
    } else {
        x = sign | ((exp + 112u) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(x);
}

namespace {

void axpy_scalar(float* dst, const float* x, float a, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] += a * x[i];
    }
}

void scale_scalar(float* dst, const float* x, float a, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] = a * x[i];
    }
}

void mul_accum_scalar(float* dst, const float* a, const float* b, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] += a[i] * b[i];
    }
}

void add_scaled_scalar(float* dst, const float* base, const float* x, float a, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] = base[i] + a * x[i];
    }
}

void guarded_div_scalar(float* dst, const float* num, const float* den, float eps, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] = num[i] / (den[i] + eps);
    }
}

void min_inplace_scalar(float* dst, const float* x, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] = x[i] < dst[i] ? x[i] : dst[i];
    }
}

void max_inplace_scalar(float* dst, const float* x, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] = x[i] > dst[i] ? x[i] : dst[i];
    }
}

void clamp_scalar(float* v, const float* lo, const float* hi, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        float t = v[i] < lo[i] ? lo[i] : v[i];
        v[i] = t > hi[i] ? hi[i] : t;
    }
}

float dot_scalar(const float* a, const float* b, size_t n) {
    float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (size_t l = 0; l < 8; ++l) {
            lane[l] += a[i + l] * b[i + l];
        }
    }
    for (size_t l = 0; i < n; ++i, ++l) {
        lane[l] += a[i] * b[i];
    }
    float s = lane[0];
    for (size_t l = 1; l < 8; ++l) {
        s += lane[l];
    }
    return s;
}

void f32_to_f16_scalar(uint16_t* dst, const float* src, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] = f32_to_f16_bits(src[i]);
    }
}

void f16_to_f32_scalar(float* dst, const uint16_t* src, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] = f16_bits_to_f32(src[i]);
    }
}

}  // namespace

const Kernels& scalar_kernels() {
    static const Kernels k = {
        "scalar",          axpy_scalar,      scale_scalar, mul_accum_scalar,
        add_scaled_scalar, guarded_div_scalar, min_inplace_scalar, max_inplace_scalar,
        clamp_scalar,      dot_scalar,       f32_to_f16_scalar, f16_to_f32_scalar,
    };
    return k;
}

}  // namespace dtm
