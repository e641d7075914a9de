// SPDX-License-Identifier: Apache-2.0

#include "dtm/kernels.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace dtm {

#ifndef DTM_KERNELS_AVX2
const Kernels* avx2_kernels() { return nullptr; }
#endif

const Kernels& active_kernels() {
    static const Kernels& selected = []() -> const Kernels& {
        if (const char* env = std::getenv("DTM_KERNELS")) {
            if (std::strcmp(env, "scalar") == 0) {
                return scalar_kernels();
            }
            if (std::strcmp(env, "avx2") == 0) {
                if (const Kernels* k = avx2_kernels()) {
                    return *k;
                }
                std::fprintf(stderr, "dtm: DTM_KERNELS=avx2 unavailable on this CPU/build, using scalar\n");
                return scalar_kernels();
            }
            std::fprintf(stderr, "dtm: unknown DTM_KERNELS value '%s', using default\n", env);
        }
        if (const Kernels* k = avx2_kernels()) {
            return *k;
        }
        return scalar_kernels();
    }();
    return selected;
}

}  // namespace dtm
