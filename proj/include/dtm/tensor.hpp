// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dtm {

enum class Dtype : uint8_t { f32, f16 };

constexpr size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 2; }

const char* dtype_name(Dtype d);
std::optional<Dtype> dtype_from_name(std::string_view name);

// product of extents; throws ValidationError on a negative extent
size_t shape_numel(std::span<const int64_t> shape);

// Dense row-major tensor. Elements live as f32 in memory regardless of the
// storage dtype; an f16 tensor keeps every value snapped to the nearest
// representable half, which makes disk round trips exact.
struct Tensor {
    Dtype dtype = Dtype::f32;
    std::vector<int64_t> shape;
    std::vector<float> values;

    // validates the element count and snaps values for f16
    static Tensor make(Dtype dtype, std::vector<int64_t> shape, std::vector<float> values);
    static Tensor zeros(Dtype dtype, std::vector<int64_t> shape);

    size_t numel() const { return values.size(); }
    bool same_layout(const Tensor& other) const {
        return dtype == other.dtype && shape == other.shape;
    }
};

// round every value to the nearest f16 (no-op for f32 tensors)
void snap_to_dtype(Tensor& t);

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

// a checkpoint holding per-parameter deltas (fine-tuned minus base)
using TaskVector = Checkpoint;

// empty when compatible, otherwise a message naming the first offending tensor
std::optional<std::string> incompatibility(const Checkpoint& a, const Checkpoint& b);

// throws ValidationError("incompatible checkpoints: ...") on the first mismatch
void require_compatible(std::span<const Checkpoint> ckpts);

// per name, per element: out[i] = sum_j coeffs[j] * ckpts[j][i], accumulated
// in f32; output dtype matches the inputs
Checkpoint axpy_map(std::span<const Checkpoint> ckpts, std::span<const float> coeffs);

}  // namespace dtm
