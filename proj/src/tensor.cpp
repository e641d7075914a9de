// SPDX-License-Identifier: Apache-2.0

#include "dtm/tensor.hpp"

#include <cstdio>

#include "dtm/error.hpp"
#include "dtm/kernels.hpp"

namespace dtm {

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "F32" : "F16"; }

std::optional<Dtype> dtype_from_name(std::string_view name) {
    if (name == "F32") return Dtype::f32;
    if (name == "F16") return Dtype::f16;
    return std::nullopt;
}

size_t shape_numel(std::span<const int64_t> shape) {
    size_t n = 1;
    for (int64_t e : shape) {
        if (e < 0) {
            throw ValidationError("tensor shape has negative extent " + std::to_string(e));
        }
        n *= static_cast<size_t>(e);
    }
    return n;
}

void snap_to_dtype(Tensor& t) {
    if (t.dtype != Dtype::f16 || t.values.empty()) {
        return;
    }
    const Kernels& k = active_kernels();
    std::vector<uint16_t> half(t.values.size());
    k.f32_to_f16(half.data(), t.values.data(), half.size());
    k.f16_to_f32(t.values.data(), half.data(), half.size());
}

Tensor Tensor::make(Dtype dtype, std::vector<int64_t> shape, std::vector<float> values) {
    size_t expected = shape_numel(shape);
    if (values.size() != expected) {
        throw ValidationError("tensor element count " + std::to_string(values.size()) +
                              " does not match shape product " + std::to_string(expected));
    }
    Tensor t;
    t.dtype = dtype;
    t.shape = std::move(shape);
    t.values = std::move(values);
    snap_to_dtype(t);
    return t;
}

Tensor Tensor::zeros(Dtype dtype, std::vector<int64_t> shape) {
    size_t n = shape_numel(shape);
    Tensor t;
    t.dtype = dtype;
    t.shape = std::move(shape);
    t.values.assign(n, 0.0f);
    return t;
}

std::optional<std::string> incompatibility(const Checkpoint& a, const Checkpoint& b) {
    auto ia = a.tensors.begin();
    auto ib = b.tensors.begin();
    while (ia != a.tensors.end() && ib != b.tensors.end()) {
        if (ia->first != ib->first) {
            const std::string& name = ia->first < ib->first ? ia->first : ib->first;
            return "tensor '" + name + "' present in only one checkpoint";
        }
        if (ia->second.dtype != ib->second.dtype) {
            return "tensor '" + ia->first + "' dtype mismatch";
        }
        if (ia->second.shape != ib->second.shape) {
            return "tensor '" + ia->first + "' shape mismatch";
        }
        ++ia;
        ++ib;
    }
    if (ia != a.tensors.end()) {
        return "tensor '" + ia->first + "' present in only one checkpoint";
    }
    if (ib != b.tensors.end()) {
        return "tensor '" + ib->first + "' present in only one checkpoint";
    }
    return std::nullopt;
}

void require_compatible(std::span<const Checkpoint> ckpts) {
    for (size_t j = 1; j < ckpts.size(); ++j) {
        if (auto msg = incompatibility(ckpts[0], ckpts[j])) {
            throw ValidationError("incompatible checkpoints: " + *msg);
        }
    }
}

Checkpoint axpy_map(std::span<const Checkpoint> ckpts, std::span<const float> coeffs) {
    if (ckpts.empty()) {
        throw ValidationError("axpy_map requires at least one checkpoint");
    }
    if (ckpts.size() != coeffs.size()) {
        throw ValidationError("axpy_map: " + std::to_string(ckpts.size()) + " checkpoints but " +
                              std::to_string(coeffs.size()) + " coefficients");
    }
    require_compatible(ckpts);

    const Kernels& k = active_kernels();
    Checkpoint out;
    for (const auto& [name, first] : ckpts[0].tensors) {
        std::vector<float> acc(first.numel(), 0.0f);
        for (size_t j = 0; j < ckpts.size(); ++j) {
            const Tensor& t = ckpts[j].tensors.at(name);
            k.axpy(acc.data(), t.values.data(), coeffs[j], acc.size());
        }
        out.tensors.emplace(name, Tensor::make(first.dtype, first.shape, std::move(acc)));
    }
    return out;
}

}  // namespace dtm
