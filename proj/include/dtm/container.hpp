// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "dtm/tensor.hpp"

namespace dtm {

// Checkpoint container (.ct): an 8-byte little-endian header length N, then
// N bytes of JSON mapping tensor names to {"dtype","shape","data_offsets"}
// plus an optional "__metadata__" object, then the raw little-endian tensor
// bytes. Offsets are relative to the end of the header; tensors are laid out
// in ascending name order. The layout is interoperable with common
// checkpoint tooling.

inline constexpr uint64_t kMaxHeaderBytes = 100ull * 1024 * 1024;
inline constexpr const char* kCheckpointExtension = ".ct";

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace dtm
