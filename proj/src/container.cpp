// SPDX-License-Identifier: Apache-2.0

#include "dtm/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "dtm/error.hpp"
#include "dtm/kernels.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container I/O assumes a little-endian host");

namespace dtm {

namespace {

using nlohmann::json;

std::vector<uint8_t> tensor_bytes(const Tensor& t) {
    const Kernels& k = active_kernels();
    std::vector<uint8_t> raw(t.numel() * dtype_size(t.dtype));
    if (t.dtype == Dtype::f32) {
        std::memcpy(raw.data(), t.values.data(), raw.size());
    } else {
        std::vector<uint16_t> half(t.numel());
        k.f32_to_f16(half.data(), t.values.data(), half.size());
        std::memcpy(raw.data(), half.data(), raw.size());
    }
    return raw;
}

Tensor tensor_from_bytes(Dtype dtype, std::vector<int64_t> shape, const uint8_t* data, size_t nbytes) {
    const Kernels& k = active_kernels();
    size_t n = nbytes / dtype_size(dtype);
    std::vector<float> values(n);
    if (dtype == Dtype::f32) {
        std::memcpy(values.data(), data, nbytes);
    } else {
        std::vector<uint16_t> half(n);
        std::memcpy(half.data(), data, nbytes);
        k.f16_to_f32(values.data(), half.data(), n);
    }
    return Tensor::make(dtype, std::move(shape), std::move(values));
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        if (name.empty()) {
            throw ValidationError("cannot write tensor with zero-length name");
        }
        uint64_t nbytes = tensor.numel() * dtype_size(tensor.dtype);
        header[name] = {
            {"dtype", dtype_name(tensor.dtype)},
            {"shape", tensor.shape},
            {"data_offsets", {offset, offset + nbytes}},
        };
        offset += nbytes;
    }
    if (!ckpt.metadata.empty()) {
        header["__metadata__"] = ckpt.metadata;
    }

    const std::string header_str = header.dump();
    const uint64_t header_len = header_str.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        std::vector<uint8_t> raw = tensor_bytes(tensor);
        out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    }
    out.flush();
    if (!out) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    in.seekg(0, std::ios::end);
    const uint64_t file_size = static_cast<uint64_t>(in.tellg());
    in.seekg(0, std::ios::beg);

    if (file_size < sizeof(uint64_t)) {
        throw FormatError("corrupt container '" + path.string() + "': shorter than the header length field");
    }
    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (header_len > kMaxHeaderBytes) {
        throw FormatError("corrupt container '" + path.string() + "': header length " +
                          std::to_string(header_len) + " exceeds the 100 MB limit");
    }
    if (header_len > file_size - sizeof(uint64_t)) {
        throw FormatError("corrupt container '" + path.string() + "': header length " +
                          std::to_string(header_len) + " exceeds the file size");
    }

    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw IoError("read failed for '" + path.string() + "'");
    }

    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw FormatError("corrupt container '" + path.string() + "': bad header JSON: " + e.what());
    }
    if (!header.is_object()) {
        throw FormatError("corrupt container '" + path.string() + "': header is not a JSON object");
    }

    const uint64_t data_size = file_size - sizeof(uint64_t) - header_len;
    std::vector<uint8_t> data(data_size);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data_size));
    if (!in && data_size > 0) {
        throw IoError("read failed for '" + path.string() + "'");
    }

    Checkpoint ckpt;
    std::vector<std::pair<uint64_t, uint64_t>> ranges;
    try {
        for (const auto& [name, entry] : header.items()) {
            if (name == "__metadata__") {
                for (const auto& [k, v] : entry.items()) {
                    ckpt.metadata[k] = v.get<std::string>();
                }
                continue;
            }
            if (name.empty()) {
                throw FormatError("corrupt container '" + path.string() + "': zero-length tensor name");
            }
            const std::string dtype_str = entry.at("dtype").get<std::string>();
            auto dtype = dtype_from_name(dtype_str);
            if (!dtype) {
                throw FormatError("corrupt container '" + path.string() + "': unknown dtype '" + dtype_str + "'");
            }
            auto shape = entry.at("shape").get<std::vector<int64_t>>();
            const auto& offs = entry.at("data_offsets");
            if (!offs.is_array() || offs.size() != 2) {
                throw FormatError("corrupt container '" + path.string() + "': bad data_offsets for '" + name + "'");
            }
            const uint64_t begin = offs[0].get<uint64_t>();
            const uint64_t end = offs[1].get<uint64_t>();
            if (begin > end || end > data_size) {
                throw FormatError("corrupt container '" + path.string() + "': data_offsets of '" + name +
                                  "' exceed the file length");
            }
            const size_t expected = shape_numel(shape) * dtype_size(*dtype);
            if (end - begin != expected) {
                throw FormatError("corrupt container '" + path.string() + "': '" + name + "' spans " +
                                  std::to_string(end - begin) + " bytes but its shape requires " +
                                  std::to_string(expected));
            }
            ranges.emplace_back(begin, end);
            ckpt.tensors.emplace(name, tensor_from_bytes(*dtype, std::move(shape), data.data() + begin,
                                                         end - begin));
        }
    } catch (const json::exception& e) {
        throw FormatError("corrupt container '" + path.string() + "': " + e.what());
    }

    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i].first < ranges[i - 1].second) {
            throw FormatError("corrupt container '" + path.string() + "': overlapping tensor data ranges");
        }
    }
    return ckpt;
}

}  // namespace dtm
