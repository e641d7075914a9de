// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace dtm {

// One instruction-following sample. features/label carry the synthetic
// classification payload; embedding feeds k-means dispersal. Unknown JSONL
// fields are kept in `extra` and written back on save.
struct InstructionRecord {
    std::string id;
    std::string instruction;
    std::string response;
    std::optional<std::vector<float>> embedding;
    std::optional<std::vector<float>> features;
    std::optional<int> label;
    std::optional<int> cluster;
    nlohmann::json extra = nlohmann::json::object();
};

struct Corpus {
    std::vector<InstructionRecord> records;

    size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
};

// JSONL, one record per line; duplicate ids and malformed lines are errors
// (messages carry the line number)
Corpus load_corpus(const std::filesystem::path& path);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

nlohmann::json record_to_json(const InstructionRecord& rec);
InstructionRecord record_from_json(const nlohmann::json& obj);

}  // namespace dtm
