// SPDX-License-Identifier: Apache-2.0

#include "dtm/corpus.hpp"

#include <fstream>
#include <unordered_set>

#include "dtm/error.hpp"

namespace dtm {

using nlohmann::json;

json record_to_json(const InstructionRecord& rec) {
    json obj = rec.extra.is_object() ? rec.extra : json::object();
    obj["id"] = rec.id;
    obj["instruction"] = rec.instruction;
    obj["response"] = rec.response;
    if (rec.embedding) obj["embedding"] = *rec.embedding;
    if (rec.features) obj["features"] = *rec.features;
    if (rec.label) obj["label"] = *rec.label;
    if (rec.cluster) obj["cluster"] = *rec.cluster;
    return obj;
}

InstructionRecord record_from_json(const json& obj) {
    if (!obj.is_object()) {
        throw FormatError("record is not a JSON object");
    }
    InstructionRecord rec;
    if (!obj.contains("id") || !obj["id"].is_string()) {
        throw FormatError("record is missing a string 'id'");
    }
    rec.id = obj["id"].get<std::string>();
    if (rec.id.empty()) {
        throw FormatError("record has an empty 'id'");
    }
    rec.instruction = obj.value("instruction", std::string{});
    rec.response = obj.value("response", std::string{});
    if (obj.contains("embedding")) rec.embedding = obj["embedding"].get<std::vector<float>>();
    if (obj.contains("features")) rec.features = obj["features"].get<std::vector<float>>();
    if (obj.contains("label")) rec.label = obj["label"].get<int>();
    if (obj.contains("cluster")) rec.cluster = obj["cluster"].get<int>();
    for (const auto& [key, value] : obj.items()) {
        if (key == "id" || key == "instruction" || key == "response" || key == "embedding" ||
            key == "features" || key == "label" || key == "cluster") {
            continue;
        }
        rec.extra[key] = value;
    }
    return rec;
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open corpus '" + path.string() + "'");
    }
    Corpus corpus;
    std::unordered_set<std::string> seen;
    std::string line;
    size_t line_no = 0;
    std::optional<size_t> embedding_dim;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        InstructionRecord rec;
        try {
            rec = record_from_json(json::parse(line));
        } catch (const json::exception& e) {
            throw FormatError("corpus '" + path.string() + "' line " + std::to_string(line_no) +
                              ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError("corpus '" + path.string() + "' line " + std::to_string(line_no) +
                              ": " + e.what());
        }
        if (!seen.insert(rec.id).second) {
            throw FormatError("corpus '" + path.string() + "' line " + std::to_string(line_no) +
                              ": duplicate id '" + rec.id + "'");
        }
        if (rec.embedding) {
            if (embedding_dim && rec.embedding->size() != *embedding_dim) {
                throw FormatError("corpus '" + path.string() + "' line " + std::to_string(line_no) +
                                  ": embedding length " + std::to_string(rec.embedding->size()) +
                                  " differs from earlier length " + std::to_string(*embedding_dim));
            }
            embedding_dim = rec.embedding->size();
        }
        corpus.records.push_back(std::move(rec));
    }
    return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    for (const auto& rec : corpus.records) {
        out << record_to_json(rec).dump() << '\n';
    }
    out.flush();
    if (!out) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

}  // namespace dtm
