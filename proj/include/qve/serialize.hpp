#pragma once

// JSON mappings for configuration and report types shared by the tools.

#include <cstdint>
#include <string>

#include "json.hpp"
#include "qve/model.hpp"

namespace qve {

using Json = nlohmann::json;

Json config_to_json(const ModelConfig& c);

// Rejects unknown keys and missing fields with ErrorKind::shape_mismatch.
ModelConfig config_from_json(const Json& j);

std::string to_string(Activation a);
std::string to_string(Normalization n);
Activation activation_from_string(const std::string& s);
Normalization normalization_from_string(const std::string& s);

// FNV-1a digest of a JSON document's canonical dump, as 16 hex digits.
std::string json_hash(const Json& j);

std::string hex64(std::uint64_t v);

}  // namespace qve
