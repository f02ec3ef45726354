#pragma once

#include <json.hpp>

#include <string>

#include "aggsim/common.hpp"

namespace aggsim {

// Canonical textual encoding: compact JSON with object keys sorted.
// nlohmann::json keeps objects in a sorted std::map, so dump() of a
// semantically identical document is byte-identical across runs and
// platforms. Binary values are embedded as base64 strings by convention.
using Json = nlohmann::json;

inline std::string canonical_text(const Json& j) { return j.dump(); }

inline Bytes canonical_bytes(const Json& j) { return to_bytes(j.dump()); }

inline Json parse_json(const std::string& text) {
  return Json::parse(text);
}

inline Json parse_json(const Bytes& bytes) {
  return Json::parse(bytes.begin(), bytes.end());
}

}  // namespace aggsim
