#pragma once

#include <map>
#include <string>
#include <vector>

#include "aggsim/canonical.hpp"
#include "aggsim/common.hpp"
#include "aggsim/storage.hpp"

namespace aggsim {

struct TransformOp {
  std::string op;                   // select | rename | nest
  std::vector<std::string> fields;  // select, nest
  std::string from;                 // rename
  std::string to;                   // rename
  std::string under;                // nest
};

/// Declarative description of how per-source records become the consumer's
/// output: an op pipeline applied to each record (overridable per source),
/// ordered concatenation, and the output data specification.
class TransformSpec {
 public:
  static TransformSpec parse(const Json& j) {
    if (!j.is_object())
      raise(Errc::InvalidSpecification, "transform must be an object");
    TransformSpec psi;
    psi.original_ = j;
    if (!j.contains("output"))
      raise(Errc::InvalidSpecification,
            "transform requires an output specification");
    psi.output_ = DataSpecification::parse(j.at("output"));
    if (j.contains("merge") && j.at("merge") != Json("concat"))
      raise(Errc::InvalidSpecification,
            "unsupported merge rule " + j.at("merge").dump());
    if (j.contains("ops")) psi.default_ops_ = parse_ops(j.at("ops"), "ops");
    if (j.contains("per_source")) {
      const Json& per = j.at("per_source");
      if (!per.is_object())
        raise(Errc::InvalidSpecification, "per_source must be an object");
      for (const auto& [key, arr] : per.items())
        psi.per_source_[key] = parse_ops(arr, "per_source." + key);
    }
    return psi;
  }

  const Json& to_json() const { return original_; }
  const DataSpecification& output_spec() const { return output_; }

  Json apply_record(const Json& record, const std::string& key) const {
    if (!record.is_object())
      raise(Errc::SchemaViolation, "transform input must be a record");
    const std::vector<TransformOp>* ops = &default_ops_;
    if (auto it = per_source_.find(key); it != per_source_.end())
      ops = &it->second;
    Json out = record;
    for (const auto& op : *ops) out = apply_op(out, op);
    return out;
  }

 private:
  std::vector<TransformOp> default_ops_;
  std::map<std::string, std::vector<TransformOp>> per_source_;
  DataSpecification output_;
  Json original_;

  static std::vector<TransformOp> parse_ops(const Json& arr,
                                            const std::string& path) {
    if (!arr.is_array())
      raise(Errc::InvalidSpecification, path + " must be an array");
    std::vector<TransformOp> ops;
    for (const auto& item : arr) {
      if (!item.is_object() || !item.contains("op"))
        raise(Errc::InvalidSpecification, path + " entries need an 'op'");
      TransformOp op;
      op.op = item.at("op").get<std::string>();
      if (op.op == "select" || op.op == "nest") {
        if (!item.contains("fields") || !item.at("fields").is_array() ||
            item.at("fields").empty())
          raise(Errc::InvalidSpecification,
                path + ": " + op.op + " needs a non-empty field list");
        op.fields = item.at("fields").get<std::vector<std::string>>();
      }
      if (op.op == "rename") {
        if (!item.contains("from") || !item.contains("to"))
          raise(Errc::InvalidSpecification, path + ": rename needs from/to");
        op.from = item.at("from").get<std::string>();
        op.to = item.at("to").get<std::string>();
      } else if (op.op == "nest") {
        if (!item.contains("under"))
          raise(Errc::InvalidSpecification, path + ": nest needs 'under'");
        op.under = item.at("under").get<std::string>();
      } else if (op.op != "select" && op.op != "rename") {
        raise(Errc::InvalidSpecification,
              path + ": unknown op '" + op.op + "'");
      }
      ops.push_back(std::move(op));
    }
    return ops;
  }

  static Json apply_op(const Json& record, const TransformOp& op) {
    if (op.op == "select") {
      Json out = Json::object();
      for (const auto& f : op.fields) {
        if (!record.contains(f))
          raise(Errc::UnknownFieldInPsi, "select references missing field '" + f + "'");
        out[f] = record.at(f);
      }
      return out;
    }
    if (op.op == "rename") {
      if (!record.contains(op.from))
        raise(Errc::UnknownFieldInPsi,
              "rename references missing field '" + op.from + "'");
      Json out = record;
      if (op.to != op.from) {
        if (out.contains(op.to))
          raise(Errc::InvalidSpecification,
                "rename target '" + op.to + "' already present");
        out[op.to] = out.at(op.from);
        out.erase(op.from);
      }
      return out;
    }
    Json nested = Json::object();
    Json out = record;
    for (const auto& f : op.fields) {
      if (!out.contains(f))
        raise(Errc::UnknownFieldInPsi, "nest references missing field '" + f + "'");
      nested[f] = out.at(f);
      out.erase(f);
    }
    if (out.contains(op.under))
      raise(Errc::InvalidSpecification,
            "nest target '" + op.under + "' already present");
    out[op.under] = nested;
    return out;
  }
};

struct TransformInput {
  std::string key;  // per_source lookup key (scenario source name)
  Envelope envelope;
};

/// Processor: adapts each payload to its own specification, applies the
/// pipeline, concatenates the records in input order (a single record
/// stays unwrapped), and validates against the output specification.
inline Envelope process_transform(const std::vector<TransformInput>& inputs,
                                  const TransformSpec& psi) {
  if (inputs.empty())
    raise(Errc::InvalidRequest, "transform needs at least one input");
  Json merged = Json::array();
  for (const auto& input : inputs) {
    DataSpecification spec = DataSpecification::parse(input.envelope.spec);
    Json payload = spec.adapt(input.envelope.payload);
    if (payload.is_array()) {
      for (const auto& record : payload)
        merged.push_back(psi.apply_record(record, input.key));
    } else {
      merged.push_back(psi.apply_record(payload, input.key));
    }
  }
  Json out = merged.size() == 1 ? merged.front() : merged;
  psi.output_spec().validate(out);
  return Envelope{psi.output_spec().original(), out};
}

}  // namespace aggsim
