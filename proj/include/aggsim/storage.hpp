#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "aggsim/canonical.hpp"
#include "aggsim/common.hpp"
#include "aggsim/crypto.hpp"
#include "aggsim/ledger.hpp"

namespace aggsim {

// --- Data specifications ---

/// Field layout of a payload. Accepts two written forms:
///   record form:  {"firstName": "string", "age": "number"} with nested
///                 objects allowed inline, leaves are "string" | "number";
///   type table:   {"Name": {...}, "Person": {"name": "Name", ...}} where
///                 a field may reference another top-level type. The root
///                 is the single type no other type references.
/// Either way the parsed schema is one expanded record tree.
class DataSpecification {
 public:
  static DataSpecification parse(const Json& raw) {
    if (!raw.is_object() || raw.empty())
      raise(Errc::InvalidSpecification, "specification must be a non-empty object");
    DataSpecification spec;
    spec.original_ = raw;
    if (is_type_table(raw)) {
      std::set<std::string> referenced;
      for (const auto& [name, record] : raw.items()) {
        (void)name;
        collect_references(record, raw, referenced);
      }
      std::vector<std::string> roots;
      for (const auto& [name, record] : raw.items()) {
        (void)record;
        if (!referenced.count(name)) roots.push_back(name);
      }
      if (roots.size() != 1)
        raise(Errc::InvalidSpecification,
              "type table must have exactly one unreferenced root type, found " +
                  std::to_string(roots.size()));
      std::set<std::string> in_progress;
      spec.schema_ = expand(raw.at(roots.front()), raw, in_progress);
    } else {
      std::set<std::string> in_progress;
      spec.schema_ = expand(raw, Json::object(), in_progress);
    }
    return spec;
  }

  static DataSpecification parse(const std::string& text) {
    return parse(parse_json(text));
  }

  const Json& schema() const { return schema_; }
  const Json& original() const { return original_; }

  /// Strict conformance: exact field sets, leaf types as declared.
  /// A top-level array is checked element-wise.
  void validate(const Json& payload) const {
    if (payload.is_array()) {
      for (const auto& item : payload) validate_node(schema_, item, "");
      return;
    }
    validate_node(schema_, payload, "");
  }

  bool matches(const Json& payload) const {
    try {
      validate(payload);
      return true;
    } catch (const Error&) {
      return false;
    }
  }

  /// Reshapes raw data into the declared layout: every leaf is located by
  /// field name anywhere in the raw tree, values are typed, extra fields
  /// are dropped. Idempotent on conformant input.
  Json adapt(const Json& raw) const {
    if (raw.is_array()) {
      Json out = Json::array();
      for (const auto& item : raw) out.push_back(adapt_node(schema_, item));
      return out;
    }
    Json out = adapt_node(schema_, raw);
    validate(out);
    return out;
  }

  bool operator==(const DataSpecification& other) const {
    return schema_ == other.schema_;
  }

 private:
  Json original_;
  Json schema_;

  static bool is_leaf_name(const std::string& s) {
    return s == "string" || s == "number";
  }

  static bool is_type_table(const Json& raw) {
    for (const auto& [key, value] : raw.items()) {
      (void)key;
      if (!value.is_object()) return false;
    }
    // Table form needs at least one field referencing a top-level type;
    // otherwise the object is a record of inline sub-records.
    std::set<std::string> referenced;
    for (const auto& [key, value] : raw.items()) {
      (void)key;
      collect_references(value, raw, referenced);
    }
    return !referenced.empty();
  }

  static void collect_references(const Json& record, const Json& table,
                                 std::set<std::string>& out) {
    for (const auto& [field, type] : record.items()) {
      (void)field;
      if (type.is_object()) {
        collect_references(type, table, out);
      } else if (type.is_string() && table.contains(type.get<std::string>())) {
        out.insert(type.get<std::string>());
      }
    }
  }

  static Json expand(const Json& record, const Json& table,
                     std::set<std::string>& in_progress) {
    if (!record.is_object())
      raise(Errc::InvalidSpecification, "type body must be an object");
    Json out = Json::object();
    for (const auto& [field, type] : record.items()) {
      if (type.is_object()) {
        out[field] = expand(type, table, in_progress);
      } else if (type.is_string()) {
        std::string name = type.get<std::string>();
        if (is_leaf_name(name)) {
          out[field] = name;
        } else if (table.contains(name)) {
          if (in_progress.count(name))
            raise(Errc::InvalidSpecification,
                  "cyclic type reference through '" + name + "'");
          in_progress.insert(name);
          out[field] = expand(table.at(name), table, in_progress);
          in_progress.erase(name);
        } else {
          raise(Errc::InvalidSpecification,
                "unknown type name '" + name + "' for field '" + field + "'");
        }
      } else {
        raise(Errc::InvalidSpecification,
              "field '" + field + "' must map to a type name or object");
      }
    }
    return out;
  }

  static void validate_node(const Json& schema, const Json& value,
                            const std::string& path) {
    if (!value.is_object())
      raise(Errc::SchemaViolation, "expected object at '" + path + "'");
    for (const auto& [field, sub] : schema.items()) {
      std::string at = path.empty() ? field : path + "." + field;
      if (!value.contains(field))
        raise(Errc::SchemaViolation, "missing field '" + at + "'");
      const Json& got = value.at(field);
      if (sub.is_object()) {
        validate_node(sub, got, at);
      } else if (sub == Json("string")) {
        if (!got.is_string())
          raise(Errc::SchemaViolation, "field '" + at + "' must be a string");
      } else {
        if (!got.is_number())
          raise(Errc::SchemaViolation, "field '" + at + "' must be a number");
      }
    }
    for (const auto& [field, got] : value.items()) {
      (void)got;
      if (!schema.contains(field))
        raise(Errc::SchemaViolation,
              "unexpected field '" +
                  (path.empty() ? field : path + "." + field) + "'");
    }
  }

  /// Depth-first lookup of a non-object value under the given name.
  static const Json* find_leaf(const Json& node, const std::string& name) {
    if (!node.is_object()) return nullptr;
    if (auto it = node.find(name); it != node.end() && !it->is_object())
      return &*it;
    for (const auto& [key, sub] : node.items()) {
      (void)key;
      if (sub.is_object())
        if (const Json* hit = find_leaf(sub, name)) return hit;
    }
    return nullptr;
  }

  static Json adapt_node(const Json& schema, const Json& raw) {
    if (!raw.is_object())
      raise(Errc::SchemaViolation, "raw value must be an object");
    Json out = Json::object();
    for (const auto& [field, sub] : schema.items()) {
      if (sub.is_object()) {
        out[field] = adapt_node(sub, raw);
        continue;
      }
      const Json* hit = find_leaf(raw, field);
      if (!hit) raise(Errc::SchemaViolation, "missing field '" + field + "'");
      out[field] = coerce(*hit, sub.get<std::string>(), field);
    }
    return out;
  }

  static Json coerce(const Json& value, const std::string& leaf,
                     const std::string& field) {
    if (leaf == "string") {
      if (value.is_string()) return value;
      raise(Errc::SchemaViolation, "field '" + field + "' is not a string");
    }
    if (value.is_number()) return value;
    if (value.is_string()) {
      try {
        Json parsed = Json::parse(value.get<std::string>());
        if (parsed.is_number()) return parsed;
      } catch (const Json::parse_error&) {
      }
    }
    raise(Errc::SchemaViolation, "field '" + field + "' is not a number");
  }
};

/// Persisted form of data: the payload always travels with its
/// specification.
struct Envelope {
  Json spec;
  Json payload;

  bool operator==(const Envelope&) const = default;

  Json to_json() const { return Json{{"payload", payload}, {"spec", spec}}; }
  Bytes canonical() const { return canonical_bytes(to_json()); }

  static Envelope from_json(const Json& j) {
    return Envelope{j.at("spec"), j.at("payload")};
  }
  static Envelope from_bytes(const Bytes& b) { return from_json(parse_json(b)); }
};

inline Envelope seal_envelope(const DataSpecification& spec, const Json& raw) {
  return Envelope{spec.original(), spec.adapt(raw)};
}

// --- Partition layer ---

struct PartitionSet {
  double scatter_degree = 0.0;
  size_t count = 0;
  std::map<size_t, Bytes> chunks;

  /// Chunks in index order; a gap raises MissingPartition.
  std::vector<Bytes> ordered() const {
    std::vector<Bytes> out;
    out.reserve(count);
    for (size_t k = 0; k < count; ++k) {
      auto it = chunks.find(k);
      if (it == chunks.end())
        raise(Errc::MissingPartition, "partition " + std::to_string(k) + " absent");
      out.push_back(it->second);
    }
    return out;
  }
};

inline size_t partition_count(double gamma) {
  if (!(gamma >= 0.0) || gamma >= 1.0)
    raise(Errc::InvalidScatterDegree,
          "scatter degree must lie in [0,1), got " + std::to_string(gamma));
  if (gamma == 0.0) return 1;
  // Guard against binary representation of decimals like 0.1 flooring low.
  return static_cast<size_t>(std::floor(1.0 / gamma + 1e-9)) + 1;
}

/// Splits data into the scatter-degree-determined number of near-equal
/// chunks: the first |d| mod count chunks carry one extra byte. When the
/// count exceeds |d|, trailing chunks are empty.
inline PartitionSet partition(const Bytes& d, double gamma) {
  if (d.empty()) raise(Errc::InvalidRequest, "cannot partition empty data");
  PartitionSet set;
  set.scatter_degree = gamma;
  set.count = partition_count(gamma);
  size_t base = d.size() / set.count;
  size_t extra = d.size() % set.count;
  size_t offset = 0;
  for (size_t k = 0; k < set.count; ++k) {
    size_t len = base + (k < extra ? 1 : 0);
    set.chunks[k] = Bytes(d.begin() + offset, d.begin() + offset + len);
    offset += len;
  }
  return set;
}

inline Bytes assemble(const PartitionSet& set) {
  if (set.count == 0) raise(Errc::MissingPartition, "empty partition set");
  Bytes out;
  for (const Bytes& chunk : set.ordered())
    out.insert(out.end(), chunk.begin(), chunk.end());
  return out;
}

// --- Mapping layer ---

struct StorageLocation {
  std::string id;
  bool available = true;
  double reputation = 0.0;
  double cost = 0.0;
};

/// Dynamic table of known storage locations. Reads take snapshots;
/// availability updates are serialized.
class LocationTable {
 public:
  void add(StorageLocation loc) {
    std::unique_lock lock(mu_);
    entries_.push_back(std::move(loc));
  }

  void set_available(const std::string& id, bool available) {
    std::unique_lock lock(mu_);
    for (auto& e : entries_)
      if (e.id == id) e.available = available;
  }

  std::optional<StorageLocation> find(const std::string& id) const {
    std::shared_lock lock(mu_);
    for (const auto& e : entries_)
      if (e.id == id) return e;
    return std::nullopt;
  }

  std::vector<StorageLocation> snapshot() const {
    std::shared_lock lock(mu_);
    return entries_;
  }

 private:
  mutable std::shared_mutex mu_;
  std::vector<StorageLocation> entries_;
};

/// Orders assignable locations; chunk k goes to candidate k mod |C|,
/// advancing past locations whose upload fails.
class SelectionPolicy {
 public:
  virtual ~SelectionPolicy() = default;
  virtual const char* name() const = 0;
  virtual std::vector<std::string> order(const LocationTable& table) const = 0;
};

class RoundRobinPolicy final : public SelectionPolicy {
 public:
  const char* name() const override { return "round-robin"; }
  std::vector<std::string> order(const LocationTable& table) const override {
    std::vector<std::string> out;
    for (const auto& e : table.snapshot())
      if (e.available) out.push_back(e.id);
    return out;
  }
};

class WeightedScorePolicy final : public SelectionPolicy {
 public:
  const char* name() const override { return "weighted-score"; }
  std::vector<std::string> order(const LocationTable& table) const override {
    std::vector<StorageLocation> avail;
    for (const auto& e : table.snapshot())
      if (e.available) avail.push_back(e);
    std::sort(avail.begin(), avail.end(),
              [](const StorageLocation& a, const StorageLocation& b) {
                if (a.reputation != b.reputation)
                  return a.reputation > b.reputation;
                if (a.cost != b.cost) return a.cost < b.cost;
                return a.id < b.id;
              });
    std::vector<std::string> out;
    for (const auto& e : avail) out.push_back(e.id);
    return out;
  }
};

struct LocationSet {
  std::vector<std::string> handles;

  bool operator==(const LocationSet&) const = default;

  Json to_json() const { return Json(handles); }
  static LocationSet from_json(const Json& j) {
    return LocationSet{j.get<std::vector<std::string>>()};
  }
};

/// Anything partitions can be fetched back from.
class BlobStore {
 public:
  virtual ~BlobStore() = default;
  virtual std::string kind() const = 0;
  virtual Bytes download(const std::string& handle) const = 0;
};

/// In-simulation decentralized backend: a cluster of storage locations,
/// each holding uploaded blobs. Handles look like loc://<id>/<seq>.
class StorageCluster final : public BlobStore {
 public:
  std::string kind() const override { return "decentralized"; }

  LocationTable& table() { return table_; }
  const LocationTable& table() const { return table_; }

  void inject_upload_failures(const std::string& id, int n) {
    std::unique_lock lock(mu_);
    fail_counts_[id] += n;
  }

  std::string upload(const std::string& id, const Bytes& chunk) {
    std::unique_lock lock(mu_);
    auto loc = table_.find(id);
    if (!loc || !loc->available)
      raise(Errc::UploadFailure, "location '" + id + "' cannot accept uploads");
    if (auto it = fail_counts_.find(id); it != fail_counts_.end() && it->second > 0) {
      --it->second;
      raise(Errc::UploadFailure, "upload to '" + id + "' failed");
    }
    std::string key = std::to_string(seq_++);
    blobs_[id][key] = chunk;
    return "loc://" + id + "/" + key;
  }

  Bytes download(const std::string& handle) const override {
    std::shared_lock lock(mu_);
    auto [id, key] = split_handle(handle);
    auto loc = table_.find(id);
    if (!loc || !loc->available)
      raise(Errc::LocationUnreachable, "location '" + id + "' is unreachable");
    auto node = blobs_.find(id);
    if (node == blobs_.end() || !node->second.count(key))
      raise(Errc::MissingPartition, "no blob stored at " + handle);
    return node->second.at(key);
  }

  void corrupt(const std::string& handle) {
    std::unique_lock lock(mu_);
    auto [id, key] = split_handle(handle);
    auto node = blobs_.find(id);
    if (node == blobs_.end() || !node->second.count(key))
      raise(Errc::MissingPartition, "no blob stored at " + handle);
    Bytes& blob = node->second.at(key);
    if (blob.empty())
      blob.push_back(0xff);
    else
      blob[0] ^= 0xff;
  }

 private:
  static std::pair<std::string, std::string> split_handle(
      const std::string& handle) {
    const std::string prefix = "loc://";
    if (handle.rfind(prefix, 0) != 0)
      raise(Errc::InvalidRequest, "not a cluster handle: " + handle);
    auto rest = handle.substr(prefix.size());
    auto slash = rest.rfind('/');
    if (slash == std::string::npos)
      raise(Errc::InvalidRequest, "malformed handle: " + handle);
    return {rest.substr(0, slash), rest.substr(slash + 1)};
  }

  mutable std::shared_mutex mu_;
  LocationTable table_;
  std::map<std::string, std::map<std::string, Bytes>> blobs_;
  std::map<std::string, int> fail_counts_;
  uint64_t seq_ = 0;
};

/// Source-operated backend: one key-value store the owner controls.
/// Handles look like self://<name>/<key>.
class SelfHostedStore final : public BlobStore {
 public:
  explicit SelfHostedStore(std::string name) : name_(std::move(name)) {}

  std::string kind() const override { return "self-hosted"; }
  const std::string& name() const { return name_; }

  void set_online(bool online) {
    std::unique_lock lock(mu_);
    online_ = online;
  }

  std::string put(const std::string& key, const Bytes& blob) {
    std::unique_lock lock(mu_);
    if (!online_)
      raise(Errc::UploadFailure, "store '" + name_ + "' is offline");
    blobs_[key] = blob;
    return "self://" + name_ + "/" + key;
  }

  Bytes download(const std::string& handle) const override {
    std::shared_lock lock(mu_);
    const std::string prefix = "self://" + name_ + "/";
    if (handle.rfind(prefix, 0) != 0)
      raise(Errc::InvalidRequest, "not a handle of this store: " + handle);
    if (!online_)
      raise(Errc::LocationUnreachable, "store '" + name_ + "' is offline");
    std::string key = handle.substr(prefix.size());
    auto it = blobs_.find(key);
    if (it == blobs_.end())
      raise(Errc::MissingPartition, "no blob stored at " + handle);
    return it->second;
  }

  void corrupt(const std::string& handle) {
    std::unique_lock lock(mu_);
    const std::string prefix = "self://" + name_ + "/";
    auto it = blobs_.find(handle.substr(prefix.size()));
    if (it == blobs_.end())
      raise(Errc::MissingPartition, "no blob stored at " + handle);
    if (it->second.empty())
      it->second.push_back(0xff);
    else
      it->second[0] ^= 0xff;
  }

 private:
  mutable std::shared_mutex mu_;
  std::string name_;
  bool online_ = true;
  std::map<std::string, Bytes> blobs_;
};

/// Public, temporary, content-addressed space used while acquisitions are
/// in flight. Handles look like staging://<digest>.
class StagingStore final : public BlobStore {
 public:
  std::string kind() const override { return "staging"; }

  void set_online(bool online) {
    std::unique_lock lock(mu_);
    online_ = online;
  }

  std::string put(const Bytes& blob) {
    std::unique_lock lock(mu_);
    if (!online_) raise(Errc::StagingUnreachable, "staging space is offline");
    std::string key = hex_encode(detail::generichash(blob, "staging", 16));
    blobs_[key] = blob;
    return "staging://" + key;
  }

  Bytes download(const std::string& handle) const override {
    std::shared_lock lock(mu_);
    if (!online_) raise(Errc::StagingUnreachable, "staging space is offline");
    auto it = blobs_.find(strip(handle));
    if (it == blobs_.end())
      raise(Errc::MissingPartition, "no blob staged at " + handle);
    return it->second;
  }

  void erase(const std::string& handle) {
    std::unique_lock lock(mu_);
    blobs_.erase(strip(handle));
  }

  void corrupt(const std::string& handle) {
    std::unique_lock lock(mu_);
    auto it = blobs_.find(strip(handle));
    if (it == blobs_.end())
      raise(Errc::MissingPartition, "no blob staged at " + handle);
    if (it->second.empty())
      it->second.push_back(0xff);
    else
      it->second[0] ^= 0xff;
  }

 private:
  static std::string strip(const std::string& handle) {
    const std::string prefix = "staging://";
    if (handle.rfind(prefix, 0) != 0)
      raise(Errc::InvalidRequest, "not a staging handle: " + handle);
    return handle.substr(prefix.size());
  }

  mutable std::shared_mutex mu_;
  bool online_ = true;
  std::map<std::string, Bytes> blobs_;
};

/// Maps each chunk onto a policy-ordered location (wrapping when chunks
/// outnumber locations) and uploads it there. A failing upload moves the
/// chunk along the candidate ring.
inline LocationSet assign_and_upload(StorageCluster& cluster,
                                     const PartitionSet& set,
                                     const SelectionPolicy& policy) {
  std::vector<std::string> candidates = policy.order(cluster.table());
  if (candidates.empty())
    raise(Errc::InsufficientLocations, "no available storage locations");
  LocationSet out;
  auto ordered = set.ordered();
  for (size_t k = 0; k < ordered.size(); ++k) {
    std::string handle;
    std::string last_error;
    for (size_t attempt = 0; attempt < candidates.size(); ++attempt) {
      const std::string& id = candidates[(k + attempt) % candidates.size()];
      try {
        handle = cluster.upload(id, ordered[k]);
        break;
      } catch (const Error& e) {
        if (e.code() != Errc::UploadFailure) throw;
        last_error = e.what();
      }
    }
    if (handle.empty())
      raise(Errc::UploadFailure,
            "all locations rejected partition " + std::to_string(k) + ": " +
                last_error);
    out.handles.push_back(handle);
  }
  return out;
}

inline PartitionSet fetch(const BlobStore& store, const LocationSet& set) {
  PartitionSet out;
  out.count = set.handles.size();
  for (size_t k = 0; k < set.handles.size(); ++k) {
    try {
      out.chunks[k] = store.download(set.handles[k]);
    } catch (const Error& e) {
      if (e.code() == Errc::LocationUnreachable)
        raise(Errc::LocationUnreachable,
              "partition " + std::to_string(k) + ": " + e.what());
      throw;
    }
  }
  return out;
}

// --- Chain layer ---

inline FinalizationResult record_locations(Ledger& ledger,
                                           const LocationSet& set,
                                           const std::string& submitter) {
  auto result = ledger.submit(make_tx(
      TxKind::Location, Json{{"locations", set.to_json()}}, submitter));
  if (!result.finalized)
    raise(Errc::LedgerRejection, "location record was not finalized");
  return result;
}

inline FinalizationResult record_locations(Ledger& ledger,
                                           const LocationSet& set,
                                           const std::string& submitter,
                                           const CryptoProvider& crypto,
                                           const SymmetricKey& key, Rng& rng) {
  Ciphertext ct = crypto.encrypt(canonical_bytes(set.to_json()), key, rng);
  auto result = ledger.submit(make_tx(
      TxKind::Location, Json{{"locations", ct.encode()}}, submitter));
  if (!result.finalized)
    raise(Errc::LedgerRejection, "location record was not finalized");
  return result;
}

inline LocationSet parse_locations(const Transaction& tx,
                                   const CryptoProvider* crypto = nullptr,
                                   const SymmetricKey* key = nullptr) {
  if (tx.kind != TxKind::Location)
    raise(Errc::WrongTransactionKind,
          std::string("expected a location transaction, got ") +
              tx_kind_name(tx.kind));
  const Json& prop = tx.properties.at("locations");
  if (prop.is_array()) return LocationSet::from_json(prop);
  if (!prop.is_string())
    raise(Errc::MalformedTransaction, "locations property has no usable form");
  if (!crypto || !key)
    raise(Errc::DecryptionFailure,
          "location record is encrypted and no key was supplied");
  Ciphertext ct = Ciphertext::decode(prop.get<std::string>());
  Bytes plain = crypto->decrypt(ct, *key);
  return LocationSet::from_json(parse_json(plain));
}

// --- Storage information (m) ---

/// Everything a consumer needs to fetch the sealed data and the wrapped
/// data key without further context.
struct StorageInfo {
  std::string backend;
  std::string data_handle;
  std::string key_handle;

  bool operator==(const StorageInfo&) const = default;

  Json to_json() const {
    return Json{{"backend", backend},
                {"data", data_handle},
                {"key", key_handle}};
  }
  static StorageInfo from_json(const Json& j) {
    return StorageInfo{j.at("backend").get<std::string>(),
                       j.at("data").get<std::string>(),
                       j.at("key").get<std::string>()};
  }
};

}  // namespace aggsim
