#pragma once

#include <cstdio>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <shared_mutex>
#include <string>
#include <vector>

#include "aggsim/canonical.hpp"
#include "aggsim/common.hpp"

namespace aggsim {

enum class TxKind {
  Propagation,  // τ_p
  Update,       // τ_u
  Deletion,     // τ_d
  Location,     // τ_l
  Collection,   // τ_c
  Endorsement,  // τ_e
  Storage,      // τ_s
};

inline const char* tx_kind_name(TxKind k) {
  switch (k) {
    case TxKind::Propagation: return "propagation";
    case TxKind::Update: return "update";
    case TxKind::Deletion: return "deletion";
    case TxKind::Location: return "location";
    case TxKind::Collection: return "collection";
    case TxKind::Endorsement: return "endorsement";
    case TxKind::Storage: return "storage";
  }
  return "?";
}

inline std::optional<TxKind> parse_tx_kind(std::string_view s) {
  struct Alias { std::string_view name; TxKind kind; };
  static constexpr Alias aliases[] = {
      {"propagation", TxKind::Propagation}, {"tau_p", TxKind::Propagation},
      {"τ_p", TxKind::Propagation},         {"update", TxKind::Update},
      {"tau_u", TxKind::Update},            {"τ_u", TxKind::Update},
      {"deletion", TxKind::Deletion},       {"tau_d", TxKind::Deletion},
      {"τ_d", TxKind::Deletion},            {"location", TxKind::Location},
      {"tau_l", TxKind::Location},          {"τ_l", TxKind::Location},
      {"collection", TxKind::Collection},   {"tau_c", TxKind::Collection},
      {"τ_c", TxKind::Collection},          {"endorsement", TxKind::Endorsement},
      {"tau_e", TxKind::Endorsement},       {"τ_e", TxKind::Endorsement},
      {"storage", TxKind::Storage},         {"tau_s", TxKind::Storage},
      {"τ_s", TxKind::Storage},
  };
  for (const auto& a : aliases)
    if (a.name == s) return a.kind;
  return std::nullopt;
}

struct Transaction {
  TxKind kind = TxKind::Propagation;
  Json properties = Json::object();
  std::uint64_t timestamp = 0;  // logical; assigned at finalization
  std::string submitter;        // wallet address
  std::string id;               // assigned at finalization

  Json to_json() const {
    return Json{{"id", id},
                {"kind", tx_kind_name(kind)},
                {"properties", properties},
                {"submitter", submitter},
                {"timestamp", timestamp}};
  }
};

inline Transaction make_tx(TxKind kind, Json properties,
                           std::string submitter) {
  Transaction tx;
  tx.kind = kind;
  tx.properties = std::move(properties);
  tx.submitter = std::move(submitter);
  return tx;
}

/// Property access; absent keys yield an empty optional.
inline std::optional<Json> get_property(const Transaction& tx,
                                        const std::string& name) {
  auto it = tx.properties.find(name);
  if (it == tx.properties.end()) return std::nullopt;
  return *it;
}

struct FinalizationResult {
  std::size_t accepted_nodes = 0;
  bool finalized = false;
  std::string transaction_id;
};

struct LedgerConfig {
  std::size_t node_count = 4;
  Rational delta{2, 3};
  /// Trailing byzantine_count nodes vote via a seeded RNG instead of the
  /// honest accept-all policy.
  std::size_t byzantine_count = 0;
  std::uint64_t byzantine_seed = 0;
};

/// Property-match predicate for finalized-set queries.
struct TxQuery {
  std::optional<TxKind> kind;
  std::vector<std::pair<std::string, Json>> equals;
  /// Property must be an array containing the value (srcIds membership).
  std::vector<std::pair<std::string, Json>> contains;
  std::uint64_t min_timestamp = 0;

  TxQuery& with_kind(TxKind k) { kind = k; return *this; }
  TxQuery& where(std::string key, Json value) {
    equals.emplace_back(std::move(key), std::move(value));
    return *this;
  }
  TxQuery& where_contains(std::string key, Json value) {
    contains.emplace_back(std::move(key), std::move(value));
    return *this;
  }
  TxQuery& after(std::uint64_t ts) { min_timestamp = ts; return *this; }

  bool matches(const Transaction& tx) const {
    if (kind && tx.kind != *kind) return false;
    if (tx.timestamp <= min_timestamp && min_timestamp != 0) return false;
    for (const auto& [key, value] : equals) {
      auto p = get_property(tx, key);
      if (!p || *p != value) return false;
    }
    for (const auto& [key, value] : contains) {
      auto p = get_property(tx, key);
      if (!p || !p->is_array()) return false;
      bool found = false;
      for (const auto& el : *p)
        if (el == value) { found = true; break; }
      if (!found) return false;
    }
    return true;
  }
};

/// Simulated distributed ledger: per-node acceptance voting with threshold
/// finalization. Consensus message exchange is abstracted away; only the
/// counting rule accepted > δ·|N| is modeled, in exact integer arithmetic.
class Ledger {
 public:
  using AcceptancePolicy =
      std::function<bool(const Transaction&, std::size_t node)>;

  explicit Ledger(LedgerConfig config) : config_(config) {
    if (config_.node_count < 2)
      raise(Errc::ConfigError, "ledger needs at least 2 nodes");
    if (!config_.delta.valid())
      raise(Errc::ConfigError, "delta must be a rational in (0,1)");
    if (config_.byzantine_count > config_.node_count)
      raise(Errc::ConfigError, "more byzantine nodes than nodes");
    for (std::size_t i = 0; i < config_.byzantine_count; ++i)
      byzantine_rngs_.emplace_back(config_.byzantine_seed * 0x9e3779b9ull + i);
  }

  const LedgerConfig& config() const { return config_; }

  /// Replaces the per-node vote function wholesale (threshold tests).
  void set_policy(AcceptancePolicy policy) {
    std::unique_lock lock(mutex_);
    custom_policy_ = std::move(policy);
  }

  /// Validates structure, runs the acceptance vote on every node, and
  /// appends to the finalized set when the count clears δ·|N|. Transactions
  /// that miss the threshold are dropped, not retried.
  FinalizationResult submit(Transaction tx) {
    validate_structure(tx);
    std::unique_lock lock(mutex_);
    std::size_t accepted = 0;
    for (std::size_t node = 0; node < config_.node_count; ++node)
      if (vote(tx, node)) ++accepted;
    FinalizationResult result;
    result.accepted_nodes = accepted;
    // accepted > δ|N|  ⇔  accepted · den > num · |N|
    result.finalized =
        static_cast<std::int64_t>(accepted) * config_.delta.den >
        config_.delta.num * static_cast<std::int64_t>(config_.node_count);
    if (result.finalized) {
      tx.timestamp = next_timestamp_++;
      char buf[16];
      std::snprintf(buf, sizeof buf, "tx-%06llu",
                    static_cast<unsigned long long>(tx.timestamp));
      tx.id = buf;
      result.transaction_id = tx.id;
      finalized_.push_back(std::move(tx));
    }
    return result;
  }

  std::vector<Transaction> query(const TxQuery& q) const {
    std::shared_lock lock(mutex_);
    std::vector<Transaction> out;
    for (const auto& tx : finalized_)
      if (q.matches(tx)) out.push_back(tx);
    return out;  // finalized_ is in timestamp order already
  }

  std::optional<Transaction> by_id(const std::string& id) const {
    std::shared_lock lock(mutex_);
    for (const auto& tx : finalized_)
      if (tx.id == id) return tx;
    return std::nullopt;
  }

  std::size_t finalized_count() const {
    std::shared_lock lock(mutex_);
    return finalized_.size();
  }

  std::vector<Transaction> finalized_log() const {
    std::shared_lock lock(mutex_);
    return finalized_;
  }

  /// One canonical-text transaction per line.
  void export_log(std::ostream& os) const {
    std::shared_lock lock(mutex_);
    for (const auto& tx : finalized_) os << canonical_text(tx.to_json()) << "\n";
  }

  /// Required property keys per transaction kind.
  static const std::vector<std::string>& required_keys(TxKind kind) {
    static const std::vector<std::string> propagation{"did", "auth", "assert"};
    static const std::vector<std::string> update{"did", "auth", "assert"};
    static const std::vector<std::string> deletion{"did", "deleted"};
    static const std::vector<std::string> location{"locations"};
    static const std::vector<std::string> collection{"srcIds", "consumer"};
    static const std::vector<std::string> endorsement{"s", "c"};
    static const std::vector<std::string> storage{"vc", "storage"};
    switch (kind) {
      case TxKind::Propagation: return propagation;
      case TxKind::Update: return update;
      case TxKind::Deletion: return deletion;
      case TxKind::Location: return location;
      case TxKind::Collection: return collection;
      case TxKind::Endorsement: return endorsement;
      case TxKind::Storage: return storage;
    }
    return propagation;
  }

 private:
  static void validate_structure(const Transaction& tx) {
    if (!tx.properties.is_object())
      raise(Errc::MalformedTransaction, "properties must be an object");
    for (const auto& key : required_keys(tx.kind))
      if (!tx.properties.contains(key))
        raise(Errc::MalformedTransaction,
              std::string(tx_kind_name(tx.kind)) + " transaction missing '" +
                  key + "'");
    if (tx.kind == TxKind::Deletion && tx.properties.at("deleted") != Json(true))
      raise(Errc::MalformedTransaction, "deletion transaction requires deleted=true");
  }

  bool vote(const Transaction& tx, std::size_t node) {
    if (custom_policy_) return custom_policy_(tx, node);
    std::size_t honest = config_.node_count - config_.byzantine_count;
    if (node < honest) return true;
    return (byzantine_rngs_[node - honest].next() & 1) != 0;
  }

  LedgerConfig config_;
  mutable std::shared_mutex mutex_;
  AcceptancePolicy custom_policy_;
  std::vector<Rng> byzantine_rngs_;
  std::vector<Transaction> finalized_;
  std::uint64_t next_timestamp_ = 1;
};

}  // namespace aggsim
