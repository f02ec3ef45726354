#pragma once

#include <algorithm>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "aggsim/canonical.hpp"
#include "aggsim/common.hpp"
#include "aggsim/crypto.hpp"

namespace aggsim {

enum class PayloadClass { Ciphertext, PlaintextMetadata };

inline const char* payload_class_name(PayloadClass c) {
  return c == PayloadClass::Ciphertext ? "ciphertext" : "plaintext-metadata";
}

inline std::optional<PayloadClass> parse_payload_class(std::string_view s) {
  if (s == "ciphertext") return PayloadClass::Ciphertext;
  if (s == "plaintext-metadata" || s == "plaintext")
    return PayloadClass::PlaintextMetadata;
  return std::nullopt;
}

enum class EventKind { Send, Receive, LedgerSubmit, Verdict, Note };

inline const char* event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::Send: return "send";
    case EventKind::Receive: return "receive";
    case EventKind::LedgerSubmit: return "ledger-submit";
    case EventKind::Verdict: return "verdict";
    case EventKind::Note: return "note";
  }
  return "?";
}

inline std::optional<EventKind> parse_event_kind(std::string_view s) {
  if (s == "send") return EventKind::Send;
  if (s == "receive") return EventKind::Receive;
  if (s == "ledger-submit") return EventKind::LedgerSubmit;
  if (s == "verdict") return EventKind::Verdict;
  if (s == "note") return EventKind::Note;
  return std::nullopt;
}

struct TraceEvent {
  std::uint64_t index = 0;
  std::string step;  // protocol step label, e.g. "onchain.9"
  EventKind kind = EventKind::Note;
  std::string actor;
  std::string peer;
  std::string channel;
  std::uint64_t seq = 0;
  PayloadClass payload_class = PayloadClass::PlaintextMetadata;
  std::string payload_kind;
  Bytes payload;
  std::string detail;

  Json to_json() const {
    return Json{{"actor", actor},
                {"channel", channel},
                {"class", payload_class_name(payload_class)},
                {"detail", detail},
                {"index", index},
                {"kind", event_kind_name(kind)},
                {"payload", base64_encode(payload)},
                {"payload_kind", payload_kind},
                {"peer", peer},
                {"seq", seq},
                {"step", step}};
  }

  static TraceEvent from_json(const Json& j) {
    TraceEvent e;
    e.index = j.at("index").get<std::uint64_t>();
    e.step = j.at("step").get<std::string>();
    auto kind = parse_event_kind(j.at("kind").get<std::string>());
    if (!kind) raise(Errc::InvalidRequest, "unknown event kind in trace");
    e.kind = *kind;
    e.actor = j.at("actor").get<std::string>();
    e.peer = j.at("peer").get<std::string>();
    e.channel = j.at("channel").get<std::string>();
    e.seq = j.at("seq").get<std::uint64_t>();
    auto cls = parse_payload_class(j.at("class").get<std::string>());
    if (!cls) raise(Errc::InvalidRequest, "unknown payload class in trace");
    e.payload_class = *cls;
    e.payload_kind = j.at("payload_kind").get<std::string>();
    auto payload = base64_decode(j.at("payload").get<std::string>());
    if (!payload) raise(Errc::InvalidRequest, "undecodable trace payload");
    e.payload = std::move(*payload);
    e.detail = j.at("detail").get<std::string>();
    return e;
  }
};

/// Append-only ordered record of everything observable in a run: message
/// traffic with payload classification, ledger submissions, and verdicts.
class ProtocolTrace {
 public:
  std::uint64_t record(TraceEvent e) {
    std::lock_guard lock(mu_);
    e.index = events_.size();
    events_.push_back(std::move(e));
    return events_.back().index;
  }

  std::vector<TraceEvent> events() const {
    std::lock_guard lock(mu_);
    return events_;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return events_.size();
  }

  void export_jsonl(std::ostream& os) const {
    std::lock_guard lock(mu_);
    for (const auto& e : events_) os << canonical_text(e.to_json()) << "\n";
  }

  std::string export_text() const {
    std::ostringstream os;
    export_jsonl(os);
    return os.str();
  }

  Digest digest(const CryptoProvider& crypto) const {
    return crypto.hash(to_bytes(export_text()));
  }

  static std::vector<TraceEvent> import_jsonl(std::istream& is) {
    std::vector<TraceEvent> events;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      events.push_back(TraceEvent::from_json(parse_json(line)));
    }
    return events;
  }

  /// True when the byte string occurs inside any payload, regardless of
  /// classification. Used for secret-key hygiene.
  bool any_payload_contains(const Bytes& needle) const {
    if (needle.empty()) return false;
    std::lock_guard lock(mu_);
    for (const auto& e : events_) {
      if (e.payload.size() < needle.size()) continue;
      auto it = std::search(e.payload.begin(), e.payload.end(), needle.begin(),
                            needle.end());
      if (it != e.payload.end()) return true;
    }
    return false;
  }

  /// True when any window-sized substring of the data occurs in any traced
  /// payload. Ciphertext-classified payloads are scanned too: encryption is
  /// supposed to make them unrecognizable, so a hit there is still a leak.
  bool plaintext_window_leak(const Bytes& data, std::size_t window = 8) const {
    if (data.size() < window) return false;
    std::unordered_set<std::string> grams;
    {
      std::lock_guard lock(mu_);
      for (const auto& e : events_) {
        if (e.payload.size() < window) continue;
        for (std::size_t i = 0; i + window <= e.payload.size(); ++i)
          grams.emplace(reinterpret_cast<const char*>(e.payload.data()) + i,
                        window);
      }
    }
    if (grams.empty()) return false;
    for (std::size_t i = 0; i + window <= data.size(); ++i) {
      std::string probe(reinterpret_cast<const char*>(data.data()) + i, window);
      if (grams.count(probe)) return true;
    }
    return false;
  }

 private:
  mutable std::mutex mu_;
  std::vector<TraceEvent> events_;
};

}  // namespace aggsim
