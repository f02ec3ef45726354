#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <aggsim/canonical.hpp>
#include <aggsim/common.hpp>
#include <aggsim/crypto.hpp>
#include <aggsim/identity.hpp>
#include <aggsim/ledger.hpp>
#include <aggsim/netsim.hpp>
#include <aggsim/storage.hpp>
#include <aggsim/trace.hpp>
#include <aggsim/transform.hpp>

namespace aggsim {

// Reason codes surfaced in run reports and traces whenever a source fails to
// contribute to the aggregate.
namespace reason {
inline constexpr const char* kAuthFail = "AUTH_FAIL";
inline constexpr const char* kApprovalFail = "APPROVAL_FAIL";
inline constexpr const char* kNonceMismatch = "NONCE_MISMATCH";
inline constexpr const char* kDecryptionFailure = "DECRYPTION_FAILURE";
inline constexpr const char* kStagingUnreachable = "STAGING_UNREACHABLE";
inline constexpr const char* kPortClosed = "PORT_CLOSED";
inline constexpr const char* kAuthorityRejected = "AUTHORITY_REJECTED";
inline constexpr const char* kLedgerRejection = "LEDGER_REJECTION";
}  // namespace reason

inline std::string wallet_from_did(const std::string& did) {
  const std::string prefix = "did:agg:";
  if (did.rfind(prefix, 0) != 0)
    raise(Errc::InvalidRequest, "not an aggregation DID: " + did);
  return did.substr(prefix.size());
}

inline Bytes nonce_bytes(std::uint64_t nonce) {
  return to_bytes(std::to_string(nonce));
}

// ---------------------------------------------------------------------------
// Endorsement

struct EndorsementRecord {
  std::string source;
  std::string authority;
  VerifiableCredential vc;
};

// Inspection hook: given the subject DID and the data, decide whether the
// authority vouches for it.
using EndorsementPolicy =
    std::function<bool(const std::string&, const Bytes&)>;

inline EndorsementRecord endorse_data(const CryptoProvider& crypto,
                                      Registry& registry,
                                      const EntityIdentity& authority,
                                      const std::string& source_did,
                                      const Bytes& data,
                                      const EndorsementPolicy& approve = {}) {
  if (!registry.resolve(source_did))
    raise(Errc::UnresolvableDid, "cannot endorse unknown DID " + source_did);
  if (approve && !approve(source_did, data))
    raise(Errc::EndorsementRejected,
          "authority declined to endorse data for " + source_did);
  EndorsementRecord rec;
  rec.source = source_did;
  rec.authority = authority.did;
  rec.vc = issue_vc(crypto, registry, authority, source_did,
                    ownership_claim(crypto, data));
  return rec;
}

// ---------------------------------------------------------------------------
// Arbitration

struct Verdict {
  bool ok = false;
  std::string reason;
  std::optional<VerifiableCredential> vc;
};

// Consumer-side gatekeeper. Authenticates the wrapped credential, then checks
// the mode-specific approval evidence. The ownership claim itself is checked
// later, once the data has actually been fetched.
class Arbitrator {
 public:
  Arbitrator(const CryptoProvider& crypto, const KeyDirectory& dir,
             Registry& registry)
      : crypto_(crypto), dir_(dir), registry_(registry) {}

  Verdict verify_onchain(const Ciphertext& wrapped_vc,
                         const std::string& claimed_did,
                         const SecretKey& consumer_sk,
                         const std::string& consumer_did) const {
    Verdict v = authenticate(wrapped_vc, claimed_did, consumer_sk);
    if (!v.ok) return v;
    OwnershipResult pr = verify_credential_proof(crypto_, dir_, registry_, *v.vc);
    if (!pr.owned)
      return {false, own_reason_name(pr.reason), std::move(v.vc)};
    if (!endorsement_exists(claimed_did, consumer_did))
      return {false, reason::kApprovalFail, std::move(v.vc)};
    return v;
  }

  Verdict verify_offchain(const Ciphertext& wrapped_vc,
                          const std::string& claimed_did,
                          const SecretKey& consumer_sk,
                          const std::optional<Ciphertext>& omega,
                          std::uint64_t expected_nonce) const {
    Verdict v = authenticate(wrapped_vc, claimed_did, consumer_sk);
    if (!v.ok) return v;
    OwnershipResult proof =
        verify_credential_proof(crypto_, dir_, registry_, *v.vc);
    if (!proof.owned)
      return {false, own_reason_name(proof.reason), std::move(v.vc)};
    if (!omega) return {false, reason::kApprovalFail, std::move(v.vc)};
    auto issuer_doc = registry_.resolve(v.vc->issuer);
    auto source_doc = registry_.resolve(claimed_did);
    if (!issuer_doc || !source_doc)
      return {false, reason::kApprovalFail, std::move(v.vc)};
    Bytes inner_wire, recovered;
    try {
      inner_wire = crypto_.verify_recover(*omega, issuer_pk(*issuer_doc));
      recovered = crypto_.verify_recover(Ciphertext::from_wire(inner_wire),
                                         signer_pk(*source_doc));
    } catch (const std::exception&) {
      return {false, reason::kApprovalFail, std::move(v.vc)};
    }
    if (recovered != nonce_bytes(expected_nonce))
      return {false, reason::kNonceMismatch, std::move(v.vc)};
    return v;
  }

  // Ownership clauses, applied once the plaintext is in hand.
  OwnershipResult verify_claim(const VerifiableCredential& vc,
                               const std::string& source_did,
                               const Bytes& data) const {
    return verify_ownership(crypto_, dir_, vc, source_did, data);
  }

 private:
  Verdict authenticate(const Ciphertext& wrapped_vc,
                       const std::string& claimed_did,
                       const SecretKey& consumer_sk) const {
    try {
      Bytes signed_wire = crypto_.decrypt(wrapped_vc, consumer_sk);
      auto doc = registry_.resolve(claimed_did);
      if (!doc) return {false, reason::kAuthFail, {}};
      Bytes vc_bytes = crypto_.verify_recover(Ciphertext::from_wire(signed_wire),
                                              signer_pk(*doc));
      auto vc = VerifiableCredential::from_json(parse_json(vc_bytes));
      if (vc.credentialSubject.id != claimed_did)
        return {false, reason::kAuthFail, {}};
      return {true, "", std::move(vc)};
    } catch (const std::exception&) {
      return {false, reason::kAuthFail, {}};
    }
  }

  bool endorsement_exists(const std::string& source_did,
                          const std::string& consumer_did) const {
    auto txs = registry_.ledger().query(TxQuery{}
                                            .with_kind(TxKind::Endorsement)
                                            .where("s", Json(source_did))
                                            .where("c", Json(consumer_did)));
    return !txs.empty();
  }

  PublicKey issuer_pk(const DidDocument& doc) const {
    auto pk = dir_.find(doc.auth);
    if (!pk) raise(Errc::UnresolvableIssuer, "no key behind " + doc.auth);
    return *pk;
  }

  PublicKey signer_pk(const DidDocument& doc) const {
    auto pk = dir_.find(doc.auth);
    if (!pk) raise(Errc::UnresolvableDid, "no key behind " + doc.auth);
    return *pk;
  }

  const CryptoProvider& crypto_;
  const KeyDirectory& dir_;
  Registry& registry_;
};

// ---------------------------------------------------------------------------
// Run bookkeeping

struct AggregationRequest {
  std::string consumer;
  std::vector<std::string> sources;
  TransformSpec transform;
  std::optional<std::uint64_t> nonce;
  bool strict_termination = false;
};

enum class SourceState { Pending, Authorized, Rejected, Delivered, Verified, Failed };

inline const char* source_state_name(SourceState s) {
  switch (s) {
    case SourceState::Pending: return "pending";
    case SourceState::Authorized: return "authorized";
    case SourceState::Rejected: return "rejected";
    case SourceState::Delivered: return "delivered";
    case SourceState::Verified: return "verified";
    case SourceState::Failed: return "failed";
  }
  return "?";
}

struct SourceOutcome {
  std::string name;
  std::string did;
  SourceState state = SourceState::Pending;
  std::string reason;
  std::string tau_e_id;
  std::string tau_s_id;
};

struct RunReport {
  std::string mode;
  bool strict = false;
  std::string collection_tx;
  std::vector<SourceOutcome> sources;
  std::optional<Envelope> output;
  std::string output_digest;
  std::size_t ledger_before = 0;
  std::size_t ledger_after = 0;

  std::size_t verified_count() const {
    std::size_t n = 0;
    for (const auto& s : sources)
      if (s.state == SourceState::Verified) ++n;
    return n;
  }

  Json to_json() const {
    Json srcs = Json::array();
    for (const auto& s : sources)
      srcs.push_back(Json{{"did", s.did},
                          {"name", s.name},
                          {"reason", s.reason},
                          {"state", source_state_name(s.state)},
                          {"tau_e", s.tau_e_id},
                          {"tau_s", s.tau_s_id}});
    return Json{{"collection_tx", collection_tx},
                {"ledger_after", ledger_after},
                {"ledger_before", ledger_before},
                {"mode", mode},
                {"output_digest", output_digest},
                {"sources", srcs},
                {"strict", strict}};
  }
};

// ---------------------------------------------------------------------------
// World: every long-lived piece of simulated infrastructure for one scenario.

struct SourceData {
  std::string authority;
  DataSpecification spec;
  Json raw;
  Bytes plaintext;
  std::optional<VerifiableCredential> vc;
  std::string backend = "decentralized";
  std::shared_ptr<SelfHostedStore> store;
  std::optional<SymmetricKey> rest_key;
  std::string tau_l_id;
};

struct World {
  std::shared_ptr<CryptoProvider> crypto;
  KeyDirectory dir;
  std::unique_ptr<Ledger> ledger;
  std::unique_ptr<Registry> registry;
  StorageCluster cluster;
  StagingStore staging;
  ProtocolTrace trace;
  Router router{trace};
  std::map<std::string, EntityActor> actors;
  std::map<std::string, std::string> names_by_did;
  std::map<std::string, SourceData> sources;
  std::string consumer_name;
  std::vector<AdversaryScript> scripts;
  std::set<std::string> approval_reject;
  std::unique_ptr<SelectionPolicy> policy = std::make_unique<RoundRobinPolicy>();
  double scatter_degree = 0.0;
  bool encrypt_location_records = true;
  std::uint64_t seed = 1;
  std::uint64_t run_counter = 0;
  bool threaded = false;
  unsigned threads = 4;

  World() = default;
  World(const World&) = delete;
  World& operator=(const World&) = delete;

  void init(std::shared_ptr<CryptoProvider> provider, LedgerConfig cfg,
            std::uint64_t master_seed) {
    crypto = std::move(provider);
    seed = master_seed;
    ledger = std::make_unique<Ledger>(cfg);
    registry = std::make_unique<Registry>(*ledger);
  }

  Rng actor_rng(const std::string& label) const {
    return Rng(label_seed(seed, label));
  }

  EntityActor& actor(const std::string& name) {
    auto it = actors.find(name);
    if (it == actors.end())
      raise(Errc::ConfigError, "no actor named " + name);
    return it->second;
  }

  SourceData& source(const std::string& name) {
    auto it = sources.find(name);
    if (it == sources.end())
      raise(Errc::ConfigError, "no source named " + name);
    return it->second;
  }

  std::string did_of(const std::string& name) {
    return actor(name).identity.did;
  }

  std::string name_of_did(const std::string& did) const {
    auto it = names_by_did.find(did);
    return it == names_by_did.end() ? std::string() : it->second;
  }

  const AdversaryScript* script_for(const std::string& source_name) const {
    for (const auto& sc : scripts)
      if (sc.source == source_name) return &sc;
    return nullptr;
  }

  const BlobStore& store_for(const std::string& handle) const {
    if (handle.rfind("staging://", 0) == 0) return staging;
    if (handle.rfind("loc://", 0) == 0) return cluster;
    if (handle.rfind("self://", 0) == 0) {
      std::string rest = handle.substr(7);
      std::string owner = rest.substr(0, rest.find('/'));
      auto it = sources.find(owner);
      if (it == sources.end() || !it->second.store)
        raise(Errc::LocationUnreachable, "no store behind " + handle);
      return *it->second.store;
    }
    raise(Errc::InvalidRequest, "unknown handle scheme: " + handle);
  }

  EntityActor& add_actor(Role role, const std::string& name) {
    if (!ledger)
      raise(Errc::ConfigError, "world not initialized");
    if (actors.count(name))
      raise(Errc::ConfigError, "duplicate actor name: " + name);
    Rng rng = actor_rng("identity:" + name);
    EntityActor a;
    a.role = role;
    a.name = name;
    a.identity = make_identity(*crypto, rng, dir);
    FinalizationResult fin = registry->propagate(
        a.identity.document(), crypto->wallet_address(a.identity.keys.auth.pub));
    trace_finalized_tx("init", name, fin, PayloadClass::PlaintextMetadata);
    names_by_did[a.identity.did] = name;
    auto [it, inserted] = actors.emplace(name, std::move(a));
    (void)inserted;
    return it->second;
  }

  void trace_finalized_tx(const std::string& step, const std::string& actor_name,
                          const FinalizationResult& fin, PayloadClass cls) {
    TraceEvent e;
    e.step = step;
    e.kind = EventKind::LedgerSubmit;
    e.actor = actor_name;
    e.payload_class = cls;
    if (fin.finalized) {
      auto tx = ledger->by_id(fin.transaction_id);
      if (tx) {
        e.payload = canonical_bytes(tx->to_json());
        e.payload_kind = tx_kind_name(tx->kind);
      }
      e.detail = fin.transaction_id;
    } else {
      e.detail = "not finalized";
    }
    trace.record(e);
  }

  void trace_note(const std::string& step, const std::string& actor_name,
                  const std::string& detail) {
    TraceEvent e;
    e.step = step;
    e.kind = EventKind::Note;
    e.actor = actor_name;
    e.payload_class = PayloadClass::PlaintextMetadata;
    e.detail = detail;
    trace.record(e);
  }

  void trace_verdict(const std::string& step, const std::string& actor_name,
                     const std::string& detail) {
    TraceEvent e;
    e.step = step;
    e.kind = EventKind::Verdict;
    e.actor = actor_name;
    e.payload_class = PayloadClass::PlaintextMetadata;
    e.payload_kind = "verdict";
    e.detail = detail;
    trace.record(e);
  }
};

inline FinalizationResult mediator_submit(World& w, const std::string& step,
                                          const std::string& actor_name,
                                          Transaction tx, PayloadClass cls) {
  FinalizationResult fin = w.ledger->submit(std::move(tx));
  w.trace_finalized_tx(step, actor_name, fin, cls);
  return fin;
}

// Seals the raw record into an envelope and puts it at rest, either scattered
// across the storage cluster or in the source's own store.
inline void persist_source(World& w, const std::string& name) {
  SourceData& s = w.source(name);
  EntityActor& a = w.actor(name);
  Envelope env = seal_envelope(s.spec, s.raw);
  s.raw = env.payload;
  s.plaintext = env.canonical();
  Rng rng = w.actor_rng("persist:" + name);
  if (s.backend == "self-hosted") {
    if (!s.store) s.store = std::make_shared<SelfHostedStore>(name);
    s.store->put("at-rest", s.plaintext);
    w.trace_note("persist", name, "record stored on self-hosted node");
    return;
  }
  s.rest_key = w.crypto->gen_symmetric(rng);
  Bytes wire = w.crypto->encrypt(s.plaintext, *s.rest_key, rng).wire();
  PartitionSet parts = partition(wire, w.scatter_degree);
  LocationSet locs = assign_and_upload(w.cluster, parts, *w.policy);
  std::string wallet = w.crypto->wallet_address(a.identity.keys.auth.pub);
  FinalizationResult fin =
      w.encrypt_location_records
          ? record_locations(*w.ledger, locs, wallet, *w.crypto, *s.rest_key, rng)
          : record_locations(*w.ledger, locs, wallet);
  s.tau_l_id = fin.transaction_id;
  w.trace_finalized_tx("persist", name,
                       fin,
                       w.encrypt_location_records ? PayloadClass::Ciphertext
                                                  : PayloadClass::PlaintextMetadata);
}

// Endorsement exchange over the simulated network. The request carries only
// the claim digest; the authority inspects the data out of band and answers
// with a signed credential.
inline void endorse_source(World& w, const std::string& name,
                           const EndorsementPolicy& approve = {}) {
  SourceData& s = w.source(name);
  if (s.authority.empty())
    raise(Errc::ConfigError, "source " + name + " has no endorsing authority");
  EntityActor& src = w.actor(name);
  EntityActor& auth = w.actor(s.authority);
  if (s.plaintext.empty())
    raise(Errc::ConfigError, "source " + name + " has nothing at rest yet");
  w.router.open_port(auth.name, "endorse");
  w.router.open_port(src.name, "endorse-reply");
  Json request{{"claim", ownership_claim(*w.crypto, s.plaintext)},
               {"source", src.identity.did}};
  w.router.send("endorse", src.name, auth.name, "endorse",
                PayloadClass::PlaintextMetadata, "endorsement-request",
                canonical_bytes(request));
  auto msg = w.router.try_receive("endorse", auth.name, "endorse");
  if (!msg) raise(Errc::PortClosed, "endorsement request was dropped");
  Json seen = parse_json(msg->payload);
  EndorsementRecord rec =
      endorse_data(*w.crypto, *w.registry, auth.identity,
                   seen.at("source").get<std::string>(), s.plaintext, approve);
  w.router.send("endorse", auth.name, src.name, "endorse-reply",
                PayloadClass::PlaintextMetadata, "endorsement-issue",
                canonical_bytes(rec.vc.to_json()));
  auto issued = w.router.try_receive("endorse", src.name, "endorse-reply");
  if (!issued) raise(Errc::PortClosed, "endorsement reply was dropped");
  s.vc = VerifiableCredential::from_json(parse_json(issued->payload));
}

// ---------------------------------------------------------------------------
// Protocol engine: one acquisition run, scheduled over concurrent actor tasks.

class ProtocolEngine {
 public:
  ProtocolEngine(World& w, const AggregationRequest& req, bool onchain)
      : w_(w),
        req_(req),
        onchain_(onchain),
        prefix_(onchain ? "onchain" : "offchain"),
        arb_(*w.crypto, w.dir, *w.registry) {}

  RunReport run() {
    setup();
    Scheduler sched(label_seed(w_.seed, "schedule:" + prefix_ + ":" +
                                            std::to_string(w_.run_counter)));
    ++w_.run_counter;
    build_tasks(sched);
    if (w_.threaded)
      sched.run_threaded(w_.threads);
    else
      sched.run();
    w_.router.set_drop_filter({});
    report_.ledger_after = w_.ledger->finalized_count();
    if (report_.verified_count() == 0)
      raise(Errc::AllSourcesRejected, failure_digest());
    if (req_.strict_termination) {
      for (const auto& s : report_.sources)
        if (s.state != SourceState::Verified)
          raise(Errc::VerificationFailure,
                "strict termination: source " + s.name + " ended " +
                    source_state_name(s.state) +
                    (s.reason.empty() ? "" : " (" + s.reason + ")"));
    }
    return std::move(report_);
  }

 private:
  struct SrcTask {
    int phase = 0;
    Rng rng{1};
    std::string collection;
    std::optional<Bytes> omega_wire;
  };

  struct ConsTask {
    std::set<std::string> remaining;
    std::set<std::string> seen_txs;
    bool finalized = false;
  };

  struct CtlTask {
    bool collected = false;
    std::size_t next = 0;
  };

  void setup() {
    if (req_.sources.size() < 2)
      raise(Errc::InvalidRequest, "aggregation needs more than one source");
    if (!onchain_ && !req_.nonce)
      raise(Errc::InvalidRequest, "direct acquisition needs a session nonce");
    consumer_name_ = w_.name_of_did(req_.consumer);
    if (consumer_name_.empty() || !w_.registry->resolve(req_.consumer))
      raise(Errc::UnresolvableDid,
            "consumer " + req_.consumer + " is not resolvable");
    std::set<std::string> dedup;
    for (const auto& did : req_.sources) {
      if (!dedup.insert(did).second)
        raise(Errc::InvalidRequest, "duplicate source " + did);
      std::string name = w_.name_of_did(did);
      if (name.empty() || !w_.registry->resolve(did))
        raise(Errc::UnresolvableDid, "source " + did + " is not resolvable");
      SourceData& sd = w_.source(name);
      if (!sd.vc)
        raise(Errc::InvalidRequest,
              "source " + name + " holds no ownership credential");
      SourceOutcome o;
      o.name = name;
      o.did = did;
      slot_index_[name] = report_.sources.size();
      report_.sources.push_back(std::move(o));
      order_.push_back(name);
    }
    report_.mode = prefix_;
    report_.strict = req_.strict_termination;
    report_.ledger_before = w_.ledger->finalized_count();
    ts_start_ = w_.ledger->finalized_count();
    for (const auto& name : order_) {
      w_.router.open_port(name, "notice");
      w_.router.open_port(name, "reply");
    }
    for (auto& [name, a] : w_.actors)
      if (a.role == Role::Authority) w_.router.open_port(name, "auth");
    w_.router.open_port(consumer_name_, "z");
    std::vector<std::string> droppers;
    for (const auto& sc : w_.scripts)
      if (sc.action == "drop-message") droppers.push_back(sc.source);
    if (droppers.empty()) {
      w_.router.set_drop_filter({});
    } else {
      w_.router.set_drop_filter([droppers](const MessageEnvelope& env) {
        return env.payload_kind == "acquisition-triple" &&
               std::find(droppers.begin(), droppers.end(), env.from) !=
                   droppers.end();
      });
    }
  }

  void build_tasks(Scheduler& sched) {
    auto ctl = std::make_shared<CtlTask>();
    sched.spawn("controller", [this, ctl](bool) { return controller_step(*ctl); });
    for (const auto& name : order_) {
      auto st = std::make_shared<SrcTask>();
      st->rng = w_.actor_rng("acquire:" + prefix_ + ":" +
                             std::to_string(w_.run_counter) + ":" + name);
      sched.spawn("source:" + name, [this, name, st](bool starving) {
        return source_step(name, *st, starving);
      });
    }
    for (auto& [name, a] : w_.actors) {
      if (a.role != Role::Authority) continue;
      const std::string auth_name = name;
      sched.spawn("authority:" + auth_name, [this, auth_name](bool starving) {
        return authority_step(auth_name, starving);
      });
    }
    auto cons = std::make_shared<ConsTask>();
    cons->remaining.insert(order_.begin(), order_.end());
    sched.spawn("consumer", [this, cons](bool starving) {
      return consumer_step(*cons, starving);
    });
  }

  // -- controller ----------------------------------------------------------

  StepResult controller_step(CtlTask& st) {
    if (onchain_ && !st.collected) {
      Json props{{"consumer", req_.consumer}, {"srcIds", Json(req_.sources)}};
      FinalizationResult fin = mediator_submit(
          w_, prefix_ + ".collect", consumer_name_,
          make_tx(TxKind::Collection, props, wallet_from_did(req_.consumer)),
          PayloadClass::PlaintextMetadata);
      if (!fin.finalized)
        raise(Errc::LedgerRejection, "collection transaction was not finalized");
      collection_tx_ = fin.transaction_id;
      report_.collection_tx = collection_tx_;
      st.collected = true;
      return StepResult::Progress;
    }
    if (st.next >= order_.size()) return StepResult::Done;
    const std::string& name = order_[st.next++];
    Json notice = onchain_
                      ? Json{{"collection", collection_tx_},
                             {"consumer", req_.consumer}}
                      : Json{{"consumer", req_.consumer},
                             {"nonce", *req_.nonce},
                             {"port", "z"}};
    w_.router.send(prefix_ + ".notify", consumer_name_, name, "notice",
                   PayloadClass::PlaintextMetadata,
                   onchain_ ? "collection-notice" : "acquisition-notice",
                   canonical_bytes(notice));
    return st.next >= order_.size() ? StepResult::Done : StepResult::Progress;
  }

  // -- source --------------------------------------------------------------

  StepResult source_step(const std::string& name, SrcTask& st, bool starving) {
    switch (st.phase) {
      case 0: {
        auto msg = w_.router.try_receive(prefix_ + ".notify", name, "notice");
        if (!msg) {
          if (starving) {
            fail(name, reason::kPortClosed);
            return StepResult::Done;
          }
          return StepResult::Blocked;
        }
        Json notice = parse_json(msg->payload);
        if (onchain_) {
          st.collection = notice.at("collection").get<std::string>();
          auto tx = w_.ledger->by_id(st.collection);
          if (!tx || tx->kind != TxKind::Collection ||
              !collection_names(*tx, w_.did_of(name))) {
            fail(name, reason::kApprovalFail);
            return StepResult::Done;
          }
        }
        const AdversaryScript* sc = w_.script_for(name);
        if (sc && sc->action == "skip-authorization") {
          w_.trace_note(prefix_ + ".request-approval", name,
                        "authorization deliberately skipped");
          st.phase = 3;
          return StepResult::Progress;
        }
        st.phase = 1;
        return StepResult::Progress;
      }
      case 1: {
        SourceData& sd = w_.source(name);
        EntityActor& auth = w_.actor(sd.authority);
        Json request;
        PayloadClass cls = PayloadClass::PlaintextMetadata;
        if (onchain_) {
          request = Json{{"collection", st.collection},
                         {"consumer", req_.consumer},
                         {"source", w_.did_of(name)}};
        } else {
          std::uint64_t r = *req_.nonce;
          const AdversaryScript* sc = w_.script_for(name);
          if (sc && sc->action == "replay-omega") {
            r += 1;
            w_.trace_note(prefix_ + ".request-approval", name,
                          "replaying a stale session nonce");
          }
          Ciphertext signed_nonce = w_.crypto->sign_recover(
              nonce_bytes(r), w_.actor(name).identity.keys.auth.sec);
          request = Json{{"consumer", req_.consumer},
                         {"signed_nonce", base64_encode(signed_nonce.wire())},
                         {"source", w_.did_of(name)}};
          cls = PayloadClass::Ciphertext;
        }
        w_.router.send(prefix_ + ".request-approval", name, auth.name, "auth",
                       cls, "authorization-request", canonical_bytes(request));
        st.phase = 2;
        return StepResult::Progress;
      }
      case 2: {
        auto msg = w_.router.try_receive(prefix_ + ".approve", name, "reply");
        if (!msg) {
          if (starving) {
            fail(name, reason::kPortClosed);
            return StepResult::Done;
          }
          return StepResult::Blocked;
        }
        Json reply = parse_json(msg->payload);
        if (!reply.at("approved").get<bool>()) {
          SourceOutcome& o = slot(name);
          o.state = SourceState::Rejected;
          o.reason = reason::kAuthorityRejected;
          return StepResult::Done;
        }
        SourceOutcome& o = slot(name);
        if (onchain_) {
          o.tau_e_id = reply.at("tau_e").get<std::string>();
        } else {
          auto wire = base64_decode(reply.at("omega").get<std::string>());
          if (!wire) {
            fail(name, reason::kApprovalFail);
            return StepResult::Done;
          }
          st.omega_wire = std::move(*wire);
        }
        o.state = SourceState::Authorized;
        st.phase = 3;
        return StepResult::Progress;
      }
      case 3:
        stage_and_submit(name, st);
        return StepResult::Done;
    }
    return StepResult::Done;
  }

  void stage_and_submit(const std::string& name, SrcTask& st) {
    SourceData& sd = w_.source(name);
    const AdversaryScript* sc = w_.script_for(name);
    Bytes d;
    try {
      d = load_at_rest(name);
    } catch (const std::exception&) {
      fail(name, reason::kStagingUnreachable);
      return;
    }
    if (sc && sc->action == "forge-claim") {
      d = forged_copy(d);
      w_.trace_note(prefix_ + ".stage", name, "serving altered data");
    }
    SymmetricKey kappa = w_.crypto->gen_symmetric(st.rng);
    Bytes data_wire = w_.crypto->encrypt(d, kappa, st.rng).wire();
    Json key_doc{{"id", kappa.key_id}, {"key", base64_encode(kappa.key_bytes)}};
    Bytes key_wire =
        w_.crypto->encrypt(canonical_bytes(key_doc), consumer_pk(), st.rng).wire();
    std::string backend, data_handle, key_handle;
    std::string tag = std::to_string(w_.run_counter);
    if (sd.backend == "self-hosted") {
      backend = "self-hosted";
      data_handle = sd.store->put("session-" + tag + "-data", data_wire);
      key_handle = sd.store->put("session-" + tag + "-key", key_wire);
    } else {
      backend = "staging";
      data_handle = w_.staging.put(data_wire);
      key_handle = w_.staging.put(key_wire);
    }
    w_.trace_note(prefix_ + ".stage", name,
                  "sealed data and wrapped key staged");
    if (sc && sc->action == "drop-message" && onchain_) {
      if (backend == "staging") {
        w_.staging.erase(data_handle);
        w_.staging.erase(key_handle);
      } else {
        sd.store->set_online(false);
      }
      w_.trace_note(prefix_ + ".stage", name, "staged upload lost");
    }
    if (sc && sc->action == "corrupt-partition") {
      if (backend == "staging")
        w_.staging.corrupt(data_handle);
      else
        sd.store->corrupt(data_handle);
      w_.trace_note(prefix_ + ".stage", name, "stored blob corrupted");
    }
    VerifiableCredential vc = *sd.vc;
    if (sc && sc->action == "tamper-vc") {
      tamper_proof(vc);
      w_.trace_note(prefix_ + ".stage", name, "credential proof tampered");
    }
    if (sc && sc->action == "impersonate-did") {
      vc = victim_vc(name);
      w_.trace_note(prefix_ + ".stage", name,
                    "presenting a credential issued to someone else");
    }
    Ciphertext inner = w_.crypto->sign_recover(
        canonical_bytes(vc.to_json()), w_.actor(name).identity.keys.auth.sec);
    std::string vc_ct =
        w_.crypto->encrypt(inner.wire(), consumer_pk(), st.rng).encode();
    StorageInfo info{backend, data_handle, key_handle};
    std::string m_ct =
        w_.crypto->encrypt(canonical_bytes(info.to_json()), consumer_pk(), st.rng)
            .encode();
    if (onchain_) {
      FinalizationResult fin = mediator_submit(
          w_, prefix_ + ".submit-evidence", name,
          make_tx(TxKind::Storage, Json{{"storage", m_ct}, {"vc", vc_ct}},
                  wallet_from_did(w_.did_of(name))),
          PayloadClass::Ciphertext);
      if (!fin.finalized) {
        fail(name, reason::kLedgerRejection);
        return;
      }
      slot(name).tau_s_id = fin.transaction_id;
    } else {
      Json triple{{"omega", st.omega_wire
                                ? Json(base64_encode(*st.omega_wire))
                                : Json()},
                  {"source", w_.did_of(name)},
                  {"storage", m_ct},
                  {"vc", vc_ct}};
      w_.router.send(prefix_ + ".submit-evidence", name, consumer_name_, "z",
                     PayloadClass::Ciphertext, "acquisition-triple",
                     canonical_bytes(triple));
    }
  }

  // -- authority -----------------------------------------------------------

  StepResult authority_step(const std::string& auth_name, bool starving) {
    auto msg = w_.router.try_receive(prefix_ + ".approve", auth_name, "auth");
    if (!msg) return starving ? StepResult::Done : StepResult::Blocked;
    Json request = parse_json(msg->payload);
    std::string src_did = request.at("source").get<std::string>();
    std::string requester = msg->from;
    bool approve = !w_.approval_reject.count(requester);
    std::string why = approve ? "" : "approval withheld by policy";
    Json reply;
    PayloadClass cls = PayloadClass::PlaintextMetadata;
    if (onchain_) {
      if (approve) {
        auto tx = w_.ledger->by_id(request.at("collection").get<std::string>());
        if (!tx || tx->kind != TxKind::Collection ||
            get_property(*tx, "consumer") !=
                std::optional<Json>(request.at("consumer")) ||
            !collection_names(*tx, src_did)) {
          approve = false;
          why = "no matching collection transaction";
        }
      }
      if (approve) {
        FinalizationResult fin = mediator_submit(
            w_, prefix_ + ".approve", auth_name,
            make_tx(TxKind::Endorsement,
                    Json{{"c", request.at("consumer")}, {"s", src_did}},
                    wallet_from_did(w_.did_of(auth_name))),
            PayloadClass::PlaintextMetadata);
        if (!fin.finalized) {
          approve = false;
          why = "endorsement transaction was not finalized";
        } else {
          reply = Json{{"approved", true}, {"tau_e", fin.transaction_id}};
        }
      }
    } else {
      if (approve) {
        auto doc = w_.registry->resolve(src_did);
        auto sig = base64_decode(request.at("signed_nonce").get<std::string>());
        if (!doc || !sig) {
          approve = false;
          why = "unverifiable request";
        } else {
          try {
            auto pk = w_.dir.find(doc->auth);
            if (!pk) raise(Errc::UnresolvableDid, "no key behind " + doc->auth);
            w_.crypto->verify_recover(Ciphertext::from_wire(*sig), *pk);
            Ciphertext omega = w_.crypto->sign_recover(
                *sig, w_.actor(auth_name).identity.keys.auth.sec);
            reply = Json{{"approved", true},
                         {"omega", base64_encode(omega.wire())}};
            cls = PayloadClass::Ciphertext;
          } catch (const std::exception&) {
            approve = false;
            why = "unverifiable request";
          }
        }
      }
    }
    if (!approve) reply = Json{{"approved", false}, {"reason", why}};
    w_.router.send(prefix_ + ".approve", auth_name, requester, "reply", cls,
                   "authorization-reply", canonical_bytes(reply));
    return StepResult::Progress;
  }

  // -- consumer ------------------------------------------------------------

  StepResult consumer_step(ConsTask& st, bool starving) {
    if (st.remaining.empty()) {
      finalize_output(st);
      return StepResult::Done;
    }
    bool progress = false;
    for (auto it = st.remaining.begin(); it != st.remaining.end();) {
      SourceState s = slot(*it).state;
      if (s == SourceState::Rejected || s == SourceState::Failed) {
        it = st.remaining.erase(it);
        progress = true;
      } else {
        ++it;
      }
    }
    if (!onchain_) {
      if (auto msg =
              w_.router.try_receive(prefix_ + ".deliver", consumer_name_, "z")) {
        handle_triple(st, *msg);
        return StepResult::Progress;
      }
    } else {
      auto txs = w_.ledger->query(
          TxQuery{}.with_kind(TxKind::Storage).after(ts_start_));
      for (const auto& name : order_) {
        if (!st.remaining.count(name)) continue;
        std::string wallet = wallet_from_did(slot(name).did);
        for (const auto& tx : txs) {
          if (tx.submitter != wallet || st.seen_txs.count(tx.id)) continue;
          st.seen_txs.insert(tx.id);
          process_evidence(name, tx.properties.at("vc").get<std::string>(),
                           tx.properties.at("storage").get<std::string>(),
                           std::nullopt, tx.id);
          st.remaining.erase(name);
          return StepResult::Progress;
        }
      }
    }
    if (progress) return StepResult::Progress;
    if (st.remaining.empty()) {
      finalize_output(st);
      return StepResult::Done;
    }
    if (starving) {
      for (const auto& name : st.remaining) fail(name, reason::kPortClosed);
      st.remaining.clear();
      finalize_output(st);
      return StepResult::Done;
    }
    return StepResult::Blocked;
  }

  void handle_triple(ConsTask& st, const MessageEnvelope& msg) {
    Json triple;
    std::string claimed;
    try {
      triple = parse_json(msg.payload);
      claimed = triple.at("source").get<std::string>();
    } catch (const std::exception&) {
      w_.trace_note(prefix_ + ".deliver", consumer_name_,
                    "discarded malformed delivery");
      return;
    }
    std::string name = w_.name_of_did(claimed);
    if (name.empty() || !st.remaining.count(name)) {
      w_.trace_note(prefix_ + ".deliver", consumer_name_,
                    "discarded delivery for unknown source");
      return;
    }
    std::optional<Bytes> omega;
    if (triple.contains("omega") && !triple.at("omega").is_null()) {
      omega = base64_decode(triple.at("omega").get<std::string>());
      if (!omega) {
        fail(name, reason::kApprovalFail);
        st.remaining.erase(name);
        return;
      }
    }
    process_evidence(name, triple.at("vc").get<std::string>(),
                     triple.at("storage").get<std::string>(), omega, "");
    st.remaining.erase(name);
  }

  void process_evidence(const std::string& name, const std::string& vc_ct,
                        const std::string& m_ct,
                        const std::optional<Bytes>& omega_wire,
                        const std::string& tau_s_id) {
    SourceOutcome& o = slot(name);
    if (!tau_s_id.empty()) o.tau_s_id = tau_s_id;
    Verdict v;
    try {
      Ciphertext wrapped = Ciphertext::decode(vc_ct);
      std::optional<Ciphertext> omega;
      if (omega_wire) omega = Ciphertext::from_wire(*omega_wire);
      v = onchain_ ? arb_.verify_onchain(wrapped, o.did, consumer_sk(),
                                         req_.consumer)
                   : arb_.verify_offchain(wrapped, o.did, consumer_sk(), omega,
                                          *req_.nonce);
    } catch (const std::exception&) {
      v = Verdict{false, reason::kAuthFail, {}};
    }
    w_.trace_verdict(prefix_ + ".arbitrate", consumer_name_,
                     name + ": " + (v.ok ? "accepted" : v.reason));
    if (!v.ok) {
      fail(name, v.reason);
      return;
    }
    Bytes data_wire, key_wire;
    try {
      Bytes m_bytes = w_.crypto->decrypt(Ciphertext::decode(m_ct), consumer_sk());
      StorageInfo info = StorageInfo::from_json(parse_json(m_bytes));
      data_wire = w_.store_for(info.data_handle).download(info.data_handle);
      key_wire = w_.store_for(info.key_handle).download(info.key_handle);
    } catch (const Error& e) {
      fail(name, e.code() == Errc::DecryptionFailure
                     ? reason::kDecryptionFailure
                     : reason::kStagingUnreachable);
      return;
    } catch (const std::exception&) {
      fail(name, reason::kDecryptionFailure);
      return;
    }
    Bytes plain;
    Envelope env;
    try {
      Json key_doc = parse_json(
          w_.crypto->decrypt(Ciphertext::from_wire(key_wire), consumer_sk()));
      auto key_bytes = base64_decode(key_doc.at("key").get<std::string>());
      if (!key_bytes) raise(Errc::DecryptionFailure, "bad key blob");
      SymmetricKey kappa{key_doc.at("id").get<std::string>(),
                         std::move(*key_bytes)};
      plain = w_.crypto->decrypt(Ciphertext::from_wire(data_wire), kappa);
      env = Envelope::from_bytes(plain);
    } catch (const std::exception&) {
      fail(name, reason::kDecryptionFailure);
      return;
    }
    o.state = SourceState::Delivered;
    OwnershipResult own = arb_.verify_claim(*v.vc, o.did, plain);
    w_.trace_verdict(prefix_ + ".claim-check", consumer_name_,
                     name + ": " +
                         (own.owned ? "ownership holds"
                                    : own_reason_name(own.reason)));
    if (!own.owned) {
      fail(name, own_reason_name(own.reason));
      return;
    }
    o.state = SourceState::Verified;
    o.reason.clear();
    verified_[name] = std::move(env);
  }

  void finalize_output(ConsTask& st) {
    if (st.finalized) return;
    st.finalized = true;
    std::vector<TransformInput> inputs;
    for (const auto& name : order_)
      if (slot(name).state == SourceState::Verified)
        inputs.push_back({name, verified_.at(name)});
    if (inputs.empty()) return;
    Envelope out = process_transform(inputs, req_.transform);
    report_.output = out;
    report_.output_digest = w_.crypto->hash(out.canonical()).hex();
    w_.trace_note(prefix_ + ".process", consumer_name_,
                  "aggregate ready, digest " + report_.output_digest);
  }

  // -- shared helpers ------------------------------------------------------

  Bytes load_at_rest(const std::string& name) {
    SourceData& s = w_.source(name);
    if (s.backend == "self-hosted")
      return s.store->download("self://" + name + "/at-rest");
    auto tx = w_.ledger->by_id(s.tau_l_id);
    if (!tx)
      raise(Errc::MissingPartition, "no location record for " + name);
    LocationSet locs =
        parse_locations(*tx, w_.crypto.get(),
                        s.rest_key ? &*s.rest_key : nullptr);
    PartitionSet parts = fetch(w_.cluster, locs);
    Bytes wire = assemble(parts);
    return w_.crypto->decrypt(Ciphertext::from_wire(wire), *s.rest_key);
  }

  static bool mutate_leaf(Json& node) {
    if (node.is_number_integer()) {
      node = node.get<std::int64_t>() + 1;
      return true;
    }
    if (node.is_number_float()) {
      node = node.get<double>() + 1.0;
      return true;
    }
    if (node.is_string()) {
      node = node.get<std::string>() + "x";
      return true;
    }
    if (node.is_object() || node.is_array()) {
      for (auto& el : node)
        if (mutate_leaf(el)) return true;
    }
    return false;
  }

  static Bytes forged_copy(const Bytes& original) {
    Envelope env = Envelope::from_bytes(original);
    mutate_leaf(env.payload);
    return env.canonical();
  }

  static void tamper_proof(VerifiableCredential& vc) {
    std::string& v = vc.proof.value;
    std::size_t i = v.size() > 4 ? 4 : v.size() - 1;
    v[i] = v[i] == 'A' ? 'B' : 'A';
  }

  VerifiableCredential victim_vc(const std::string& own) {
    for (const auto& name : order_) {
      if (name == own) continue;
      SourceData& sd = w_.source(name);
      if (sd.vc) return *sd.vc;
    }
    raise(Errc::ConfigError, "impersonation needs another endorsed source");
  }

  bool collection_names(const Transaction& tx, const std::string& did) const {
    auto ids = get_property(tx, "srcIds");
    if (!ids || !ids->is_array()) return false;
    for (const auto& v : *ids)
      if (v.is_string() && v.get<std::string>() == did) return true;
    return false;
  }

  SourceOutcome& slot(const std::string& name) {
    return report_.sources[slot_index_.at(name)];
  }

  void fail(const std::string& name, const std::string& why) {
    SourceOutcome& o = slot(name);
    if (o.state == SourceState::Verified || o.state == SourceState::Rejected ||
        o.state == SourceState::Failed)
      return;
    o.state = SourceState::Failed;
    o.reason = why;
  }

  PublicKey consumer_pk() {
    return w_.actor(consumer_name_).identity.keys.auth.pub;
  }

  SecretKey consumer_sk() {
    return w_.actor(consumer_name_).identity.keys.auth.sec;
  }

  std::string failure_digest() const {
    std::string out = "no source was verified:";
    for (const auto& s : report_.sources) {
      out += " " + s.name + "=" +
             (s.reason.empty() ? source_state_name(s.state) : s.reason);
    }
    return out;
  }

  World& w_;
  const AggregationRequest& req_;
  bool onchain_;
  std::string prefix_;
  Arbitrator arb_;
  RunReport report_;
  std::vector<std::string> order_;
  std::map<std::string, std::size_t> slot_index_;
  std::map<std::string, Envelope> verified_;
  std::size_t ts_start_ = 0;
  std::string consumer_name_;
  std::string collection_tx_;
};

inline RunReport run_onchain(World& w, const AggregationRequest& req) {
  return ProtocolEngine(w, req, true).run();
}

inline RunReport run_offchain(World& w, const AggregationRequest& req) {
  return ProtocolEngine(w, req, false).run();
}

}  // namespace aggsim
