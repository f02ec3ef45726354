#pragma once

#include <optional>
#include <string>

#include "aggsim/canonical.hpp"
#include "aggsim/common.hpp"
#include "aggsim/crypto.hpp"
#include "aggsim/ledger.hpp"

namespace aggsim {

/// DID document: exactly the property set {id, auth, assert}, where auth
/// and assert are key identifiers referring to distinct keypairs.
struct DidDocument {
  std::string id;
  std::string auth;
  std::string assertion;  // serialized as "assert"

  bool operator==(const DidDocument&) const = default;

  Json to_json() const {
    return Json{{"assert", assertion}, {"auth", auth}, {"id", id}};
  }

  static DidDocument from_json(const Json& j) {
    return DidDocument{j.at("id").get<std::string>(),
                       j.at("auth").get<std::string>(),
                       j.at("assert").get<std::string>()};
  }
};

/// An entity's DID plus the two keypairs its document references.
struct Keyring {
  KeyPair auth;
  KeyPair assertion;
};

struct EntityIdentity {
  std::string did;
  Keyring keys;

  DidDocument document() const {
    return DidDocument{did, keys.auth.iota, keys.assertion.iota};
  }
};

inline std::string did_from_key(const CryptoProvider& crypto,
                                const PublicKey& auth_pk) {
  return "did:agg:" + crypto.wallet_address(auth_pk);
}

/// Generates fresh auth + assert pairs, derives the DID from the auth key,
/// and registers both public keys in the directory.
inline EntityIdentity make_identity(const CryptoProvider& crypto, Rng& rng,
                                    KeyDirectory& dir) {
  EntityIdentity id;
  id.keys.auth = crypto.gen_keypair(rng);
  id.keys.assertion = crypto.gen_keypair(rng);
  id.did = did_from_key(crypto, id.keys.auth.pub);
  dir.register_key(id.keys.auth.iota, id.keys.auth.pub);
  dir.register_key(id.keys.assertion.iota, id.keys.assertion.pub);
  return id;
}

inline std::string wallet_of(const CryptoProvider& crypto,
                             const EntityIdentity& id) {
  return crypto.wallet_address(id.keys.auth.pub);
}

/// Registry contract semantics: propagate/update/delete write typed
/// transactions; resolve is a pure fold over the finalized log, keyed on
/// the max-timestamp transaction for the DID. No local cache.
class Registry {
 public:
  explicit Registry(Ledger& ledger) : ledger_(ledger) {}

  FinalizationResult propagate(const DidDocument& doc,
                               const std::string& submitter) {
    if (doc.auth == doc.assertion)
      raise(Errc::InvalidRequest, "auth and assert must differ");
    if (resolve(doc.id))
      raise(Errc::DuplicateDid, doc.id + " already propagated");
    return ledger_.submit(make_tx(TxKind::Propagation,
                                  Json{{"did", doc.id},
                                       {"auth", doc.auth},
                                       {"assert", doc.assertion}},
                                  submitter));
  }

  /// Empty optionals keep the currently resolved value; the transaction
  /// always carries the complete new evaluation of the document.
  FinalizationResult update(const std::string& did,
                            std::optional<std::string> new_auth,
                            std::optional<std::string> new_assert,
                            const std::string& submitter) {
    auto current = resolve(did);
    if (!current) raise(Errc::UnknownDid, did + " is not resolvable");
    std::string auth = new_auth.value_or(current->auth);
    std::string assertion = new_assert.value_or(current->assertion);
    if (auth == assertion)
      raise(Errc::InvalidRequest, "auth and assert must differ");
    return ledger_.submit(make_tx(
        TxKind::Update,
        Json{{"did", did}, {"auth", auth}, {"assert", assertion}}, submitter));
  }

  FinalizationResult delete_did(const std::string& did,
                                const std::string& submitter) {
    if (!resolve(did)) raise(Errc::UnknownDid, did + " is not resolvable");
    return ledger_.submit(make_tx(
        TxKind::Deletion, Json{{"did", did}, {"deleted", true}}, submitter));
  }

  /// Resolution parses the max-timestamp finalized transaction for the DID.
  /// Returns the empty marker when nothing was propagated or the latest
  /// transaction is a deletion. A re-propagation after deletion revives
  /// the DID (latest-transaction rule applied uniformly).
  std::optional<DidDocument> resolve(const std::string& did) const {
    auto matches = ledger_.query(TxQuery{}.where("did", did));
    const Transaction* latest = nullptr;
    for (const auto& tx : matches) {
      if (tx.kind != TxKind::Propagation && tx.kind != TxKind::Update &&
          tx.kind != TxKind::Deletion)
        continue;
      latest = &tx;  // query is timestamp-ascending
    }
    if (!latest) return std::nullopt;
    if (latest->kind == TxKind::Deletion) return std::nullopt;
    if (auto deleted = get_property(*latest, "deleted");
        deleted && *deleted == Json(true))
      return std::nullopt;
    return DidDocument{did, latest->properties.at("auth").get<std::string>(),
                       latest->properties.at("assert").get<std::string>()};
  }

  Ledger& ledger() { return ledger_; }
  const Ledger& ledger() const { return ledger_; }

 private:
  Ledger& ledger_;
};

// --- Verifiable credentials ---

struct CredentialSubject {
  std::string id;  // subject DID
  Json claim;      // ownership VCs carry the data digest as a hex string

  bool operator==(const CredentialSubject&) const = default;
};

struct CredentialProof {
  std::string key;    // ι of the issuer's assertion pair
  std::string value;  // encoded signature envelope

  bool operator==(const CredentialProof&) const = default;
};

struct VerifiableCredential {
  std::string id;
  std::string issuer;  // DID
  CredentialSubject credentialSubject;
  CredentialProof proof;

  bool operator==(const VerifiableCredential&) const = default;

  Json to_json() const {
    return Json{{"credentialSubject",
                 Json{{"claim", credentialSubject.claim},
                      {"id", credentialSubject.id}}},
                {"id", id},
                {"issuer", issuer},
                {"proof", Json{{"key", proof.key}, {"value", proof.value}}}};
  }

  static VerifiableCredential from_json(const Json& j) {
    VerifiableCredential vc;
    vc.id = j.at("id").get<std::string>();
    vc.issuer = j.at("issuer").get<std::string>();
    vc.credentialSubject.id =
        j.at("credentialSubject").at("id").get<std::string>();
    vc.credentialSubject.claim = j.at("credentialSubject").at("claim");
    vc.proof.key = j.at("proof").at("key").get<std::string>();
    vc.proof.value = j.at("proof").at("value").get<std::string>();
    return vc;
  }

  Bytes canonical() const { return canonical_bytes(to_json()); }
};

/// ⊖: removes a property from a credential document.
inline Json remove_property(const Json& credential, const std::string& name) {
  if (!credential.contains(name))
    raise(Errc::UnknownProperty, "credential has no property '" + name + "'");
  Json reduced = credential;
  reduced.erase(name);
  return reduced;
}

/// Canonical bytes of the credential minus its proof, the signing payload.
inline Bytes signing_payload(const VerifiableCredential& vc) {
  return canonical_bytes(remove_property(vc.to_json(), "proof"));
}

/// Issues a VC: proof.key is the issuer document's assert identifier and
/// proof.value signs the canonical form of the credential minus proof.
inline VerifiableCredential issue_vc(const CryptoProvider& crypto,
                                     const Registry& registry,
                                     const EntityIdentity& issuer,
                                     const std::string& subject_did,
                                     Json claim) {
  auto doc = registry.resolve(issuer.did);
  if (!doc)
    raise(Errc::UnresolvableIssuer, issuer.did + " is not resolvable");
  VerifiableCredential vc;
  vc.issuer = issuer.did;
  vc.credentialSubject = CredentialSubject{subject_did, std::move(claim)};
  {
    Bytes material = to_bytes(issuer.did + "|" + subject_did + "|");
    Bytes claim_bytes = canonical_bytes(vc.credentialSubject.claim);
    material.insert(material.end(), claim_bytes.begin(), claim_bytes.end());
    vc.id = "urn:vc:" + hex_encode(crypto.hash(material).bytes).substr(0, 16);
  }
  vc.proof.key = doc->assertion;
  Ciphertext sig =
      crypto.sign_recover(signing_payload(vc), issuer.keys.assertion.sec);
  vc.proof.value = sig.encode();
  return vc;
}

inline Json ownership_claim(const CryptoProvider& crypto, const Bytes& data) {
  return Json(crypto.hash(data).hex());
}

/// Stable reason codes for ownership verification failures.
enum class OwnReason { None, SubjectMismatch, ClaimMismatch, ProofInvalid };

inline const char* own_reason_name(OwnReason r) {
  switch (r) {
    case OwnReason::None: return "OWN_OK";
    case OwnReason::SubjectMismatch: return "OWN_SUBJECT_MISMATCH";
    case OwnReason::ClaimMismatch: return "OWN_CLAIM_MISMATCH";
    case OwnReason::ProofInvalid: return "OWN_PROOF_INVALID";
  }
  return "?";
}

struct OwnershipResult {
  bool owned = false;
  OwnReason reason = OwnReason::None;
};

/// Ownership check: subject binding, claim-equals-digest, and proof
/// recovery must all hold. Reports the first failing clause.
inline OwnershipResult verify_ownership(const CryptoProvider& crypto,
                                        const KeyDirectory& dir,
                                        const VerifiableCredential& vc,
                                        const std::string& source_did,
                                        const Bytes& data) {
  if (vc.credentialSubject.id != source_did)
    return {false, OwnReason::SubjectMismatch};
  if (vc.credentialSubject.claim != ownership_claim(crypto, data))
    return {false, OwnReason::ClaimMismatch};
  try {
    Ciphertext sig = Ciphertext::decode(vc.proof.value);
    Bytes recovered = crypto.verify_recover(sig, vc.proof.key, dir);
    if (recovered != signing_payload(vc))
      return {false, OwnReason::ProofInvalid};
  } catch (const Error&) {
    return {false, OwnReason::ProofInvalid};
  }
  return {true, OwnReason::None};
}

/// Proof-integrity part of the ownership check (clauses that do not need
/// the data): signature recovery plus the issuer binding, i.e. proof.key
/// must be the assert identifier of the resolved issuer document.
inline OwnershipResult verify_credential_proof(const CryptoProvider& crypto,
                                               const KeyDirectory& dir,
                                               const Registry& registry,
                                               const VerifiableCredential& vc) {
  auto issuer_doc = registry.resolve(vc.issuer);
  if (!issuer_doc || vc.proof.key != issuer_doc->assertion)
    return {false, OwnReason::ProofInvalid};
  try {
    Ciphertext sig = Ciphertext::decode(vc.proof.value);
    Bytes recovered = crypto.verify_recover(sig, vc.proof.key, dir);
    if (recovered != signing_payload(vc))
      return {false, OwnReason::ProofInvalid};
  } catch (const Error&) {
    return {false, OwnReason::ProofInvalid};
  }
  return {true, OwnReason::None};
}

}  // namespace aggsim
