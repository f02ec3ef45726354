#include <catch2/catch_amalgamated.hpp>

#include <aggsim/identity.hpp>

using namespace aggsim;

namespace {

struct Fixture {
  std::shared_ptr<CryptoProvider> crypto = make_provider("sodium");
  KeyDirectory dir;
  Ledger ledger{LedgerConfig{}};
  Registry registry{ledger};
  Rng rng{1234};

  EntityIdentity enroll() {
    EntityIdentity id = make_identity(*crypto, rng, dir);
    registry.propagate(id.document(), crypto->wallet_address(id.keys.auth.pub));
    return id;
  }
};

}  // namespace

TEST_CASE("identities carry distinct auth and assert keys") {
  Fixture f;
  EntityIdentity id = make_identity(*f.crypto, f.rng, f.dir);
  CHECK(id.did.rfind("did:agg:", 0) == 0);
  CHECK(id.did.size() == 8 + 40);
  CHECK(id.keys.auth.iota != id.keys.assertion.iota);
  DidDocument doc = id.document();
  CHECK(doc.id == id.did);
  CHECK(doc.auth != doc.assertion);
  CHECK(f.dir.find(doc.auth).has_value());
  CHECK(f.dir.find(doc.assertion).has_value());
}

TEST_CASE("propagate then resolve roundtrips the document") {
  Fixture f;
  EntityIdentity id = f.enroll();
  auto doc = f.registry.resolve(id.did);
  REQUIRE(doc.has_value());
  CHECK(doc->id == id.did);
  CHECK(doc->auth == id.keys.auth.iota);
  CHECK(doc->assertion == id.keys.assertion.iota);
}

TEST_CASE("duplicate propagation is rejected") {
  Fixture f;
  EntityIdentity id = f.enroll();
  CHECK_THROWS_AS(f.registry.propagate(id.document(), "w"), Error);
}

TEST_CASE("documents with identical auth and assert are rejected") {
  Fixture f;
  DidDocument doc;
  doc.id = "did:agg:deadbeef";
  doc.auth = "i-same";
  doc.assertion = "i-same";
  CHECK_THROWS_AS(f.registry.propagate(doc, "w"), Error);
}

TEST_CASE("update replaces only the named keys") {
  Fixture f;
  EntityIdentity id = f.enroll();
  KeyPair fresh = f.crypto->gen_keypair(f.rng);
  f.dir.register_key(fresh.iota, fresh.pub);
  f.registry.update(id.did, fresh.iota, std::nullopt, "w");
  auto doc = f.registry.resolve(id.did);
  REQUIRE(doc.has_value());
  CHECK(doc->auth == fresh.iota);
  CHECK(doc->assertion == id.keys.assertion.iota);
}

TEST_CASE("updating an unknown DID fails") {
  Fixture f;
  CHECK_THROWS_AS(
      f.registry.update("did:agg:0000000000000000000000000000000000000000",
                        "i-x", std::nullopt, "w"),
      Error);
}

TEST_CASE("deletion tombstones and re-propagation revives") {
  Fixture f;
  EntityIdentity id = f.enroll();
  f.registry.delete_did(id.did, "w");
  CHECK_FALSE(f.registry.resolve(id.did).has_value());
  f.registry.propagate(id.document(), "w");
  auto doc = f.registry.resolve(id.did);
  REQUIRE(doc.has_value());
  CHECK(doc->auth == id.keys.auth.iota);
}

TEST_CASE("resolution follows the latest transaction") {
  Fixture f;
  EntityIdentity id = f.enroll();
  KeyPair k1 = f.crypto->gen_keypair(f.rng);
  KeyPair k2 = f.crypto->gen_keypair(f.rng);
  f.dir.register_key(k1.iota, k1.pub);
  f.dir.register_key(k2.iota, k2.pub);
  f.registry.update(id.did, k1.iota, std::nullopt, "w");
  f.registry.update(id.did, k2.iota, std::nullopt, "w");
  CHECK(f.registry.resolve(id.did)->auth == k2.iota);
}

TEST_CASE("credential issue and ownership verification agree") {
  Fixture f;
  EntityIdentity issuer = f.enroll();
  EntityIdentity subject = f.enroll();
  Bytes data = to_bytes("subject's sealed record");
  VerifiableCredential vc = issue_vc(*f.crypto, f.registry, issuer, subject.did,
                                     ownership_claim(*f.crypto, data));
  CHECK(vc.id.rfind("urn:vc:", 0) == 0);
  CHECK(vc.issuer == issuer.did);
  CHECK(vc.proof.key == f.registry.resolve(issuer.did)->assertion);

  OwnershipResult ok = verify_ownership(*f.crypto, f.dir, vc, subject.did, data);
  CHECK(ok.owned);
  CHECK(ok.reason == OwnReason::None);
}

TEST_CASE("ownership clauses fail in declared order") {
  Fixture f;
  EntityIdentity issuer = f.enroll();
  EntityIdentity subject = f.enroll();
  Bytes data = to_bytes("clause order probe");
  VerifiableCredential vc = issue_vc(*f.crypto, f.registry, issuer, subject.did,
                                     ownership_claim(*f.crypto, data));

  SECTION("wrong subject reports subject mismatch first") {
    auto r = verify_ownership(*f.crypto, f.dir, vc, issuer.did, data);
    CHECK_FALSE(r.owned);
    CHECK(r.reason == OwnReason::SubjectMismatch);
  }
  SECTION("wrong data reports claim mismatch") {
    auto r = verify_ownership(*f.crypto, f.dir, vc, subject.did,
                              to_bytes("different bytes"));
    CHECK_FALSE(r.owned);
    CHECK(r.reason == OwnReason::ClaimMismatch);
  }
  SECTION("tampered claim reports claim mismatch before proof") {
    VerifiableCredential m = vc;
    m.credentialSubject.claim = Json("0000");
    auto r = verify_ownership(*f.crypto, f.dir, m, subject.did, data);
    CHECK_FALSE(r.owned);
    CHECK(r.reason == OwnReason::ClaimMismatch);
  }
  SECTION("tampered proof value reports invalid proof") {
    VerifiableCredential m = vc;
    m.proof.value[4] = m.proof.value[4] == 'A' ? 'B' : 'A';
    auto r = verify_ownership(*f.crypto, f.dir, m, subject.did, data);
    CHECK_FALSE(r.owned);
    CHECK(r.reason == OwnReason::ProofInvalid);
  }
  SECTION("unknown proof key reports invalid proof") {
    VerifiableCredential m = vc;
    m.proof.key = "i-nobody";
    auto r = verify_ownership(*f.crypto, f.dir, m, subject.did, data);
    CHECK_FALSE(r.owned);
    CHECK(r.reason == OwnReason::ProofInvalid);
  }
}

TEST_CASE("proof check binds the credential to its issuer's assert key") {
  Fixture f;
  EntityIdentity issuer = f.enroll();
  EntityIdentity mallory = f.enroll();
  EntityIdentity subject = f.enroll();
  Bytes data = to_bytes("issuer binding probe");

  VerifiableCredential honest = issue_vc(
      *f.crypto, f.registry, issuer, subject.did,
      ownership_claim(*f.crypto, data));
  CHECK(verify_credential_proof(*f.crypto, f.dir, f.registry, honest).owned);

  // Mallory signs with her own assert key but names the real issuer.
  VerifiableCredential forged = issue_vc(
      *f.crypto, f.registry, mallory, subject.did,
      ownership_claim(*f.crypto, data));
  forged.issuer = issuer.did;
  Ciphertext sig =
      f.crypto->sign_recover(signing_payload(forged), mallory.keys.assertion.sec);
  forged.proof.value = sig.encode();
  auto r = verify_credential_proof(*f.crypto, f.dir, f.registry, forged);
  CHECK_FALSE(r.owned);
  CHECK(r.reason == OwnReason::ProofInvalid);

  // Plain ownership still accepts it: the bare clauses cannot see the
  // issuer document, which is exactly why the arbiter adds the binding.
  CHECK(verify_ownership(*f.crypto, f.dir, forged, subject.did, data).owned);
}

TEST_CASE("issuing against an unresolvable issuer fails") {
  Fixture f;
  EntityIdentity ghost = make_identity(*f.crypto, f.rng, f.dir);
  CHECK_THROWS_AS(
      issue_vc(*f.crypto, f.registry, ghost, "did:agg:x", Json("c")), Error);
}

TEST_CASE("credential json roundtrips and property removal is checked") {
  Fixture f;
  EntityIdentity issuer = f.enroll();
  VerifiableCredential vc = issue_vc(*f.crypto, f.registry, issuer,
                                     issuer.did, Json("claim"));
  VerifiableCredential back = VerifiableCredential::from_json(vc.to_json());
  CHECK(back.to_json() == vc.to_json());
  CHECK(back.canonical() == vc.canonical());
  Json without = remove_property(vc.to_json(), "proof");
  CHECK_FALSE(without.contains("proof"));
  CHECK_THROWS_AS(remove_property(vc.to_json(), "nonexistent"), Error);
}
