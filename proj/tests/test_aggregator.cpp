#include <catch2/catch_amalgamated.hpp>

#include <memory>
#include <string>

#include <aggsim/aggregator.hpp>

using namespace aggsim;

namespace {

std::unique_ptr<World> build_world(const std::string& provider,
                                   std::uint64_t seed) {
  auto w = std::make_unique<World>();
  LedgerConfig cfg;
  cfg.node_count = 4;
  w->init(make_provider(provider), cfg, seed);
  for (int i = 0; i < 6; ++i) {
    StorageLocation loc;
    loc.id = "locnode-" + std::to_string(i);
    loc.reputation = 5 + i;
    loc.cost = 10 - i;
    w->cluster.table().add(loc);
  }
  w->add_actor(Role::Consumer, "clinic");
  w->consumer_name = "clinic";
  w->add_actor(Role::Authority, "notary");
  w->add_actor(Role::Source, "alice");
  w->add_actor(Role::Source, "bob");

  Json person = {{"firstName", "string"},
                 {"lastName", "string"},
                 {"age", "number"}};
  SourceData a;
  a.authority = "notary";
  a.spec = DataSpecification::parse(person);
  a.raw = Json{{"firstName", "Alice"}, {"lastName", "Ng"}, {"age", 34}};
  a.backend = "decentralized";
  w->sources["alice"] = std::move(a);

  SourceData b;
  b.authority = "notary";
  b.spec = DataSpecification::parse(person);
  b.raw = Json{{"firstName", "Bob"}, {"lastName", "Ito"}, {"age", "41"}};
  b.backend = "self-hosted";
  w->sources["bob"] = std::move(b);

  w->scatter_degree = 0.25;
  for (const auto& name : {"alice", "bob"}) {
    persist_source(*w, name);
    endorse_source(*w, name);
  }
  return w;
}

AggregationRequest make_request(World& w) {
  AggregationRequest req;
  req.consumer = w.did_of("clinic");
  req.sources = {w.did_of("alice"), w.did_of("bob")};
  req.transform = TransformSpec::parse(Json{
      {"output", Json{{"firstName", "string"},
                      {"lastName", "string"},
                      {"age", "number"}}},
      {"ops", Json::array()}});
  req.nonce = 777;
  return req;
}

const SourceOutcome& outcome_of(const RunReport& r, const std::string& name) {
  for (const auto& s : r.sources)
    if (s.name == name) return s;
  FAIL("no outcome for " + name);
  static SourceOutcome dummy;
  return dummy;
}

}  // namespace

TEST_CASE("both modes deliver the oracle output for honest runs") {
  for (const std::string provider : {"mock", "sodium"}) {
    auto w = build_world(provider, 42);
    AggregationRequest req = make_request(*w);

    RunReport on = run_onchain(*w, req);
    CHECK(on.verified_count() == 2);
    for (const auto& s : on.sources) {
      CHECK(s.state == SourceState::Verified);
      CHECK(s.reason.empty());
    }

    RunReport off = run_offchain(*w, req);
    CHECK(off.verified_count() == 2);
    CHECK(on.output_digest == off.output_digest);

    REQUIRE(on.output);
    Json expected = Json::array(
        {Json{{"firstName", "Alice"}, {"lastName", "Ng"}, {"age", 34}},
         Json{{"firstName", "Bob"}, {"lastName", "Ito"}, {"age", 41}}});
    CHECK(on.output->payload == expected);
  }
}

TEST_CASE("ledger growth matches the acquisition protocol exactly") {
  auto w = build_world("mock", 52);
  AggregationRequest req = make_request(*w);

  RunReport on = run_onchain(*w, req);
  // One collection transaction plus an endorsement and a storage
  // transaction per approved source.
  CHECK(on.ledger_after - on.ledger_before == 1 + 2 * 2);
  CHECK_FALSE(on.collection_tx.empty());
  for (const auto& s : on.sources) {
    CHECK_FALSE(s.tau_e_id.empty());
    CHECK_FALSE(s.tau_s_id.empty());
  }

  RunReport off = run_offchain(*w, req);
  CHECK(off.ledger_after - off.ledger_before == 0);
  CHECK(off.collection_tx.empty());
  for (const auto& s : off.sources) {
    CHECK(s.tau_e_id.empty());
    CHECK(s.tau_s_id.empty());
  }
}

TEST_CASE("honest traffic never carries source plaintext windows") {
  for (const std::string mode : {"onchain", "offchain"}) {
    auto w = build_world("sodium", 61);
    AggregationRequest req = make_request(*w);
    RunReport r = mode == "onchain" ? run_onchain(*w, req)
                                    : run_offchain(*w, req);
    REQUIRE(r.verified_count() == 2);
    CHECK_FALSE(w->trace.plaintext_window_leak(w->sources["alice"].plaintext));
    CHECK_FALSE(w->trace.plaintext_window_leak(w->sources["bob"].plaintext));
  }
}

TEST_CASE("a tampered credential is rejected with the proof reason") {
  for (const std::string mode : {"onchain", "offchain"}) {
    auto w = build_world("mock", 43);
    w->scripts.push_back(AdversaryScript{"tamper-vc", "alice", ""});
    AggregationRequest req = make_request(*w);
    RunReport r = mode == "onchain" ? run_onchain(*w, req)
                                    : run_offchain(*w, req);
    const auto& alice = outcome_of(r, "alice");
    CHECK(alice.state == SourceState::Failed);
    CHECK(alice.reason == "OWN_PROOF_INVALID");
    const auto& bob = outcome_of(r, "bob");
    CHECK(bob.state == SourceState::Verified);
    CHECK(r.verified_count() == 1);
  }
}

TEST_CASE("forged data fails the claim check") {
  auto w = build_world("mock", 44);
  w->scripts.push_back(AdversaryScript{"forge-claim", "bob", ""});
  RunReport r = run_onchain(*w, make_request(*w));
  CHECK(outcome_of(r, "bob").reason == "OWN_CLAIM_MISMATCH");
  CHECK(outcome_of(r, "bob").state == SourceState::Failed);
  CHECK(outcome_of(r, "alice").state == SourceState::Verified);
}

TEST_CASE("an impersonator fails authentication") {
  auto w = build_world("mock", 45);
  w->scripts.push_back(AdversaryScript{"impersonate-did", "alice", ""});
  RunReport r = run_offchain(*w, make_request(*w));
  CHECK(outcome_of(r, "alice").state == SourceState::Failed);
  CHECK(outcome_of(r, "alice").reason == "AUTH_FAIL");
}

TEST_CASE("a replayed approval trips the nonce comparison") {
  auto w = build_world("mock", 46);
  w->scripts.push_back(AdversaryScript{"replay-omega", "bob", ""});
  RunReport r = run_offchain(*w, make_request(*w));
  CHECK(outcome_of(r, "bob").state == SourceState::Failed);
  CHECK(outcome_of(r, "bob").reason == "NONCE_MISMATCH");
}

TEST_CASE("skipping authorization fails the approval check in both modes") {
  for (const std::string mode : {"onchain", "offchain"}) {
    auto w = build_world("mock", 47);
    w->scripts.push_back(AdversaryScript{"skip-authorization", "alice", ""});
    AggregationRequest req = make_request(*w);
    RunReport r = mode == "onchain" ? run_onchain(*w, req)
                                    : run_offchain(*w, req);
    CHECK(outcome_of(r, "alice").state == SourceState::Failed);
    CHECK(outcome_of(r, "alice").reason == "APPROVAL_FAIL");
  }
}

TEST_CASE("a withheld approval leaves the source rejected") {
  auto w = build_world("mock", 48);
  w->approval_reject.insert("bob");
  RunReport r = run_onchain(*w, make_request(*w));
  CHECK(outcome_of(r, "bob").state == SourceState::Rejected);
  CHECK(outcome_of(r, "bob").reason == "AUTHORITY_REJECTED");
  CHECK(r.verified_count() == 1);
  // A rejected source contributes no endorsement or storage transaction.
  CHECK(r.ledger_after - r.ledger_before == 1 + 2 * 1);
}

TEST_CASE("corrupted partitions surface as decryption failures") {
  auto w = build_world("mock", 49);
  w->scripts.push_back(AdversaryScript{"corrupt-partition", "alice", ""});
  RunReport r = run_onchain(*w, make_request(*w));
  CHECK(outcome_of(r, "alice").state == SourceState::Failed);
  CHECK(outcome_of(r, "alice").reason == "DECRYPTION_FAILURE");
}

TEST_CASE("every source failing aborts the aggregation") {
  auto w = build_world("mock", 50);
  w->scripts.push_back(AdversaryScript{"tamper-vc", "alice", ""});
  w->scripts.push_back(AdversaryScript{"forge-claim", "bob", ""});
  CHECK_THROWS_AS(run_onchain(*w, make_request(*w)), Error);
}

TEST_CASE("strict termination escalates any failure to an error") {
  auto w = build_world("mock", 51);
  w->scripts.push_back(AdversaryScript{"tamper-vc", "alice", ""});
  AggregationRequest req = make_request(*w);
  req.strict_termination = true;
  CHECK_THROWS_AS(run_onchain(*w, req), Error);
}

TEST_CASE("repeated runs with one seed produce identical traces") {
  auto digest_of = [](std::uint64_t seed) {
    auto w = build_world("mock", seed);
    run_onchain(*w, make_request(*w));
    return w->trace.digest(*w->crypto).hex();
  };
  CHECK(digest_of(90) == digest_of(90));
  CHECK(digest_of(90) != digest_of(91));
}

TEST_CASE("threaded scheduling still verifies every source") {
  auto w = build_world("sodium", 53);
  w->threaded = true;
  RunReport r = run_onchain(*w, make_request(*w));
  CHECK(r.verified_count() == 2);
  RunReport off = run_offchain(*w, make_request(*w));
  CHECK(off.verified_count() == 2);
}

TEST_CASE("request validation rejects broken setups") {
  auto w = build_world("mock", 54);
  AggregationRequest req = make_request(*w);

  SECTION("duplicate sources collapse") {
    req.sources = {w->did_of("alice"), w->did_of("alice")};
    CHECK_THROWS_AS(run_onchain(*w, req), Error);
  }
  SECTION("unknown source DID") {
    req.sources.push_back("did:agg:0123456789012345678901234567890123456789");
    CHECK_THROWS_AS(run_onchain(*w, req), Error);
  }
  SECTION("missing nonce breaks the off-chain variant only") {
    req.nonce.reset();
    CHECK_THROWS_AS(run_offchain(*w, req), Error);
  }
}

TEST_CASE("wallets derive from DIDs and nothing else") {
  CHECK(wallet_from_did("did:agg:abc123") == "abc123");
  CHECK_THROWS_AS(wallet_from_did("did:other:abc"), Error);
  CHECK_THROWS_AS(wallet_from_did("abc"), Error);
}

TEST_CASE("endorsement issuance demands a resolvable approved subject") {
  auto w = build_world("mock", 55);
  const auto& notary = w->actor("notary");
  Bytes data = to_bytes("endorsement probe data");

  auto vc = endorse_data(*w->crypto, *w->registry, notary.identity,
                         w->did_of("alice"), data)
                .vc;
  CHECK(vc.credentialSubject.id == w->did_of("alice"));
  CHECK(verify_ownership(*w->crypto, w->dir, vc, w->did_of("alice"), data)
            .owned);

  CHECK_THROWS_AS(
      endorse_data(*w->crypto, *w->registry, notary.identity,
                   "did:agg:4444444444444444444444444444444444444444", data),
      Error);
  CHECK_THROWS_AS(
      endorse_data(*w->crypto, *w->registry, notary.identity,
                   w->did_of("alice"), data,
                   [](const std::string&, const Bytes&) { return false; }),
      Error);
}

TEST_CASE("the arbiter rejects evidence whose issuer binding is broken") {
  auto w = build_world("mock", 56);
  Arbitrator arb{*w->crypto, w->dir, *w->registry};
  const auto& alice = w->sources.at("alice");
  REQUIRE(alice.vc.has_value());

  VerifiableCredential forged = *alice.vc;
  forged.proof.value[4] = forged.proof.value[4] == 'A' ? 'B' : 'A';
  auto verdict = arb.verify_claim(forged, w->did_of("alice"),
                                  to_bytes("whatever"));
  CHECK_FALSE(verdict.owned);
}
