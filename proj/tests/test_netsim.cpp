#include <catch2/catch_amalgamated.hpp>

#include <sstream>
#include <atomic>

#include <aggsim/netsim.hpp>

using namespace aggsim;

TEST_CASE("label seeds separate by master seed and label") {
  CHECK(label_seed(1, "a") == label_seed(1, "a"));
  CHECK(label_seed(1, "a") != label_seed(2, "a"));
  CHECK(label_seed(1, "a") != label_seed(1, "b"));
  CHECK(label_seed(1, "schedule:run:0") != label_seed(1, "schedule:run:1"));
}

TEST_CASE("the adversary vocabulary is closed") {
  const auto& actions = adversary_actions();
  CHECK(actions.size() == 7);
  for (const char* a : {"tamper-vc", "forge-claim", "replay-omega",
                        "impersonate-did", "drop-message", "corrupt-partition",
                        "skip-authorization"})
    CHECK(actions.count(a) == 1);
  CHECK(actions.count("rm-rf") == 0);
}

TEST_CASE("router delivers in order on open ports") {
  ProtocolTrace trace;
  Router router(trace);
  router.open_port("bob", "in");
  CHECK(router.port_open("bob", "in"));
  CHECK_FALSE(router.pending("bob", "in"));

  router.send("s", "alice", "bob", "in", PayloadClass::PlaintextMetadata,
              "greeting", to_bytes("one"));
  router.send("s", "alice", "bob", "in", PayloadClass::PlaintextMetadata,
              "greeting", to_bytes("two"));
  CHECK(router.pending("bob", "in"));

  auto m1 = router.try_receive("s", "bob", "in");
  auto m2 = router.try_receive("s", "bob", "in");
  auto m3 = router.try_receive("s", "bob", "in");
  REQUIRE(m1);
  REQUIRE(m2);
  CHECK_FALSE(m3);
  CHECK(m1->payload == to_bytes("one"));
  CHECK(m2->payload == to_bytes("two"));
  CHECK(m1->seq == 1);
  CHECK(m2->seq == 2);
  CHECK(m1->from == "alice");
}

TEST_CASE("sending to a closed port raises") {
  ProtocolTrace trace;
  Router router(trace);
  CHECK_THROWS_AS(router.send("s", "a", "b", "nope",
                              PayloadClass::PlaintextMetadata, "k", Bytes{}),
                  Error);
  router.open_port("b", "nope");
  router.close_port("b", "nope");
  CHECK_THROWS_AS(router.send("s", "a", "b", "nope",
                              PayloadClass::PlaintextMetadata, "k", Bytes{}),
                  Error);
}

TEST_CASE("dropped messages are traced but never delivered") {
  ProtocolTrace trace;
  Router router(trace);
  router.open_port("bob", "in");
  router.set_drop_filter([](const MessageEnvelope& env) {
    return env.payload_kind == "doomed";
  });
  router.send("s", "alice", "bob", "in", PayloadClass::Ciphertext, "doomed",
              to_bytes("x"));
  router.send("s", "alice", "bob", "in", PayloadClass::Ciphertext, "fine",
              to_bytes("y"));

  auto m = router.try_receive("s", "bob", "in");
  REQUIRE(m);
  CHECK(m->payload_kind == "fine");
  CHECK_FALSE(router.try_receive("s", "bob", "in"));

  auto events = trace.events();
  size_t sends = 0, notes = 0;
  for (const auto& ev : events) {
    if (ev.kind == EventKind::Send) ++sends;
    if (ev.kind == EventKind::Note &&
        ev.detail == "message dropped in transit")
      ++notes;
  }
  CHECK(sends == 2);
  CHECK(notes == 1);
}

TEST_CASE("the scheduler drains tasks deterministically per seed") {
  auto run_once = [](std::uint64_t seed) {
    std::vector<int> order;
    Scheduler sched(seed);
    for (int id = 0; id < 4; ++id) {
      int remaining = 3;
      sched.spawn("t" + std::to_string(id),
                  [id, remaining, &order](bool) mutable {
                    if (remaining == 0) return StepResult::Done;
                    --remaining;
                    order.push_back(id);
                    return StepResult::Progress;
                  });
    }
    sched.run();
    return order;
  };
  auto a = run_once(11);
  auto b = run_once(11);
  auto c = run_once(12);
  CHECK(a == b);
  CHECK(a.size() == 12);
  CHECK(a != c);
}

TEST_CASE("starving mode winds down tasks blocked on missing input") {
  ProtocolTrace trace;
  Router router(trace);
  router.open_port("waiter", "in");
  bool got_message = false;
  bool starved = false;

  Scheduler sched(5);
  sched.spawn("waiter", [&](bool starving) {
    if (auto m = router.try_receive("s", "waiter", "in")) {
      got_message = true;
      return StepResult::Done;
    }
    if (starving) {
      starved = true;
      return StepResult::Blocked;
    }
    return StepResult::Blocked;
  });
  sched.run();
  CHECK_FALSE(got_message);
  CHECK(starved);
}

TEST_CASE("a blocked task resumes when another task feeds it") {
  ProtocolTrace trace;
  Router router(trace);
  router.open_port("b", "in");
  std::string received;

  Scheduler sched(99);
  sched.spawn("producer", [&, sent = false](bool) mutable {
    if (sent) return StepResult::Done;
    router.send("s", "a", "b", "in", PayloadClass::PlaintextMetadata, "word",
                to_bytes("payload"));
    sent = true;
    return StepResult::Progress;
  });
  sched.spawn("consumer", [&](bool) {
    if (auto m = router.try_receive("s", "b", "in")) {
      received = std::string(m->payload.begin(), m->payload.end());
      return StepResult::Done;
    }
    return StepResult::Blocked;
  });
  sched.run();
  CHECK(received == "payload");
}

TEST_CASE("threaded runs drain the same tasks") {
  for (int round = 0; round < 3; ++round) {
    std::atomic<int> completed{0};
    Scheduler sched(7);
    for (int id = 0; id < 6; ++id) {
      int remaining = 5;
      sched.spawn("t" + std::to_string(id), [&, remaining](bool) mutable {
        if (remaining-- > 0) return StepResult::Progress;
        ++completed;
        return StepResult::Done;
      });
    }
    sched.run_threaded(4);
    CHECK(completed == 6);
  }
}

TEST_CASE("trace events roundtrip through jsonl") {
  ProtocolTrace trace;
  Router router(trace);
  router.open_port("bob", "in");
  router.send("s1", "alice", "bob", "in", PayloadClass::Ciphertext, "blob",
              Bytes{0x00, 0xff, 0x10});
  router.try_receive("s2", "bob", "in");

  std::ostringstream out;
  trace.export_jsonl(out);
  std::istringstream in(out.str());
  auto events = ProtocolTrace::import_jsonl(in);
  auto original = trace.events();
  REQUIRE(events.size() == original.size());
  for (size_t i = 0; i < events.size(); ++i) {
    CHECK(events[i].kind == original[i].kind);
    CHECK(events[i].actor == original[i].actor);
    CHECK(events[i].payload == original[i].payload);
    CHECK(events[i].payload_class == original[i].payload_class);
    CHECK(events[i].seq == original[i].seq);
  }
}
