#pragma once

#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "aggsim/common.hpp"
#include "aggsim/identity.hpp"
#include "aggsim/trace.hpp"

namespace aggsim {

inline std::uint64_t label_seed(std::uint64_t master, std::string_view label) {
  std::uint64_t h = 1469598103934665603ull ^ master;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

enum class Role { Authority, Consumer, Source, StorageLocation };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::Authority: return "authority";
    case Role::Consumer: return "consumer";
    case Role::Source: return "source";
    case Role::StorageLocation: return "storage-location";
  }
  return "?";
}

/// A role entity in the simulation: one DID, one keyring, honest unless a
/// script names it.
struct EntityActor {
  Role role = Role::Source;
  std::string name;  // scenario-local name
  EntityIdentity identity;
  std::string adversary_action;  // empty = honest
};

/// Scripted misbehavior. Actions rewrite the misbehaving actor's own
/// payloads or drop traffic; they never touch other actors' secrets.
struct AdversaryScript {
  std::string action;
  std::string source;   // scenario name of the misbehaving source
  std::string trigger;  // optional step label for drop-message
};

inline const std::set<std::string>& adversary_actions() {
  static const std::set<std::string> actions{
      "tamper-vc",        "forge-claim",       "replay-omega",
      "impersonate-did",  "drop-message",      "corrupt-partition",
      "skip-authorization"};
  return actions;
}

struct MessageEnvelope {
  std::string from;
  std::string to;
  std::string channel;
  PayloadClass payload_class = PayloadClass::PlaintextMetadata;
  std::string payload_kind;
  Bytes payload;
  std::uint64_t seq = 0;
};

/// Addressed FIFO channels. Every send and receive lands in the trace;
/// a drop filter models lost messages (the send is still traced).
class Router {
 public:
  explicit Router(ProtocolTrace& trace) : trace_(trace) {}

  void open_port(const std::string& to, const std::string& channel) {
    std::lock_guard lock(mu_);
    open_.insert({to, channel});
  }

  void close_port(const std::string& to, const std::string& channel) {
    std::lock_guard lock(mu_);
    open_.erase({to, channel});
  }

  bool port_open(const std::string& to, const std::string& channel) const {
    std::lock_guard lock(mu_);
    return open_.count({to, channel}) > 0;
  }

  void set_drop_filter(std::function<bool(const MessageEnvelope&)> filter) {
    std::lock_guard lock(mu_);
    drop_ = std::move(filter);
  }

  void send(const std::string& step, const std::string& from,
            const std::string& to, const std::string& channel,
            PayloadClass cls, const std::string& payload_kind, Bytes payload) {
    std::unique_lock lock(mu_);
    if (!open_.count({to, channel}))
      raise(Errc::PortClosed,
            "no open port " + channel + " at " + to);
    MessageEnvelope env{from, to,      channel, cls,
                        payload_kind,  payload, ++seq_[{to, channel}]};
    TraceEvent ev;
    ev.step = step;
    ev.kind = EventKind::Send;
    ev.actor = from;
    ev.peer = to;
    ev.channel = channel;
    ev.seq = env.seq;
    ev.payload_class = cls;
    ev.payload_kind = payload_kind;
    ev.payload = env.payload;
    bool dropped = drop_ && drop_(env);
    lock.unlock();
    trace_.record(std::move(ev));
    if (dropped) {
      TraceEvent note;
      note.step = step;
      note.kind = EventKind::Note;
      note.actor = from;
      note.peer = to;
      note.channel = channel;
      note.payload_kind = payload_kind;
      note.detail = "message dropped in transit";
      trace_.record(std::move(note));
      return;
    }
    std::lock_guard relock(mu_);
    queues_[{to, channel}].push_back(std::move(env));
  }

  bool pending(const std::string& to, const std::string& channel) const {
    std::lock_guard lock(mu_);
    auto it = queues_.find({to, channel});
    return it != queues_.end() && !it->second.empty();
  }

  std::optional<MessageEnvelope> try_receive(const std::string& step,
                                             const std::string& to,
                                             const std::string& channel) {
    std::unique_lock lock(mu_);
    auto it = queues_.find({to, channel});
    if (it == queues_.end() || it->second.empty()) return std::nullopt;
    MessageEnvelope env = std::move(it->second.front());
    it->second.pop_front();
    lock.unlock();
    TraceEvent ev;
    ev.step = step;
    ev.kind = EventKind::Receive;
    ev.actor = to;
    ev.peer = env.from;
    ev.channel = channel;
    ev.seq = env.seq;
    ev.payload_class = env.payload_class;
    ev.payload_kind = env.payload_kind;
    ev.payload = env.payload;
    trace_.record(std::move(ev));
    return env;
  }

 private:
  ProtocolTrace& trace_;
  mutable std::mutex mu_;
  std::set<std::pair<std::string, std::string>> open_;
  std::map<std::pair<std::string, std::string>, std::uint64_t> seq_;
  std::map<std::pair<std::string, std::string>, std::deque<MessageEnvelope>>
      queues_;
  std::function<bool(const MessageEnvelope&)> drop_;
};

enum class StepResult { Done, Progress, Blocked };

/// Cooperative scheduler: tasks advance one step at a time in an order
/// drawn from the seed. When every live task reports Blocked for two full
/// sweeps, tasks are re-stepped in starving mode and must wind down.
class Scheduler {
 public:
  explicit Scheduler(std::uint64_t seed) : rng_(seed) {}

  void spawn(std::string name, std::function<StepResult(bool)> step) {
    tasks_.push_back(Task{std::move(name), std::move(step)});
  }

  void run() {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < tasks_.size(); ++i) active.push_back(i);
    // Starvation must mean a genuine standstill, not an unlucky pick
    // order: only once every active task has reported Blocked with no
    // Progress or Done in between, twice over, are tasks wound down.
    std::set<std::size_t> blocked;
    int sweeps = 0;
    bool starving = false;
    std::uint64_t iterations = 0;
    while (!active.empty()) {
      if (++iterations > 10'000'000)
        raise(Errc::ConfigError, "scenario did not quiesce");
      std::size_t pick = active[rng_.below(active.size())];
      StepResult r = tasks_[pick].step(starving);
      if (r == StepResult::Done || (starving && r == StepResult::Blocked)) {
        active.erase(std::find(active.begin(), active.end(), pick));
        blocked.clear();
        sweeps = 0;
        starving = false;
      } else if (r == StepResult::Progress) {
        blocked.clear();
        sweeps = 0;
        starving = false;
      } else {
        blocked.insert(pick);
        if (blocked.size() == active.size()) {
          blocked.clear();
          if (++sweeps >= 2) starving = true;
        }
      }
    }
  }

  /// Stress mode: same tasks, order chosen by thread timing instead of
  /// the seed. Steps are serialized by a global lock; traces are not
  /// reproducible, outputs for honest runs are.
  void run_threaded(unsigned threads) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < tasks_.size(); ++i) active.push_back(i);
    std::mutex mu;
    std::set<std::size_t> blocked;
    int sweeps = 0;
    bool starving = false;
    auto worker = [&](unsigned tid) {
      Rng rng(label_seed(0xace5, "thread-" + std::to_string(tid)));
      for (;;) {
        std::lock_guard lock(mu);
        if (active.empty()) return;
        std::size_t pick = active[rng.below(active.size())];
        StepResult r = tasks_[pick].step(starving);
        if (r == StepResult::Done || (starving && r == StepResult::Blocked)) {
          active.erase(std::find(active.begin(), active.end(), pick));
          blocked.clear();
          sweeps = 0;
          starving = false;
        } else if (r == StepResult::Progress) {
          blocked.clear();
          sweeps = 0;
          starving = false;
        } else {
          blocked.insert(pick);
          if (blocked.size() == active.size()) {
            blocked.clear();
            if (++sweeps >= 2) starving = true;
          }
        }
      }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }

 private:
  struct Task {
    std::string name;
    std::function<StepResult(bool)> step;
  };
  std::vector<Task> tasks_;
  Rng rng_;
};

}  // namespace aggsim
