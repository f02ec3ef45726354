#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <aggsim/aggsim.hpp>

namespace fs = std::filesystem;
using namespace aggsim;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Errc::ConfigError, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Errc::ConfigError, "cannot write " + path.string());
  out << content;
}

void write_outputs(const fs::path& dir, const ScenarioResult& r, bool pretty) {
  fs::create_directories(dir);
  Json rj = r.to_json();
  write_file(dir / "report.json",
             (pretty ? rj.dump(2) : canonical_text(rj)) + "\n");
  write_file(dir / "trace.jsonl", r.trace_jsonl);
  write_file(dir / "ledger.jsonl", r.ledger_jsonl);
  if (r.output) {
    Json oj = r.output->to_json();
    write_file(dir / "output.json",
               (pretty ? oj.dump(2) : canonical_text(oj)) + "\n");
  }
}

void print_result(const ScenarioResult& r) {
  std::cout << (r.ok ? "PASS" : "FAIL") << " " << r.name << " (mode=" << r.mode
            << ", seed=" << r.seed << ", provider=" << r.provider << ")\n";
  if (!r.error.empty())
    std::cout << "  run error: " << r.error << ": " << r.error_message << "\n";
  for (const auto& a : r.assertions)
    std::cout << "  [" << (a.ok ? "pass" : "FAIL") << "] " << a.name << ": "
              << a.detail << "\n";
  if (r.report) {
    for (const auto& s : r.report->sources) {
      std::cout << "  source " << s.name << ": " << source_state_name(s.state);
      if (!s.reason.empty()) std::cout << " (" << s.reason << ")";
      std::cout << "\n";
    }
  }
}

int cmd_run(const std::string& scenario_path, std::uint64_t seed,
            const std::string& out_dir, const std::string& mode_override,
            bool strict_override, const std::string& case_filter, bool pretty) {
  Json raw;
  std::vector<std::pair<std::string, Json>> cases;
  try {
    raw = parse_json(read_file(scenario_path));
    cases = expand_cases(raw);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << scenario_path << " is not valid JSON: "
              << e.what() << "\n";
    return 2;
  }
  bool all_ok = true;
  bool any_ran = false;
  Json summary = Json::array();
  for (const auto& [case_name, cfg_json] : cases) {
    if (!case_filter.empty() && case_name != case_filter) continue;
    any_ran = true;
    ScenarioResult result;
    try {
      ScenarioConfig cfg = ScenarioConfig::parse(cfg_json);
      if (!mode_override.empty()) cfg.mode = mode_override;
      if (strict_override) cfg.strict_termination = true;
      result = run_scenario(cfg, seed);
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 2;
    }
    print_result(result);
    if (!out_dir.empty()) {
      fs::path dir = case_name.empty() ? fs::path(out_dir)
                                       : fs::path(out_dir) / case_name;
      try {
        write_outputs(dir, result, pretty);
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
      }
    }
    summary.push_back(Json{{"case", case_name},
                           {"name", result.name},
                           {"ok", result.ok}});
    all_ok = all_ok && result.ok;
  }
  if (!any_ran) {
    std::cerr << "error: no case named '" << case_filter << "' in "
              << scenario_path << "\n";
    return 2;
  }
  if (!out_dir.empty() && cases.size() > 1) {
    try {
      write_file(fs::path(out_dir) / "summary.json",
                 (pretty ? summary.dump(2) : canonical_text(summary)) + "\n");
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 2;
    }
  }
  return all_ok ? 0 : 1;
}

int cmd_inspect(const std::string& trace_path, const std::string& step,
                const std::string& actor, const std::string& payload_class,
                const std::string& kind, bool show_payload) {
  std::ifstream in(trace_path, std::ios::binary);
  if (!in) {
    std::cerr << "error: cannot read " << trace_path << "\n";
    return 2;
  }
  std::optional<PayloadClass> want_class;
  if (!payload_class.empty()) {
    want_class = parse_payload_class(payload_class);
    if (!want_class) {
      std::cerr << "error: unknown payload class '" << payload_class << "'\n";
      return 2;
    }
  }
  std::vector<TraceEvent> events;
  try {
    events = ProtocolTrace::import_jsonl(in);
  } catch (const std::exception& e) {
    std::cerr << "error: " << trace_path << " is not a valid trace: "
              << e.what() << "\n";
    return 2;
  }
  for (const auto& e : events) {
    if (!step.empty() && e.step != step) continue;
    if (!actor.empty() && e.actor != actor && e.peer != actor) continue;
    if (want_class && e.payload_class != *want_class) continue;
    if (!kind.empty() && kind != event_kind_name(e.kind) &&
        kind != e.payload_kind)
      continue;
    std::cout << "#" << e.index << " " << e.step << " "
              << event_kind_name(e.kind) << " " << e.actor;
    if (!e.peer.empty())
      std::cout << " -> " << e.peer << " [" << e.channel << "#" << e.seq << "]";
    std::cout << " class=" << payload_class_name(e.payload_class);
    if (!e.payload_kind.empty()) std::cout << " kind=" << e.payload_kind;
    if (!e.payload.empty()) std::cout << " payload=" << e.payload.size() << "B";
    if (!e.detail.empty()) std::cout << " detail=" << e.detail;
    std::cout << "\n";
    if (show_payload && !e.payload.empty())
      std::cout << "  " << base64_encode(e.payload) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized data-aggregation simulator"};
  app.require_subcommand(1);

  std::string scenario_path, out_dir, mode_override, case_filter;
  std::uint64_t seed = 1;
  bool strict_override = false, pretty = false;
  CLI::App* run = app.add_subcommand("run", "Run a scenario or suite file");
  run->add_option("scenario", scenario_path, "Scenario JSON file")->required();
  run->add_option("--seed", seed, "Deterministic run seed");
  run->add_option("--out", out_dir, "Directory for report/trace/output files");
  run->add_option("--mode", mode_override, "Override acquisition mode")
      ->check(CLI::IsMember({"onchain", "offchain"}));
  run->add_flag("--strict-termination", strict_override,
                "Abort the whole run when any source fails verification");
  run->add_option("--case", case_filter, "Run only the named suite case");
  run->add_flag("--pretty", pretty, "Indent JSON reports for reading");

  std::string trace_path, step, actor, payload_class, kind;
  bool show_payload = false;
  CLI::App* inspect =
      app.add_subcommand("inspect", "List events from a trace file");
  inspect->add_option("trace", trace_path, "Trace JSONL file")->required();
  inspect->add_option("--step", step, "Only events with this step label");
  inspect->add_option("--actor", actor, "Only events touching this actor");
  inspect->add_option("--payload-class", payload_class,
                      "Only events with this payload class");
  inspect->add_option("--kind", kind,
                      "Only events with this event or payload kind");
  inspect->add_flag("--payload", show_payload,
                    "Print payload bytes as base64");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed())
      return cmd_run(scenario_path, seed, out_dir, mode_override,
                     strict_override, case_filter, pretty);
    return cmd_inspect(trace_path, step, actor, payload_class, kind,
                       show_payload);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
