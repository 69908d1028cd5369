// qkdnet: run and inspect simulated key-distribution deployments.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "qkdnet/scenario.hpp"

using namespace qkdnet;
using namespace qkdnet::scenario;

namespace {

constexpr int kOk = 0;
constexpr int kScenarioFailure = 1;
constexpr int kConfigError = 2;

struct Args {
  std::string config, script, report, trace, node;
  std::optional<std::uint64_t> seed;
  bool wall_clock = false;
  bool json = false;
};

Script load_script(const Args& a) {
  return a.script.empty() ? Script::empty(60) : Script::load(a.script);
}

RunOptions options(const Args& a) {
  RunOptions o;
  o.seed = a.seed;
  o.wall_clock = a.wall_clock;
  o.record_trace = !a.trace.empty();
  return o;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

int cmd_validate(const Args& a) {
  auto cfg = DeploymentConfig::load(a.config);
  cfg.validate(crypto::SuiteRegistry::with_test_suites());
  if (!a.script.empty()) Script::load(a.script);
  std::cout << "ok: " << cfg.nodes().size() << " nodes, " << cfg.channels.size() << " channels, "
            << cfg.links.size() << " links, " << cfg.borders.size() << " borders\n";
  return kOk;
}

int cmd_run(const Args& a) {
  auto script = load_script(a);
  Deployment d(DeploymentConfig::load(a.config), options(a));
  d.run(script);
  auto rep = d.report();
  if (!a.report.empty()) write_file(a.report, rep.to_json().dump(2) + "\n");
  if (!a.trace.empty()) {
    std::ostringstream os;
    for (const auto& r : d.network().trace()) os << r.to_line() << '\n';
    write_file(a.trace, os.str());
  }
  if (a.json)
    std::cout << rep.to_json().dump(2) << '\n';
  else
    std::cout << rep.to_table();
  return rep.success() ? kOk : kScenarioFailure;
}

int cmd_inspect(const Args& a) {
  const auto node = NodeId::parse(a.node);
  auto script = a.script.empty() ? Script::empty(0) : Script::load(a.script);
  Deployment d(DeploymentConfig::load(a.config), options(a));
  if (!d.config().has_node(node)) throw ConfigError("node", "unknown node " + a.node);
  d.run(script);
  auto rows = d.listing(node);
  if (a.json) {
    Json out = Json::array();
    for (const auto& r : rows)
      out.push_back({{"key_id", r.key_id.to_string()},
                     {"supplier", r.supplier_id},
                     {"peer", r.peer.to_string()},
                     {"label", r.label},
                     {"consumed", r.consumed}});
    std::cout << out.dump(2) << '\n';
    return kOk;
  }
  std::cout << std::left << std::setw(38) << "key_id" << std::setw(38) << "supplier"
            << std::setw(22) << "peer" << std::setw(9) << "consumed" << "label\n";
  for (const auto& r : rows)
    std::cout << std::setw(38) << r.key_id.to_string() << std::setw(38) << r.supplier_id
              << std::setw(22) << r.peer.to_string() << std::setw(9) << (r.consumed ? "yes" : "no")
              << r.label << '\n';
  std::cout << rows.size() << " keys at " << a.node << '\n';
  return kOk;
}

int cmd_replay(const Args& a) {
  std::ifstream in(a.trace);
  if (!in) throw ConfigError("trace", "cannot open " + a.trace);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    netsim::TraceRecord::parse_line(line);
    lines.push_back(line);
  }
  const auto hash = netsim::hash_trace_lines(lines);
  std::cout << lines.size() << " records, hash " << hash << '\n';
  if (a.report.empty()) return kOk;
  std::ifstream rin(a.report);
  if (!rin) throw ConfigError("report", "cannot open " + a.report);
  const auto expected = Json::parse(rin).at("trace_hash").get<std::string>();
  if (expected != hash) {
    std::cout << "MISMATCH: report has " << expected << '\n';
    return kScenarioFailure;
  }
  std::cout << "matches report\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated QKD/PQC key-distribution deployments"};
  app.require_subcommand(1);
  Args a;

  auto common = [&](CLI::App* sub, bool need_config) {
    auto* c = sub->add_option("--config", a.config, "deployment config (JSON)")->check(CLI::ExistingFile);
    if (need_config) c->required();
    sub->add_option("--script", a.script, "scenario script (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", a.seed, "override the config seed");
    sub->add_flag("--wall-clock", a.wall_clock, "pace simulated time against the real clock");
    sub->add_flag("--json", a.json, "print JSON instead of a table");
  };

  auto* validate = app.add_subcommand("validate", "check a config (and script) without running");
  validate->add_option("--config", a.config)->required()->check(CLI::ExistingFile);
  validate->add_option("--script", a.script)->check(CLI::ExistingFile);

  auto* run = app.add_subcommand("run", "run a script and print the report");
  common(run, true);
  run->add_option("--report", a.report, "write the JSON report here");
  run->add_option("--trace", a.trace, "write the delivery trace here");

  auto* inspect = app.add_subcommand("inspect", "list one node's key store after a script");
  common(inspect, true);
  inspect->add_option("--node", a.node, "domain/node")->required();

  auto* replay = app.add_subcommand("replay-trace", "recompute a trace hash");
  replay->add_option("--trace", a.trace)->required();
  replay->add_option("--report", a.report, "compare against this report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (*validate) return cmd_validate(a);
    if (*run) return cmd_run(a);
    if (*inspect) return cmd_inspect(a);
    return cmd_replay(a);
  } catch (const ValidationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const Json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kScenarioFailure;
  }
}
