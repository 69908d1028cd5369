#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qkdnet/border.hpp"
#include "qkdnet/forwarding.hpp"
#include "qkdnet/kms.hpp"
#include "qkdnet/netsim.hpp"
#include "qkdnet/qkd_emu.hpp"

// Whole-deployment runner: every node, link and border bridge of a config in
// one process over one simulated network, driven by a timed script.
namespace qkdnet::scenario {

using Json = nlohmann::json;

/// Bad config or script. The field is a path such as "borders[2].channel".
using ConfigError = ValidationError;

struct ChannelConfig {
  netsim::ChannelSpec spec;
  NodeId a, b;
  std::size_t index = 0;  // position in the config file
};

struct LinkConfig {
  std::string name;
  LinkId id;
  std::string channel;
  LinkType type = LinkType::QKD;
  std::uint64_t rate_bps = 256;
  std::uint32_t key_len = kDefaultKeyLength;
  std::string kem = "kem-a", sig = "sig-a";
  std::set<std::string> side_channels;
};

struct BorderConfig {
  std::string name;  // also the supplier id of the bridge stream
  int method = 0;
  LinkId id;
  std::string channel;                      // methods 1-3; method 4 uses the ground channel
  std::string space_channel, ground_channel;
  std::vector<std::string> inputs;          // method 1, link names
  border::HybridConfig hybrid;              // methods 1 and 2
  border::EmulatedPairConfig pair;          // method 2
  border::AppConfig app;                    // method 3
  border::MultipathConfig multipath;        // method 4
  std::optional<std::string> psk;           // method 4, name in psks
};

struct ControllerConfig {
  std::string name;
  std::set<std::string> domains;
};

struct RelaySettings {
  std::uint32_t key_len = kDefaultKeyLength;
  double e2e_timeout_s = 120;
  double slave_wait_s = 10;
};

struct DeploymentConfig {
  std::uint64_t seed = 1;
  std::map<std::string, std::vector<std::string>> domains;
  std::vector<ControllerConfig> controllers;  // includes one per unmerged domain
  std::map<std::string, ChannelConfig> channels;
  std::vector<LinkConfig> links;
  std::vector<BorderConfig> borders;
  std::map<std::string, Bytes> psks;
  RelaySettings relay;

  static DeploymentConfig from_json(const Json& j);
  static DeploymentConfig load(const std::string& path);
  // Resolves references; throws ConfigError naming the field.
  void validate(const crypto::SuiteRegistry& suites) const;

  std::vector<NodeId> nodes() const;
  bool has_node(const NodeId& n) const;
};

/// "name" parsed as a UUID when it is one, else the first 16 octets of its
/// SHA-256.
LinkId link_id_for(const std::string& name);

struct Action {
  enum class Kind { request, request_all_pairs, kill, heal, drain };
  Kind kind = Kind::request;
  double at_s = 0;
  NodeId from, to;        // request
  double spacing_s = 1;   // request_all_pairs
  std::string target;     // kill/heal: channel; drain: link or border, empty = all
};

struct Script {
  double duration_s = 60;
  double grace_s = 30;  // after the orderly drain at the end
  std::vector<Action> actions;

  static Script from_json(const Json& j);
  static Script load(const std::string& path);
  static Script empty(double duration_s) { return Script{duration_s, 30, {}}; }
};

struct LinkReport {
  std::string name, type, label;
  std::uint64_t produced = 0, keys_a = 0, keys_b = 0, dos = 0, retransmits = 0;
  double rate_bps_a = 0, rate_bps_b = 0;
  bool streams_equal = false;
};

struct MethodReport {
  std::string name, from, to, label;
  int method = 0;
  border::Counters counters;
  std::uint64_t pending = 0;
  bool reconciles() const {
    return counters.delivered + counters.lost + pending == counters.sent;
  }
};

struct RequestReport {
  std::string from, to, key_id, error, failed_segment, label;
  bool ok = false, key_match = false;
  double latency_ms = 0;
  std::vector<std::string> hops;
  std::vector<std::string> leaks;  // other nodes holding the key
};

struct Report {
  std::uint64_t seed = 0;
  double duration_s = 0;
  std::vector<LinkReport> links;
  std::vector<MethodReport> methods;
  std::vector<RequestReport> requests;
  std::uint64_t dos_total = 0;
  std::uint64_t deliveries = 0;
  std::string trace_hash;

  bool success() const;
  Json to_json() const;
  std::string to_table() const;
};

struct RunOptions {
  std::optional<std::uint64_t> seed;
  bool wall_clock = false;
  bool record_trace = false;
};

/// A running deployment. Construction validates and starts everything at
/// simulated time zero.
class Deployment {
 public:
  Deployment(DeploymentConfig config, const RunOptions& options = {});
  ~Deployment();
  Deployment(const Deployment&) = delete;
  Deployment& operator=(const Deployment&) = delete;

  // Executes the script, then drains and lets outstanding confirmations
  // settle for the grace period.
  void run(const Script& script);
  Report report() const;

  std::vector<kms::ListingRow> listing(const NodeId& node) const;
  kms::Kms& store(const NodeId& node);
  const netsim::Network& network() const { return net_; }
  netsim::Scheduler& scheduler() { return sched_; }
  const DeploymentConfig& config() const { return config_; }

  // Queues an end-to-end request now.
  void request(const NodeId& from, const NodeId& to);
  void drain(const std::string& target = {});

 private:
  struct Link {
    LinkConfig config;
    qkd_emu::LinkPair sessions;
  };
  struct Border {
    const BorderConfig* config = nullptr;
    std::unique_ptr<border::Bridge> bridge;
    NodeId a, b;
  };

  void build();
  bool usable(const forwarding::RoutedLink& link, const NodeId& from) const;
  void finish_request(std::size_t index, const forwarding::E2eResult& r);

  DeploymentConfig config_;
  crypto::SuiteRegistry suites_;
  netsim::Scheduler sched_;
  netsim::Network net_;
  DeterministicRng rng_;
  forwarding::Topology topo_;
  std::map<NodeId, std::unique_ptr<kms::Kms>> stores_;
  std::map<std::string, std::pair<netsim::Endpoint, netsim::Endpoint>> channels_;
  std::vector<std::unique_ptr<forwarding::Controller>> controllers_;
  std::map<NodeId, std::unique_ptr<forwarding::RelayAgent>> agents_;
  std::vector<Link> links_;
  std::vector<Border> borders_;
  std::vector<RequestReport> requests_;
  double ran_for_s_ = 0;
  double generation_s_ = 0;  // time before the final drain
};

}  // namespace qkdnet::scenario
