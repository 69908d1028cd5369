#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qkdnet/kms.hpp"
#include "qkdnet/netsim.hpp"

// Hop-by-hop key relay over trusted-node chains, and the per-domain
// controllers that pick the relay paths.
namespace qkdnet::forwarding {

/// A link as seen by routing: the descriptor plus the supplier whose keys
/// serve as one-time pads across it.
struct RoutedLink {
  LinkDescriptor link;
  std::string pad_supplier;
};

class Topology {
 public:
  // pad_supplier defaults to the link id, which is what the link emulator uses.
  void add_link(const LinkDescriptor& link, std::string pad_supplier = {});
  const std::vector<RoutedLink>& links() const { return links_; }
  const RoutedLink& find(const LinkId& id) const;
  std::set<NodeId> nodes() const;

  // Shortest domain sequence from -> to over cross-domain links; ties go to
  // the lexicographically smaller domain name. Empty when unreachable.
  std::vector<std::string> domain_route(const std::string& from, const std::string& to) const;

 private:
  std::vector<RoutedLink> links_;
};

class UnreachableError : public Error {
 public:
  UnreachableError(std::string segment, const std::string& what)
      : Error("segment " + segment + ": " + what), segment_(std::move(segment)) {}
  const std::string& segment() const { return segment_; }

 private:
  std::string segment_;
};

/// Usable(link, from): whether `from` can currently take a pad across `link`.
using LinkFilter = std::function<bool(const RoutedLink&, const NodeId& from)>;

/// Configures relay paths inside the domains it manages. Several domains
/// under one controller behave as a single routing domain.
class Controller {
 public:
  Controller(std::string name, std::set<std::string> domains, const Topology& topology);

  const std::string& name() const { return name_; }
  const std::set<std::string>& domains() const { return domains_; }
  bool manages(const NodeId& n) const { return domains_.count(n.domain) != 0; }
  std::set<NodeId> border_nodes() const;

  // Shortest path by hop count over links inside the managed domains, ties
  // broken by the smaller link id at every step.
  PathSpec compute_path(const NodeId& source, const NodeId& target,
                        const LinkFilter& usable = {}) const;
  // The part of a relay to `destination` that this controller is responsible
  // for: to the destination if managed, else through the exit border link
  // into the next domain of the domain route.
  PathSpec compute_segment(const NodeId& from, const NodeId& destination,
                           const LinkFilter& usable = {}) const;

 private:
  PathSpec search(const NodeId& source, const std::set<NodeId>& targets,
                  const std::vector<const RoutedLink*>& links, const LinkFilter& usable,
                  const std::string& target_text) const;

  std::string name_;
  std::set<std::string> domains_;
  const Topology& topology_;
};

struct RelayConfig {
  std::uint32_t key_len = kDefaultKeyLength;
  netsim::SimTime slave_wait = netsim::from_seconds(10);  // per-hop wait for a pad to appear
  netsim::SimTime poll = netsim::from_ms(100);
  netsim::SimTime e2e_timeout = netsim::from_seconds(120);
  std::int64_t validity_seconds = 86400;
};

struct E2eResult {
  bool ok = false;
  KeyId key_id;
  NodeId source, destination;
  std::string error;
  std::string failed_segment;
  std::vector<NodeId> hops;
  seclevel::SecurityExpr label{seclevel::SecurityLabel{}};
  netsim::SimTime started = 0, finished = 0;
};

struct RelayCounters {
  std::uint64_t pads_wrapped = 0;    // pads consumed as hop master
  std::uint64_t pads_unwrapped = 0;  // pads consumed as hop slave (hop completed)
  std::uint64_t delivered = 0;       // e2e keys stored as destination
  std::uint64_t completed = 0;       // e2e keys stored as source
  std::uint64_t failed = 0;
  std::uint64_t aborts = 0;          // aborts raised here
};

/// Supplier id under which relayed end-to-end keys are stored, per peer.
std::string e2e_supplier(const NodeId& peer);

class RelayAgent {
 public:
  using Done = std::function<void(const E2eResult&)>;

  RelayAgent(netsim::Scheduler& scheduler, kms::Kms& store, const Controller& controller,
             const Topology& topology, RelayConfig config, DeterministicRng rng,
             LinkFilter usable = {});
  RelayAgent(const RelayAgent&) = delete;
  RelayAgent& operator=(const RelayAgent&) = delete;
  ~RelayAgent();

  const NodeId& self() const { return store_.self(); }
  // Relay traffic for `link` goes through this endpoint.
  void attach(const LinkId& link, netsim::Endpoint endpoint);

  // Draws a fresh random key and relays it to `destination`. Segments in
  // foreign domains are planned by their own controllers on arrival.
  KeyId request(const NodeId& destination, std::size_t length, Done done);
  // Observes every hop ciphertext this node sends.
  void set_wire_tap(std::function<void(const KeyId&, ByteView)> tap) { tap_ = std::move(tap); }
  // Relays `payload` along a fixed path starting here.
  void relay(const KeyId& e2e_id, const PathSpec& path, const KeyMaterial& payload, Done done);

  const RelayCounters& counters() const { return counters_; }
  std::size_t in_transit() const { return transit_.size(); }

 private:
  struct Forward {
    KeyId e2e_id;
    NodeId source, destination;
    Validity validity;
    seclevel::SecurityExpr label{seclevel::SecurityLabel{}};
    std::vector<NodeId> trail;
    PathSpec segment;
    std::uint32_t index = 0;  // position of the receiver in segment.hops
    std::string planner;      // controller that planned the segment
    std::string supplier;
    KeyId pad_id;
    Bytes ciphertext;
  };
  struct Origin {
    Done done;
    E2eResult result;
    KeyMaterial key;
    Validity validity;
    netsim::EventId timeout = 0;
  };

  void start(const KeyId& e2e_id, const NodeId& destination, KeyMaterial payload,
             std::optional<PathSpec> path, Done done);
  void on_message(const LinkId& link, const Bytes& payload);
  void on_forward(const LinkId& link, Forward fwd, netsim::SimTime deadline);
  void try_unwrap(Forward fwd, netsim::SimTime deadline);
  void advance(Forward fwd, KeyMaterial payload);
  void send_forward(Forward fwd, KeyMaterial payload);
  void send_back(std::uint8_t type, const KeyId& e2e_id, const Bytes& body);
  void abort(const KeyId& e2e_id, const std::string& segment, const std::string& reason);
  void on_ack(const KeyId& e2e_id, Reader& r);
  void on_abort(const KeyId& e2e_id, Reader& r);
  void finish(const KeyId& e2e_id, bool ok, const std::string& segment, const std::string& error,
              const std::vector<NodeId>& hops, const seclevel::SecurityExpr& label);
  std::int64_t unix_now() const { return netsim::unix_seconds(scheduler_.now()); }

  netsim::Scheduler& scheduler_;
  kms::Kms& store_;
  const Controller& controller_;
  const Topology& topology_;
  RelayConfig config_;
  DeterministicRng rng_;
  LinkFilter usable_;
  std::function<void(const KeyId&, ByteView)> tap_;
  std::map<LinkId, netsim::Endpoint> endpoints_;
  std::map<KeyId, LinkId> transit_;  // e2e id -> link back towards the source
  std::map<KeyId, Origin> origins_;
  RelayCounters counters_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

}  // namespace qkdnet::forwarding
