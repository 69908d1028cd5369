#include "qkdnet/forwarding.hpp"

#include <algorithm>
#include <deque>

namespace qkdnet::forwarding {

namespace {

constexpr std::uint8_t kForward = 1;
constexpr std::uint8_t kAck = 2;
constexpr std::uint8_t kAbort = 3;

void encode_nodes(Writer& w, const std::vector<NodeId>& nodes) {
  w.u32(static_cast<std::uint32_t>(nodes.size()));
  for (const auto& n : nodes) encode(w, n);
}

std::vector<NodeId> decode_nodes(Reader& r) {
  auto n = r.u32();
  if (n > 1024) throw DecodeError("trail too long");
  std::vector<NodeId> out;
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(decode<NodeId>(r));
  return out;
}

seclevel::SecurityExpr full_strength() {
  return seclevel::SecurityExpr(seclevel::SecurityLabel(seclevel::Base::ITS, {}));
}

}  // namespace

std::string e2e_supplier(const NodeId& peer) { return "e2e:" + peer.to_string(); }

void Topology::add_link(const LinkDescriptor& link, std::string pad_supplier) {
  link.validate();
  for (const auto& l : links_)
    if (l.link.link_id == link.link_id) throw ValidationError("link_id", "duplicate link id");
  if (pad_supplier.empty()) pad_supplier = link.link_id.to_string();
  links_.push_back({link, std::move(pad_supplier)});
}

const RoutedLink& Topology::find(const LinkId& id) const {
  for (const auto& l : links_)
    if (l.link.link_id == id) return l;
  throw ValidationError("link_id", "unknown link " + id.to_string());
}

std::set<NodeId> Topology::nodes() const {
  std::set<NodeId> out;
  for (const auto& l : links_) {
    out.insert(l.link.endpoint_a);
    out.insert(l.link.endpoint_b);
  }
  return out;
}

std::vector<std::string> Topology::domain_route(const std::string& from,
                                                const std::string& to) const {
  std::map<std::string, std::set<std::string>> adj;
  for (const auto& l : links_) {
    const auto& a = l.link.endpoint_a.domain;
    const auto& b = l.link.endpoint_b.domain;
    if (a == b) continue;
    adj[a].insert(b);
    adj[b].insert(a);
  }
  std::map<std::string, std::string> parent{{from, from}};
  std::deque<std::string> queue{from};
  while (!queue.empty()) {
    auto d = queue.front();
    queue.pop_front();
    if (d == to) break;
    for (const auto& n : adj[d])
      if (parent.emplace(n, d).second) queue.push_back(n);
  }
  if (!parent.count(to)) return {};
  std::vector<std::string> route{to};
  while (route.back() != from) route.push_back(parent.at(route.back()));
  std::reverse(route.begin(), route.end());
  return route;
}

Controller::Controller(std::string name, std::set<std::string> domains, const Topology& topology)
    : name_(std::move(name)), domains_(std::move(domains)), topology_(topology) {
  if (domains_.empty()) throw ValidationError("domains", "controller manages no domain");
}

std::set<NodeId> Controller::border_nodes() const {
  std::set<NodeId> out;
  for (const auto& l : topology_.links()) {
    const auto& a = l.link.endpoint_a;
    const auto& b = l.link.endpoint_b;
    if (manages(a) && !manages(b)) out.insert(a);
    if (manages(b) && !manages(a)) out.insert(b);
  }
  return out;
}

PathSpec Controller::search(const NodeId& source, const std::set<NodeId>& targets,
                            const std::vector<const RoutedLink*>& links, const LinkFilter& usable,
                            const std::string& target_text) const {
  auto ok = [&](const RoutedLink& l, const NodeId& from) { return !usable || usable(l, from); };
  // Distances to the nearest target, following links in the relay direction.
  std::map<NodeId, std::size_t> dist;
  std::deque<NodeId> queue;
  for (const auto& t : targets) {
    dist[t] = 0;
    queue.push_back(t);
  }
  while (!queue.empty()) {
    auto v = queue.front();
    queue.pop_front();
    for (const auto* l : links) {
      if (l->link.endpoint_a != v && l->link.endpoint_b != v) continue;
      const auto& u = l->link.other(v);
      if (dist.count(u) || !ok(*l, u)) continue;
      dist[u] = dist[v] + 1;
      queue.push_back(u);
    }
  }
  if (!dist.count(source))
    throw UnreachableError(name_, "no path from " + source.to_string() + " to " + target_text);

  PathSpec path;
  path.hops.push_back(source);
  auto here = source;
  while (dist.at(here) > 0) {
    const RoutedLink* best = nullptr;
    for (const auto* l : links) {
      if (l->link.endpoint_a != here && l->link.endpoint_b != here) continue;
      const auto& next = l->link.other(here);
      auto it = dist.find(next);
      if (it == dist.end() || it->second + 1 != dist.at(here) || !ok(*l, here)) continue;
      if (!best || l->link.link_id < best->link.link_id) best = l;
    }
    here = best->link.other(here);
    path.links.push_back(best->link.link_id);
    path.hops.push_back(here);
  }
  for (std::size_t i = 0; i + 1 < path.hops.size(); ++i)
    if (path.hops[i].domain != path.hops[i + 1].domain)
      path.border_crossings.insert(static_cast<std::uint32_t>(i));
  path.validate();
  return path;
}

PathSpec Controller::compute_path(const NodeId& source, const NodeId& target,
                                  const LinkFilter& usable) const {
  if (!manages(source))
    throw UnreachableError(name_, source.to_string() + " is outside this controller");
  if (!manages(target))
    throw UnreachableError(name_, target.to_string() + " is outside this controller");
  if (source == target) throw ValidationError("target", "source and target are the same node");
  std::vector<const RoutedLink*> links;
  for (const auto& l : topology_.links())
    if (manages(l.link.endpoint_a) && manages(l.link.endpoint_b)) links.push_back(&l);
  return search(source, {target}, links, usable, target.to_string());
}

PathSpec Controller::compute_segment(const NodeId& from, const NodeId& destination,
                                     const LinkFilter& usable) const {
  if (manages(destination)) return compute_path(from, destination, usable);
  if (!manages(from)) throw UnreachableError(name_, from.to_string() + " is outside this controller");
  auto route = topology_.domain_route(from.domain, destination.domain);
  if (route.empty())
    throw UnreachableError(name_, "no border route to domain " + destination.domain);
  std::string next;
  for (const auto& d : route)
    if (!domains_.count(d)) {
      next = d;
      break;
    }
  std::vector<const RoutedLink*> links;
  std::set<NodeId> exits;
  for (const auto& l : topology_.links()) {
    const auto& a = l.link.endpoint_a;
    const auto& b = l.link.endpoint_b;
    if (manages(a) && manages(b)) {
      links.push_back(&l);
    } else if ((manages(a) && b.domain == next) || (manages(b) && a.domain == next)) {
      links.push_back(&l);
      exits.insert(a.domain == next ? a : b);
    }
  }
  return search(from, exits, links, usable, "domain " + next);
}

RelayAgent::RelayAgent(netsim::Scheduler& scheduler, kms::Kms& store, const Controller& controller,
                       const Topology& topology, RelayConfig config, DeterministicRng rng,
                       LinkFilter usable)
    : scheduler_(scheduler),
      store_(store),
      controller_(controller),
      topology_(topology),
      config_(config),
      rng_(std::move(rng)),
      usable_(std::move(usable)) {
  if (!controller_.manages(store_.self()))
    throw ValidationError("controller", "controller does not manage " + store_.self().to_string());
}

RelayAgent::~RelayAgent() {
  *alive_ = false;
  for (auto& [id, o] : origins_) scheduler_.cancel(o.timeout);
}

void RelayAgent::attach(const LinkId& link, netsim::Endpoint endpoint) {
  const auto& rl = topology_.find(link);
  if (!rl.link.connects(endpoint.local(), endpoint.remote()) || endpoint.local() != self())
    throw ValidationError("endpoint", "endpoint does not belong to link " + link.to_string());
  std::weak_ptr<bool> guard = alive_;
  endpoint.on_receive([this, guard, link](const netsim::Message& m) {
    if (guard.lock()) on_message(link, m.payload);
  });
  endpoints_[link] = std::move(endpoint);
}

KeyId RelayAgent::request(const NodeId& destination, std::size_t length, Done done) {
  auto id = KeyId::random(rng_);
  start(id, destination, KeyMaterial::random(rng_, length), std::nullopt, std::move(done));
  return id;
}

void RelayAgent::relay(const KeyId& e2e_id, const PathSpec& path, const KeyMaterial& payload,
                       Done done) {
  path.validate_against([&] {
    std::vector<LinkDescriptor> v;
    for (const auto& l : topology_.links()) v.push_back(l.link);
    return v;
  }());
  if (path.hops.front() != self()) throw ValidationError("hops", "path does not start here");
  start(e2e_id, path.hops.back(), payload, path, std::move(done));
}

void RelayAgent::start(const KeyId& e2e_id, const NodeId& destination, KeyMaterial payload,
                       std::optional<PathSpec> path, Done done) {
  Origin o;
  o.done = std::move(done);
  o.result.key_id = e2e_id;
  o.result.source = self();
  o.result.destination = destination;
  o.result.started = scheduler_.now();
  o.key = payload;
  const auto now = unix_now();
  o.validity = {now, now + config_.validity_seconds};
  if (origins_.count(e2e_id)) throw ValidationError("e2e_id", "relay id already in use");
  auto validity = o.validity;
  origins_.emplace(e2e_id, std::move(o));

  auto fail = [&](const std::string& segment, const std::string& what) {
    ++counters_.aborts;
    finish(e2e_id, false, segment, what, {self()}, full_strength());
  };
  if (destination == self()) return fail(controller_.name(), "destination is the source");
  if (payload.size() != config_.key_len)
    return fail(controller_.name(), "requested length does not match link key length");

  Forward fwd;
  fwd.e2e_id = e2e_id;
  fwd.source = self();
  fwd.destination = destination;
  fwd.validity = validity;
  fwd.label = full_strength();
  fwd.trail = {self()};
  fwd.planner = controller_.name();
  try {
    fwd.segment = path ? *path : controller_.compute_segment(self(), destination, usable_);
  } catch (const UnreachableError& e) {
    return fail(e.segment(), e.what());
  }
  origins_.at(e2e_id).timeout = scheduler_.after(config_.e2e_timeout, [this, e2e_id] {
    if (origins_.count(e2e_id)) {
      origins_.at(e2e_id).timeout = 0;
      finish(e2e_id, false, "", "timed out", {self()}, full_strength());
    }
  });
  send_forward(std::move(fwd), std::move(payload));
}

void RelayAgent::advance(Forward fwd, KeyMaterial payload) {
  if (fwd.index + 1 == fwd.segment.hops.size()) {
    // Entering a new domain: its own controller plans the next part.
    try {
      fwd.segment = controller_.compute_segment(self(), fwd.destination, usable_);
    } catch (const UnreachableError& e) {
      payload.wipe();
      return abort(fwd.e2e_id, e.segment(), e.what());
    }
    fwd.index = 0;
    fwd.planner = controller_.name();
  }
  send_forward(std::move(fwd), std::move(payload));
}

void RelayAgent::send_forward(Forward fwd, KeyMaterial payload) {
  const auto i = fwd.index;
  const auto& link_id = fwd.segment.links.at(i);
  const auto next = fwd.segment.hops.at(i + 1);
  const auto hop_text = self().to_string() + " -> " + next.to_string();
  auto ep = endpoints_.find(link_id);
  if (ep == endpoints_.end()) {
    payload.wipe();
    return abort(fwd.e2e_id, fwd.planner, "no channel for hop " + hop_text);
  }
  const auto& rl = topology_.find(link_id);
  std::vector<kms::DeliveredKey> pads;
  try {
    pads = store_.get_key_014(self(), next, 1, payload.size(), rl.pad_supplier, kms::Ownership::split);
  } catch (const kms::KmsError& e) {
    payload.wipe();
    return abort(fwd.e2e_id, fwd.planner, "no pad for hop " + hop_text + ": " + e.what());
  }
  auto& pad = pads.front();
  ++counters_.pads_wrapped;
  fwd.ciphertext = crypto::otp_wrap(payload, pad.key);
  payload.wipe();
  pad.key.wipe();
  fwd.label = seclevel::serial(fwd.label, pad.label);
  fwd.index = i + 1;
  fwd.supplier = rl.pad_supplier;
  fwd.pad_id = pad.key_id;
  if (tap_) tap_(fwd.e2e_id, fwd.ciphertext);

  Writer w;
  w.u8(kForward);
  encode(w, fwd.e2e_id);
  encode(w, fwd.source);
  encode(w, fwd.destination);
  encode(w, fwd.validity);
  encode(w, fwd.label);
  encode_nodes(w, fwd.trail);
  encode(w, fwd.segment);
  w.u32(fwd.index);
  w.str(fwd.planner);
  w.str(fwd.supplier);
  encode(w, fwd.pad_id);
  w.bytes(fwd.ciphertext);
  if (!ep->second.send(w.data()))
    abort(fwd.e2e_id, fwd.planner, "channel down on hop " + hop_text);
}

void RelayAgent::on_message(const LinkId& link, const Bytes& payload) {
  try {
    Reader r(payload);
    auto type = r.u8();
    auto e2e_id = decode<KeyId>(r);
    if (type == kForward) {
      Forward f;
      f.e2e_id = e2e_id;
      f.source = decode<NodeId>(r);
      f.destination = decode<NodeId>(r);
      f.validity = decode<Validity>(r);
      f.label = decode<seclevel::SecurityExpr>(r);
      f.trail = decode_nodes(r);
      f.segment = decode<PathSpec>(r);
      f.index = r.u32();
      f.planner = r.str(256);
      f.supplier = r.str(256);
      f.pad_id = decode<KeyId>(r);
      f.ciphertext = r.bytes(kMaxKeyLength);
      r.expect_done();
      if (f.index == 0 || f.index >= f.segment.hops.size() || f.segment.hops[f.index] != self())
        return;
      on_forward(link, std::move(f), scheduler_.now() + config_.slave_wait);
    } else if (type == kAck) {
      on_ack(e2e_id, r);
    } else if (type == kAbort) {
      on_abort(e2e_id, r);
    }
  } catch (const std::exception&) {
    // Malformed relay traffic is dropped; the source times out.
  }
}

void RelayAgent::on_forward(const LinkId& link, Forward fwd, netsim::SimTime deadline) {
  if (transit_.count(fwd.e2e_id) || origins_.count(fwd.e2e_id)) return;  // replay
  transit_.emplace(fwd.e2e_id, link);
  try_unwrap(std::move(fwd), deadline);
}

void RelayAgent::try_unwrap(Forward fwd, netsim::SimTime deadline) {
  const auto& prev = fwd.segment.hops[fwd.index - 1];
  std::vector<kms::DeliveredKey> pads;
  try {
    pads = store_.get_key_with_ids(self(), prev, {fwd.pad_id}, fwd.supplier);
  } catch (const kms::KmsError& e) {
    if (e.code() == kms::Errc::unknown_key_id && scheduler_.now() + config_.poll <= deadline) {
      // The pad may still be in flight on the key-generating link.
      std::weak_ptr<bool> guard = alive_;
      scheduler_.after(config_.poll, [this, guard, fwd = std::move(fwd), deadline]() mutable {
        if (guard.lock()) try_unwrap(std::move(fwd), deadline);
      });
      return;
    }
    return abort(fwd.e2e_id, fwd.planner,
                 "pad unusable on hop " + prev.to_string() + " -> " + self().to_string() + ": " +
                     e.what());
  }
  auto& pad = pads.front();
  auto payload = crypto::otp_unwrap(fwd.ciphertext, pad.key);
  pad.key.wipe();
  ++counters_.pads_unwrapped;
  fwd.trail.push_back(self());

  if (self() != fwd.destination) return advance(std::move(fwd), std::move(payload));

  const auto supplier = e2e_supplier(fwd.source);
  if (!store_.has_supplier(supplier))
    store_.register_supplier({supplier, fwd.source, 256, config_.key_len});
  try {
    store_.push_key(supplier, {fwd.e2e_id, payload, fwd.source, supplier, fwd.validity, fwd.label});
  } catch (const std::exception& e) {
    payload.wipe();
    return abort(fwd.e2e_id, fwd.planner, std::string("destination refused key: ") + e.what());
  }
  payload.wipe();
  ++counters_.delivered;
  Writer w;
  encode_nodes(w, fwd.trail);
  encode(w, fwd.label);
  send_back(kAck, fwd.e2e_id, w.data());
}

void RelayAgent::send_back(std::uint8_t type, const KeyId& e2e_id, const Bytes& body) {
  auto it = transit_.find(e2e_id);
  if (it == transit_.end()) return;
  auto ep = endpoints_.find(it->second);
  transit_.erase(it);
  if (ep == endpoints_.end()) return;
  Writer w;
  w.u8(type);
  encode(w, e2e_id);
  w.raw(body);
  ep->second.send(w.data());
}

void RelayAgent::abort(const KeyId& e2e_id, const std::string& segment, const std::string& reason) {
  ++counters_.aborts;
  if (origins_.count(e2e_id)) return finish(e2e_id, false, segment, reason, {self()}, full_strength());
  Writer w;
  w.str(segment);
  w.str(reason);
  send_back(kAbort, e2e_id, w.data());
}

void RelayAgent::on_ack(const KeyId& e2e_id, Reader& r) {
  auto trail = decode_nodes(r);
  auto label = decode<seclevel::SecurityExpr>(r);
  r.expect_done();
  auto it = origins_.find(e2e_id);
  if (it == origins_.end()) {
    Writer w;
    encode_nodes(w, trail);
    encode(w, label);
    return send_back(kAck, e2e_id, w.data());
  }
  auto& o = it->second;
  const auto dest = o.result.destination;
  const auto supplier = e2e_supplier(dest);
  if (!store_.has_supplier(supplier)) store_.register_supplier({supplier, dest, 256, config_.key_len});
  try {
    store_.push_key(supplier, {e2e_id, o.key, dest, supplier, o.validity, label});
  } catch (const std::exception& e) {
    return finish(e2e_id, false, controller_.name(), std::string("source refused key: ") + e.what(),
                  trail, label);
  }
  ++counters_.completed;
  finish(e2e_id, true, "", "", trail, label);
}

void RelayAgent::on_abort(const KeyId& e2e_id, Reader& r) {
  auto segment = r.str(256);
  auto reason = r.str();
  r.expect_done();
  if (origins_.count(e2e_id)) return finish(e2e_id, false, segment, reason, {self()}, full_strength());
  Writer w;
  w.str(segment);
  w.str(reason);
  send_back(kAbort, e2e_id, w.data());
}

void RelayAgent::finish(const KeyId& e2e_id, bool ok, const std::string& segment,
                        const std::string& error, const std::vector<NodeId>& hops,
                        const seclevel::SecurityExpr& label) {
  auto node = origins_.extract(e2e_id);
  if (node.empty()) return;
  auto& o = node.mapped();
  if (o.timeout) scheduler_.cancel(o.timeout);
  o.key.wipe();
  if (!ok) ++counters_.failed;
  o.result.ok = ok;
  o.result.failed_segment = segment;
  o.result.error = error;
  o.result.hops = hops;
  o.result.label = label;
  o.result.finished = scheduler_.now();
  if (o.done) o.done(o.result);
}

}  // namespace qkdnet::forwarding
