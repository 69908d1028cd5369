// Acceptance checks. Prints one PASS/FAIL line per criterion; exit status is
// the number of failures.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "qkdnet/border.hpp"
#include "qkdnet/forwarding.hpp"
#include "qkdnet/qkd_emu.hpp"
#include "qkdnet/scenario.hpp"

using namespace qkdnet;
using namespace qkdnet::netsim;

namespace {

// Pinned tolerances.
constexpr double kQosKeysPerMinute = 60, kQosTolerance = 6, kQosWallSeconds = 1;
constexpr double kMultipathMinRate = 16, kMultipathWallSeconds = 5;
constexpr double kScenarioWallSeconds = 10;
constexpr std::size_t kSecrecyTrials = 100'000;
constexpr double kSecrecySigmas = 3;
constexpr std::size_t kRelayTrials = 1'000;

#ifndef QKDNET_SOURCE_DIR
#define QKDNET_SOURCE_DIR "."
#endif
std::string g_configs = QKDNET_SOURCE_DIR "/configs/";

struct Outcome {
  bool pass = false;
  std::string detail;
};

const crypto::SuiteRegistry& suites() {
  static const auto r = crypto::SuiteRegistry::with_test_suites();
  return r;
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class... T>
std::string cat(const T&... parts) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  (os << ... << parts);
  return os.str();
}

struct Pair {
  Scheduler sched;
  Network net;
  NodeId a{"alpha", "gw"}, b{"beta", "gw"};
  kms::Kms ka{a, [this] { return unix_seconds(sched.now()); }};
  kms::Kms kb{b, [this] { return unix_seconds(sched.now()); }};
  explicit Pair(std::uint64_t seed) : net(sched, seed) {}
};

// ---------------------------------------------------------------- 1

Outcome qos_rate() {
  const auto t0 = std::chrono::steady_clock::now();
  Pair p(1);
  auto [ea, eb] = p.net.open_channel({"qkd", 5, 1, 0, 0}, p.a, p.b);
  qkd_emu::LinkConfig cfg;
  cfg.link = {LinkId(LinkId::Raw{1}), p.a, p.b, LinkType::QKD, 256, 32};
  auto link = qkd_emu::start_link(p.sched, suites(), p.ka, p.kb, ea, eb, cfg, DeterministicRng(1));
  p.sched.run_until(from_seconds(60));
  const auto na = p.ka.size(), nb = p.kb.size();
  link.initiator->drain();
  p.sched.run_for(from_seconds(2));
  bool equal = p.ka.size() == p.kb.size();
  for (const auto& row : p.ka.listing()) {
    auto mine = p.ka.find(row.key_id, row.supplier_id);
    auto theirs = p.kb.find(row.key_id, row.supplier_id);
    equal = equal && theirs && theirs->key == mine->key;
  }
  const double wall = since(t0);
  auto within = [](double n) { return std::abs(n - kQosKeysPerMinute) <= kQosTolerance; };
  return {within(na) && within(nb) && equal && wall < kQosWallSeconds,
          cat("keys/min a=", na, " b=", nb, " (60+-6), streams equal=", equal, ", wall ", wall,
              " s (<1)")};
}

// ---------------------------------------------------------------- 2, 5

struct Multipath {
  Pair p{7};
  border::MultipathConfig cfg;
  border::MultipathReceiverKeys rkeys;
  std::unique_ptr<border::MultipathSender> sender;
  std::unique_ptr<border::MultipathReceiver> receiver;

  Multipath(border::MultipathConfig c, double space_ms, double ground_ms) : cfg(std::move(c)) {
    cfg.supplier_id = "multipath";
    DeterministicRng cred(6);
    auto sk = border::make_kem_keys(suites(), cfg.space_kem, cred);
    auto gk = border::make_kem_keys(suites(), cfg.ground_kem, cred);
    auto ss = border::make_sig_keys(suites(), cfg.space_sig, cred);
    auto gs = border::make_sig_keys(suites(), cfg.ground_sig, cred);
    rkeys = {sk.sec, gk.sec, border::SenderRegistry{{p.a, {ss.pub, gs.pub}}}};
    auto space = p.net.open_channel({"space", space_ms, 0, 0, 0}, p.a, p.b);
    auto ground = p.net.open_channel({"ground", ground_ms, 0, 0, 0}, p.a, p.b);
    p.ka.register_supplier({cfg.supplier_id, p.b, 256, 32});
    p.kb.register_supplier({cfg.supplier_id, p.a, 256, 32});
    sender = std::make_unique<border::MultipathSender>(p.sched, suites(), p.ka, space.first,
                                                       ground.first, cfg,
                                                       border::MultipathSenderKeys{sk.pub, gk.pub, ss.sec, gs.sec},
                                                       DeterministicRng(8));
    receiver = std::make_unique<border::MultipathReceiver>(p.sched, suites(), p.kb, space.second,
                                                           ground.second, cfg, rkeys);
  }
};

Outcome multipath_rate() {
  const auto t0 = std::chrono::steady_clock::now();
  border::MultipathConfig c;
  c.block_size = 50;
  Multipath m(c, 600, 50);
  m.sender->start();
  m.p.sched.run_until(from_seconds(10));
  const auto d0 = m.sender->counters().delivered;
  const auto r0 = m.receiver->counters().accepted;
  m.p.sched.run_until(from_seconds(70));
  const double rate = static_cast<double>(m.sender->counters().delivered - d0) / 60.0;
  const double rrate = static_cast<double>(m.receiver->counters().accepted - r0) / 60.0;
  const double wall = since(t0);
  return {rate >= kMultipathMinRate && rrate >= kMultipathMinRate && wall < kMultipathWallSeconds,
          cat("matched keys/s sender=", rate, " receiver=", rrate, " (>=16), wall ", wall, " s (<5)")};
}

Outcome single_path_secrecy() {
  border::MultipathConfig c;
  c.block_size = 100;
  c.limit = kSecrecyTrials;
  c.min_block_interval = from_ms(1);
  Multipath m(c, 5, 5);
  // The oracle reads every space block and holds the space secrets.
  std::map<KeyId, std::uint8_t> guess;
  const auto& space_pub = m.rkeys.senders.at(m.p.a)[0];
  m.sender->set_tap([&](PathTag path, ByteView block) {
    if (path != PathTag::space) return;
    Reader r(block);
    r.u8();
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto pkg = deserialize<KeyPackage>(r.bytes());
      auto opened = crypto::open_package(suites(), pkg, {space_pub}, {m.rkeys.space_kem});
      if (opened.status == crypto::OpenStatus::ok) guess[pkg.rnd_id] = opened.payload->bytes()[0];
    }
  });
  m.sender->start();
  m.p.sched.run_until(from_seconds(600));
  std::size_t trials = 0, hits = 0;
  for (const auto& [id, g] : guess) {
    auto key = m.p.kb.find(id, "multipath");
    if (!key) continue;
    ++trials;
    hits += key->key.bytes()[0] == g;
  }
  const double n = static_cast<double>(trials), p0 = 1.0 / 256;
  const double bound = n * p0 + kSecrecySigmas * std::sqrt(n * p0 * (1 - p0));
  return {trials == kSecrecyTrials && static_cast<double>(hits) <= bound,
          cat("trials=", trials, " hits=", hits, " bound=", bound, " (n/256 + 3 sigma)")};
}

// ---------------------------------------------------------------- 3

Outcome label_tables() {
  using namespace seclevel;
  auto e = [](Base b, std::set<std::string> sc) { return SecurityExpr(SecurityLabel(b, std::move(sc))); };
  auto a = [](Base b, std::set<std::string> sc) { return SecurityLabel(b, std::move(sc)); };
  const auto I = Base::ITS, M = Base::MC;
  int ok = 0;
  ok += parallel(e(I, {"s1", "c"}), e(I, {"s2", "c"})) == e(I, {"c"});
  ok += parallel(e(M, {"s1"}), e(M, {"s2"})) == e(M, {});
  ok += parallel(e(I, {"s1", "c"}), e(M, {"s2", "c"})) ==
        SecurityExpr::from_atoms({a(I, {"s1", "c"}), a(M, {"c"})});
  ok += parallel(SecurityExpr(label_with_pqc_auth(a(I, {"s1", "c"}))),
                 SecurityExpr(label_with_pqc_auth(a(I, {"s2", "c"})))) == e(M, {"c"});
  ok += serial(e(M, {"s1"}), e(I, {"s2"})) == e(M, {"s1", "s2"});
  ok += serial(e(I, {"s1"}), e(I, {"s2"})) == e(I, {"s1", "s2"});
  return {ok == 6, cat(ok, "/6 rows (4 parallel, 2 serial)")};
}

// ---------------------------------------------------------------- 4, 8

scenario::Report testbeds_run(std::string* trace_hash) {
  scenario::Deployment d(scenario::DeploymentConfig::load(g_configs + "three_testbeds.json"));
  d.run(scenario::Script::load(g_configs + "scripts/all_pairs.json"));
  auto rep = d.report();
  if (trace_hash) *trace_hash = d.network().trace_hash();
  return rep;
}

std::optional<scenario::Report> g_first;

Outcome four_methods() {
  const auto t0 = std::chrono::steady_clock::now();
  auto rep = testbeds_run(nullptr);
  const double wall = since(t0);
  std::size_t ok = 0, match = 0, leaks = 0;
  for (const auto& r : rep.requests) {
    ok += r.ok;
    match += r.key_match;
    leaks += r.leaks.size();
  }
  std::set<int> methods;
  for (const auto& m : rep.methods)
    if (m.counters.delivered > 0) methods.insert(m.method);
  g_first = rep;
  const std::size_t pairs = 11 * 10 / 2;
  return {rep.requests.size() == pairs && ok == pairs && match == pairs && leaks == 0 &&
              methods.size() == 4 && wall < kScenarioWallSeconds,
          cat(ok, "/", pairs, " pairs delivered, ", match, " keys equal, ", leaks,
              " intermediate copies, methods active=", methods.size(), ", wall ", wall, " s (<10)")};
}

Outcome determinism() {
  if (!g_first) return {false, "criterion 4 did not run"};
  auto again = testbeds_run(nullptr);
  const bool same = again.to_json().dump() == g_first->to_json().dump();
  return {same && again.trace_hash == g_first->trace_hash,
          cat("reports identical=", same, ", trace ", again.trace_hash.substr(0, 16), "...")};
}

// ---------------------------------------------------------------- 6

struct Tally {
  std::size_t tried = 0, counted = 0, stored = 0;
  void add(bool counter_moved, bool store_grew) {
    ++tried;
    counted += counter_moved;
    stored += store_grew;
  }
};

// Flips each octet of a wire package two ways.
template <class Deliver>
void corrupt_all(const Bytes& wire, std::size_t from, Deliver deliver) {
  for (std::size_t i = from; i < wire.size(); ++i)
    for (std::uint8_t mask : {std::uint8_t{0x01}, std::uint8_t{0xff}}) {
      auto bad = wire;
      bad[i] ^= mask;
      deliver(bad);
    }
}

void corrupt_method2(Tally& t) {
  // Both feeds of the bridge, each with its own suites.
  for (auto [kem, sig] : {std::pair{"kem-a", "sig-a"}, std::pair{"kem-b", "sig-b"}}) {
    Pair p(2);
    DeterministicRng cred(3);
    auto k = border::make_kem_keys(suites(), kem, cred);
    auto s = border::make_sig_keys(suites(), sig, cred);
    qkd_emu::LinkConfig cfg;
    cfg.link = {LinkId(LinkId::Raw{2}), p.a, p.b, LinkType::PQC, 256, 32};
    cfg.kem_suite = kem;
    cfg.sig_suite = sig;
    cfg.supplier_id = "feed";
    p.ka.register_supplier({"feed", p.b, 256, 32});
    p.kb.register_supplier({"feed", p.a, 256, 32});
    auto [out, tap] = p.net.open_channel({"out", 1, 0, 0, 0}, p.a, p.b);
    auto [in_peer, in] = p.net.open_channel({"in", 1, 0, 0, 0}, p.a, p.b);
    Bytes wire;
    tap.on_receive([&](const Message& m) { if (wire.empty()) wire = m.payload; });
    qkd_emu::LinkSession init(p.sched, suites(), p.ka, out, qkd_emu::Role::initiator, cfg,
                              {k.pub, {}, s.sec, {}}, DeterministicRng(4));
    qkd_emu::LinkSession resp(p.sched, suites(), p.kb, in, qkd_emu::Role::responder, cfg,
                              {{}, k.sec, {}, s.pub}, DeterministicRng(5));
    init.emit_key();
    p.sched.run_for(from_ms(10));
    corrupt_all(wire, 1, [&](const Bytes& bad) {
      const auto before = resp.counters().dos;
      resp.on_message(bad);
      t.add(resp.counters().dos == before + 1, p.kb.size() != 0);
    });
  }
}

void corrupt_method3(Tally& t) {
  Pair p(3);
  border::AppConfig cfg;
  cfg.supplier_id = "app";
  DeterministicRng cred(4);
  std::vector<crypto::KemPublicKey> kp;
  std::vector<crypto::KemSecretKey> ks;
  std::vector<crypto::SigPublicKey> sp;
  std::vector<crypto::SigSecretKey> ss;
  for (const auto& s : cfg.kem_suites) {
    auto k = border::make_kem_keys(suites(), s, cred);
    kp.push_back(k.pub);
    ks.push_back(k.sec);
  }
  for (const auto& s : cfg.sig_suites) {
    auto k = border::make_sig_keys(suites(), s, cred);
    sp.push_back(k.pub);
    ss.push_back(k.sec);
  }
  auto [ea, eb] = p.net.open_channel({"app", 5, 0, 0, 0}, p.a, p.b);
  p.ka.register_supplier({"app", p.b, 256, 32});
  p.kb.register_supplier({"app", p.a, 256, 32});
  border::AppSender sender(p.sched, suites(), p.ka, ea, cfg, kp, ss, DeterministicRng(5));
  border::AppReceiver receiver(p.sched, suites(), p.kb, eb, cfg, ks, {{p.a, sp}});
  sender.emit_key();
  p.net.kill("app");
  const auto wire = sender.last_wire();
  corrupt_all(wire, 0, [&](const Bytes& bad) {
    const auto before = receiver.counters();
    receiver.on_message({p.a, p.b, "app", bad});
    const auto after = receiver.counters();
    t.add(after.dos + after.integrity_alarms + after.unknown_sender >
              before.dos + before.integrity_alarms + before.unknown_sender,
          p.kb.size() != 0);
  });
}

void corrupt_method4(Tally& t) {
  border::MultipathConfig c;
  c.block_size = 1;
  c.limit = 1;
  Multipath m(c, 5, 5);
  std::vector<std::pair<PathTag, Bytes>> wire;
  m.sender->set_tap([&](PathTag path, ByteView b) { wire.emplace_back(path, Bytes(b.begin(), b.end())); });
  m.p.net.kill("space");
  m.p.net.kill("ground");
  m.sender->start();
  m.p.sched.run_until(from_ms(10));
  for (const auto& [path, bytes] : wire)
    corrupt_all(bytes, 0, [&](const Bytes& bad) {
      const auto before = m.receiver->counters();
      m.receiver->on_block(path, {m.p.a, m.p.b, "x", bad});
      const auto after = m.receiver->counters();
      t.add(after.dos + after.unknown_sender > before.dos + before.unknown_sender &&
                m.receiver->queue().size() == 0,
            m.p.kb.size() != 0);
    });
}

Outcome dos_not_injection() {
  Tally t2, t3, t4;
  corrupt_method2(t2);
  corrupt_method3(t3);
  corrupt_method4(t4);
  const auto tried = t2.tried + t3.tried + t4.tried;
  const auto counted = t2.counted + t3.counted + t4.counted;
  const auto stored = t2.stored + t3.stored + t4.stored;
  return {tried > 0 && t2.tried && t3.tried && t4.tried && counted == tried && stored == 0,
          cat(tried, " corruptions (m2 ", t2.tried, ", m3 ", t3.tried, ", m4 ", t4.tried, "), ",
              counted, " counted, ", stored, " stored")};
}

// ---------------------------------------------------------------- 7

Outcome pad_discipline() {
  using namespace forwarding;
  Scheduler sched;
  Network net(sched, 11);
  DeterministicRng rng(12);
  Topology topo;
  constexpr int kNodes = 9;
  std::vector<NodeId> nodes;
  std::map<NodeId, std::unique_ptr<kms::Kms>> stores;
  for (int i = 0; i < kNodes; ++i) {
    nodes.push_back({"mesh", "n" + std::to_string(i)});
    stores[nodes.back()] =
        std::make_unique<kms::Kms>(nodes.back(), [&sched] { return unix_seconds(sched.now()); });
  }
  // Ring plus chords, every link preloaded with pads.
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < kNodes; ++i) edges.emplace_back(i, (i + 1) % kNodes);
  for (int i = 0; i < kNodes; i += 2) edges.emplace_back(i, (i + 4) % kNodes);
  std::map<LinkId, std::pair<Endpoint, Endpoint>> channels;
  std::set<std::string> pad_suppliers;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& a = nodes[edges[e].first];
    const auto& b = nodes[edges[e].second];
    LinkId::Raw raw{};
    raw[15] = static_cast<std::uint8_t>(e + 1);
    LinkDescriptor d{LinkId(raw), a, b, LinkType::QKD, 256, 32};
    topo.add_link(d);
    const auto sup = d.link_id.to_string();
    pad_suppliers.insert(sup);
    stores[a]->register_supplier({sup, b, 256, 32});
    stores[b]->register_supplier({sup, a, 256, 32});
    for (int k = 0; k < 700; ++k) {
      KeyEntry entry{KeyId::random(rng), KeyMaterial::random(rng, 32), b, sup,
                     {kEpochSeconds, kEpochSeconds + 86400}, seclevel::SecurityExpr(seclevel::SecurityLabel{seclevel::Base::ITS, {}})};
      stores[a]->push_key(sup, entry);
      entry.peer = a;
      stores[b]->push_key(sup, entry);
    }
    const double latency = 1 + rng.uniform01() * 20;
    channels[d.link_id] = net.open_channel({"c" + std::to_string(e), latency, 0, 0, 0}, a, b);
  }
  Controller ctl("mesh-ctl", {"mesh"}, topo);
  auto usable = [&](const RoutedLink& l, const NodeId& from) {
    return stores.at(from)->available(l.pad_supplier, l.link.other(from), 32, kms::Ownership::split) > 0;
  };
  std::map<NodeId, std::unique_ptr<RelayAgent>> agents;
  for (const auto& n : nodes)
    agents[n] = std::make_unique<RelayAgent>(sched, *stores.at(n), ctl, topo, RelayConfig{},
                                             rng.fork(n.to_string()), usable);
  for (auto& [lid, eps] : channels) {
    agents.at(eps.first.local())->attach(lid, eps.first.lane(1));
    agents.at(eps.second.local())->attach(lid, eps.second.lane(1));
  }

  std::vector<E2eResult> results;
  for (std::size_t i = 0; i < kRelayTrials; ++i) {
    const auto s = static_cast<std::size_t>(rng.next_u64() % kNodes);
    auto d = static_cast<std::size_t>(rng.next_u64() % (kNodes - 1));
    if (d >= s) ++d;
    sched.at(from_ms(20.0 * static_cast<double>(i)), [&, s, d] {
      agents.at(nodes[s])->request(nodes[d], 32, [&](const E2eResult& r) { results.push_back(r); });
    });
  }
  sched.run_until(from_seconds(20.0 * kRelayTrials / 1000 + 200));

  std::size_t ok = 0, completed_hops = 0;
  std::uint64_t unwrapped = 0, wrapped = 0;
  for (const auto& r : results)
    if (r.ok) {
      ++ok;
      completed_hops += r.hops.size() - 1;
    }
  for (const auto& [n, a] : agents) {
    unwrapped += a->counters().pads_unwrapped;
    wrapped += a->counters().pads_wrapped;
  }
  // Ledger audit: consumption per (store, supplier, key) at most once; a pad
  // consumed by a hop slave was consumed by the hop master too.
  std::size_t reuse = 0, slave_events = 0, master_events = 0, orphan_slave = 0;
  std::map<std::pair<std::string, KeyId>, int> masters;
  for (const auto& [n, s] : stores) {
    std::set<std::pair<std::string, KeyId>> seen;
    for (const auto& ev : s->ledger()) {
      if (!pad_suppliers.count(ev.supplier_id)) continue;
      if (!seen.insert({ev.supplier_id, ev.key_id}).second) ++reuse;
      if (ev.via == "014") {
        ++master_events;
        ++masters[{ev.supplier_id, ev.key_id}];
      }
    }
  }
  std::size_t replay_accepted = 0;
  for (const auto& [n, s] : stores)
    for (const auto& ev : s->ledger()) {
      if (!pad_suppliers.count(ev.supplier_id) || ev.via != "014-ids") continue;
      ++slave_events;
      if (!masters.count({ev.supplier_id, ev.key_id})) ++orphan_slave;
      try {
        s->get_key_with_ids(n, ev.peer, {ev.key_id}, ev.supplier_id);
        ++replay_accepted;
      } catch (const kms::KmsError&) {
      }
    }
  for (const auto& [id, count] : masters) reuse += count > 1;
  // Aborted relays may have completed some hops before failing.
  const bool all_ok = ok == results.size();
  const bool consistent = slave_events == unwrapped && master_events == wrapped &&
                          (all_ok ? completed_hops == unwrapped : completed_hops <= unwrapped) &&
                          orphan_slave == 0;
  return {results.size() == kRelayTrials && ok > kRelayTrials * 9 / 10 && consistent && reuse == 0 &&
              replay_accepted == 0,
          cat(ok, "/", results.size(), " relays ok, hops completed=", unwrapped, " (ok relays ",
              completed_hops, "), pads consumed as master=", master_events, " slave=", slave_events,
              ", reuse=", reuse, ", replays accepted=", replay_accepted)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) g_configs = std::string(argv[1]) + "/";
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"qos rate reproduction", qos_rate},
      {"multipath throughput", multipath_rate},
      {"label algebra tables", label_tables},
      {"four-method e2e scenario", four_methods},
      {"single-path secrecy", single_path_secrecy},
      {"dos, not injection", dos_not_injection},
      {"pad discipline", pad_discipline},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  "
              << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failures;
}
