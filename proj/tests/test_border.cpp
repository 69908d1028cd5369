#include <gtest/gtest.h>

#include <cmath>

#include "qkdnet/border.hpp"
#include "support.hpp"

using namespace qkdnet;
using namespace qkdnet::netsim;
using namespace qkdnet::border;

namespace {

const crypto::SuiteRegistry& registry() {
  static const auto r = crypto::SuiteRegistry::with_test_suites();
  return r;
}

struct Pair {
  Scheduler sched;
  Network net{sched, 21};
  DeterministicRng rng{99};
  NodeId a = test::node("madrid", "quevedo"), b = test::node("telefonica", "norte");
  kms::Kms ka{a, [this] { return unix_seconds(sched.now()); }};
  kms::Kms kb{b, [this] { return unix_seconds(sched.now()); }};

  std::pair<Endpoint, Endpoint> channel(const std::string& id, double latency_ms = 10) {
    return net.open_channel({id, latency_ms, 0, 0, 0}, a, b);
  }

  qkd_emu::LinkPair emulated(const std::string& supplier, const std::set<std::string>& sc,
                             std::uint8_t n) {
    auto [ea, eb] = channel("qkd-" + supplier, 2);
    qkd_emu::LinkConfig cfg;
    LinkId::Raw raw{};
    raw[0] = n;
    cfg.link = {LinkId(raw), a, b, LinkType::QKD, 256, 32};
    cfg.supplier_id = supplier;
    cfg.side_channels = sc;
    return qkd_emu::start_link(sched, registry(), ka, kb, ea.lane(0), eb.lane(0), cfg,
                               rng.fork(supplier));
  }

  void preload(const std::string& supplier, std::size_t n) {
    if (!ka.has_supplier(supplier)) {
      ka.register_supplier({supplier, b, 256, 32});
      kb.register_supplier({supplier, a, 256, 32});
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto e = test::make_entry(rng, b, supplier);
      ka.push_key(supplier, e);
      e.peer = a;
      kb.push_key(supplier, e);
    }
  }

  // Every bridge key at one end exists at the other with equal bytes.
  std::size_t expect_consistent(const std::string& supplier) {
    std::size_t n = 0;
    for (const auto& row : ka.listing()) {
      if (row.supplier_id != supplier) continue;
      auto theirs = kb.find(row.key_id, supplier);
      EXPECT_TRUE(theirs) << row.key_id.to_string();
      if (theirs) {
        EXPECT_EQ(theirs->key, ka.find(row.key_id, supplier)->key);
      }
      ++n;
    }
    std::size_t m = 0;
    for (const auto& row : kb.listing())
      if (row.supplier_id == supplier) ++m;
    EXPECT_EQ(n, m);
    return n;
  }
};

HybridConfig hybrid(std::vector<std::string> inputs) {
  HybridConfig c;
  c.supplier_id = "bridge";
  c.inputs = std::move(inputs);
  return c;
}

}  // namespace

// ---------------------------------------------------------------- Method 1

TEST(Method1, BridgeRateFollowsSlowestInput) {
  Pair p;
  auto l1 = p.emulated("qkd1", {"s1"}, 1);
  auto l2 = p.emulated("qkd2", {"s2"}, 2);
  auto [ea, eb] = p.channel("border");
  auto bridge = method1_bridge(p.sched, p.ka, p.kb, ea, eb, hybrid({"qkd1", "qkd2"}));
  p.sched.run_until(from_seconds(60));
  auto n = p.kb.available("bridge", p.a);
  EXPECT_GE(n, 54u);
  EXPECT_LE(n, 62u);
  bridge->stop();
  l1.initiator->drain();
  l2.initiator->drain();
  p.sched.run_for(from_seconds(2));
  EXPECT_EQ(p.expect_consistent("bridge"), bridge->counters().delivered);
  EXPECT_EQ(bridge->counters().lost, 0u);
}

TEST(Method1, StarvedInputStallsBridge) {
  Pair p;
  p.preload("qkd1", 20);
  p.preload("qkd2", 0);
  auto [ea, eb] = p.channel("border");
  auto bridge = method1_bridge(p.sched, p.ka, p.kb, ea, eb, hybrid({"qkd1", "qkd2"}));
  p.sched.run_until(from_seconds(30));
  EXPECT_EQ(bridge->counters().sent, 0u);
  EXPECT_EQ(p.ka.available("bridge", p.b), 0u);
  // Input keys are untouched: no fallback to a single supplier.
  EXPECT_EQ(p.ka.available("qkd1", p.b), 20u);
}

TEST(Method1, LabelIsParallelComposition) {
  Pair p;
  auto l1 = p.emulated("qkd1", {"c", "s1"}, 1);
  auto l2 = p.emulated("qkd2", {"c", "s2"}, 2);
  auto [ea, eb] = p.channel("border");
  auto bridge = method1_bridge(p.sched, p.ka, p.kb, ea, eb, hybrid({"qkd1", "qkd2"}));
  p.sched.run_until(from_seconds(10));
  ASSERT_TRUE(bridge->label());
  EXPECT_EQ(*bridge->label(), test::its({"c"}));
  EXPECT_EQ(bridge->label()->to_string(), "ITS \\ {c}");
}

TEST(Method1, KillDuringConfirmationConverges) {
  Pair p;
  p.preload("qkd1", 30);
  p.preload("qkd2", 30);
  auto [ea, eb] = p.channel("border", 50);
  auto bridge = method1_bridge(p.sched, p.ka, p.kb, ea, eb, hybrid({"qkd1", "qkd2"}));
  // Offers go out at 100 ms; acknowledgments are in flight around 150 ms.
  p.sched.run_until(from_ms(160));
  p.net.kill("border");
  p.sched.run_for(from_seconds(3));
  p.net.heal("border");
  p.sched.run_for(from_seconds(30));
  auto c = bridge->counters();
  EXPECT_EQ(c.sent, 30u);
  EXPECT_EQ(c.delivered, 30u);
  EXPECT_GT(c.retransmits + c.replays, 0u);
  EXPECT_EQ(p.expect_consistent("bridge"), 30u);
}

TEST(Method1, SlaveWaitsForInputsInFlight) {
  Pair p;
  p.preload("qkd1", 5);
  p.preload("qkd2", 5);
  // One extra pair exists only at the master for now.
  std::vector<KeyEntry> late;
  for (const auto* s : {"qkd1", "qkd2"}) {
    auto e = test::make_entry(p.rng, p.b, s);
    e.key_id = KeyId(KeyId::Raw{});  // lowest id: chosen first
    p.ka.push_key(s, e);
    e.peer = p.a;
    late.push_back(e);
  }
  auto [ea, eb] = p.channel("border");
  auto bridge = method1_bridge(p.sched, p.ka, p.kb, ea, eb, hybrid({"qkd1", "qkd2"}));
  p.sched.run_until(from_seconds(1));
  for (const auto& e : late) p.kb.push_key(e.supplier_id, e);
  p.sched.run_for(from_seconds(5));
  EXPECT_EQ(bridge->counters().delivered, 6u);
  EXPECT_EQ(p.expect_consistent("bridge"), 6u);
}

TEST(Method1, MissingInputsAtPeerAreNeverHalfStored) {
  Pair p;
  p.preload("qkd1", 2);
  p.preload("qkd2", 2);
  auto e = test::make_entry(p.rng, p.b, "qkd1");
  e.key_id = KeyId(KeyId::Raw{});
  p.ka.push_key("qkd1", e);  // never reaches the peer
  auto [ea, eb] = p.channel("border");
  auto bridge = method1_bridge(p.sched, p.ka, p.kb, ea, eb, hybrid({"qkd1", "qkd2"}));
  p.sched.run_until(from_seconds(20));
  auto c = bridge->counters();
  EXPECT_EQ(c.lost, 1u);
  EXPECT_EQ(c.delivered, 1u);  // the second pair still works
  EXPECT_EQ(p.expect_consistent("bridge"), 1u);
}

TEST(Method1, RejectsBadConfig) {
  EXPECT_THROW(hybrid({"x"}).validate(), ValidationError);
  EXPECT_THROW(hybrid({"x", "x"}).validate(), ValidationError);
  EXPECT_THROW(hybrid({"bridge", "x"}).validate(), ValidationError);
}

// ---------------------------------------------------------------- Method 2

namespace {
EmulatedPairConfig emulated_pair(const Pair& p) {
  EmulatedPairConfig c;
  c.supplier_id = "long-haul";
  c.link = {LinkId(LinkId::Raw{9}), p.a, p.b, LinkType::PQC, 256, 32};
  c.side_channels_a = {"impl", "kyber"};
  c.side_channels_b = {"impl", "ntru"};
  return c;
}
}  // namespace

TEST(Method2, TwoSuitesAt256BpsGiveOneKeyPerSecond) {
  Pair p;
  auto [ea, eb] = p.net.open_channel({"long-haul", 30, 5, 0, 0.05}, p.a, p.b);
  auto bridge = method2_bridge(p.sched, registry(), p.ka, p.kb, ea, eb, emulated_pair(p), p.rng);
  p.sched.run_until(from_seconds(60));
  auto n = p.ka.available("long-haul", p.b);
  EXPECT_GE(n, 54u);
  EXPECT_LE(n, 62u);
  ASSERT_TRUE(bridge->label());
  EXPECT_EQ(*bridge->label(), test::mc({"impl"}));
  bridge->stop();
  p.sched.run_for(from_seconds(2));
  EXPECT_EQ(p.expect_consistent("long-haul"), bridge->counters().delivered);
  // Both feeds used their own suites.
  EXPECT_EQ(bridge->feeds()[0].initiator->config().kem_suite, "kem-a");
  EXPECT_EQ(bridge->feeds()[1].initiator->config().kem_suite, "kem-b");
}

TEST(Method2, SameSuiteTwiceIsRejected) {
  Pair p;
  auto c = emulated_pair(p);
  c.kem_b = "kem-a";
  EXPECT_THROW(c.validate(registry()), ValidationError);
  c = emulated_pair(p);
  c.sig_b = "sig-a";
  EXPECT_THROW(c.validate(registry()), ValidationError);
  c = emulated_pair(p);
  c.link.link_type = LinkType::QKD;
  EXPECT_THROW(c.validate(registry()), ValidationError);
}

// ---------------------------------------------------------------- Method 3

namespace {

struct AppRig {
  Pair p;
  AppConfig cfg;
  std::vector<crypto::KemPublicKey> kem_pub;
  std::vector<crypto::KemSecretKey> kem_sec;
  std::vector<crypto::SigPublicKey> sig_pub;
  std::vector<crypto::SigSecretKey> sig_sec;
  std::pair<Endpoint, Endpoint> ch;
  std::unique_ptr<AppSender> sender;
  std::unique_ptr<AppReceiver> receiver;

  explicit AppRig(crypto::HybridMode mode = crypto::HybridMode::cross_check) {
    cfg.supplier_id = "app";
    cfg.mode = mode;
    cfg.side_channels = {"impl"};
    DeterministicRng cred(4);
    for (const auto& s : cfg.kem_suites) {
      auto k = make_kem_keys(registry(), s, cred);
      kem_pub.push_back(k.pub);
      kem_sec.push_back(k.sec);
    }
    for (const auto& s : cfg.sig_suites) {
      auto k = make_sig_keys(registry(), s, cred);
      sig_pub.push_back(k.pub);
      sig_sec.push_back(k.sec);
    }
    ch = p.channel("app", 40);
    p.ka.register_supplier({"app", p.b, 256, 32});
    p.kb.register_supplier({"app", p.a, 256, 32});
    sender = std::make_unique<AppSender>(p.sched, registry(), p.ka, ch.first, cfg, kem_pub, sig_sec,
                                         p.rng.fork("s"));
    receiver = std::make_unique<AppReceiver>(p.sched, registry(), p.kb, ch.second, cfg, kem_sec,
                                             SenderRegistry{{p.a, sig_pub}});
  }

  // A package that was built but never delivered.
  Bytes undelivered_wire() {
    sender->emit_key();
    p.net.kill("app");  // drops it in flight
    p.net.heal("app");
    return sender->last_wire();
  }
  Message from(const NodeId& n, Bytes payload) { return {n, p.b, "app", std::move(payload)}; }
};

}  // namespace

TEST(Method3, HappyPathBothStoresShareKeys) {
  for (auto mode : {crypto::HybridMode::cross_check, crypto::HybridMode::xor_combined}) {
    AppRig r(mode);
    r.sender->start();
    r.p.sched.run_until(from_seconds(60));
    r.sender->stop();
    r.p.sched.run_for(from_seconds(1));
    auto c = r.sender->counters();
    EXPECT_EQ(c.sent, 60u);
    EXPECT_EQ(c.delivered, 60u);
    EXPECT_EQ(r.p.expect_consistent("app"), 60u);
    EXPECT_EQ(r.p.kb.find(r.p.kb.listing().front().key_id, "app")->label, test::mc({"impl"}));
  }
}

TEST(Method3, EveryCorruptedByteIsRejected) {
  AppRig r;
  auto wire = r.undelivered_wire();
  std::uint64_t rejected = 0;
  for (std::size_t i = 0; i < wire.size(); ++i) {
    auto bad = wire;
    bad[i] ^= 0x5a;
    r.receiver->on_message(r.from(r.p.a, bad));
    auto c = r.receiver->counters();
    ASSERT_EQ(c.accepted, 0u) << "byte " << i;
    ASSERT_EQ(c.dos, ++rejected) << "byte " << i;
  }
  EXPECT_EQ(r.p.kb.size(), 0u);
  r.receiver->on_message(r.from(r.p.a, wire));
  EXPECT_EQ(r.receiver->counters().accepted, 1u);
  // Replaying the accepted package adds nothing.
  r.receiver->on_message(r.from(r.p.a, wire));
  EXPECT_EQ(r.receiver->counters().replays, 1u);
  EXPECT_EQ(r.p.kb.size(), 1u);
}

TEST(Method3, UnknownSenderIsDropped) {
  AppRig r;
  auto wire = r.undelivered_wire();
  r.receiver->on_message(r.from(test::node("evil", "mallory"), wire));
  EXPECT_EQ(r.receiver->counters().unknown_sender, 1u);
  EXPECT_EQ(r.p.kb.size(), 0u);
}

TEST(Method3, SuiteDisagreementRaisesAlarm) {
  AppRig r;
  // Same RNDID, validly signed, but each suite carries a different payload.
  DeterministicRng rng(8);
  const auto id = KeyId::random(rng);
  PackageMeta meta{r.p.a, {kEpochSeconds, kEpochSeconds + 100}, PathTag::single};
  auto one = crypto::seal_package(registry(), rng, id, KeyMaterial::random(rng, 32), r.kem_pub,
                                  meta, r.sig_sec);
  auto two = crypto::seal_package(registry(), rng, id, KeyMaterial::random(rng, 32), r.kem_pub,
                                  meta, r.sig_sec);
  one.ciphertexts[1] = two.ciphertexts[1];
  for (std::size_t i = 0; i < one.signatures.size(); ++i)
    one.signatures[i].signature =
        registry().signer(r.sig_sec[i].suite).sign(r.sig_sec[i].key, one.body_bytes());
  Bytes wire{1};
  auto body = serialize(one);
  wire.insert(wire.end(), body.begin(), body.end());
  r.receiver->on_message(r.from(r.p.a, wire));
  EXPECT_EQ(r.receiver->counters().integrity_alarms, 1u);
  EXPECT_EQ(r.receiver->counters().dos, 1u);
  EXPECT_EQ(r.p.kb.size(), 0u);
}

TEST(Method3, ChannelLossIsRecoveredByRetransmission) {
  AppRig r;
  r.sender->start();
  r.p.sched.run_until(from_seconds(10));
  r.p.net.kill("app");
  r.p.sched.run_for(from_seconds(10));
  r.p.net.heal("app");
  r.p.sched.run_for(from_seconds(10));
  r.sender->stop();
  r.p.sched.run_for(from_seconds(30));
  auto c = r.sender->counters();
  EXPECT_EQ(c.sent, c.delivered + c.lost + r.sender->pending());
  EXPECT_EQ(r.sender->pending(), 0u);
  EXPECT_EQ(r.p.expect_consistent("app"), c.delivered);
}

TEST(Method3, FactoryWiresCredentials) {
  Pair p;
  auto [ea, eb] = p.channel("m3");
  AppConfig cfg;
  cfg.supplier_id = "m3";
  auto bridge = method3_bridge(p.sched, registry(), p.ka, p.kb, ea, eb, cfg, p.rng);
  p.sched.run_until(from_seconds(20));
  EXPECT_GE(bridge->counters().delivered, 18u);
  EXPECT_EQ(bridge->counters().dos, 0u);
  cfg.kem_suites = {"kem-a", "kem-a"};
  EXPECT_THROW(cfg.validate(registry()), ValidationError);
}

// ---------------------------------------------------------------- Method 4

TEST(MatchQueue, MatchesReplaysAndPurges) {
  MatchQueue q(from_seconds(30));
  DeterministicRng rng(1);
  auto id = KeyId::random(rng);
  auto k1 = KeyMaterial::random(rng, 32), k2 = KeyMaterial::random(rng, 32);
  Validity v{0, 100};
  EXPECT_EQ(q.offer(id, PathTag::space, k1, v, 0), MatchQueue::Offer::queued);
  EXPECT_EQ(q.offer(id, PathTag::space, k1, v, 1), MatchQueue::Offer::replay);
  EXPECT_FALSE(q.take(id));
  EXPECT_EQ(q.offer(id, PathTag::ground, k2, v, 2), MatchQueue::Offer::matched);
  auto pair = q.take(id);
  ASSERT_TRUE(pair);
  EXPECT_EQ(pair->space, k1);
  EXPECT_EQ(pair->ground, k2);
  EXPECT_EQ(q.size(), 0u);

  auto lone = KeyId::random(rng);
  q.offer(lone, PathTag::ground, k2, v, from_seconds(1));
  EXPECT_EQ(q.purge(from_seconds(30)), 0u);
  EXPECT_EQ(q.purge(from_seconds(31)), 1u);
  EXPECT_EQ(q.size(), 0u);
}

namespace {

struct MultipathRig {
  Pair p;
  MultipathConfig cfg;
  MultipathSenderKeys skeys;
  MultipathReceiverKeys rkeys;
  std::pair<Endpoint, Endpoint> space, ground;
  std::unique_ptr<MultipathSender> sender;
  std::unique_ptr<MultipathReceiver> receiver;

  explicit MultipathRig(MultipathConfig c = {}, double space_ms = 600, double ground_ms = 50)
      : cfg(std::move(c)) {
    if (cfg.supplier_id.empty()) cfg.supplier_id = "multipath";
    DeterministicRng cred(6);
    auto sk = make_kem_keys(registry(), cfg.space_kem, cred);
    auto gk = make_kem_keys(registry(), cfg.ground_kem, cred);
    auto ss = make_sig_keys(registry(), cfg.space_sig, cred);
    auto gs = make_sig_keys(registry(), cfg.ground_sig, cred);
    skeys = {sk.pub, gk.pub, ss.sec, gs.sec};
    rkeys = {sk.sec, gk.sec, SenderRegistry{{p.a, {ss.pub, gs.pub}}}};
    space = p.net.open_channel({"space", space_ms, 0, 0, 0}, p.a, p.b);
    ground = p.net.open_channel({"ground", ground_ms, 0, 0, 0}, p.a, p.b);
    p.ka.register_supplier({cfg.supplier_id, p.b, 256, 32});
    p.kb.register_supplier({cfg.supplier_id, p.a, 256, 32});
    sender = std::make_unique<MultipathSender>(p.sched, registry(), p.ka, space.first, ground.first,
                                               cfg, skeys, p.rng.fork("mp"));
    receiver = std::make_unique<MultipathReceiver>(p.sched, registry(), p.kb, space.second,
                                                   ground.second, cfg, rkeys);
  }

  // Opens every package of a block message with the given path's secrets.
  std::map<KeyId, KeyMaterial> open_block(PathTag path, ByteView block) const {
    std::map<KeyId, KeyMaterial> out;
    Reader r(block);
    r.u8();
    auto n = r.u32();
    const bool s = path == PathTag::space;
    for (std::uint32_t i = 0; i < n; ++i) {
      auto pkg = deserialize<KeyPackage>(r.bytes());
      auto opened = crypto::open_package(registry(), pkg,
                                         {rkeys.senders.at(p.a)[s ? 0 : 1]},
                                         {s ? rkeys.space_kem : rkeys.ground_kem});
      EXPECT_EQ(opened.status, crypto::OpenStatus::ok);
      out.emplace(pkg.rnd_id, *opened.payload);
    }
    return out;
  }

  Counters total() const {
    auto c = sender->counters();
    c += receiver->counters();
    return c;
  }
};

}  // namespace

TEST(Method4, XorKdfWithoutPskIsXorOfHalves) {
  MultipathConfig c;
  c.block_size = 10;
  c.limit = 30;
  MultipathRig r(c);
  std::map<KeyId, KeyMaterial> space, ground;
  r.sender->set_tap([&](PathTag path, ByteView block) {
    for (auto& [id, k] : r.open_block(path, block)) (path == PathTag::space ? space : ground).emplace(id, k);
  });
  r.sender->start();
  r.p.sched.run_until(from_seconds(10));
  ASSERT_EQ(space.size(), 30u);
  for (const auto& [id, rnd1] : space) {
    auto a = r.p.ka.find(id, "multipath");
    auto b = r.p.kb.find(id, "multipath");
    ASSERT_TRUE(a && b);
    EXPECT_EQ(a->key, b->key);
    std::vector<KeyMaterial> halves{rnd1, ground.at(id)};
    EXPECT_EQ(a->key, crypto::hybridize(halves));
  }
  EXPECT_EQ(r.p.expect_consistent("multipath"), 30u);
}

TEST(Method4, HmacKdfAndPskAgreeAtBothEnds) {
  MultipathConfig c;
  c.kdf = "hmac-sha256";
  c.psk = Bytes(16, 0x42);
  c.limit = 100;
  MultipathRig r(c);
  r.sender->start();
  r.p.sched.run_until(from_seconds(10));
  EXPECT_EQ(r.sender->counters().delivered, 100u);
  EXPECT_EQ(r.p.expect_consistent("multipath"), 100u);
}

TEST(Method4, SlowSpacePathStillMatches) {
  MultipathRig r;
  r.sender->start();
  r.p.sched.run_until(from_seconds(60));
  auto c = r.total();
  // Blocks of 50 complete every ~650 ms; far above 16 keys per second.
  EXPECT_GE(static_cast<double>(c.delivered) / 60.0, 16.0);
  EXPECT_EQ(c.dos + c.replays + c.expired, 0u);
  r.sender->stop();
  r.p.sched.run_for(from_seconds(5));
  EXPECT_EQ(r.p.expect_consistent("multipath"), r.sender->counters().delivered);
}

TEST(Method4, SeveredPathDeliversNothing) {
  for (const char* cut : {"ground", "space"}) {
    MultipathConfig c;
    c.limit = 200;
    MultipathRig r(c);
    r.p.net.kill(cut);
    r.sender->start();
    r.p.sched.run_until(from_seconds(400));
    auto s = r.sender->counters();
    EXPECT_EQ(s.sent, 200u);
    EXPECT_EQ(s.delivered, 0u);
    EXPECT_EQ(s.lost, s.sent);
    EXPECT_EQ(r.receiver->counters().expired, 200u);
    EXPECT_EQ(r.p.ka.size() + r.p.kb.size(), 0u);
  }
}

TEST(Method4, CountersReconcileThroughFaults) {
  MultipathConfig c;
  c.ttl = from_seconds(5);
  MultipathRig r(c);
  r.sender->start();
  for (int step = 0; step < 60; ++step) {
    r.p.sched.run_for(from_seconds(1));
    if (step == 10) r.p.net.kill("space");
    if (step == 20) r.p.net.heal("space");
    if (step == 30) r.p.net.kill("ground");
    if (step == 35) r.p.net.heal("ground");
    auto s = r.sender->counters();
    ASSERT_EQ(s.sent, s.delivered + s.lost + r.sender->pending()) << step;
  }
  r.sender->stop();
  r.p.sched.run_for(from_seconds(20));
  auto s = r.sender->counters();
  EXPECT_EQ(r.sender->pending(), 0u);
  EXPECT_GT(s.lost, 0u);
  EXPECT_GT(s.delivered, 0u);
  EXPECT_EQ(r.p.expect_consistent("multipath"), s.delivered);
}

TEST(Method4, ReplayedHalvesAreIgnored) {
  MultipathConfig c;
  c.block_size = 5;
  c.limit = 5;
  MultipathRig r(c);
  std::vector<std::pair<PathTag, Bytes>> wire;
  r.sender->set_tap([&](PathTag path, ByteView b) { wire.emplace_back(path, Bytes(b.begin(), b.end())); });
  r.sender->start();
  r.p.sched.run_until(from_seconds(5));
  ASSERT_EQ(r.p.kb.size(), 5u);
  for (const auto& [path, bytes] : wire)
    r.receiver->on_block(path, {r.p.a, r.p.b, "x", bytes});
  EXPECT_EQ(r.receiver->counters().replays, 10u);
  EXPECT_EQ(r.p.kb.size(), 5u);
  // A half replayed before its partner arrives is also caught.
  MultipathRig q(c, 600, 50);
  std::vector<std::pair<PathTag, Bytes>> w2;
  q.sender->set_tap([&](PathTag path, ByteView b) { w2.emplace_back(path, Bytes(b.begin(), b.end())); });
  q.sender->start();
  q.p.sched.run_until(from_ms(100));
  for (const auto& [path, bytes] : w2)
    if (path == PathTag::ground) q.receiver->on_block(path, {q.p.a, q.p.b, "x", bytes});
  EXPECT_EQ(q.receiver->counters().replays, 5u);
  q.p.sched.run_until(from_seconds(5));
  EXPECT_EQ(q.p.expect_consistent("multipath"), 5u);
}

TEST(Method4, EveryCorruptedByteIsRejected) {
  MultipathConfig c;
  c.block_size = 1;
  c.limit = 1;
  MultipathRig r(c);
  std::vector<std::pair<PathTag, Bytes>> wire;
  r.sender->set_tap([&](PathTag path, ByteView b) { wire.emplace_back(path, Bytes(b.begin(), b.end())); });
  r.p.net.kill("space");
  r.p.net.kill("ground");
  r.sender->start();
  r.p.sched.run_until(from_ms(10));
  ASSERT_EQ(wire.size(), 2u);
  std::uint64_t rejected = 0;
  for (const auto& [path, bytes] : wire)
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      auto bad = bytes;
      bad[i] ^= 0x01;
      r.receiver->on_block(path, {r.p.a, r.p.b, "x", bad});
      auto rc = r.receiver->counters();
      ASSERT_EQ(rc.dos + rc.unknown_sender, ++rejected) << to_string(path) << " byte " << i;
      ASSERT_EQ(r.receiver->queue().size(), 0u);
    }
  EXPECT_EQ(r.p.kb.size(), 0u);
}

TEST(Method4, OnePathRevealsNothingAboutKey) {
  // The oracle sees the space transcript and holds the space secrets; it
  // predicts byte 0 of KEY from RND1 alone.
  MultipathConfig c;
  c.block_size = 100;
  c.limit = 10'000;
  c.min_block_interval = from_ms(1);
  MultipathRig r(c, 5, 5);
  std::map<KeyId, KeyMaterial> space;
  r.sender->set_tap([&](PathTag path, ByteView block) {
    if (path == PathTag::space) space.merge(r.open_block(path, block));
  });
  r.sender->start();
  r.p.sched.run_until(from_seconds(60));
  ASSERT_EQ(r.sender->counters().delivered, 10'000u);
  std::size_t hits = 0;
  for (const auto& [id, rnd1] : space)
    if (r.p.kb.find(id, "multipath")->key.bytes()[0] == rnd1.bytes()[0]) ++hits;
  const double n = 10'000, p0 = 1.0 / 256;
  EXPECT_LE(hits, n * p0 + 3 * std::sqrt(n * p0 * (1 - p0)));
}

TEST(Method4, ConfigValidation) {
  MultipathConfig c;
  c.supplier_id = "m";
  EXPECT_NO_THROW(c.validate(registry()));
  auto bad = c;
  bad.ground_kem = bad.space_kem;
  EXPECT_THROW(bad.validate(registry()), ValidationError);
  bad = c;
  bad.block_size = 101;
  EXPECT_THROW(bad.validate(registry()), ValidationError);
  bad = c;
  bad.kdf = "md5";
  EXPECT_THROW(bad.validate(registry()), ValidationError);
  EXPECT_EQ(c.label(), test::mc());
}

TEST(Method4, FactoryRunsEndToEnd) {
  Pair p;
  auto [sa, sb] = p.net.open_channel({"space", 600, 0, 0, 0}, p.a, p.b);
  auto [ga, gb] = p.net.open_channel({"ground", 50, 0, 0, 0}, p.a, p.b);
  MultipathConfig c;
  c.supplier_id = "m4";
  auto bridge = method4_bridge(p.sched, registry(), p.ka, p.kb, sa, sb, ga, gb, c, p.rng);
  p.sched.run_until(from_seconds(10));
  EXPECT_GE(bridge->counters().delivered, 160u);
  EXPECT_EQ(bridge->counters().accepted, bridge->counters().delivered);
}
