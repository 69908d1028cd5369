#include <gtest/gtest.h>

#include "qkdnet/qkd_emu.hpp"
#include "support.hpp"

using namespace qkdnet;
using namespace qkdnet::netsim;
using namespace qkdnet::qkd_emu;

namespace {

const crypto::SuiteRegistry& registry() {
  static const auto r = crypto::SuiteRegistry::with_test_suites();
  return r;
}

struct Rig {
  Scheduler sched;
  Network net{sched, 11};
  NodeId a = test::node("madrid", "distrito"), b = test::node("munich", "meera");
  kms::Kms ka{a, [this] { return unix_seconds(sched.now()); }};
  kms::Kms kb{b, [this] { return unix_seconds(sched.now()); }};
  LinkPair link;
  LinkConfig cfg;

  explicit Rig(LinkType type = LinkType::PQC, double latency_ms = 50, std::uint64_t rate = 256) {
    DeterministicRng rng(5);
    cfg.link = {LinkId::random(rng), a, b, type, rate, 32};
    cfg.side_channels = {"impl"};
    auto [ea, eb] = net.open_channel({"long-haul", latency_ms, 5, 0, 0.1}, a, b);
    link = start_link(sched, registry(), ka, kb, ea, eb, cfg, rng);
  }
  const std::string& supplier() const { return link.initiator->supplier_id(); }

  // Every id on one side is on the other with equal bytes.
  void expect_matching() const {
    for (const auto& row : ka.listing()) {
      auto mine = ka.find(row.key_id, row.supplier_id);
      auto theirs = kb.find(row.key_id, row.supplier_id);
      ASSERT_TRUE(theirs) << row.key_id.to_string();
      EXPECT_EQ(mine->key, theirs->key);
    }
    EXPECT_EQ(ka.size(), kb.size());
  }
};

}  // namespace

TEST(QkdEmu, PeriodArithmetic) {
  Rig r;
  EXPECT_EQ(r.link.initiator->emission_period(), from_seconds(1.0));
  Rig fast(LinkType::PQC, 50, 4096);
  EXPECT_EQ(fast.link.initiator->emission_period(), from_ms(62.5));
}

TEST(QkdEmu, SixtySecondsYieldsSixtyKeys) {
  Rig r;
  r.sched.run_until(from_seconds(60));
  for (auto* store : {&r.ka, &r.kb}) {
    auto n = store->available(r.supplier(), store == &r.ka ? r.b : r.a);
    EXPECT_GE(n, 54u);
    EXPECT_LE(n, 66u);
  }
  r.link.initiator->drain();
  r.sched.run_for(from_seconds(2));
  r.expect_matching();
}

TEST(QkdEmu, RateConformanceAfterWarmup) {
  Rig r;
  for (int s = 6; s <= 600; ++s) {
    r.sched.run_until(from_seconds(s));
    double rate = static_cast<double>(r.link.initiator->produced_count()) * 8 * 32 / s;
    ASSERT_LE(rate, 1.1 * 256) << "at " << s << " s";
  }
  // Any 60 s window after warm-up is within 10%.
  Rig w;
  w.sched.run_until(from_seconds(5));
  for (int win = 0; win < 5; ++win) {
    auto before = w.link.initiator->produced_count();
    w.sched.run_for(from_seconds(60));
    double rate = static_cast<double>(w.link.initiator->produced_count() - before) * 8 * 32 / 60.0;
    EXPECT_NEAR(rate, 256.0, 25.6);
  }
}

TEST(QkdEmu, LabelsByLinkType) {
  Rig q(LinkType::QKD);
  Rig p(LinkType::PQC);
  q.sched.run_until(from_seconds(3));
  p.sched.run_until(from_seconds(3));
  ASSERT_FALSE(q.kb.listing().empty());
  EXPECT_EQ(q.kb.listing()[0].label, "ITS \\ {impl}");
  EXPECT_EQ(p.kb.listing()[0].label, "MC \\ {impl}");
}

TEST(QkdEmu, RejectsRawLink) {
  Scheduler s;
  Network net(s, 1);
  DeterministicRng rng(1);
  auto a = test::node("x", "a"), b = test::node("x", "b");
  kms::Kms ka(a, [] { return kEpochSeconds; }), kb(b, [] { return kEpochSeconds; });
  auto [ea, eb] = net.open_channel({"c", 1, 0, 0, 0}, a, b);
  LinkConfig cfg;
  cfg.link = {LinkId::random(rng), a, b, LinkType::RAW, 256, 32};
  EXPECT_THROW(start_link(s, registry(), ka, kb, ea, eb, cfg, rng), ValidationError);
}

TEST(QkdEmu, KillHealNeverDiverges) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rig r;
    DeterministicRng chaos(seed);
    SimTime t = 0;
    for (int k = 0; k < 4; ++k) {
      t += from_seconds(1 + chaos.uniform01() * 20);
      r.sched.run_until(t);
      r.net.kill("long-haul");
      t += from_seconds(chaos.uniform01() * 30);
      r.sched.run_until(t);
      r.net.heal("long-haul");
    }
    r.sched.run_for(from_seconds(60));
    r.link.initiator->drain();
    r.sched.run_for(from_seconds(60));
    r.expect_matching();
    EXPECT_EQ(r.link.initiator->counters().discarded, 0u);
    EXPECT_EQ(r.link.initiator->counters().dos, 0u) << "seed " << seed;
    EXPECT_EQ(r.link.responder->counters().dos, 0u) << "seed " << seed;
    EXPECT_GT(r.link.initiator->counters().send_failures, 0u);
  }
}

TEST(QkdEmu, BackoffWhileChannelDown) {
  Rig r;
  r.sched.run_until(from_seconds(3));
  r.net.kill("long-haul");
  std::vector<SimTime> gaps;
  SimTime prev = r.link.initiator->next_emit_time();
  for (int i = 0; i < 9; ++i) {
    r.sched.run_until(prev);
    auto next = r.link.initiator->next_emit_time();
    gaps.push_back(next - prev);
    prev = next;
  }
  EXPECT_EQ(gaps[0], from_seconds(1));
  EXPECT_EQ(gaps[1], from_seconds(2));
  EXPECT_EQ(gaps[2], from_seconds(4));
  EXPECT_EQ(gaps.back(), kBackoffCap);
}

TEST(QkdEmu, TamperedPackagesNeverStored) {
  Rig r;
  // Capture the first package the initiator sends by reusing its sealing path.
  DeterministicRng rng(77);
  auto& suites = registry();
  auto kem = suites.kem(r.cfg.kem_suite).keygen(rng);
  auto sig = suites.signer(r.cfg.sig_suite).keygen(rng);
  Scheduler s;
  Network net(s, 3);
  kms::Kms store(r.b, [] { return kEpochSeconds; });
  store.register_supplier({"emu", r.a, 256, 32});
  auto [ea, eb] = net.open_channel({"c", 1, 0, 0, 0}, r.a, r.b);
  auto cfg = r.cfg;
  cfg.supplier_id = "emu";
  LinkSession resp(s, suites, store, eb, Role::responder, cfg,
                   {{}, {cfg.kem_suite, kem.secret_key}, {}, {cfg.sig_suite, sig.public_key}}, rng);
  int acks = 0;
  ea.on_receive([&](const Message&) { ++acks; });
  PackageMeta meta{r.a, {kEpochSeconds, kEpochSeconds + 100}, PathTag::single};
  auto key = KeyMaterial::random(rng, 32);
  auto pkg = crypto::seal_package(suites, rng, KeyId::random(rng), key,
                                  {{cfg.kem_suite, kem.public_key}}, meta,
                                  {{cfg.sig_suite, sig.secret_key}});
  Bytes wire{1};
  auto body = serialize(pkg);
  wire.insert(wire.end(), body.begin(), body.end());
  for (std::size_t i = 1; i < wire.size(); ++i) {
    auto bad = wire;
    bad[i] ^= 0x5a;
    resp.on_message(bad);
  }
  s.run_for(from_seconds(1));
  EXPECT_EQ(store.size(), 0u);
  EXPECT_EQ(resp.counters().dos, wire.size() - 1);
  EXPECT_EQ(acks, 0);
  // The genuine package is accepted once; a replay is not stored again.
  resp.on_message(wire);
  resp.on_message(wire);
  s.run_for(from_seconds(1));
  EXPECT_EQ(store.size(), 1u);
  EXPECT_EQ(store.find(pkg.rnd_id, "emu")->key, key);
  EXPECT_EQ(resp.counters().replays, 1u);
}

TEST(QkdEmu, UnacknowledgedPackagesDiscarded) {
  Rig r;
  r.sched.run_until(from_seconds(10));
  // Drop everything that reaches the responder from now on.
  r.link.responder.reset();
  r.sched.run_for(from_seconds(120));
  EXPECT_GT(r.link.initiator->counters().discarded, 0u);
  EXPECT_LT(r.link.initiator->pending(), 30u);
}
