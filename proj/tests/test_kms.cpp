#include <gtest/gtest.h>

#include <filesystem>

#include "qkdnet/kms_protocol.hpp"
#include "support.hpp"

using namespace qkdnet;
using namespace qkdnet::kms;
using test::node;

namespace {

struct Pair {
  std::int64_t now = netsim::kEpochSeconds;
  NodeId a = node("d", "a"), b = node("d", "b");
  Kms ka{a, [this] { return now; }};
  Kms kb{b, [this] { return now; }};
  DeterministicRng rng{99};

  Pair() {
    for (auto* s : {"qkd", "pqc"}) {
      ka.register_supplier({s, b, 256, 32});
      kb.register_supplier({s, a, 256, 32});
    }
  }
  KeyEntry both(const std::string& supplier, seclevel::SecurityExpr label = test::its()) {
    auto e = test::make_entry(rng, b, supplier);
    e.label = label;
    ka.push_key(supplier, e);
    auto mirror = e;
    mirror.peer = a;
    kb.push_key(supplier, mirror);
    return e;
  }
};

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const KmsError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no KmsError";
  return Errc::invalid_request;
}

}  // namespace

TEST(Kms, PushThenFetchByIds) {
  Pair p;
  auto e = p.both("qkd");
  auto got = p.kb.get_key_with_ids(p.b, p.a, {e.key_id});
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].key, e.key);
}

TEST(Kms, IdempotentPushAndConflictAlarm) {
  Pair p;
  auto e = test::make_entry(p.rng, p.b, "qkd");
  EXPECT_EQ(p.ka.push_key("qkd", e), PushResult::stored);
  EXPECT_EQ(p.ka.push_key("qkd", e), PushResult::duplicate);
  EXPECT_EQ(p.ka.size(), 1u);
  auto conflict = e;
  conflict.key = KeyMaterial::random(p.rng, 32);
  EXPECT_EQ(code_of([&] { p.ka.push_key("qkd", conflict); }), Errc::integrity_alarm);
  EXPECT_EQ(p.ka.integrity_alarms(), 1u);
  EXPECT_EQ(p.ka.find(e.key_id, "qkd")->key, e.key);
  // Same id under a different supplier is a different slot.
  auto other = e;
  other.supplier_id = "pqc";
  EXPECT_EQ(p.ka.push_key("pqc", other), PushResult::stored);
  EXPECT_EQ(code_of([&] { p.ka.push_key("nope", e); }), Errc::unknown_supplier);
}

TEST(Kms, SessionsDrainIdenticalSequences) {
  Pair p;
  for (int i = 0; i < 100; ++i) p.both("qkd");
  auto ksid = p.ka.open_connect(p.a, p.b, {256, 32, std::string("qkd")});
  auto slave = p.kb.open_connect(p.a, p.b, {256, 32, std::string("qkd")}, ksid);
  EXPECT_EQ(slave, ksid);
  for (int i = 0; i < 100; ++i) {
    auto x = p.ka.get_key(ksid);
    auto y = p.kb.get_key(ksid);
    ASSERT_EQ(x.key_id, y.key_id);
    ASSERT_EQ(x.key, y.key);
  }
  auto err = [&] {
    try {
      p.ka.get_key(ksid);
    } catch (const KmsError& e) {
      return e;
    }
    throw std::runtime_error("no error");
  }();
  EXPECT_EQ(err.code(), Errc::no_key_available);
  ASSERT_TRUE(err.retry_after_ms());
  EXPECT_EQ(*err.retry_after_ms(), 1000);
  p.ka.close(ksid);
  EXPECT_EQ(code_of([&] { p.ka.get_key(ksid); }), Errc::unknown_ksid);
  EXPECT_EQ(code_of([&] { p.ka.close(ksid); }), Errc::unknown_ksid);
}

TEST(Kms, QosRefusedAtOpen) {
  Pair p;
  EXPECT_EQ(code_of([&] { p.ka.open_connect(p.a, p.b, {512, 32, std::nullopt}); }),
            Errc::qos_unsatisfiable);
  EXPECT_EQ(code_of([&] { p.ka.open_connect(p.a, p.b, {256, 64, std::nullopt}); }),
            Errc::qos_unsatisfiable);
  EXPECT_EQ(code_of([&] { p.ka.open_connect(p.a, node("d", "z"), {256, 32, std::nullopt}); }),
            Errc::qos_unsatisfiable);
  EXPECT_EQ(code_of([&] { p.ka.open_connect(node("d", "y"), node("d", "z"), {}); }),
            Errc::invalid_request);
}

TEST(Kms, SessionPacedByOneKeyPerSecondSupply) {
  Pair p;
  auto ksid = p.ka.open_connect(p.a, p.b, {256, 32, std::string("qkd")});
  int ok = 0, refused = 0;
  for (int t = 0; t < 20; ++t) {
    p.both("qkd");  // the link adds one key per second
    p.now += 1;
    for (int tries = 0; tries < 3; ++tries) {
      try {
        p.ka.get_key(ksid);
        ++ok;
      } catch (const KmsError& e) {
        ASSERT_EQ(e.code(), Errc::no_key_available);
        ++refused;
      }
    }
  }
  EXPECT_EQ(ok, 20);
  EXPECT_EQ(refused, 40);
}

TEST(Kms, Master014SlaveByIds) {
  Pair p;
  for (int i = 0; i < 5; ++i) p.both("qkd");
  auto master = p.ka.get_key_014(p.a, p.b, 3, 32);
  ASSERT_EQ(master.size(), 3u);
  std::vector<KeyId> ids;
  for (auto& k : master) ids.push_back(k.key_id);
  auto slave = p.kb.get_key_with_ids(p.b, p.a, ids);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(slave[i].key, master[i].key);
  EXPECT_EQ(code_of([&] { p.kb.get_key_with_ids(p.b, p.a, {ids[0]}); }), Errc::already_consumed);
  EXPECT_EQ(code_of([&] { p.kb.get_key_with_ids(p.b, p.a, {KeyId::random(p.rng)}); }),
            Errc::unknown_key_id);
  EXPECT_EQ(code_of([&] { p.ka.get_key_014(p.a, p.b, 10, 32); }), Errc::no_key_available);
  // The failed request consumed nothing.
  EXPECT_EQ(p.ka.available("qkd", p.b), 2u);
  EXPECT_EQ(code_of([&] { p.ka.get_key_014(p.a, p.b, 0, 32); }), Errc::invalid_request);
  EXPECT_EQ(code_of([&] { p.ka.get_key_014(p.b, p.a, 1, 32); }), Errc::invalid_request);
}

TEST(Kms, SplitOwnershipDisjoint) {
  Pair p;
  for (int i = 0; i < 200; ++i) p.both("qkd");
  auto na = p.ka.available("qkd", p.b, 32, Ownership::split);
  auto nb = p.kb.available("qkd", p.a, 32, Ownership::split);
  EXPECT_EQ(na + nb, 200u);
  auto ka = p.ka.get_key_014(p.a, p.b, na, 32, std::string("qkd"), Ownership::split);
  auto kb = p.kb.get_key_014(p.b, p.a, nb, 32, std::string("qkd"), Ownership::split);
  std::set<KeyId> ids;
  for (auto& k : ka) ids.insert(k.key_id);
  for (auto& k : kb) EXPECT_FALSE(ids.count(k.key_id));
}

TEST(Kms, ExpiredKeysNeverServed) {
  Pair p;
  auto e = test::make_entry(p.rng, p.b, "qkd", 32, p.now, p.now + 10);
  p.ka.push_key("qkd", e);
  p.now += 11;  // one second after validity.end
  EXPECT_EQ(p.ka.available("qkd", p.b), 0u);
  EXPECT_EQ(code_of([&] { p.ka.get_key_014(p.a, p.b, 1, 32); }), Errc::no_key_available);
  EXPECT_EQ(code_of([&] { p.ka.get_key_with_ids(p.a, p.b, {e.key_id}); }), Errc::unknown_key_id);
  auto ksid = p.ka.open_connect(p.a, p.b, {256, 32, std::nullopt});
  EXPECT_EQ(code_of([&] { p.ka.get_key(ksid); }), Errc::no_key_available);
}

TEST(Kms, HybridizeStoresBothEndpointsAgree) {
  Pair p;
  for (int i = 0; i < 10; ++i) {
    p.both("qkd", test::its({"s1"}));
    p.both("pqc", test::mc({"s2"}));
  }
  for (int i = 0; i < 10; ++i) {
    auto x = p.ka.hybridize_stores(p.b, {"qkd", "pqc"}, {32});
    auto y = p.kb.hybridize_stores(p.a, {"pqc", "qkd"}, {32});
    EXPECT_EQ(x.key_id, y.key_id);
    EXPECT_EQ(x.key, y.key);
    EXPECT_EQ(x.supplier_id, "hybrid:pqc,qkd");
    EXPECT_EQ(x.label, seclevel::parallel(test::its({"s1"}), test::mc({"s2"})));
    EXPECT_EQ(x.label.atoms().size(), 2u);
  }
}

TEST(Kms, HybridizeAllOrNothing) {
  Pair p;
  p.both("qkd");
  EXPECT_EQ(code_of([&] { p.ka.hybridize_stores(p.b, {"qkd", "pqc"}, {32}); }),
            Errc::no_key_available);
  EXPECT_EQ(p.ka.available("qkd", p.b), 1u);
  EXPECT_EQ(code_of([&] { p.ka.hybridize_stores(p.b, {"qkd"}, {32}); }),
            Errc::insufficient_suppliers);
  EXPECT_EQ(code_of([&] { p.ka.hybridize_stores(p.b, {"qkd", "qkd"}, {32}); }),
            Errc::insufficient_suppliers);
  EXPECT_TRUE(p.ka.ledger().empty());
}

TEST(Kms, HybridizeWithIdsMatchesStores) {
  Pair p;
  for (int i = 0; i < 3; ++i) {
    p.both("qkd");
    p.both("pqc");
  }
  auto x = p.ka.hybridize_stores(p.b, {"qkd", "pqc"}, {32});
  auto ledger = p.ka.ledger();
  ASSERT_EQ(ledger.size(), 2u);
  std::vector<std::pair<std::string, KeyId>> inputs;
  for (auto& ev : ledger) inputs.emplace_back(ev.supplier_id, ev.key_id);
  auto y = p.kb.hybridize_with_ids(p.a, inputs);
  EXPECT_EQ(x.key_id, y.key_id);
  EXPECT_EQ(x.key, y.key);
  EXPECT_EQ(code_of([&] { p.kb.hybridize_with_ids(p.a, inputs); }), Errc::already_consumed);
}

TEST(Kms, HybridizeNeverMixesPeers) {
  Pair p;
  auto c = node("d", "c");
  p.ka.register_supplier({"other", c, 256, 32});
  p.both("qkd");
  p.ka.push_key("other", test::make_entry(p.rng, c, "other"));
  EXPECT_EQ(code_of([&] { p.ka.hybridize_stores(p.b, {"qkd", "other"}, {32}); }),
            Errc::invalid_request);
}

TEST(Kms, LedgerSingleUseAudit) {
  Pair p;
  for (int i = 0; i < 300; ++i) p.both(i % 2 ? "qkd" : "pqc");
  auto ksid = p.ka.open_connect(p.a, p.b, {256, 32, std::string("qkd")});
  std::set<std::pair<KeyId, std::string>> seen;
  for (int round = 0; round < 400; ++round) {
    try {
      switch (round % 3) {
        case 0: p.ka.get_key(ksid); break;
        case 1: p.ka.get_key_014(p.a, p.b, 2, 32); break;
        case 2: p.ka.hybridize_stores(p.b, {"qkd", "pqc"}, {32}); break;
      }
    } catch (const KmsError& e) {
      EXPECT_EQ(e.code(), Errc::no_key_available);
    }
  }
  for (const auto& ev : p.ka.ledger()) EXPECT_TRUE(seen.insert({ev.key_id, ev.supplier_id}).second);
  EXPECT_EQ(seen.size(), 300u);
}

TEST(Kms, PersistenceRecovers) {
  auto path = std::filesystem::temp_directory_path() / "qkdnet_kms_persist.bin";
  std::filesystem::remove(path);
  Pair p;
  p.ka.enable_persistence(path.string());
  std::vector<KeyEntry> es;
  for (int i = 0; i < 5; ++i) es.push_back(p.both("qkd"));
  p.ka.get_key_with_ids(p.a, p.b, {es[1].key_id, es[3].key_id});
  Kms back(p.a, [&] { return p.now; });
  back.recover(path.string());
  EXPECT_EQ(back.size(), 5u);
  EXPECT_TRUE(back.consumed(es[1].key_id, "qkd"));
  EXPECT_FALSE(back.consumed(es[0].key_id, "qkd"));
  EXPECT_EQ(back.find(es[4].key_id, "qkd")->key, es[4].key);
  std::filesystem::remove(path);
}

TEST(KmsProtocol, LoopbackMirrorsDirectCalls) {
  Pair p;
  KmsService sa(p.ka), sb(p.kb);
  auto ca = KmsClient::loopback(sa), cb = KmsClient::loopback(sb);
  auto e = test::make_entry(p.rng, p.b, "qkd");
  EXPECT_EQ(ca.push_key("qkd", e), PushResult::stored);
  EXPECT_EQ(ca.push_key("qkd", e), PushResult::duplicate);
  auto mirror = e;
  mirror.peer = p.a;
  cb.push_key("qkd", mirror);
  for (int i = 0; i < 4; ++i) p.both("qkd");
  auto ksid = ca.open_connect(p.a, p.b, {256, 32, std::string("qkd")});
  cb.open_connect(p.a, p.b, {256, 32, std::string("qkd")}, ksid);
  auto x = ca.get_key(ksid), y = cb.get_key(ksid);
  EXPECT_EQ(x.key_id, e.key_id);
  EXPECT_EQ(x.key, y.key);
  ca.close(ksid);
  try {
    ca.get_key(ksid);
    FAIL();
  } catch (const KmsError& err) {
    EXPECT_EQ(err.code(), Errc::unknown_ksid);
  }
  auto m = ca.get_key_014(p.a, p.b, 2, 32);
  auto s = cb.get_key_with_ids(p.b, p.a, {m[0].key_id, m[1].key_id});
  EXPECT_EQ(m[1].key, s[1].key);
  // Garbage requests come back as invalid_request, not exceptions.
  auto resp = sa.handle(Bytes{0x77, 1, 2});
  Reader r(resp);
  EXPECT_EQ(r.u8(), static_cast<std::uint8_t>(Errc::invalid_request));
}
