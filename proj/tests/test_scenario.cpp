#include <gtest/gtest.h>

#include <fstream>

#include "qkdnet/scenario.hpp"
#include "support.hpp"

using namespace qkdnet;
using namespace qkdnet::scenario;

namespace {

const std::string kConfigs = QKDNET_SOURCE_DIR "/configs/";

Json testbeds() {
  std::ifstream in(kConfigs + "three_testbeds.json");
  return Json::parse(in);
}

// Two nodes per domain, one border pair of each requested method.
Json small(int method) {
  Json j = {{"seed", 5},
            {"domains", {{"x", {"a", "gw"}}, {"y", {"gw", "b"}}}},
            {"channels",
             {{{"id", "xa"}, {"a", "x/a"}, {"b", "x/gw"}},
              {{"id", "yb"}, {"a", "y/gw"}, {"b", "y/b"}},
              {{"id", "bx"}, {"a", "x/gw"}, {"b", "y/gw"}, {"latency_ms", 10}},
              {{"id", "by"}, {"a", "x/gw"}, {"b", "y/gw"}, {"latency_ms", 80}}}},
            {"links",
             {{{"name", "la"}, {"channel", "xa"}}, {{"name", "lb"}, {"channel", "yb"}}}}};
  if (method == 3)
    j["borders"] = {{{"name", "bridge"}, {"method", 3}, {"channel", "bx"}}};
  else if (method == 4)
    j["borders"] = {{{"name", "bridge"},
                     {"method", 4},
                     {"ground_channel", "bx"},
                     {"space_channel", "by"},
                     {"min_block_interval_ms", 1000}}};
  else
    j["borders"] = {{{"name", "bridge"}, {"method", 2}, {"channel", "bx"}}};
  return j;
}

std::string error_field(const Json& j) {
  try {
    DeploymentConfig::from_json(j).validate(crypto::SuiteRegistry::with_test_suites());
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

Script one_request(const std::string& from, const std::string& to, double at = 40,
                   double duration = 80) {
  return Script::from_json({{"duration_s", duration},
                            {"actions", {{{"at_s", at}, {"action", "request"}, {"from", from},
                                          {"to", to}}}}});
}

}  // namespace

TEST(LinkIds, UuidOrHashedName) {
  const std::string uuid = "00112233-4455-6677-8899-aabbccddeeff";
  EXPECT_EQ(link_id_for(uuid).to_string(), uuid);
  auto d = crypto::sha256(ByteView(reinterpret_cast<const std::uint8_t*>("quevedo"), 7));
  EXPECT_EQ(link_id_for("quevedo").raw()[0], d[0]);
  EXPECT_EQ(link_id_for("quevedo").raw()[15], d[15]);
  EXPECT_NE(link_id_for("a"), link_id_for("b"));
}

TEST(Config, TestbedsValidate) {
  auto cfg = DeploymentConfig::from_json(testbeds());
  EXPECT_NO_THROW(cfg.validate(crypto::SuiteRegistry::with_test_suites()));
  EXPECT_EQ(cfg.nodes().size(), 11u);
  // The merged controller plus one for each remaining domain.
  EXPECT_EQ(cfg.controllers.size(), 4u);
}

TEST(Config, ErrorsNameTheOffendingField) {
  auto j = testbeds();
  j["borders"][2]["channel"] = "nowhere";
  EXPECT_EQ(error_field(j), "borders[2].channel");

  j = testbeds();
  j["channels"][0]["a"] = "redimadrid/ghost";
  EXPECT_EQ(error_field(j), "channels[0].a");

  j = testbeds();
  j["links"][3].erase("channel");
  EXPECT_EQ(error_field(j), "links[3].channel");

  j = testbeds();
  j["links"][1]["colour"] = "blue";
  EXPECT_EQ(error_field(j), "links[1].colour");

  j = testbeds();
  j["borders"][1]["kem_b"] = "kem-a";
  EXPECT_EQ(error_field(j).rfind("borders[1].", 0), 0u);

  j = testbeds();
  j["borders"][4]["block_size"] = 500;
  EXPECT_EQ(error_field(j).rfind("borders[4].", 0), 0u);

  j = testbeds();
  j["borders"][4]["psk"] = "missing";
  EXPECT_EQ(error_field(j), "borders[4].psk");

  j = testbeds();
  j["borders"][0]["inputs"][1] = "norte-distrito";
  EXPECT_EQ(error_field(j), "borders[0].inputs[1]");

  j = testbeds();
  j["borders"][0]["method"] = 7;
  EXPECT_EQ(error_field(j), "borders[0].method");

  // Two users of one channel.
  j = testbeds();
  j["links"][4]["channel"] = "tf-norte-distrito";
  EXPECT_EQ(error_field(j), "links[4].channel");

  j = testbeds();
  j["links"][0]["kem"] = "kem-z";
  EXPECT_EQ(error_field(j), "links[0].kem");
}

TEST(Script, RejectsBadActions) {
  auto bad = [](Json j) {
    try {
      Script::from_json(j);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string();
  };
  EXPECT_EQ(bad({{"actions", {{{"at_s", 1}, {"action", "explode"}}}}}), "actions[0].action");
  EXPECT_EQ(bad({{"duration_s", 10}, {"actions", {{{"at_s", 11}, {"action", "drain"}}}}}),
            "actions[0].at_s");
  EXPECT_EQ(bad({{"actions", {{{"at_s", 1}, {"action", "request"}, {"from", "nodomain"}}}}}),
            "actions[0].from");

  Deployment d(DeploymentConfig::from_json(small(3)));
  EXPECT_THROW(d.run(one_request("x/a", "z/q")), ConfigError);
}

TEST(Run, EmptyScriptMovesNoKeysButLinksGenerate) {
  Deployment d(DeploymentConfig::from_json(small(3)));
  d.run(Script::empty(60));
  auto rep = d.report();
  EXPECT_TRUE(rep.requests.empty());
  for (const auto& n : d.config().nodes())
    for (const auto& row : d.listing(n)) EXPECT_NE(row.supplier_id.rfind("e2e:", 0), 0u);
  ASSERT_EQ(rep.links.size(), 2u);
  for (const auto& l : rep.links) {
    EXPECT_NEAR(l.rate_bps_b, 256.0, 256.0 * 0.1) << l.name;
    EXPECT_TRUE(l.streams_equal);
    EXPECT_EQ(l.label, "ITS \\ {}");
  }
  ASSERT_EQ(rep.methods.size(), 1u);
  EXPECT_GT(rep.methods[0].counters.delivered, 40u);
  EXPECT_TRUE(rep.methods[0].reconciles());
  EXPECT_TRUE(rep.success());
}

TEST(Run, EachMethodCarriesACrossDomainRequest) {
  for (int method : {2, 3, 4}) {
    Deployment d(DeploymentConfig::from_json(small(method)));
    d.run(one_request("x/a", "y/b"));
    auto rep = d.report();
    ASSERT_EQ(rep.requests.size(), 1u);
    const auto& r = rep.requests[0];
    EXPECT_TRUE(r.ok) << method << ": " << r.error;
    EXPECT_TRUE(r.key_match);
    EXPECT_TRUE(r.leaks.empty());
    EXPECT_EQ(r.hops, (std::vector<std::string>{"x/a", "x/gw", "y/gw", "y/b"}));
    // ITS links in series with an MC bridge.
    EXPECT_EQ(r.label.rfind("MC", 0), 0u) << r.label;
    EXPECT_TRUE(rep.methods[0].reconciles());
  }
}

TEST(Inspect, ListingsShareOnlyTheEndpointsKey) {
  Deployment d(DeploymentConfig::from_json(small(3)));
  d.run(one_request("x/a", "y/b"));
  auto rep = d.report();
  ASSERT_TRUE(rep.requests.at(0).ok);
  const auto id = rep.requests[0].key_id;
  auto e2e_ids = [&](const std::string& node) {
    std::set<std::string> out;
    for (const auto& row : d.listing(NodeId::parse(node)))
      if (row.supplier_id.rfind("e2e:", 0) == 0) out.insert(row.key_id.to_string());
    return out;
  };
  EXPECT_EQ(e2e_ids("x/a"), std::set<std::string>{id});
  EXPECT_EQ(e2e_ids("y/b"), std::set<std::string>{id});
  EXPECT_TRUE(e2e_ids("x/gw").empty());
  EXPECT_TRUE(e2e_ids("y/gw").empty());
  EXPECT_THROW(d.listing(NodeId::parse("x/nobody")), ConfigError);
}

TEST(Run, DeadBorderNamesTheFailedSegment) {
  // The only border channel dies before the request: routing inside x still
  // works, but the border hop cannot be completed.
  auto s = Script::from_json({{"duration_s", 100},
                              {"actions",
                               {{{"at_s", 30}, {"action", "kill"}, {"channel", "bx"}},
                                {{"at_s", 40}, {"action", "request"}, {"from", "x/a"}, {"to", "y/b"}}}}});
  Deployment d(DeploymentConfig::from_json(small(3)));
  d.run(s);
  auto rep = d.report();
  ASSERT_EQ(rep.requests.size(), 1u);
  EXPECT_FALSE(rep.requests[0].ok);
  EXPECT_FALSE(rep.requests[0].failed_segment.empty());
  EXPECT_FALSE(rep.success());
  EXPECT_TRUE(rep.methods[0].reconciles());
}

TEST(Run, OutageScriptReconciles) {
  Deployment d(DeploymentConfig::from_json(testbeds()));
  d.run(Script::load(kConfigs + "scripts/outage.json"));
  auto rep = d.report();
  for (const auto& m : rep.methods) {
    EXPECT_TRUE(m.reconciles()) << m.name;
    // Receivers never store more than senders confirm plus what is in flight.
    EXPECT_LE(m.counters.accepted, m.counters.delivered + m.pending) << m.name;
  }
  for (const auto& r : rep.requests) EXPECT_TRUE(r.ok) << r.from << " -> " << r.to << ": " << r.error;
}

TEST(Run, AllPairsAcrossThreeTestbeds) {
  Deployment d(DeploymentConfig::from_json(testbeds()));
  d.run(Script::load(kConfigs + "scripts/all_pairs.json"));
  auto rep = d.report();
  ASSERT_EQ(rep.requests.size(), 55u);
  for (const auto& r : rep.requests) {
    EXPECT_TRUE(r.ok) << r.from << " -> " << r.to << ": " << r.error << " [" << r.failed_segment << "]";
    EXPECT_TRUE(r.key_match) << r.from << " -> " << r.to;
    EXPECT_TRUE(r.leaks.empty()) << r.from << " -> " << r.to;
  }
  std::set<int> methods;
  for (const auto& m : rep.methods) {
    methods.insert(m.method);
    EXPECT_TRUE(m.reconciles()) << m.name;
    EXPECT_GT(m.counters.delivered, 0u) << m.name;
  }
  EXPECT_EQ(methods, (std::set<int>{1, 2, 3, 4}));
  EXPECT_TRUE(rep.success());
}

TEST(Run, SameSeedSameReport) {
  auto once = [](std::optional<std::uint64_t> seed) {
    RunOptions o;
    o.seed = seed;
    Deployment d(DeploymentConfig::from_json(small(4)), o);
    d.run(one_request("x/a", "y/b"));
    return d.report().to_json();
  };
  auto a = once(std::nullopt), b = once(std::nullopt), c = once(99);
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_NE(a["trace_hash"], c["trace_hash"]);
  EXPECT_EQ(c["seed"], 99);
}
