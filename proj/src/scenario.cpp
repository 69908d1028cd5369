#include "qkdnet/scenario.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace qkdnet::scenario {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError(path, what);
}

std::string join(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

std::string at_index(const std::string& base, std::size_t i) {
  return base + "[" + std::to_string(i) + "]";
}

// Re-raises an error from a nested validator under `prefix`.
[[noreturn]] void rethrow_under(const std::string& prefix, const ValidationError& e) {
  const std::string what = e.what();
  const auto skip = e.field().size() + 2;
  fail(join(prefix, e.field()), what.size() > skip ? what.substr(skip) : what);
}

void check_keys(const Json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) fail(path.empty() ? "$" : path, "expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      fail(join(path, key), "unknown field");
  }
}

template <class T>
T as(const Json& v, const std::string& path);

template <>
std::string as<std::string>(const Json& v, const std::string& path) {
  if (!v.is_string()) fail(path, "expected a string");
  return v.get<std::string>();
}

template <>
double as<double>(const Json& v, const std::string& path) {
  if (!v.is_number()) fail(path, "expected a number");
  return v.get<double>();
}

template <>
std::uint64_t as<std::uint64_t>(const Json& v, const std::string& path) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    fail(path, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

template <>
std::uint32_t as<std::uint32_t>(const Json& v, const std::string& path) {
  auto x = as<std::uint64_t>(v, path);
  if (x > 0xffffffffu) fail(path, "out of range");
  return static_cast<std::uint32_t>(x);
}

template <>
int as<int>(const Json& v, const std::string& path) {
  if (!v.is_number_integer()) fail(path, "expected an integer");
  return v.get<int>();
}

template <>
std::vector<std::string> as<std::vector<std::string>>(const Json& v, const std::string& path) {
  if (!v.is_array()) fail(path, "expected an array of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as<std::string>(v[i], at_index(path, i)));
  return out;
}

template <>
std::set<std::string> as<std::set<std::string>>(const Json& v, const std::string& path) {
  auto list = as<std::vector<std::string>>(v, path);
  return {list.begin(), list.end()};
}

template <>
NodeId as<NodeId>(const Json& v, const std::string& path) {
  auto text = as<std::string>(v, path);
  try {
    return NodeId::parse(text);
  } catch (const std::exception&) {
    fail(path, "expected \"domain/node\", got \"" + text + "\"");
  }
}

template <class T>
T need(const Json& obj, const std::string& key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(join(path, key), "missing");
  return as<T>(*it, join(path, key));
}

template <class T>
T opt(const Json& obj, const std::string& key, const std::string& path, T fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  return as<T>(*it, join(path, key));
}

Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("$", "cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    fail("$", std::string("not valid JSON: ") + e.what());
  }
}

ChannelConfig parse_channel(const Json& j, const std::string& path) {
  check_keys(j, path, {"id", "a", "b", "latency_ms", "jitter_ms", "bandwidth_bps", "loss"});
  ChannelConfig c;
  c.spec.channel_id = need<std::string>(j, "id", path);
  c.a = need<NodeId>(j, "a", path);
  c.b = need<NodeId>(j, "b", path);
  c.spec.latency_ms = opt<double>(j, "latency_ms", path, 1.0);
  c.spec.jitter_ms = opt<double>(j, "jitter_ms", path, 0.0);
  c.spec.bandwidth_bps = opt<std::uint64_t>(j, "bandwidth_bps", path, 0);
  c.spec.loss_before_retry = opt<double>(j, "loss", path, 0.0);
  return c;
}

LinkConfig parse_link(const Json& j, const std::string& path) {
  check_keys(j, path, {"name", "id", "channel", "type", "rate_bps", "key_len", "kem", "sig",
                       "side_channels"});
  LinkConfig l;
  l.name = need<std::string>(j, "name", path);
  l.id = link_id_for(opt<std::string>(j, "id", path, l.name));
  l.channel = need<std::string>(j, "channel", path);
  auto type = opt<std::string>(j, "type", path, "QKD");
  try {
    l.type = link_type_from_string(type);
  } catch (const std::exception&) {
    fail(join(path, "type"), "unknown link type " + type);
  }
  l.rate_bps = opt<std::uint64_t>(j, "rate_bps", path, 256);
  l.key_len = opt<std::uint32_t>(j, "key_len", path, kDefaultKeyLength);
  l.kem = opt<std::string>(j, "kem", path, l.kem);
  l.sig = opt<std::string>(j, "sig", path, l.sig);
  l.side_channels = opt<std::set<std::string>>(j, "side_channels", path, {});
  return l;
}

crypto::HybridMode parse_mode(const std::string& text, const std::string& path) {
  if (text == "cross_check") return crypto::HybridMode::cross_check;
  if (text == "xor_combined") return crypto::HybridMode::xor_combined;
  fail(path, "expected cross_check or xor_combined");
}

BorderConfig parse_border(const Json& j, const std::string& path) {
  BorderConfig b;
  b.method = need<int>(j, "method", path);
  b.name = need<std::string>(j, "name", path);
  b.id = link_id_for(b.name);
  switch (b.method) {
    case 1:
      check_keys(j, path, {"name", "method", "channel", "inputs", "key_len"});
      b.channel = need<std::string>(j, "channel", path);
      b.inputs = need<std::vector<std::string>>(j, "inputs", path);
      b.hybrid.supplier_id = b.name;
      b.hybrid.key_len = opt<std::uint32_t>(j, "key_len", path, kDefaultKeyLength);
      break;
    case 2: {
      check_keys(j, path, {"name", "method", "channel", "rate_bps", "key_len", "kem_a", "sig_a",
                           "kem_b", "sig_b", "side_channels_a", "side_channels_b"});
      b.channel = need<std::string>(j, "channel", path);
      auto& p = b.pair;
      p.supplier_id = b.name;
      p.link.link_id = b.id;
      p.link.link_type = LinkType::PQC;
      p.link.qos_rate_bps = opt<std::uint64_t>(j, "rate_bps", path, 256);
      p.link.qos_key_len = opt<std::uint32_t>(j, "key_len", path, kDefaultKeyLength);
      p.kem_a = opt<std::string>(j, "kem_a", path, p.kem_a);
      p.sig_a = opt<std::string>(j, "sig_a", path, p.sig_a);
      p.kem_b = opt<std::string>(j, "kem_b", path, p.kem_b);
      p.sig_b = opt<std::string>(j, "sig_b", path, p.sig_b);
      p.side_channels_a = opt<std::set<std::string>>(j, "side_channels_a", path, {});
      p.side_channels_b = opt<std::set<std::string>>(j, "side_channels_b", path, {});
      b.hybrid.supplier_id = b.name;
      b.hybrid.key_len = p.link.qos_key_len;
      break;
    }
    case 3: {
      check_keys(j, path, {"name", "method", "channel", "kem_suites", "sig_suites", "mode",
                           "rate_bps", "key_len", "side_channels"});
      b.channel = need<std::string>(j, "channel", path);
      auto& a = b.app;
      a.supplier_id = b.name;
      a.kem_suites = opt<std::vector<std::string>>(j, "kem_suites", path, a.kem_suites);
      a.sig_suites = opt<std::vector<std::string>>(j, "sig_suites", path, a.sig_suites);
      a.mode = parse_mode(opt<std::string>(j, "mode", path, "cross_check"), join(path, "mode"));
      a.rate_bps = opt<std::uint64_t>(j, "rate_bps", path, 256);
      a.key_len = opt<std::uint32_t>(j, "key_len", path, kDefaultKeyLength);
      a.side_channels = opt<std::set<std::string>>(j, "side_channels", path, {});
      break;
    }
    case 4: {
      check_keys(j, path, {"name", "method", "space_channel", "ground_channel", "space_kem",
                           "space_sig", "ground_kem", "ground_sig", "block_size", "key_len",
                           "ttl_s", "kdf", "psk", "max_blocks_in_flight", "min_block_interval_ms",
                           "limit", "space_side_channels", "ground_side_channels"});
      b.space_channel = need<std::string>(j, "space_channel", path);
      b.ground_channel = need<std::string>(j, "ground_channel", path);
      b.channel = b.ground_channel;
      auto& m = b.multipath;
      m.supplier_id = b.name;
      m.space_kem = opt<std::string>(j, "space_kem", path, m.space_kem);
      m.space_sig = opt<std::string>(j, "space_sig", path, m.space_sig);
      m.ground_kem = opt<std::string>(j, "ground_kem", path, m.ground_kem);
      m.ground_sig = opt<std::string>(j, "ground_sig", path, m.ground_sig);
      m.block_size = opt<std::uint32_t>(j, "block_size", path, m.block_size);
      m.key_len = opt<std::uint32_t>(j, "key_len", path, m.key_len);
      m.ttl = netsim::from_seconds(opt<double>(j, "ttl_s", path, 30));
      m.kdf = opt<std::string>(j, "kdf", path, m.kdf);
      m.max_blocks_in_flight = opt<std::uint32_t>(j, "max_blocks_in_flight", path, 1);
      m.min_block_interval = netsim::from_ms(opt<double>(j, "min_block_interval_ms", path, 100));
      m.limit = opt<std::uint64_t>(j, "limit", path, 0);
      m.space_side_channels = opt<std::set<std::string>>(j, "space_side_channels", path, {});
      m.ground_side_channels = opt<std::set<std::string>>(j, "ground_side_channels", path, {});
      if (j.contains("psk")) b.psk = need<std::string>(j, "psk", path);
      break;
    }
    default:
      fail(join(path, "method"), "must be 1, 2, 3 or 4");
  }
  return b;
}

std::uint32_t border_key_len(const BorderConfig& b) {
  switch (b.method) {
    case 1:
    case 2:
      return b.hybrid.key_len;
    case 3:
      return b.app.key_len;
    default:
      return b.multipath.key_len;
  }
}

std::uint64_t border_rate(const BorderConfig& b) {
  switch (b.method) {
    case 2:
      return b.pair.link.qos_rate_bps;
    case 3:
      return b.app.rate_bps;
    default:
      return 256;
  }
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

LinkId link_id_for(const std::string& name) {
  try {
    return LinkId::parse(name);
  } catch (const std::exception&) {
    auto d = crypto::sha256(ByteView(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()));
    LinkId::Raw raw{};
    std::copy_n(d.begin(), raw.size(), raw.begin());
    return LinkId(raw);
  }
}

// ------------------------------------------------------------------ config

DeploymentConfig DeploymentConfig::from_json(const Json& j) {
  check_keys(j, "", {"seed", "relay", "domains", "controllers", "channels", "links", "borders",
                     "psks"});
  DeploymentConfig c;
  c.seed = opt<std::uint64_t>(j, "seed", "", 1);

  if (j.contains("relay")) {
    const auto& r = j.at("relay");
    check_keys(r, "relay", {"key_len", "e2e_timeout_s", "slave_wait_s"});
    c.relay.key_len = opt<std::uint32_t>(r, "key_len", "relay", c.relay.key_len);
    c.relay.e2e_timeout_s = opt<double>(r, "e2e_timeout_s", "relay", c.relay.e2e_timeout_s);
    c.relay.slave_wait_s = opt<double>(r, "slave_wait_s", "relay", c.relay.slave_wait_s);
  }

  if (!j.contains("domains")) fail("domains", "missing");
  const auto& domains = j.at("domains");
  if (!domains.is_object() || domains.empty()) fail("domains", "expected a non-empty object");
  for (const auto& [name, nodes] : domains.items())
    c.domains[name] = as<std::vector<std::string>>(nodes, join("domains", name));

  std::set<std::string> claimed;
  if (j.contains("controllers")) {
    const auto& list = j.at("controllers");
    if (!list.is_array()) fail("controllers", "expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto path = at_index("controllers", i);
      check_keys(list[i], path, {"name", "domains"});
      ControllerConfig cc{need<std::string>(list[i], "name", path),
                          need<std::set<std::string>>(list[i], "domains", path)};
      for (const auto& d : cc.domains) {
        if (!c.domains.count(d)) fail(join(path, "domains"), "unknown domain " + d);
        if (!claimed.insert(d).second)
          fail(join(path, "domains"), "domain " + d + " already has a controller");
      }
      c.controllers.push_back(std::move(cc));
    }
  }
  for (const auto& [d, nodes] : c.domains)
    if (!claimed.count(d)) c.controllers.push_back({"ctl-" + d, {d}});

  auto array = [&](const char* key) -> const Json& {
    static const Json empty = Json::array();
    if (!j.contains(key)) return empty;
    if (!j.at(key).is_array()) fail(key, "expected an array");
    return j.at(key);
  };
  const auto& channels = array("channels");
  for (std::size_t i = 0; i < channels.size(); ++i) {
    auto ch = parse_channel(channels[i], at_index("channels", i));
    ch.index = i;
    if (c.channels.count(ch.spec.channel_id))
      fail(at_index("channels", i) + ".id", "duplicate channel " + ch.spec.channel_id);
    c.channels[ch.spec.channel_id] = ch;
  }
  const auto& links = array("links");
  for (std::size_t i = 0; i < links.size(); ++i)
    c.links.push_back(parse_link(links[i], at_index("links", i)));
  const auto& borders = array("borders");
  for (std::size_t i = 0; i < borders.size(); ++i)
    c.borders.push_back(parse_border(borders[i], at_index("borders", i)));

  if (j.contains("psks")) {
    const auto& psks = j.at("psks");
    if (!psks.is_object()) fail("psks", "expected an object");
    for (const auto& [name, hex] : psks.items()) {
      const auto path = join("psks", name);
      try {
        c.psks[name] = from_hex(as<std::string>(hex, path));
      } catch (const DecodeError&) {
        fail(path, "expected hex");
      }
    }
  }
  return c;
}

DeploymentConfig DeploymentConfig::load(const std::string& path) {
  return from_json(read_json(path));
}

std::vector<NodeId> DeploymentConfig::nodes() const {
  std::vector<NodeId> out;
  for (const auto& [d, names] : domains)
    for (const auto& n : names) out.push_back({d, n});
  std::sort(out.begin(), out.end());
  return out;
}

bool DeploymentConfig::has_node(const NodeId& n) const {
  auto it = domains.find(n.domain);
  return it != domains.end() &&
         std::find(it->second.begin(), it->second.end(), n.name) != it->second.end();
}

void DeploymentConfig::validate(const crypto::SuiteRegistry& suites) const {
  for (const auto& [d, names] : domains) {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto path = at_index(join("domains", d), i);
      try {
        NodeId{d, names[i]}.validate();
      } catch (const ValidationError& e) {
        rethrow_under(path, e);
      }
      if (!seen.insert(names[i]).second) fail(path, "duplicate node " + names[i]);
    }
  }

  std::map<std::string, std::string> owner;  // channel -> user
  for (const auto& [id, ch] : channels) {
    const auto path = at_index("channels", ch.index);
    try {
      ch.spec.validate();
    } catch (const ValidationError& e) {
      rethrow_under(path, e);
    }
    if (!has_node(ch.a)) fail(join(path, "a"), "undeclared node " + ch.a.to_string());
    if (!has_node(ch.b)) fail(join(path, "b"), "undeclared node " + ch.b.to_string());
    if (ch.a == ch.b) fail(join(path, "b"), "channel joins a node to itself");
  }
  auto claim = [&](const std::string& channel, const std::string& user, const std::string& path) {
    if (!channels.count(channel)) fail(path, "unknown channel " + channel);
    auto [it, fresh] = owner.emplace(channel, user);
    if (!fresh) fail(path, "channel " + channel + " already used by " + it->second);
    return channels.at(channel);
  };

  std::set<std::string> names;
  std::set<LinkId> ids;
  std::set<std::string> inputs;
  for (const auto& b : borders) inputs.insert(b.inputs.begin(), b.inputs.end());

  for (std::size_t i = 0; i < links.size(); ++i) {
    const auto& l = links[i];
    const auto path = at_index("links", i);
    if (!names.insert(l.name).second) fail(join(path, "name"), "duplicate name " + l.name);
    if (!ids.insert(l.id).second) fail(join(path, "id"), "duplicate link id");
    const auto ch = claim(l.channel, l.name, join(path, "channel"));
    if (l.type != LinkType::QKD && l.type != LinkType::PQC)
      fail(join(path, "type"), "only QKD and PQC links can be emulated");
    try {
      LinkDescriptor{l.id, ch.a, ch.b, l.type, l.rate_bps, l.key_len}.validate();
    } catch (const ValidationError& e) {
      rethrow_under(path, e);
    }
    if (!suites.has_kem(l.kem)) fail(join(path, "kem"), "unknown suite " + l.kem);
    if (!suites.has_signer(l.sig)) fail(join(path, "sig"), "unknown suite " + l.sig);
    if (!inputs.count(l.name) && l.key_len != relay.key_len)
      fail(join(path, "key_len"), "routed links must use the relay key length");
  }

  for (std::size_t i = 0; i < borders.size(); ++i) {
    const auto& b = borders[i];
    const auto path = at_index("borders", i);
    if (!names.insert(b.name).second) fail(join(path, "name"), "duplicate name " + b.name);
    if (!ids.insert(b.id).second) fail(join(path, "name"), "link id collides with another");
    const auto ch = claim(b.channel, b.name, join(path, b.method == 4 ? "ground_channel" : "channel"));
    if (ch.a.domain == ch.b.domain)
      fail(join(path, "channel"), "border channels must join two domains");
    if (border_key_len(b) != relay.key_len)
      fail(join(path, "key_len"), "border streams must use the relay key length");
    try {
      switch (b.method) {
        case 1: {
          if (b.inputs.size() < 2) fail(join(path, "inputs"), "needs two or more links");
          std::set<std::string> distinct(b.inputs.begin(), b.inputs.end());
          if (distinct.size() != b.inputs.size()) fail(join(path, "inputs"), "duplicate input");
          for (std::size_t k = 0; k < b.inputs.size(); ++k) {
            auto it = std::find_if(links.begin(), links.end(),
                                   [&](const LinkConfig& l) { return l.name == b.inputs[k]; });
            const auto ipath = at_index(join(path, "inputs"), k);
            if (it == links.end()) fail(ipath, "unknown link " + b.inputs[k]);
            const auto& lc = channels.at(it->channel);
            if (!((lc.a == ch.a && lc.b == ch.b) || (lc.a == ch.b && lc.b == ch.a)))
              fail(ipath, "input link does not join the border pair");
            if (it->key_len != b.hybrid.key_len)
              fail(ipath, "input key length differs from the bridge");
          }
          break;
        }
        case 2: {
          auto p = b.pair;
          p.link.endpoint_a = ch.a;
          p.link.endpoint_b = ch.b;
          p.validate(suites);
          break;
        }
        case 3:
          b.app.validate(suites);
          break;
        case 4: {
          const auto sp = claim(b.space_channel, b.name, join(path, "space_channel"));
          if (!((sp.a == ch.a && sp.b == ch.b) || (sp.a == ch.b && sp.b == ch.a)))
            fail(join(path, "space_channel"), "paths must join the same border pair");
          if (b.psk && !psks.count(*b.psk)) fail(join(path, "psk"), "unknown psk " + *b.psk);
          if (b.psk && psks.at(*b.psk).size() > 64) fail(join(path, "psk"), "longer than 64 octets");
          auto m = b.multipath;
          if (b.psk) m.psk = psks.at(*b.psk);
          m.validate(suites);
          break;
        }
      }
    } catch (const ConfigError& e) {
      if (e.field().rfind(path, 0) == 0) throw;
      rethrow_under(path, e);
    }
  }
}

// ------------------------------------------------------------------ script

Script Script::from_json(const Json& j) {
  check_keys(j, "", {"duration_s", "grace_s", "actions"});
  Script s;
  s.duration_s = opt<double>(j, "duration_s", "", 60);
  s.grace_s = opt<double>(j, "grace_s", "", 30);
  if (s.duration_s < 0) fail("duration_s", "must not be negative");
  if (s.grace_s < 0) fail("grace_s", "must not be negative");
  if (!j.contains("actions")) return s;
  const auto& list = j.at("actions");
  if (!list.is_array()) fail("actions", "expected an array");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto path = at_index("actions", i);
    const auto& a = list[i];
    check_keys(a, path, {"at_s", "action", "from", "to", "spacing_s", "channel", "target"});
    Action act;
    act.at_s = need<double>(a, "at_s", path);
    if (act.at_s < 0 || act.at_s > s.duration_s)
      fail(join(path, "at_s"), "outside the script duration");
    const auto kind = need<std::string>(a, "action", path);
    if (kind == "request") {
      act.kind = Action::Kind::request;
      act.from = need<NodeId>(a, "from", path);
      act.to = need<NodeId>(a, "to", path);
    } else if (kind == "request_all_pairs") {
      act.kind = Action::Kind::request_all_pairs;
      act.spacing_s = opt<double>(a, "spacing_s", path, 1);
      if (act.spacing_s < 0) fail(join(path, "spacing_s"), "must not be negative");
    } else if (kind == "kill" || kind == "heal") {
      act.kind = kind == "kill" ? Action::Kind::kill : Action::Kind::heal;
      act.target = need<std::string>(a, "channel", path);
    } else if (kind == "drain") {
      act.kind = Action::Kind::drain;
      act.target = opt<std::string>(a, "target", path, "");
    } else {
      fail(join(path, "action"), "unknown action " + kind);
    }
    s.actions.push_back(std::move(act));
  }
  return s;
}

Script Script::load(const std::string& path) { return from_json(read_json(path)); }

// ------------------------------------------------------------------ report

bool Report::success() const {
  for (const auto& r : requests)
    if (!r.ok || !r.key_match || !r.leaks.empty()) return false;
  for (const auto& m : methods)
    if (!m.reconciles()) return false;
  return true;
}

Json Report::to_json() const {
  Json j;
  j["seed"] = seed;
  j["duration_s"] = duration_s;
  j["links"] = Json::array();
  for (const auto& l : links) {
    j["links"].push_back({{"name", l.name},
                          {"type", l.type},
                          {"label", l.label},
                          {"produced", l.produced},
                          {"keys_a", l.keys_a},
                          {"keys_b", l.keys_b},
                          {"rate_bps_a", l.rate_bps_a},
                          {"rate_bps_b", l.rate_bps_b},
                          {"streams_equal", l.streams_equal},
                          {"dos", l.dos},
                          {"retransmits", l.retransmits}});
  }
  j["methods"] = Json::array();
  for (const auto& m : methods) {
    const auto& c = m.counters;
    j["methods"].push_back({{"name", m.name},
                            {"method", m.method},
                            {"from", m.from},
                            {"to", m.to},
                            {"label", m.label},
                            {"sent", c.sent},
                            {"delivered", c.delivered},
                            {"lost", c.lost},
                            {"pending", m.pending},
                            {"retransmits", c.retransmits},
                            {"accepted", c.accepted},
                            {"dos", c.dos},
                            {"replays", c.replays},
                            {"unknown_sender", c.unknown_sender},
                            {"integrity_alarms", c.integrity_alarms},
                            {"expired", c.expired},
                            {"reconciles", m.reconciles()}});
  }
  j["requests"] = Json::array();
  for (const auto& r : requests) {
    Json x{{"from", r.from},   {"to", r.to},       {"ok", r.ok},       {"key_id", r.key_id},
           {"label", r.label}, {"hops", r.hops},   {"leaks", r.leaks}, {"key_match", r.key_match},
           {"latency_ms", r.latency_ms}};
    if (!r.ok) {
      x["error"] = r.error;
      x["failed_segment"] = r.failed_segment;
    }
    j["requests"].push_back(std::move(x));
  }
  j["dos_total"] = dos_total;
  j["deliveries"] = deliveries;
  j["trace_hash"] = trace_hash;
  j["success"] = success();
  return j;
}

std::string Report::to_table() const {
  std::ostringstream os;
  auto col = [&](const std::string& s, int w) { os << std::left << std::setw(w) << s << ' '; };
  os << "seed " << seed << ", " << fixed(duration_s, 1) << " s simulated\n\nLINKS\n";
  col("name", 24), col("type", 4), col("keys a", 7), col("keys b", 7), col("bit/s", 8),
      col("equal", 5), col("dos", 4), col("label", 0);
  os << '\n';
  for (const auto& l : links) {
    col(l.name, 24), col(l.type, 4), col(std::to_string(l.keys_a), 7),
        col(std::to_string(l.keys_b), 7), col(fixed(l.rate_bps_b, 1), 8),
        col(l.streams_equal ? "yes" : "NO", 5), col(std::to_string(l.dos), 4), col(l.label, 0);
    os << '\n';
  }
  os << "\nMETHODS\n";
  col("name", 24), col("m", 1), col("sent", 6), col("deliv", 6), col("lost", 5), col("pend", 5),
      col("dos", 4), col("replay", 6), col("label", 0);
  os << '\n';
  for (const auto& m : methods) {
    const auto& c = m.counters;
    col(m.name, 24), col(std::to_string(m.method), 1), col(std::to_string(c.sent), 6),
        col(std::to_string(c.delivered), 6), col(std::to_string(c.lost), 5),
        col(std::to_string(m.pending), 5), col(std::to_string(c.dos), 4),
        col(std::to_string(c.replays), 6), col(m.label, 0);
    os << '\n';
  }
  os << "\nREQUESTS\n";
  col("from", 22), col("to", 22), col("ok", 3), col("ms", 9), col("hops", 4), col("label", 0);
  os << '\n';
  std::size_t ok = 0;
  for (const auto& r : requests) {
    const bool good = r.ok && r.key_match && r.leaks.empty();
    ok += good;
    col(r.from, 22), col(r.to, 22), col(good ? "ok" : "NO", 3), col(fixed(r.latency_ms, 1), 9),
        col(r.hops.empty() ? "-" : std::to_string(r.hops.size() - 1), 4),
        col(r.ok ? r.label : r.error + " [" + r.failed_segment + "]", 0);
    os << '\n';
  }
  os << '\n' << ok << '/' << requests.size() << " requests delivered, dos " << dos_total
     << ", trace " << trace_hash << '\n';
  return os.str();
}

// ------------------------------------------------------------------ deployment

namespace {
DeploymentConfig seeded(DeploymentConfig c, const RunOptions& o) {
  if (o.seed) c.seed = *o.seed;
  return c;
}
}  // namespace

Deployment::Deployment(DeploymentConfig config, const RunOptions& options)
    : config_(seeded(std::move(config), options)),
      suites_(crypto::SuiteRegistry::with_test_suites()),
      net_(sched_, config_.seed),
      rng_(config_.seed) {
  config_.validate(suites_);
  sched_.set_wall_clock(options.wall_clock);
  net_.set_record_trace(options.record_trace);
  build();
}

Deployment::~Deployment() {
  for (auto& b : borders_) b.bridge->stop();
  for (auto& l : links_) {
    l.sessions.initiator->stop();
    l.sessions.responder->stop();
  }
}

kms::Kms& Deployment::store(const NodeId& node) {
  auto it = stores_.find(node);
  if (it == stores_.end()) throw ConfigError("node", "unknown node " + node.to_string());
  return *it->second;
}

std::vector<kms::ListingRow> Deployment::listing(const NodeId& node) const {
  auto it = stores_.find(node);
  if (it == stores_.end()) throw ConfigError("node", "unknown node " + node.to_string());
  return it->second->listing();
}

bool Deployment::usable(const forwarding::RoutedLink& link, const NodeId& from) const {
  const auto& s = *stores_.at(from);
  return s.available(link.pad_supplier, link.link.other(from), config_.relay.key_len,
                     kms::Ownership::split) > 0;
}

void Deployment::build() {
  for (const auto& n : config_.nodes())
    stores_[n] = std::make_unique<kms::Kms>(n, [this] { return netsim::unix_seconds(sched_.now()); });
  for (const auto& [id, ch] : config_.channels) channels_[id] = net_.open_channel(ch.spec, ch.a, ch.b);

  std::set<std::string> inputs;
  for (const auto& b : config_.borders) inputs.insert(b.inputs.begin(), b.inputs.end());
  std::map<LinkId, std::string> relay_channel;

  for (const auto& l : config_.links) {
    const auto& ch = config_.channels.at(l.channel);
    auto& eps = channels_.at(l.channel);
    qkd_emu::LinkConfig cfg;
    cfg.link = {l.id, ch.a, ch.b, l.type, l.rate_bps, l.key_len};
    cfg.kem_suite = l.kem;
    cfg.sig_suite = l.sig;
    cfg.side_channels = l.side_channels;
    auto pair = qkd_emu::start_link(sched_, suites_, *stores_.at(ch.a), *stores_.at(ch.b),
                                    eps.first.lane(border::kLaneEmulated),
                                    eps.second.lane(border::kLaneEmulated), cfg,
                                    rng_.fork("link:" + l.name));
    // Bridge inputs are reachable only through their bridge.
    if (!inputs.count(l.name)) {
      topo_.add_link(cfg.link);
      relay_channel[l.id] = l.channel;
    }
    links_.push_back({l, std::move(pair)});
  }

  for (const auto& b : config_.borders) {
    const auto& ch = config_.channels.at(b.channel);
    auto& eps = channels_.at(b.channel);
    auto& sa = *stores_.at(ch.a);
    auto& sb = *stores_.at(ch.b);
    const auto rng = rng_.fork("border:" + b.name);
    Border out{&b, nullptr, ch.a, ch.b};
    switch (b.method) {
      case 1: {
        auto h = b.hybrid;
        for (const auto& name : b.inputs) {
          auto it = std::find_if(config_.links.begin(), config_.links.end(),
                                 [&](const LinkConfig& l) { return l.name == name; });
          h.inputs.push_back(it->id.to_string());
        }
        out.bridge = border::method1_bridge(sched_, sa, sb, eps.first, eps.second, std::move(h));
        break;
      }
      case 2: {
        auto p = b.pair;
        p.link.endpoint_a = ch.a;
        p.link.endpoint_b = ch.b;
        out.bridge = border::method2_bridge(sched_, suites_, sa, sb, eps.first, eps.second, p, rng);
        break;
      }
      case 3:
        out.bridge = border::method3_bridge(sched_, suites_, sa, sb, eps.first, eps.second, b.app, rng);
        break;
      case 4: {
        auto m = b.multipath;
        if (b.psk) m.psk = config_.psks.at(*b.psk);
        auto& space = channels_.at(b.space_channel);
        // Orient the space channel the same way as the ground channel.
        auto [space_a, space_b] = space.first.local() == ch.a ? space : std::pair{space.second, space.first};
        out.bridge = border::method4_bridge(sched_, suites_, sa, sb, space_a, space_b, eps.first,
                                            eps.second, m, rng);
        break;
      }
    }
    const auto type = b.method == 1 ? LinkType::QKD : LinkType::PQC;
    topo_.add_link({b.id, ch.a, ch.b, type, border_rate(b), border_key_len(b)}, b.name);
    relay_channel[b.id] = b.channel;
    borders_.push_back(std::move(out));
  }

  for (const auto& cc : config_.controllers)
    controllers_.push_back(std::make_unique<forwarding::Controller>(cc.name, cc.domains, topo_));

  forwarding::RelayConfig rc;
  rc.key_len = config_.relay.key_len;
  rc.e2e_timeout = netsim::from_seconds(config_.relay.e2e_timeout_s);
  rc.slave_wait = netsim::from_seconds(config_.relay.slave_wait_s);
  for (const auto& n : config_.nodes()) {
    const forwarding::Controller* ctl = nullptr;
    for (const auto& c : controllers_)
      if (c->manages(n)) ctl = c.get();
    agents_[n] = std::make_unique<forwarding::RelayAgent>(
        sched_, *stores_.at(n), *ctl, topo_, rc, rng_.fork("relay:" + n.to_string()),
        [this](const forwarding::RoutedLink& l, const NodeId& from) { return usable(l, from); });
  }
  for (const auto& [lid, channel] : relay_channel) {
    auto& eps = channels_.at(channel);
    agents_.at(eps.first.local())->attach(lid, eps.first.lane(border::kLaneRelay));
    agents_.at(eps.second.local())->attach(lid, eps.second.lane(border::kLaneRelay));
  }
}

void Deployment::request(const NodeId& from, const NodeId& to) {
  if (!agents_.count(from)) throw ConfigError("from", "unknown node " + from.to_string());
  if (!agents_.count(to)) throw ConfigError("to", "unknown node " + to.to_string());
  const auto index = requests_.size();
  RequestReport r;
  r.from = from.to_string();
  r.to = to.to_string();
  r.error = "unfinished";
  requests_.push_back(std::move(r));
  agents_.at(from)->request(to, config_.relay.key_len,
                            [this, index](const forwarding::E2eResult& res) { finish_request(index, res); });
}

void Deployment::finish_request(std::size_t index, const forwarding::E2eResult& res) {
  auto& r = requests_.at(index);
  r.ok = res.ok;
  r.key_id = res.key_id.to_string();
  r.error = res.error;
  r.failed_segment = res.failed_segment;
  r.label = res.label.to_string();
  r.latency_ms = static_cast<double>(res.finished - res.started) / 1000.0;
  r.hops.clear();
  for (const auto& h : res.hops) r.hops.push_back(h.to_string());
}

void Deployment::drain(const std::string& target) {
  bool matched = target.empty();
  for (auto& l : links_)
    if (target.empty() || l.config.name == target) {
      l.sessions.initiator->drain();
      matched = true;
    }
  for (auto& b : borders_)
    if (target.empty() || b.config->name == target) {
      b.bridge->stop();
      matched = true;
    }
  if (!matched) throw ConfigError("target", "no link or border named " + target);
}

void Deployment::run(const Script& script) {
  for (std::size_t i = 0; i < script.actions.size(); ++i) {
    const auto& a = script.actions[i];
    const auto path = at_index("actions", i);
    const auto t = netsim::from_seconds(a.at_s);
    switch (a.kind) {
      case Action::Kind::request:
        if (!config_.has_node(a.from)) fail(join(path, "from"), "unknown node " + a.from.to_string());
        if (!config_.has_node(a.to)) fail(join(path, "to"), "unknown node " + a.to.to_string());
        sched_.at(t, [this, a] { request(a.from, a.to); });
        break;
      case Action::Kind::request_all_pairs: {
        const auto nodes = config_.nodes();
        std::size_t k = 0;
        for (std::size_t x = 0; x < nodes.size(); ++x)
          for (std::size_t y = x + 1; y < nodes.size(); ++y, ++k)
            sched_.at(t + netsim::from_seconds(a.spacing_s * static_cast<double>(k)),
                      [this, from = nodes[x], to = nodes[y]] { request(from, to); });
        break;
      }
      case Action::Kind::kill:
      case Action::Kind::heal:
        if (!config_.channels.count(a.target))
          fail(join(path, "channel"), "unknown channel " + a.target);
        sched_.at(t, [this, a] {
          if (a.kind == Action::Kind::kill)
            net_.kill(a.target);
          else
            net_.heal(a.target);
        });
        break;
      case Action::Kind::drain: {
        bool known = a.target.empty();
        for (const auto& l : config_.links) known |= l.name == a.target;
        for (const auto& b : config_.borders) known |= b.name == a.target;
        if (!known) fail(join(path, "target"), "no link or border named " + a.target);
        sched_.at(t, [this, a] { drain(a.target); });
        break;
      }
    }
  }

  const auto start = sched_.now();
  const auto end = start + netsim::from_seconds(script.duration_s);
  sched_.run_until(end);
  generation_s_ = netsim::to_seconds(end);
  drain();
  sched_.run_until(end + netsim::from_seconds(script.grace_s));
  // Requests still in flight either complete or hit their own timeout.
  const auto limit = sched_.now() + netsim::from_seconds(config_.relay.e2e_timeout_s);
  auto unfinished = [this] {
    return std::any_of(requests_.begin(), requests_.end(),
                       [](const RequestReport& r) { return r.error == "unfinished"; });
  };
  while (unfinished() && sched_.now() < limit) sched_.run_for(netsim::from_seconds(1));
  ran_for_s_ = netsim::to_seconds(sched_.now());
}

Report Deployment::report() const {
  Report rep;
  rep.seed = config_.seed;
  rep.duration_s = ran_for_s_;

  std::map<NodeId, std::vector<kms::ListingRow>> rows;
  for (const auto& [n, s] : stores_) rows[n] = s->listing();
  auto count = [&](const NodeId& n, const std::string& supplier) {
    return static_cast<std::uint64_t>(std::count_if(rows[n].begin(), rows[n].end(),
                                                    [&](const auto& r) { return r.supplier_id == supplier; }));
  };

  for (const auto& l : links_) {
    LinkReport lr;
    const auto& init = *l.sessions.initiator;
    const auto& resp = *l.sessions.responder;
    const auto& desc = init.config().link;
    const auto& sup = init.supplier_id();
    lr.name = l.config.name;
    lr.type = to_string(desc.link_type);
    lr.label = init.label().to_string();
    lr.produced = init.produced_count();
    lr.keys_a = count(desc.endpoint_a, sup);
    lr.keys_b = count(desc.endpoint_b, sup);
    if (generation_s_ > 0) {
      lr.rate_bps_a = static_cast<double>(lr.keys_a * desc.qos_key_len * 8) / generation_s_;
      lr.rate_bps_b = static_cast<double>(lr.keys_b * desc.qos_key_len * 8) / generation_s_;
    }
    const auto& sa = *stores_.at(desc.endpoint_a);
    const auto& sb = *stores_.at(desc.endpoint_b);
    lr.streams_equal = lr.keys_a == lr.keys_b;
    for (const auto& row : rows[desc.endpoint_a]) {
      if (row.supplier_id != sup || !lr.streams_equal) continue;
      auto theirs = sb.find(row.key_id, sup);
      lr.streams_equal = theirs && theirs->key == sa.find(row.key_id, sup)->key;
    }
    lr.dos = init.counters().dos + resp.counters().dos;
    lr.retransmits = init.counters().retransmits;
    rep.dos_total += lr.dos;
    rep.links.push_back(std::move(lr));
  }

  for (const auto& b : borders_) {
    MethodReport m;
    m.name = b.config->name;
    m.method = b.config->method;
    m.from = b.a.to_string();
    m.to = b.b.to_string();
    auto label = b.bridge->label();
    m.label = label ? label->to_string() : "-";
    m.counters = b.bridge->counters();
    m.pending = b.bridge->pending();
    rep.dos_total += m.counters.dos;
    rep.methods.push_back(std::move(m));
  }

  for (auto r : requests_) {
    if (r.ok) {
      const auto from = NodeId::parse(r.from), to = NodeId::parse(r.to);
      const auto id = KeyId::parse(r.key_id);
      auto mine = stores_.at(from)->find(id, forwarding::e2e_supplier(to));
      auto theirs = stores_.at(to)->find(id, forwarding::e2e_supplier(from));
      r.key_match = mine && theirs && mine->key == theirs->key;
      for (const auto& [n, s] : stores_)
        if (n != from && n != to && s->holds(id)) r.leaks.push_back(n.to_string());
    }
    rep.requests.push_back(std::move(r));
  }
  rep.deliveries = net_.deliveries();
  rep.trace_hash = net_.trace_hash();
  return rep;
}

}  // namespace qkdnet::scenario
