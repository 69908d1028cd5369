#include "qkdnet/core.hpp"

#include <algorithm>
#include <cctype>

#include "qkdnet/crypto.hpp"

namespace qkdnet {

template <class Tag>
Id128<Tag> Id128<Tag>::random(RandomSource& rng) {
  Raw raw{};
  rng.fill(raw);
  raw[6] = static_cast<std::uint8_t>((raw[6] & 0x0f) | 0x40);
  raw[8] = static_cast<std::uint8_t>((raw[8] & 0x3f) | 0x80);
  return Id128(raw);
}

template <class Tag>
std::string Id128<Tag>::to_string() const {
  auto hex = to_hex(raw_);
  return hex.substr(0, 8) + "-" + hex.substr(8, 4) + "-" + hex.substr(12, 4) + "-" +
         hex.substr(16, 4) + "-" + hex.substr(20, 12);
}

template <class Tag>
Id128<Tag> Id128<Tag>::parse(const std::string& text) {
  std::string hex;
  for (char c : text)
    if (c != '-') hex.push_back(c);
  if (hex.size() != 32) throw ValidationError("id", "expected 128-bit UUID, got '" + text + "'");
  Raw raw{};
  auto bytes = from_hex(hex);
  std::copy(bytes.begin(), bytes.end(), raw.begin());
  return Id128(raw);
}

template class Id128<KeyIdTag>;
template class Id128<LinkIdTag>;
template class Id128<KsidTag>;

namespace {

void check_identifier(const std::string& field, const std::string& s) {
  if (s.empty()) throw ValidationError(field, "must be non-empty");
  for (unsigned char c : s) {
    if (c > 0x7f || std::isspace(c) || !std::isprint(c))
      throw ValidationError(field, "must be printable ASCII without whitespace");
  }
}

}  // namespace

void NodeId::validate() const {
  check_identifier("node.domain", domain);
  check_identifier("node.name", name);
  if (domain.find('/') != std::string::npos) throw ValidationError("node.domain", "contains '/'");
}

NodeId NodeId::parse(const std::string& text) {
  auto slash = text.find('/');
  if (slash == std::string::npos) throw ValidationError("node", "expected domain/name: " + text);
  NodeId n{text.substr(0, slash), text.substr(slash + 1)};
  n.validate();
  return n;
}

KeyMaterial::KeyMaterial(Bytes bytes) : bytes_(std::move(bytes)) {
  if (bytes_.size() < kMinKeyLength || bytes_.size() > kMaxKeyLength)
    throw ValidationError("key.length", "must be in [16, 4096], got " +
                                            std::to_string(bytes_.size()));
}

KeyMaterial KeyMaterial::random(RandomSource& rng, std::size_t n) {
  Bytes b(n);
  rng.fill(b);
  return KeyMaterial(std::move(b));
}

void KeyMaterial::wipe() {
  std::fill(bytes_.begin(), bytes_.end(), 0);
  bytes_.clear();
}

void Validity::validate() const {
  if (start >= end) throw ValidationError("validity", "start must precede end");
}

void KeyEntry::validate() const {
  if (key.size() < kMinKeyLength || key.size() > kMaxKeyLength)
    throw ValidationError("key.length", "must be in [16, 4096]");
  peer.validate();
  if (supplier_id.empty()) throw ValidationError("supplier_id", "must be non-empty");
  validity.validate();
}

std::string to_string(LinkType t) {
  switch (t) {
    case LinkType::QKD: return "QKD";
    case LinkType::PQC: return "PQC";
    case LinkType::RAW: return "RAW";
    case LinkType::OTHER: return "OTHER";
  }
  return "OTHER";
}

LinkType link_type_from_string(const std::string& s) {
  if (s == "QKD") return LinkType::QKD;
  if (s == "PQC") return LinkType::PQC;
  if (s == "RAW") return LinkType::RAW;
  if (s == "OTHER") return LinkType::OTHER;
  throw ValidationError("link_type", "unknown link type '" + s + "'");
}

void LinkDescriptor::validate() const {
  endpoint_a.validate();
  endpoint_b.validate();
  if (endpoint_a == endpoint_b) throw ValidationError("endpoint_b", "link endpoints must differ");
  if (qos_rate_bps == 0) throw ValidationError("qos_rate_bps", "must be positive");
  if (qos_key_len < kMinKeyLength || qos_key_len > kMaxKeyLength)
    throw ValidationError("qos_key_len", "must be in [16, 4096]");
  if (qos_rate_bps * 3600 < 8ull * qos_key_len)
    throw ValidationError("qos_rate_bps", "must deliver at least one key per hour");
}

void PathSpec::validate() const {
  if (hops.size() < 2) throw ValidationError("hops", "need at least two hops");
  if (links.size() != hops.size() - 1)
    throw ValidationError("links", "must have exactly hops-1 entries");
  for (const auto& h : hops) h.validate();
  auto sorted = hops;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ValidationError("hops", "path revisits a node");
  for (auto i : border_crossings)
    if (i >= links.size()) throw ValidationError("border_crossings", "index out of range");
}

void PathSpec::validate_against(const std::vector<LinkDescriptor>& topology) const {
  validate();
  for (std::size_t i = 0; i < links.size(); ++i) {
    auto it = std::find_if(topology.begin(), topology.end(),
                           [&](const LinkDescriptor& l) { return l.link_id == links[i]; });
    if (it == topology.end())
      throw ValidationError("links", "unknown link " + links[i].to_string());
    if (!it->connects(hops[i], hops[i + 1]))
      throw ValidationError("links", "link " + links[i].to_string() + " does not join " +
                                         hops[i].to_string() + " and " + hops[i + 1].to_string());
  }
}

std::string to_string(PathTag p) {
  switch (p) {
    case PathTag::single: return "single";
    case PathTag::ground: return "ground";
    case PathTag::space: return "space";
  }
  return "single";
}

void KeyPackage::validate() const {
  if (ciphertexts.empty()) throw ValidationError("ciphertexts", "must be non-empty");
  for (const auto& c : ciphertexts)
    if (c.kem_suite.empty()) throw ValidationError("ciphertexts.kem_suite", "empty suite id");
  for (const auto& s : signatures)
    if (s.sig_suite.empty()) throw ValidationError("signatures.sig_suite", "empty suite id");
  meta.sender.validate();
  meta.validity.validate();
}

namespace {

void encode_body(Writer& w, const KeyPackage& v) {
  encode(w, v.rnd_id);
  w.u32(static_cast<std::uint32_t>(v.ciphertexts.size()));
  for (const auto& c : v.ciphertexts) {
    w.str(c.kem_suite);
    w.bytes(c.kem_ciphertext);
    w.bytes(c.encrypted_payload);
  }
  encode(w, v.meta.sender);
  encode(w, v.meta.validity);
  w.u8(static_cast<std::uint8_t>(v.meta.path));
}

KeyId decode_key_id(Reader& r) {
  KeyId::Raw raw{};
  auto b = r.raw(16);
  std::copy(b.begin(), b.end(), raw.begin());
  return KeyId(raw);
}

}  // namespace

Bytes KeyPackage::body_bytes() const {
  validate();
  Writer w;
  encode_body(w, *this);
  return std::move(w).take();
}

void encode(Writer& w, const NodeId& v) {
  v.validate();
  w.str(v.domain);
  w.str(v.name);
}

void encode(Writer& w, const KeyMaterial& v) {
  if (v.size() < kMinKeyLength) throw ValidationError("key.length", "must be in [16, 4096]");
  w.bytes(v.bytes());
}

void encode(Writer& w, const Validity& v) {
  v.validate();
  w.i64(v.start);
  w.i64(v.end);
}

void encode(Writer& w, const seclevel::SecurityLabel& v) {
  w.u8(static_cast<std::uint8_t>(v.base));
  w.u32(static_cast<std::uint32_t>(v.side_channels.size()));
  for (const auto& t : v.side_channels) w.str(t);  // std::set iterates sorted
}

void encode(Writer& w, const seclevel::SecurityExpr& v) {
  w.u32(static_cast<std::uint32_t>(v.atoms().size()));
  for (const auto& a : v.atoms()) encode(w, a);
}

void encode(Writer& w, const KeyEntry& v) {
  v.validate();
  encode(w, v.key_id);
  encode(w, v.key);
  encode(w, v.peer);
  w.str(v.supplier_id);
  encode(w, v.validity);
  encode(w, v.label);
}

void encode(Writer& w, const LinkDescriptor& v) {
  v.validate();
  encode(w, v.link_id);
  encode(w, v.endpoint_a);
  encode(w, v.endpoint_b);
  w.u8(static_cast<std::uint8_t>(v.link_type));
  w.u64(v.qos_rate_bps);
  w.u32(v.qos_key_len);
}

void encode(Writer& w, const PathSpec& v) {
  v.validate();
  w.u32(static_cast<std::uint32_t>(v.hops.size()));
  for (const auto& h : v.hops) encode(w, h);
  w.u32(static_cast<std::uint32_t>(v.links.size()));
  for (const auto& l : v.links) encode(w, l);
  w.u32(static_cast<std::uint32_t>(v.border_crossings.size()));
  for (auto i : v.border_crossings) w.u32(i);
}

void encode(Writer& w, const KeyPackage& v) {
  v.validate();
  encode_body(w, v);
  w.u32(static_cast<std::uint32_t>(v.signatures.size()));
  for (const auto& s : v.signatures) {
    w.str(s.sig_suite);
    w.bytes(s.signature);
  }
}

template <>
KeyId decode<KeyId>(Reader& r) {
  return decode_key_id(r);
}

template <>
LinkId decode<LinkId>(Reader& r) {
  return LinkId(decode_key_id(r).raw());
}

template <>
Ksid decode<Ksid>(Reader& r) {
  return Ksid(decode_key_id(r).raw());
}

template <>
NodeId decode<NodeId>(Reader& r) {
  NodeId n;
  n.domain = r.str(256);
  n.name = r.str(256);
  n.validate();
  return n;
}

template <>
KeyMaterial decode<KeyMaterial>(Reader& r) {
  return KeyMaterial(r.bytes(kMaxKeyLength));
}

template <>
Validity decode<Validity>(Reader& r) {
  Validity v;
  v.start = r.i64();
  v.end = r.i64();
  v.validate();
  return v;
}

template <>
seclevel::SecurityLabel decode<seclevel::SecurityLabel>(Reader& r) {
  auto base = r.u8();
  if (base > 1) throw DecodeError("unknown security base");
  auto n = r.u32();
  if (n > 1024) throw DecodeError("too many side channels");
  std::set<std::string> sc;
  for (std::uint32_t i = 0; i < n; ++i) sc.insert(r.str(256));
  if (sc.size() != n) throw DecodeError("duplicate side-channel tag");
  return {static_cast<seclevel::Base>(base), std::move(sc)};
}

template <>
seclevel::SecurityExpr decode<seclevel::SecurityExpr>(Reader& r) {
  auto n = r.u32();
  if (n == 0 || n > 16) throw DecodeError("bad atom count");
  std::vector<seclevel::SecurityLabel> atoms;
  for (std::uint32_t i = 0; i < n; ++i) atoms.push_back(decode<seclevel::SecurityLabel>(r));
  auto expr = seclevel::SecurityExpr::from_atoms(atoms);
  if (expr.atoms() != atoms) throw DecodeError("security expression not in normal form");
  return expr;
}

template <>
KeyEntry decode<KeyEntry>(Reader& r) {
  KeyEntry e;
  e.key_id = decode<KeyId>(r);
  e.key = decode<KeyMaterial>(r);
  e.peer = decode<NodeId>(r);
  e.supplier_id = r.str(1024);
  e.validity = decode<Validity>(r);
  e.label = decode<seclevel::SecurityExpr>(r);
  e.validate();
  return e;
}

template <>
LinkDescriptor decode<LinkDescriptor>(Reader& r) {
  LinkDescriptor l;
  l.link_id = decode<LinkId>(r);
  l.endpoint_a = decode<NodeId>(r);
  l.endpoint_b = decode<NodeId>(r);
  auto t = r.u8();
  if (t > 3) throw DecodeError("unknown link type");
  l.link_type = static_cast<LinkType>(t);
  l.qos_rate_bps = r.u64();
  l.qos_key_len = r.u32();
  l.validate();
  return l;
}

template <>
PathSpec decode<PathSpec>(Reader& r) {
  PathSpec p;
  auto nh = r.u32();
  if (nh > 4096) throw DecodeError("path too long");
  for (std::uint32_t i = 0; i < nh; ++i) p.hops.push_back(decode<NodeId>(r));
  auto nl = r.u32();
  if (nl > 4096) throw DecodeError("path too long");
  for (std::uint32_t i = 0; i < nl; ++i) p.links.push_back(decode<LinkId>(r));
  auto nb = r.u32();
  if (nb > nl) throw DecodeError("too many border crossings");
  std::uint32_t prev = 0;
  for (std::uint32_t i = 0; i < nb; ++i) {
    auto idx = r.u32();
    if (i > 0 && idx <= prev) throw DecodeError("border crossings not strictly ascending");
    p.border_crossings.insert(idx);
    prev = idx;
  }
  p.validate();
  return p;
}

template <>
KeyPackage decode<KeyPackage>(Reader& r) {
  KeyPackage p;
  p.rnd_id = decode<KeyId>(r);
  auto nc = r.u32();
  if (nc == 0 || nc > 16) throw DecodeError("bad ciphertext count");
  for (std::uint32_t i = 0; i < nc; ++i) {
    SealedPayload c;
    c.kem_suite = r.str(64);
    c.kem_ciphertext = r.bytes(1u << 16);
    c.encrypted_payload = r.bytes(kMaxKeyLength);
    p.ciphertexts.push_back(std::move(c));
  }
  p.meta.sender = decode<NodeId>(r);
  p.meta.validity = decode<Validity>(r);
  auto path = r.u8();
  if (path > 2) throw DecodeError("unknown path tag");
  p.meta.path = static_cast<PathTag>(path);
  auto ns = r.u32();
  if (ns > 16) throw DecodeError("bad signature count");
  for (std::uint32_t i = 0; i < ns; ++i) {
    PackageSignature s;
    s.sig_suite = r.str(64);
    s.signature = r.bytes(1u << 16);
    p.signatures.push_back(std::move(s));
  }
  p.validate();
  return p;
}

}  // namespace qkdnet
