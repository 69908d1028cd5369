#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qkdnet/bytes.hpp"
#include "qkdnet/seclevel.hpp"

namespace qkdnet {

class RandomSource;

inline constexpr std::size_t kDefaultKeyLength = 32;
inline constexpr std::size_t kMinKeyLength = 16;
inline constexpr std::size_t kMaxKeyLength = 4096;

/// 128-bit identifier rendered as a lowercase UUID string. The tag keeps key
/// ids, link ids and session ids from being mixed up.
template <class Tag>
class Id128 {
 public:
  using Raw = std::array<std::uint8_t, 16>;

  Id128() = default;
  explicit Id128(const Raw& raw) : raw_(raw) {}

  // Random version-4 style UUID.
  static Id128 random(RandomSource& rng);
  static Id128 parse(const std::string& text);

  const Raw& raw() const { return raw_; }
  std::string to_string() const;

  auto operator<=>(const Id128&) const = default;
  bool operator==(const Id128&) const = default;

 private:
  Raw raw_{};
};

extern template class Id128<struct KeyIdTag>;
extern template class Id128<struct LinkIdTag>;
extern template class Id128<struct KsidTag>;

struct KeyIdTag {};
struct LinkIdTag {};
struct KsidTag {};
using KeyId = Id128<KeyIdTag>;
using LinkId = Id128<LinkIdTag>;
using Ksid = Id128<KsidTag>;

/// A named node inside an administrative domain.
struct NodeId {
  std::string domain;
  std::string name;

  void validate() const;
  std::string to_string() const { return domain + "/" + name; }
  static NodeId parse(const std::string& text);  // "domain/name"

  auto operator<=>(const NodeId&) const = default;
  bool operator==(const NodeId&) const = default;
};

/// Symmetric key bytes, 16..4096 octets.
class KeyMaterial {
 public:
  KeyMaterial() = default;
  explicit KeyMaterial(Bytes bytes);
  static KeyMaterial zeros(std::size_t n) { return KeyMaterial(Bytes(n, 0)); }
  static KeyMaterial random(RandomSource& rng, std::size_t n);

  const Bytes& bytes() const { return bytes_; }
  std::size_t size() const { return bytes_.size(); }
  ByteView view() const { return bytes_; }

  // Overwrites the bytes before release; used for transient plaintext.
  void wipe();

  bool operator==(const KeyMaterial&) const = default;

 private:
  Bytes bytes_;
};

/// Seconds since the Unix epoch, half-open window [start, end).
struct Validity {
  std::int64_t start = 0;
  std::int64_t end = 0;

  void validate() const;
  bool contains(std::int64_t t) const { return t >= start && t < end; }
  bool operator==(const Validity&) const = default;
};

struct KeyEntry {
  KeyId key_id;
  KeyMaterial key;
  NodeId peer;
  std::string supplier_id;
  Validity validity;
  seclevel::SecurityExpr label{seclevel::SecurityLabel{}};

  void validate() const;
  bool operator==(const KeyEntry&) const = default;
};

enum class LinkType : std::uint8_t { QKD = 0, PQC = 1, RAW = 2, OTHER = 3 };
std::string to_string(LinkType t);
LinkType link_type_from_string(const std::string& s);

struct LinkDescriptor {
  LinkId link_id;
  NodeId endpoint_a;
  NodeId endpoint_b;
  LinkType link_type = LinkType::QKD;
  std::uint64_t qos_rate_bps = 256;
  std::uint32_t qos_key_len = kDefaultKeyLength;

  void validate() const;
  bool connects(const NodeId& x, const NodeId& y) const {
    return (endpoint_a == x && endpoint_b == y) || (endpoint_a == y && endpoint_b == x);
  }
  const NodeId& other(const NodeId& self) const {
    return endpoint_a == self ? endpoint_b : endpoint_a;
  }
  bool operator==(const LinkDescriptor&) const = default;
};

/// Ordered relay chain. border_crossings holds indices i such that the hop
/// pair (hops[i], hops[i+1]) crosses between domains.
struct PathSpec {
  std::vector<NodeId> hops;
  std::vector<LinkId> links;
  std::set<std::uint32_t> border_crossings;

  void validate() const;
  // Also checks every link joins its consecutive hops.
  void validate_against(const std::vector<LinkDescriptor>& topology) const;
  std::size_t hop_count() const { return links.size(); }
  bool operator==(const PathSpec&) const = default;
};

enum class PathTag : std::uint8_t { single = 0, ground = 1, space = 2 };
std::string to_string(PathTag p);

/// One KEM-protected copy of the random payload.
struct SealedPayload {
  std::string kem_suite;
  Bytes kem_ciphertext;
  Bytes encrypted_payload;
  bool operator==(const SealedPayload&) const = default;
};

struct PackageMeta {
  NodeId sender;
  Validity validity;
  PathTag path = PathTag::single;
  bool operator==(const PackageMeta&) const = default;
};

struct PackageSignature {
  std::string sig_suite;
  Bytes signature;
  bool operator==(const PackageSignature&) const = default;
};

/// Signed wire unit carrying encapsulated random material between border
/// nodes. Signatures cover body_bytes(), i.e. everything but `signatures`.
struct KeyPackage {
  KeyId rnd_id;
  std::vector<SealedPayload> ciphertexts;
  PackageMeta meta;
  std::vector<PackageSignature> signatures;

  void validate() const;
  Bytes body_bytes() const;
  bool operator==(const KeyPackage&) const = default;
};

// Canonical encoding: declaration order, big-endian integers, 32-bit length
// prefixes on octet strings, enums as one octet.
void encode(Writer& w, const NodeId& v);
void encode(Writer& w, const KeyMaterial& v);
void encode(Writer& w, const Validity& v);
void encode(Writer& w, const seclevel::SecurityLabel& v);
void encode(Writer& w, const seclevel::SecurityExpr& v);
void encode(Writer& w, const KeyEntry& v);
void encode(Writer& w, const LinkDescriptor& v);
void encode(Writer& w, const PathSpec& v);
void encode(Writer& w, const KeyPackage& v);
template <class Tag>
void encode(Writer& w, const Id128<Tag>& v) {
  w.raw(v.raw());
}

template <class T>
T decode(Reader& r);
template <> KeyId decode<KeyId>(Reader& r);
template <> LinkId decode<LinkId>(Reader& r);
template <> Ksid decode<Ksid>(Reader& r);
template <> NodeId decode<NodeId>(Reader& r);
template <> KeyMaterial decode<KeyMaterial>(Reader& r);
template <> Validity decode<Validity>(Reader& r);
template <> seclevel::SecurityLabel decode<seclevel::SecurityLabel>(Reader& r);
template <> seclevel::SecurityExpr decode<seclevel::SecurityExpr>(Reader& r);
template <> KeyEntry decode<KeyEntry>(Reader& r);
template <> LinkDescriptor decode<LinkDescriptor>(Reader& r);
template <> PathSpec decode<PathSpec>(Reader& r);
template <> KeyPackage decode<KeyPackage>(Reader& r);

template <class T>
Bytes serialize(const T& v) {
  Writer w;
  encode(w, v);
  return std::move(w).take();
}

template <class T>
T deserialize(ByteView bytes) {
  Reader r(bytes);
  T v = decode<T>(r);
  r.expect_done();
  return v;
}

}  // namespace qkdnet
