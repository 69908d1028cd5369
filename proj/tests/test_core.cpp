#include <gtest/gtest.h>

#include "support.hpp"

using namespace qkdnet;
using test::node;

namespace {

LinkDescriptor link(RandomSource& rng, const NodeId& a, const NodeId& b) {
  return LinkDescriptor{LinkId::random(rng), a, b, LinkType::QKD, 256, 32};
}

KeyPackage sample_package(RandomSource& rng) {
  KeyPackage p;
  p.rnd_id = KeyId::random(rng);
  p.ciphertexts.push_back({"kem-a", Bytes(48, 7), Bytes(32, 9)});
  p.meta = {node("berlin", "gw"), {100, 200}, PathTag::space};
  p.signatures.push_back({"sig-a", Bytes(64, 1)});
  return p;
}

}  // namespace

TEST(Core, NodeIdValidation) {
  EXPECT_NO_THROW(node("madrid", "quevedo").validate());
  EXPECT_THROW(node("", "x").validate(), ValidationError);
  EXPECT_THROW(node("a b", "x").validate(), ValidationError);
  EXPECT_THROW(node("a", "\xc3\xa9").validate(), ValidationError);
  EXPECT_EQ(NodeId::parse("madrid/quevedo"), node("madrid", "quevedo"));
}

TEST(Core, KeyIdCanonicalText) {
  DeterministicRng rng(1);
  auto id = KeyId::random(rng);
  auto text = id.to_string();
  ASSERT_EQ(text.size(), 36u);
  for (char c : text) EXPECT_TRUE((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f') || c == '-');
  EXPECT_EQ(text[14], '4');
  EXPECT_EQ(KeyId::parse(text), id);
  EXPECT_THROW(KeyId::parse("not-a-uuid"), ValidationError);
}

TEST(Core, KeyMaterialBounds) {
  EXPECT_THROW(KeyMaterial(Bytes(15)), ValidationError);
  EXPECT_NO_THROW(KeyMaterial(Bytes(16)));
  EXPECT_NO_THROW(KeyMaterial(Bytes(4096)));
  EXPECT_THROW(KeyMaterial(Bytes(4097)), ValidationError);
}

TEST(Core, RoundTripFixpointKeyEntry) {
  DeterministicRng rng(2);
  for (int i = 0; i < 200; ++i) {
    auto e = test::make_entry(rng, node("d", "n" + std::to_string(i)), "s", 16 + i);
    auto bytes = serialize(e);
    auto back = deserialize<KeyEntry>(bytes);
    EXPECT_EQ(back, e);
    EXPECT_EQ(serialize(back), bytes);
  }
}

TEST(Core, CanonicalOrderIndependentOfConstruction) {
  DeterministicRng rng(3);
  auto id = KeyId::random(rng);
  auto key = KeyMaterial::random(rng, 32);
  KeyEntry a{id, key, node("d", "p"), "sup", {10, 20}, test::its({"x", "y"})};
  KeyEntry b;
  b.label = test::its({"y", "x"});
  b.validity = {10, 20};
  b.supplier_id = "sup";
  b.peer = node("d", "p");
  b.key = key;
  b.key_id = id;
  EXPECT_EQ(serialize(a), serialize(b));
}

TEST(Core, InvalidValidityRejected) {
  DeterministicRng rng(4);
  auto e = test::make_entry(rng, node("d", "p"), "s");
  e.validity = {20, 20};
  try {
    serialize(e);
    FAIL();
  } catch (const ValidationError& err) {
    EXPECT_EQ(err.field(), "validity");
  }
}

TEST(Core, DecodeRejectsNonCanonical) {
  DeterministicRng rng(5);
  auto e = test::make_entry(rng, node("d", "p"), "s");
  auto bytes = serialize(e);
  bytes.push_back(0);
  EXPECT_THROW(deserialize<KeyEntry>(bytes), DecodeError);
  bytes.pop_back();
  bytes.pop_back();
  EXPECT_ANY_THROW(deserialize<KeyEntry>(bytes));
}

TEST(Core, LinkDescriptorInvariants) {
  DeterministicRng rng(6);
  auto l = link(rng, node("d", "a"), node("d", "b"));
  EXPECT_NO_THROW(l.validate());
  EXPECT_EQ(deserialize<LinkDescriptor>(serialize(l)), l);
  auto same = l;
  same.endpoint_b = same.endpoint_a;
  EXPECT_THROW(same.validate(), ValidationError);
  auto slow = l;
  slow.qos_rate_bps = 0;
  EXPECT_THROW(slow.validate(), ValidationError);
  // One 32-byte key per hour needs 256 bits per 3600 s: the floor is 1 bit/s.
  slow.qos_rate_bps = 1;
  EXPECT_NO_THROW(slow.validate());
}

TEST(Core, LinkTypeEnumEncoding) {
  DeterministicRng rng(7);
  auto l = link(rng, node("d", "a"), node("d", "b"));
  for (auto t : {LinkType::QKD, LinkType::PQC, LinkType::RAW, LinkType::OTHER}) {
    l.link_type = t;
    auto bytes = serialize(l);
    // link_id (16) + two NodeIds, then the enum octet.
    Writer w;
    encode(w, l.link_id);
    encode(w, l.endpoint_a);
    encode(w, l.endpoint_b);
    EXPECT_EQ(bytes[w.data().size()], static_cast<std::uint8_t>(t));
  }
}

TEST(Core, PathSpecInvariants) {
  DeterministicRng rng(8);
  auto a = node("d", "a"), b = node("d", "b"), c = node("d", "c");
  auto ab = link(rng, a, b), bc = link(rng, b, c);
  PathSpec p{{a, b, c}, {ab.link_id, bc.link_id}, {}};
  EXPECT_NO_THROW(p.validate_against({ab, bc}));
  EXPECT_EQ(deserialize<PathSpec>(serialize(p)), p);
  PathSpec cyc{{a, b, a}, {ab.link_id, ab.link_id}, {}};
  EXPECT_THROW(cyc.validate(), ValidationError);
  PathSpec wrong{{a, c}, {ab.link_id}, {}};
  EXPECT_THROW(wrong.validate_against({ab, bc}), ValidationError);
  PathSpec shortp{{a}, {}, {}};
  EXPECT_THROW(shortp.validate(), ValidationError);
}

TEST(Core, KeyPackageRoundTrip) {
  DeterministicRng rng(9);
  for (int i = 0; i < 50; ++i) {
    auto p = sample_package(rng);
    auto bytes = serialize(p);
    EXPECT_EQ(serialize(deserialize<KeyPackage>(bytes)), bytes);
  }
  auto p = sample_package(rng);
  p.ciphertexts.clear();
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(Core, BodyBytesExcludeSignatures) {
  DeterministicRng rng(10);
  auto p = sample_package(rng);
  auto body = p.body_bytes();
  p.signatures[0].signature[0] ^= 1;
  EXPECT_EQ(p.body_bytes(), body);
  p.meta.validity.end += 1;
  EXPECT_NE(p.body_bytes(), body);
}
