#include "qkdnet/crypto.hpp"

#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/sha.h>

#include <algorithm>
#include <cstring>

namespace qkdnet {

std::uint64_t RandomSource::next_u64() {
  std::array<std::uint8_t, 8> b{};
  fill(b);
  std::uint64_t v = 0;
  for (auto x : b) v = (v << 8) | x;
  return v;
}

double RandomSource::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

void DeterministicRng::fill(std::span<std::uint8_t> out) {
  std::size_t i = 0;
  while (i < out.size()) {
    auto word = engine_();
    for (int k = 0; k < 8 && i < out.size(); ++k, ++i) {
      out[i] = static_cast<std::uint8_t>(word);
      word >>= 8;
    }
  }
}

DeterministicRng DeterministicRng::fork(std::string_view label) const {
  Writer w;
  w.u64(seed_);
  w.str(label);
  auto d = crypto::sha256(w.data());
  std::uint64_t child = 0;
  for (int i = 0; i < 8; ++i) child = (child << 8) | d[i];
  return DeterministicRng(child);
}

void OsRng::fill(std::span<std::uint8_t> out) {
  std::size_t i = 0;
  while (i < out.size()) {
    auto word = dev_();
    for (int k = 0; k < 4 && i < out.size(); ++k, ++i) {
      out[i] = static_cast<std::uint8_t>(word);
      word >>= 8;
    }
  }
}

}  // namespace qkdnet

namespace qkdnet::crypto {

Digest sha256(ByteView data) {
  Digest d{};
  SHA256(data.data(), data.size(), d.data());
  return d;
}

Digest hmac_sha256(ByteView key, ByteView data) {
  Digest d{};
  unsigned int len = 0;
  HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(),
       d.data(), &len);
  return d;
}

Bytes expand(ByteView secret, std::string_view info, std::size_t len) {
  Bytes out;
  out.reserve(len + 32);
  for (std::uint32_t counter = 0; out.size() < len; ++counter) {
    Writer w;
    w.u32(counter);
    w.str(info);
    auto block = hmac_sha256(secret, w.data());
    out.insert(out.end(), block.begin(), block.end());
  }
  out.resize(len);
  return out;
}

bool constant_time_equal(ByteView a, ByteView b) {
  if (a.size() != b.size()) return false;
  std::uint8_t acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc |= static_cast<std::uint8_t>(a[i] ^ b[i]);
  return acc == 0;
}

std::string key_confirmation(ByteView secret) {
  auto d = sha256(secret);
  return to_hex(ByteView(d.data(), 8));
}

namespace {

Bytes concat(std::initializer_list<ByteView> parts) {
  Bytes out;
  for (auto p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

class TestKem final : public Kem {
 public:
  explicit TestKem(KemSuite s) : suite_(std::move(s)) {
    if (suite_.shared_secret_len < 32) throw CryptoError("shared secret must be >= 32 octets");
    if (suite_.ciphertext_len < 48) throw CryptoError("test KEM ciphertext must be >= 48 octets");
    suite_.public_key_len = 32;
    suite_.secret_key_len = 64;
  }

  const KemSuite& suite() const override { return suite_; }

  KeyPair keygen(RandomSource& rng) const override {
    Bytes seed(32);
    rng.fill(seed);
    auto pk = hmac_sha256(seed, as_bytes("kem-pk:" + suite_.suite_id));
    KeyPair kp;
    kp.public_key.assign(pk.begin(), pk.end());
    kp.secret_key = concat({seed, pk});
    return kp;
  }

  Encapsulation encap(ByteView pk, RandomSource& rng) const override {
    if (pk.size() != suite_.public_key_len) throw CryptoError("public key length mismatch");
    Bytes eph(32);
    rng.fill(eph);
    Encapsulation out;
    out.ciphertext = masked(pk, eph);
    auto tag = tag_for(pk, eph);
    out.ciphertext.insert(out.ciphertext.end(), tag.begin(), tag.end());
    out.shared_secret = secret_for(pk, eph);
    return out;
  }

  Bytes decap(ByteView sk, ByteView ct) const override {
    if (sk.size() != suite_.secret_key_len) throw CryptoError("secret key length mismatch");
    if (ct.size() != suite_.ciphertext_len) throw CryptoError("ciphertext length mismatch");
    auto seed = sk.first(32);
    auto pk = sk.subspan(32);
    auto eph = masked(pk, ct.first(32));
    auto tag = tag_for(pk, eph);
    if (!constant_time_equal(tag, ct.subspan(32)))
      return expand(seed, "kem-reject:" + suite_.suite_id + ":" + to_hex(ct),
                    suite_.shared_secret_len);
    return secret_for(pk, eph);
  }

 private:
  Bytes masked(ByteView pk, ByteView x) const {
    auto mask = expand(pk, "kem-mask:" + suite_.suite_id, 32);
    for (std::size_t i = 0; i < 32; ++i) mask[i] ^= x[i];
    return mask;
  }
  Bytes tag_for(ByteView pk, ByteView eph) const {
    return expand(concat({pk, eph}), "kem-tag:" + suite_.suite_id, suite_.ciphertext_len - 32);
  }
  Bytes secret_for(ByteView pk, ByteView eph) const {
    return expand(concat({pk, eph}), "kem-ss:" + suite_.suite_id, suite_.shared_secret_len);
  }

  KemSuite suite_;
};

class TestSigner final : public Signer {
 public:
  explicit TestSigner(SigSuite s) : suite_(std::move(s)) {
    if (suite_.signature_len < 32) throw CryptoError("signature must be >= 32 octets");
    suite_.public_key_len = 32;
    suite_.secret_key_len = 64;
  }

  const SigSuite& suite() const override { return suite_; }

  KeyPair keygen(RandomSource& rng) const override {
    Bytes seed(32);
    rng.fill(seed);
    auto pk = hmac_sha256(seed, as_bytes("sig-pk:" + suite_.suite_id));
    KeyPair kp;
    kp.public_key.assign(pk.begin(), pk.end());
    kp.secret_key = concat({seed, pk});
    return kp;
  }

  Bytes sign(ByteView sk, ByteView message) const override {
    if (sk.size() != suite_.secret_key_len) throw CryptoError("secret key length mismatch");
    return mac(sk.subspan(32), message);
  }

  bool verify(ByteView pk, ByteView message, ByteView signature) const override {
    if (pk.size() != suite_.public_key_len) throw CryptoError("public key length mismatch");
    if (signature.size() != suite_.signature_len) return false;
    return constant_time_equal(mac(pk, message), signature);
  }

 private:
  Bytes mac(ByteView pk, ByteView message) const {
    auto d = hmac_sha256(pk, message);
    return expand(d, "sig:" + suite_.suite_id, suite_.signature_len);
  }

  SigSuite suite_;
};

}  // namespace

std::unique_ptr<Kem> make_test_kem(KemSuite suite) {
  return std::make_unique<TestKem>(std::move(suite));
}

std::unique_ptr<Signer> make_test_signer(SigSuite suite) {
  return std::make_unique<TestSigner>(std::move(suite));
}

void SuiteRegistry::add(std::unique_ptr<Kem> kem) {
  auto id = kem->suite().suite_id;
  if (!kems_.emplace(id, std::move(kem)).second)
    throw CryptoError("duplicate KEM suite '" + id + "'");
}

void SuiteRegistry::add(std::unique_ptr<Signer> signer) {
  auto id = signer->suite().suite_id;
  if (!sigs_.emplace(id, std::move(signer)).second)
    throw CryptoError("duplicate signature suite '" + id + "'");
}

const Kem& SuiteRegistry::kem(const std::string& suite_id) const {
  auto it = kems_.find(suite_id);
  if (it == kems_.end()) throw UnknownSuiteError(suite_id);
  return *it->second;
}

const Signer& SuiteRegistry::signer(const std::string& suite_id) const {
  auto it = sigs_.find(suite_id);
  if (it == sigs_.end()) throw UnknownSuiteError(suite_id);
  return *it->second;
}

SuiteRegistry SuiteRegistry::with_test_suites() {
  SuiteRegistry r;
  r.add(make_test_kem({"kem-a", 32, 64, 48, 32}));
  r.add(make_test_kem({"kem-b", 32, 64, 64, 32}));
  r.add(make_test_signer({"sig-a", 32, 64, 64}));
  r.add(make_test_signer({"sig-b", 32, 64, 96}));
  return r;
}

Psk::Psk(Bytes bytes) : bytes_(std::move(bytes)) {
  if (bytes_.size() > 64) throw ValidationError("psk", "must be at most 64 octets");
}

KeyMaterial hybridize(std::span<const KeyMaterial> keys) {
  if (keys.size() < 2) throw CryptoError("hybridize needs at least two keys");
  Bytes out = keys.front().bytes();
  for (const auto& k : keys.subspan(1)) {
    if (k.size() != out.size()) throw CryptoError("hybridize: key length mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] ^= k.bytes()[i];
  }
  return KeyMaterial(std::move(out));
}

KeyMaterial XorKdf::combine(const KeyMaterial& rnd1, const KeyMaterial& rnd2,
                            const Psk& psk) const {
  if (rnd1.size() != rnd2.size()) throw CryptoError("kdf: input length mismatch");
  Bytes out = rnd1.bytes();
  const auto& p = psk.bytes();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] ^= rnd2.bytes()[i];
    if (i < p.size()) out[i] ^= p[i];
  }
  return KeyMaterial(std::move(out));
}

KeyMaterial HmacKdf::combine(const KeyMaterial& rnd1, const KeyMaterial& rnd2,
                             const Psk& psk) const {
  if (rnd1.size() != rnd2.size()) throw CryptoError("kdf: input length mismatch");
  auto prk = hmac_sha256(psk.bytes(), concat({rnd1.view(), rnd2.view()}));
  return KeyMaterial(expand(prk, "multipath-kdf", rnd1.size()));
}

const Kdf& default_kdf() {
  static const XorKdf kdf;
  return kdf;
}

std::unique_ptr<Kdf> make_kdf(const std::string& name) {
  if (name == "xor") return std::make_unique<XorKdf>();
  if (name == "hmac-sha256") return std::make_unique<HmacKdf>();
  throw CryptoError("unknown KDF '" + name + "'");
}

KeyMaterial kdf_combine(const KeyMaterial& rnd1, const KeyMaterial& rnd2, const Psk& psk,
                        const Kdf& kdf) {
  return kdf.combine(rnd1, rnd2, psk);
}

Bytes otp_wrap(const KeyMaterial& payload, const KeyMaterial& pad) {
  if (payload.size() != pad.size()) throw CryptoError("otp: pad length mismatch");
  Bytes ct = payload.bytes();
  for (std::size_t i = 0; i < ct.size(); ++i) ct[i] ^= pad.bytes()[i];
  return ct;
}

KeyMaterial otp_unwrap(ByteView ciphertext, const KeyMaterial& pad) {
  if (ciphertext.size() != pad.size()) throw CryptoError("otp: pad length mismatch");
  Bytes pt(ciphertext.begin(), ciphertext.end());
  for (std::size_t i = 0; i < pt.size(); ++i) pt[i] ^= pad.bytes()[i];
  return KeyMaterial(std::move(pt));
}

}  // namespace qkdnet::crypto
