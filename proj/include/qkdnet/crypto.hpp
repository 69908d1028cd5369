#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>

#include "qkdnet/bytes.hpp"
#include "qkdnet/core.hpp"

namespace qkdnet {

/// Source of random octets. Deterministic in tests, OS entropy in deployment.
class RandomSource {
 public:
  virtual ~RandomSource() = default;
  virtual void fill(std::span<std::uint8_t> out) = 0;

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform01();
};

/// Seedable generator; fork() derives independent, reproducible child streams.
class DeterministicRng final : public RandomSource {
 public:
  explicit DeterministicRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}
  void fill(std::span<std::uint8_t> out) override;
  DeterministicRng fork(std::string_view label) const;
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

class OsRng final : public RandomSource {
 public:
  void fill(std::span<std::uint8_t> out) override;

 private:
  std::random_device dev_;
};

}  // namespace qkdnet

namespace qkdnet::crypto {

class CryptoError : public Error {
 public:
  using Error::Error;
};

class UnknownSuiteError : public CryptoError {
 public:
  explicit UnknownSuiteError(const std::string& id) : CryptoError("unknown suite '" + id + "'") {}
};

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(ByteView data);
Digest hmac_sha256(ByteView key, ByteView data);
/// Counter-mode HMAC-SHA256 stream of `len` octets bound to `info`.
Bytes expand(ByteView secret, std::string_view info, std::size_t len);
bool constant_time_equal(ByteView a, ByteView b);

/// 8-octet truncated hash of a decapsulated secret, rendered as hex. Written
/// to logs for key confirmation; never sent on the wire.
std::string key_confirmation(ByteView secret);

struct KemSuite {
  std::string suite_id;
  std::size_t public_key_len = 0;
  std::size_t secret_key_len = 0;
  std::size_t ciphertext_len = 0;
  std::size_t shared_secret_len = 0;
};

struct SigSuite {
  std::string suite_id;
  std::size_t public_key_len = 0;
  std::size_t secret_key_len = 0;
  std::size_t signature_len = 0;
};

struct KeyPair {
  Bytes public_key;
  Bytes secret_key;
};

struct Encapsulation {
  Bytes ciphertext;
  Bytes shared_secret;
};

class Kem {
 public:
  virtual ~Kem() = default;
  virtual const KemSuite& suite() const = 0;
  virtual KeyPair keygen(RandomSource& rng) const = 0;
  virtual Encapsulation encap(ByteView public_key, RandomSource& rng) const = 0;
  // A corrupted ciphertext of the right length yields an unrelated secret
  // (implicit rejection); a wrong-length one throws.
  virtual Bytes decap(ByteView secret_key, ByteView ciphertext) const = 0;
};

class Signer {
 public:
  virtual ~Signer() = default;
  virtual const SigSuite& suite() const = 0;
  virtual KeyPair keygen(RandomSource& rng) const = 0;
  virtual Bytes sign(ByteView secret_key, ByteView message) const = 0;
  virtual bool verify(ByteView public_key, ByteView message, ByteView signature) const = 0;
};

// Test suites built on keyed HMAC-SHA256. They have the shape of a KEM and a
// signature scheme but NO public-key security: anyone holding the public key
// can decapsulate and sign. Suitable only for exercising protocol logic.
std::unique_ptr<Kem> make_test_kem(KemSuite suite);
std::unique_ptr<Signer> make_test_signer(SigSuite suite);

/// Name -> implementation lookup. Populated at startup, read-only afterwards.
class SuiteRegistry {
 public:
  void add(std::unique_ptr<Kem> kem);
  void add(std::unique_ptr<Signer> signer);

  const Kem& kem(const std::string& suite_id) const;
  const Signer& signer(const std::string& suite_id) const;
  bool has_kem(const std::string& suite_id) const { return kems_.count(suite_id) != 0; }
  bool has_signer(const std::string& suite_id) const { return sigs_.count(suite_id) != 0; }

  // kem-a, kem-b, sig-a, sig-b.
  static SuiteRegistry with_test_suites();

 private:
  std::map<std::string, std::unique_ptr<Kem>> kems_;
  std::map<std::string, std::unique_ptr<Signer>> sigs_;
};

/// Pre-shared key mixed into the multi-path KDF; up to 64 octets, may be empty.
class Psk {
 public:
  Psk() = default;
  explicit Psk(Bytes bytes);
  const Bytes& bytes() const { return bytes_; }
  bool empty() const { return bytes_.empty(); }

 private:
  Bytes bytes_;
};

/// Bytewise XOR of two or more equal-length keys.
KeyMaterial hybridize(std::span<const KeyMaterial> keys);

class Kdf {
 public:
  virtual ~Kdf() = default;
  virtual std::string name() const = 0;
  virtual KeyMaterial combine(const KeyMaterial& rnd1, const KeyMaterial& rnd2,
                              const Psk& psk) const = 0;
};

/// rnd1 ^ rnd2 ^ pad(psk), psk truncated or zero-extended to the key length.
class XorKdf final : public Kdf {
 public:
  std::string name() const override { return "xor"; }
  KeyMaterial combine(const KeyMaterial& rnd1, const KeyMaterial& rnd2,
                      const Psk& psk) const override;
};

/// HMAC-SHA256 extract-and-expand over rnd1 || rnd2, salted with the PSK.
class HmacKdf final : public Kdf {
 public:
  std::string name() const override { return "hmac-sha256"; }
  KeyMaterial combine(const KeyMaterial& rnd1, const KeyMaterial& rnd2,
                      const Psk& psk) const override;
};

const Kdf& default_kdf();
std::unique_ptr<Kdf> make_kdf(const std::string& name);

KeyMaterial kdf_combine(const KeyMaterial& rnd1, const KeyMaterial& rnd2, const Psk& psk,
                        const Kdf& kdf = default_kdf());

/// One-time pad. The pad must be single-use; the KMS enforces that.
Bytes otp_wrap(const KeyMaterial& payload, const KeyMaterial& pad);
KeyMaterial otp_unwrap(ByteView ciphertext, const KeyMaterial& pad);

}  // namespace qkdnet::crypto
