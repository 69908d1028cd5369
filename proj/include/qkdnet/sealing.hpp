#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qkdnet/core.hpp"
#include "qkdnet/crypto.hpp"

// Building and opening signed KeyPackages. Shared by the emulated link engine
// and the application-based border methods.
namespace qkdnet::crypto {

struct KemPublicKey {
  std::string suite;
  Bytes key;
};
struct KemSecretKey {
  std::string suite;
  Bytes key;
};
struct SigPublicKey {
  std::string suite;
  Bytes key;
};
struct SigSecretKey {
  std::string suite;
  Bytes key;
};

/// How several KEM outputs protect one payload.
enum class HybridMode : std::uint8_t {
  // Each suite encrypts the same payload; the receiver requires all
  // recovered copies to agree.
  cross_check = 0,
  // One ciphertext payload ^ expand(ss_1) ^ ... ^ expand(ss_n), repeated in
  // every entry.
  xor_combined = 1,
};

KeyPackage seal_package(const SuiteRegistry& suites, RandomSource& rng, const KeyId& rnd_id,
                        const KeyMaterial& payload, const std::vector<KemPublicKey>& recipients,
                        const PackageMeta& meta, const std::vector<SigSecretKey>& signers,
                        HybridMode mode = HybridMode::cross_check);

enum class OpenStatus {
  ok,
  bad_signature,   // missing, extra, reordered or invalid signature
  suite_mismatch,  // ciphertext suites differ from the expected set
  disagreement,    // per-suite recovered payloads differ
  malformed,       // wrong lengths
};

std::string to_string(OpenStatus s);

struct OpenResult {
  OpenStatus status = OpenStatus::malformed;
  std::optional<KeyMaterial> payload;
  std::vector<std::string> confirmations;  // key_confirmation() per suite, log only
};

/// Verifies every expected signature, then decapsulates every expected KEM.
/// No decapsulation happens unless all signatures verify.
OpenResult open_package(const SuiteRegistry& suites, const KeyPackage& package,
                        const std::vector<SigPublicKey>& sender_keys,
                        const std::vector<KemSecretKey>& recipient_keys,
                        HybridMode mode = HybridMode::cross_check);

}  // namespace qkdnet::crypto
