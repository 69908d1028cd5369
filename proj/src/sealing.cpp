#include "qkdnet/sealing.hpp"

namespace qkdnet::crypto {

namespace {

std::string payload_info(const std::string& suite) { return "payload:" + suite; }

void xor_into(Bytes& dst, ByteView src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] ^= src[i];
}

}  // namespace

std::string to_string(OpenStatus s) {
  switch (s) {
    case OpenStatus::ok: return "ok";
    case OpenStatus::bad_signature: return "bad_signature";
    case OpenStatus::suite_mismatch: return "suite_mismatch";
    case OpenStatus::disagreement: return "disagreement";
    case OpenStatus::malformed: return "malformed";
  }
  return "malformed";
}

KeyPackage seal_package(const SuiteRegistry& suites, RandomSource& rng, const KeyId& rnd_id,
                        const KeyMaterial& payload, const std::vector<KemPublicKey>& recipients,
                        const PackageMeta& meta, const std::vector<SigSecretKey>& signers,
                        HybridMode mode) {
  if (recipients.empty()) throw CryptoError("seal: no KEM recipients");
  KeyPackage pkg;
  pkg.rnd_id = rnd_id;
  pkg.meta = meta;
  Bytes combined = payload.bytes();
  for (const auto& r : recipients) {
    auto enc = suites.kem(r.suite).encap(r.key, rng);
    auto stream = expand(enc.shared_secret, payload_info(r.suite), payload.size());
    SealedPayload sealed{r.suite, std::move(enc.ciphertext), payload.bytes()};
    xor_into(sealed.encrypted_payload, stream);
    xor_into(combined, stream);
    pkg.ciphertexts.push_back(std::move(sealed));
  }
  if (mode == HybridMode::xor_combined)
    for (auto& c : pkg.ciphertexts) c.encrypted_payload = combined;

  auto body = pkg.body_bytes();
  for (const auto& s : signers)
    pkg.signatures.push_back({s.suite, suites.signer(s.suite).sign(s.key, body)});
  return pkg;
}

OpenResult open_package(const SuiteRegistry& suites, const KeyPackage& package,
                        const std::vector<SigPublicKey>& sender_keys,
                        const std::vector<KemSecretKey>& recipient_keys, HybridMode mode) {
  OpenResult result;
  if (package.signatures.size() != sender_keys.size()) {
    result.status = OpenStatus::bad_signature;
    return result;
  }
  Bytes body;
  try {
    body = package.body_bytes();
  } catch (const Error&) {
    result.status = OpenStatus::malformed;
    return result;
  }
  for (std::size_t i = 0; i < sender_keys.size(); ++i) {
    const auto& sig = package.signatures[i];
    if (sig.sig_suite != sender_keys[i].suite ||
        !suites.signer(sig.sig_suite).verify(sender_keys[i].key, body, sig.signature)) {
      result.status = OpenStatus::bad_signature;
      return result;
    }
  }

  if (package.ciphertexts.size() != recipient_keys.size()) {
    result.status = OpenStatus::suite_mismatch;
    return result;
  }
  std::vector<Bytes> recovered;
  Bytes combined;
  for (std::size_t i = 0; i < recipient_keys.size(); ++i) {
    const auto& c = package.ciphertexts[i];
    if (c.kem_suite != recipient_keys[i].suite) {
      result.status = OpenStatus::suite_mismatch;
      return result;
    }
    const auto& kem = suites.kem(c.kem_suite);
    if (c.kem_ciphertext.size() != kem.suite().ciphertext_len ||
        c.encrypted_payload.size() < kMinKeyLength || c.encrypted_payload.size() > kMaxKeyLength) {
      result.status = OpenStatus::malformed;
      return result;
    }
    auto ss = kem.decap(recipient_keys[i].key, c.kem_ciphertext);
    result.confirmations.push_back(key_confirmation(ss));
    auto stream = expand(ss, payload_info(c.kem_suite), c.encrypted_payload.size());
    if (mode == HybridMode::cross_check) {
      Bytes pt = c.encrypted_payload;
      xor_into(pt, stream);
      recovered.push_back(std::move(pt));
    } else {
      if (i == 0) combined = c.encrypted_payload;
      if (c.encrypted_payload != package.ciphertexts[0].encrypted_payload) {
        result.status = OpenStatus::disagreement;
        return result;
      }
      xor_into(combined, stream);
    }
  }
  if (mode == HybridMode::xor_combined) recovered.push_back(std::move(combined));
  for (const auto& r : recovered) {
    if (!constant_time_equal(r, recovered.front())) {
      result.status = OpenStatus::disagreement;
      return result;
    }
  }
  result.status = OpenStatus::ok;
  result.payload = KeyMaterial(recovered.front());
  return result;
}

}  // namespace qkdnet::crypto
