#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "qkdnet/kms.hpp"

// Request/response framing for talking to a Kms over a byte transport.
// Request: verb octet + canonical body. Response: status octet (0 = ok,
// otherwise an Errc) + body, or message and optional retry hint on error.
namespace qkdnet::kms {

enum class Verb : std::uint8_t {
  open_connect = 1,
  get_key = 2,
  close = 3,
  get_key_014 = 4,
  get_key_with_ids = 5,
  push_key = 6,
};

class KmsService {
 public:
  explicit KmsService(Kms& kms) : kms_(kms) {}
  // Never throws for bad input; malformed requests get invalid_request.
  Bytes handle(ByteView request);

 private:
  Bytes dispatch(Reader& r);
  Kms& kms_;
};

class KmsClient {
 public:
  using Transport = std::function<Bytes(const Bytes&)>;

  explicit KmsClient(Transport transport) : transport_(std::move(transport)) {}
  static KmsClient loopback(KmsService& service);

  Ksid open_connect(const NodeId& source, const NodeId& destination, const Qos& qos,
                    std::optional<Ksid> ksid = std::nullopt);
  DeliveredKey get_key(const Ksid& ksid);
  void close(const Ksid& ksid);
  std::vector<DeliveredKey> get_key_014(const NodeId& requester, const NodeId& peer,
                                        std::size_t number, std::size_t size,
                                        const std::optional<std::string>& supplier = std::nullopt,
                                        Ownership ownership = Ownership::any);
  std::vector<DeliveredKey> get_key_with_ids(
      const NodeId& requester, const NodeId& peer, const std::vector<KeyId>& ids,
      const std::optional<std::string>& supplier = std::nullopt);
  PushResult push_key(const std::string& supplier_id, const KeyEntry& entry);

 private:
  Reader call(Verb verb, const Writer& body, Bytes& storage);
  Transport transport_;
};

}  // namespace qkdnet::kms
