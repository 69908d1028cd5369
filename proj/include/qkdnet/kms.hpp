#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qkdnet/core.hpp"

namespace qkdnet::kms {

enum class Errc : std::uint8_t {
  no_key_available = 1,
  unknown_ksid,
  qos_unsatisfiable,
  unknown_key_id,
  already_consumed,
  integrity_alarm,
  unknown_supplier,
  invalid_request,
  insufficient_suppliers,
};

std::string to_string(Errc e);

class KmsError : public Error {
 public:
  KmsError(Errc code, const std::string& what, std::optional<std::int64_t> retry_after_ms = {})
      : Error(what), code_(code), retry_after_ms_(retry_after_ms) {}
  Errc code() const { return code_; }
  // Set for no_key_available: when the supplier is expected to have produced
  // another key.
  std::optional<std::int64_t> retry_after_ms() const { return retry_after_ms_; }

 private:
  Errc code_;
  std::optional<std::int64_t> retry_after_ms_;
};

/// A key source feeding this store for one peer (a link, bridge or method).
struct SupplierInfo {
  std::string supplier_id;
  NodeId peer;
  std::uint64_t rate_bps = 256;
  std::uint32_t key_len = kDefaultKeyLength;
};

struct Qos {
  std::uint64_t rate_bps = 256;
  std::uint32_t key_len = kDefaultKeyLength;
  std::optional<std::string> supplier;  // bind the session to one supplier
};

struct DeliveredKey {
  KeyId key_id;
  KeyMaterial key;
  std::string supplier_id;
  seclevel::SecurityExpr label{seclevel::SecurityLabel{}};
};

/// Which keys a node may pick as master. With `split`, each key of a
/// (supplier, peer) pool belongs to exactly one of the two endpoints, decided
/// by the key id, so both ends can act as master concurrently without ever
/// choosing the same key.
enum class Ownership { any, split };

bool owned_by(const KeyId& id, const NodeId& self, const NodeId& peer);

struct HybridPolicy {
  std::uint32_t key_len = kDefaultKeyLength;
};

enum class PushResult { stored, duplicate };

struct LedgerEvent {
  std::int64_t time = 0;
  KeyId key_id;
  std::string supplier_id;
  NodeId peer;
  std::string via;  // "004", "014", "014-ids", "hybrid"
};

struct ListingRow {
  KeyId key_id;
  std::string supplier_id;
  NodeId peer;
  std::string label;
  bool consumed = false;
};

/// Per-node key store and delivery service. Every public operation is
/// linearizable; consumption is recorded before a key leaves the store.
class Kms {
 public:
  using Clock = std::function<std::int64_t()>;  // Unix seconds

  Kms(NodeId self, Clock clock);
  ~Kms();
  Kms(const Kms&) = delete;
  Kms& operator=(const Kms&) = delete;

  const NodeId& self() const { return self_; }

  void register_supplier(const SupplierInfo& info);
  bool has_supplier(const std::string& supplier_id) const;
  std::vector<SupplierInfo> suppliers_for(const NodeId& peer) const;

  // Idempotent for identical bytes; conflicting bytes raise integrity_alarm.
  PushResult push_key(const std::string& supplier_id, const KeyEntry& entry);

  // Session (004-style) delivery. The master opens without a ksid; the slave
  // opens with the master's ksid. Both then walk the bound supplier's keys in
  // arrival order.
  Ksid open_connect(const NodeId& source, const NodeId& destination, const Qos& qos,
                    std::optional<Ksid> ksid = std::nullopt);
  DeliveredKey get_key(const Ksid& ksid);
  void close(const Ksid& ksid);

  // Fetch (014-style) delivery: master takes fresh keys, slave retrieves by id.
  std::vector<DeliveredKey> get_key_014(const NodeId& requester, const NodeId& peer,
                                        std::size_t number, std::size_t size,
                                        const std::optional<std::string>& supplier = std::nullopt,
                                        Ownership ownership = Ownership::any);
  std::vector<DeliveredKey> get_key_with_ids(
      const NodeId& requester, const NodeId& peer, const std::vector<KeyId>& ids,
      const std::optional<std::string>& supplier = std::nullopt);

  // Consumes the lexicographically lowest unconsumed key of every listed
  // supplier and returns their XOR as a new entry (not stored). All or nothing.
  // `chosen`, when given, receives the consumed (supplier, key id) pairs.
  KeyEntry hybridize_stores(const NodeId& peer, std::vector<std::string> suppliers,
                            const HybridPolicy& policy,
                            std::vector<std::pair<std::string, KeyId>>* chosen = nullptr);
  // The peer side of a hybridization whose inputs were chosen remotely.
  KeyEntry hybridize_with_ids(const NodeId& peer,
                              std::vector<std::pair<std::string, KeyId>> inputs);

  std::size_t available(const std::string& supplier_id, const NodeId& peer,
                        std::size_t key_len = 0, Ownership ownership = Ownership::any) const;
  bool holds(const KeyId& key_id) const;
  bool holds(const KeyId& key_id, const std::string& supplier_id) const;
  std::optional<KeyEntry> find(const KeyId& key_id, const std::string& supplier_id) const;
  bool consumed(const KeyId& key_id, const std::string& supplier_id) const;

  std::vector<ListingRow> listing() const;
  std::vector<LedgerEvent> ledger() const;
  std::uint64_t integrity_alarms() const;
  std::size_t size() const;

  // Append-only persistence: every stored entry and every consumption.
  void enable_persistence(const std::string& path);
  // Rebuilds state from a persistence file (does not write to it).
  void recover(const std::string& path);

 private:
  struct Slot {
    KeyEntry entry;
    std::uint64_t seq = 0;
    bool consumed = false;
  };
  using SlotKey = std::pair<KeyId, std::string>;  // (key_id, supplier_id)
  using PartitionKey = std::pair<std::string, NodeId>;  // (supplier_id, peer)
  struct Partition {
    std::map<std::uint64_t, KeyId> fifo;  // unconsumed, arrival order
    std::set<KeyId> lex;                  // unconsumed, id order
  };
  struct Session {
    NodeId peer;
    Qos qos;
    std::string supplier;
  };

  std::int64_t now() const { return clock_(); }
  PushResult push_locked(const std::string& supplier_id, const KeyEntry& entry, bool persist);
  void consume_locked(Slot& slot, const std::string& via, bool persist);
  std::optional<KeyId> next_fifo_locked(const PartitionKey& pk, std::size_t key_len,
                                        Ownership ownership);
  std::optional<KeyId> lowest_lex_locked(const PartitionKey& pk, std::size_t key_len);
  KeyEntry hybrid_entry(const NodeId& peer, const std::vector<Slot*>& inputs) const;
  std::int64_t retry_hint_ms(const std::string& supplier_id) const;
  void check_requester(const NodeId& requester) const;
  void persist_record(std::uint8_t kind, const Bytes& body);

  mutable std::mutex mu_;
  NodeId self_;
  Clock clock_;
  std::map<std::string, SupplierInfo> suppliers_;
  std::map<SlotKey, Slot> slots_;
  std::map<PartitionKey, Partition> partitions_;
  std::map<Ksid, Session> sessions_;
  std::set<Ksid> closed_;
  std::vector<LedgerEvent> ledger_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t next_ksid_ = 0;
  std::uint64_t integrity_alarms_ = 0;
  std::optional<std::ofstream> persist_;
};

}  // namespace qkdnet::kms
