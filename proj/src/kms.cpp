#include "qkdnet/kms.hpp"

#include <algorithm>

#include "qkdnet/crypto.hpp"

namespace qkdnet::kms {

namespace {

constexpr std::uint8_t kRecordEntry = 0;
constexpr std::uint8_t kRecordConsumed = 1;

}  // namespace

std::string to_string(Errc e) {
  switch (e) {
    case Errc::no_key_available: return "no_key_available";
    case Errc::unknown_ksid: return "unknown_ksid";
    case Errc::qos_unsatisfiable: return "qos_unsatisfiable";
    case Errc::unknown_key_id: return "unknown_key_id";
    case Errc::already_consumed: return "already_consumed";
    case Errc::integrity_alarm: return "integrity_alarm";
    case Errc::unknown_supplier: return "unknown_supplier";
    case Errc::invalid_request: return "invalid_request";
    case Errc::insufficient_suppliers: return "insufficient_suppliers";
  }
  return "unknown";
}

bool owned_by(const KeyId& id, const NodeId& self, const NodeId& peer) {
  const bool low_side = self < peer;
  const bool low_owns = (id.raw()[15] & 1) == 0;
  return low_side == low_owns;
}

Kms::Kms(NodeId self, Clock clock) : self_(std::move(self)), clock_(std::move(clock)) {
  self_.validate();
}

Kms::~Kms() = default;

void Kms::register_supplier(const SupplierInfo& info) {
  std::lock_guard lock(mu_);
  if (info.supplier_id.empty()) throw ValidationError("supplier_id", "must be non-empty");
  info.peer.validate();
  suppliers_[info.supplier_id] = info;
}

bool Kms::has_supplier(const std::string& supplier_id) const {
  std::lock_guard lock(mu_);
  return suppliers_.count(supplier_id) != 0;
}

std::vector<SupplierInfo> Kms::suppliers_for(const NodeId& peer) const {
  std::lock_guard lock(mu_);
  std::vector<SupplierInfo> out;
  for (const auto& [id, s] : suppliers_)
    if (s.peer == peer) out.push_back(s);
  return out;
}

PushResult Kms::push_key(const std::string& supplier_id, const KeyEntry& entry) {
  std::lock_guard lock(mu_);
  return push_locked(supplier_id, entry, true);
}

PushResult Kms::push_locked(const std::string& supplier_id, const KeyEntry& entry, bool persist) {
  entry.validate();
  if (!suppliers_.count(supplier_id))
    throw KmsError(Errc::unknown_supplier, "supplier '" + supplier_id + "' not registered");
  if (entry.supplier_id != supplier_id)
    throw KmsError(Errc::invalid_request, "entry supplier_id does not match pushing supplier");
  SlotKey key{entry.key_id, supplier_id};
  if (auto it = slots_.find(key); it != slots_.end()) {
    if (it->second.entry.key == entry.key && it->second.entry.peer == entry.peer)
      return PushResult::duplicate;
    ++integrity_alarms_;
    throw KmsError(Errc::integrity_alarm,
                   "conflicting key bytes for " + entry.key_id.to_string() + " from " + supplier_id);
  }
  auto seq = next_seq_++;
  slots_.emplace(key, Slot{entry, seq, false});
  auto& part = partitions_[{supplier_id, entry.peer}];
  part.fifo.emplace(seq, entry.key_id);
  part.lex.insert(entry.key_id);
  if (persist) persist_record(kRecordEntry, serialize(entry));
  return PushResult::stored;
}

void Kms::consume_locked(Slot& slot, const std::string& via, bool persist) {
  slot.consumed = true;
  auto& part = partitions_[{slot.entry.supplier_id, slot.entry.peer}];
  part.fifo.erase(slot.seq);
  part.lex.erase(slot.entry.key_id);
  ledger_.push_back({now(), slot.entry.key_id, slot.entry.supplier_id, slot.entry.peer, via});
  if (persist) {
    Writer w;
    encode(w, slot.entry.key_id);
    w.str(slot.entry.supplier_id);
    persist_record(kRecordConsumed, w.data());
  }
}

std::optional<KeyId> Kms::next_fifo_locked(const PartitionKey& pk, std::size_t key_len,
                                           Ownership ownership) {
  auto pit = partitions_.find(pk);
  if (pit == partitions_.end()) return std::nullopt;
  const auto t = now();
  for (const auto& [seq, id] : pit->second.fifo) {
    const auto& e = slots_.at({id, pk.first}).entry;
    if (!e.validity.contains(t)) continue;
    if (key_len != 0 && e.key.size() != key_len) continue;
    if (ownership == Ownership::split && !owned_by(id, self_, pk.second)) continue;
    return id;
  }
  return std::nullopt;
}

std::optional<KeyId> Kms::lowest_lex_locked(const PartitionKey& pk, std::size_t key_len) {
  auto pit = partitions_.find(pk);
  if (pit == partitions_.end()) return std::nullopt;
  const auto t = now();
  for (const auto& id : pit->second.lex) {
    const auto& e = slots_.at({id, pk.first}).entry;
    if (!e.validity.contains(t)) continue;
    if (key_len != 0 && e.key.size() != key_len) continue;
    return id;
  }
  return std::nullopt;
}

std::int64_t Kms::retry_hint_ms(const std::string& supplier_id) const {
  auto it = suppliers_.find(supplier_id);
  if (it == suppliers_.end() || it->second.rate_bps == 0) return 1000;
  return static_cast<std::int64_t>(8000.0 * it->second.key_len /
                                   static_cast<double>(it->second.rate_bps));
}

void Kms::check_requester(const NodeId& requester) const {
  if (requester != self_)
    throw KmsError(Errc::invalid_request,
                   "requester " + requester.to_string() + " is not served by " + self_.to_string());
}

Ksid Kms::open_connect(const NodeId& source, const NodeId& destination, const Qos& qos,
                       std::optional<Ksid> ksid) {
  std::lock_guard lock(mu_);
  if (source == destination || (source != self_ && destination != self_))
    throw KmsError(Errc::invalid_request, "session must have this node as one endpoint");
  const NodeId& peer = source == self_ ? destination : source;

  std::vector<const SupplierInfo*> candidates;
  for (const auto& [id, s] : suppliers_) {
    if (s.peer != peer || s.key_len != qos.key_len) continue;
    if (qos.supplier && *qos.supplier != id) continue;
    candidates.push_back(&s);
  }
  if (candidates.empty())
    throw KmsError(Errc::qos_unsatisfiable, "no supplier for " + peer.to_string() + " with " +
                                                std::to_string(qos.key_len) + "-byte keys");
  // Sessions draw from one supplier; the lexicographically first qualifying one.
  const SupplierInfo* chosen = nullptr;
  for (const auto* s : candidates)
    if (s->rate_bps >= qos.rate_bps) {
      chosen = s;
      break;
    }
  if (!chosen)
    throw KmsError(Errc::qos_unsatisfiable,
                   "requested " + std::to_string(qos.rate_bps) + " bit/s exceeds supply");

  Ksid id;
  if (ksid) {
    if (sessions_.count(*ksid) || closed_.count(*ksid))
      throw KmsError(Errc::invalid_request, "ksid already used on this node");
    id = *ksid;
  } else {
    Writer w;
    w.str(self_.to_string());
    w.u64(next_ksid_++);
    auto d = crypto::sha256(w.data());
    Ksid::Raw raw{};
    std::copy_n(d.begin(), 16, raw.begin());
    id = Ksid(raw);
  }
  sessions_.emplace(id, Session{peer, qos, chosen->supplier_id});
  return id;
}

DeliveredKey Kms::get_key(const Ksid& ksid) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(ksid);
  if (it == sessions_.end()) throw KmsError(Errc::unknown_ksid, "unknown ksid " + ksid.to_string());
  const auto& s = it->second;
  auto next = next_fifo_locked({s.supplier, s.peer}, s.qos.key_len, Ownership::any);
  if (!next)
    throw KmsError(Errc::no_key_available, "no key available for session",
                   retry_hint_ms(s.supplier));
  auto& slot = slots_.at({*next, s.supplier});
  consume_locked(slot, "004", true);
  return {slot.entry.key_id, slot.entry.key, slot.entry.supplier_id, slot.entry.label};
}

void Kms::close(const Ksid& ksid) {
  std::lock_guard lock(mu_);
  if (!sessions_.erase(ksid)) throw KmsError(Errc::unknown_ksid, "unknown ksid " + ksid.to_string());
  closed_.insert(ksid);
}

std::vector<DeliveredKey> Kms::get_key_014(const NodeId& requester, const NodeId& peer,
                                           std::size_t number, std::size_t size,
                                           const std::optional<std::string>& supplier,
                                           Ownership ownership) {
  std::lock_guard lock(mu_);
  check_requester(requester);
  if (number == 0) throw KmsError(Errc::invalid_request, "number must be >= 1");
  if (size < kMinKeyLength || size > kMaxKeyLength)
    throw KmsError(Errc::invalid_request, "unsupported key size " + std::to_string(size));
  std::vector<std::string> pools;
  for (const auto& [id, s] : suppliers_)
    if (s.peer == peer && (!supplier || *supplier == id)) pools.push_back(id);
  if (pools.empty())
    throw KmsError(Errc::unknown_supplier, "no supplier for peer " + peer.to_string());

  // Pick everything first so a short store consumes nothing.
  std::vector<SlotKey> picked;
  for (const auto& pool : pools) {
    auto pit = partitions_.find({pool, peer});
    if (pit == partitions_.end()) continue;
    const auto t = now();
    for (const auto& [seq, id] : pit->second.fifo) {
      if (picked.size() == number) break;
      const auto& e = slots_.at({id, pool}).entry;
      if (!e.validity.contains(t) || e.key.size() != size) continue;
      if (ownership == Ownership::split && !owned_by(id, self_, peer)) continue;
      picked.emplace_back(id, pool);
    }
    if (picked.size() == number) break;
  }
  if (picked.size() < number)
    throw KmsError(Errc::no_key_available, "not enough keys for " + peer.to_string(),
                   retry_hint_ms(pools.front()));
  std::vector<DeliveredKey> out;
  for (const auto& k : picked) {
    auto& slot = slots_.at(k);
    consume_locked(slot, "014", true);
    out.push_back({slot.entry.key_id, slot.entry.key, slot.entry.supplier_id, slot.entry.label});
  }
  return out;
}

std::vector<DeliveredKey> Kms::get_key_with_ids(const NodeId& requester, const NodeId& peer,
                                                const std::vector<KeyId>& ids,
                                                const std::optional<std::string>& supplier) {
  std::lock_guard lock(mu_);
  check_requester(requester);
  if (ids.empty()) throw KmsError(Errc::invalid_request, "no key ids requested");
  std::vector<Slot*> found;
  for (const auto& id : ids) {
    Slot* match = nullptr;
    for (auto it = slots_.lower_bound({id, std::string()}); it != slots_.end() && it->first.first == id;
         ++it) {
      if (supplier && it->first.second != *supplier) continue;
      if (it->second.entry.peer != peer) continue;
      match = &it->second;
      break;
    }
    if (!match) throw KmsError(Errc::unknown_key_id, "unknown key id " + id.to_string());
    if (match->consumed)
      throw KmsError(Errc::already_consumed, "key " + id.to_string() + " already consumed");
    if (!match->entry.validity.contains(now()))
      throw KmsError(Errc::unknown_key_id, "key " + id.to_string() + " outside validity");
    if (std::find(found.begin(), found.end(), match) != found.end())
      throw KmsError(Errc::invalid_request, "key id requested twice");
    found.push_back(match);
  }
  std::vector<DeliveredKey> out;
  for (auto* slot : found) {
    consume_locked(*slot, "014-ids", true);
    out.push_back({slot->entry.key_id, slot->entry.key, slot->entry.supplier_id, slot->entry.label});
  }
  return out;
}

KeyEntry Kms::hybrid_entry(const NodeId& peer, const std::vector<Slot*>& inputs) const {
  std::vector<KeyMaterial> keys;
  Writer ids;
  std::string supplier = "hybrid:";
  Validity v{inputs.front()->entry.validity.start, inputs.front()->entry.validity.end};
  auto label = inputs.front()->entry.label;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& e = inputs[i]->entry;
    keys.push_back(e.key);
    encode(ids, e.key_id);
    supplier += (i ? "," : "") + e.supplier_id;
    v.start = std::max(v.start, e.validity.start);
    v.end = std::min(v.end, e.validity.end);
    if (i) label = seclevel::parallel(label, e.label);
  }
  if (v.start >= v.end)
    throw KmsError(Errc::invalid_request, "input keys have disjoint validity windows");
  auto digest = crypto::sha256(ids.data());
  KeyId::Raw raw{};
  std::copy_n(digest.begin(), 16, raw.begin());
  return KeyEntry{KeyId(raw), crypto::hybridize(keys), peer, supplier, v, label};
}

KeyEntry Kms::hybridize_stores(const NodeId& peer, std::vector<std::string> suppliers,
                               const HybridPolicy& policy,
                               std::vector<std::pair<std::string, KeyId>>* chosen) {
  std::lock_guard lock(mu_);
  std::sort(suppliers.begin(), suppliers.end());
  if (suppliers.size() < 2 ||
      std::adjacent_find(suppliers.begin(), suppliers.end()) != suppliers.end())
    throw KmsError(Errc::insufficient_suppliers, "hybridization needs two or more distinct suppliers");
  std::vector<Slot*> inputs;
  for (const auto& s : suppliers) {
    auto sit = suppliers_.find(s);
    if (sit == suppliers_.end()) throw KmsError(Errc::unknown_supplier, "unknown supplier " + s);
    if (sit->second.peer != peer)
      throw KmsError(Errc::invalid_request, "supplier " + s + " does not serve " + peer.to_string());
    auto id = lowest_lex_locked({s, peer}, policy.key_len);
    if (!id) throw KmsError(Errc::no_key_available, "supplier " + s + " is empty", retry_hint_ms(s));
    inputs.push_back(&slots_.at({*id, s}));
  }
  auto out = hybrid_entry(peer, inputs);
  for (auto* slot : inputs) consume_locked(*slot, "hybrid", true);
  if (chosen) {
    chosen->clear();
    for (auto* slot : inputs) chosen->emplace_back(slot->entry.supplier_id, slot->entry.key_id);
  }
  return out;
}

KeyEntry Kms::hybridize_with_ids(const NodeId& peer,
                                 std::vector<std::pair<std::string, KeyId>> inputs) {
  std::lock_guard lock(mu_);
  std::sort(inputs.begin(), inputs.end());
  if (inputs.size() < 2) throw KmsError(Errc::insufficient_suppliers, "need two or more inputs");
  for (std::size_t i = 1; i < inputs.size(); ++i)
    if (inputs[i].first == inputs[i - 1].first)
      throw KmsError(Errc::insufficient_suppliers, "inputs must come from distinct suppliers");
  std::vector<Slot*> slots;
  for (const auto& [supplier, id] : inputs) {
    auto it = slots_.find({id, supplier});
    if (it == slots_.end() || it->second.entry.peer != peer)
      throw KmsError(Errc::unknown_key_id, "unknown key id " + id.to_string());
    if (it->second.consumed)
      throw KmsError(Errc::already_consumed, "key " + id.to_string() + " already consumed");
    slots.push_back(&it->second);
  }
  auto out = hybrid_entry(peer, slots);
  for (auto* slot : slots) consume_locked(*slot, "hybrid", true);
  return out;
}

std::size_t Kms::available(const std::string& supplier_id, const NodeId& peer,
                           std::size_t key_len, Ownership ownership) const {
  std::lock_guard lock(mu_);
  auto pit = partitions_.find({supplier_id, peer});
  if (pit == partitions_.end()) return 0;
  const auto t = now();
  std::size_t n = 0;
  for (const auto& [seq, id] : pit->second.fifo) {
    const auto& e = slots_.at({id, supplier_id}).entry;
    if (!e.validity.contains(t)) continue;
    if (key_len != 0 && e.key.size() != key_len) continue;
    if (ownership == Ownership::split && !owned_by(id, self_, peer)) continue;
    ++n;
  }
  return n;
}

bool Kms::holds(const KeyId& key_id) const {
  std::lock_guard lock(mu_);
  auto it = slots_.lower_bound({key_id, std::string()});
  return it != slots_.end() && it->first.first == key_id;
}

bool Kms::holds(const KeyId& key_id, const std::string& supplier_id) const {
  std::lock_guard lock(mu_);
  return slots_.count({key_id, supplier_id}) != 0;
}

std::optional<KeyEntry> Kms::find(const KeyId& key_id, const std::string& supplier_id) const {
  std::lock_guard lock(mu_);
  auto it = slots_.find({key_id, supplier_id});
  if (it == slots_.end()) return std::nullopt;
  return it->second.entry;
}

bool Kms::consumed(const KeyId& key_id, const std::string& supplier_id) const {
  std::lock_guard lock(mu_);
  auto it = slots_.find({key_id, supplier_id});
  return it != slots_.end() && it->second.consumed;
}

std::vector<ListingRow> Kms::listing() const {
  std::lock_guard lock(mu_);
  std::vector<std::pair<std::uint64_t, ListingRow>> rows;
  for (const auto& [k, slot] : slots_)
    rows.push_back({slot.seq,
                    {slot.entry.key_id, slot.entry.supplier_id, slot.entry.peer,
                     slot.entry.label.to_string(), slot.consumed}});
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<ListingRow> out;
  for (auto& r : rows) out.push_back(std::move(r.second));
  return out;
}

std::vector<LedgerEvent> Kms::ledger() const {
  std::lock_guard lock(mu_);
  return ledger_;
}

std::uint64_t Kms::integrity_alarms() const {
  std::lock_guard lock(mu_);
  return integrity_alarms_;
}

std::size_t Kms::size() const {
  std::lock_guard lock(mu_);
  return slots_.size();
}

void Kms::persist_record(std::uint8_t kind, const Bytes& body) {
  if (!persist_) return;
  Writer w;
  w.u32(static_cast<std::uint32_t>(body.size() + 1));
  w.u8(kind);
  w.raw(body);
  persist_->write(reinterpret_cast<const char*>(w.data().data()),
                  static_cast<std::streamsize>(w.data().size()));
  persist_->flush();
}

void Kms::enable_persistence(const std::string& path) {
  std::lock_guard lock(mu_);
  persist_.emplace(path, std::ios::binary | std::ios::app);
  if (!*persist_) throw Error("cannot open persistence file " + path);
}

void Kms::recover(const std::string& path) {
  std::lock_guard lock(mu_);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open persistence file " + path);
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(data);
  while (!r.done()) {
    auto len = r.u32();
    if (len == 0) throw DecodeError("empty persistence record");
    auto record = r.raw(len);
    Reader body(ByteView(record).subspan(1));
    if (record[0] == kRecordEntry) {
      auto entry = decode<KeyEntry>(body);
      body.expect_done();
      if (!suppliers_.count(entry.supplier_id))
        suppliers_[entry.supplier_id] = SupplierInfo{entry.supplier_id, entry.peer, 256,
                                                     static_cast<std::uint32_t>(entry.key.size())};
      push_locked(entry.supplier_id, entry, false);
    } else if (record[0] == kRecordConsumed) {
      auto id = decode<KeyId>(body);
      auto supplier = body.str();
      body.expect_done();
      auto it = slots_.find({id, supplier});
      if (it == slots_.end()) throw DecodeError("consumption record for unknown key");
      if (!it->second.consumed) consume_locked(it->second, "recovered", false);
    } else {
      throw DecodeError("unknown persistence record kind");
    }
  }
}

}  // namespace qkdnet::kms
