#include "qkdnet/border.hpp"

#include <algorithm>

#include "qkdnet/kernels.hpp"

namespace qkdnet::border {

namespace {

constexpr std::uint8_t kOffer = 1;  // hybrid inputs, or a package / block
constexpr std::uint8_t kAck = 2;
constexpr std::uint8_t kNack = 3;

constexpr netsim::SimTime kPurgeInterval = netsim::from_seconds(1);

Bytes with_type(std::uint8_t type, ByteView body) {
  Bytes msg;
  msg.reserve(body.size() + 1);
  msg.push_back(type);
  msg.insert(msg.end(), body.begin(), body.end());
  return msg;
}

Bytes id_message(std::uint8_t type, const KeyId& id) {
  Writer w;
  w.u8(type);
  encode(w, id);
  return std::move(w).take();
}

std::int64_t unix_now(const netsim::Scheduler& s) { return netsim::unix_seconds(s.now()); }

seclevel::SecurityExpr mc_label(const std::set<std::string>& sc) {
  return seclevel::SecurityExpr(seclevel::SecurityLabel(seclevel::Base::MC, sc));
}

void register_bridge(kms::Kms& a, kms::Kms& b, const std::string& supplier, std::uint64_t rate,
                     std::uint32_t key_len) {
  a.register_supplier({supplier, b.self(), rate, key_len});
  b.register_supplier({supplier, a.self(), rate, key_len});
}

std::unique_ptr<crypto::Kdf> kdf_named(const std::string& name) {
  try {
    return crypto::make_kdf(name);
  } catch (const crypto::CryptoError&) {
    throw ValidationError("kdf", "unknown kdf '" + name + "'");
  }
}

void check_suites(const crypto::SuiteRegistry& suites, const std::vector<std::string>& kems,
                  const std::vector<std::string>& sigs) {
  for (const auto& k : kems)
    if (!suites.has_kem(k)) throw ValidationError("kem_suite", "unknown suite " + k);
  for (const auto& s : sigs)
    if (!suites.has_signer(s)) throw ValidationError("sig_suite", "unknown suite " + s);
}

}  // namespace

Counters& Counters::operator+=(const Counters& o) {
  sent += o.sent;
  delivered += o.delivered;
  lost += o.lost;
  retransmits += o.retransmits;
  accepted += o.accepted;
  dos += o.dos;
  replays += o.replays;
  unknown_sender += o.unknown_sender;
  integrity_alarms += o.integrity_alarms;
  expired += o.expired;
  return *this;
}

KemKeyPair make_kem_keys(const crypto::SuiteRegistry& suites, const std::string& suite,
                         RandomSource& rng) {
  auto kp = suites.kem(suite).keygen(rng);
  return {{suite, kp.public_key}, {suite, kp.secret_key}};
}

SigKeyPair make_sig_keys(const crypto::SuiteRegistry& suites, const std::string& suite,
                         RandomSource& rng) {
  auto kp = suites.signer(suite).keygen(rng);
  return {{suite, kp.public_key}, {suite, kp.secret_key}};
}

// ------------------------------------------------------------------ Outbox

Outbox::Outbox(netsim::Scheduler& scheduler, netsim::Endpoint endpoint, netsim::SimTime interval,
               int max_live_attempts, GiveUp give_up)
    : scheduler_(scheduler),
      endpoint_(std::move(endpoint)),
      interval_(interval),
      max_live_attempts_(max_live_attempts),
      give_up_(std::move(give_up)) {}

Outbox::~Outbox() { stop(); }

void Outbox::stop() {
  if (timer_) scheduler_.cancel(*timer_);
  timer_.reset();
}

void Outbox::send(const KeyId& id, Bytes wire) {
  endpoint_.send(wire);
  pending_[id] = Entry{std::move(wire), 0, scheduler_.now()};
  if (!timer_) timer_ = scheduler_.after(interval_, [this] { tick(); });
}

bool Outbox::acknowledge(const KeyId& id) { return pending_.erase(id) != 0; }

void Outbox::tick() {
  timer_.reset();
  std::vector<KeyId> abandoned;
  if (endpoint_.alive()) {
    const auto now = scheduler_.now();
    for (auto it = pending_.begin(); it != pending_.end();) {
      auto& e = it->second;
      if (now - e.last_sent < interval_) {
        ++it;
        continue;
      }
      if (e.live_attempts >= max_live_attempts_) {
        abandoned.push_back(it->first);
        it = pending_.erase(it);
        continue;
      }
      if (!endpoint_.send(e.wire)) break;
      ++e.live_attempts;
      e.last_sent = now;
      ++retransmits_;
      ++it;
    }
  }
  if (!pending_.empty()) timer_ = scheduler_.after(interval_, [this] { tick(); });
  for (const auto& id : abandoned) give_up_(id);
}

// ---------------------------------------------------------------- Method 1

void HybridConfig::validate() const {
  if (supplier_id.empty()) throw ValidationError("supplier_id", "must be non-empty");
  auto sorted = inputs;
  std::sort(sorted.begin(), sorted.end());
  if (sorted.size() < 2 || std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ValidationError("inputs", "need two or more distinct suppliers");
  if (std::find(sorted.begin(), sorted.end(), supplier_id) != sorted.end())
    throw ValidationError("supplier_id", "bridge cannot feed itself");
  if (key_len == 0 || key_len > kMaxKeyLength) throw ValidationError("key_len", "out of range");
  if (poll <= 0 || retransmit_interval <= 0 || slave_wait < 0)
    throw ValidationError("poll", "intervals must be positive");
}

HybridMaster::HybridMaster(netsim::Scheduler& scheduler, kms::Kms& store, netsim::Endpoint endpoint,
                           HybridConfig config)
    : scheduler_(scheduler),
      store_(store),
      endpoint_(std::move(endpoint)),
      config_(std::move(config)),
      outbox_(scheduler_, endpoint_, config_.retransmit_interval, config_.max_live_attempts,
              [this](const KeyId& id) {
                entries_.erase(id);
                ++counters_.lost;
              }) {
  config_.validate();
  std::weak_ptr<bool> guard = alive_;
  endpoint_.on_receive([this, guard](const netsim::Message& m) {
    if (guard.lock()) on_message(m.payload);
  });
}

HybridMaster::~HybridMaster() {
  *alive_ = false;
  stop();
}

void HybridMaster::start() {
  if (!timer_) timer_ = scheduler_.after(config_.poll, [this] { tick(); });
}

// Offers already sent keep being retransmitted until confirmed or given up.
void HybridMaster::stop() {
  if (timer_) scheduler_.cancel(*timer_);
  timer_.reset();
}

void HybridMaster::tick() {
  timer_.reset();
  pair_available();
  timer_ = scheduler_.after(config_.poll, [this] { tick(); });
}

std::size_t HybridMaster::pair_available() {
  const auto& peer = endpoint_.remote();
  std::size_t made = 0;
  while (entries_.size() < config_.max_pending && endpoint_.alive()) {
    bool ready = true;
    for (const auto& s : config_.inputs)
      if (store_.available(s, peer, config_.key_len) == 0) ready = false;
    if (!ready) break;
    std::vector<std::pair<std::string, KeyId>> chosen;
    KeyEntry entry;
    try {
      entry = store_.hybridize_stores(peer, config_.inputs, {config_.key_len}, &chosen);
    } catch (const kms::KmsError&) {
      break;
    }
    entry.supplier_id = config_.supplier_id;
    Writer w;
    w.u8(kOffer);
    encode(w, entry.key_id);
    w.u32(static_cast<std::uint32_t>(chosen.size()));
    for (const auto& [supplier, id] : chosen) {
      w.str(supplier);
      encode(w, id);
    }
    const auto id = entry.key_id;
    entries_.emplace(id, std::move(entry));
    outbox_.send(id, std::move(w).take());
    ++counters_.sent;
    ++made;
  }
  return made;
}

void HybridMaster::on_message(const Bytes& payload) {
  std::uint8_t type = 0;
  KeyId id;
  try {
    Reader r(payload);
    type = r.u8();
    id = decode<KeyId>(r);
    r.expect_done();
  } catch (const std::exception&) {
    ++counters_.dos;
    return;
  }
  auto it = entries_.find(id);
  if (it == entries_.end()) return;  // late duplicate
  outbox_.acknowledge(id);
  if (type == kAck) {
    try {
      store_.push_key(config_.supplier_id, it->second);
      ++counters_.delivered;
      label_ = it->second.label;
    } catch (const kms::KmsError&) {
      ++counters_.integrity_alarms;
      ++counters_.lost;
    }
  } else {
    ++counters_.lost;
  }
  it->second.key.wipe();
  entries_.erase(it);
}

HybridSlave::HybridSlave(netsim::Scheduler& scheduler, kms::Kms& store, netsim::Endpoint endpoint,
                         HybridConfig config)
    : scheduler_(scheduler), store_(store), endpoint_(std::move(endpoint)), config_(std::move(config)) {
  config_.validate();
  std::weak_ptr<bool> guard = alive_;
  endpoint_.on_receive([this, guard](const netsim::Message& m) {
    if (guard.lock()) on_message(m.payload);
  });
}

HybridSlave::~HybridSlave() { *alive_ = false; }

void HybridSlave::reply(std::uint8_t type, const KeyId& id) { endpoint_.send(id_message(type, id)); }

void HybridSlave::on_message(const Bytes& payload) {
  KeyId hid;
  std::vector<std::pair<std::string, KeyId>> inputs;
  try {
    Reader r(payload);
    if (r.u8() != kOffer) throw DecodeError("unexpected message");
    hid = decode<KeyId>(r);
    auto n = r.u32();
    if (n < 2 || n > 16) throw DecodeError("bad input count");
    for (std::uint32_t i = 0; i < n; ++i) {
      auto s = r.str(256);
      inputs.emplace_back(std::move(s), decode<KeyId>(r));
    }
    r.expect_done();
  } catch (const std::exception&) {
    ++counters_.dos;
    return;
  }
  std::vector<std::string> names;
  for (const auto& in : inputs) names.push_back(in.first);
  std::sort(names.begin(), names.end());
  auto expected = config_.inputs;
  std::sort(expected.begin(), expected.end());
  if (names != expected) {
    ++counters_.dos;
    return;
  }
  if (completed_.count(hid)) {
    ++counters_.replays;
    return reply(kAck, hid);
  }
  if (waiting_.count(hid)) return;
  attempt(hid, std::move(inputs), scheduler_.now() + config_.slave_wait);
}

void HybridSlave::attempt(const KeyId& hid, std::vector<std::pair<std::string, KeyId>> inputs,
                          netsim::SimTime deadline) {
  KeyEntry entry;
  try {
    entry = store_.hybridize_with_ids(endpoint_.remote(), inputs);
  } catch (const kms::KmsError& e) {
    if (e.code() == kms::Errc::unknown_key_id && scheduler_.now() + config_.poll <= deadline) {
      // Inputs may still be in flight on their own links.
      waiting_.insert(hid);
      std::weak_ptr<bool> guard = alive_;
      scheduler_.after(config_.poll, [this, guard, hid, inputs = std::move(inputs), deadline]() mutable {
        if (guard.lock()) attempt(hid, std::move(inputs), deadline);
      });
      return;
    }
    waiting_.erase(hid);
    return reply(kNack, hid);
  }
  waiting_.erase(hid);
  if (entry.key_id != hid) {
    ++counters_.integrity_alarms;
    entry.key.wipe();
    return reply(kNack, hid);
  }
  entry.supplier_id = config_.supplier_id;
  try {
    store_.push_key(config_.supplier_id, entry);
  } catch (const kms::KmsError&) {
    ++counters_.integrity_alarms;
    entry.key.wipe();
    return reply(kNack, hid);
  }
  entry.key.wipe();
  completed_.insert(hid);
  ++counters_.accepted;
  reply(kAck, hid);
}

HybridBridge::HybridBridge(int method, netsim::Scheduler& scheduler, kms::Kms& store_a,
                           kms::Kms& store_b, const netsim::Endpoint& a, const netsim::Endpoint& b,
                           HybridConfig config, std::vector<qkd_emu::LinkPair> feeds)
    : method_(method), supplier_(config.supplier_id), feeds_(std::move(feeds)) {
  config.validate();
  master_ = std::make_unique<HybridMaster>(scheduler, store_a, a.lane(kLaneHybrid), config);
  slave_ = std::make_unique<HybridSlave>(scheduler, store_b, b.lane(kLaneHybrid), config);
}

std::optional<seclevel::SecurityExpr> HybridBridge::label() const {
  if (master_->label()) return master_->label();
  if (feeds_.size() < 2) return std::nullopt;
  auto l = feeds_.front().initiator->label();
  for (std::size_t i = 1; i < feeds_.size(); ++i)
    l = seclevel::parallel(l, feeds_[i].initiator->label());
  return l;
}

Counters HybridBridge::counters() const {
  Counters c = master_->counters();
  c += slave_->counters();
  for (const auto& f : feeds_) {
    c.dos += f.initiator->counters().dos + f.responder->counters().dos;
    c.retransmits += f.initiator->counters().retransmits;
  }
  return c;
}

void HybridBridge::stop() {
  master_->stop();
  for (auto& f : feeds_) {
    f.initiator->stop();
    f.responder->stop();
  }
}

std::unique_ptr<HybridBridge> method1_bridge(netsim::Scheduler& scheduler, kms::Kms& store_a,
                                             kms::Kms& store_b, const netsim::Endpoint& a,
                                             const netsim::Endpoint& b, HybridConfig config) {
  config.validate();
  if (a.local() != store_a.self() || b.local() != store_b.self() || a.remote() != b.local())
    throw ValidationError("channel", "endpoints do not match the border stores");
  register_bridge(store_a, store_b, config.supplier_id, 256, config.key_len);
  auto bridge = std::make_unique<HybridBridge>(1, scheduler, store_a, store_b, a, b, config);
  bridge->master().start();
  return bridge;
}

void EmulatedPairConfig::validate(const crypto::SuiteRegistry& suites) const {
  if (supplier_id.empty()) throw ValidationError("supplier_id", "must be non-empty");
  link.validate();
  if (link.link_type != LinkType::PQC)
    throw ValidationError("link_type", "long-haul emulated links must be PQC");
  if (kem_a == kem_b) throw ValidationError("kem_b", "the two emulated links need distinct KEM suites");
  if (sig_a == sig_b) throw ValidationError("sig_b", "the two emulated links need distinct SIG suites");
  check_suites(suites, {kem_a, kem_b}, {sig_a, sig_b});
}

std::unique_ptr<HybridBridge> method2_bridge(netsim::Scheduler& scheduler,
                                             const crypto::SuiteRegistry& suites,
                                             kms::Kms& store_a, kms::Kms& store_b,
                                             const netsim::Endpoint& a, const netsim::Endpoint& b,
                                             EmulatedPairConfig config,
                                             const DeterministicRng& rng) {
  config.validate(suites);
  std::vector<qkd_emu::LinkPair> feeds;
  const std::pair<std::uint8_t, std::string> lanes[] = {{kLaneSuiteA, "/a"}, {kLaneSuiteB, "/b"}};
  HybridConfig hybrid;
  hybrid.supplier_id = config.supplier_id;
  hybrid.key_len = config.link.qos_key_len;
  for (const auto& [lane, suffix] : lanes) {
    const bool first = lane == kLaneSuiteA;
    qkd_emu::LinkConfig lc;
    lc.link = config.link;
    lc.kem_suite = first ? config.kem_a : config.kem_b;
    lc.sig_suite = first ? config.sig_a : config.sig_b;
    lc.side_channels = first ? config.side_channels_a : config.side_channels_b;
    lc.supplier_id = config.supplier_id + suffix;
    hybrid.inputs.push_back(lc.supplier_id);
    feeds.push_back(qkd_emu::start_link(scheduler, suites, store_a, store_b, a.lane(lane),
                                        b.lane(lane), lc, rng.fork(lc.supplier_id)));
  }
  register_bridge(store_a, store_b, config.supplier_id, config.link.qos_rate_bps,
                  config.link.qos_key_len);
  auto bridge = std::make_unique<HybridBridge>(2, scheduler, store_a, store_b, a, b, hybrid,
                                               std::move(feeds));
  bridge->master().start();
  return bridge;
}

// ---------------------------------------------------------------- Method 3

void AppConfig::validate(const crypto::SuiteRegistry& suites) const {
  if (supplier_id.empty()) throw ValidationError("supplier_id", "must be non-empty");
  auto distinct = [](std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    return v.size() >= 2 && std::adjacent_find(v.begin(), v.end()) == v.end();
  };
  if (!distinct(kem_suites)) throw ValidationError("kem_suites", "need two or more distinct suites");
  if (!distinct(sig_suites)) throw ValidationError("sig_suites", "need two or more distinct suites");
  check_suites(suites, kem_suites, sig_suites);
  if (rate_bps == 0) throw ValidationError("rate_bps", "must be positive");
  if (key_len == 0 || key_len > kMaxKeyLength) throw ValidationError("key_len", "out of range");
  if (validity_seconds <= 0) throw ValidationError("validity_seconds", "must be positive");
  if (retransmit_interval <= 0) throw ValidationError("retransmit_interval", "must be positive");
}

netsim::SimTime AppConfig::period() const {
  return static_cast<netsim::SimTime>(8.0e6 * key_len / static_cast<double>(rate_bps));
}

seclevel::SecurityExpr AppConfig::label() const { return mc_label(side_channels); }

AppSender::AppSender(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites,
                     kms::Kms& store, netsim::Endpoint endpoint, AppConfig config,
                     std::vector<crypto::KemPublicKey> recipient_keys,
                     std::vector<crypto::SigSecretKey> signing_keys, DeterministicRng rng)
    : scheduler_(scheduler),
      suites_(suites),
      store_(store),
      endpoint_(std::move(endpoint)),
      config_(std::move(config)),
      recipients_(std::move(recipient_keys)),
      signers_(std::move(signing_keys)),
      rng_(std::move(rng)),
      outbox_(scheduler_, endpoint_, config_.retransmit_interval, config_.max_live_attempts,
              [this](const KeyId& id) {
                entries_.erase(id);
                ++counters_.lost;
              }) {
  config_.validate(suites_);
  if (recipients_.size() != config_.kem_suites.size() || signers_.size() != config_.sig_suites.size())
    throw ValidationError("credentials", "one key per configured suite is required");
  for (std::size_t i = 0; i < recipients_.size(); ++i)
    if (recipients_[i].suite != config_.kem_suites[i])
      throw ValidationError("credentials", "KEM keys are not in suite order");
  for (std::size_t i = 0; i < signers_.size(); ++i)
    if (signers_[i].suite != config_.sig_suites[i])
      throw ValidationError("credentials", "SIG keys are not in suite order");
  std::weak_ptr<bool> guard = alive_;
  endpoint_.on_receive([this, guard](const netsim::Message& m) {
    if (guard.lock()) on_message(m.payload);
  });
}

AppSender::~AppSender() {
  *alive_ = false;
  stop();
}

void AppSender::start() {
  if (!timer_) timer_ = scheduler_.after(config_.period(), [this] { tick(); });
}

void AppSender::stop() {
  if (timer_) scheduler_.cancel(*timer_);
  timer_.reset();
}

void AppSender::tick() {
  timer_.reset();
  emit_key();
  timer_ = scheduler_.after(config_.period(), [this] { tick(); });
}

bool AppSender::emit_key() {
  if (!endpoint_.alive()) return false;
  const auto now = unix_now(scheduler_);
  KeyEntry entry{KeyId::random(rng_),
                 KeyMaterial::random(rng_, config_.key_len),
                 endpoint_.remote(),
                 config_.supplier_id,
                 {now, now + config_.validity_seconds},
                 config_.label()};
  PackageMeta meta{endpoint_.local(), entry.validity, PathTag::single};
  auto pkg = crypto::seal_package(suites_, rng_, entry.key_id, entry.key, recipients_, meta,
                                  signers_, config_.mode);
  last_wire_ = with_type(kOffer, serialize(pkg));
  const auto id = entry.key_id;
  entries_.emplace(id, std::move(entry));
  outbox_.send(id, last_wire_);
  ++counters_.sent;
  return true;
}

void AppSender::on_message(const Bytes& payload) {
  KeyId id;
  try {
    Reader r(payload);
    if (r.u8() != kAck) throw DecodeError("unexpected message");
    id = decode<KeyId>(r);
    r.expect_done();
  } catch (const std::exception&) {
    ++counters_.dos;
    return;
  }
  auto it = entries_.find(id);
  if (it == entries_.end()) return;
  outbox_.acknowledge(id);
  try {
    store_.push_key(config_.supplier_id, it->second);
    ++counters_.delivered;
  } catch (const kms::KmsError&) {
    ++counters_.integrity_alarms;
    ++counters_.lost;
  }
  it->second.key.wipe();
  entries_.erase(it);
}

AppReceiver::AppReceiver(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites,
                         kms::Kms& store, netsim::Endpoint endpoint, AppConfig config,
                         std::vector<crypto::KemSecretKey> own_keys, SenderRegistry senders)
    : suites_(suites),
      scheduler_(scheduler),
      store_(store),
      endpoint_(std::move(endpoint)),
      config_(std::move(config)),
      own_keys_(std::move(own_keys)),
      senders_(std::move(senders)) {
  config_.validate(suites_);
  std::weak_ptr<bool> guard = alive_;
  endpoint_.on_receive([this, guard](const netsim::Message& m) {
    if (guard.lock()) on_message(m);
  });
}

AppReceiver::~AppReceiver() { *alive_ = false; }

void AppReceiver::on_message(const netsim::Message& message) {
  const auto& payload = message.payload;
  if (payload.empty() || payload.front() != kOffer) {
    ++counters_.dos;
    return;
  }
  auto sender = senders_.find(message.from);
  if (sender == senders_.end()) {
    ++counters_.unknown_sender;
    return;
  }
  KeyPackage pkg;
  try {
    pkg = deserialize<KeyPackage>(ByteView(payload.data() + 1, payload.size() - 1));
  } catch (const std::exception&) {
    ++counters_.dos;
    return;
  }
  if (pkg.meta.sender != message.from || pkg.meta.path != PathTag::single) {
    ++counters_.dos;
    return;
  }
  auto opened = crypto::open_package(suites_, pkg, sender->second, own_keys_, config_.mode);
  if (opened.status == crypto::OpenStatus::disagreement) ++counters_.integrity_alarms;
  if (opened.status != crypto::OpenStatus::ok || !opened.payload ||
      opened.payload->size() != config_.key_len ||
      !pkg.meta.validity.contains(unix_now(scheduler_))) {
    ++counters_.dos;
    return;
  }
  KeyEntry entry{pkg.rnd_id, *opened.payload, message.from, config_.supplier_id,
                 pkg.meta.validity, config_.label()};
  try {
    if (store_.push_key(config_.supplier_id, entry) == kms::PushResult::stored)
      ++counters_.accepted;
    else
      ++counters_.replays;
  } catch (const kms::KmsError&) {
    ++counters_.dos;
    return;
  }
  entry.key.wipe();
  endpoint_.send(id_message(kAck, pkg.rnd_id));
}

AppBridge::AppBridge(std::unique_ptr<AppSender> sender, std::unique_ptr<AppReceiver> receiver,
                     AppConfig config)
    : sender_(std::move(sender)), receiver_(std::move(receiver)), config_(std::move(config)) {}

Counters AppBridge::counters() const {
  Counters c = sender_->counters();
  c += receiver_->counters();
  return c;
}

std::unique_ptr<AppBridge> method3_bridge(netsim::Scheduler& scheduler,
                                          const crypto::SuiteRegistry& suites, kms::Kms& store_a,
                                          kms::Kms& store_b, const netsim::Endpoint& a,
                                          const netsim::Endpoint& b, AppConfig config,
                                          const DeterministicRng& rng) {
  config.validate(suites);
  // Out-of-band distribution of the receiver's KEM keys and the sender's SIG keys.
  auto cred = rng.fork("credentials");
  std::vector<crypto::KemPublicKey> kem_pub;
  std::vector<crypto::KemSecretKey> kem_sec;
  for (const auto& s : config.kem_suites) {
    auto k = make_kem_keys(suites, s, cred);
    kem_pub.push_back(k.pub);
    kem_sec.push_back(k.sec);
  }
  std::vector<crypto::SigPublicKey> sig_pub;
  std::vector<crypto::SigSecretKey> sig_sec;
  for (const auto& s : config.sig_suites) {
    auto k = make_sig_keys(suites, s, cred);
    sig_pub.push_back(k.pub);
    sig_sec.push_back(k.sec);
  }
  register_bridge(store_a, store_b, config.supplier_id, config.rate_bps, config.key_len);
  auto sender = std::make_unique<AppSender>(scheduler, suites, store_a, a.lane(kLaneApp), config,
                                            kem_pub, sig_sec, rng.fork("sender"));
  auto receiver = std::make_unique<AppReceiver>(scheduler, suites, store_b, b.lane(kLaneApp), config,
                                                kem_sec, SenderRegistry{{a.local(), sig_pub}});
  sender->start();
  return std::make_unique<AppBridge>(std::move(sender), std::move(receiver), config);
}

// ---------------------------------------------------------------- Method 4

MatchQueue::Offer MatchQueue::offer(const KeyId& id, PathTag path, const KeyMaterial& rnd,
                                    const Validity& validity, netsim::SimTime now) {
  std::lock_guard lock(mu_);
  auto [it, fresh] = slots_.try_emplace(id);
  auto& slot = it->second;
  if (fresh) {
    slot.first_seen = now;
    slot.validity = validity;
  }
  auto& half = path == PathTag::space ? slot.space : slot.ground;
  if (half) return Offer::replay;
  half = rnd;
  slot.validity.start = std::max(slot.validity.start, validity.start);
  slot.validity.end = std::min(slot.validity.end, validity.end);
  return slot.space && slot.ground ? Offer::matched : Offer::queued;
}

std::optional<MatchQueue::Pair> MatchQueue::take(const KeyId& id) {
  std::lock_guard lock(mu_);
  auto it = slots_.find(id);
  if (it == slots_.end() || !it->second.space || !it->second.ground) return std::nullopt;
  Pair p{std::move(*it->second.space), std::move(*it->second.ground), it->second.validity};
  slots_.erase(it);
  return p;
}

std::size_t MatchQueue::purge(netsim::SimTime now) {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (auto it = slots_.begin(); it != slots_.end();) {
    if (now - it->second.first_seen >= ttl_) {
      it = slots_.erase(it);
      ++n;
    } else {
      ++it;
    }
  }
  return n;
}

std::size_t MatchQueue::size() const {
  std::lock_guard lock(mu_);
  return slots_.size();
}

void MultipathConfig::validate(const crypto::SuiteRegistry& suites) const {
  if (supplier_id.empty()) throw ValidationError("supplier_id", "must be non-empty");
  if (space_kem == ground_kem) throw ValidationError("ground_kem", "paths need distinct KEM suites");
  if (space_sig == ground_sig) throw ValidationError("ground_sig", "paths need distinct SIG suites");
  check_suites(suites, {space_kem, ground_kem}, {space_sig, ground_sig});
  if (block_size < 1 || block_size > 100) throw ValidationError("block_size", "must be in [1, 100]");
  if (key_len == 0 || key_len > kMaxKeyLength) throw ValidationError("key_len", "out of range");
  if (ttl <= 0) throw ValidationError("ttl", "must be positive");
  if (psk.size() > 64) throw ValidationError("psk", "must be at most 64 octets");
  if (max_blocks_in_flight == 0) throw ValidationError("max_blocks_in_flight", "must be positive");
  if (min_block_interval <= 0) throw ValidationError("min_block_interval", "must be positive");
  if (validity_seconds <= 0) throw ValidationError("validity_seconds", "must be positive");
  kdf_named(kdf);
}

seclevel::SecurityExpr MultipathConfig::label() const {
  return seclevel::parallel(mc_label(space_side_channels), mc_label(ground_side_channels));
}

MultipathSender::MultipathSender(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites,
                                 kms::Kms& store, netsim::Endpoint space, netsim::Endpoint ground,
                                 MultipathConfig config, MultipathSenderKeys keys,
                                 DeterministicRng rng)
    : scheduler_(scheduler),
      suites_(suites),
      store_(store),
      space_(std::move(space)),
      ground_(std::move(ground)),
      config_(std::move(config)),
      keys_(std::move(keys)),
      rng_(std::move(rng)) {
  config_.validate(suites_);
  kdf_ = kdf_named(config_.kdf);
  if (space_.remote() != ground_.remote() || space_.local() != ground_.local())
    throw ValidationError("paths", "both paths must join the same border pair");
  std::weak_ptr<bool> guard = alive_;
  for (auto* ep : {&space_, &ground_})
    ep->on_receive([this, guard](const netsim::Message& m) {
      if (guard.lock()) on_message(m.payload);
    });
}

MultipathSender::~MultipathSender() {
  *alive_ = false;
  stop();
  for (auto& [b, info] : blocks_) scheduler_.cancel(info.second);
}

void MultipathSender::start() {
  running_ = true;
  maybe_next();
}

void MultipathSender::stop() {
  running_ = false;
  if (next_) scheduler_.cancel(*next_);
  next_.reset();
}

void MultipathSender::maybe_next() {
  if (!running_ || next_ || blocks_.size() >= config_.max_blocks_in_flight) return;
  if (config_.limit && counters_.sent >= config_.limit) return;
  auto at = block_no_ == 0 ? scheduler_.now()
                           : std::max(scheduler_.now(), last_block_ + config_.min_block_interval);
  next_ = scheduler_.at(at, [this] {
    next_.reset();
    send_block();
  });
}

void MultipathSender::send_block() {
  if (!running_) return;
  std::uint64_t n = config_.block_size;
  if (config_.limit) n = std::min<std::uint64_t>(n, config_.limit - counters_.sent);
  if (n == 0) return;
  const auto block = ++block_no_;
  last_block_ = scheduler_.now();
  const auto now = unix_now(scheduler_);
  const Validity validity{now, now + config_.validity_seconds};
  Writer ws, wg;
  for (auto* w : {&ws, &wg}) {
    w->u8(kOffer);
    w->u32(static_cast<std::uint32_t>(n));
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    Pending p{KeyMaterial::random(rng_, config_.key_len), KeyMaterial::random(rng_, config_.key_len),
              validity, block};
    auto id = KeyId::random(rng_);
    auto s = crypto::seal_package(suites_, rng_, id, p.rnd1, {keys_.space_kem},
                                  {space_.local(), validity, PathTag::space}, {keys_.space_sig});
    auto g = crypto::seal_package(suites_, rng_, id, p.rnd2, {keys_.ground_kem},
                                  {ground_.local(), validity, PathTag::ground}, {keys_.ground_sig});
    ws.bytes(serialize(s));
    wg.bytes(serialize(g));
    pending_.emplace(id, std::move(p));
  }
  counters_.sent += n;
  auto space_msg = std::move(ws).take();
  auto ground_msg = std::move(wg).take();
  if (tap_) {
    tap_(PathTag::space, space_msg);
    tap_(PathTag::ground, ground_msg);
  }
  space_.send(std::move(space_msg));
  ground_.send(std::move(ground_msg));
  // Waits past the receiver's TTL so a late confirmation is never orphaned.
  auto timeout = scheduler_.after(2 * config_.ttl, [this, block] { expire_block(block); });
  blocks_[block] = {static_cast<std::size_t>(n), timeout};
  maybe_next();
}

void MultipathSender::expire_block(std::uint64_t block) {
  for (auto it = pending_.begin(); it != pending_.end();) {
    if (it->second.block == block) {
      ++counters_.lost;
      it = pending_.erase(it);
    } else {
      ++it;
    }
  }
  blocks_.erase(block);
  maybe_next();
}

void MultipathSender::block_done(std::uint64_t block) {
  auto it = blocks_.find(block);
  if (it == blocks_.end()) return;
  scheduler_.cancel(it->second.second);
  blocks_.erase(it);
  maybe_next();
}

void MultipathSender::on_message(const Bytes& payload) {
  std::vector<KeyId> ids;
  try {
    Reader r(payload);
    if (r.u8() != kAck) throw DecodeError("unexpected message");
    auto n = r.u32();
    if (n > 4096) throw DecodeError("acknowledgment too long");
    for (std::uint32_t i = 0; i < n; ++i) ids.push_back(decode<KeyId>(r));
    r.expect_done();
  } catch (const std::exception&) {
    ++counters_.dos;
    return;
  }
  std::vector<KeyId> matched;
  std::vector<KeyMaterial> rnd1, rnd2;
  for (const auto& id : ids) {
    auto it = pending_.find(id);
    if (it == pending_.end()) continue;
    matched.push_back(id);
    rnd1.push_back(it->second.rnd1);
    rnd2.push_back(it->second.rnd2);
  }
  if (matched.empty()) return;
  auto keys = kernels::combine_block_parallel(*kdf_, rnd1, rnd2, crypto::Psk(config_.psk));
  std::set<std::uint64_t> touched;
  for (std::size_t i = 0; i < matched.size(); ++i) {
    auto node = pending_.extract(matched[i]);
    auto& p = node.mapped();
    KeyEntry entry{matched[i], std::move(keys[i]), space_.remote(), config_.supplier_id, p.validity,
                   config_.label()};
    try {
      store_.push_key(config_.supplier_id, entry);
      ++counters_.delivered;
    } catch (const kms::KmsError&) {
      ++counters_.integrity_alarms;
      ++counters_.lost;
    }
    entry.key.wipe();
    p.rnd1.wipe();
    p.rnd2.wipe();
    auto b = blocks_.find(p.block);
    if (b != blocks_.end() && --b->second.first == 0) touched.insert(p.block);
  }
  for (auto b : touched) block_done(b);
}

MultipathReceiver::MultipathReceiver(netsim::Scheduler& scheduler,
                                     const crypto::SuiteRegistry& suites, kms::Kms& store,
                                     netsim::Endpoint space, netsim::Endpoint ground,
                                     MultipathConfig config, MultipathReceiverKeys keys)
    : scheduler_(scheduler),
      suites_(suites),
      store_(store),
      space_(std::move(space)),
      ground_(std::move(ground)),
      config_(std::move(config)),
      keys_(std::move(keys)),
      queue_(config_.ttl) {
  config_.validate(suites_);
  kdf_ = kdf_named(config_.kdf);
  for (const auto& [node, pubs] : keys_.senders)
    if (pubs.size() != 2) throw ValidationError("senders", "need (space, ground) SIG keys per sender");
  std::weak_ptr<bool> guard = alive_;
  space_.on_receive([this, guard](const netsim::Message& m) {
    if (guard.lock()) on_block(PathTag::space, m);
  });
  ground_.on_receive([this, guard](const netsim::Message& m) {
    if (guard.lock()) on_block(PathTag::ground, m);
  });
}

MultipathReceiver::~MultipathReceiver() {
  *alive_ = false;
  if (timer_) scheduler_.cancel(*timer_);
}

void MultipathReceiver::purge() { counters_.expired += queue_.purge(scheduler_.now()); }

void MultipathReceiver::on_block(PathTag path, const netsim::Message& message) {
  std::vector<KeyPackage> packages;
  try {
    Reader r(message.payload);
    if (r.u8() != kOffer) throw DecodeError("unexpected message");
    auto n = r.u32();
    if (n == 0 || n > 100) throw DecodeError("bad block size");
    for (std::uint32_t i = 0; i < n; ++i) packages.push_back(deserialize<KeyPackage>(r.bytes()));
    r.expect_done();
  } catch (const std::exception&) {
    ++counters_.dos;
    return;
  }
  auto sender = keys_.senders.find(message.from);
  if (sender == keys_.senders.end()) {
    counters_.unknown_sender += packages.size();
    return;
  }
  const bool space = path == PathTag::space;
  const auto& sig = sender->second[space ? 0 : 1];
  const auto& kem = space ? keys_.space_kem : keys_.ground_kem;
  const auto now = unix_now(scheduler_);
  std::vector<KeyId> matched;
  for (const auto& pkg : packages) {
    if (pkg.meta.path != path || pkg.meta.sender != message.from) {
      ++counters_.dos;
      continue;
    }
    auto opened = crypto::open_package(suites_, pkg, {sig}, {kem});
    if (opened.status != crypto::OpenStatus::ok || !opened.payload ||
        opened.payload->size() != config_.key_len || !pkg.meta.validity.contains(now)) {
      ++counters_.dos;
      continue;
    }
    if (completed_.count(pkg.rnd_id)) {
      ++counters_.replays;
      continue;
    }
    switch (queue_.offer(pkg.rnd_id, path, *opened.payload, pkg.meta.validity, scheduler_.now())) {
      case MatchQueue::Offer::replay:
        ++counters_.replays;
        break;
      case MatchQueue::Offer::matched:
        matched.push_back(pkg.rnd_id);
        break;
      case MatchQueue::Offer::queued:
        break;
    }
  }
  if (!timer_ && queue_.size() > 0) {
    std::weak_ptr<bool> guard = alive_;
    // Purges on a fixed cadence while halves are waiting.
    struct Tick {
      MultipathReceiver* self;
      std::weak_ptr<bool> guard;
      void operator()() const {
        if (!guard.lock()) return;
        self->timer_.reset();
        self->purge();
        if (self->queue_.size() > 0) self->timer_ = self->scheduler_.after(kPurgeInterval, *this);
      }
    };
    timer_ = scheduler_.after(kPurgeInterval, Tick{this, guard});
  }
  if (matched.empty()) return;

  std::vector<KeyId> ids;
  std::vector<KeyMaterial> rnd1, rnd2;
  std::vector<Validity> validity;
  for (const auto& id : matched) {
    auto p = queue_.take(id);
    if (!p) continue;
    ids.push_back(id);
    rnd1.push_back(std::move(p->space));
    rnd2.push_back(std::move(p->ground));
    validity.push_back(p->validity);
  }
  auto keys = kernels::combine_block_parallel(*kdf_, rnd1, rnd2, crypto::Psk(config_.psk));
  Writer ack;
  ack.u8(kAck);
  std::vector<KeyId> stored;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    KeyEntry entry{ids[i], std::move(keys[i]), message.from, config_.supplier_id, validity[i],
                   config_.label()};
    try {
      store_.push_key(config_.supplier_id, entry);
      ++counters_.accepted;
      completed_.insert(ids[i]);
      stored.push_back(ids[i]);
    } catch (const kms::KmsError&) {
      ++counters_.integrity_alarms;
    }
    entry.key.wipe();
    rnd1[i].wipe();
    rnd2[i].wipe();
  }
  if (stored.empty()) return;
  ack.u32(static_cast<std::uint32_t>(stored.size()));
  for (const auto& id : stored) encode(ack, id);
  auto msg = std::move(ack).take();
  if (!ground_.send(msg)) space_.send(std::move(msg));
}

MultipathBridge::MultipathBridge(std::unique_ptr<MultipathSender> sender,
                                 std::unique_ptr<MultipathReceiver> receiver, MultipathConfig config)
    : sender_(std::move(sender)), receiver_(std::move(receiver)), config_(std::move(config)) {}

Counters MultipathBridge::counters() const {
  Counters c = sender_->counters();
  c += receiver_->counters();
  return c;
}

std::unique_ptr<MultipathBridge> method4_bridge(
    netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites, kms::Kms& store_a,
    kms::Kms& store_b, const netsim::Endpoint& space_a, const netsim::Endpoint& space_b,
    const netsim::Endpoint& ground_a, const netsim::Endpoint& ground_b, MultipathConfig config,
    const DeterministicRng& rng) {
  config.validate(suites);
  if (space_a.channel_id() == ground_a.channel_id())
    throw ValidationError("paths", "space and ground must be distinct channels");
  auto cred = rng.fork("credentials");
  auto space_kem = make_kem_keys(suites, config.space_kem, cred);
  auto ground_kem = make_kem_keys(suites, config.ground_kem, cred);
  auto space_sig = make_sig_keys(suites, config.space_sig, cred);
  auto ground_sig = make_sig_keys(suites, config.ground_sig, cred);
  register_bridge(store_a, store_b, config.supplier_id,
                  static_cast<std::uint64_t>(config.block_size) * config.key_len * 8,
                  config.key_len);
  auto sender = std::make_unique<MultipathSender>(
      scheduler, suites, store_a, space_a.lane(kLaneMultipath), ground_a.lane(kLaneMultipath),
      config, MultipathSenderKeys{space_kem.pub, ground_kem.pub, space_sig.sec, ground_sig.sec},
      rng.fork("sender"));
  auto receiver = std::make_unique<MultipathReceiver>(
      scheduler, suites, store_b, space_b.lane(kLaneMultipath), ground_b.lane(kLaneMultipath), config,
      MultipathReceiverKeys{space_kem.sec, ground_kem.sec,
                            SenderRegistry{{space_a.local(), {space_sig.pub, ground_sig.pub}}}});
  sender->start();
  return std::make_unique<MultipathBridge>(std::move(sender), std::move(receiver), config);
}

}  // namespace qkdnet::border
