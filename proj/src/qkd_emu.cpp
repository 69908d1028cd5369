#include "qkdnet/qkd_emu.hpp"

namespace qkdnet::qkd_emu {

namespace {

constexpr std::uint8_t kPackage = 1;
constexpr std::uint8_t kAck = 2;

void check_config(const LinkConfig& c, const crypto::SuiteRegistry& suites) {
  c.link.validate();
  if (c.link.link_type != LinkType::QKD && c.link.link_type != LinkType::PQC)
    throw ValidationError("link_type", "emulated links must be QKD or PQC");
  if (!suites.has_kem(c.kem_suite)) throw ValidationError("kem_suite", "unknown suite " + c.kem_suite);
  if (!suites.has_signer(c.sig_suite))
    throw ValidationError("sig_suite", "unknown suite " + c.sig_suite);
  if (c.validity_seconds <= 0) throw ValidationError("validity_seconds", "must be positive");
  if (c.retransmit_interval <= 0) throw ValidationError("retransmit_interval", "must be positive");
}

}  // namespace

LinkSession::LinkSession(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites,
                         kms::Kms& store, netsim::Endpoint endpoint, Role role, LinkConfig config,
                         Credentials creds, DeterministicRng rng)
    : scheduler_(scheduler),
      suites_(suites),
      store_(store),
      endpoint_(std::move(endpoint)),
      role_(role),
      config_(std::move(config)),
      creds_(std::move(creds)),
      rng_(std::move(rng)) {
  check_config(config_, suites_);
  if (config_.supplier_id.empty()) config_.supplier_id = config_.link.link_id.to_string();
  if (!config_.link.connects(endpoint_.local(), endpoint_.remote()))
    throw ValidationError("channel", "channel does not connect the link endpoints");
  period_ = static_cast<netsim::SimTime>(8.0e6 * config_.link.qos_key_len /
                                         static_cast<double>(config_.link.qos_rate_bps));
  std::weak_ptr<bool> guard = alive_;
  endpoint_.on_receive([this, guard](const netsim::Message& m) {
    if (guard.lock()) on_message(m.payload);
  });
}

LinkSession::~LinkSession() {
  *alive_ = false;
  stop();
}

seclevel::SecurityExpr LinkSession::label() const {
  auto base = config_.link.link_type == LinkType::QKD ? seclevel::Base::ITS : seclevel::Base::MC;
  return seclevel::SecurityExpr(seclevel::SecurityLabel(base, config_.side_channels));
}

void LinkSession::start() {
  if (running_) return;
  running_ = true;
  if (role_ != Role::initiator) return;
  schedule_emit(scheduler_.now() + period_);
  retransmit_event_ = scheduler_.after(config_.retransmit_interval, [this] { retransmit_tick(); });
}

void LinkSession::stop() {
  running_ = false;
  if (emit_event_) scheduler_.cancel(*emit_event_);
  if (retransmit_event_) scheduler_.cancel(*retransmit_event_);
  emit_event_.reset();
  retransmit_event_.reset();
}

void LinkSession::drain() {
  if (emit_event_) scheduler_.cancel(*emit_event_);
  emit_event_.reset();
}

void LinkSession::schedule_emit(netsim::SimTime at) {
  next_emit_ = at;
  emit_event_ = scheduler_.at(at, [this] { tick(); });
}

void LinkSession::tick() {
  emit_event_.reset();
  if (!running_) return;
  if (emit_key()) {
    backoff_ = 0;
    schedule_emit(scheduler_.now() + period_);
  } else {
    backoff_ = backoff_ == 0 ? kBackoffBase : std::min(2 * backoff_, kBackoffCap);
    schedule_emit(scheduler_.now() + backoff_);
  }
}

bool LinkSession::send(std::uint8_t type, ByteView body) {
  Bytes msg;
  msg.reserve(body.size() + 1);
  msg.push_back(type);
  msg.insert(msg.end(), body.begin(), body.end());
  return endpoint_.send(std::move(msg));
}

bool LinkSession::emit_key() {
  if (role_ != Role::initiator) throw Error("emit_key called on a responder");
  if (!endpoint_.alive()) {
    ++counters_.send_failures;
    return false;
  }
  const auto now = unix_now();
  KeyEntry entry{KeyId::random(rng_),
                 KeyMaterial::random(rng_, config_.link.qos_key_len),
                 endpoint_.remote(),
                 config_.supplier_id,
                 {now, now + config_.validity_seconds},
                 label()};
  PackageMeta meta{endpoint_.local(), entry.validity, PathTag::single};
  auto pkg = crypto::seal_package(suites_, rng_, entry.key_id, entry.key, {creds_.peer_kem}, meta,
                                  {creds_.own_sig});
  auto wire = serialize(pkg);
  if (!send(kPackage, wire)) {
    ++counters_.send_failures;
    return false;
  }
  ++counters_.produced;
  pending_.emplace(entry.key_id, Pending{std::move(entry), std::move(wire), 0, scheduler_.now()});
  return true;
}

void LinkSession::retransmit_tick() {
  retransmit_event_.reset();
  if (!running_) return;
  if (endpoint_.alive()) {
    const auto now = scheduler_.now();
    for (auto it = pending_.begin(); it != pending_.end();) {
      auto& p = it->second;
      if (now - p.last_sent < config_.retransmit_interval) {
        ++it;
        continue;
      }
      if (p.live_attempts >= config_.max_live_attempts) {
        ++counters_.discarded;
        it = pending_.erase(it);
        continue;
      }
      if (!send(kPackage, p.wire)) {
        ++counters_.send_failures;
        break;
      }
      ++p.live_attempts;
      p.last_sent = now;
      ++counters_.retransmits;
      ++it;
    }
  }
  retransmit_event_ = scheduler_.after(config_.retransmit_interval, [this] { retransmit_tick(); });
}

void LinkSession::on_message(const Bytes& payload) {
  if (payload.empty()) {
    ++counters_.dos;
    return;
  }
  ByteView body(payload.data() + 1, payload.size() - 1);
  if (payload[0] == kPackage && role_ == Role::responder)
    handle_package(body);
  else if (payload[0] == kAck && role_ == Role::initiator)
    handle_ack(body);
  else
    ++counters_.dos;
}

void LinkSession::handle_package(ByteView body) {
  KeyPackage pkg;
  try {
    pkg = deserialize<KeyPackage>(body);
  } catch (const std::exception&) {
    ++counters_.dos;
    return;
  }
  if (pkg.meta.sender != endpoint_.remote() || pkg.meta.path != PathTag::single) {
    ++counters_.dos;
    return;
  }
  auto opened = crypto::open_package(suites_, pkg, {creds_.peer_sig}, {creds_.own_kem});
  if (opened.status != crypto::OpenStatus::ok || !opened.payload ||
      opened.payload->size() != config_.link.qos_key_len || !pkg.meta.validity.contains(unix_now())) {
    ++counters_.dos;
    return;
  }
  KeyEntry entry{pkg.rnd_id, *opened.payload, pkg.meta.sender, config_.supplier_id,
                 pkg.meta.validity, label()};
  try {
    if (store_.push_key(config_.supplier_id, entry) == kms::PushResult::stored)
      ++counters_.stored;
    else
      ++counters_.replays;
  } catch (const kms::KmsError&) {
    ++counters_.dos;
    return;
  }
  Writer ack;
  encode(ack, pkg.rnd_id);
  send(kAck, ack.data());
}

void LinkSession::handle_ack(ByteView body) {
  KeyId id;
  try {
    Reader r(body);
    id = decode<KeyId>(r);
    r.expect_done();
  } catch (const std::exception&) {
    ++counters_.dos;
    return;
  }
  auto it = pending_.find(id);
  if (it == pending_.end()) return;  // late duplicate acknowledgment
  try {
    if (store_.push_key(config_.supplier_id, it->second.entry) == kms::PushResult::stored)
      ++counters_.stored;
  } catch (const kms::KmsError&) {
    ++counters_.dos;
  }
  pending_.erase(it);
}

LinkPair start_link(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites,
                    kms::Kms& store_a, kms::Kms& store_b, netsim::Endpoint a, netsim::Endpoint b,
                    LinkConfig config, const DeterministicRng& rng) {
  check_config(config, suites);
  if (config.supplier_id.empty()) config.supplier_id = config.link.link_id.to_string();
  if (store_a.self() != a.local() || store_b.self() != b.local())
    throw ValidationError("channel", "endpoints do not match their stores");

  auto cred_rng = rng.fork("credentials");
  auto kem_pair = suites.kem(config.kem_suite).keygen(cred_rng);
  auto sig_pair = suites.signer(config.sig_suite).keygen(cred_rng);
  Credentials init{{config.kem_suite, kem_pair.public_key}, {}, {config.sig_suite, sig_pair.secret_key}, {}};
  Credentials resp{{}, {config.kem_suite, kem_pair.secret_key}, {}, {config.sig_suite, sig_pair.public_key}};

  const auto rate = config.link.qos_rate_bps;
  const auto len = config.link.qos_key_len;
  store_a.register_supplier({config.supplier_id, b.local(), rate, len});
  store_b.register_supplier({config.supplier_id, a.local(), rate, len});

  LinkPair pair;
  pair.initiator = std::make_unique<LinkSession>(scheduler, suites, store_a, std::move(a),
                                                 Role::initiator, config, init, rng.fork("initiator"));
  pair.responder = std::make_unique<LinkSession>(scheduler, suites, store_b, std::move(b),
                                                 Role::responder, config, resp, rng.fork("responder"));
  pair.initiator->start();
  pair.responder->start();
  return pair;
}

}  // namespace qkdnet::qkd_emu
