#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>

#include "qkdnet/kms.hpp"
#include "qkdnet/netsim.hpp"
#include "qkdnet/sealing.hpp"

// Emulated key-generating link: identical key streams appear in both endpoint
// stores at the link's QoS rate, carried as signed KEM-wrapped packages.
namespace qkdnet::qkd_emu {

enum class Role { initiator, responder };

struct LinkConfig {
  LinkDescriptor link;
  std::string kem_suite = "kem-a";
  std::string sig_suite = "sig-a";
  std::set<std::string> side_channels;
  std::string supplier_id;           // defaults to the link id
  std::int64_t validity_seconds = 86400;
  netsim::SimTime retransmit_interval = netsim::from_seconds(5);
  int max_live_attempts = 4;         // retransmissions on a live channel before discarding
};

struct Credentials {
  crypto::KemPublicKey peer_kem;     // initiator: responder's KEM key
  crypto::KemSecretKey own_kem;      // responder
  crypto::SigSecretKey own_sig;      // initiator
  crypto::SigPublicKey peer_sig;     // responder: initiator's SIG key
};

struct Counters {
  std::uint64_t produced = 0;        // keys emitted by the initiator
  std::uint64_t stored = 0;          // keys written to the local store
  std::uint64_t retransmits = 0;
  std::uint64_t discarded = 0;       // given up without acknowledgment
  std::uint64_t send_failures = 0;
  std::uint64_t dos = 0;             // rejected packages (signature, format, decryption)
  std::uint64_t replays = 0;         // already-stored packages received again
};

class LinkSession {
 public:
  LinkSession(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites, kms::Kms& store,
              netsim::Endpoint endpoint, Role role, LinkConfig config, Credentials creds,
              DeterministicRng rng);
  LinkSession(const LinkSession&) = delete;
  LinkSession& operator=(const LinkSession&) = delete;
  ~LinkSession();

  void start();
  void stop();
  // Stops producing new keys; outstanding packages are still retransmitted.
  void drain();

  // Initiator: generate, seal and send one key now. Returns false when the
  // channel refused it.
  bool emit_key();
  // Responder ingress; exposed so tests can inject raw bytes.
  void on_message(const Bytes& payload);

  Role role() const { return role_; }
  const LinkConfig& config() const { return config_; }
  const std::string& supplier_id() const { return config_.supplier_id; }
  const Counters& counters() const { return counters_; }
  std::uint64_t produced_count() const { return counters_.produced; }
  std::size_t pending() const { return pending_.size(); }
  netsim::SimTime emission_period() const { return period_; }
  netsim::SimTime next_emit_time() const { return next_emit_; }
  seclevel::SecurityExpr label() const;

 private:
  struct Pending {
    KeyEntry entry;
    Bytes wire;
    int live_attempts = 0;
    netsim::SimTime last_sent = 0;
  };

  void schedule_emit(netsim::SimTime at);
  void tick();
  void retransmit_tick();
  void handle_package(ByteView body);
  void handle_ack(ByteView body);
  bool send(std::uint8_t type, ByteView body);
  std::int64_t unix_now() const { return netsim::unix_seconds(scheduler_.now()); }

  netsim::Scheduler& scheduler_;
  const crypto::SuiteRegistry& suites_;
  kms::Kms& store_;
  netsim::Endpoint endpoint_;
  Role role_;
  LinkConfig config_;
  Credentials creds_;
  DeterministicRng rng_;
  netsim::SimTime period_ = 0;
  netsim::SimTime next_emit_ = 0;
  netsim::SimTime backoff_ = 0;
  bool running_ = false;
  std::optional<netsim::EventId> emit_event_, retransmit_event_;
  std::map<KeyId, Pending> pending_;
  Counters counters_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

struct LinkPair {
  std::unique_ptr<LinkSession> initiator;
  std::unique_ptr<LinkSession> responder;
};

// Creates both ends with fresh out-of-band credentials, registers the supplier
// in both stores and starts the sessions. Endpoint `a` initiates.
LinkPair start_link(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites,
                    kms::Kms& store_a, kms::Kms& store_b, netsim::Endpoint a, netsim::Endpoint b,
                    LinkConfig config, const DeterministicRng& rng);

inline constexpr netsim::SimTime kBackoffBase = netsim::from_seconds(1);
inline constexpr netsim::SimTime kBackoffCap = netsim::from_seconds(60);

}  // namespace qkdnet::qkd_emu
