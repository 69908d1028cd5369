#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qkdnet/kms.hpp"
#include "qkdnet/netsim.hpp"
#include "qkdnet/qkd_emu.hpp"
#include "qkdnet/sealing.hpp"

// Interconnection of two domains' border nodes. Every method ends in a key
// stream registered under one supplier id in both border stores, which relays
// crossing the border use as their pad source.
namespace qkdnet::border {

// Channel lanes. The relay protocol owns lane 1.
inline constexpr std::uint8_t kLaneEmulated = 0;
inline constexpr std::uint8_t kLaneRelay = 1;
inline constexpr std::uint8_t kLaneSuiteA = 2;
inline constexpr std::uint8_t kLaneSuiteB = 3;
inline constexpr std::uint8_t kLaneHybrid = 4;
inline constexpr std::uint8_t kLaneApp = 5;
inline constexpr std::uint8_t kLaneMultipath = 6;

struct Counters {
  std::uint64_t sent = 0;       // keys offered to the peer
  std::uint64_t delivered = 0;  // keys the sender stored after confirmation
  std::uint64_t lost = 0;       // keys the sender gave up on
  std::uint64_t retransmits = 0;
  std::uint64_t accepted = 0;   // keys the receiver stored
  std::uint64_t dos = 0;        // rejected: signature, decryption, format
  std::uint64_t replays = 0;
  std::uint64_t unknown_sender = 0;
  std::uint64_t integrity_alarms = 0;
  std::uint64_t expired = 0;    // unmatched halves purged by the receiver

  Counters& operator+=(const Counters& o);
};

struct KemKeyPair {
  crypto::KemPublicKey pub;
  crypto::KemSecretKey sec;
};
struct SigKeyPair {
  crypto::SigPublicKey pub;
  crypto::SigSecretKey sec;
};
KemKeyPair make_kem_keys(const crypto::SuiteRegistry& suites, const std::string& suite,
                         RandomSource& rng);
SigKeyPair make_sig_keys(const crypto::SuiteRegistry& suites, const std::string& suite,
                         RandomSource& rng);

/// Acknowledged delivery of opaque messages: retransmits until acknowledged,
/// gives up after a number of transmissions on a live channel.
class Outbox {
 public:
  using GiveUp = std::function<void(const KeyId&)>;

  Outbox(netsim::Scheduler& scheduler, netsim::Endpoint endpoint, netsim::SimTime interval,
         int max_live_attempts, GiveUp give_up);
  ~Outbox();
  Outbox(const Outbox&) = delete;
  Outbox& operator=(const Outbox&) = delete;

  // Queued even when the first transmission fails.
  void send(const KeyId& id, Bytes wire);
  bool acknowledge(const KeyId& id);
  std::size_t size() const { return pending_.size(); }
  std::uint64_t retransmits() const { return retransmits_; }
  void stop();

 private:
  struct Entry {
    Bytes wire;
    int live_attempts = 0;
    netsim::SimTime last_sent = 0;
  };
  void tick();

  netsim::Scheduler& scheduler_;
  netsim::Endpoint endpoint_;
  netsim::SimTime interval_;
  int max_live_attempts_;
  GiveUp give_up_;
  std::map<KeyId, Entry> pending_;
  std::optional<netsim::EventId> timer_;
  std::uint64_t retransmits_ = 0;
};

// ---------------------------------------------------------------- Method 1

struct HybridConfig {
  std::string supplier_id;          // the bridge stream
  std::vector<std::string> inputs;  // two or more distinct suppliers
  std::uint32_t key_len = kDefaultKeyLength;
  netsim::SimTime poll = netsim::from_ms(100);
  std::size_t max_pending = 64;
  netsim::SimTime retransmit_interval = netsim::from_seconds(5);
  int max_live_attempts = 4;
  netsim::SimTime slave_wait = netsim::from_seconds(10);

  void validate() const;
};

/// Chooses input keys, XORs them and offers the combination to the peer;
/// stores it once the peer confirms.
class HybridMaster {
 public:
  HybridMaster(netsim::Scheduler& scheduler, kms::Kms& store, netsim::Endpoint endpoint,
               HybridConfig config);
  ~HybridMaster();
  HybridMaster(const HybridMaster&) = delete;
  HybridMaster& operator=(const HybridMaster&) = delete;

  void start();
  void stop();
  // Pairs as many inputs as currently available.
  std::size_t pair_available();
  void on_message(const Bytes& payload);

  const Counters& counters() const { return counters_; }
  std::size_t pending() const { return entries_.size(); }
  const std::optional<seclevel::SecurityExpr>& label() const { return label_; }

 private:
  void tick();

  netsim::Scheduler& scheduler_;
  kms::Kms& store_;
  netsim::Endpoint endpoint_;
  HybridConfig config_;
  Outbox outbox_;
  std::map<KeyId, KeyEntry> entries_;
  std::optional<netsim::EventId> timer_;
  std::optional<seclevel::SecurityExpr> label_;
  Counters counters_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

class HybridSlave {
 public:
  HybridSlave(netsim::Scheduler& scheduler, kms::Kms& store, netsim::Endpoint endpoint,
              HybridConfig config);
  ~HybridSlave();
  HybridSlave(const HybridSlave&) = delete;
  HybridSlave& operator=(const HybridSlave&) = delete;

  void on_message(const Bytes& payload);
  const Counters& counters() const { return counters_; }

 private:
  void attempt(const KeyId& hybrid_id, std::vector<std::pair<std::string, KeyId>> inputs,
               netsim::SimTime deadline);
  void reply(std::uint8_t type, const KeyId& id);

  netsim::Scheduler& scheduler_;
  kms::Kms& store_;
  netsim::Endpoint endpoint_;
  HybridConfig config_;
  std::set<KeyId> completed_, waiting_;
  Counters counters_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

// ---------------------------------------------------------------- Method 3

struct AppConfig {
  std::string supplier_id;
  std::vector<std::string> kem_suites{"kem-a", "kem-b"};
  std::vector<std::string> sig_suites{"sig-a", "sig-b"};
  crypto::HybridMode mode = crypto::HybridMode::cross_check;
  std::uint64_t rate_bps = 256;
  std::uint32_t key_len = kDefaultKeyLength;
  std::set<std::string> side_channels;
  std::int64_t validity_seconds = 86400;
  netsim::SimTime retransmit_interval = netsim::from_seconds(5);
  int max_live_attempts = 4;

  void validate(const crypto::SuiteRegistry& suites) const;
  netsim::SimTime period() const;
  seclevel::SecurityExpr label() const;
};

/// Application-based sender: every key is encrypted under all configured KEM
/// suites and signed with all configured signature suites.
class AppSender {
 public:
  AppSender(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites, kms::Kms& store,
            netsim::Endpoint endpoint, AppConfig config,
            std::vector<crypto::KemPublicKey> recipient_keys,
            std::vector<crypto::SigSecretKey> signing_keys, DeterministicRng rng);
  ~AppSender();
  AppSender(const AppSender&) = delete;
  AppSender& operator=(const AppSender&) = delete;

  void start();
  void stop();
  // Builds and sends one package; false when the channel is down.
  bool emit_key();
  // The most recent wire package, for tests.
  const Bytes& last_wire() const { return last_wire_; }
  void on_message(const Bytes& payload);

  const Counters& counters() const { return counters_; }
  std::size_t pending() const { return entries_.size(); }

 private:
  void tick();

  netsim::Scheduler& scheduler_;
  const crypto::SuiteRegistry& suites_;
  kms::Kms& store_;
  netsim::Endpoint endpoint_;
  AppConfig config_;
  std::vector<crypto::KemPublicKey> recipients_;
  std::vector<crypto::SigSecretKey> signers_;
  DeterministicRng rng_;
  Outbox outbox_;
  std::map<KeyId, KeyEntry> entries_;
  std::optional<netsim::EventId> timer_;
  Bytes last_wire_;
  Counters counters_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

/// Senders known to a receiver, by network address, with their public
/// signature keys in suite order.
using SenderRegistry = std::map<NodeId, std::vector<crypto::SigPublicKey>>;

class AppReceiver {
 public:
  AppReceiver(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites, kms::Kms& store,
              netsim::Endpoint endpoint, AppConfig config,
              std::vector<crypto::KemSecretKey> own_keys, SenderRegistry senders);
  ~AppReceiver();
  AppReceiver(const AppReceiver&) = delete;
  AppReceiver& operator=(const AppReceiver&) = delete;

  void on_message(const netsim::Message& message);
  const Counters& counters() const { return counters_; }

 private:
  const crypto::SuiteRegistry& suites_;
  netsim::Scheduler& scheduler_;
  kms::Kms& store_;
  netsim::Endpoint endpoint_;
  AppConfig config_;
  std::vector<crypto::KemSecretKey> own_keys_;
  SenderRegistry senders_;
  Counters counters_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

// ---------------------------------------------------------------- Method 4

/// Halves of multi-path keys waiting for their partner, keyed by RNDID.
class MatchQueue {
 public:
  enum class Offer { queued, matched, replay };

  explicit MatchQueue(netsim::SimTime ttl) : ttl_(ttl) {}

  Offer offer(const KeyId& id, PathTag path, const KeyMaterial& rnd, const Validity& validity,
              netsim::SimTime now);
  struct Pair {
    KeyMaterial space, ground;
    Validity validity;
  };
  // Removes a matched entry.
  std::optional<Pair> take(const KeyId& id);
  // Drops entries older than the TTL; returns how many.
  std::size_t purge(netsim::SimTime now);
  std::size_t size() const;
  netsim::SimTime ttl() const { return ttl_; }

 private:
  struct Slot {
    std::optional<KeyMaterial> space, ground;
    Validity validity;
    netsim::SimTime first_seen = 0;
  };
  mutable std::mutex mu_;
  netsim::SimTime ttl_;
  std::map<KeyId, Slot> slots_;
};

struct MultipathConfig {
  std::string supplier_id;
  std::string space_kem = "kem-a", space_sig = "sig-a";
  std::string ground_kem = "kem-b", ground_sig = "sig-b";
  std::uint32_t block_size = 50;
  std::uint32_t key_len = kDefaultKeyLength;
  netsim::SimTime ttl = netsim::from_seconds(30);
  std::string kdf = "xor";
  Bytes psk;
  std::uint32_t max_blocks_in_flight = 1;
  netsim::SimTime min_block_interval = netsim::from_ms(100);
  std::uint64_t limit = 0;  // keys to send in total; 0 = unbounded
  std::set<std::string> space_side_channels, ground_side_channels;
  std::int64_t validity_seconds = 86400;

  void validate(const crypto::SuiteRegistry& suites) const;
  seclevel::SecurityExpr label() const;
};

struct MultipathSenderKeys {
  crypto::KemPublicKey space_kem, ground_kem;  // the receiver's
  crypto::SigSecretKey space_sig, ground_sig;
};

struct MultipathReceiverKeys {
  crypto::KemSecretKey space_kem, ground_kem;
  SenderRegistry senders;  // public keys in (space, ground) order
};

/// Sends each key as two independent halves, one per path, and derives the
/// final key once the receiver confirms it matched both.
class MultipathSender {
 public:
  using Tap = std::function<void(PathTag, ByteView)>;

  MultipathSender(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites,
                  kms::Kms& store, netsim::Endpoint space, netsim::Endpoint ground,
                  MultipathConfig config, MultipathSenderKeys keys, DeterministicRng rng);
  ~MultipathSender();
  MultipathSender(const MultipathSender&) = delete;
  MultipathSender& operator=(const MultipathSender&) = delete;

  void start();
  void stop();
  // Observes every block message sent on either path.
  void set_tap(Tap tap) { tap_ = std::move(tap); }

  const Counters& counters() const { return counters_; }
  std::size_t pending() const { return pending_.size(); }
  std::uint64_t blocks() const { return block_no_; }

 private:
  struct Pending {
    KeyMaterial rnd1, rnd2;
    Validity validity;
    std::uint64_t block = 0;
  };
  void send_block();
  void maybe_next();
  void expire_block(std::uint64_t block);
  void on_message(const Bytes& payload);
  void block_done(std::uint64_t block);

  netsim::Scheduler& scheduler_;
  const crypto::SuiteRegistry& suites_;
  kms::Kms& store_;
  netsim::Endpoint space_, ground_;
  MultipathConfig config_;
  MultipathSenderKeys keys_;
  DeterministicRng rng_;
  std::unique_ptr<crypto::Kdf> kdf_;
  std::map<KeyId, Pending> pending_;
  std::map<std::uint64_t, std::pair<std::size_t, netsim::EventId>> blocks_;  // open -> (keys, timeout)
  std::uint64_t block_no_ = 0;
  netsim::SimTime last_block_ = 0;
  std::optional<netsim::EventId> next_;
  bool running_ = false;
  Tap tap_;
  Counters counters_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

class MultipathReceiver {
 public:
  MultipathReceiver(netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites,
                    kms::Kms& store, netsim::Endpoint space, netsim::Endpoint ground,
                    MultipathConfig config, MultipathReceiverKeys keys);
  ~MultipathReceiver();
  MultipathReceiver(const MultipathReceiver&) = delete;
  MultipathReceiver& operator=(const MultipathReceiver&) = delete;

  // Block message arriving on one path; public for injection.
  void on_block(PathTag path, const netsim::Message& message);
  // Purges expired halves now.
  void purge();

  const Counters& counters() const { return counters_; }
  const MatchQueue& queue() const { return queue_; }

 private:
  netsim::Scheduler& scheduler_;
  const crypto::SuiteRegistry& suites_;
  kms::Kms& store_;
  netsim::Endpoint space_, ground_;
  MultipathConfig config_;
  MultipathReceiverKeys keys_;
  std::unique_ptr<crypto::Kdf> kdf_;
  MatchQueue queue_;
  std::set<KeyId> completed_;
  std::optional<netsim::EventId> timer_;
  Counters counters_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

// ---------------------------------------------------------------- bridges

/// One configured interconnection between two border nodes.
class Bridge {
 public:
  virtual ~Bridge() = default;
  virtual int method() const = 0;
  virtual const std::string& supplier_id() const = 0;
  virtual std::optional<seclevel::SecurityExpr> label() const = 0;
  // Both ends summed.
  virtual Counters counters() const = 0;
  virtual std::size_t pending() const = 0;
  virtual void stop() = 0;
};

/// Methods 1 and 2: a hybridized stream, optionally fed by its own pair of
/// emulated links.
class HybridBridge final : public Bridge {
 public:
  HybridBridge(int method, netsim::Scheduler& scheduler, kms::Kms& store_a, kms::Kms& store_b,
               const netsim::Endpoint& a, const netsim::Endpoint& b, HybridConfig config,
               std::vector<qkd_emu::LinkPair> feeds = {});
  int method() const override { return method_; }
  const std::string& supplier_id() const override { return supplier_; }
  std::optional<seclevel::SecurityExpr> label() const override;
  Counters counters() const override;
  std::size_t pending() const override { return master_->pending(); }
  void stop() override;

  HybridMaster& master() { return *master_; }
  HybridSlave& slave() { return *slave_; }
  std::vector<qkd_emu::LinkPair>& feeds() { return feeds_; }

 private:
  int method_;
  std::string supplier_;
  std::vector<qkd_emu::LinkPair> feeds_;
  std::unique_ptr<HybridMaster> master_;
  std::unique_ptr<HybridSlave> slave_;
};

class AppBridge final : public Bridge {
 public:
  AppBridge(std::unique_ptr<AppSender> sender, std::unique_ptr<AppReceiver> receiver,
            AppConfig config);
  int method() const override { return 3; }
  const std::string& supplier_id() const override { return config_.supplier_id; }
  std::optional<seclevel::SecurityExpr> label() const override { return config_.label(); }
  Counters counters() const override;
  std::size_t pending() const override { return sender_->pending(); }
  void stop() override { sender_->stop(); }

  AppSender& sender() { return *sender_; }
  AppReceiver& receiver() { return *receiver_; }

 private:
  std::unique_ptr<AppSender> sender_;
  std::unique_ptr<AppReceiver> receiver_;
  AppConfig config_;
};

class MultipathBridge final : public Bridge {
 public:
  MultipathBridge(std::unique_ptr<MultipathSender> sender,
                  std::unique_ptr<MultipathReceiver> receiver, MultipathConfig config);
  int method() const override { return 4; }
  const std::string& supplier_id() const override { return config_.supplier_id; }
  std::optional<seclevel::SecurityExpr> label() const override { return config_.label(); }
  Counters counters() const override;
  std::size_t pending() const override { return sender_->pending(); }
  void stop() override { sender_->stop(); }

  MultipathSender& sender() { return *sender_; }
  MultipathReceiver& receiver() { return *receiver_; }

 private:
  std::unique_ptr<MultipathSender> sender_;
  std::unique_ptr<MultipathReceiver> receiver_;
  MultipathConfig config_;
};

// The factories take raw channel ends; each method claims its own lanes,
// registers the bridge supplier in both stores and starts.

// Method 1: hybridizes two existing link suppliers of the border pair.
// `a` chooses the inputs.
std::unique_ptr<HybridBridge> method1_bridge(netsim::Scheduler& scheduler, kms::Kms& store_a,
                                             kms::Kms& store_b, const netsim::Endpoint& a,
                                             const netsim::Endpoint& b, HybridConfig config);

struct EmulatedPairConfig {
  std::string supplier_id;
  LinkDescriptor link;  // link_type must be PQC
  std::string kem_a = "kem-a", sig_a = "sig-a";
  std::string kem_b = "kem-b", sig_b = "sig-b";
  std::set<std::string> side_channels_a, side_channels_b;

  void validate(const crypto::SuiteRegistry& suites) const;
};

// Method 2: two emulated links with distinct suites over one channel,
// hybridized as in Method 1.
std::unique_ptr<HybridBridge> method2_bridge(netsim::Scheduler& scheduler,
                                             const crypto::SuiteRegistry& suites,
                                             kms::Kms& store_a, kms::Kms& store_b,
                                             const netsim::Endpoint& a, const netsim::Endpoint& b,
                                             EmulatedPairConfig config,
                                             const DeterministicRng& rng);

// Method 3: `a` sends, `b` receives.
std::unique_ptr<AppBridge> method3_bridge(netsim::Scheduler& scheduler,
                                          const crypto::SuiteRegistry& suites, kms::Kms& store_a,
                                          kms::Kms& store_b, const netsim::Endpoint& a,
                                          const netsim::Endpoint& b, AppConfig config,
                                          const DeterministicRng& rng);

// Method 4: `a` sends over both paths, `b` receives.
std::unique_ptr<MultipathBridge> method4_bridge(
    netsim::Scheduler& scheduler, const crypto::SuiteRegistry& suites, kms::Kms& store_a,
    kms::Kms& store_b, const netsim::Endpoint& space_a, const netsim::Endpoint& space_b,
    const netsim::Endpoint& ground_a, const netsim::Endpoint& ground_b, MultipathConfig config,
    const DeterministicRng& rng);

}  // namespace qkdnet::border
