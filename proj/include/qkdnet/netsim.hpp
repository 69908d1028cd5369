#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <memory>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include "qkdnet/bytes.hpp"
#include "qkdnet/core.hpp"
#include "qkdnet/crypto.hpp"

namespace qkdnet::netsim {

/// Simulated time in microseconds.
using SimTime = std::int64_t;

constexpr SimTime from_ms(double ms) { return static_cast<SimTime>(ms * 1000.0); }
constexpr SimTime from_seconds(double s) { return static_cast<SimTime>(s * 1'000'000.0); }
constexpr double to_seconds(SimTime t) { return static_cast<double>(t) / 1e6; }

// Unix time corresponding to simulated time zero.
inline constexpr std::int64_t kEpochSeconds = 1'700'000'000;
constexpr std::int64_t unix_seconds(SimTime t) { return kEpochSeconds + t / 1'000'000; }

using EventId = std::uint64_t;

/// Discrete-event scheduler, the single source of time. Events at equal
/// times run in scheduling order. In wall-clock mode each event waits until
/// the matching real time has passed.
class Scheduler {
 public:
  using Task = std::function<void()>;

  SimTime now() const { return now_; }
  EventId at(SimTime t, Task task);
  EventId after(SimTime delay, Task task) { return at(now_ + delay, std::move(task)); }
  void cancel(EventId id) { cancelled_.insert(id); }

  // Runs every event with time <= t, then advances the clock to t.
  std::size_t run_until(SimTime t);
  std::size_t run_for(SimTime dt) { return run_until(now_ + dt); }
  bool idle() const { return queue_.empty(); }

  void set_wall_clock(bool on) { wall_clock_ = on; }

 private:
  struct Event {
    SimTime time;
    EventId id;
    bool operator>(const Event& o) const {
      return time != o.time ? time > o.time : id > o.id;
    }
  };

  SimTime now_ = 0;
  EventId next_id_ = 1;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> queue_;
  std::map<EventId, Task> tasks_;
  std::set<EventId> cancelled_;
  bool wall_clock_ = false;
  std::optional<std::pair<std::chrono::steady_clock::time_point, SimTime>> wall_anchor_;
};

struct ChannelSpec {
  std::string channel_id;
  double latency_ms = 0.0;
  double jitter_ms = 0.0;
  std::uint64_t bandwidth_bps = 0;  // 0 = unlimited
  double loss_before_retry = 0.0;   // per-attempt loss, hidden by retries

  void validate() const;
};

struct Message {
  NodeId from;
  NodeId to;
  std::string channel_id;
  Bytes payload;
};

using Handler = std::function<void(const Message&)>;

struct TraceRecord {
  SimTime time;
  std::string channel_id;
  std::string direction;  // "a>b" or "b>a"
  std::size_t size;
  std::string payload_hash;

  std::string to_line() const;
  static TraceRecord parse_line(const std::string& line);
};

class UnknownChannelError : public Error {
 public:
  explicit UnknownChannelError(const std::string& id) : Error("unknown channel '" + id + "'") {}
};

struct Channel;

/// One side of a channel, optionally restricted to a numbered lane so several
/// protocols can share one channel.
class Endpoint {
 public:
  Endpoint() = default;

  // False when the channel is killed; nothing is queued in that case.
  bool send(Bytes payload) const;
  void on_receive(Handler handler) const;
  Endpoint lane(std::uint8_t id) const;

  const NodeId& local() const;
  const NodeId& remote() const;
  const std::string& channel_id() const;
  bool alive() const;
  bool valid() const { return channel_ != nullptr; }

 private:
  friend class Network;
  Endpoint(std::shared_ptr<Channel> ch, int side, int lane)
      : channel_(std::move(ch)), side_(side), lane_(lane) {}

  std::shared_ptr<Channel> channel_;
  int side_ = 0;
  int lane_ = -1;
};

/// Reliable, in-order, exactly-once bidirectional channels over the scheduler.
/// Delivery delay is latency + uniform(0, jitter) + serialization time plus
/// one retransmission timeout per lost attempt.
class Network {
 public:
  Network(Scheduler& scheduler, std::uint64_t seed);
  ~Network();

  std::pair<Endpoint, Endpoint> open_channel(const ChannelSpec& spec, const NodeId& a,
                                             const NodeId& b);
  void kill(const std::string& channel_id);
  void heal(const std::string& channel_id);
  bool alive(const std::string& channel_id) const;
  std::vector<std::string> channels_of(const NodeId& node) const;
  const ChannelSpec& spec(const std::string& channel_id) const;

  Scheduler& scheduler() { return scheduler_; }

  void set_record_trace(bool on) { record_trace_ = on; }
  const std::vector<TraceRecord>& trace() const { return trace_; }
  // Chained SHA-256 over every delivery record, kept even when records are not.
  std::string trace_hash() const { return to_hex(trace_hash_); }
  std::uint64_t deliveries() const { return deliveries_; }

 private:
  friend class Endpoint;
  bool send(Channel& ch, int side, Bytes payload);
  void record(const Channel& ch, int from_side, const Bytes& payload);

  Scheduler& scheduler_;
  std::uint64_t seed_;
  std::map<std::string, std::shared_ptr<Channel>> channels_;
  bool record_trace_ = true;
  std::vector<TraceRecord> trace_;
  crypto::Digest trace_hash_{};
  std::uint64_t deliveries_ = 0;
};

/// Chained hash over trace lines, matching Network::trace_hash().
std::string hash_trace_lines(const std::vector<std::string>& lines);

}  // namespace qkdnet::netsim
