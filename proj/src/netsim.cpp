#include "qkdnet/netsim.hpp"

#include <algorithm>
#include <sstream>
#include <thread>

namespace qkdnet::netsim {

EventId Scheduler::at(SimTime t, Task task) {
  if (t < now_) t = now_;
  auto id = next_id_++;
  queue_.push({t, id});
  tasks_.emplace(id, std::move(task));
  return id;
}

std::size_t Scheduler::run_until(SimTime t) {
  std::size_t ran = 0;
  while (!queue_.empty() && queue_.top().time <= t) {
    auto ev = queue_.top();
    queue_.pop();
    auto node = tasks_.extract(ev.id);
    if (cancelled_.erase(ev.id)) continue;
    if (wall_clock_) {
      if (!wall_anchor_) wall_anchor_.emplace(std::chrono::steady_clock::now(), now_);
      auto due = wall_anchor_->first + std::chrono::microseconds(ev.time - wall_anchor_->second);
      std::this_thread::sleep_until(due);
    }
    now_ = ev.time;
    node.mapped()();
    ++ran;
  }
  now_ = std::max(now_, t);
  return ran;
}

void ChannelSpec::validate() const {
  if (channel_id.empty()) throw ValidationError("channel_id", "must be non-empty");
  if (latency_ms < 0) throw ValidationError("latency_ms", "must be non-negative");
  if (jitter_ms < 0) throw ValidationError("jitter_ms", "must be non-negative");
  if (loss_before_retry < 0 || loss_before_retry >= 1)
    throw ValidationError("loss_before_retry", "must be in [0, 1)");
}

std::string TraceRecord::to_line() const {
  std::ostringstream os;
  os << time << ' ' << channel_id << ' ' << direction << ' ' << size << ' ' << payload_hash;
  return os.str();
}

TraceRecord TraceRecord::parse_line(const std::string& line) {
  std::istringstream is(line);
  TraceRecord r{};
  if (!(is >> r.time >> r.channel_id >> r.direction >> r.size >> r.payload_hash))
    throw DecodeError("malformed trace line: " + line);
  return r;
}

struct Channel {
  struct Direction {
    SimTime busy_until = 0;
    SimTime last_delivery = 0;
  };

  Network* net = nullptr;
  ChannelSpec spec;
  NodeId ends[2];
  // Per receiving side: lane -> handler. Lane -1 is the raw, unprefixed stream.
  std::map<int, Handler> handlers[2];
  Direction dir[2];  // indexed by sending side
  bool killed = false;
  std::uint64_t generation = 0;
  DeterministicRng rng{0};
};

namespace {
crypto::Digest chain(const crypto::Digest& prev, const std::string& line) {
  Bytes buf(prev.begin(), prev.end());
  buf.insert(buf.end(), line.begin(), line.end());
  return crypto::sha256(buf);
}
}  // namespace

std::string hash_trace_lines(const std::vector<std::string>& lines) {
  crypto::Digest h{};
  for (const auto& l : lines) h = chain(h, l);
  return to_hex(h);
}

Network::Network(Scheduler& scheduler, std::uint64_t seed) : scheduler_(scheduler), seed_(seed) {}

Network::~Network() {
  for (auto& [id, ch] : channels_) {
    ch->net = nullptr;
    ch->handlers[0].clear();
    ch->handlers[1].clear();
  }
}

std::pair<Endpoint, Endpoint> Network::open_channel(const ChannelSpec& spec, const NodeId& a,
                                                    const NodeId& b) {
  spec.validate();
  if (channels_.count(spec.channel_id))
    throw ValidationError("channel_id", "duplicate channel '" + spec.channel_id + "'");
  auto ch = std::make_shared<Channel>();
  ch->net = this;
  ch->spec = spec;
  ch->ends[0] = a;
  ch->ends[1] = b;
  ch->rng = DeterministicRng(seed_).fork("channel:" + spec.channel_id);
  channels_.emplace(spec.channel_id, ch);
  return {Endpoint(ch, 0, -1), Endpoint(ch, 1, -1)};
}

void Network::kill(const std::string& channel_id) {
  auto it = channels_.find(channel_id);
  if (it == channels_.end()) throw UnknownChannelError(channel_id);
  it->second->killed = true;
  ++it->second->generation;
}

void Network::heal(const std::string& channel_id) {
  auto it = channels_.find(channel_id);
  if (it == channels_.end()) throw UnknownChannelError(channel_id);
  auto& ch = *it->second;
  if (!ch.killed) return;
  ch.killed = false;
  ++ch.generation;
  for (auto& d : ch.dir) d = {};
}

bool Network::alive(const std::string& channel_id) const {
  auto it = channels_.find(channel_id);
  if (it == channels_.end()) throw UnknownChannelError(channel_id);
  return !it->second->killed;
}

const ChannelSpec& Network::spec(const std::string& channel_id) const {
  auto it = channels_.find(channel_id);
  if (it == channels_.end()) throw UnknownChannelError(channel_id);
  return it->second->spec;
}

std::vector<std::string> Network::channels_of(const NodeId& node) const {
  std::vector<std::string> out;
  for (const auto& [id, ch] : channels_)
    if (ch->ends[0] == node || ch->ends[1] == node) out.push_back(id);
  return out;
}

bool Network::send(Channel& ch, int side, Bytes payload) {
  if (ch.killed) return false;
  const auto& spec = ch.spec;
  auto& dir = ch.dir[side];
  const SimTime now = scheduler_.now();

  SimTime serialization = 0;
  if (spec.bandwidth_bps > 0)
    serialization = static_cast<SimTime>(static_cast<double>(payload.size()) * 8.0 * 1e6 /
                                         static_cast<double>(spec.bandwidth_bps));
  const SimTime start = std::max(now, dir.busy_until);
  dir.busy_until = start + serialization;

  const SimTime latency = from_ms(spec.latency_ms);
  SimTime delay = latency;
  if (spec.jitter_ms > 0) delay += static_cast<SimTime>(ch.rng.uniform01() * from_ms(spec.jitter_ms));
  const SimTime retry_timeout = std::max<SimTime>(2 * latency, from_ms(200));
  for (int attempt = 0; attempt < 64 && ch.rng.uniform01() < spec.loss_before_retry; ++attempt)
    delay += retry_timeout;

  const SimTime deliver_at = std::max(dir.busy_until + delay, dir.last_delivery);
  dir.last_delivery = deliver_at;

  const auto generation = ch.generation;
  std::weak_ptr<Channel> weak = channels_.at(spec.channel_id);
  scheduler_.at(deliver_at, [this, weak, side, generation, payload = std::move(payload)]() {
    auto chp = weak.lock();
    if (!chp || chp->net == nullptr || chp->killed || chp->generation != generation) return;
    const int to = 1 - side;
    record(*chp, side, payload);
    Message msg{chp->ends[side], chp->ends[to], chp->spec.channel_id, {}};
    auto& table = chp->handlers[to];
    if (table.empty()) return;
    if (table.size() == 1 && table.begin()->first == -1) {
      msg.payload = payload;
      auto h = table.begin()->second;
      h(msg);
      return;
    }
    if (payload.empty()) return;
    auto it = table.find(payload.front());
    if (it == table.end()) return;
    msg.payload.assign(payload.begin() + 1, payload.end());
    auto h = it->second;
    h(msg);
  });
  return true;
}

void Network::record(const Channel& ch, int from_side, const Bytes& payload) {
  auto digest = crypto::sha256(payload);
  TraceRecord r{scheduler_.now(), ch.spec.channel_id, from_side == 0 ? "a>b" : "b>a",
                payload.size(), to_hex(ByteView(digest.data(), 8))};
  trace_hash_ = chain(trace_hash_, r.to_line());
  ++deliveries_;
  if (record_trace_) trace_.push_back(std::move(r));
}

bool Endpoint::send(Bytes payload) const {
  if (!channel_ || channel_->net == nullptr) return false;
  if (lane_ >= 0) payload.insert(payload.begin(), static_cast<std::uint8_t>(lane_));
  return channel_->net->send(*channel_, side_, std::move(payload));
}

void Endpoint::on_receive(Handler handler) const {
  channel_->handlers[side_][lane_] = std::move(handler);
}

Endpoint Endpoint::lane(std::uint8_t id) const { return Endpoint(channel_, side_, id); }

const NodeId& Endpoint::local() const { return channel_->ends[side_]; }
const NodeId& Endpoint::remote() const { return channel_->ends[1 - side_]; }
const std::string& Endpoint::channel_id() const { return channel_->spec.channel_id; }
bool Endpoint::alive() const { return channel_ && !channel_->killed; }

}  // namespace qkdnet::netsim
