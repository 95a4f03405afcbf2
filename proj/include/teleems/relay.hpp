#ifndef TELEEMS_RELAY_HPP
#define TELEEMS_RELAY_HPP

// Multi-party media relay as a deterministic discrete-event simulator.
//
// A Room forwards every published packet to the current subscribers of its
// stream (never back to the publisher) and to any attached analytics sinks.
// Payloads are shared, never copied, between publisher and receivers. Each
// (subscriber, ssrc) path has a ReorderBuffer that turns network-order
// arrivals into an in-order emission stream.
//
// Room mutations are not synchronized: all of them are expected to come
// from one event executor (Simulator). Sinks are the only objects meant to
// be drained from other threads.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "teleems/error.hpp"
#include "teleems/random.hpp"

namespace teleems::relay {

enum class StreamKind : std::uint8_t { Audio = 0, Video = 1, Text = 2 };

constexpr std::string_view to_string(StreamKind k) {
  switch (k) {
    case StreamKind::Audio: return "audio";
    case StreamKind::Video: return "video";
    case StreamKind::Text: return "text";
  }
  return "?";
}

inline StreamKind parse_kind(std::string_view s) {
  if (s == "audio") return StreamKind::Audio;
  if (s == "video") return StreamKind::Video;
  if (s == "text") return StreamKind::Text;
  fail(ErrorCode::InvalidArgument, "unknown stream kind '" + std::string(s) + "'");
}

using Payload = std::shared_ptr<const std::vector<std::uint8_t>>;

inline Payload make_payload(std::vector<std::uint8_t> bytes) {
  return std::make_shared<const std::vector<std::uint8_t>>(std::move(bytes));
}

struct MediaPacket {
  std::uint32_t ssrc = 0;
  std::uint16_t seq = 0;
  std::uint32_t timestamp = 0;
  StreamKind kind = StreamKind::Audio;
  Payload payload;

  std::size_t payload_size() const { return payload ? payload->size() : 0; }
};

struct TextMessage {
  std::uint64_t index = 0;
  std::string sender;
  std::string body;

  bool operator==(const TextMessage&) const = default;
};

// ---------------------------------------------------------------------------
// 16-bit sequence arithmetic

inline constexpr std::int32_t kSeqHalfRange = 1 << 15;

/// True when `a` comes after `b` under the half-range rule.
constexpr bool seq_newer(std::uint16_t a, std::uint16_t b) {
  const auto diff = static_cast<std::uint16_t>(a - b);
  return diff != 0 && diff < kSeqHalfRange;
}

/// Maps wrapping 16-bit sequence numbers onto a monotone 64-bit line.
class SeqUnwrapper {
 public:
  std::int64_t unwrap(std::uint16_t seq) {
    if (!last_) {
      last_ = static_cast<std::int64_t>(seq);
      return *last_;
    }
    const auto delta = static_cast<std::int16_t>(static_cast<std::uint16_t>(seq - static_cast<std::uint16_t>(*last_)));
    const std::int64_t ext = *last_ + delta;
    if (ext > *last_) last_ = ext;
    return ext;
  }

 private:
  std::optional<std::int64_t> last_;
};

// ---------------------------------------------------------------------------
// Reorder buffer

struct ReorderStats {
  std::uint64_t duplicates = 0;  // same seq already pending
  std::uint64_t late = 0;        // arrived after its slot was emitted or skipped
  std::uint64_t lost = 0;        // sequence slots skipped without a packet

  bool operator==(const ReorderStats&) const = default;
};

/// Releases packets of one stream in sequence order. A gap is waited on
/// until a packet `window` or more slots ahead of it arrives; then the gap
/// is written off as loss. The first packet seen fixes the starting point.
class ReorderBuffer {
 public:
  explicit ReorderBuffer(std::size_t window = 8) : window_(std::max<std::size_t>(window, 1)) {}

  std::vector<MediaPacket> deliver(const MediaPacket& packet) {
    std::vector<MediaPacket> out;
    const std::int64_t ext = unwrapper_.unwrap(packet.seq);
    if (!next_) next_ = ext;
    if (ext < *next_) {
      ++stats_.late;
      return out;
    }
    if (pending_.contains(ext)) {
      ++stats_.duplicates;
      return out;
    }
    pending_.emplace(ext, packet);
    release_run(out);
    while (!pending_.empty() && pending_.rbegin()->first - *next_ >= static_cast<std::int64_t>(window_)) {
      skip_to_first_pending();
      release_run(out);
    }
    return out;
  }

  /// Emits everything still held, writing off the gaps between.
  std::vector<MediaPacket> flush() {
    std::vector<MediaPacket> out;
    while (!pending_.empty()) {
      skip_to_first_pending();
      release_run(out);
    }
    return out;
  }

  /// Forgets held packets; returns how many were discarded.
  std::size_t discard() {
    const std::size_t n = pending_.size();
    pending_.clear();
    return n;
  }

  std::size_t pending() const { return pending_.size(); }
  std::size_t window() const { return window_; }
  const ReorderStats& stats() const { return stats_; }

 private:
  void release_run(std::vector<MediaPacket>& out) {
    while (!pending_.empty() && pending_.begin()->first == *next_) {
      out.push_back(std::move(pending_.begin()->second));
      pending_.erase(pending_.begin());
      ++*next_;
    }
  }

  void skip_to_first_pending() {
    const std::int64_t first = pending_.begin()->first;
    stats_.lost += static_cast<std::uint64_t>(first - *next_);
    next_ = first;
  }

  std::size_t window_;
  SeqUnwrapper unwrapper_;
  std::optional<std::int64_t> next_;
  std::map<std::int64_t, MediaPacket> pending_;
  ReorderStats stats_;
};

// ---------------------------------------------------------------------------
// Analytics sinks

using SinkItem = std::variant<MediaPacket, TextMessage>;

/// Bounded tap queue. Media sinks drop their oldest item on overflow; text
/// sinks never drop and instead refuse the push (the room then reports the
/// post as blocked). Safe to drain from another thread.
class Sink {
 public:
  Sink(std::string name, std::set<StreamKind> kinds, std::size_t capacity)
      : name_(std::move(name)), kinds_(std::move(kinds)), capacity_(std::max<std::size_t>(capacity, 1)) {}

  const std::string& name() const { return name_; }
  bool accepts(StreamKind k) const { return kinds_.contains(k); }
  std::size_t capacity() const { return capacity_; }

  /// Media push: always succeeds, may evict the oldest item.
  void push_media(MediaPacket p) {
    std::lock_guard lock(mu_);
    ++enqueued_;
    if (queue_.size() >= capacity_) {
      queue_.pop_front();
      ++dropped_;
    }
    queue_.emplace_back(std::move(p));
  }

  bool text_full() const {
    std::lock_guard lock(mu_);
    return queue_.size() >= capacity_;
  }

  /// Text push: refused when full.
  bool push_text(TextMessage m) {
    std::lock_guard lock(mu_);
    if (queue_.size() >= capacity_) return false;
    ++enqueued_;
    queue_.emplace_back(std::move(m));
    return true;
  }

  /// Up to `max` items, oldest first.
  std::vector<SinkItem> drain(std::size_t max) {
    std::lock_guard lock(mu_);
    std::vector<SinkItem> out;
    while (!queue_.empty() && out.size() < max) {
      out.push_back(std::move(queue_.front()));
      queue_.pop_front();
    }
    drained_ += out.size();
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return queue_.size();
  }
  std::uint64_t dropped() const {
    std::lock_guard lock(mu_);
    return dropped_;
  }
  std::uint64_t enqueued() const {
    std::lock_guard lock(mu_);
    return enqueued_;
  }
  std::uint64_t drained() const {
    std::lock_guard lock(mu_);
    return drained_;
  }

 private:
  std::string name_;
  std::set<StreamKind> kinds_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::deque<SinkItem> queue_;
  std::uint64_t enqueued_ = 0, dropped_ = 0, drained_ = 0;
};

using SinkHandle = std::shared_ptr<Sink>;

// ---------------------------------------------------------------------------
// Room

struct Delivery {
  std::string receiver;
  MediaPacket packet;
};

struct KindCounters {
  std::uint64_t published = 0;
  std::uint64_t forwarded = 0;  // published x subscribers at publish time
  std::uint64_t delivered = 0;  // emitted by reorder buffers
  std::uint64_t dropped = 0;    // duplicates, late arrivals, discarded on unsubscribe

  bool operator==(const KindCounters&) const = default;
};

enum class TextPost { Accepted, Blocked };

class Room {
 public:
  struct Publication {
    std::string owner;
    StreamKind kind = StreamKind::Audio;
    bool ended = false;
  };

  explicit Room(std::string id, std::size_t reorder_window = 8)
      : id_(std::move(id)), reorder_window_(reorder_window) {}

  const std::string& id() const { return id_; }

  void join(const std::string& participant) {
    if (participant.empty()) fail(ErrorCode::InvalidArgument, "empty participant id");
    if (!participants_.insert(participant).second)
      fail(ErrorCode::DuplicateParticipant, "'" + participant + "' already in room '" + id_ + "'");
  }

  /// Removes the participant. Its subscriptions go away (held packets are
  /// discarded) and its own streams are marked ended; the other
  /// participants' receive paths for those streams are flushed.
  std::vector<Delivery> leave(const std::string& participant) {
    require_member(participant);
    std::vector<Delivery> out;
    if (auto it = subscriptions_.find(participant); it != subscriptions_.end()) {
      for (std::uint32_t ssrc : std::set<std::uint32_t>(it->second)) unsubscribe(participant, ssrc);
      subscriptions_.erase(participant);
    }
    for (auto& [ssrc, pub] : publications_) {
      if (pub.owner != participant || pub.ended) continue;
      pub.ended = true;
      for (auto& [key, buffer] : paths_) {
        if (key.second != ssrc) continue;
        for (auto& p : buffer.flush()) {
          ++counters_[p.kind].delivered;
          out.push_back({key.first, std::move(p)});
        }
      }
    }
    participants_.erase(participant);
    return out;
  }

  void announce(const std::string& participant, std::uint32_t ssrc, StreamKind kind) {
    require_member(participant);
    if (kind == StreamKind::Text) fail(ErrorCode::InvalidArgument, "media streams are audio or video");
    auto it = publications_.find(ssrc);
    if (it != publications_.end() && !(it->second.owner == participant || it->second.ended))
      fail(ErrorCode::SsrcOwnership, "ssrc " + std::to_string(ssrc) + " belongs to '" + it->second.owner + "'");
    publications_[ssrc] = {participant, kind, false};
  }

  void subscribe(const std::string& participant, std::uint32_t ssrc) {
    require_member(participant);
    auto it = publications_.find(ssrc);
    if (it == publications_.end() || it->second.ended)
      fail(ErrorCode::UnknownStream, "no live stream with ssrc " + std::to_string(ssrc));
    if (it->second.owner == participant)
      fail(ErrorCode::InvalidArgument, "'" + participant + "' cannot subscribe to its own stream");
    if (subscriptions_[participant].insert(ssrc).second)
      paths_.emplace(std::make_pair(participant, ssrc), ReorderBuffer(reorder_window_));
  }

  void unsubscribe(const std::string& participant, std::uint32_t ssrc) {
    require_member(participant);
    auto sub = subscriptions_.find(participant);
    if (sub == subscriptions_.end() || !sub->second.erase(ssrc)) return;
    auto path = paths_.find({participant, ssrc});
    const StreamKind kind = publications_.at(ssrc).kind;
    counters_[kind].dropped += path->second.discard();
    retire_stats(path->second);
    paths_.erase(path);
  }

  /// Forwards one packet. The first publish of an unknown ssrc claims it.
  std::vector<Delivery> publish(const std::string& participant, const MediaPacket& packet) {
    require_member(participant);
    if (packet.kind == StreamKind::Text) fail(ErrorCode::InvalidArgument, "text goes through post_text");
    auto it = publications_.find(packet.ssrc);
    if (it == publications_.end()) {
      announce(participant, packet.ssrc, packet.kind);
      it = publications_.find(packet.ssrc);
    } else if (it->second.owner != participant) {
      fail(ErrorCode::SsrcOwnership,
           "'" + participant + "' may not publish ssrc " + std::to_string(packet.ssrc) + " owned by '" +
               it->second.owner + "'");
    } else if (it->second.ended) {
      fail(ErrorCode::UnknownStream, "stream " + std::to_string(packet.ssrc) + " has ended");
    }
    if (it->second.kind != packet.kind)
      fail(ErrorCode::InvalidArgument, "packet kind does not match stream " + std::to_string(packet.ssrc));

    auto& counters = counters_[packet.kind];
    ++counters.published;
    std::vector<Delivery> out;
    // paths_ is ordered by (participant, ssrc): fan-out order is deterministic.
    for (auto& [key, buffer] : paths_) {
      if (key.second != packet.ssrc) continue;
      ++counters.forwarded;
      const auto before = buffer.stats();
      for (auto& p : buffer.deliver(packet)) {
        ++counters.delivered;
        out.push_back({key.first, std::move(p)});
      }
      const auto& after = buffer.stats();
      counters.dropped += (after.duplicates - before.duplicates) + (after.late - before.late);
    }
    for (auto& sink : sinks_)
      if (sink->accepts(packet.kind)) sink->push_media(packet);
    return out;
  }

  SinkHandle attach_sink(std::string name, std::set<StreamKind> kinds, std::size_t capacity) {
    auto sink = std::make_shared<Sink>(std::move(name), std::move(kinds), capacity);
    sinks_.push_back(sink);
    return sink;
  }

  SinkHandle find_sink(std::string_view name) const {
    for (const auto& s : sinks_)
      if (s->name() == name) return s;
    return nullptr;
  }

  /// Appends to the room's totally ordered text log. Blocked (and nothing
  /// is appended) while any text sink is full.
  TextPost post_text(const std::string& participant, std::string body) {
    require_member(participant);
    for (const auto& sink : sinks_)
      if (sink->accepts(StreamKind::Text) && sink->text_full()) return TextPost::Blocked;
    TextMessage msg{text_log_.size(), participant, std::move(body)};
    for (auto& sink : sinks_)
      if (sink->accepts(StreamKind::Text)) sink->push_text(msg);
    text_log_.push_back(std::move(msg));
    return TextPost::Accepted;
  }

  std::vector<TextMessage> read_text(std::size_t from_index = 0) const {
    if (from_index >= text_log_.size()) return {};
    return {text_log_.begin() + static_cast<std::ptrdiff_t>(from_index), text_log_.end()};
  }

  /// End of session: release everything still held in reorder buffers.
  std::vector<Delivery> flush() {
    std::vector<Delivery> out;
    for (auto& [key, buffer] : paths_)
      for (auto& p : buffer.flush()) {
        ++counters_[p.kind].delivered;
        out.push_back({key.first, std::move(p)});
      }
    return out;
  }

  bool contains(const std::string& participant) const { return participants_.contains(participant); }
  const std::set<std::string>& participants() const { return participants_; }
  const std::map<std::uint32_t, Publication>& publications() const { return publications_; }
  std::set<std::uint32_t> subscriptions_of(const std::string& participant) const {
    auto it = subscriptions_.find(participant);
    return it == subscriptions_.end() ? std::set<std::uint32_t>{} : it->second;
  }
  const std::vector<SinkHandle>& sinks() const { return sinks_; }

  KindCounters counters(StreamKind k) const {
    auto it = counters_.find(k);
    return it == counters_.end() ? KindCounters{} : it->second;
  }

  /// Reorder statistics summed over live and retired receive paths.
  ReorderStats reorder_stats() const {
    ReorderStats total = retired_stats_;
    for (const auto& [key, buffer] : paths_) {
      total.duplicates += buffer.stats().duplicates;
      total.late += buffer.stats().late;
      total.lost += buffer.stats().lost;
    }
    return total;
  }

  std::size_t held_packets() const {
    std::size_t n = 0;
    for (const auto& [key, buffer] : paths_) n += buffer.pending();
    return n;
  }

 private:
  void require_member(const std::string& participant) const {
    if (!participants_.contains(participant))
      fail(ErrorCode::UnknownParticipant, "'" + participant + "' is not in room '" + id_ + "'");
  }

  void retire_stats(const ReorderBuffer& b) {
    retired_stats_.duplicates += b.stats().duplicates;
    retired_stats_.late += b.stats().late;
    retired_stats_.lost += b.stats().lost;
  }

  std::string id_;
  std::size_t reorder_window_;
  std::set<std::string> participants_;
  std::map<std::uint32_t, Publication> publications_;
  std::map<std::string, std::set<std::uint32_t>> subscriptions_;
  std::map<std::pair<std::string, std::uint32_t>, ReorderBuffer> paths_;
  std::vector<SinkHandle> sinks_;
  std::vector<TextMessage> text_log_;
  std::map<StreamKind, KindCounters> counters_;
  ReorderStats retired_stats_;
};

inline Room create_room(std::string id, std::size_t reorder_window = 8) { return Room(std::move(id), reorder_window); }

// ---------------------------------------------------------------------------
// Packet file codec
//
// 12-byte little-endian header per packet, followed by the payload:
//   [0..1]  u16: version (bits 14-15, = 1) | kind (bits 12-13) | payload length (bits 0-11)
//   [2..3]  u16: sequence number
//   [4..7]  u32: timestamp
//   [8..11] u32: ssrc

inline constexpr std::size_t kPacketHeaderSize = 12;
inline constexpr unsigned kPacketVersion = 1;
inline constexpr std::size_t kMaxPayload = 0x0FFF;

namespace detail {
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline std::uint16_t get_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}
inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[at + static_cast<std::size_t>(i)];
  return v;
}
}  // namespace detail

inline void encode_packet(const MediaPacket& p, std::vector<std::uint8_t>& out) {
  const std::size_t len = p.payload_size();
  if (len > kMaxPayload) fail(ErrorCode::InvalidArgument, "payload exceeds 4095 bytes");
  if (p.kind == StreamKind::Text) fail(ErrorCode::InvalidArgument, "text is not a media packet kind");
  const auto word = static_cast<std::uint16_t>((kPacketVersion << 14) | (static_cast<unsigned>(p.kind) << 12) | len);
  detail::put_u16(out, word);
  detail::put_u16(out, p.seq);
  detail::put_u32(out, p.timestamp);
  detail::put_u32(out, p.ssrc);
  if (len) out.insert(out.end(), p.payload->begin(), p.payload->end());
}

inline std::vector<std::uint8_t> encode_packets(std::span<const MediaPacket> packets) {
  std::vector<std::uint8_t> out;
  for (const auto& p : packets) encode_packet(p, out);
  return out;
}

inline std::vector<MediaPacket> decode_packets(std::span<const std::uint8_t> bytes) {
  std::vector<MediaPacket> out;
  std::size_t at = 0;
  while (at < bytes.size()) {
    if (bytes.size() - at < kPacketHeaderSize)
      fail(ErrorCode::Io, "truncated packet header at byte " + std::to_string(at));
    const std::uint16_t word = detail::get_u16(bytes, at);
    if ((word >> 14) != kPacketVersion) fail(ErrorCode::Io, "bad packet version at byte " + std::to_string(at));
    const unsigned kind = (word >> 12) & 0x3;
    if (kind > 1) fail(ErrorCode::Io, "bad packet kind at byte " + std::to_string(at));
    const std::size_t len = word & 0x0FFF;
    MediaPacket p;
    p.kind = static_cast<StreamKind>(kind);
    p.seq = detail::get_u16(bytes, at + 2);
    p.timestamp = detail::get_u32(bytes, at + 4);
    p.ssrc = detail::get_u32(bytes, at + 8);
    at += kPacketHeaderSize;
    if (bytes.size() - at < len) fail(ErrorCode::Io, "truncated payload for seq " + std::to_string(p.seq));
    p.payload = make_payload({bytes.begin() + static_cast<std::ptrdiff_t>(at),
                              bytes.begin() + static_cast<std::ptrdiff_t>(at + len)});
    at += len;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenario scripts
//
// One event per line: `<t_ms> <event> <args...>`; `#` starts a comment.
//   join <p> | leave <p>
//   announce <p> <ssrc> audio|video
//   subscribe <p> <ssrc> | unsubscribe <p> <ssrc>
//   publish <p> <ssrc> <seq> [<timestamp> [<payload_bytes>]]
//   sink <name> <kind[,kind...]> <capacity>
//   drain <name> <max>
//   text <p> <message...>
//   read <p> <from_index>

enum class EventType { Join, Leave, Announce, Subscribe, Unsubscribe, Publish, Sink, Drain, Text, Read };

struct ScriptEvent {
  std::int64_t t_ms = 0;
  std::size_t line = 0;
  EventType type = EventType::Join;
  std::vector<std::string> args;
  std::string message;  // text events keep the raw remainder of the line
};

namespace detail {
inline std::uint64_t parse_uint(const std::string& s, std::size_t line, std::uint64_t max) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (s.empty() || s[0] == '-') throw std::invalid_argument(s);
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    fail(ErrorCode::ScriptError, "line " + std::to_string(line) + ": expected a non-negative integer, got '" + s + "'");
  }
  if (used != s.size() || v > max)
    fail(ErrorCode::ScriptError, "line " + std::to_string(line) + ": integer '" + s + "' out of range");
  return v;
}
}  // namespace detail

inline std::vector<ScriptEvent> parse_script(std::string_view script) {
  static const std::map<std::string, std::pair<EventType, std::pair<std::size_t, std::size_t>>, std::less<>> kEvents = {
      {"join", {EventType::Join, {1, 1}}},
      {"leave", {EventType::Leave, {1, 1}}},
      {"announce", {EventType::Announce, {3, 3}}},
      {"subscribe", {EventType::Subscribe, {2, 2}}},
      {"unsubscribe", {EventType::Unsubscribe, {2, 2}}},
      {"publish", {EventType::Publish, {3, 5}}},
      {"sink", {EventType::Sink, {3, 3}}},
      {"drain", {EventType::Drain, {2, 2}}},
      {"text", {EventType::Text, {2, 1u << 30}}},
      {"read", {EventType::Read, {2, 2}}},
  };
  std::vector<ScriptEvent> events;
  std::size_t line_no = 0, pos = 0;
  while (pos < script.size()) {
    std::size_t end = script.find('\n', pos);
    if (end == std::string_view::npos) end = script.size();
    std::string line(script.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream in(line);
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    if (words.empty()) continue;
    if (words.size() < 2) fail(ErrorCode::ScriptError, "line " + std::to_string(line_no) + ": missing event name");

    ScriptEvent ev;
    ev.line = line_no;
    ev.t_ms = static_cast<std::int64_t>(detail::parse_uint(words[0], line_no, 1ULL << 62));
    auto it = kEvents.find(words[1]);
    if (it == kEvents.end())
      fail(ErrorCode::ScriptError, "line " + std::to_string(line_no) + ": unknown event '" + words[1] + "'");
    ev.type = it->second.first;
    ev.args.assign(words.begin() + 2, words.end());
    const auto [min_args, max_args] = it->second.second;
    if (ev.args.size() < min_args || ev.args.size() > max_args)
      fail(ErrorCode::ScriptError, "line " + std::to_string(line_no) + ": wrong argument count for '" + words[1] + "'");
    if (ev.type == EventType::Text) {
      // Message is everything after the participant id, whitespace-collapsed.
      ev.message = words[3];
      for (std::size_t i = 4; i < words.size(); ++i) ev.message += " " + words[i];
      ev.args.resize(1);
    }
    events.push_back(std::move(ev));
  }
  return events;
}

struct TraceRecord {
  std::int64_t t_ms = 0;
  std::string receiver;
  std::uint32_t ssrc = 0;
  std::uint32_t seq = 0;  // text records carry the message index here
  StreamKind kind = StreamKind::Audio;

  bool operator==(const TraceRecord&) const = default;
};

struct SinkSummary {
  std::string name;
  std::uint64_t enqueued = 0, dropped = 0, drained = 0, remaining = 0;
  bool operator==(const SinkSummary&) const = default;
};

struct DeliveryTrace {
  std::vector<TraceRecord> records;
  std::map<StreamKind, KindCounters> counters;
  ReorderStats reorder;
  std::vector<SinkSummary> sinks;
  std::vector<TextMessage> text_log;
  std::size_t text_blocked = 0;  // posts still waiting on a full text sink at the end

  /// One line per delivery, `<t_ms> <receiver> <ssrc> <seq> <kind>`.
  std::string render_records() const {
    std::string out;
    for (const auto& r : records) {
      out += std::to_string(r.t_ms) + ' ' + r.receiver + ' ' + std::to_string(r.ssrc) + ' ' +
             std::to_string(r.seq) + ' ' + std::string(to_string(r.kind)) + '\n';
    }
    return out;
  }

  /// Records plus counters and the text log; hashed for determinism checks.
  std::string render() const {
    std::string out = render_records();
    for (const auto& [kind, c] : counters)
      out += "# counters " + std::string(to_string(kind)) + " published=" + std::to_string(c.published) +
             " forwarded=" + std::to_string(c.forwarded) + " delivered=" + std::to_string(c.delivered) +
             " dropped=" + std::to_string(c.dropped) + '\n';
    out += "# reorder duplicates=" + std::to_string(reorder.duplicates) + " late=" + std::to_string(reorder.late) +
           " lost=" + std::to_string(reorder.lost) + '\n';
    for (const auto& s : sinks)
      out += "# sink " + s.name + " enqueued=" + std::to_string(s.enqueued) + " dropped=" + std::to_string(s.dropped) +
             " drained=" + std::to_string(s.drained) + " remaining=" + std::to_string(s.remaining) + '\n';
    for (const auto& m : text_log) out += "# text " + std::to_string(m.index) + ' ' + m.sender + ' ' + m.body + '\n';
    out += "# text_blocked " + std::to_string(text_blocked) + '\n';
    return out;
  }

  std::uint64_t hash() const { return fnv1a(render()); }
};

/// Runs a scenario against one room. Events execute in timestamp order,
/// ties in script order. Text posts refused by a full text sink wait (in
/// order) and are retried after each drain.
class Simulator {
 public:
  explicit Simulator(std::size_t reorder_window = 8, std::string room_id = "room")
      : room_(std::move(room_id), reorder_window) {}

  DeliveryTrace run(std::vector<ScriptEvent> events) {
    std::stable_sort(events.begin(), events.end(),
                     [](const ScriptEvent& a, const ScriptEvent& b) { return a.t_ms < b.t_ms; });
    std::int64_t now = 0;
    for (const auto& ev : events) {
      now = ev.t_ms;
      try {
        execute(ev);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::ScriptError) throw;
        fail(ErrorCode::ScriptError, "line " + std::to_string(ev.line) + ": " + e.what());
      }
    }
    record(now, room_.flush());

    trace_.counters.clear();
    for (StreamKind k : {StreamKind::Audio, StreamKind::Video}) trace_.counters[k] = room_.counters(k);
    trace_.reorder = room_.reorder_stats();
    trace_.sinks.clear();
    for (const auto& s : room_.sinks())
      trace_.sinks.push_back({s->name(), s->enqueued(), s->dropped(), s->drained(), s->size()});
    trace_.text_log = room_.read_text(0);
    trace_.text_blocked = blocked_text_.size();
    return std::move(trace_);
  }

  const Room& room() const { return room_; }

 private:
  void record(std::int64_t t, const std::vector<Delivery>& deliveries) {
    for (const auto& d : deliveries)
      trace_.records.push_back({t, d.receiver, d.packet.ssrc, d.packet.seq, d.packet.kind});
  }

  std::uint32_t ssrc_arg(const ScriptEvent& ev, std::size_t i) const {
    return static_cast<std::uint32_t>(detail::parse_uint(ev.args[i], ev.line, 0xFFFFFFFFULL));
  }

  void retry_blocked_text() {
    while (!blocked_text_.empty()) {
      auto& [who, body] = blocked_text_.front();
      if (!room_.contains(who)) {
        blocked_text_.pop_front();
        continue;
      }
      if (room_.post_text(who, body) == TextPost::Blocked) return;
      blocked_text_.pop_front();
    }
  }

  void execute(const ScriptEvent& ev) {
    const auto& a = ev.args;
    switch (ev.type) {
      case EventType::Join: room_.join(a[0]); break;
      case EventType::Leave: record(ev.t_ms, room_.leave(a[0])); break;
      case EventType::Announce: room_.announce(a[0], ssrc_arg(ev, 1), parse_kind(a[2])); break;
      case EventType::Subscribe: room_.subscribe(a[0], ssrc_arg(ev, 1)); break;
      case EventType::Unsubscribe: room_.unsubscribe(a[0], ssrc_arg(ev, 1)); break;
      case EventType::Publish: {
        MediaPacket p;
        p.ssrc = ssrc_arg(ev, 1);
        p.seq = static_cast<std::uint16_t>(detail::parse_uint(a[2], ev.line, 0xFFFF));
        p.timestamp = a.size() > 3 ? static_cast<std::uint32_t>(detail::parse_uint(a[3], ev.line, 0xFFFFFFFFULL))
                                   : static_cast<std::uint32_t>(ev.t_ms);
        const std::size_t bytes = a.size() > 4 ? detail::parse_uint(a[4], ev.line, kMaxPayload) : 0;
        std::vector<std::uint8_t> payload(bytes);
        for (std::size_t i = 0; i < bytes; ++i) payload[i] = static_cast<std::uint8_t>((p.seq + i) & 0xFF);
        p.payload = make_payload(std::move(payload));
        const auto& pubs = room_.publications();
        auto it = pubs.find(p.ssrc);
        if (it == pubs.end())
          fail(ErrorCode::ScriptError, "line " + std::to_string(ev.line) + ": publish on unannounced ssrc " + a[1]);
        p.kind = it->second.kind;
        record(ev.t_ms, room_.publish(a[0], p));
        break;
      }
      case EventType::Sink: {
        std::set<StreamKind> kinds;
        std::string list = a[1];
        for (std::size_t start = 0; start <= list.size();) {
          std::size_t comma = list.find(',', start);
          if (comma == std::string::npos) comma = list.size();
          kinds.insert(parse_kind(list.substr(start, comma - start)));
          start = comma + 1;
        }
        if (room_.find_sink(a[0]))
          fail(ErrorCode::ScriptError, "line " + std::to_string(ev.line) + ": duplicate sink '" + a[0] + "'");
        room_.attach_sink(a[0], kinds, detail::parse_uint(a[2], ev.line, 1ULL << 32));
        break;
      }
      case EventType::Drain: {
        auto sink = room_.find_sink(a[0]);
        if (!sink) fail(ErrorCode::ScriptError, "line " + std::to_string(ev.line) + ": unknown sink '" + a[0] + "'");
        const std::string receiver = "sink:" + a[0];
        for (auto& item : sink->drain(detail::parse_uint(a[1], ev.line, 1ULL << 32))) {
          if (auto* p = std::get_if<MediaPacket>(&item))
            trace_.records.push_back({ev.t_ms, receiver, p->ssrc, p->seq, p->kind});
          else {
            const auto& m = std::get<TextMessage>(item);
            trace_.records.push_back({ev.t_ms, receiver, 0, static_cast<std::uint32_t>(m.index), StreamKind::Text});
          }
        }
        retry_blocked_text();
        break;
      }
      case EventType::Text: {
        if (!room_.contains(a[0])) fail(ErrorCode::UnknownParticipant, "'" + a[0] + "' is not in the room");
        if (!blocked_text_.empty() || room_.post_text(a[0], ev.message) == TextPost::Blocked)
          blocked_text_.emplace_back(a[0], ev.message);
        break;
      }
      case EventType::Read: {
        if (!room_.contains(a[0])) fail(ErrorCode::UnknownParticipant, "'" + a[0] + "' is not in the room");
        for (const auto& m : room_.read_text(detail::parse_uint(a[1], ev.line, 1ULL << 62)))
          trace_.records.push_back({ev.t_ms, a[0], 0, static_cast<std::uint32_t>(m.index), StreamKind::Text});
        break;
      }
    }
  }

  Room room_;
  DeliveryTrace trace_;
  std::deque<std::pair<std::string, std::string>> blocked_text_;
};

inline DeliveryTrace run_scenario(std::string_view script, std::size_t reorder_window = 8) {
  return Simulator(reorder_window).run(parse_script(script));
}

// ---------------------------------------------------------------------------
// Seeded scenario generator

struct ScenarioSpec {
  std::uint64_t seed = 1;
  std::size_t packets = 10000;        // total media packets across publishers
  std::size_t publishers = 3;
  std::size_t subscribers = 5;
  double reorder_fraction = 0.2;      // share of packets displaced
  std::size_t max_displacement = 3;   // positions, must stay below the reorder window
  std::size_t text_every = 250;       // a text post every N packets
  std::size_t drain_every = 40;
};

struct GeneratedScenario {
  std::string script;
  std::vector<std::uint32_t> ssrcs;
  std::vector<std::uint16_t> first_seq;  // per ssrc, sequence number of ordinal 0
  std::string late_joiner;
  std::string early_leaver;
};

/// Publishers P1..Pn each own one stream (odd ones video, even ones audio).
/// Subscribers S1..Sm subscribe to every stream; one joins mid-stream and
/// one leaves mid-stream. P1 also subscribes to P2 so publishers receive
/// each other's media. Sequence numbers start near the 16-bit wrap.
inline GeneratedScenario generate_scenario(const ScenarioSpec& spec) {
  Rng rng(spec.seed);
  GeneratedScenario g;
  std::ostringstream s;
  s << "# generated scenario seed=" << spec.seed << "\n";
  const std::size_t np = std::max<std::size_t>(spec.publishers, 1);
  for (std::size_t i = 0; i < np; ++i) {
    g.ssrcs.push_back(static_cast<std::uint32_t>(1000 + i + 1));
    g.first_seq.push_back(static_cast<std::uint16_t>(65536 - 500 - rng.below(2000)));
  }
  for (std::size_t i = 0; i < np; ++i) s << "0 join P" << i + 1 << "\n";
  for (std::size_t i = 0; i < np; ++i) s << "0 announce P" << i + 1 << ' ' << g.ssrcs[i] << (i % 2 == 0 ? " video" : " audio") << "\n";
  s << "0 sink tap-audio audio 64\n0 sink tap-video video 16\n0 sink console text 4\n";

  const std::size_t late_index = spec.subscribers;  // the last subscriber joins late
  const std::size_t leave_index = spec.subscribers > 1 ? 2 : 0;
  if (spec.subscribers) {
    g.late_joiner = "S" + std::to_string(late_index);
    g.early_leaver = leave_index ? "S" + std::to_string(leave_index) : "";
  }
  for (std::size_t j = 1; j <= spec.subscribers; ++j) {
    if (j == late_index && spec.subscribers > 1) continue;
    s << "0 join S" << j << "\n";
    for (auto ssrc : g.ssrcs) s << "0 subscribe S" << j << ' ' << ssrc << "\n";
  }
  if (np > 1) s << "0 subscribe P1 " << g.ssrcs[1] << "\n";

  // Natural order: round-robin over publishers. Then displace a fraction of
  // each stream's packets forward by 1..max_displacement positions. The
  // opening packet stays first: receivers anchor on the first arrival.
  std::vector<std::vector<std::size_t>> order(np);
  const std::size_t per = spec.packets / np;
  for (std::size_t i = 0; i < np; ++i) {
    const std::size_t count = per + (i < spec.packets % np ? 1 : 0);
    auto& o = order[i];
    o.resize(count);
    for (std::size_t k = 0; k < count; ++k) o[k] = k;
    for (std::size_t k = 1; k + 1 < count; ++k) {
      if (!rng.bernoulli(spec.reorder_fraction)) continue;
      const std::size_t d = 1 + rng.below(std::max<std::size_t>(spec.max_displacement, 1));
      const std::size_t to = std::min(count - 1, k + d);
      const std::size_t moved = o[k];
      for (std::size_t m = k; m < to; ++m) o[m] = o[m + 1];
      o[to] = moved;
      k = to;  // keep displacement bounded: a packet moves at most once
    }
  }

  std::vector<std::size_t> cursor(np, 0);
  const std::int64_t join_at = static_cast<std::int64_t>(spec.packets * 3 / 10);
  const std::int64_t leave_at = static_cast<std::int64_t>(spec.packets * 7 / 10);
  for (std::size_t n = 0; n < spec.packets; ++n) {
    const auto t = static_cast<std::int64_t>(n);
    if (t == join_at && spec.subscribers > 1) {
      s << t << " join " << g.late_joiner << "\n";
      for (auto ssrc : g.ssrcs) s << t << " subscribe " << g.late_joiner << ' ' << ssrc << "\n";
    }
    if (t == leave_at && !g.early_leaver.empty()) s << t << " leave " << g.early_leaver << "\n";
    const std::size_t pub = n % np;
    if (cursor[pub] >= order[pub].size()) continue;
    const std::size_t ordinal = order[pub][cursor[pub]++];
    const auto seq = static_cast<std::uint16_t>(g.first_seq[pub] + ordinal);
    const std::size_t bytes = 20 + rng.below(200);
    s << t << " publish P" << pub + 1 << ' ' << g.ssrcs[pub] << ' ' << seq << ' ' << ordinal * 3000 << ' ' << bytes
      << "\n";
    if (spec.text_every && n % spec.text_every == 0) {
      const std::string who = (n / spec.text_every) % 2 == 0 ? "P1" : "S1";
      s << t << " text " << who << " note " << n << "\n";
    }
    if (spec.drain_every && n % spec.drain_every == spec.drain_every - 1) {
      s << t << " drain tap-audio 32\n";
      if (n % (spec.drain_every * 5) == spec.drain_every - 1) s << t << " drain tap-video 8\n";
      if (n % (spec.drain_every * 3) == spec.drain_every - 1) s << t << " drain console 2\n";
    }
  }
  const auto end = static_cast<std::int64_t>(spec.packets);
  s << end << " drain console 1000000\n";
  for (std::size_t j = 1; j <= spec.subscribers; ++j)
    if ("S" + std::to_string(j) != g.early_leaver) s << end << " read S" << j << " 0\n";
  g.script = s.str();
  return g;
}

}  // namespace teleems::relay

#endif  // TELEEMS_RELAY_HPP
