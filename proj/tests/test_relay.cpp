#include <gtest/gtest.h>

#include <map>
#include <set>
#include <thread>

#include "teleems/relay.hpp"

using namespace teleems;
using namespace teleems::relay;

namespace {

MediaPacket packet(std::uint32_t ssrc, std::uint16_t seq, StreamKind kind = StreamKind::Audio) {
  return {ssrc, seq, seq * 160u, kind, make_payload({1, 2, 3})};
}

std::vector<std::uint16_t> seqs(const std::vector<MediaPacket>& ps) {
  std::vector<std::uint16_t> out;
  for (const auto& p : ps) out.push_back(p.seq);
  return out;
}

std::vector<std::uint16_t> seqs(const std::vector<Delivery>& ds) {
  std::vector<std::uint16_t> out;
  for (const auto& d : ds) out.push_back(d.packet.seq);
  return out;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(SeqArithmetic, HalfRange) {
  EXPECT_TRUE(seq_newer(2, 1));
  EXPECT_FALSE(seq_newer(1, 2));
  EXPECT_TRUE(seq_newer(0, 65535));
  EXPECT_TRUE(seq_newer(100, 65500));
  EXPECT_FALSE(seq_newer(5, 5));
  EXPECT_FALSE(seq_newer(static_cast<std::uint16_t>(1 + 32768), 1));
}

TEST(SeqArithmetic, UnwrapAcrossZero) {
  SeqUnwrapper u;
  EXPECT_EQ(u.unwrap(65534), 65534);
  EXPECT_EQ(u.unwrap(65535), 65535);
  EXPECT_EQ(u.unwrap(0), 65536);
  EXPECT_EQ(u.unwrap(65535), 65535);
  EXPECT_EQ(u.unwrap(3), 65539);
}

TEST(ReorderBuffer, WorkedExample) {
  ReorderBuffer b(2);
  EXPECT_EQ(seqs(b.deliver(packet(1, 1))), (std::vector<std::uint16_t>{1}));
  EXPECT_TRUE(b.deliver(packet(1, 3)).empty());
  EXPECT_EQ(seqs(b.deliver(packet(1, 2))), (std::vector<std::uint16_t>{2, 3}));
}

TEST(ReorderBuffer, InOrderImmediate) {
  ReorderBuffer b(8);
  for (std::uint16_t s = 10; s < 20; ++s) EXPECT_EQ(seqs(b.deliver(packet(1, s))), std::vector<std::uint16_t>{s});
  EXPECT_EQ(b.pending(), 0u);
}

TEST(ReorderBuffer, DuplicateDropped) {
  ReorderBuffer b(8);
  b.deliver(packet(1, 3));
  EXPECT_EQ(seqs(b.deliver(packet(1, 4))), std::vector<std::uint16_t>{4});
  EXPECT_TRUE(b.deliver(packet(1, 4)).empty());
  EXPECT_EQ(b.stats().late, 1u);
  EXPECT_TRUE(b.deliver(packet(1, 7)).empty());
  EXPECT_TRUE(b.deliver(packet(1, 7)).empty());
  EXPECT_EQ(b.stats().duplicates, 1u);
}

TEST(ReorderBuffer, GapSkippedAsLoss) {
  ReorderBuffer b(4);
  b.deliver(packet(1, 1));
  EXPECT_TRUE(b.deliver(packet(1, 3)).empty());
  EXPECT_TRUE(b.deliver(packet(1, 4)).empty());
  EXPECT_TRUE(b.deliver(packet(1, 5)).empty());
  // 6 - 2 reaches the window: slot 2 is written off.
  EXPECT_EQ(seqs(b.deliver(packet(1, 6))), (std::vector<std::uint16_t>{3, 4, 5, 6}));
  EXPECT_EQ(b.stats().lost, 1u);
  EXPECT_TRUE(b.deliver(packet(1, 2)).empty());
  EXPECT_EQ(b.stats().late, 1u);
}

TEST(ReorderBuffer, WrapsAroundSequenceSpace) {
  ReorderBuffer b(4);
  b.deliver(packet(1, 65534));
  EXPECT_TRUE(b.deliver(packet(1, 0)).empty());
  EXPECT_EQ(seqs(b.deliver(packet(1, 65535))), (std::vector<std::uint16_t>{65535, 0}));
  EXPECT_EQ(seqs(b.deliver(packet(1, 1))), std::vector<std::uint16_t>{1});
}

TEST(ReorderBuffer, NeverHoldsMoreThanWindow) {
  Rng rng(5);
  for (std::size_t window : {2u, 3u, 8u, 16u}) {
    ReorderBuffer b(window);
    std::int64_t last = -1;
    for (int i = 0; i < 2000; ++i) {
      const auto s = static_cast<std::uint16_t>(i + static_cast<int>(rng.below(2 * window)));
      for (const auto& p : b.deliver(packet(1, s))) {
        const std::int64_t v = p.seq;
        EXPECT_GT(v, last);
        last = v;
      }
      EXPECT_LE(b.pending(), window);
    }
  }
}

TEST(ReorderBuffer, FlushReleasesRemainder) {
  ReorderBuffer b(8);
  b.deliver(packet(1, 1));
  b.deliver(packet(1, 4));
  b.deliver(packet(1, 3));
  EXPECT_EQ(seqs(b.flush()), (std::vector<std::uint16_t>{3, 4}));
  EXPECT_EQ(b.stats().lost, 1u);
}

TEST(Room, JoinLeave) {
  Room room = create_room("r1");
  room.join("A");
  room.join("B");
  EXPECT_EQ(room.participants(), (std::set<std::string>{"A", "B"}));
  EXPECT_EQ(code_of([&] { room.join("A"); }), ErrorCode::DuplicateParticipant);
  EXPECT_EQ(code_of([&] { room.leave("Z"); }), ErrorCode::UnknownParticipant);
  room.leave("A");
  EXPECT_EQ(room.participants(), std::set<std::string>{"B"});
}

TEST(Room, FanOutWithoutSelfLoop) {
  Room room("r");
  for (auto p : {"A", "B", "C", "D"}) room.join(p);
  room.announce("A", 7, StreamKind::Video);
  for (auto p : {"B", "C", "D"}) room.subscribe(p, 7);
  EXPECT_EQ(code_of([&] { room.subscribe("A", 7); }), ErrorCode::InvalidArgument);
  auto out = room.publish("A", packet(7, 1, StreamKind::Video));
  ASSERT_EQ(out.size(), 3u);
  for (const auto& d : out) EXPECT_NE(d.receiver, "A");
}

TEST(Room, PayloadIsSharedNotCopied) {
  Room room("r");
  room.join("A");
  room.join("B");
  room.announce("A", 1, StreamKind::Audio);
  room.subscribe("B", 1);
  auto sink = room.attach_sink("tap", {StreamKind::Audio}, 4);
  auto p = packet(1, 9);
  auto out = room.publish("A", p);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].packet.payload.get(), p.payload.get());
  auto drained = sink->drain(4);
  ASSERT_EQ(drained.size(), 1u);
  EXPECT_EQ(std::get<MediaPacket>(drained[0]).payload.get(), p.payload.get());
}

TEST(Room, ForeignSsrcRejected) {
  Room room("r");
  room.join("A");
  room.join("B");
  room.announce("A", 1, StreamKind::Audio);
  EXPECT_EQ(code_of([&] { room.publish("B", packet(1, 1)); }), ErrorCode::SsrcOwnership);
  EXPECT_EQ(code_of([&] { room.announce("B", 1, StreamKind::Audio); }), ErrorCode::SsrcOwnership);
  EXPECT_EQ(code_of([&] { room.publish("Z", packet(1, 1)); }), ErrorCode::UnknownParticipant);
  EXPECT_EQ(code_of([&] { room.subscribe("B", 99); }), ErrorCode::UnknownStream);
}

TEST(Room, LateJoinerGetsNoHistory) {
  Room room("r");
  room.join("A");
  room.announce("A", 1, StreamKind::Audio);
  for (std::uint16_t s = 1; s <= 5; ++s) room.publish("A", packet(1, s));
  room.join("B");
  room.subscribe("B", 1);
  auto out = room.publish("A", packet(1, 6));
  EXPECT_EQ(seqs(out), std::vector<std::uint16_t>{6});
}

TEST(Room, LeaveDoesNotInterruptOthers) {
  Room room("r");
  for (auto p : {"A", "B", "C"}) room.join(p);
  room.announce("A", 1, StreamKind::Audio);
  room.subscribe("B", 1);
  room.subscribe("C", 1);
  room.publish("A", packet(1, 1));
  room.leave("C");
  auto out = room.publish("A", packet(1, 2));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].receiver, "B");
  EXPECT_EQ(out[0].packet.seq, 2);
}

TEST(Room, PublisherLeaveEndsStreams) {
  Room room("r");
  room.join("A");
  room.join("B");
  room.announce("A", 1, StreamKind::Audio);
  room.subscribe("B", 1);
  room.publish("A", packet(1, 1));
  room.publish("A", packet(1, 3));
  auto flushed = room.leave("A");
  EXPECT_EQ(seqs(flushed), std::vector<std::uint16_t>{3});
  EXPECT_TRUE(room.publications().at(1).ended);
  EXPECT_EQ(code_of([&] { room.subscribe("B", 1); }), ErrorCode::UnknownStream);
}

TEST(Sink, KindFilter) {
  Room room("r");
  room.join("A");
  auto sink = room.attach_sink("audio", {StreamKind::Audio}, 8);
  room.publish("A", packet(2, 1, StreamKind::Video));
  EXPECT_EQ(sink->size(), 0u);
  room.publish("A", packet(3, 1, StreamKind::Audio));
  EXPECT_EQ(sink->size(), 1u);
}

TEST(Sink, DropOldestOnOverflow) {
  Room room("r");
  room.join("A");
  auto sink = room.attach_sink("s", {StreamKind::Audio}, 2);
  for (std::uint16_t s = 1; s <= 3; ++s) room.publish("A", packet(1, s));
  EXPECT_EQ(sink->dropped(), 1u);
  auto items = sink->drain(10);
  ASSERT_EQ(items.size(), 2u);
  EXPECT_EQ(std::get<MediaPacket>(items[0]).seq, 2);
  EXPECT_EQ(std::get<MediaPacket>(items[1]).seq, 3);
}

TEST(Sink, DrainFifoBounded) {
  Sink sink("s", {StreamKind::Audio}, 16);
  for (std::uint16_t s = 1; s <= 5; ++s) sink.push_media(packet(1, s));
  auto first = sink.drain(3);
  ASSERT_EQ(first.size(), 3u);
  EXPECT_EQ(std::get<MediaPacket>(first[0]).seq, 1);
  EXPECT_EQ(std::get<MediaPacket>(first[2]).seq, 3);
  EXPECT_EQ(sink.drain(10).size(), 2u);
}

TEST(Sink, ConcurrentDrain) {
  auto sink = std::make_shared<Sink>("s", std::set<StreamKind>{StreamKind::Audio}, 100000);
  std::atomic<std::size_t> got{0};
  std::thread consumer([&] {
    while (got < 20000) got += sink->drain(64).size();
  });
  for (int i = 0; i < 20000; ++i) sink->push_media(packet(1, static_cast<std::uint16_t>(i)));
  consumer.join();
  EXPECT_EQ(got.load(), 20000u);
  EXPECT_EQ(sink->dropped(), 0u);
}

TEST(TextRoom, TotalOrder) {
  Room room("r");
  room.join("A");
  room.join("B");
  room.post_text("A", "ards");
  room.post_text("B", "hr=72");
  auto all = room.read_text(0);
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].body, "ards");
  EXPECT_EQ(all[1].body, "hr=72");
  auto tail = room.read_text(1);
  ASSERT_EQ(tail.size(), 1u);
  EXPECT_EQ(tail[0].body, "hr=72");
  EXPECT_TRUE(room.read_text(5).empty());
}

TEST(TextRoom, FullTextSinkBlocks) {
  Room room("r");
  room.join("A");
  auto sink = room.attach_sink("console", {StreamKind::Text}, 1);
  EXPECT_EQ(room.post_text("A", "one"), TextPost::Accepted);
  EXPECT_EQ(room.post_text("A", "two"), TextPost::Blocked);
  EXPECT_EQ(room.read_text(0).size(), 1u);
  sink->drain(1);
  EXPECT_EQ(room.post_text("A", "two"), TextPost::Accepted);
  EXPECT_EQ(sink->dropped(), 0u);
}

TEST(Codec, RoundTrip) {
  std::vector<MediaPacket> ps{{5, 65535, 123456, StreamKind::Video, make_payload({9, 8, 7})},
                              {0xFFFFFFFF, 0, 0, StreamKind::Audio, make_payload({})}};
  auto bytes = encode_packets(ps);
  ASSERT_EQ(bytes.size(), 2 * kPacketHeaderSize + 3);
  // version 1, kind video, length 3
  EXPECT_EQ(bytes[0], 0x03);
  EXPECT_EQ(bytes[1], 0x50);
  EXPECT_EQ(bytes[2], 0xFF);
  EXPECT_EQ(bytes[3], 0xFF);
  auto back = decode_packets(bytes);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].ssrc, ps[i].ssrc);
    EXPECT_EQ(back[i].seq, ps[i].seq);
    EXPECT_EQ(back[i].timestamp, ps[i].timestamp);
    EXPECT_EQ(back[i].kind, ps[i].kind);
    EXPECT_EQ(*back[i].payload, *ps[i].payload);
  }
}

TEST(Codec, RejectsTruncated) {
  auto bytes = encode_packets(std::vector<MediaPacket>{packet(1, 1)});
  bytes.pop_back();
  EXPECT_EQ(code_of([&] { decode_packets(bytes); }), ErrorCode::Io);
  MediaPacket big{1, 1, 1, StreamKind::Audio, make_payload(std::vector<std::uint8_t>(5000))};
  EXPECT_EQ(code_of([&] { encode_packets(std::vector<MediaPacket>{big}); }), ErrorCode::InvalidArgument);
}

TEST(Scenario, EmptyScript) {
  auto trace = run_scenario("");
  EXPECT_TRUE(trace.records.empty());
  EXPECT_TRUE(trace.text_log.empty());
}

TEST(Scenario, SubscriberLeavesOthersContinue) {
  const char* script = R"(
0 join A
0 join B
0 join C
0 announce A 10 audio
1 subscribe B 10
1 subscribe C 10
2 publish A 10 1
3 leave C
4 publish A 10 2
)";
  auto trace = run_scenario(script);
  std::vector<TraceRecord> expect{{2, "B", 10, 1, StreamKind::Audio},
                                  {2, "C", 10, 1, StreamKind::Audio},
                                  {4, "B", 10, 2, StreamKind::Audio}};
  EXPECT_EQ(trace.records, expect);
  EXPECT_EQ(trace.render_records(), "2 B 10 1 audio\n2 C 10 1 audio\n4 B 10 2 audio\n");
}

TEST(Scenario, TimestampOrderWithStableTies) {
  const char* script =
      "5 publish A 1 2\n"
      "0 join A\n"
      "0 join B\n"
      "0 announce A 1 video\n"
      "0 subscribe B 1\n"
      "5 publish A 1 3\n"
      "1 publish A 1 1\n";
  auto trace = run_scenario(script);
  EXPECT_EQ(trace.render_records(), "1 B 1 1 video\n5 B 1 2 video\n5 B 1 3 video\n");
}

TEST(Scenario, InterleavedTextIdenticalForReaders) {
  const char* script = R"(
0 join A
0 join B
0 join C
1 text A chest pain
1 text B hr=72
2 text A ards
3 read B 0
3 read C 0
)";
  auto trace = run_scenario(script);
  ASSERT_EQ(trace.text_log.size(), 3u);
  EXPECT_EQ(trace.text_log[0].body, "chest pain");
  EXPECT_EQ(trace.text_log[1].sender, "B");
  std::vector<std::uint32_t> b, c;
  for (const auto& r : trace.records) (r.receiver == "B" ? b : c).push_back(r.seq);
  EXPECT_EQ(b, (std::vector<std::uint32_t>{0, 1, 2}));
  EXPECT_EQ(b, c);
}

TEST(Scenario, BlockedTextWaitsForDrain) {
  const char* script = R"(
0 join A
0 sink console text 1
1 text A first
2 text A second
3 text A third
4 drain console 1
)";
  auto trace = run_scenario(script);
  ASSERT_EQ(trace.text_log.size(), 2u);
  EXPECT_EQ(trace.text_log[1].body, "second");
  EXPECT_EQ(trace.text_blocked, 1u);
}

TEST(Scenario, ErrorsCarryLineNumbers) {
  auto check = [](const std::string& script, const std::string& needle) {
    try {
      run_scenario(script);
      ADD_FAILURE() << "no error for: " << script;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ScriptError);
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  check("0 join A\n0 frobnicate A\n", "line 2");
  check("0 join A\nxx join B\n", "line 2");
  check("0 join A\n0 join A\n", "line 2");
  check("0 join A\n\n# comment\n0 publish A 1\n", "line 4");
  check("0 join A\n0 publish A 5 1\n", "line 2");
}

TEST(Scenario, SameScriptSameHash) {
  ScenarioSpec spec;
  spec.packets = 2000;
  spec.seed = 9;
  auto g = generate_scenario(spec);
  auto a = run_scenario(g.script);
  auto b = run_scenario(g.script);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.render(), b.render());
  spec.seed = 10;
  EXPECT_NE(run_scenario(generate_scenario(spec).script).hash(), a.hash());
}

TEST(Scenario, ReorderedStreamEmitsInOrder) {
  ScenarioSpec spec;
  spec.packets = 3000;
  spec.seed = 21;
  auto g = generate_scenario(spec);
  auto trace = run_scenario(g.script);
  std::map<std::pair<std::string, std::uint32_t>, std::int64_t> last;
  for (const auto& r : trace.records) {
    if (r.kind == StreamKind::Text || r.receiver.rfind("sink:", 0) == 0) continue;
    const auto idx = std::find(g.ssrcs.begin(), g.ssrcs.end(), r.ssrc) - g.ssrcs.begin();
    const std::int64_t ordinal = static_cast<std::uint16_t>(r.seq - g.first_seq[static_cast<std::size_t>(idx)]);
    auto [it, fresh] = last.emplace(std::make_pair(r.receiver, r.ssrc), ordinal);
    if (!fresh) {
      EXPECT_GT(ordinal, it->second);
      it->second = ordinal;
    }
  }
  for (const auto& [kind, c] : trace.counters) EXPECT_EQ(c.forwarded, c.delivered + c.dropped);
}

TEST(Scenario, FullTimeSubscribersReceiveEveryPacket) {
  ScenarioSpec spec;
  spec.packets = 2000;
  spec.seed = 23;
  spec.reorder_fraction = 0.5;
  auto g = generate_scenario(spec);
  auto trace = run_scenario(g.script);
  std::map<std::pair<std::string, std::uint32_t>, std::set<std::uint32_t>> got;
  for (const auto& r : trace.records)
    if (r.kind != StreamKind::Text) got[{r.receiver, r.ssrc}].insert(r.seq);
  for (std::size_t i = 0; i < g.ssrcs.size(); ++i) {
    const std::size_t count = spec.packets / g.ssrcs.size() + (i < spec.packets % g.ssrcs.size() ? 1 : 0);
    for (const char* s : {"S1", "S3", "S4"}) EXPECT_EQ((got[{s, g.ssrcs[i]}].size()), count) << s << " " << g.ssrcs[i];
  }
}
