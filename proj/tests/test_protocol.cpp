#include "semgrid/protocol.hpp"

#include "doctest.h"
#include "support/random_messages.hpp"

#include <cstring>
#include <numeric>
#include <random>

using namespace semgrid;
using namespace semgrid::testing;

namespace {

ProtocolErrc error_of(std::span<const std::uint8_t> bytes) {
  try {
    decode(bytes);
  } catch (const ProtocolError& e) {
    return e.code();
  }
  FAIL("frame decoded without error");
  return ProtocolErrc::bad_magic;
}

}  // namespace

TEST_CASE("frame header layout") {
  const std::vector<std::uint8_t> payload{1, 2, 3, 4, 5};
  const auto f = encode_frame(MsgType::pose, 0x0102, 0x1122334455667788ull, payload);
  REQUIRE(f.size() == kFrameHeaderSize + 5);
  CHECK(std::vector<std::uint8_t>(f.begin(), f.begin() + 4) == std::vector<std::uint8_t>{'S', 'E', 'S', '1'});
  CHECK(f[4] == 3);
  CHECK(f[5] == 0x02);
  CHECK(f[6] == 0x01);
  CHECK(f[7] == 0x88);
  CHECK(f[14] == 0x11);
  CHECK(std::vector<std::uint8_t>(f.begin() + 15, f.begin() + 19) == std::vector<std::uint8_t>{0x05, 0x00, 0x00, 0x00});
  const auto h = decode_header(f);
  CHECK(h.payload_len == 5);
  CHECK(h.sensor_id == 0x0102);
  CHECK(h.timestamp_us == 0x1122334455667788ull);
}

TEST_CASE("empty cloud") {
  SemanticCloud c;
  c.sensor_id = 4;
  c.timestamp_us = 99;
  const auto bytes = encode(c);
  CHECK(decode_header(bytes).payload_len == 4);
  const auto back = std::get<SemanticCloud>(decode(bytes));
  CHECK(back.sensor_id == 4);
  CHECK(back.timestamp_us == 99u);
  CHECK(back.points.empty());
}

TEST_CASE("probability quantization") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 2000; ++t) {
    const auto d = random_distribution(rng);
    const auto q = quantize_probabilities(d);
    CHECK(std::accumulate(q.begin(), q.end(), 0u) == 65535u);
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(std::abs(q[c] / 65535.0 - d.prob(c)) <= 1.0 / 65535.0);
  }
  const auto u = quantize_probabilities(ClassDistribution::uniform());
  CHECK(std::accumulate(u.begin(), u.end(), 0u) == 65535u);
}

TEST_CASE("randomized round trips") {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 1000; ++t) {
    const Message pose = random_pose_set(rng);
    const auto bytes = encode(pose);
    const auto back = decode(bytes);
    REQUIRE(messages_match(pose, back));
    CHECK(encode(back) == bytes);
  }
  for (int t = 0; t < 300; ++t) {
    const Message m = random_message(rng);
    const auto bytes = encode(m);
    CHECK(messages_match(m, decode(bytes)));
    CHECK(encode(m) == bytes);
  }
}

TEST_CASE("pose wire example") {
  PoseSet2p5D p;
  p.sensor_id = 2;
  p.timestamp_us = 1000;
  PersonKeypoints person;
  person.person_id = 7;
  person.joints[0] = Keypoint2p5D{100.5, 50.25, 0.75, 2.5, 0.02, false};
  person.joints[3] = Keypoint2p5D{10, 20, 0.5, std::nullopt, std::nullopt, true};
  p.persons.push_back(person);
  const auto bytes = encode(p);
  CHECK(decode_header(bytes).payload_len == 1 + 8 + 2 * 20);
  CHECK(bytes[kFrameHeaderSize + 5] == 0x09);  // mask bits 0 and 3
  const auto back = std::get<PoseSet2p5D>(decode(bytes));
  CHECK_FALSE(back.persons[0].joints[3]->occluded_by_feedback);  // local flag does not travel
  CHECK_FALSE(back.persons[0].joints[3]->depth);
  CHECK(*back.persons[0].joints[0]->depth == doctest::Approx(2.5));
}

TEST_CASE("streaming reassembly over random splits") {
  std::mt19937_64 rng(77);
  std::vector<Message> msgs;
  std::vector<std::uint8_t> stream;
  for (int i = 0; i < 60; ++i) {
    msgs.push_back(random_message(rng));
    const auto b = encode(msgs.back());
    stream.insert(stream.end(), b.begin(), b.end());
  }
  for (int trial = 0; trial < 50; ++trial) {
    StreamDecoder dec;
    std::vector<Message> got;
    std::size_t pos = 0;
    while (pos < stream.size()) {
      const std::size_t n = std::min<std::size_t>(stream.size() - pos, 1 + rng() % (trial < 10 ? 3 : 400));
      dec.feed(std::span<const std::uint8_t>(stream.data() + pos, n));
      pos += n;
      while (auto m = dec.next()) got.push_back(std::move(*m));
    }
    REQUIRE(got.size() == msgs.size());
    for (std::size_t i = 0; i < msgs.size(); ++i) CHECK(messages_match(msgs[i], got[i]));
    CHECK(dec.buffered() == 0);
  }
}

TEST_CASE("malformed frames yield typed errors") {
  std::mt19937_64 rng(5);
  const auto good = encode(random_pose_set(rng));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(error_of(bad_magic) == ProtocolErrc::bad_magic);

  auto unknown = good;
  unknown[4] = 9;
  CHECK(error_of(unknown) == ProtocolErrc::unknown_type);
  unknown[4] = 0;
  CHECK(error_of(unknown) == ProtocolErrc::unknown_type);

  const std::vector<std::uint8_t> short_header(good.begin(), good.begin() + 10);
  CHECK(error_of(short_header) == ProtocolErrc::truncated);
  const std::vector<std::uint8_t> cut(good.begin(), good.end() - 1);
  CHECK(error_of(cut) == ProtocolErrc::truncated);

  auto trailing = good;
  trailing.push_back(0);
  CHECK(error_of(trailing) == ProtocolErrc::length_mismatch);

  // Declared length consistent with the buffer but the content needs more bytes.
  PoseSet2p5D one;
  one.persons.push_back(PersonKeypoints{1, {}});
  one.persons[0].joints[0] = Keypoint2p5D{1, 2, 0.5, std::nullopt, std::nullopt, false};
  const auto enc = encode(one);
  const std::vector<std::uint8_t> inner(enc.begin() + kFrameHeaderSize, enc.end() - 4);
  CHECK(error_of(encode_frame(MsgType::pose, 0, 0, inner)) == ProtocolErrc::length_mismatch);

  auto huge = encode_frame(MsgType::cloud, 0, 0, std::vector<std::uint8_t>{});
  huge[15] = 0xff;
  huge[16] = 0xff;
  huge[17] = 0xff;
  huge[18] = 0x7f;
  CHECK(error_of(huge) == ProtocolErrc::payload_too_large);

  // Mask bit 20 set.
  std::vector<std::uint8_t> mask_payload{1, 1, 0, 0, 0, 0, 0, 0x10, 0};
  CHECK(error_of(encode_frame(MsgType::pose, 0, 0, mask_payload)) == ProtocolErrc::malformed_payload);

  // Confidence outside [0, 1].
  auto conf = enc;
  const float two = 2.0f;
  std::memcpy(conf.data() + kFrameHeaderSize + 9 + 8, &two, 4);
  CHECK(error_of(conf) == ProtocolErrc::malformed_payload);

  // Cloud with point count inconsistent with length.
  std::vector<std::uint8_t> cloud_payload{3, 0, 0, 0};
  CHECK(error_of(encode_frame(MsgType::cloud, 0, 0, cloud_payload)) == ProtocolErrc::length_mismatch);

  // Stream decoder rejects garbage early and stays failed.
  StreamDecoder dec;
  const std::vector<std::uint8_t> junk{'S', 'E', 'X'};
  dec.feed(junk);
  CHECK_THROWS_AS(dec.next(), ProtocolError);
  CHECK_THROWS_AS(dec.next(), ProtocolError);
}

TEST_CASE("mutation fuzzing never escapes the error type") {
  std::mt19937_64 rng(99);
  int errors = 0, decoded = 0;
  for (int t = 0; t < 3000; ++t) {
    auto bytes = encode(random_message(rng));
    const int flips = 1 + static_cast<int>(rng() % 4);
    for (int f = 0; f < flips; ++f) bytes[rng() % bytes.size()] = static_cast<std::uint8_t>(rng());
    if (rng() % 3 == 0) bytes.resize(rng() % (bytes.size() + 1));
    try {
      decode(bytes);
      ++decoded;
    } catch (const ProtocolError&) {
      ++errors;
    }
  }
  CHECK(errors + decoded == 3000);
  CHECK(errors > 0);
}
