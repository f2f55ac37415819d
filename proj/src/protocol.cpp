#include "semgrid/protocol.hpp"

#include "semgrid/bytes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

namespace semgrid {

namespace {

using bytes::put;

[[noreturn]] void fail(ProtocolErrc code, const std::string& what) { throw ProtocolError(code, what); }

constexpr std::size_t kPoseJointBytes = 20;
constexpr std::size_t kFeedbackJointBytes = 13;
constexpr std::size_t kSnapshotCellBytes = 22;
constexpr std::uint32_t kAllJointsMask = (1u << kNumJoints) - 1u;

void put_f32(std::vector<std::uint8_t>& out, double v) { put(out, static_cast<float>(v)); }

void encode_hello(std::vector<std::uint8_t>& out, const HelloMsg& h) {
  put(out, h.protocol_version);
  put(out, h.class_set_fingerprint);
  const auto& c = h.calib;
  for (double v : {c.fx, c.fy, c.cx, c.cy}) put(out, v);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) put(out, c.rotation(r, k));
  for (int k = 0; k < 3; ++k) put(out, c.translation(k));
  put(out, c.depth_noise_sigma);
  if (c.width < 0 || c.width > 65535 || c.height < 0 || c.height > 65535)
    throw std::invalid_argument("encode: image size does not fit u16");
  put(out, static_cast<std::uint16_t>(c.width));
  put(out, static_cast<std::uint16_t>(c.height));
}

void encode_cloud(std::vector<std::uint8_t>& out, const SemanticCloud& c) {
  put(out, static_cast<std::uint32_t>(c.points.size()));
  for (const auto& p : c.points) {
    if (p.dist.size() != kNumClasses) throw std::invalid_argument("encode: cloud distributions must have 16 classes");
    for (int k = 0; k < 3; ++k) put_f32(out, p.position(k));
    for (auto q : quantize_probabilities(p.dist)) put(out, q);
  }
}

template <typename J>
std::uint32_t joint_mask(const JointArray<J>& joints) {
  std::uint32_t mask = 0;
  for (std::size_t j = 0; j < kNumJoints; ++j)
    if (joints[j]) mask |= 1u << j;
  return mask;
}

void encode_pose(std::vector<std::uint8_t>& out, const PoseSet2p5D& p) {
  if (p.persons.size() > 255) throw std::invalid_argument("encode: more than 255 persons");
  put(out, static_cast<std::uint8_t>(p.persons.size()));
  for (const auto& person : p.persons) {
    put(out, person.person_id);
    put(out, joint_mask(person.joints));
    for (const auto& j : person.joints) {
      if (!j) continue;
      put_f32(out, j->u);
      put_f32(out, j->v);
      put_f32(out, j->confidence);
      put_f32(out, j->depth ? *j->depth : NAN);
      put_f32(out, j->depth_sigma ? *j->depth_sigma : NAN);
    }
  }
}

void encode_feedback(std::vector<std::uint8_t>& out, const FeedbackMsg& f) {
  if (f.persons.size() > 255) throw std::invalid_argument("encode: more than 255 persons");
  put(out, static_cast<std::uint8_t>(f.persons.size()));
  for (const auto& person : f.persons) {
    put(out, person.person_id);
    put(out, joint_mask(person.joints));
    for (const auto& j : person.joints) {
      if (!j) continue;
      put_f32(out, j->u);
      put_f32(out, j->v);
      put_f32(out, j->confidence);
      put(out, static_cast<std::uint8_t>(j->occluded ? 1 : 0));
    }
  }
}

void encode_snapshot(std::vector<std::uint8_t>& out, const SnapshotMsg& s) {
  put(out, static_cast<std::uint32_t>(s.cells.size()));
  for (const auto& c : s.cells) {
    put(out, c.index.ix);
    put(out, c.index.iy);
    put(out, c.index.iz);
    put_f32(out, c.occupancy_log_odds);
    put(out, static_cast<std::uint8_t>(c.class_idx));
    put_f32(out, c.probability);
    put(out, static_cast<std::uint8_t>(c.source));
  }
}

void expect_exact(const bytes::Reader& r, const char* what) {
  if (!r.ok()) fail(ProtocolErrc::length_mismatch, std::string(what) + ": payload shorter than its contents");
  if (r.remaining() != 0) fail(ProtocolErrc::length_mismatch, std::string(what) + ": trailing bytes in payload");
}

HelloMsg decode_hello(std::span<const std::uint8_t> payload, std::uint16_t sensor_id) {
  bytes::Reader r(payload);
  HelloMsg h;
  h.protocol_version = r.read<std::uint16_t>();
  h.class_set_fingerprint = r.read<std::uint64_t>();
  auto& c = h.calib;
  c.sensor_id = sensor_id;
  c.fx = r.read<double>();
  c.fy = r.read<double>();
  c.cx = r.read<double>();
  c.cy = r.read<double>();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) c.rotation(i, k) = r.read<double>();
  for (int k = 0; k < 3; ++k) c.translation(k) = r.read<double>();
  c.depth_noise_sigma = r.read<double>();
  c.width = r.read<std::uint16_t>();
  c.height = r.read<std::uint16_t>();
  expect_exact(r, "hello");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    fail(ProtocolErrc::malformed_payload, std::string("hello: ") + e.what());
  }
  return h;
}

SemanticCloud decode_cloud(std::span<const std::uint8_t> payload, std::uint16_t sensor_id, std::uint64_t ts) {
  bytes::Reader r(payload);
  SemanticCloud c;
  c.sensor_id = sensor_id;
  c.timestamp_us = ts;
  const std::uint32_t n = r.read<std::uint32_t>();
  if (!r.ok()) fail(ProtocolErrc::length_mismatch, "cloud: missing point count");
  const std::size_t per_point = 12 + 2 * kNumClasses;
  if (r.remaining() != static_cast<std::size_t>(n) * per_point)
    fail(ProtocolErrc::length_mismatch, "cloud: point count does not match payload length");
  c.points.reserve(n);
  std::array<double, kNumClasses> p{};
  for (std::uint32_t i = 0; i < n; ++i) {
    Vec3 pos;
    for (int k = 0; k < 3; ++k) pos(k) = r.read<float>();
    if (!pos.allFinite()) fail(ProtocolErrc::malformed_payload, "cloud: non-finite point");
    std::uint32_t sum = 0;
    for (auto& x : p) {
      const auto q = r.read<std::uint16_t>();
      x = q;
      sum += q;
    }
    if (sum == 0) fail(ProtocolErrc::malformed_payload, "cloud: all-zero probability vector");
    for (auto& x : p) x /= sum;
    c.points.push_back({pos, ClassDistribution::from_probabilities(p)});
  }
  return c;
}

bool valid_confidence(float c) { return std::isfinite(c) && c >= 0.0f && c <= 1.0f; }

template <typename Person, typename ReadJoint>
std::vector<Person> decode_persons(bytes::Reader& r, std::size_t joint_bytes, const char* what, ReadJoint&& read_joint) {
  const std::uint8_t count = r.read<std::uint8_t>();
  if (!r.ok()) fail(ProtocolErrc::length_mismatch, std::string(what) + ": missing person count");
  std::vector<Person> persons;
  for (std::uint8_t i = 0; i < count; ++i) {
    Person person;
    person.person_id = r.read<std::uint32_t>();
    const std::uint32_t mask = r.read<std::uint32_t>();
    if (!r.ok()) fail(ProtocolErrc::length_mismatch, std::string(what) + ": truncated person header");
    if (mask & ~kAllJointsMask) fail(ProtocolErrc::malformed_payload, std::string(what) + ": joint mask has bits above 16");
    if (r.remaining() < static_cast<std::size_t>(std::popcount(mask)) * joint_bytes)
      fail(ProtocolErrc::length_mismatch, std::string(what) + ": joint mask exceeds payload");
    for (std::size_t j = 0; j < kNumJoints; ++j)
      if (mask & (1u << j)) person.joints[j] = read_joint(r);
    persons.push_back(std::move(person));
  }
  return persons;
}

PoseSet2p5D decode_pose(std::span<const std::uint8_t> payload, std::uint16_t sensor_id, std::uint64_t ts) {
  bytes::Reader r(payload);
  PoseSet2p5D p;
  p.sensor_id = sensor_id;
  p.timestamp_us = ts;
  p.persons = decode_persons<PersonKeypoints>(r, kPoseJointBytes, "pose", [](bytes::Reader& rd) {
    Keypoint2p5D k;
    const float u = rd.read<float>(), v = rd.read<float>(), conf = rd.read<float>();
    const float d = rd.read<float>(), s = rd.read<float>();
    if (!std::isfinite(u) || !std::isfinite(v) || !valid_confidence(conf))
      fail(ProtocolErrc::malformed_payload, "pose: invalid keypoint");
    if (std::isnan(d) != std::isnan(s) || (!std::isnan(d) && !(d > 0.0f && s > 0.0f && std::isfinite(d) && std::isfinite(s))))
      fail(ProtocolErrc::malformed_payload, "pose: invalid keypoint depth");
    k.u = u;
    k.v = v;
    k.confidence = conf;
    if (!std::isnan(d)) {
      k.depth = d;
      k.depth_sigma = s;
    }
    return k;
  });
  expect_exact(r, "pose");
  return p;
}

FeedbackMsg decode_feedback(std::span<const std::uint8_t> payload, std::uint16_t sensor_id, std::uint64_t ts) {
  bytes::Reader r(payload);
  FeedbackMsg f;
  f.sensor_id = sensor_id;
  f.timestamp_us = ts;
  f.persons = decode_persons<FeedbackPose>(r, kFeedbackJointBytes, "feedback", [](bytes::Reader& rd) {
    const float u = rd.read<float>(), v = rd.read<float>(), conf = rd.read<float>();
    const std::uint8_t occ = rd.read<std::uint8_t>();
    if (!std::isfinite(u) || !std::isfinite(v) || !valid_confidence(conf) || occ > 1)
      fail(ProtocolErrc::malformed_payload, "feedback: invalid joint");
    return FeedbackJoint{u, v, conf, occ == 1};
  });
  for (auto& p : f.persons) {
    p.sensor_id = sensor_id;
    p.timestamp_us = ts;
  }
  expect_exact(r, "feedback");
  return f;
}

SnapshotMsg decode_snapshot(std::span<const std::uint8_t> payload, std::uint64_t ts) {
  bytes::Reader r(payload);
  SnapshotMsg s;
  s.timestamp_us = ts;
  const std::uint32_t n = r.read<std::uint32_t>();
  if (!r.ok() || r.remaining() != static_cast<std::size_t>(n) * kSnapshotCellBytes)
    fail(ProtocolErrc::length_mismatch, "snapshot: cell count does not match payload length");
  s.cells.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    SnapshotEntry e;
    e.index.ix = r.read<std::int32_t>();
    e.index.iy = r.read<std::int32_t>();
    e.index.iz = r.read<std::int32_t>();
    e.occupancy_log_odds = r.read<float>();
    e.class_idx = r.read<std::uint8_t>();
    e.probability = r.read<float>();
    const std::uint8_t src = r.read<std::uint8_t>();
    if (src > 1 || e.class_idx >= static_cast<int>(kNumClasses) || !std::isfinite(e.occupancy_log_odds) ||
        !std::isfinite(e.probability))
      fail(ProtocolErrc::malformed_payload, "snapshot: invalid cell");
    e.source = static_cast<CellSource>(src);
    s.cells.push_back(e);
  }
  return s;
}

Message decode_payload(const FrameHeader& h, std::span<const std::uint8_t> payload) {
  switch (h.type) {
    case MsgType::hello: return decode_hello(payload, h.sensor_id);
    case MsgType::cloud: return decode_cloud(payload, h.sensor_id, h.timestamp_us);
    case MsgType::pose: return decode_pose(payload, h.sensor_id, h.timestamp_us);
    case MsgType::feedback: return decode_feedback(payload, h.sensor_id, h.timestamp_us);
    case MsgType::snapshot: return decode_snapshot(payload, h.timestamp_us);
  }
  fail(ProtocolErrc::unknown_type, "unknown message type");
}

}  // namespace

const char* to_string(ProtocolErrc code) {
  switch (code) {
    case ProtocolErrc::bad_magic: return "bad_magic";
    case ProtocolErrc::unknown_type: return "unknown_type";
    case ProtocolErrc::truncated: return "truncated";
    case ProtocolErrc::length_mismatch: return "length_mismatch";
    case ProtocolErrc::payload_too_large: return "payload_too_large";
    case ProtocolErrc::malformed_payload: return "malformed_payload";
    case ProtocolErrc::version_mismatch: return "version_mismatch";
    case ProtocolErrc::fingerprint_mismatch: return "fingerprint_mismatch";
    case ProtocolErrc::not_registered: return "not_registered";
  }
  return "unknown";
}

ProtocolError::ProtocolError(ProtocolErrc code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

MsgType message_type(const Message& m) {
  return std::visit(
      [](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, HelloMsg>) return MsgType::hello;
        else if constexpr (std::is_same_v<T, SemanticCloud>) return MsgType::cloud;
        else if constexpr (std::is_same_v<T, PoseSet2p5D>) return MsgType::pose;
        else if constexpr (std::is_same_v<T, FeedbackMsg>) return MsgType::feedback;
        else return MsgType::snapshot;
      },
      m);
}

std::uint16_t message_sensor(const Message& m) {
  return std::visit(
      [](const auto& x) -> std::uint16_t {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, HelloMsg>) return x.calib.sensor_id;
        else if constexpr (std::is_same_v<T, SnapshotMsg>) return 0;
        else return x.sensor_id;
      },
      m);
}

std::uint64_t message_timestamp(const Message& m) {
  return std::visit(
      [](const auto& x) -> std::uint64_t {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, HelloMsg>) return 0;
        else return x.timestamp_us;
      },
      m);
}

std::vector<std::uint16_t> quantize_probabilities(const ClassDistribution& d) {
  const std::size_t n = d.size();
  std::vector<std::uint16_t> q(n);
  std::vector<std::pair<double, std::size_t>> rem(n);
  std::uint32_t sum = 0;
  const auto p = d.floored();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = p[i] * 65535.0;
    const double f = std::floor(x);
    q[i] = static_cast<std::uint16_t>(f);
    sum += q[i];
    rem[i] = {x - f, i};
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; sum < 65535 && k < n; ++k, ++sum) ++q[rem[k].second];
  return q;
}

std::vector<std::uint8_t> encode_frame(MsgType type, std::uint16_t sensor_id, std::uint64_t timestamp_us,
                                       std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxPayload) throw std::invalid_argument("encode: payload exceeds 64 MiB");
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderSize + payload.size());
  out.insert(out.end(), kFrameMagic, kFrameMagic + 4);
  put(out, static_cast<std::uint8_t>(type));
  put(out, sensor_id);
  put(out, timestamp_us);
  put(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::vector<std::uint8_t> encode(const Message& m) {
  std::vector<std::uint8_t> payload;
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, HelloMsg>) encode_hello(payload, x);
        else if constexpr (std::is_same_v<T, SemanticCloud>) encode_cloud(payload, x);
        else if constexpr (std::is_same_v<T, PoseSet2p5D>) encode_pose(payload, x);
        else if constexpr (std::is_same_v<T, FeedbackMsg>) encode_feedback(payload, x);
        else encode_snapshot(payload, x);
      },
      m);
  return encode_frame(message_type(m), message_sensor(m), message_timestamp(m), payload);
}

FrameHeader decode_header(std::span<const std::uint8_t> b) {
  if (b.size() < kFrameHeaderSize) fail(ProtocolErrc::truncated, "frame shorter than its header");
  if (std::memcmp(b.data(), kFrameMagic, 4) != 0) fail(ProtocolErrc::bad_magic, "frame does not start with SES1");
  const std::uint8_t type = b[4];
  if (type < 1 || type > 5) fail(ProtocolErrc::unknown_type, "message type " + std::to_string(type));
  FrameHeader h;
  h.type = static_cast<MsgType>(type);
  h.sensor_id = bytes::get<std::uint16_t>(b, 5);
  h.timestamp_us = bytes::get<std::uint64_t>(b, 7);
  h.payload_len = bytes::get<std::uint32_t>(b, 15);
  if (h.payload_len > kMaxPayload) fail(ProtocolErrc::payload_too_large, std::to_string(h.payload_len) + " bytes");
  return h;
}

Message decode(std::span<const std::uint8_t> b) {
  const auto h = decode_header(b);
  const std::size_t total = kFrameHeaderSize + h.payload_len;
  if (b.size() < total) fail(ProtocolErrc::truncated, "payload shorter than payload_len");
  if (b.size() > total) fail(ProtocolErrc::length_mismatch, "bytes after the declared payload");
  return decode_payload(h, b.subspan(kFrameHeaderSize));
}

void StreamDecoder::feed(std::span<const std::uint8_t> chunk) {
  if (pos_ > 0 && pos_ * 2 >= buf_.size()) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  buf_.insert(buf_.end(), chunk.begin(), chunk.end());
}

std::optional<Message> StreamDecoder::next() {
  if (failed_) throw *failed_;
  const std::span<const std::uint8_t> avail(buf_.data() + pos_, buf_.size() - pos_);
  if (avail.size() < kFrameHeaderSize) {
    // A wrong magic is detectable before the full header arrives.
    const std::size_t n = std::min<std::size_t>(avail.size(), 4);
    if (std::memcmp(avail.data(), kFrameMagic, n) != 0) {
      failed_ = ProtocolError(ProtocolErrc::bad_magic, "stream does not continue with SES1");
      throw *failed_;
    }
    return std::nullopt;
  }
  try {
    const auto h = decode_header(avail);
    const std::size_t total = kFrameHeaderSize + h.payload_len;
    if (avail.size() < total) return std::nullopt;
    auto msg = decode_payload(h, avail.subspan(kFrameHeaderSize, h.payload_len));
    pos_ += total;
    return msg;
  } catch (const ProtocolError& e) {
    failed_ = e;
    throw;
  }
}

}  // namespace semgrid
