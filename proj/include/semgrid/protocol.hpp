#pragma once

#include "semgrid/cloud.hpp"
#include "semgrid/geometry.hpp"
#include "semgrid/pose.hpp"
#include "semgrid/voxmap.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace semgrid {

inline constexpr std::uint16_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 19;
inline constexpr std::uint32_t kMaxPayload = 64u * 1024u * 1024u;
inline constexpr char kFrameMagic[4] = {'S', 'E', 'S', '1'};

enum class MsgType : std::uint8_t { hello = 1, cloud = 2, pose = 3, feedback = 4, snapshot = 5 };

enum class ProtocolErrc {
  bad_magic,
  unknown_type,
  truncated,
  length_mismatch,
  payload_too_large,
  malformed_payload,
  version_mismatch,
  fingerprint_mismatch,
  not_registered,  // data before a successful Hello
};
const char* to_string(ProtocolErrc code);

class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(ProtocolErrc code, const std::string& what);
  ProtocolErrc code() const { return code_; }

 private:
  ProtocolErrc code_;
};

struct HelloMsg {
  std::uint16_t protocol_version = kProtocolVersion;
  std::uint64_t class_set_fingerprint = 0;
  CameraCalib calib;  // sensor id travels in the frame header
};

struct FeedbackMsg {
  std::uint16_t sensor_id = 0;
  std::uint64_t timestamp_us = 0;
  std::vector<FeedbackPose> persons;  // person sensor_id/timestamp mirror the message
};

struct SnapshotMsg {
  std::uint64_t timestamp_us = 0;
  std::vector<SnapshotEntry> cells;
};

using Message = std::variant<HelloMsg, SemanticCloud, PoseSet2p5D, FeedbackMsg, SnapshotMsg>;

MsgType message_type(const Message& m);
std::uint16_t message_sensor(const Message& m);
std::uint64_t message_timestamp(const Message& m);

/// Serializes one frame. Throws std::invalid_argument when the message cannot be represented
/// (more than 255 persons, wrong class count, oversized payload).
std::vector<std::uint8_t> encode(const Message& m);

/// Header plus raw payload, without inspecting the payload.
std::vector<std::uint8_t> encode_frame(MsgType type, std::uint16_t sensor_id, std::uint64_t timestamp_us,
                                       std::span<const std::uint8_t> payload);

/// Decodes exactly one frame spanning the whole buffer.
Message decode(std::span<const std::uint8_t> bytes);

struct FrameHeader {
  MsgType type;
  std::uint16_t sensor_id;
  std::uint64_t timestamp_us;
  std::uint32_t payload_len;
};

/// Validates the 19-byte header at the start of `bytes` (which must hold at least that many).
FrameHeader decode_header(std::span<const std::uint8_t> bytes);

/// Incremental frame reassembly for one byte stream. After an error the decoder stays failed.
class StreamDecoder {
 public:
  void feed(std::span<const std::uint8_t> chunk);
  /// Next complete message, or empty when more bytes are needed. Throws ProtocolError.
  std::optional<Message> next();
  std::size_t buffered() const { return buf_.size() - pos_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::optional<ProtocolError> failed_;
};

/// Largest-remainder quantization of a distribution to u16 values summing to 65535.
std::vector<std::uint16_t> quantize_probabilities(const ClassDistribution& d);

}  // namespace semgrid
