#pragma once

#include "semgrid/cloud.hpp"
#include "semgrid/pose.hpp"
#include "semgrid/protocol.hpp"
#include "semgrid/synthworld.hpp"

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace semgrid {

struct SensorConfig {
  std::uint16_t sensor_id = 1;
  CameraCalib calib;
  double pose_rate_hz = 30.0;
  double cloud_rate_hz = 1.0;
  double detector_period_s = 1.0;
  bool has_depth = true;
  bool use_feedback = false;
  bool use_occlusion = false;
  double kappa_fb = 0.35;
  double feedback_match_px = 10.0;  // local joint fused with feedback within this radius
  double person_match_px = 40.0;    // median joint distance for matching a feedback person
  double feedback_timeout_s = 0.5;
  int depth_stride = 2;
  bool thermal = true;
  std::size_t cloud_queue_capacity = 4;
  CloudPipelineParams cloud;

  /// Throws std::invalid_argument on non-positive rates or cloud_rate > pose_rate.
  void validate() const;
};

// INI keys: sensor_id, calibration (file), pose_rate_hz, cloud_rate_hz, detector_period_s,
// has_depth, use_feedback, use_occlusion, kappa_fb, depth_stride, thermal, queue_capacity,
// scene (file). Relative paths resolve against the config file's directory.
struct SensorConfigFile {
  SensorConfig config;
  std::string scene_path;
  double duration_s = 0.0;  // 0 runs until interrupted
};
SensorConfigFile load_sensor_config(const std::string& path);

/// Median depth of the valid pixels in the 5x5 patch around (u, v) and the scaled MAD of
/// that patch, floored at sigma_floor. Absent when the whole patch is invalid.
std::optional<std::pair<double, double>> estimate_keypoint_depth(const DepthImage& depth, double u, double v,
                                                                 double sigma_floor);

/// One camera frame as produced by the keypoint CNN stand-in.
struct FrameObservation {
  std::uint64_t timestamp_us = 0;
  std::vector<PersonKeypoints> persons;
  DepthImage depth;  // may hold only the patches around keypoints; empty without depth
};

inline constexpr std::uint32_t kFeedbackOnlyPersonBit = 0x80000000u;

/// Local detections fused with the latest feedback, depth attached when available.
PoseSet2p5D process_frame(const FrameObservation& obs, const std::vector<FeedbackPose>* feedback,
                          const SensorConfig& config);

struct CloudObservation {
  DepthImage depth;
  SegmentationMask mask;
  DetectionSet detections;
};

/// Empty cloud (no points) for an empty depth image; throws without depth support.
SemanticCloud build_semantic_cloud(const CloudObservation& obs, const SensorConfig& config);

/// Synthetic observation source for one sensor: the detector refreshes the tracked person
/// set every detector period; keypoints update every frame for tracked persons only.
class SyntheticCamera {
 public:
  SyntheticCamera(const Scene& scene, const SensorConfig& config);

  FrameObservation observe_frame(std::uint64_t frame_index, std::uint64_t timestamp_us);
  CloudObservation observe_cloud(std::uint64_t frame_index, std::uint64_t timestamp_us) const;

  const std::vector<std::uint32_t>& tracked() const { return tracked_; }

 private:
  const Scene* scene_;
  SensorConfig config_;
  std::optional<std::uint64_t> last_detector_us_;
  std::vector<std::uint32_t> tracked_;  // scene person indices
};

/// Send queue: non-cloud messages are never dropped and always leave first; clouds are
/// bounded and the oldest is dropped on overflow.
class OutboundQueue {
 public:
  explicit OutboundQueue(std::size_t cloud_capacity = 4) : cloud_capacity_(cloud_capacity) {}

  void push(Message msg);
  std::optional<Message> pop();
  bool empty() const { return priority_.empty() && clouds_.empty(); }
  std::size_t size() const { return priority_.size() + clouds_.size(); }
  std::size_t dropped_clouds() const { return dropped_; }

 private:
  std::size_t cloud_capacity_;
  std::deque<Message> priority_;
  std::deque<Message> clouds_;
  std::size_t dropped_ = 0;
};

struct SensorStats {
  std::size_t frames = 0;
  std::size_t pose_messages = 0;
  std::size_t cloud_messages = 0;
  std::size_t feedback_received = 0;
  std::size_t feedback_used = 0;
};

/// One smart edge sensor driven by an external clock.
class SensorNode {
 public:
  SensorNode(SensorConfig config, const Scene& scene);

  const SensorConfig& config() const { return config_; }
  HelloMsg hello(std::uint64_t class_fingerprint) const;

  void on_feedback(const FeedbackMsg& msg);
  /// Frame index k runs at round(k / pose_rate) seconds.
  std::uint64_t frame_time_us(std::uint64_t frame_index) const;
  bool cloud_due(std::uint64_t frame_index) const;
  /// Processes one frame and queues its messages.
  void step(std::uint64_t frame_index);
  /// Same as step() with externally produced observations (replay, caching).
  void step_with(std::uint64_t frame_index, const FrameObservation& obs, const std::optional<SemanticCloud>& cloud);

  OutboundQueue& outbox() { return outbox_; }
  const PoseSet2p5D& last_output() const { return last_output_; }
  std::optional<double> delay_estimate_s() const { return delay_s_; }
  const std::vector<double>& delay_history() const { return delay_history_; }
  const SensorStats& stats() const { return stats_; }
  SyntheticCamera& camera() { return camera_; }

 private:
  SensorConfig config_;
  SyntheticCamera camera_;
  OutboundQueue outbox_;
  std::optional<FeedbackMsg> feedback_;
  std::uint64_t last_ts_ = 0;
  PoseSet2p5D last_output_;
  std::optional<double> delay_s_;
  std::optional<std::uint64_t> measured_fb_ts_;
  std::vector<double> delay_history_;
  SensorStats stats_;
};

}  // namespace semgrid
