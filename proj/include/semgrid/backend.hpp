#pragma once

#include "semgrid/pose.hpp"
#include "semgrid/protocol.hpp"
#include "semgrid/voxmap.hpp"

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace semgrid {

enum class Ablation { none, fb, fb_occ, fb_occ_depth };

std::optional<Ablation> parse_ablation(std::string_view text);
const char* to_string(Ablation a);

struct AblationFlags {
  bool feedback = false;   // backend sends feedback, sensors fuse it
  bool occlusion = false;  // occlusion flags and occluded-joint handling
  bool depth = false;      // depth-aware association and single-view fallback
};
AblationFlags flags_of(Ablation a);

struct BackendConfig {
  Ablation ablation = Ablation::fb_occ_depth;
  std::uint64_t class_fingerprint = 0;
  double sync_window_s = 0.025;
  double stale_timeout_s = 2.0;
  double snapshot_period_s = 1.0;
  double exclusion_px = 0.5;
  std::size_t pose_buffer = 16;
  std::size_t feedback_history = 64;
  double voxel_resolution = 0.10;
  OccupancyParams occupancy;
  PoseParams pose;
};

/// Index of the buffered pose set nearest to t_tick when within the window; ties prefer the
/// later message.
std::optional<std::size_t> sync_window_select(std::span<const PoseSet2p5D> buffer, std::uint64_t t_tick_us,
                                              std::uint64_t window_us);

/// Which sensor detection contributed to which fused person at a tick.
struct AssociationRecord {
  std::uint64_t skeleton_ts_us = 0;
  std::uint32_t person_id = 0;
  std::uint16_t sensor_id = 0;
  std::uint32_t local_person_id = 0;
  std::uint64_t pose_ts_us = 0;
};

struct TickResult {
  std::uint64_t tick_us = 0;
  std::size_t views = 0;
  std::vector<Skeleton3D> skeletons;
  std::vector<FeedbackMsg> feedback;
  std::optional<SnapshotMsg> snapshot;
  std::vector<AssociationRecord> associations;
};

struct BackendStats {
  std::size_t ticks = 0;
  std::size_t pose_messages = 0;
  std::size_t cloud_messages = 0;
  std::size_t feedback_messages = 0;
  std::size_t snapshots = 0;
  std::size_t excluded_joints = 0;
};

/// Fusion service state driven by an external clock: ingest messages as they arrive, call
/// tick() at the fusion rate.
class Backend {
 public:
  Backend(BackendConfig config, std::span<const Vec3> prior_points = {});
  /// Reads a map written elsewhere; incoming clouds are counted but not integrated.
  Backend(BackendConfig config, std::shared_ptr<const VoxelMap> shared_map);

  const BackendConfig& config() const { return config_; }

  /// Registers (or re-registers) a sensor. Throws ProtocolError on version or class-set mismatch.
  void on_hello(std::uint16_t sensor_id, const HelloMsg& hello, std::uint64_t now_us);
  /// Pose sets are buffered, clouds integrated immediately. Throws ProtocolError for sensors
  /// without a handshake.
  void on_message(std::uint16_t sensor_id, const Message& msg, std::uint64_t now_us);
  void disconnect(std::uint16_t sensor_id);

  TickResult tick(std::uint64_t t_tick_us);

  const VoxelMap& map() const { return *map_; }
  std::shared_ptr<const VoxelMap> shared_map() const { return map_; }
  const BackendStats& stats() const { return stats_; }
  std::vector<std::uint16_t> sensors() const;
  std::optional<double> delay_estimate_s(std::uint16_t sensor_id) const;
  const std::vector<double>& delay_history(std::uint16_t sensor_id) const;

 private:
  struct SentFeedback {
    std::uint64_t send_us;
    std::uint64_t data_ts_us;
  };
  struct SensorState {
    CameraCalib calib;
    std::deque<PoseSet2p5D> poses;
    std::uint64_t last_recv_us = 0;
    std::deque<FeedbackMsg> recent_feedback;
    std::deque<SentFeedback> sent;
    std::optional<double> latency_s;
    std::optional<double> delay_s;
    std::optional<std::uint64_t> delay_fb_ts;
    std::vector<double> delay_history;
  };

  PoseSet2p5D exclude_occluded(const PoseSet2p5D& view, const SensorState& st);
  void update_delay_estimate(SensorState& st, const PoseSet2p5D& pose, std::uint64_t now_us);

  BackendConfig config_;
  std::shared_ptr<VoxelMap> own_map_;  // null when reading a shared map
  std::shared_ptr<const VoxelMap> map_;
  SkeletonTracker tracker_;
  std::map<std::uint16_t, SensorState> sensors_;
  std::optional<std::uint64_t> last_snapshot_us_;
  BackendStats stats_;
};

}  // namespace semgrid
