#pragma once

#include "semgrid/backend.hpp"
#include "semgrid/semantics.hpp"
#include "semgrid/sensor_node.hpp"
#include "semgrid/synthworld.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace semgrid {

struct SimulationOptions {
  double duration_s = 10.0;
  Ablation ablation = Ablation::fb_occ_depth;
  double link_latency_s = 0.005;
  double tick_offset_s = 0.015;  // backend ticks run this long after each frame instant
  double fusion_rate_hz = 30.0;
  SensorConfig sensor;           // template; id, calibration and feedback flags are set per run
  BackendConfig backend;         // ablation and class fingerprint are set per run
  double prior_spacing_m = 0.025;
  bool record_clouds = false;
  /// Called after every sensor frame with the run index (0 for run_simulation).
  std::function<void(std::size_t run, const SensorNode& node, std::uint64_t frame)> on_frame;
};

/// A message as it arrived at its receiver.
struct TimedMessage {
  std::uint64_t recv_us = 0;
  std::uint16_t sensor_id = 0;
  Message msg;
};

struct SensorRunStats {
  std::uint16_t sensor_id = 0;
  SensorStats node;
  std::size_t dropped_clouds = 0;
  std::optional<double> sensor_delay_s;
  std::optional<double> backend_delay_s;
  std::vector<double> sensor_delay_history;
  std::vector<double> backend_delay_history;
};

struct SimulationResult {
  std::vector<TimedMessage> uplink;  // hello, poses and (when recorded) clouds, in arrival order
  std::vector<Skeleton3D> skeletons;
  std::vector<AssociationRecord> associations;
  std::vector<SnapshotEntry> final_map;
  std::shared_ptr<const VoxelMap> map;  // shared between lockstep runs
  std::optional<std::vector<SnapshotEntry>> premove_map;  // last snapshot before the first box moves
  std::uint64_t premove_us = 0;
  std::vector<Vec3> prior;
  std::vector<SensorRunStats> sensors;
  BackendStats backend;
  std::uint64_t bytes_up = 0, bytes_down = 0;
  std::uint64_t end_us = 0;
};

/// Observations and clouds depend only on scene, cameras and seed, so runs of different
/// ablations over the same inputs can share them.
class ObservationCache {
 public:
  struct Frame {
    std::uint64_t timestamp_us = 0;
    std::vector<PersonKeypoints> persons;
    std::vector<std::pair<std::uint32_t, float>> depth;  // rendered pixels, row-major index
  };

  const Frame& frame(SyntheticCamera& camera, const SensorConfig& config, std::uint64_t k, std::uint64_t ts);
  const SemanticCloud& cloud(const SyntheticCamera& camera, const SensorConfig& config, std::uint64_t k,
                             std::uint64_t ts);

 private:
  std::map<std::uint16_t, std::vector<Frame>> frames_;
  std::map<std::pair<std::uint16_t, std::uint64_t>, SemanticCloud> clouds_;
};

/// Backend plus one sensor node per camera over a simulated 5 ms link, all driven by one
/// discrete-event clock. Every message is encoded and reassembled from the byte stream.
SimulationResult run_simulation(const Scene& scene, const std::vector<CameraCalib>& cameras, const ClassSet& classes,
                                const SimulationOptions& options, ObservationCache* cache = nullptr);

/// Runs of several ablations over the same inputs, advanced in lockstep. The voxel map does
/// not depend on the ablation, so the first run integrates clouds and the others read its
/// map; their sensors send no clouds.
std::vector<SimulationResult> run_ablations(const Scene& scene, const std::vector<CameraCalib>& cameras,
                                            const ClassSet& classes, const SimulationOptions& options,
                                            const std::vector<Ablation>& ablations, ObservationCache* cache = nullptr);

/// Feeds recorded uplink traffic to a fresh backend on the same tick schedule.
SimulationResult replay_uplink(const std::vector<TimedMessage>& uplink, const std::vector<Vec3>& prior,
                               const ClassSet& classes, const SimulationOptions& options, double first_move_s);

/// Recording: per message a u64 arrival time followed by one protocol frame.
void write_recording(std::ostream& out, const std::vector<TimedMessage>& messages);
std::vector<TimedMessage> read_recording(std::istream& in, const std::string& source_name);

}  // namespace semgrid
