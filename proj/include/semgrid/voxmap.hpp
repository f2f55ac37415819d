#pragma once

#include "semgrid/cloud.hpp"
#include "semgrid/geometry.hpp"
#include "semgrid/semantics.hpp"

#include <absl/container/flat_hash_map.h>

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace semgrid {

struct OccupancyParams {
  double l_occ = 0.85;
  double l_free = -0.4;
  double l_min = -2.0;
  double l_max = 3.5;
  double l_prior = 1.0;
};

enum class CellSource : std::uint8_t { prior = 0, observed = 1 };

struct VoxelCell {
  double occupancy_log_odds = 0.0;
  ClassDistribution dist;
  std::uint64_t last_update_us = 0;
  CellSource source = CellSource::observed;

  bool occupied() const { return occupancy_log_odds > 0.0; }
};

struct IntegrationStats {
  std::size_t occupied_updates = 0;  // cells that received an occupied update
  std::size_t freed = 0;             // cells that received a free-space update
  std::size_t semantic_fused = 0;    // point distributions fused into cells
  std::size_t resets = 0;            // occupied -> free transitions
  std::size_t skipped_person = 0;
};

struct SnapshotEntry {
  VoxelIndex index;
  double occupancy_log_odds = 0.0;
  int class_idx = 0;
  double probability = 0.0;
  CellSource source = CellSource::observed;
};

/// Sparse hashed voxel grid with log-odds occupancy and a fused class distribution per cell.
///
/// Writers (load_prior, integrate_cloud, set_cell) need exclusive access; const queries may
/// run concurrently with each other.
class VoxelMap {
 public:
  explicit VoxelMap(double resolution = 0.10, OccupancyParams params = {}, std::size_t num_classes = kNumClasses);

  double resolution() const { return resolution_; }
  const OccupancyParams& params() const { return params_; }
  std::size_t size() const { return cells_.size(); }
  bool empty() const { return cells_.empty(); }
  const VoxelCell* find(const VoxelIndex& idx) const;
  const absl::flat_hash_map<VoxelIndex, VoxelCell>& cells() const { return cells_; }

  /// Marks the voxel of every prior point occupied. Only valid on an empty map.
  std::size_t load_prior(std::span<const Vec3> prior_points);

  /// Ray-traced occupancy update plus Bayesian semantic fusion of a sensor-frame cloud.
  /// Person-labelled points are ignored entirely. A cell left free by an update holds a uniform
  /// distribution.
  IntegrationStats integrate_cloud(const SemanticCloud& cloud, const CameraCalib& calib);

  /// True when at least k occupied cells lie strictly between the voxels of the endpoints.
  bool is_occluded(const Vec3& from_world, const Vec3& to_world, int k = 2) const;

  /// Occupied cells in lexicographic index order.
  std::vector<SnapshotEntry> snapshot() const;

  void set_cell(const VoxelIndex& idx, const VoxelCell& cell);
  void reserve(std::size_t n) { cells_.reserve(n); }

 private:
  double clamp(double l) const;

  double resolution_;
  OccupancyParams params_;
  std::size_t num_classes_;
  absl::flat_hash_map<VoxelIndex, VoxelCell> cells_;
};

/// Binary PLY of voxel centers: x y z (float32), class (uint8), occupancy probability (float32).
void write_map_ply(std::ostream& out, std::span<const SnapshotEntry> entries, double resolution);

}  // namespace semgrid
