#pragma once

#include "semgrid/backend.hpp"
#include "semgrid/pose.hpp"
#include "semgrid/synthworld.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace semgrid {

struct ReprojectionStats {
  std::array<double, kNumJointClasses> sum{};
  std::array<std::size_t, kNumJointClasses> count{};

  std::optional<double> mean(JointClass c) const;
  /// Mean of the non-empty class means.
  std::optional<double> average() const;
  std::size_t samples() const;
};

/// Pixel distance between every joint a sensor sent and the reprojection of the fused
/// skeleton it was associated with.
ReprojectionStats reprojection_errors(std::span<const PoseSet2p5D> poses, std::span<const Skeleton3D> skeletons,
                                      std::span<const AssociationRecord> associations,
                                      std::span<const CameraCalib> calibs);

struct MapEvaluation {
  std::size_t gt_cells = 0, map_cells = 0, intersection = 0;
  double iou = 0.0;
  std::size_t labelled = 0, correct = 0;  // gt cells the map holds with an observed class
  double semantic_accuracy = 0.0;
};

/// Occupancy IoU and semantic accuracy against the ground-truth voxelization at time t.
/// Cells with iz <= 0 (the floor band) are left out on both sides.
MapEvaluation evaluate_map(std::span<const SnapshotEntry> map, const Scene& scene, double t, double resolution);

struct FreedEvaluation {
  std::size_t old_cells = 0;  // cells of moved boxes before the move that are empty afterwards
  std::size_t freed = 0;      // of those, not occupied in the map
  double fraction = 0.0;
};

FreedEvaluation evaluate_freed(std::span<const SnapshotEntry> map, const Scene& scene, double resolution);

/// Cells of moved boxes before the first move that no surface occupies afterwards.
std::vector<VoxelIndex> vacated_cells(const Scene& scene, double resolution);

// skeletons.csv: timestamp_us,person_id,joint,x,y,z,confidence,n_views (one row per joint)
void write_skeletons_csv(std::ostream& out, std::span<const Skeleton3D> skeletons);
/// Rows only, for appending to an open log.
void write_skeletons_csv_rows(std::ostream& out, std::span<const Skeleton3D> skeletons);
std::vector<Skeleton3D> read_skeletons_csv(std::istream& in, const std::string& source_name);

// associations.csv: skeleton_ts_us,person_id,sensor_id,local_person_id,pose_ts_us
void write_associations_csv(std::ostream& out, std::span<const AssociationRecord> records);
void write_associations_csv_rows(std::ostream& out, std::span<const AssociationRecord> records);
std::vector<AssociationRecord> read_associations_csv(std::istream& in, const std::string& source_name);

}  // namespace semgrid
