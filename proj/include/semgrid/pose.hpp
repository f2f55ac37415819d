#pragma once

#include "semgrid/geometry.hpp"
#include "semgrid/voxmap.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace semgrid {

/// COCO keypoint order.
enum Joint : int {
  kNose = 0, kLeftEye, kRightEye, kLeftEar, kRightEar,
  kLeftShoulder, kRightShoulder, kLeftElbow, kRightElbow, kLeftWrist, kRightWrist,
  kLeftHip, kRightHip, kLeftKnee, kRightKnee, kLeftAnkle, kRightAnkle,
};
inline constexpr std::size_t kNumJoints = 17;

enum class JointClass : int { head = 0, hips, knees, ankles, shoulders, elbows, wrists };
inline constexpr std::size_t kNumJointClasses = 7;
JointClass joint_class(std::size_t joint);
const char* joint_class_name(JointClass c);

struct Bone {
  int a, b;
};
/// Limb and torso bones used for bone-length gating (face bones are too short to gate).
std::span<const Bone> gated_bones();
inline constexpr std::size_t kNumGatedBones = 12;

template <typename T>
using JointArray = std::array<std::optional<T>, kNumJoints>;

struct Keypoint2p5D {
  double u = 0, v = 0;
  double confidence = 0;
  std::optional<double> depth;        // camera-frame z in meters
  std::optional<double> depth_sigma;
  bool occluded_by_feedback = false;  // local only, not on the wire

  friend bool operator==(const Keypoint2p5D&, const Keypoint2p5D&) = default;
};

struct PersonKeypoints {
  std::uint32_t person_id = 0;
  JointArray<Keypoint2p5D> joints;

  std::size_t count() const;
  friend bool operator==(const PersonKeypoints&, const PersonKeypoints&) = default;
};

struct PoseSet2p5D {
  std::uint16_t sensor_id = 0;
  std::uint64_t timestamp_us = 0;
  std::vector<PersonKeypoints> persons;

  friend bool operator==(const PoseSet2p5D&, const PoseSet2p5D&) = default;
};

struct Joint3D {
  Vec3 position = Vec3::Zero();
  double confidence = 0;
  int n_views = 0;  // 1 marks the single-view depth fallback
};

struct Skeleton3D {
  std::uint32_t person_id = 0;
  std::uint64_t timestamp_us = 0;
  JointArray<Joint3D> joints;
  JointArray<Vec3> velocity;
  std::array<std::vector<double>, kNumGatedBones> bone_history;  // recent accepted lengths

  std::size_t joint_count() const;
  std::optional<Vec3> centroid() const;
};

struct FeedbackJoint {
  double u = 0, v = 0;
  double confidence = 0;
  bool occluded = false;

  friend bool operator==(const FeedbackJoint&, const FeedbackJoint&) = default;
};

struct FeedbackPose {
  std::uint16_t sensor_id = 0;
  std::uint32_t person_id = 0;
  std::uint64_t timestamp_us = 0;
  JointArray<FeedbackJoint> joints;

  friend bool operator==(const FeedbackPose&, const FeedbackPose&) = default;
};

struct PoseParams {
  double tau_epi_px = 20.0;
  double tau_tri_px = 15.0;
  double min_ray_angle_deg = 2.0;
  double min_joint_confidence = 0.2;
  double depth_sigma_mult = 2.0;
  double alpha_pos = 0.7;
  double bone_deviation = 0.5;
  std::size_t bone_history = 30;
  std::size_t bone_min_history = 3;
  double demoted_confidence = 0.1;
  double tau_conf_s = 0.5;
  double track_gate_m = 0.8;
  double track_timeout_s = 0.5;
  double min_feedback_confidence = 0.2;
};

struct PersonRef {
  std::uint16_t sensor_id = 0;
  std::uint32_t person_id = 0;

  friend auto operator<=>(const PersonRef&, const PersonRef&) = default;
};
using PersonGroup = std::vector<PersonRef>;

struct PairCost {
  enum class Status { ok, no_overlap, forbidden } status = Status::no_overlap;
  double cost = 0;
};

/// Symmetric epipolar cost between two persons seen by different cameras. With depth, a
/// keypoint is compared against the epipolar segment of its partner's depth interval
/// d +- depth_sigma_mult * sigma; joints outside the gate are discarded, and the pair is
/// forbidden when they outnumber the consistent ones.
PairCost pair_cost(const PersonKeypoints& a, const CameraCalib& calib_a, const PersonKeypoints& b,
                   const CameraCalib& calib_b, const PoseParams& params, bool use_depth);

/// Greedy iterative cross-view matching in sensor-id order. Every input person appears in
/// exactly one group (unmatched persons form singleton groups). Groups are ordered by
/// their first member.
std::vector<PersonGroup> associate(std::span<const PoseSet2p5D> views, std::span<const CameraCalib> calibs,
                                   const PoseParams& params, bool use_depth);

struct JointObservation {
  const CameraCalib* calib = nullptr;
  Vec2 uv = Vec2::Zero();
  double confidence = 1.0;
};

struct Triangulated {
  Vec3 position;
  double residual_px = 0;
};

/// Confidence-weighted DLT. Empty for fewer than two cameras, near-parallel rays, a point
/// behind any camera, or a mean reprojection residual above tau_tri.
std::optional<Triangulated> triangulate_joint(std::span<const JointObservation> obs, const PoseParams& params);

/// Raw skeleton of one association group. Joints failing triangulation with three or more
/// views are retried without their worst view. With `depth_fallback`, a group of a single
/// view is back-projected at its local depth (n_views = 1).
Skeleton3D triangulate_group(const PersonGroup& group, std::span<const PoseSet2p5D> views,
                             std::span<const CameraCalib> calibs, const PoseParams& params, bool depth_fallback);

/// Temporal smoothing against the velocity-predicted previous skeleton, bone-length gating,
/// and finite-difference velocities. A simplified stand-in for a full skeleton model.
Skeleton3D refine_skeleton(const Skeleton3D& raw, const Skeleton3D* prev, const PoseParams& params);

/// Constant-velocity extrapolation by dt seconds with exponential confidence decay.
Skeleton3D predict(const Skeleton3D& skel, double dt, const PoseParams& params);

/// Reprojects skeletons (predicted forward by delay_s) into one camera. With a map, each
/// in-image joint is ray-traced for occlusion (k = 2); without one, no joint is occluded.
std::vector<FeedbackPose> make_feedback(std::span<const Skeleton3D> skeletons, const CameraCalib& calib,
                                        const VoxelMap* map, double delay_s, const PoseParams& params);

/// Exponential moving average of the loop delay; the first measurement initializes it.
double update_delay(std::optional<double> current, double measured, double alpha = 0.1);

/// Frame-to-frame identity by nearest centroid within the gate.
class SkeletonTracker {
 public:
  explicit SkeletonTracker(PoseParams params = {}) : params_(params) {}

  /// Refined skeletons for this timestamp, ordered by person id. Empty raw skeletons are
  /// ignored; raw_index receives the input position of each result.
  std::vector<Skeleton3D> update(std::vector<Skeleton3D> raw, std::uint64_t timestamp_us,
                                 std::vector<std::size_t>* raw_index = nullptr);
  const std::vector<Skeleton3D>& tracks() const { return tracks_; }

 private:
  PoseParams params_;
  std::vector<Skeleton3D> tracks_;
  std::uint32_t next_id_ = 1;
};

/// One line per joint: `timestamp person_id joint_idx x y z conf n_views`.
void write_skeleton_log(std::ostream& out, const Skeleton3D& skel);

struct SkeletonLogRecord {
  std::uint64_t timestamp_us = 0;
  std::uint32_t person_id = 0;
  int joint = 0;
  Vec3 position;
  double confidence = 0;
  int n_views = 0;
};
std::vector<SkeletonLogRecord> read_skeleton_log(std::istream& in, const std::string& source_name = "<stream>");

}  // namespace semgrid
