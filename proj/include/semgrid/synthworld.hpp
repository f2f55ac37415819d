#pragma once

#include "semgrid/cloud.hpp"
#include "semgrid/geometry.hpp"
#include "semgrid/pose.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace semgrid {

struct SceneBox {
  std::string name;
  int class_idx = 0;
  Vec3 lo = Vec3::Zero(), hi = Vec3::Zero();
  bool in_prior = false;
  std::optional<double> move_time_s;  // box jumps by move_offset at this time
  Vec3 move_offset = Vec3::Zero();

  Vec3 lo_at(double t) const { return moved(t) ? Vec3(lo + move_offset) : lo; }
  Vec3 hi_at(double t) const { return moved(t) ? Vec3(hi + move_offset) : hi; }
  bool moved(double t) const { return move_time_s && t >= *move_time_s; }
};

/// Walks back and forth along a polyline at constant speed. speed 0 stands at the first waypoint.
struct ScenePerson {
  std::vector<Vec2> path;
  double speed = 0.0;
  double scale = 1.0;
  double start_offset_m = 0.0;  // distance already travelled at t=0
};

struct ObservationNoise {
  double keypoint_px = 2.0;
  double miss_rate = 0.05;
  double p_occ_fail = 0.7;
  double occ_error_min_px = 20.0, occ_error_max_px = 60.0;
  double label_noise = 0.0;
  double logit_margin = 4.0;
  bool depth_noise = true;
};

struct Scene {
  double size_x = 6.0, size_y = 6.0, height = 2.6;  // room spans [-x/2, x/2] x [-y/2, y/2] x [0, h]
  bool walls = true;
  bool floor = true;
  std::vector<SceneBox> boxes;
  std::vector<ScenePerson> persons;
  std::uint64_t seed = 1;
  ObservationNoise noise;

  /// Throws std::invalid_argument when boxes leave the room or persons have no path.
  void validate() const;
  std::optional<double> first_move_time() const;
};

// Scene file, INI-style:
//   [room]  size = 6 6 2.6, walls = true, seed = 7
//   [noise] keypoint_px, miss_rate, p_occ_fail, label_noise, logit_margin, depth_noise
//   [box NAME]  class = chair, min = x y z, max = x y z, prior = false, move_at = 15, move_by = dx dy dz
//   [person NAME]  path = x0 y0 x1 y1 ..., speed = 1.0, scale = 1.0, offset = 0
Scene parse_scene(std::istream& in, const std::string& source_name = "<stream>");
Scene load_scene(const std::string& path);

/// Seed for an independent random stream of one (sensor, frame, purpose) triple.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t sensor, std::uint64_t frame, std::uint64_t purpose);

using JointPositions = std::array<Vec3, kNumJoints>;

JointPositions person_joints(const ScenePerson& person, double t);

struct Capsule {
  Vec3 a, b;
  double radius = 0;
};

/// Capsule proxies of the body: head sphere, torso, upper/lower arms and legs.
std::vector<Capsule> person_capsules(const JointPositions& joints, double scale = 1.0);

enum class SurfaceKind : std::uint8_t { none, floor, wall, box, person };

struct SurfaceHit {
  double range = 0;  // distance along the unit ray
  SurfaceKind kind = SurfaceKind::none;
  int class_idx = -1;
  int instance = -1;  // box index or person index
};

/// Scene geometry frozen at one instant.
class WorldState {
 public:
  WorldState(const Scene& scene, double t);

  const Scene& scene() const { return *scene_; }
  double time() const { return t_; }
  const std::vector<JointPositions>& joints() const { return joints_; }

  /// Nearest hit along the ray up to max_range. Capsules of `skip_person` are ignored.
  std::optional<SurfaceHit> raycast(const Ray& ray, double max_range = 1e9, int skip_person = -1) const;
  /// True when anything other than `skip_person` lies strictly between the two points.
  bool segment_blocked(const Vec3& from, const Vec3& to, int skip_person = -1) const;

 private:
  struct Body {
    std::vector<Capsule> capsules;
    Vec3 center;
    double bound = 0;
  };
  const Scene* scene_;
  double t_;
  std::vector<JointPositions> joints_;
  std::vector<Body> bodies_;
  std::vector<std::pair<Vec3, Vec3>> boxes_;
};

/// Depth plus per-pixel ground-truth labels. Unrendered pixels (stride > 1) copy their
/// nearest rendered neighbour's label but keep depth 0.
struct RenderedFrame {
  DepthImage depth;
  std::vector<std::int16_t> label;     // class index, -1 no hit
  std::vector<std::int32_t> instance;  // box index, 1000 + person index, -1 otherwise
  int stride = 1;
};

inline constexpr std::int32_t kPersonInstanceBase = 1000;

/// Ray casts every stride-th pixel in both directions. `noise` null renders noise-free depth.
RenderedFrame render_frame(const WorldState& world, const CameraCalib& calib, std::uint64_t timestamp_us,
                           std::mt19937_64* noise, int stride = 1);

DepthImage render_depth(const WorldState& world, const CameraCalib& calib, std::uint64_t timestamp_us,
                        std::mt19937_64* noise, int stride = 1);

/// Fills only the listed pixels of `out` (which must match the calibration size).
void render_depth_pixels(const WorldState& world, const CameraCalib& calib, std::span<const std::pair<int, int>> pixels,
                         std::mt19937_64* noise, DepthImage& out);

SegmentationMask render_segmentation(const RenderedFrame& frame, const ObservationNoise& noise, std::mt19937_64& rng,
                                     int num_classes = static_cast<int>(kNumClasses));

/// Co-located thermal camera: same pose, half resolution and focal length.
CameraCalib thermal_calib_of(const CameraCalib& color);

struct DetectionOptions {
  int min_pixels = 20;
  double person_rate_rgb = 0.9;
  double person_rate_thermal = 0.8;
  std::optional<CameraCalib> thermal;
};

/// Boxes of visible object and person pixels, scored in [0.6, 0.95].
DetectionSet render_detections(const RenderedFrame& frame, const CameraCalib& calib, const DetectionOptions& options,
                               std::mt19937_64& rng);

struct SynthPersonKeypoints {
  std::uint32_t person_index = 0;
  JointArray<Keypoint2p5D> joints;  // no depth attached
  std::array<bool, kNumJoints> in_image{};
  std::array<bool, kNumJoints> occluded{};  // ground truth, for in-image joints
};

/// Projected joints with pixel noise and occlusion failures, for every person with at least
/// one joint in the image.
std::vector<SynthPersonKeypoints> render_keypoints(const WorldState& world, const CameraCalib& calib,
                                                   const ObservationNoise& noise, std::mt19937_64& rng);

/// Ground-truth visibility: in front of the camera, inside the image and unobstructed.
bool joint_visible(const WorldState& world, const CameraCalib& calib, std::size_t person, int joint);

struct GroundTruthVoxel {
  VoxelIndex index;
  int class_idx = 0;
};

/// Dense surface samples of the static geometry (room and boxes, no persons).
std::vector<Vec3> sample_surfaces(const Scene& scene, double t, double spacing, bool prior_only);

/// Occupied voxels of the static geometry at time t, sorted by index. A voxel touched by
/// several surfaces takes the box class over wall over floor.
std::vector<GroundTruthVoxel> ground_truth_voxels(const Scene& scene, double t, double resolution = 0.1);

}  // namespace semgrid
