#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace semgrid {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole camera with its world placement. Distortion-free.
struct CameraCalib {
  std::uint16_t sensor_id = 0;
  int width = 0;
  int height = 0;
  double fx = 0, fy = 0, cx = 0, cy = 0;
  Mat3 rotation = Mat3::Identity();     // world_from_cam
  Vec3 translation = Vec3::Zero();      // camera center in world
  double depth_noise_sigma = 0.0;

  /// Throws std::invalid_argument when intrinsics or rotation are invalid.
  void validate() const;

  Vec3 center() const { return translation; }
  Vec3 to_camera(const Vec3& p_world) const { return rotation.transpose() * (p_world - translation); }
  Vec3 to_world(const Vec3& p_cam) const { return rotation * p_cam + translation; }
  bool in_image(double u, double v) const { return u >= 0.0 && u < width && v >= 0.0 && v < height; }
};

/// Camera looking from `eye` towards `target` with world +z as up.
CameraCalib look_at(std::uint16_t sensor_id, int width, int height, double focal, const Vec3& eye,
                    const Vec3& target, double depth_noise_sigma = 0.0);

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit length

  Ray(const Vec3& o, const Vec3& d);
  Vec3 at(double s) const { return origin + s * direction; }
};

struct VoxelIndex {
  std::int32_t ix = 0, iy = 0, iz = 0;

  friend bool operator==(const VoxelIndex&, const VoxelIndex&) = default;
  friend auto operator<=>(const VoxelIndex&, const VoxelIndex&) = default;

  template <typename H>
  friend H AbslHashValue(H h, const VoxelIndex& v) {
    return H::combine(std::move(h), v.ix, v.iy, v.iz);
  }
};

std::ostream& operator<<(std::ostream& os, const VoxelIndex& v);

struct Projection {
  double u = 0, v = 0, z_cam = 0;
};

/// Pixel and camera-frame depth; empty when behind the camera or outside the image.
std::optional<Projection> project(const CameraCalib& calib, const Vec3& p_world);

/// Pinhole projection without the image-bounds check. Empty only when z_cam <= 1e-6.
std::optional<Projection> project_unbounded(const CameraCalib& calib, const Vec3& p_world);

/// World point at camera-frame depth `depth` (z, not range) through pixel (u, v).
Vec3 backproject(const CameraCalib& calib, double u, double v, double depth);

/// Unit viewing ray of a pixel in world coordinates.
Ray pixel_ray(const CameraCalib& calib, double u, double v);

/// Image line a*u + b*v + c = 0 with a^2 + b^2 = 1.
struct Line2 {
  double a = 0, b = 0, c = 0;
  double distance(const Vec2& p) const { return std::abs(a * p.x() + b * p.y() + c); }
};

struct Segment2 {
  Vec2 p0, p1;
  double distance(const Vec2& p) const;
};

Line2 epipolar_line(const CameraCalib& a, const CameraCalib& b, const Vec2& kp_a);

/// Epipolar line restricted to the depth interval [d_min, d_max] of the camera-a ray.
/// The part of the interval behind camera b is clipped; empty when nothing remains.
std::optional<Segment2> epipolar_segment(const CameraCalib& a, const CameraCalib& b, const Vec2& kp_a,
                                         double d_min, double d_max);

/// Visits the 3D Bresenham cells from `from` to `to` (both inclusive) in order and stops
/// early when `visit` returns false. On an exact error-term tie only the dominant axis steps.
template <typename Visit>
void bresenham3d_visit(const VoxelIndex& from, const VoxelIndex& to, Visit&& visit) {
  std::array<std::int64_t, 3> cur{from.ix, from.iy, from.iz};
  const std::array<std::int64_t, 3> delta{std::int64_t{to.ix} - from.ix, std::int64_t{to.iy} - from.iy,
                                          std::int64_t{to.iz} - from.iz};
  std::array<std::int64_t, 3> step{}, mag{};
  for (int i = 0; i < 3; ++i) {
    step[i] = delta[i] > 0 ? 1 : (delta[i] < 0 ? -1 : 0);
    mag[i] = delta[i] < 0 ? -delta[i] : delta[i];
  }
  int major = 0;
  if (mag[1] > mag[major]) major = 1;
  if (mag[2] > mag[major]) major = 2;
  const int m1 = (major + 1) % 3;
  const int m2 = (major + 2) % 3;
  std::int64_t err1 = 2 * mag[m1] - mag[major];
  std::int64_t err2 = 2 * mag[m2] - mag[major];
  auto emit = [&] {
    return visit(VoxelIndex{static_cast<std::int32_t>(cur[0]), static_cast<std::int32_t>(cur[1]),
                            static_cast<std::int32_t>(cur[2])});
  };
  if (!emit()) return;
  for (std::int64_t n = 0; n < mag[major]; ++n) {
    if (err1 > 0) {
      cur[m1] += step[m1];
      err1 -= 2 * mag[major];
    }
    if (err2 > 0) {
      cur[m2] += step[m2];
      err2 -= 2 * mag[major];
    }
    err1 += 2 * mag[m1];
    err2 += 2 * mag[m2];
    cur[major] += step[major];
    if (!emit()) return;
  }
}

std::vector<VoxelIndex> bresenham3d(const VoxelIndex& from, const VoxelIndex& to);

VoxelIndex voxel_index_of(const Vec3& p, double resolution);
Vec3 voxel_center(const VoxelIndex& idx, double resolution);

// Calibration file: one camera per line,
// `id width height fx fy cx cy r11..r33 tx ty tz depth_sigma`; '#' starts a comment.
std::vector<CameraCalib> parse_calibrations(std::istream& in, const std::string& source_name = "<stream>");
std::vector<CameraCalib> load_calibrations(const std::string& path);
void write_calibrations(std::ostream& out, const std::vector<CameraCalib>& calibs);

}  // namespace semgrid
