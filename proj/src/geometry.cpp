#include "semgrid/geometry.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace semgrid {

void CameraCalib::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera: image size must be positive");
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("camera: focal lengths must be positive");
  if (!(cx > 0.0 && cx < width) || !(cy > 0.0 && cy < height))
    throw std::invalid_argument("camera: principal point outside image");
  const Mat3 err = rotation.transpose() * rotation - Mat3::Identity();
  if (err.cwiseAbs().maxCoeff() >= 1e-9 || rotation.determinant() <= 0.0)
    throw std::invalid_argument("camera: rotation is not a proper orthonormal matrix");
  if (!translation.allFinite()) throw std::invalid_argument("camera: non-finite translation");
}

CameraCalib look_at(std::uint16_t sensor_id, int width, int height, double focal, const Vec3& eye,
                    const Vec3& target, double depth_noise_sigma) {
  const Vec3 z = (target - eye).normalized();
  Vec3 up = Vec3::UnitZ();
  if (std::abs(z.dot(up)) > 0.999) up = Vec3::UnitY();
  // Image y points down, so camera y is the negated world up projected off the viewing axis.
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);
  CameraCalib c;
  c.sensor_id = sensor_id;
  c.width = width;
  c.height = height;
  c.fx = c.fy = focal;
  c.cx = width / 2.0;
  c.cy = height / 2.0;
  c.rotation.col(0) = x;
  c.rotation.col(1) = y;
  c.rotation.col(2) = z;
  // Re-orthonormalize so the 1e-9 validation bound holds after the cross products.
  Eigen::JacobiSVD<Mat3> svd(c.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  c.rotation = svd.matrixU() * svd.matrixV().transpose();
  c.translation = eye;
  c.depth_noise_sigma = depth_noise_sigma;
  return c;
}

Ray::Ray(const Vec3& o, const Vec3& d) : origin(o), direction(d.normalized()) {
  if (!(d.norm() > 0.0)) throw std::invalid_argument("ray: zero direction");
}

std::ostream& operator<<(std::ostream& os, const VoxelIndex& v) {
  return os << '(' << v.ix << ',' << v.iy << ',' << v.iz << ')';
}

std::optional<Projection> project_unbounded(const CameraCalib& calib, const Vec3& p_world) {
  const Vec3 pc = calib.to_camera(p_world);
  if (!(pc.z() > 1e-6)) return std::nullopt;
  return Projection{calib.cx + calib.fx * pc.x() / pc.z(), calib.cy + calib.fy * pc.y() / pc.z(), pc.z()};
}

std::optional<Projection> project(const CameraCalib& calib, const Vec3& p_world) {
  auto p = project_unbounded(calib, p_world);
  if (!p || !calib.in_image(p->u, p->v)) return std::nullopt;
  return p;
}

Vec3 backproject(const CameraCalib& calib, double u, double v, double depth) {
  if (!(depth > 0.0)) throw std::invalid_argument("backproject: depth must be positive");
  const Vec3 pc((u - calib.cx) / calib.fx * depth, (v - calib.cy) / calib.fy * depth, depth);
  return calib.to_world(pc);
}

Ray pixel_ray(const CameraCalib& calib, double u, double v) {
  const Vec3 dir_cam((u - calib.cx) / calib.fx, (v - calib.cy) / calib.fy, 1.0);
  return Ray(calib.center(), calib.rotation * dir_cam);
}

double Segment2::distance(const Vec2& p) const {
  const Vec2 d = p1 - p0;
  const double len2 = d.squaredNorm();
  if (len2 == 0.0) return (p - p0).norm();
  const double s = std::clamp((p - p0).dot(d) / len2, 0.0, 1.0);
  return (p - (p0 + s * d)).norm();
}

namespace {

// Homogeneous image point K * X_cam (no division, valid behind the camera too).
Eigen::Vector3d homogeneous_image_point(const CameraCalib& c, const Vec3& p_world) {
  const Vec3 pc = c.to_camera(p_world);
  return {c.fx * pc.x() + c.cx * pc.z(), c.fy * pc.y() + c.cy * pc.z(), pc.z()};
}

}  // namespace

Line2 epipolar_line(const CameraCalib& a, const CameraCalib& b, const Vec2& kp_a) {
  const Vec3 ca = a.center();
  if ((ca - b.center()).norm() < 1e-9) throw std::invalid_argument("epipolar_line: coincident camera centers");
  const Vec3 along = backproject(a, kp_a.x(), kp_a.y(), 1.0);
  const Eigen::Vector3d e = homogeneous_image_point(b, ca);
  const Eigen::Vector3d x = homogeneous_image_point(b, along);
  Eigen::Vector3d l = e.cross(x);
  const double n = std::hypot(l.x(), l.y());
  if (!(n > 1e-12)) throw std::invalid_argument("epipolar_line: viewing ray passes through the other camera");
  l /= n;
  return Line2{l.x(), l.y(), l.z()};
}

std::optional<Segment2> epipolar_segment(const CameraCalib& a, const CameraCalib& b, const Vec2& kp_a,
                                         double d_min, double d_max) {
  if (!(d_min > 0.0) || d_max < d_min) throw std::invalid_argument("epipolar_segment: need 0 < d_min <= d_max");
  constexpr double kMinZ = 1e-6;
  // Camera-b depth is affine along the camera-a ray: z_b(d) = z0 + d * dz.
  const Vec3 p0 = a.to_world(Vec3::Zero());
  const Vec3 p1 = backproject(a, kp_a.x(), kp_a.y(), 1.0);
  const double z0 = b.to_camera(p0).z();
  const double dz = b.to_camera(p1).z() - z0;
  double lo = d_min, hi = d_max;
  auto zb = [&](double d) { return z0 + d * dz; };
  if (zb(lo) <= kMinZ && zb(hi) <= kMinZ) return std::nullopt;
  if (zb(lo) <= kMinZ) lo = (2.0 * kMinZ - z0) / dz;
  if (zb(hi) <= kMinZ) hi = (2.0 * kMinZ - z0) / dz;
  const auto q0 = project_unbounded(b, backproject(a, kp_a.x(), kp_a.y(), lo));
  const auto q1 = project_unbounded(b, backproject(a, kp_a.x(), kp_a.y(), hi));
  if (!q0 || !q1) return std::nullopt;
  return Segment2{Vec2(q0->u, q0->v), Vec2(q1->u, q1->v)};
}

std::vector<VoxelIndex> bresenham3d(const VoxelIndex& from, const VoxelIndex& to) {
  std::vector<VoxelIndex> cells;
  bresenham3d_visit(from, to, [&](const VoxelIndex& c) {
    cells.push_back(c);
    return true;
  });
  return cells;
}

VoxelIndex voxel_index_of(const Vec3& p, double resolution) {
  return VoxelIndex{static_cast<std::int32_t>(std::floor(p.x() / resolution)),
                    static_cast<std::int32_t>(std::floor(p.y() / resolution)),
                    static_cast<std::int32_t>(std::floor(p.z() / resolution))};
}

Vec3 voxel_center(const VoxelIndex& idx, double resolution) {
  return Vec3((idx.ix + 0.5) * resolution, (idx.iy + 0.5) * resolution, (idx.iz + 0.5) * resolution);
}

std::vector<CameraCalib> parse_calibrations(std::istream& in, const std::string& source_name) {
  std::vector<CameraCalib> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    long id = 0;
    if (!(ls >> id)) continue;
    CameraCalib c;
    double r[9], t[3];
    ls >> c.width >> c.height >> c.fx >> c.fy >> c.cx >> c.cy;
    for (double& x : r) ls >> x;
    for (double& x : t) ls >> x;
    ls >> c.depth_noise_sigma;
    std::string extra;
    if (!ls || (ls >> extra) || id < 0 || id > 0xFFFF)
      throw std::runtime_error(source_name + ":" + std::to_string(lineno) + ": malformed camera line");
    c.sensor_id = static_cast<std::uint16_t>(id);
    c.rotation << r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8];
    c.translation = Vec3(t[0], t[1], t[2]);
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(source_name + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(c);
  }
  return out;
}

std::vector<CameraCalib> load_calibrations(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open calibration file " + path);
  return parse_calibrations(f, path);
}

void write_calibrations(std::ostream& out, const std::vector<CameraCalib>& calibs) {
  out << "# id width height fx fy cx cy r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz depth_sigma\n";
  out.precision(17);
  for (const auto& c : calibs) {
    out << c.sensor_id << ' ' << c.width << ' ' << c.height << ' ' << c.fx << ' ' << c.fy << ' ' << c.cx << ' '
        << c.cy;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out << ' ' << c.rotation(i, j);
    out << ' ' << c.translation.x() << ' ' << c.translation.y() << ' ' << c.translation.z() << ' '
        << c.depth_noise_sigma << '\n';
  }
}

}  // namespace semgrid
