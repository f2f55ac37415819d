#include "semgrid/geometry.hpp"

#include "doctest.h"

#include <Eigen/Geometry>

#include <random>
#include <sstream>

using namespace semgrid;

namespace {

CameraCalib identity_camera() {
  CameraCalib c;
  c.width = 640;
  c.height = 480;
  c.fx = c.fy = 500;
  c.cx = 320;
  c.cy = 240;
  return c;
}

// Reference line walk: cell i along the dominant axis rounds the exact minor coordinate
// half-down, computed with integer arithmetic only.
std::vector<VoxelIndex> reference_line(const VoxelIndex& a, const VoxelIndex& b) {
  const long d[3] = {long{b.ix} - a.ix, long{b.iy} - a.iy, long{b.iz} - a.iz};
  const long n = std::max({std::labs(d[0]), std::labs(d[1]), std::labs(d[2])});
  std::vector<VoxelIndex> out;
  for (long i = 0; i <= n; ++i) {
    long c[3];
    for (int k = 0; k < 3; ++k) {
      const long m = std::labs(d[k]);
      long off = 0;
      if (n > 0) {
        // ceil((2*i*m - n) / (2n)) for the non-negative magnitude.
        const long num = 2 * i * m - n;
        const long den = 2 * n;
        off = num >= 0 ? (num + den - 1) / den : -((-num) / den);
      }
      c[k] = (k == 0 ? a.ix : k == 1 ? a.iy : a.iz) + (d[k] < 0 ? -off : off);
    }
    out.push_back(VoxelIndex{static_cast<int>(c[0]), static_cast<int>(c[1]), static_cast<int>(c[2])});
  }
  return out;
}

CameraCalib random_camera(std::mt19937_64& rng, std::uint16_t id) {
  std::uniform_real_distribution<double> pos(-4.0, 4.0), h(1.5, 3.0);
  Vec3 eye(pos(rng), pos(rng), h(rng));
  while (eye.head<2>().norm() < 1.0) eye = Vec3(pos(rng), pos(rng), h(rng));
  return look_at(id, 640, 480, 520.0, eye, Vec3(0, 0, 1.0));
}

}  // namespace

TEST_CASE("project: optical axis, offset point, behind camera") {
  const auto c = identity_camera();
  auto p = project(c, Vec3(0, 0, 2));
  REQUIRE(p);
  CHECK(p->u == doctest::Approx(320));
  CHECK(p->v == doctest::Approx(240));
  CHECK(p->z_cam == doctest::Approx(2.0));
  CHECK_FALSE(project(c, Vec3(0, 0, -1)));
  p = project(c, Vec3(0.5, 0, 2));
  REQUIRE(p);
  CHECK(p->u == doctest::Approx(445).epsilon(1e-12));
  CHECK(p->v == doctest::Approx(240).epsilon(1e-12));
  CHECK(p->z_cam == doctest::Approx(2.0));
  CHECK_FALSE(project(c, Vec3(5, 0, 2)));  // outside the image
}

TEST_CASE("backproject: examples and round trip") {
  const auto c = identity_camera();
  CHECK((backproject(c, 320, 240, 3.0) - Vec3(0, 0, 3)).norm() < 1e-12);
  CHECK((backproject(c, 445, 240, 2.0) - Vec3(0.5, 0, 2)).norm() < 1e-12);
  CHECK_THROWS_AS(backproject(c, 1, 1, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(backproject(c, 1, 1, -2.0), std::invalid_argument);

  std::mt19937_64 rng(7);
  const auto cam = random_camera(rng, 3);
  std::uniform_real_distribution<double> uu(0, cam.width), vv(0, cam.height), dd(0.2, 10.0);
  for (int i = 0; i < 1000; ++i) {
    const double u = uu(rng), v = vv(rng), d = dd(rng);
    const Vec3 pw = backproject(cam, u, v, d);
    const auto p = project(cam, pw);
    REQUIRE(p);
    CHECK(std::abs(p->u - u) < 1e-6);
    CHECK(std::abs(p->v - v) < 1e-6);
    CHECK(std::abs(p->z_cam - d) < 1e-6);
    CHECK((backproject(cam, p->u, p->v, p->z_cam) - pw).norm() < 1e-6);
  }
}

TEST_CASE("camera validation") {
  auto c = identity_camera();
  CHECK_NOTHROW(c.validate());
  c.fx = 0;
  CHECK_THROWS(c.validate());
  c = identity_camera();
  c.cx = 700;
  CHECK_THROWS(c.validate());
  c = identity_camera();
  c.rotation(0, 0) = -1;  // det -1
  CHECK_THROWS(c.validate());
}

TEST_CASE("epipolar line: rectified pair is horizontal") {
  const auto a = identity_camera();
  auto b = identity_camera();
  b.translation = Vec3(0.3, 0, 0);
  const auto line = epipolar_line(a, b, Vec2(400, 200));
  CHECK(std::abs(std::abs(line.b) - 1.0) < 1e-12);
  CHECK(std::abs(line.a) < 1e-12);
  CHECK(line.distance(Vec2(123, 200)) < 1e-9);
  CHECK(line.distance(Vec2(123, 210)) == doctest::Approx(10.0));
}

TEST_CASE("epipolar line: coincident centers rejected") {
  const auto a = identity_camera();
  auto b = identity_camera();
  b.rotation = Eigen::AngleAxisd(0.3, Vec3::UnitY()).toRotationMatrix();
  CHECK_THROWS_AS(epipolar_line(a, b, Vec2(10, 10)), std::invalid_argument);
}

TEST_CASE("epipolar consistency over random two-view setups") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> pt(-1.5, 1.5), z(0.0, 2.0);
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_camera(rng, 1);
    const auto b = random_camera(rng, 2);
    for (int i = 0; i < 40; ++i) {
      const Vec3 X(pt(rng), pt(rng), z(rng));
      const auto pa = project(a, X);
      const auto pb = project(b, X);
      if (!pa || !pb) continue;
      const auto line = epipolar_line(a, b, Vec2(pa->u, pa->v));
      CHECK(std::abs(line.a * line.a + line.b * line.b - 1.0) < 1e-12);
      CHECK(line.distance(Vec2(pb->u, pb->v)) < 1e-6);
      // Any depth along the camera-a ray also lands on the line.
      const auto q = project_unbounded(b, backproject(a, pa->u, pa->v, 0.5 + i * 0.1));
      if (q) CHECK(line.distance(Vec2(q->u, q->v)) < 1e-6);
      ++checked;
    }
  }
  CHECK(checked > 500);
}

TEST_CASE("epipolar segment") {
  std::mt19937_64 rng(5);
  const auto a = look_at(1, 640, 480, 500, Vec3(-1.5, -2.5, 1.5), Vec3(0, 0, 1));
  const auto b = look_at(2, 640, 480, 500, Vec3(1.5, -2.5, 1.5), Vec3(0, 0, 1));
  const Vec3 X = backproject(a, 300, 260, 2.0);
  const auto pa = project(a, X);
  const auto pb = project(b, X);
  REQUIRE(pa);
  REQUIRE(pb);

  SUBCASE("true correspondence lies on the depth-interval segment") {
    const auto seg = epipolar_segment(a, b, Vec2(pa->u, pa->v), 1.8, 2.2);
    REQUIRE(seg);
    CHECK(seg->distance(Vec2(pb->u, pb->v)) < 1e-6);
    const auto line = epipolar_line(a, b, Vec2(pa->u, pa->v));
    CHECK(line.distance(seg->p0) < 1e-6);
    CHECK(line.distance(seg->p1) < 1e-6);
    // A point of the ray outside the interval is off the segment.
    const auto far = project(b, backproject(a, pa->u, pa->v, 3.0));
    REQUIRE(far);
    CHECK(seg->distance(Vec2(far->u, far->v)) > 5.0);
  }
  SUBCASE("degenerate interval is the projected point") {
    const auto seg = epipolar_segment(a, b, Vec2(pa->u, pa->v), 2.0, 2.0);
    REQUIRE(seg);
    CHECK((seg->p0 - seg->p1).norm() < 1e-9);
    CHECK((seg->p0 - Vec2(pb->u, pb->v)).norm() < 1e-6);
  }
  SUBCASE("interval entirely behind camera b") {
    // Camera b faces camera a head-on; points beyond b's center along a's ray are behind b.
    const auto front = look_at(1, 640, 480, 500, Vec3(0, 0, 1), Vec3(0, 4, 1));
    const auto back = look_at(2, 640, 480, 500, Vec3(0, 2, 1), Vec3(0, 0, 1));
    CHECK(epipolar_segment(front, back, Vec2(330, 240), 2.5, 4.0) == std::nullopt);
    CHECK(epipolar_segment(front, back, Vec2(330, 240), 0.5, 1.5).has_value());
  }
  CHECK_THROWS(epipolar_segment(a, b, Vec2(1, 1), 0.0, 1.0));
}

TEST_CASE("bresenham3d: fixed examples") {
  CHECK(bresenham3d({0, 0, 0}, {3, 0, 0}) ==
        std::vector<VoxelIndex>{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}});
  CHECK(bresenham3d({0, 0, 0}, {2, 2, 2}) == std::vector<VoxelIndex>{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}});
  CHECK(bresenham3d({4, -2, 7}, {4, -2, 7}) == std::vector<VoxelIndex>{{4, -2, 7}});
  // Exact tie at the first step: only the dominant axis moves.
  CHECK(bresenham3d({0, 0, 0}, {2, 1, 0}) == std::vector<VoxelIndex>{{0, 0, 0}, {1, 0, 0}, {2, 1, 0}});
}

TEST_CASE("bresenham3d: random pairs against the reference walk") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> coord(-40, 40);
  for (int trial = 0; trial < 1000; ++trial) {
    const VoxelIndex a{coord(rng), coord(rng), coord(rng)};
    const VoxelIndex b{coord(rng), coord(rng), coord(rng)};
    const auto path = bresenham3d(a, b);
    REQUIRE(path == reference_line(a, b));
    REQUIRE(path.front() == a);
    REQUIRE(path.back() == b);
    const long n = std::max({std::labs(long{b.ix} - a.ix), std::labs(long{b.iy} - a.iy), std::labs(long{b.iz} - a.iz)});
    REQUIRE(static_cast<long>(path.size()) == n + 1);
    for (std::size_t i = 1; i < path.size(); ++i) {
      REQUIRE(std::abs(path[i].ix - path[i - 1].ix) <= 1);
      REQUIRE(std::abs(path[i].iy - path[i - 1].iy) <= 1);
      REQUIRE(std::abs(path[i].iz - path[i - 1].iz) <= 1);
      REQUIRE_FALSE(path[i] == path[i - 1]);
    }
    // Reverse walk has the same count and is itself connected from b to a.
    const auto back = bresenham3d(b, a);
    REQUIRE(back.size() == path.size());
    REQUIRE(back.front() == b);
    REQUIRE(back.back() == a);
  }
}

TEST_CASE("bresenham3d: early stop") {
  int visited = 0;
  bresenham3d_visit({0, 0, 0}, {10, 3, 1}, [&](const VoxelIndex&) { return ++visited < 4; });
  CHECK(visited == 4);
}

TEST_CASE("voxel_index_of") {
  CHECK(voxel_index_of(Vec3(0.31, -0.02, 1.0), 0.1) == VoxelIndex{3, -1, 10});
  CHECK(voxel_index_of(Vec3(0, 0, 0), 0.1) == VoxelIndex{0, 0, 0});
  CHECK(voxel_index_of(Vec3(0.0999, 0.0999, 0.0999), 0.1) == VoxelIndex{0, 0, 0});

  // Translation consistency with resolutions that are exact in binary.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5, 5);
  std::uniform_int_distribution<int> k(-20, 20);
  for (double res : {0.125, 0.25, 0.0625}) {
    for (int i = 0; i < 500; ++i) {
      const Vec3 p(u(rng), u(rng), u(rng));
      const int kx = k(rng), ky = k(rng), kz = k(rng);
      const auto a = voxel_index_of(p, res);
      const auto b = voxel_index_of(p + res * Vec3(kx, ky, kz), res);
      CHECK(b == VoxelIndex{a.ix + kx, a.iy + ky, a.iz + kz});
    }
  }
}

TEST_CASE("calibration file round trip and errors") {
  std::vector<CameraCalib> cams{look_at(1, 320, 240, 260, Vec3(2.8, 2.8, 2.5), Vec3(0, 0, 0.9), 0.02),
                                look_at(7, 320, 240, 260, Vec3(-2.8, 2.8, 2.5), Vec3(0, 0, 0.9), 0.02)};
  std::stringstream ss;
  write_calibrations(ss, cams);
  const auto back = parse_calibrations(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[1].sensor_id == 7);
  CHECK((back[0].rotation - cams[0].rotation).norm() < 1e-15);
  CHECK(back[0].depth_noise_sigma == 0.02);

  std::istringstream bad("1 320 240 260 260 160 120 1 0 0 0 1 0 0 0 1 0 0\n");
  CHECK_THROWS_WITH_AS(parse_calibrations(bad, "cams.txt"), doctest::Contains("cams.txt:1"), std::runtime_error);
}
