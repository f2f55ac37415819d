#include "semgrid/cloud.hpp"
#include "semgrid/kdtree.hpp"
#include "semgrid/ply.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

using namespace semgrid;

namespace {

CameraCalib small_camera() {
  CameraCalib c;
  c.sensor_id = 3;
  c.width = 64;
  c.height = 48;
  c.fx = c.fy = 50.0;
  c.cx = 31.5;
  c.cy = 23.5;
  return c;
}

std::vector<double> brute_mean_knn(const std::vector<Vec3>& pts, std::size_t k) {
  std::vector<double> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (j != i) d.push_back((pts[i] - pts[j]).norm());
    std::sort(d.begin(), d.end());
    d.resize(std::min(k, d.size()));
    out.push_back(std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size()));
  }
  return out;
}

// Quadratic connected components, canonicalised as sorted index lists.
std::set<std::vector<std::size_t>> brute_clusters(const std::vector<Vec3>& pts, double floor_z, double dist,
                                                  std::size_t min_size) {
  std::vector<int> label(pts.size(), -1);
  int next = 0;
  for (std::size_t s = 0; s < pts.size(); ++s) {
    if (pts[s].z() <= floor_z || label[s] >= 0) continue;
    std::vector<std::size_t> stack{s};
    label[s] = next;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < pts.size(); ++j) {
        if (label[j] >= 0 || pts[j].z() <= floor_z) continue;
        if ((pts[i] - pts[j]).norm() <= dist) {
          label[j] = next;
          stack.push_back(j);
        }
      }
    }
    ++next;
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (label[i] >= 0) groups[label[i]].push_back(i);
  std::set<std::vector<std::size_t>> out;
  for (auto& [l, g] : groups)
    if (g.size() >= min_size) out.insert(g);
  return out;
}

std::vector<Vec3> cube_of_points(const Vec3& corner, int n, double step) {
  std::vector<Vec3> pts;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) pts.push_back(corner + step * Vec3(i, j, k));
  return pts;
}

// Floor plane plus the front face of a box, with Gaussian depth noise.
DepthImage render_box_scene(const CameraCalib& cam, std::uint64_t seed) {
  DepthImage depth(cam.width, cam.height, 1234);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.01);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Ray r = pixel_ray(cam, x, y);
      double best = INFINITY;
      if (r.direction.z() < 0) best = -r.origin.z() / r.direction.z();
      if (r.direction.y() > 0) {
        const double s = (0.5 - r.origin.y()) / r.direction.y();
        const Vec3 h = r.at(s);
        if (std::abs(h.x()) < 0.4 && h.z() < 1.0 && h.z() > 0 && s < best) best = s;
      }
      if (std::isfinite(best)) depth.at(x, y) = static_cast<float>(cam.to_camera(r.at(best)).z() + noise(rng));
    }
  return depth;
}

}  // namespace

TEST_CASE("depth_to_points") {
  const auto cam = small_camera();
  DepthImage empty(cam.width, cam.height);
  CHECK(depth_to_points(empty, cam).empty());

  DepthImage plane(cam.width, cam.height);
  std::fill(plane.depth.begin(), plane.depth.end(), 2.0f);
  const auto pts = depth_to_points(plane, cam);
  CHECK(pts.size() == static_cast<std::size_t>(cam.width * cam.height));
  for (const auto& p : pts) CHECK(p.z() == 2.0);
  // Back-projected pixel lands back on its pixel.
  const auto pr = project(cam, cam.to_world(pts[5 * cam.width + 7]));
  REQUIRE(pr);
  CHECK(pr->u == doctest::Approx(7.0));
  CHECK(pr->v == doctest::Approx(5.0));

  DepthImage wrong(10, 10);
  CHECK_THROWS_AS(depth_to_points(wrong, cam), std::invalid_argument);
}

TEST_CASE("voxel_downsample") {
  std::vector<Vec3> eight;
  for (int i = 0; i < 8; ++i) eight.emplace_back(0.005 * (i % 2) + 0.01, 0.005 * ((i / 2) % 2) + 0.01, 0.005 * (i / 4) + 0.01);
  const auto one = voxel_downsample(eight, 0.05);
  REQUIRE(one.size() == 1);
  CHECK((one[0] - Vec3(0.0125, 0.0125, 0.0125)).norm() < 1e-12);

  const std::vector<Vec3> pair{{0.01, 0, 0}, {0.03, 0, 0}};
  const auto c = voxel_downsample(pair, 0.05);
  REQUIRE(c.size() == 1);
  CHECK((c[0] - Vec3(0.02, 0, 0)).norm() < 1e-12);

  std::vector<Vec3> distinct;
  for (int i = 0; i < 20; ++i) distinct.emplace_back(0.1 * i + 0.02, 0.02, -0.03);
  auto d = voxel_downsample(distinct, 0.05);
  auto key = [](const Vec3& a, const Vec3& b) { return std::lexicographical_compare(a.data(), a.data() + 3, b.data(), b.data() + 3); };
  std::sort(d.begin(), d.end(), key);
  REQUIRE(d.size() == distinct.size());
  for (std::size_t i = 0; i < d.size(); ++i) CHECK((d[i] - distinct[i]).norm() < 1e-15);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> cloud(5000);
  for (auto& p : cloud) p = Vec3(u(rng), u(rng), u(rng));
  const auto once = voxel_downsample(cloud, 0.05);
  const auto twice = voxel_downsample(once, 0.05);
  CHECK(once.size() <= cloud.size());
  REQUIRE(once.size() == twice.size());
  for (std::size_t i = 0; i < once.size(); ++i) CHECK((once[i] - twice[i]).norm() < 1e-12);
  std::set<VoxelIndex> cells;
  for (const auto& p : once) CHECK(cells.insert(voxel_index_of(p, 0.05)).second);
  CHECK_THROWS(voxel_downsample(cloud, 0.0));
}

TEST_CASE("kd-tree matches brute force") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<Vec3> pts(700);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  // Duplicates exercise equal split keys.
  for (int i = 0; i < 30; ++i) pts.push_back(pts[static_cast<std::size_t>(i)]);
  KdTree tree(pts);
  for (int t = 0; t < 200; ++t) {
    const Vec3 q(u(rng), u(rng), u(rng));
    const std::size_t k = static_cast<std::size_t>(1 + t % 25);
    const auto nn = tree.knn(q, k);
    std::vector<double> ref;
    for (const auto& p : pts) ref.push_back((p - q).squaredNorm());
    std::sort(ref.begin(), ref.end());
    REQUIRE(nn.size() == k);
    for (std::size_t i = 0; i < k; ++i) CHECK(nn[i].sq_dist == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  const auto self = tree.knn(pts[100], 3, 100);
  for (const auto& n : self) CHECK(n.index != 100u);
  CHECK(tree.knn(pts[0], 5000).size() == pts.size());
}

TEST_CASE("statistical outlier filter") {
  std::vector<Vec3> grid;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      for (int k = 0; k < 4; ++k) grid.emplace_back(0.05 * i, 0.05 * j, 0.05 * k);
  auto with_outlier = grid;
  with_outlier.emplace_back(0.175, 0.175, 0.15 + 1.0);

  const auto ref = brute_mean_knn(with_outlier, 10);
  const auto fast = mean_knn_distances(with_outlier, 10);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(fast[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  const double mu = std::accumulate(ref.begin(), ref.end(), 0.0) / static_cast<double>(ref.size());
  double var = 0;
  for (double r : ref) var += (r - mu) * (r - mu);
  const double thr = mu + std::sqrt(var / static_cast<double>(ref.size() - 1));
  const std::size_t expected = static_cast<std::size_t>(std::count_if(ref.begin(), ref.end(), [&](double r) { return r <= thr; }));

  const auto out = statistical_outlier_filter(with_outlier, 10, 1.0);
  CHECK(out.size() == expected);
  CHECK(std::none_of(out.begin(), out.end(), [](const Vec3& p) { return p.z() > 1.0; }));

  const std::vector<Vec3> few{{0, 0, 0}, {5, 5, 5}, {9, 0, 0}};
  CHECK(statistical_outlier_filter(few, 3, 1.0).size() == 3);
  CHECK_THROWS(statistical_outlier_filter(few, 0, 1.0));

  // Dense jittered surfaces plus sparse flying pixels.
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    std::mt19937_64 srng(seed);
    std::normal_distribution<double> jitter(0.0, 0.005);
    std::uniform_real_distribution<double> box(-1.5, 1.5);
    std::vector<Vec3> scene;
    for (int i = 0; i < 40; ++i)
      for (int j = 0; j < 40; ++j) {
        scene.emplace_back(0.05 * i - 1.0 + jitter(srng), 0.05 * j - 1.0 + jitter(srng), jitter(srng));
        scene.emplace_back(0.05 * i - 1.0 + jitter(srng), 1.0 + jitter(srng), 0.05 * j + jitter(srng));
      }
    const std::size_t surface = scene.size();
    for (int i = 0; i < 80; ++i) scene.emplace_back(box(srng), box(srng), box(srng) + 1.5);
    const auto pass1 = statistical_outlier_filter(scene, 10, 1.0);
    const auto pass2 = statistical_outlier_filter(pass1, 10, 1.0);
    // Cantelli: at most half of any sample lies above mean + 1 stddev.
    CHECK(2 * (scene.size() - pass1.size()) <= scene.size());
    CHECK(2 * (pass1.size() - pass2.size()) <= pass1.size());
    // Every flying pixel farther than 0.3 m from the surfaces is gone.
    for (std::size_t i = surface; i < scene.size(); ++i) {
      double nearest = INFINITY;
      for (std::size_t j = 0; j < surface; ++j) nearest = std::min(nearest, (scene[i] - scene[j]).norm());
      if (nearest > 0.3) CHECK(std::find(pass1.begin(), pass1.end(), scene[i]) == pass1.end());
    }
    CHECK(pass1.size() >= surface * 9 / 10);
  }
}

TEST_CASE("ground removal and clustering") {
  auto pts = cube_of_points(Vec3(0, 0, 0.5), 6, 0.2);
  const auto second = cube_of_points(Vec3(2.0, 0, 0.5), 6, 0.2);
  pts.insert(pts.end(), second.begin(), second.end());
  const auto clusters = remove_ground_and_cluster(pts, 0.10, 0.25, 10);
  CHECK(clusters.size() == 2);

  std::vector<Vec3> low(30, Vec3(1, 1, 0.05));
  CHECK(remove_ground_and_cluster(low, 0.10, 0.25, 1).empty());
  const std::vector<Vec3> single{{0, 0, 1}};
  CHECK(remove_ground_and_cluster(single, 0.10, 0.25, 5).empty());
  CHECK_THROWS(remove_ground_and_cluster(single, 0.10, 0.0, 5));

  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1.5, 1.5), uz(-0.2, 1.5);
  for (int t = 0; t < 10; ++t) {
    std::vector<Vec3> r(400);
    for (auto& p : r) p = Vec3(u(rng), u(rng), uz(rng));
    const auto fast = remove_ground_and_cluster(r, 0.10, 0.25, 3);
    std::set<std::vector<std::size_t>> got(fast.begin(), fast.end());
    CHECK(got == brute_clusters(r, 0.10, 0.25, 3));
    for (const auto& c : fast) CHECK(std::is_sorted(c.begin(), c.end()));
  }
}

TEST_CASE("semantic fusion into points") {
  const auto cam = small_camera();
  SegmentationMask mask(cam.width, cam.height);
  // Floor-ish scores in the lower half, chair-ish in the upper half.
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      auto px = mask.pixel(x, y);
      px[y < cam.height / 2 ? 7 : kFloorClass] = 3.0f;
    }
  const std::vector<Vec3> pts{backproject(cam, 10.0, 10.0, 2.0), backproject(cam, 40.0, 30.0, 2.0),
                              backproject(cam, 20.3, 30.6, 2.5), Vec3(5.0, 0.0, 1.0)};

  SUBCASE("no detections") {
    const auto cloud = fuse_semantics(pts, cam, mask, DetectionSet{}, {{0, 1, 2}});
    REQUIRE(cloud.points.size() == pts.size());
    for (std::size_t i = 0; i < 3; ++i) {
      const auto pr = project(cam, cam.to_world(pts[i]));
      const auto expect = softmax(mask.sample(pr->u, pr->v));
      for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(std::abs(cloud.points[i].dist.prob(c) - expect.prob(c)) < 1e-12);
    }
    CHECK(cloud.points[3].dist.is_uniform(1e-12));  // outside the image
    CHECK(cloud.sensor_id == cam.sensor_id);
  }

  SUBCASE("person box on uniform segmentation") {
    const SegmentationMask flat(cam.width, cam.height);
    DetectionSet dets;
    dets.detections.push_back({kPersonClass, 0.85, PixelBox{5, 5, 20, 20}, Modality::rgb});
    const auto cloud = fuse_semantics(pts, cam, flat, dets, {{0, 1}});
    const auto expect = max_entropy_detection(kPersonClass, 0.85);
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(std::abs(cloud.points[0].dist.prob(c) - expect.prob(c)) < 1e-12);
    CHECK(cloud.points[1].dist.is_uniform(1e-12));  // clustered but outside the box
  }

  SUBCASE("unclustered point skips detections") {
    DetectionSet dets;
    dets.detections.push_back({7, 0.9, PixelBox{0, 24, 64, 48}, Modality::rgb});
    const auto cloud = fuse_semantics(pts, cam, mask, dets, {{2}});
    const auto pr = project(cam, cam.to_world(pts[1]));
    const auto seg_only = softmax(mask.sample(pr->u, pr->v));
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(std::abs(cloud.points[1].dist.prob(c) - seg_only.prob(c)) < 1e-12);
    const auto pr2 = project(cam, cam.to_world(pts[2]));
    const auto fused = bayes_fuse(softmax(mask.sample(pr2->u, pr2->v)), max_entropy_detection(7, 0.9));
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(std::abs(cloud.points[2].dist.prob(c) - fused.prob(c)) < 1e-12);
  }
}

TEST_CASE("bilinear sample interpolates raw scores") {
  SegmentationMask m(2, 2, 2);
  m.pixel(0, 0)[0] = 0.0f;
  m.pixel(1, 0)[0] = 1.0f;
  m.pixel(0, 1)[0] = 2.0f;
  m.pixel(1, 1)[0] = 3.0f;
  CHECK(m.sample(0.5, 0.5)[0] == doctest::Approx(1.5));
  CHECK(m.sample(0.25, 0.0)[0] == doctest::Approx(0.25));
  CHECK(m.sample(-3.0, 9.0)[0] == doctest::Approx(2.0));
}

TEST_CASE("thermal person detection merges with its color twin") {
  const auto cam = small_camera();
  CameraCalib thermal = cam;
  thermal.sensor_id = 103;
  thermal.width = 32;
  thermal.height = 24;
  thermal.fx = thermal.fy = 25.0;
  thermal.cx = 15.5;
  thermal.cy = 11.5;
  std::vector<Vec3> body;
  for (int y = 10; y < 30; ++y)
    for (int x = 20; x < 30; ++x) body.push_back(backproject(cam, x, y, 3.0));

  DetectionSet dets;
  dets.detections.push_back({kPersonClass, 0.9, PixelBox{20, 10, 30, 30}, Modality::rgb});
  dets.detections.push_back({kPersonClass, 0.7, PixelBox{10, 5, 15, 15}, Modality::thermal});
  dets.detections.push_back({7, 0.6, PixelBox{40, 30, 50, 40}, Modality::rgb});
  FusionOptions opt;
  opt.thermal_calib = thermal;
  const auto kept = merge_detections(body, cam, dets, opt);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].modality == Modality::rgb);
  CHECK(kept[1].class_idx == 7);

  // Without a thermal calibration the thermal box has no footprint and is ignored.
  CHECK(merge_detections(body, cam, dets, FusionOptions{}).size() == 2);

  // A thermal-only person fuses into the points it covers.
  DetectionSet only;
  only.detections.push_back({kPersonClass, 0.7, PixelBox{10, 5, 15, 15}, Modality::thermal});
  std::vector<std::size_t> all(body.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto cloud = fuse_semantics(body, cam, SegmentationMask(cam.width, cam.height), only, {all}, opt);
  for (const auto& p : cloud.points) CHECK(argmax_class(p.dist).class_idx == kPersonClass);
}

TEST_CASE("cloud pipeline output invariants") {
  const auto cam = look_at(1, 80, 60, 70.0, Vec3(0, -3, 1.5), Vec3(0, 0, 0.8));
  const auto depth = render_box_scene(cam, 9);
  SegmentationMask mask(cam.width, cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) mask.pixel(x, y)[static_cast<std::size_t>((x + y) % 16)] = 1.0f;
  DetectionSet dets;
  dets.detections.push_back({6, 0.8, PixelBox{20, 10, 60, 40}, Modality::rgb});
  const auto a = build_cloud(depth, cam, mask, dets);
  const auto b = build_cloud(depth, cam, mask, dets);
  CHECK(a.timestamp_us == 1234u);
  CHECK(!a.points.empty());
  CHECK(a.points.size() <= depth_to_points(depth, cam).size());
  REQUIRE(a.points.size() == b.points.size());
  std::set<VoxelIndex> cells;
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    CHECK(a.points[i].position == b.points[i].position);
    CHECK(a.points[i].dist == b.points[i].dist);
    double s = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) s += a.points[i].dist.prob(c);
    CHECK(std::abs(s - 1.0) < 1e-9);
    CHECK(cells.insert(voxel_index_of(a.points[i].position, 0.05)).second);
  }
}

TEST_CASE("cloud PLY round trip") {
  SemanticCloud cloud;
  cloud.points.push_back({Vec3(1, 2, 3), max_entropy_detection(4, 0.7)});
  cloud.points.push_back({Vec3(-1, 0.5, 2), ClassDistribution::uniform()});
  std::stringstream ss;
  write_cloud_ply(ss, cloud);
  const auto v = read_ply(ss);
  REQUIRE(v.size() == 2);
  CHECK(v.column("class")[0] == 4);
  CHECK(v.column("prob")[0] == doctest::Approx(0.7).epsilon(1e-6));
  CHECK(v.column("class")[1] == 0);
  CHECK(v.positions()[1].isApprox(Vec3(-1, 0.5, 2)));

  std::stringstream ascii;
  const std::vector<Vec3> pts{{0.5, 1.5, 2.5}, {3, 4, 5}};
  write_points_ascii_ply(ascii, pts);
  const auto back = read_ply(ascii);
  REQUIRE(back.size() == 2);
  CHECK(back.positions()[0].isApprox(pts[0]));
  std::istringstream junk("not a ply\n");
  CHECK_THROWS(read_ply(junk));
}
