#include "semgrid/cloud.hpp"

#include "semgrid/kdtree.hpp"

#include <absl/container/flat_hash_map.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace semgrid {

std::vector<double> SegmentationMask::sample(double u, double v) const {
  const double x = std::clamp(u, 0.0, static_cast<double>(width - 1));
  const double y = std::clamp(v, 0.0, static_cast<double>(height - 1));
  const int x0 = std::min(static_cast<int>(std::floor(x)), width - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), height - 1);
  const int x1 = std::min(x0 + 1, width - 1);
  const int y1 = std::min(y0 + 1, height - 1);
  const double ax = x - x0, ay = y - y0;
  const auto p00 = pixel(x0, y0), p10 = pixel(x1, y0), p01 = pixel(x0, y1), p11 = pixel(x1, y1);
  std::vector<double> out(static_cast<std::size_t>(num_classes));
  for (std::size_t c = 0; c < out.size(); ++c) {
    out[c] = (1 - ax) * (1 - ay) * p00[c] + ax * (1 - ay) * p10[c] + (1 - ax) * ay * p01[c] + ax * ay * p11[c];
  }
  return out;
}

double iou(const PixelBox& a, const PixelBox& b) {
  const PixelBox inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
  const double i = inter.area();
  const double u = a.area() + b.area() - i;
  return u > 0 ? i / u : 0.0;
}

std::vector<Vec3> depth_to_points(const DepthImage& depth, const CameraCalib& calib) {
  if (depth.width != calib.width || depth.height != calib.height)
    throw std::invalid_argument("depth_to_points: image size does not match calibration");
  if (depth.depth.size() != static_cast<std::size_t>(depth.width) * static_cast<std::size_t>(depth.height))
    throw std::invalid_argument("depth_to_points: buffer size mismatch");
  std::vector<Vec3> pts;
  for (int y = 0; y < depth.height; ++y) {
    for (int x = 0; x < depth.width; ++x) {
      const double d = depth.at(x, y);
      if (!(d > 0.0) || !std::isfinite(d)) continue;
      pts.emplace_back((x - calib.cx) / calib.fx * d, (y - calib.cy) / calib.fy * d, d);
    }
  }
  return pts;
}

std::vector<Vec3> voxel_downsample(std::span<const Vec3> points, double resolution) {
  if (!(resolution > 0.0)) throw std::invalid_argument("voxel_downsample: resolution must be positive");
  struct Acc {
    Vec3 sum = Vec3::Zero();
    std::size_t n = 0;
  };
  absl::flat_hash_map<VoxelIndex, Acc> cells;
  cells.reserve(points.size() / 2 + 1);
  for (const auto& p : points) {
    auto& a = cells[voxel_index_of(p, resolution)];
    a.sum += p;
    ++a.n;
  }
  std::vector<std::pair<VoxelIndex, Vec3>> sorted;
  sorted.reserve(cells.size());
  for (const auto& [idx, a] : cells) sorted.emplace_back(idx, a.sum / static_cast<double>(a.n));
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Vec3> out;
  out.reserve(sorted.size());
  for (auto& [idx, p] : sorted) out.push_back(p);
  return out;
}

std::vector<double> mean_knn_distances(std::span<const Vec3> points, std::size_t k) {
  KdTree tree(points);
  std::vector<double> mean(points.size(), 0.0);
  if (k == 0 || points.size() < 2) return mean;
  const std::size_t kk = std::min(k, points.size() - 1);
  // Radius queries sized from the previous point's k-th distance; consecutive points in
  // leaf order are close, so the guess rarely needs to grow.
  std::vector<double> d2;
  std::vector<KdTree::Neighbor> nn;
  double r2 = 0;
  for (const auto i : tree.leaf_order()) {
    bool exact = false;
    if (r2 > 0) {
      for (int attempt = 0; attempt < 3 && !exact; ++attempt, r2 *= 2.25) {
        tree.radius_sq_dists(points[i], r2, i, d2);
        exact = d2.size() >= kk;
      }
    }
    if (!exact) {
      tree.knn_into(points[i], kk, i, nn);
      d2.clear();
      for (const auto& n : nn) d2.push_back(n.sq_dist);
    }
    std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(kk - 1), d2.end());
    std::sort(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(kk));
    double s = 0;
    for (std::size_t j = 0; j < kk; ++j) s += std::sqrt(d2[j]);
    mean[i] = s / static_cast<double>(kk);
    r2 = d2[kk - 1] * 1.21;
  }
  return mean;
}

std::vector<Vec3> statistical_outlier_filter(std::span<const Vec3> points, std::size_t k, double stddev_mult) {
  if (k < 1) throw std::invalid_argument("statistical_outlier_filter: k must be >= 1");
  if (points.size() <= k) return {points.begin(), points.end()};
  const auto mean = mean_knn_distances(points, k);
  const double n = static_cast<double>(mean.size());
  const double mu = std::accumulate(mean.begin(), mean.end(), 0.0) / n;
  double var = 0;
  for (double m : mean) var += (m - mu) * (m - mu);
  const double sigma = std::sqrt(var / (n - 1.0));
  const double threshold = mu + stddev_mult * sigma;
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    if (mean[i] <= threshold) out.push_back(points[i]);
  return out;
}

namespace {

struct DisjointSets {
  std::vector<std::size_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent[b] = a;
  }
};

}  // namespace

std::vector<std::vector<std::size_t>> remove_ground_and_cluster(std::span<const Vec3> points_world, double floor_z,
                                                                double cluster_dist, std::size_t min_cluster) {
  if (!(cluster_dist > 0.0)) throw std::invalid_argument("remove_ground_and_cluster: cluster_dist must be positive");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < points_world.size(); ++i)
    if (points_world[i].z() > floor_z) kept.push_back(i);

  absl::flat_hash_map<VoxelIndex, std::vector<std::size_t>> grid;
  for (std::size_t i : kept) grid[voxel_index_of(points_world[i], cluster_dist)].push_back(i);

  DisjointSets sets(points_world.size());
  const double d2 = cluster_dist * cluster_dist;
  for (std::size_t i : kept) {
    const auto c = voxel_index_of(points_world[i], cluster_dist);
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          auto it = grid.find(VoxelIndex{c.ix + dx, c.iy + dy, c.iz + dz});
          if (it == grid.end()) continue;
          for (std::size_t j : it->second)
            if (j > i && (points_world[i] - points_world[j]).squaredNorm() <= d2) sets.unite(i, j);
        }
  }

  // Roots are the smallest member index, so grouping in index order is deterministic.
  std::vector<std::vector<std::size_t>> clusters;
  absl::flat_hash_map<std::size_t, std::size_t> root_to_cluster;
  for (std::size_t i : kept) {
    const std::size_t r = sets.find(i);
    auto [it, inserted] = root_to_cluster.try_emplace(r, clusters.size());
    if (inserted) clusters.emplace_back();
    clusters[it->second].push_back(i);
  }
  std::erase_if(clusters, [&](const auto& c) { return c.size() < min_cluster; });
  return clusters;
}

namespace {

std::optional<PixelBox> thermal_box_in_color(const Detection& det, std::span<const Vec3> points_sensor,
                                             const CameraCalib& calib, const CameraCalib& thermal) {
  std::vector<double> depths;
  for (const auto& p : points_sensor) {
    const auto t = project(thermal, calib.to_world(p));
    if (t && det.box.contains(t->u, t->v)) depths.push_back(p.z());
  }
  if (depths.empty()) return std::nullopt;
  auto mid = depths.begin() + static_cast<std::ptrdiff_t>(depths.size() / 2);
  std::nth_element(depths.begin(), mid, depths.end());
  const double d = *mid;
  PixelBox out{INFINITY, INFINITY, -INFINITY, -INFINITY};
  for (double u : {det.box.x0, det.box.x1})
    for (double v : {det.box.y0, det.box.y1}) {
      // Back-project thermal corners at the color depth (the two cameras are nearly co-located).
      const auto q = project_unbounded(calib, backproject(thermal, u, v, d));
      if (!q) return std::nullopt;
      out.x0 = std::min(out.x0, q->u);
      out.y0 = std::min(out.y0, q->v);
      out.x1 = std::max(out.x1, q->u);
      out.y1 = std::max(out.y1, q->v);
    }
  return out;
}

}  // namespace

std::vector<Detection> merge_detections(std::span<const Vec3> points_sensor, const CameraCalib& calib,
                                        const DetectionSet& dets, const FusionOptions& options) {
  struct Candidate {
    std::size_t index;
    std::optional<PixelBox> color_box;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < dets.detections.size(); ++i) {
    const auto& d = dets.detections[i];
    if (d.modality == Modality::rgb) {
      cands.push_back({i, d.box});
    } else if (options.thermal_calib) {
      cands.push_back({i, thermal_box_in_color(d, points_sensor, calib, *options.thermal_calib)});
    }
  }
  // Greedy NMS among boxes of the same class that have a color-image footprint.
  std::stable_sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& b) {
    return dets.detections[a.index].score > dets.detections[b.index].score;
  });
  std::vector<bool> suppressed(cands.size(), false);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (suppressed[i] || !cands[i].color_box) continue;
    for (std::size_t j = i + 1; j < cands.size(); ++j) {
      if (suppressed[j] || !cands[j].color_box) continue;
      const auto& di = dets.detections[cands[i].index];
      const auto& dj = dets.detections[cands[j].index];
      if (di.class_idx != dj.class_idx || di.modality == dj.modality) continue;
      if (iou(*cands[i].color_box, *cands[j].color_box) > options.nms_iou) suppressed[j] = true;
    }
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < cands.size(); ++i)
    if (!suppressed[i]) keep.push_back(cands[i].index);
  std::sort(keep.begin(), keep.end());
  std::vector<Detection> out;
  for (std::size_t i : keep) out.push_back(dets.detections[i]);
  return out;
}

SemanticCloud fuse_semantics(std::span<const Vec3> points_sensor, const CameraCalib& calib,
                             const SegmentationMask& mask, const DetectionSet& dets,
                             const std::vector<std::vector<std::size_t>>& clusters, const FusionOptions& options) {
  const std::size_t num_classes = static_cast<std::size_t>(mask.num_classes);
  std::vector<bool> clustered(points_sensor.size(), false);
  for (const auto& c : clusters)
    for (std::size_t i : c)
      if (i < clustered.size()) clustered[i] = true;

  const auto active = merge_detections(points_sensor, calib, dets, options);

  SemanticCloud cloud;
  cloud.sensor_id = calib.sensor_id;
  cloud.points.reserve(points_sensor.size());
  for (std::size_t i = 0; i < points_sensor.size(); ++i) {
    const Vec3& p = points_sensor[i];
    const Vec3 pw = calib.to_world(p);
    SemanticPoint sp{p, ClassDistribution::uniform(num_classes)};
    const auto proj = project(calib, pw);
    if (proj) {
      sp.dist = softmax(mask.sample(proj->u, proj->v));
      if (clustered[i]) {
        std::optional<Projection> thermal_proj;
        if (options.thermal_calib) thermal_proj = project(*options.thermal_calib, pw);
        for (const auto& det : active) {
          const bool inside = det.modality == Modality::rgb
                                  ? det.box.contains(proj->u, proj->v)
                                  : (thermal_proj && det.box.contains(thermal_proj->u, thermal_proj->v));
          if (!inside) continue;
          sp.dist = bayes_fuse(sp.dist, max_entropy_detection(det.class_idx, clamp_detector_score(det.score, num_classes),
                                                              num_classes));
        }
      }
    }
    cloud.points.push_back(std::move(sp));
  }
  return cloud;
}

SemanticCloud build_cloud(const DepthImage& depth, const CameraCalib& calib, const SegmentationMask& mask,
                          const DetectionSet& dets, const CloudPipelineParams& params, const FusionOptions& options) {
  const auto raw = depth_to_points(depth, calib);
  const auto down = voxel_downsample(raw, params.voxel_size);
  const auto filtered = statistical_outlier_filter(down, params.outlier_k, params.outlier_stddev_mult);
  std::vector<Vec3> world;
  world.reserve(filtered.size());
  for (const auto& p : filtered) world.push_back(calib.to_world(p));
  const auto clusters = remove_ground_and_cluster(world, params.floor_z, params.cluster_dist, params.min_cluster);
  auto cloud = fuse_semantics(filtered, calib, mask, dets, clusters, options);
  cloud.timestamp_us = depth.timestamp_us;
  return cloud;
}

}  // namespace semgrid
