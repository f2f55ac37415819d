#pragma once

#include "semgrid/geometry.hpp"
#include "semgrid/semantics.hpp"

#include <algorithm>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace semgrid {

/// Row-major metric depth image; 0 marks an invalid pixel.
struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<float> depth;
  std::uint64_t timestamp_us = 0;

  DepthImage() = default;
  DepthImage(int w, int h, std::uint64_t ts = 0)
      : width(w), height(h), depth(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0.0f), timestamp_us(ts) {}

  float at(int x, int y) const { return depth[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
  float& at(int x, int y) { return depth[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
};

struct SemanticPoint {
  Vec3 position;  // sensor (camera) frame
  ClassDistribution dist;
};

struct SemanticCloud {
  std::uint16_t sensor_id = 0;
  std::uint64_t timestamp_us = 0;
  std::vector<SemanticPoint> points;
};

/// Per-pixel raw class scores, pixel-major (all channels of one pixel are contiguous).
struct SegmentationMask {
  int width = 0;
  int height = 0;
  int num_classes = static_cast<int>(kNumClasses);
  std::vector<float> scores;

  SegmentationMask() = default;
  SegmentationMask(int w, int h, int c = static_cast<int>(kNumClasses))
      : width(w), height(h), num_classes(c),
        scores(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(c), 0.0f) {}

  std::span<const float> pixel(int x, int y) const {
    return {scores.data() + (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * static_cast<std::size_t>(num_classes),
            static_cast<std::size_t>(num_classes)};
  }
  std::span<float> pixel(int x, int y) {
    return {scores.data() + (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * static_cast<std::size_t>(num_classes),
            static_cast<std::size_t>(num_classes)};
  }

  /// Bilinear interpolation of all channels at continuous pixel coordinates (pixel centers
  /// at integer positions, clamped at the border).
  std::vector<double> sample(double u, double v) const;
};

struct PixelBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive-exclusive extents in pixels

  bool contains(double u, double v) const { return u >= x0 && u < x1 && v >= y0 && v < y1; }
  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
};

double iou(const PixelBox& a, const PixelBox& b);

enum class Modality : std::uint8_t { rgb = 0, thermal = 1 };

struct Detection {
  int class_idx = 0;
  double score = 0.5;
  PixelBox box;  // in the image of its modality
  Modality modality = Modality::rgb;
};

struct DetectionSet {
  std::vector<Detection> detections;
};

/// Valid pixels back-projected into the camera frame. Throws on size mismatch.
std::vector<Vec3> depth_to_points(const DepthImage& depth, const CameraCalib& calib);

/// One centroid per occupied cell, ordered by cell index.
std::vector<Vec3> voxel_downsample(std::span<const Vec3> points, double resolution);

/// Removes points whose mean distance to their k nearest neighbours exceeds
/// mean + stddev_mult * stddev over the whole cloud. Clouds of at most k points pass through.
std::vector<Vec3> statistical_outlier_filter(std::span<const Vec3> points, std::size_t k, double stddev_mult);

/// Per-point mean distance to the k nearest neighbours (kd-tree search).
std::vector<double> mean_knn_distances(std::span<const Vec3> points, std::size_t k);

/// Drops points at or below floor_z, then groups the rest into connected components under
/// the `cluster_dist` neighbourhood relation. Clusters smaller than min_cluster are dropped.
/// Each cluster lists indices into `points_world` in increasing order.
std::vector<std::vector<std::size_t>> remove_ground_and_cluster(std::span<const Vec3> points_world, double floor_z,
                                                                double cluster_dist, std::size_t min_cluster);

struct FusionOptions {
  std::optional<CameraCalib> thermal_calib;  // required for thermal detections to take effect
  double nms_iou = 0.5;
};

/// Thermal boxes re-expressed in the color image, then person NMS across modalities.
/// Returns the surviving detections (thermal ones keep their thermal-image boxes).
std::vector<Detection> merge_detections(std::span<const Vec3> points_sensor, const CameraCalib& calib,
                                        const DetectionSet& dets, const FusionOptions& options);

/// Projection-based semantic fusion of segmentation scores and detections into the cloud.
SemanticCloud fuse_semantics(std::span<const Vec3> points_sensor, const CameraCalib& calib,
                             const SegmentationMask& mask, const DetectionSet& dets,
                             const std::vector<std::vector<std::size_t>>& clusters, const FusionOptions& options = {});

struct CloudPipelineParams {
  double voxel_size = 0.05;
  std::size_t outlier_k = 50;
  double outlier_stddev_mult = 1.0;
  double floor_z = 0.10;
  double cluster_dist = 0.25;
  std::size_t min_cluster = 10;
};

/// Full sensor-side chain: back-project, downsample, outlier filter, ground removal and
/// clustering, semantic fusion.
SemanticCloud build_cloud(const DepthImage& depth, const CameraCalib& calib, const SegmentationMask& mask,
                          const DetectionSet& dets, const CloudPipelineParams& params = {},
                          const FusionOptions& options = {});

/// Binary little-endian PLY: x y z (float32), class (uint8), prob (float32).
void write_cloud_ply(std::ostream& out, const SemanticCloud& cloud);

}  // namespace semgrid
