#pragma once

#include "semgrid/geometry.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace semgrid {

/// Static 3D kd-tree over a borrowed point array.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points, std::size_t leaf_size = 12);

  struct Neighbor {
    std::size_t index;
    double sq_dist;
  };

  /// The k nearest points to `query` (excluding index `skip` when given), closest first.
  std::vector<Neighbor> knn(const Vec3& query, std::size_t k, std::size_t skip = kNoSkip) const;
  /// Same as knn() into a caller-owned buffer.
  void knn_into(const Vec3& query, std::size_t k, std::size_t skip, std::vector<Neighbor>& out) const;

  /// Squared distances of all points within sqrt(r2) of `query`, unordered.
  void radius_sq_dists(const Vec3& query, double r2, std::size_t skip, std::vector<double>& out) const;

  /// Point indices in leaf order; consecutive queries in this order share cache lines.
  const std::vector<std::size_t>& leaf_order() const { return order_; }

  static constexpr std::size_t kNoSkip = static_cast<std::size_t>(-1);

 private:
  struct Node {
    std::size_t begin, end;  // range into order_
    int axis = -1;           // -1 for leaves
    double split = 0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end);
  void radius_search(std::size_t node, const Vec3& q, double r2, std::size_t skip, std::vector<double>& out, double rd,
                     Vec3& offset) const;
  void search(std::size_t node, const Vec3& q, std::size_t k, std::size_t skip, std::vector<Neighbor>& heap, double rd,
              Vec3& offset) const;

  std::span<const Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Vec3> sorted_;  // points_ permuted by order_
  std::vector<Node> nodes_;
  std::size_t leaf_size_;
};

}  // namespace semgrid
