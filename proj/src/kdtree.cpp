#include "semgrid/kdtree.hpp"

#include <algorithm>
#include <numeric>

namespace semgrid {

namespace {
struct HeapLess {
  bool operator()(const KdTree::Neighbor& a, const KdTree::Neighbor& b) const {
    return a.sq_dist < b.sq_dist || (a.sq_dist == b.sq_dist && a.index < b.index);
  }
};
constexpr HeapLess heap_less{};
}  // namespace

KdTree::KdTree(std::span<const Vec3> points, std::size_t leaf_size)
    : points_(points), order_(points.size()), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (!order_.empty()) build(0, order_.size());
  sorted_.reserve(order_.size());
  for (const auto i : order_) sorted_.push_back(points_[i]);
}

std::size_t KdTree::build(std::size_t begin, std::size_t end) {
  const std::size_t id = nodes_.size();
  nodes_.push_back(Node{begin, end});
  if (end - begin <= leaf_size_) return id;
  Vec3 lo = points_[order_[begin]], hi = lo;
  for (std::size_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                   order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                     return points_[a][axis] < points_[b][axis] || (points_[a][axis] == points_[b][axis] && a < b);
                   });
  const double split = points_[order_[mid]][axis];
  const std::size_t left = build(begin, mid);
  const std::size_t right = build(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void KdTree::search(std::size_t node_id, const Vec3& q, std::size_t k, std::size_t skip, std::vector<Neighbor>& heap,
                    double rd, Vec3& offset) const {
  const Node& node = nodes_[node_id];
  if (node.axis < 0) {
    for (std::size_t i = node.begin; i < node.end; ++i) {
      const double d = (sorted_[i] - q).squaredNorm();
      if (heap.size() == k && d > heap.front().sq_dist) continue;
      const std::size_t idx = order_[i];
      if (idx == skip) continue;
      const Neighbor cand{idx, d};
      if (heap.size() < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end(), heap_less);
      } else if (heap_less(cand, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), heap_less);
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end(), heap_less);
      }
    }
    return;
  }
  const double diff = q[node.axis] - node.split;
  const std::size_t near = diff < 0 ? node.left : node.right;
  const std::size_t far = diff < 0 ? node.right : node.left;
  search(near, q, k, skip, heap, rd, offset);
  // rd is a lower bound on the squared distance from q to the far cell.
  const double old = offset[node.axis];
  const double far_rd = rd - old * old + diff * diff;
  if (heap.size() < k || far_rd <= heap.front().sq_dist) {
    offset[node.axis] = diff;
    search(far, q, k, skip, heap, far_rd, offset);
    offset[node.axis] = old;
  }
}

void KdTree::radius_search(std::size_t node_id, const Vec3& q, double r2, std::size_t skip, std::vector<double>& out,
                           double rd, Vec3& offset) const {
  const Node& node = nodes_[node_id];
  if (node.axis < 0) {
    for (std::size_t i = node.begin; i < node.end; ++i) {
      const double d = (sorted_[i] - q).squaredNorm();
      if (d <= r2 && order_[i] != skip) out.push_back(d);
    }
    return;
  }
  const double diff = q[node.axis] - node.split;
  radius_search(diff < 0 ? node.left : node.right, q, r2, skip, out, rd, offset);
  const double old = offset[node.axis];
  const double far_rd = rd - old * old + diff * diff;
  if (far_rd <= r2) {
    offset[node.axis] = diff;
    radius_search(diff < 0 ? node.right : node.left, q, r2, skip, out, far_rd, offset);
    offset[node.axis] = old;
  }
}

void KdTree::radius_sq_dists(const Vec3& query, double r2, std::size_t skip, std::vector<double>& out) const {
  out.clear();
  if (nodes_.empty()) return;
  Vec3 offset = Vec3::Zero();
  radius_search(0, query, r2, skip, out, 0.0, offset);
}

std::vector<KdTree::Neighbor> KdTree::knn(const Vec3& query, std::size_t k, std::size_t skip) const {
  std::vector<Neighbor> heap;
  knn_into(query, k, skip, heap);
  return heap;
}

void KdTree::knn_into(const Vec3& query, std::size_t k, std::size_t skip, std::vector<Neighbor>& heap) const {
  heap.clear();
  if (k == 0 || nodes_.empty()) return;
  heap.reserve(k + 1);
  Vec3 offset = Vec3::Zero();
  search(0, query, k, skip, heap, 0.0, offset);
  std::sort_heap(heap.begin(), heap.end(), heap_less);
}

}  // namespace semgrid
