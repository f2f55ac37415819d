#include "semgrid/voxmap.hpp"

#include "semgrid/bytes.hpp"
#include "semgrid/ply.hpp"

#include <absl/container/flat_hash_set.h>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace semgrid {

VoxelMap::VoxelMap(double resolution, OccupancyParams params, std::size_t num_classes)
    : resolution_(resolution), params_(params), num_classes_(num_classes) {
  if (!(resolution > 0.0)) throw std::invalid_argument("VoxelMap: resolution must be positive");
}

double VoxelMap::clamp(double l) const { return std::clamp(l, params_.l_min, params_.l_max); }

const VoxelCell* VoxelMap::find(const VoxelIndex& idx) const {
  auto it = cells_.find(idx);
  return it == cells_.end() ? nullptr : &it->second;
}

void VoxelMap::set_cell(const VoxelIndex& idx, const VoxelCell& cell) { cells_[idx] = cell; }

std::size_t VoxelMap::load_prior(std::span<const Vec3> prior_points) {
  if (!cells_.empty()) throw std::logic_error("load_prior: map is not empty");
  const auto uniform = ClassDistribution::uniform(num_classes_);
  for (const auto& p : prior_points) {
    auto [it, inserted] = cells_.try_emplace(voxel_index_of(p, resolution_));
    if (inserted) {
      it->second.occupancy_log_odds = clamp(params_.l_prior);
      it->second.dist = uniform;
      it->second.source = CellSource::prior;
    }
  }
  return cells_.size();
}

IntegrationStats VoxelMap::integrate_cloud(const SemanticCloud& cloud, const CameraCalib& calib) {
  IntegrationStats stats;
  const VoxelIndex origin = voxel_index_of(calib.center(), resolution_);
  const auto uniform = ClassDistribution::uniform(num_classes_);

  // Endpoint cells with the points that landed in them, in cloud order.
  absl::flat_hash_map<VoxelIndex, std::vector<std::size_t>> endpoints;
  std::vector<VoxelIndex> endpoint_of(cloud.points.size());
  std::vector<bool> used(cloud.points.size(), false);
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const auto& pt = cloud.points[i];
    if (argmax_class(pt.dist).class_idx == kPersonClass) {
      ++stats.skipped_person;
      continue;
    }
    const VoxelIndex e = voxel_index_of(calib.to_world(pt.position), resolution_);
    endpoints[e].push_back(i);
    endpoint_of[i] = e;
    used[i] = true;
  }

  // One free-space update per traversed cell per call; endpoint cells are never freed.
  absl::flat_hash_set<VoxelIndex> free_cells;
  absl::flat_hash_set<VoxelIndex> traced;  // rays to the same endpoint voxel are identical
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    if (!used[i]) continue;
    const VoxelIndex e = endpoint_of[i];
    if (!traced.insert(e).second) continue;
    bresenham3d_visit(origin, e, [&](const VoxelIndex& c) {
      if (c != origin && c != e && !endpoints.contains(c)) free_cells.insert(c);
      return true;
    });
  }

  for (const auto& c : free_cells) {
    auto [it, inserted] = cells_.try_emplace(c);
    VoxelCell& cell = it->second;
    if (inserted) cell.dist = uniform;
    const bool was_occupied = cell.occupied();
    cell.occupancy_log_odds = clamp(cell.occupancy_log_odds + params_.l_free);
    cell.last_update_us = cloud.timestamp_us;
    if (was_occupied && !cell.occupied()) {
      ++stats.resets;
      cell.dist = uniform;
    }
    ++stats.freed;
  }

  for (const auto& [c, members] : endpoints) {
    auto [it, inserted] = cells_.try_emplace(c);
    VoxelCell& cell = it->second;
    if (inserted) cell.dist = uniform;
    cell.occupancy_log_odds = clamp(cell.occupancy_log_odds + params_.l_occ);
    cell.last_update_us = cloud.timestamp_us;
    cell.source = CellSource::observed;
    ++stats.occupied_updates;
    if (!cell.occupied()) {
      // Still free after the hit: free cells keep a uniform distribution.
      cell.dist = uniform;
      continue;
    }
    for (std::size_t i : members) {
      cell.dist = bayes_fuse(cell.dist, cloud.points[i].dist);
      ++stats.semantic_fused;
    }
  }
  return stats;
}

bool VoxelMap::is_occluded(const Vec3& from_world, const Vec3& to_world, int k) const {
  if (k <= 0) return true;
  const VoxelIndex a = voxel_index_of(from_world, resolution_);
  const VoxelIndex b = voxel_index_of(to_world, resolution_);
  int hits = 0;
  bresenham3d_visit(a, b, [&](const VoxelIndex& c) {
    if (c == a || c == b) return true;
    auto it = cells_.find(c);
    if (it != cells_.end() && it->second.occupied()) ++hits;
    return hits < k;
  });
  return hits >= k;
}

std::vector<SnapshotEntry> VoxelMap::snapshot() const {
  std::vector<SnapshotEntry> out;
  for (const auto& [idx, cell] : cells_) {
    if (!cell.occupied()) continue;
    const auto top = argmax_class(cell.dist);
    out.push_back(SnapshotEntry{idx, cell.occupancy_log_odds, top.class_idx, top.probability, cell.source});
  }
  std::sort(out.begin(), out.end(), [](const SnapshotEntry& a, const SnapshotEntry& b) { return a.index < b.index; });
  return out;
}

void write_map_ply(std::ostream& out, std::span<const SnapshotEntry> entries, double resolution) {
  const PlyProperty props[] = {{"float", "x"}, {"float", "y"}, {"float", "z"}, {"uchar", "class"}, {"float", "occupancy"}};
  write_binary_ply_header(out, entries.size(), props);
  std::vector<std::uint8_t> buf;
  buf.reserve(entries.size() * 17);
  for (const auto& e : entries) {
    const Vec3 c = voxel_center(e.index, resolution);
    bytes::put(buf, static_cast<float>(c.x()));
    bytes::put(buf, static_cast<float>(c.y()));
    bytes::put(buf, static_cast<float>(c.z()));
    bytes::put(buf, static_cast<std::uint8_t>(e.class_idx));
    bytes::put(buf, static_cast<float>(1.0 / (1.0 + std::exp(-e.occupancy_log_odds))));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace semgrid
