#include "semgrid/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace semgrid {

std::optional<double> ReprojectionStats::mean(JointClass c) const {
  const auto i = static_cast<std::size_t>(c);
  if (count[i] == 0) return std::nullopt;
  return sum[i] / static_cast<double>(count[i]);
}

std::optional<double> ReprojectionStats::average() const {
  double total = 0.0;
  int n = 0;
  for (std::size_t c = 0; c < kNumJointClasses; ++c)
    if (const auto m = mean(static_cast<JointClass>(c))) {
      total += *m;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return total / n;
}

std::size_t ReprojectionStats::samples() const {
  std::size_t n = 0;
  for (const auto c : count) n += c;
  return n;
}

ReprojectionStats reprojection_errors(std::span<const PoseSet2p5D> poses, std::span<const Skeleton3D> skeletons,
                                      std::span<const AssociationRecord> associations,
                                      std::span<const CameraCalib> calibs) {
  std::map<std::pair<std::uint64_t, std::uint32_t>, const Skeleton3D*> skeleton_at;
  for (const auto& s : skeletons) skeleton_at[{s.timestamp_us, s.person_id}] = &s;
  std::map<std::pair<std::uint16_t, std::uint64_t>, const PoseSet2p5D*> pose_at;
  for (const auto& p : poses) pose_at[{p.sensor_id, p.timestamp_us}] = &p;
  std::map<std::uint16_t, const CameraCalib*> calib_of;
  for (const auto& c : calibs) calib_of[c.sensor_id] = &c;

  ReprojectionStats stats;
  for (const auto& a : associations) {
    const auto sk = skeleton_at.find({a.skeleton_ts_us, a.person_id});
    const auto ps = pose_at.find({a.sensor_id, a.pose_ts_us});
    const auto cal = calib_of.find(a.sensor_id);
    if (sk == skeleton_at.end() || ps == pose_at.end() || cal == calib_of.end()) continue;
    const PersonKeypoints* person = nullptr;
    for (const auto& p : ps->second->persons)
      if (p.person_id == a.local_person_id) person = &p;
    if (!person) continue;
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      const auto& kp = person->joints[j];
      const auto& joint = sk->second->joints[j];
      if (!kp || !joint) continue;
      const auto proj = project_unbounded(*cal->second, joint->position);
      if (!proj) continue;
      const auto c = static_cast<std::size_t>(joint_class(j));
      stats.sum[c] += std::hypot(proj->u - kp->u, proj->v - kp->v);
      ++stats.count[c];
    }
  }
  return stats;
}

namespace {

std::map<VoxelIndex, int> gt_above_floor(const Scene& scene, double t, double resolution) {
  std::map<VoxelIndex, int> out;
  for (const auto& g : ground_truth_voxels(scene, t, resolution))
    if (g.index.iz > 0) out.emplace(g.index, g.class_idx);
  return out;
}

}  // namespace

MapEvaluation evaluate_map(std::span<const SnapshotEntry> map, const Scene& scene, double t, double resolution) {
  const auto gt = gt_above_floor(scene, t, resolution);
  MapEvaluation ev;
  ev.gt_cells = gt.size();
  for (const auto& e : map) {
    if (e.index.iz <= 0) continue;
    ++ev.map_cells;
    const auto it = gt.find(e.index);
    if (it == gt.end()) continue;
    ++ev.intersection;
    if (e.source != CellSource::observed) continue;
    ++ev.labelled;
    if (e.class_idx == it->second) ++ev.correct;
  }
  const auto uni = ev.gt_cells + ev.map_cells - ev.intersection;
  ev.iou = uni ? static_cast<double>(ev.intersection) / static_cast<double>(uni) : 1.0;
  ev.semantic_accuracy = ev.labelled ? static_cast<double>(ev.correct) / static_cast<double>(ev.labelled) : 0.0;
  return ev;
}

std::vector<VoxelIndex> vacated_cells(const Scene& scene, double resolution) {
  const auto move = scene.first_move_time();
  if (!move) return {};
  Scene moved_only = scene;
  moved_only.walls = false;
  moved_only.floor = false;
  moved_only.boxes.clear();
  for (const auto& b : scene.boxes)
    if (b.move_time_s) moved_only.boxes.push_back(b);
  const double before = std::max(0.0, *move - 1e-3);
  const auto after_t = std::numeric_limits<double>::infinity();
  const auto after = gt_above_floor(scene, after_t, resolution);
  std::vector<VoxelIndex> out;
  for (const auto& [idx, cls] : gt_above_floor(moved_only, before, resolution))
    if (!after.count(idx)) out.push_back(idx);
  return out;
}

FreedEvaluation evaluate_freed(std::span<const SnapshotEntry> map, const Scene& scene, double resolution) {
  std::set<VoxelIndex> occupied;
  for (const auto& e : map) occupied.insert(e.index);
  FreedEvaluation ev;
  for (const auto& idx : vacated_cells(scene, resolution)) {
    ++ev.old_cells;
    if (!occupied.count(idx)) ++ev.freed;
  }
  ev.fraction = ev.old_cells ? static_cast<double>(ev.freed) / static_cast<double>(ev.old_cells) : 1.0;
  return ev;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

template <typename Row>
void read_rows(std::istream& in, const std::string& source, const std::string& header, std::size_t columns,
               Row&& row) {
  std::string line;
  int line_no = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!seen_header) {
      if (line != header) throw std::runtime_error(source + ":" + std::to_string(line_no) + ": unexpected header");
      seen_header = true;
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != columns)
      throw std::runtime_error(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(columns) +
                               " fields");
    try {
      row(f);
    } catch (const std::logic_error&) {
      throw std::runtime_error(source + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
}

const char* kSkeletonHeader = "timestamp_us,person_id,joint,x,y,z,confidence,n_views";
const char* kAssociationHeader = "skeleton_ts_us,person_id,sensor_id,local_person_id,pose_ts_us";

}  // namespace

void write_skeletons_csv(std::ostream& out, std::span<const Skeleton3D> skeletons) {
  out << kSkeletonHeader << '\n';
  write_skeletons_csv_rows(out, skeletons);
}

void write_skeletons_csv_rows(std::ostream& out, std::span<const Skeleton3D> skeletons) {
  const auto precision = out.precision(17);
  for (const auto& s : skeletons)
    for (std::size_t j = 0; j < kNumJoints; ++j)
      if (const auto& joint = s.joints[j])
        out << s.timestamp_us << ',' << s.person_id << ',' << j << ',' << joint->position.x() << ','
            << joint->position.y() << ',' << joint->position.z() << ',' << joint->confidence << ',' << joint->n_views
            << '\n';
  out.precision(precision);
}

std::vector<Skeleton3D> read_skeletons_csv(std::istream& in, const std::string& source_name) {
  std::vector<Skeleton3D> out;
  read_rows(in, source_name, kSkeletonHeader, 8, [&](const std::vector<std::string>& f) {
    const auto ts = std::stoull(f[0]);
    const auto id = static_cast<std::uint32_t>(std::stoul(f[1]));
    const auto j = std::stoul(f[2]);
    if (j >= kNumJoints) throw std::invalid_argument("joint");
    if (out.empty() || out.back().timestamp_us != ts || out.back().person_id != id) {
      out.emplace_back();
      out.back().timestamp_us = ts;
      out.back().person_id = id;
    }
    out.back().joints[j] = Joint3D{Vec3(std::stod(f[3]), std::stod(f[4]), std::stod(f[5])), std::stod(f[6]),
                                   std::stoi(f[7])};
  });
  return out;
}

void write_associations_csv(std::ostream& out, std::span<const AssociationRecord> records) {
  out << kAssociationHeader << '\n';
  write_associations_csv_rows(out, records);
}

void write_associations_csv_rows(std::ostream& out, std::span<const AssociationRecord> records) {
  for (const auto& a : records)
    out << a.skeleton_ts_us << ',' << a.person_id << ',' << a.sensor_id << ',' << a.local_person_id << ','
        << a.pose_ts_us << '\n';
}

std::vector<AssociationRecord> read_associations_csv(std::istream& in, const std::string& source_name) {
  std::vector<AssociationRecord> out;
  read_rows(in, source_name, kAssociationHeader, 5, [&](const std::vector<std::string>& f) {
    AssociationRecord a;
    a.skeleton_ts_us = std::stoull(f[0]);
    a.person_id = static_cast<std::uint32_t>(std::stoul(f[1]));
    a.sensor_id = static_cast<std::uint16_t>(std::stoul(f[2]));
    a.local_person_id = static_cast<std::uint32_t>(std::stoul(f[3]));
    a.pose_ts_us = std::stoull(f[4]);
    out.push_back(a);
  });
  return out;
}

}  // namespace semgrid
