#include "semgrid/pose.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace semgrid {

namespace {

constexpr Bone kGatedBones[kNumGatedBones] = {
    {kLeftShoulder, kLeftElbow}, {kLeftElbow, kLeftWrist},   {kRightShoulder, kRightElbow}, {kRightElbow, kRightWrist},
    {kLeftHip, kLeftKnee},       {kLeftKnee, kLeftAnkle},    {kRightHip, kRightKnee},       {kRightKnee, kRightAnkle},
    {kLeftShoulder, kRightShoulder}, {kLeftHip, kRightHip},  {kLeftShoulder, kLeftHip},     {kRightShoulder, kRightHip},
};

const CameraCalib* find_calib(std::span<const CameraCalib> calibs, std::uint16_t id) {
  for (const auto& c : calibs)
    if (c.sensor_id == id) return &c;
  return nullptr;
}

const PersonKeypoints* find_person(std::span<const PoseSet2p5D> views, const PersonRef& ref) {
  for (const auto& v : views) {
    if (v.sensor_id != ref.sensor_id) continue;
    for (const auto& p : v.persons)
      if (p.person_id == ref.person_id) return &p;
  }
  return nullptr;
}

// Distance of kp_b to the epipolar locus of kp_a; the bool is false when the depth
// segment lies entirely behind camera b.
std::pair<double, bool> locus_distance(const Keypoint2p5D& ka, const CameraCalib& ca, const Keypoint2p5D& kb,
                                       const CameraCalib& cb, const PoseParams& params, bool use_depth) {
  const Vec2 ua(ka.u, ka.v), ub(kb.u, kb.v);
  if (use_depth && ka.depth && ka.depth_sigma) {
    const double half = params.depth_sigma_mult * *ka.depth_sigma;
    const double lo = std::max(*ka.depth - half, 1e-3);
    const double hi = std::max(*ka.depth + half, lo + 1e-6);
    const auto seg = epipolar_segment(ca, cb, ua, lo, hi);
    if (!seg) return {INFINITY, false};
    return {seg->distance(ub), true};
  }
  return {epipolar_line(ca, cb, ua).distance(ub), true};
}

std::optional<Vec3> dlt(std::span<const JointObservation> obs) {
  Eigen::MatrixXd A(2 * obs.size(), 4);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto& c = *obs[i].calib;
    // Normalized image coordinates keep the system well conditioned.
    const double xn = (obs[i].uv.x() - c.cx) / c.fx;
    const double yn = (obs[i].uv.y() - c.cy) / c.fy;
    Eigen::Matrix<double, 3, 4> P;
    P.leftCols<3>() = c.rotation.transpose();
    P.col(3) = -c.rotation.transpose() * c.translation;
    const double w = std::max(obs[i].confidence, 1e-6);
    A.row(2 * i) = w * (xn * P.row(2) - P.row(0));
    A.row(2 * i + 1) = w * (yn * P.row(2) - P.row(1));
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d X = svd.matrixV().col(3);
  if (std::abs(X(3)) < 1e-12) return std::nullopt;
  return Vec3(X.head<3>() / X(3));
}

std::vector<double> reprojection_errors(std::span<const JointObservation> obs, const Vec3& X) {
  std::vector<double> err;
  for (const auto& o : obs) {
    const auto p = project_unbounded(*o.calib, X);
    err.push_back(p ? std::hypot(p->u - o.uv.x(), p->v - o.uv.y()) : INFINITY);
  }
  return err;
}

double median_of(std::vector<double> v) {
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

}  // namespace

JointClass joint_class(std::size_t joint) {
  switch (joint) {
    case kNose: case kLeftEye: case kRightEye: case kLeftEar: case kRightEar: return JointClass::head;
    case kLeftShoulder: case kRightShoulder: return JointClass::shoulders;
    case kLeftElbow: case kRightElbow: return JointClass::elbows;
    case kLeftWrist: case kRightWrist: return JointClass::wrists;
    case kLeftHip: case kRightHip: return JointClass::hips;
    case kLeftKnee: case kRightKnee: return JointClass::knees;
    case kLeftAnkle: case kRightAnkle: return JointClass::ankles;
    default: throw std::out_of_range("joint_class: joint index out of range");
  }
}

const char* joint_class_name(JointClass c) {
  static constexpr const char* names[] = {"Head", "Hips", "Knees", "Ankles", "Shoulders", "Elbows", "Wrists"};
  return names[static_cast<int>(c)];
}

std::span<const Bone> gated_bones() { return kGatedBones; }

std::size_t PersonKeypoints::count() const {
  return static_cast<std::size_t>(std::count_if(joints.begin(), joints.end(), [](const auto& j) { return j.has_value(); }));
}

std::size_t Skeleton3D::joint_count() const {
  return static_cast<std::size_t>(std::count_if(joints.begin(), joints.end(), [](const auto& j) { return j.has_value(); }));
}

std::optional<Vec3> Skeleton3D::centroid() const {
  Vec3 s = Vec3::Zero();
  int n = 0;
  for (const auto& j : joints)
    if (j) {
      s += j->position;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return Vec3(s / n);
}

PairCost pair_cost(const PersonKeypoints& a, const CameraCalib& calib_a, const PersonKeypoints& b,
                   const CameraCalib& calib_b, const PoseParams& params, bool use_depth) {
  PairCost out;
  if ((calib_a.center() - calib_b.center()).norm() < 1e-9) return out;
  double sum = 0;
  int consistent = 0, violating = 0;
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    const auto& ka = a.joints[j];
    const auto& kb = b.joints[j];
    if (!ka || !kb) continue;
    if (ka->confidence < params.min_joint_confidence || kb->confidence < params.min_joint_confidence) continue;
    const auto [dab, ok_ab] = locus_distance(*ka, calib_a, *kb, calib_b, params, use_depth);
    const auto [dba, ok_ba] = locus_distance(*kb, calib_b, *ka, calib_a, params, use_depth);
    const bool segment_a = use_depth && ka->depth && ka->depth_sigma;
    const bool segment_b = use_depth && kb->depth && kb->depth_sigma;
    if (!ok_ab || !ok_ba || (segment_a && dab > params.tau_epi_px) || (segment_b && dba > params.tau_epi_px)) {
      ++violating;
      continue;
    }
    sum += 0.5 * (dab + dba);
    ++consistent;
  }
  if (consistent == 0 && violating == 0) return out;
  if (violating > consistent) {
    out.status = PairCost::Status::forbidden;
    return out;
  }
  out.cost = sum / consistent;
  out.status = out.cost <= params.tau_epi_px ? PairCost::Status::ok : PairCost::Status::forbidden;
  return out;
}

std::vector<PersonGroup> associate(std::span<const PoseSet2p5D> views, std::span<const CameraCalib> calibs,
                                   const PoseParams& params, bool use_depth) {
  std::vector<const PoseSet2p5D*> order;
  for (const auto& v : views)
    if (find_calib(calibs, v.sensor_id)) order.push_back(&v);
  std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->sensor_id < b->sensor_id; });

  struct Member {
    const PersonKeypoints* person;
    const CameraCalib* calib;
    PersonRef ref;
  };
  std::vector<std::vector<Member>> groups;
  for (const auto* view : order) {
    const CameraCalib* calib = find_calib(calibs, view->sensor_id);
    struct Candidate {
      double cost;
      std::size_t group, person;
    };
    std::vector<Candidate> cands;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (std::size_t p = 0; p < view->persons.size(); ++p) {
        double sum = 0;
        int n = 0;
        bool forbidden = false;
        for (const auto& m : groups[g]) {
          if (m.ref.sensor_id == view->sensor_id) {
            forbidden = true;
            break;
          }
          const auto pc = pair_cost(*m.person, *m.calib, view->persons[p], *calib, params, use_depth);
          if (pc.status == PairCost::Status::forbidden) {
            forbidden = true;
            break;
          }
          if (pc.status == PairCost::Status::ok) {
            sum += pc.cost;
            ++n;
          }
        }
        if (!forbidden && n > 0) cands.push_back({sum / n, g, p});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
      if (x.cost != y.cost) return x.cost < y.cost;
      if (x.group != y.group) return x.group < y.group;
      return x.person < y.person;
    });
    std::vector<bool> group_taken(groups.size(), false), person_taken(view->persons.size(), false);
    for (const auto& c : cands) {
      if (group_taken[c.group] || person_taken[c.person]) continue;
      group_taken[c.group] = person_taken[c.person] = true;
      const auto& person = view->persons[c.person];
      groups[c.group].push_back({&person, calib, {view->sensor_id, person.person_id}});
    }
    for (std::size_t p = 0; p < view->persons.size(); ++p) {
      if (person_taken[p]) continue;
      const auto& person = view->persons[p];
      groups.push_back({{&person, calib, {view->sensor_id, person.person_id}}});
    }
  }
  std::vector<PersonGroup> out;
  for (const auto& g : groups) {
    PersonGroup pg;
    for (const auto& m : g) pg.push_back(m.ref);
    out.push_back(std::move(pg));
  }
  return out;
}

std::optional<Triangulated> triangulate_joint(std::span<const JointObservation> obs, const PoseParams& params) {
  if (obs.size() < 2) return std::nullopt;
  const auto X = dlt(obs);
  if (!X) return std::nullopt;
  for (const auto& o : obs)
    if (o.calib->to_camera(*X).z() <= 1e-6) return std::nullopt;
  double max_angle = 0;
  for (std::size_t i = 0; i < obs.size(); ++i)
    for (std::size_t k = i + 1; k < obs.size(); ++k) {
      const Vec3 ri = *X - obs[i].calib->center(), rk = *X - obs[k].calib->center();
      const double c = std::clamp(ri.normalized().dot(rk.normalized()), -1.0, 1.0);
      max_angle = std::max(max_angle, std::acos(c));
    }
  if (max_angle < params.min_ray_angle_deg * M_PI / 180.0) return std::nullopt;
  const auto err = reprojection_errors(obs, *X);
  const double mean = std::accumulate(err.begin(), err.end(), 0.0) / static_cast<double>(err.size());
  if (!(mean <= params.tau_tri_px)) return std::nullopt;
  return Triangulated{*X, mean};
}

Skeleton3D triangulate_group(const PersonGroup& group, std::span<const PoseSet2p5D> views,
                             std::span<const CameraCalib> calibs, const PoseParams& params, bool depth_fallback) {
  Skeleton3D skel;
  std::uint64_t ts = 0;
  for (const auto& v : views)
    for (const auto& ref : group)
      if (v.sensor_id == ref.sensor_id) ts = std::max(ts, v.timestamp_us);
  skel.timestamp_us = ts;

  for (std::size_t j = 0; j < kNumJoints; ++j) {
    std::vector<JointObservation> obs;
    const Keypoint2p5D* depth_kp = nullptr;
    const CameraCalib* depth_calib = nullptr;
    for (const auto& ref : group) {
      const auto* person = find_person(views, ref);
      const auto* calib = find_calib(calibs, ref.sensor_id);
      if (!person || !calib || !person->joints[j]) continue;
      const auto& kp = *person->joints[j];
      if (kp.confidence < params.min_joint_confidence) continue;
      obs.push_back({calib, Vec2(kp.u, kp.v), kp.confidence});
      if (kp.depth && (!depth_kp || kp.confidence > depth_kp->confidence)) {
        depth_kp = &kp;
        depth_calib = calib;
      }
    }
    std::optional<Triangulated> tri;
    while (obs.size() >= 2) {
      tri = triangulate_joint(obs, params);
      if (tri || obs.size() < 3) break;
      const auto X = dlt(obs);
      if (!X) break;
      const auto err = reprojection_errors(obs, *X);
      obs.erase(obs.begin() + (std::max_element(err.begin(), err.end()) - err.begin()));
    }
    if (tri) {
      double conf = 0;
      for (const auto& o : obs) conf += o.confidence;
      skel.joints[j] = Joint3D{tri->position, conf / static_cast<double>(obs.size()), static_cast<int>(obs.size())};
    } else if (depth_fallback && group.size() == 1 && obs.size() == 1 && depth_kp) {
      skel.joints[j] = Joint3D{backproject(*depth_calib, depth_kp->u, depth_kp->v, *depth_kp->depth), depth_kp->confidence, 1};
    }
  }
  return skel;
}

Skeleton3D refine_skeleton(const Skeleton3D& raw, const Skeleton3D* prev, const PoseParams& params) {
  Skeleton3D out = raw;
  for (auto& v : out.velocity) v.reset();
  if (prev) out.bone_history = prev->bone_history;
  const double dt = prev && raw.timestamp_us > prev->timestamp_us
                        ? static_cast<double>(raw.timestamp_us - prev->timestamp_us) * 1e-6
                        : 0.0;
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    if (!out.joints[j]) continue;
    if (prev && prev->joints[j] && dt > 0) {
      const Vec3 last = prev->joints[j]->position;
      const Vec3 pred = last + (prev->velocity[j] ? *prev->velocity[j] : Vec3::Zero()) * dt;
      out.joints[j]->position = params.alpha_pos * raw.joints[j]->position + (1.0 - params.alpha_pos) * pred;
      out.velocity[j] = Vec3((out.joints[j]->position - last) / dt);
    } else {
      out.velocity[j] = Vec3::Zero();
    }
  }

  // Bone-length gating against the running median.
  std::array<int, kNumJoints> checked{}, deviating{};
  std::array<bool, kNumGatedBones> accept{};
  for (std::size_t b = 0; b < kNumGatedBones; ++b) {
    const auto& bone = kGatedBones[b];
    const auto& ja = out.joints[static_cast<std::size_t>(bone.a)];
    const auto& jb = out.joints[static_cast<std::size_t>(bone.b)];
    if (!ja || !jb) continue;
    const double len = (ja->position - jb->position).norm();
    const auto& hist = out.bone_history[b];
    if (hist.size() < params.bone_min_history) {
      accept[b] = len > 0;
      continue;
    }
    const double med = median_of(hist);
    const bool bad = std::abs(len - med) > params.bone_deviation * med;
    for (int j : {bone.a, bone.b}) {
      ++checked[static_cast<std::size_t>(j)];
      if (bad) ++deviating[static_cast<std::size_t>(j)];
    }
    accept[b] = !bad;
  }
  for (std::size_t j = 0; j < kNumJoints; ++j)
    if (out.joints[j] && checked[j] > 0 && deviating[j] == checked[j])
      out.joints[j]->confidence = std::min(out.joints[j]->confidence, params.demoted_confidence);
  for (std::size_t b = 0; b < kNumGatedBones; ++b) {
    if (!accept[b]) continue;
    const auto& bone = kGatedBones[b];
    auto& hist = out.bone_history[b];
    hist.push_back((out.joints[static_cast<std::size_t>(bone.a)]->position - out.joints[static_cast<std::size_t>(bone.b)]->position).norm());
    if (hist.size() > params.bone_history) hist.erase(hist.begin());
  }
  return out;
}

Skeleton3D predict(const Skeleton3D& skel, double dt, const PoseParams& params) {
  if (dt < 0) throw std::invalid_argument("predict: dt must be non-negative");
  Skeleton3D out = skel;
  if (dt == 0) return out;
  const double decay = std::exp(-dt / params.tau_conf_s);
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    if (!out.joints[j]) continue;
    if (out.velocity[j]) out.joints[j]->position += *out.velocity[j] * dt;
    out.joints[j]->confidence *= decay;
  }
  out.timestamp_us = skel.timestamp_us + static_cast<std::uint64_t>(std::llround(dt * 1e6));
  return out;
}

std::vector<FeedbackPose> make_feedback(std::span<const Skeleton3D> skeletons, const CameraCalib& calib,
                                        const VoxelMap* map, double delay_s, const PoseParams& params) {
  std::vector<FeedbackPose> out;
  for (const auto& skel : skeletons) {
    const auto ahead = predict(skel, std::max(delay_s, 0.0), params);
    FeedbackPose fb;
    fb.sensor_id = calib.sensor_id;
    fb.person_id = skel.person_id;
    fb.timestamp_us = skel.timestamp_us;
    bool any = false;
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      const auto& joint = ahead.joints[j];
      if (!joint || skel.joints[j]->confidence < params.min_feedback_confidence) continue;
      const auto p = project(calib, joint->position);
      if (!p) continue;
      const bool occluded = map && map->is_occluded(calib.center(), joint->position, 2);
      fb.joints[j] = FeedbackJoint{p->u, p->v, joint->confidence, occluded};
      any = true;
    }
    if (any) out.push_back(std::move(fb));
  }
  return out;
}

double update_delay(std::optional<double> current, double measured, double alpha) {
  if (measured < 0) throw std::invalid_argument("update_delay: measured delay must be non-negative");
  if (!current) return measured;
  return (1.0 - alpha) * *current + alpha * measured;
}

std::vector<Skeleton3D> SkeletonTracker::update(std::vector<Skeleton3D> raw, std::uint64_t timestamp_us,
                                                std::vector<std::size_t>* raw_index) {
  std::erase_if(tracks_, [&](const Skeleton3D& t) {
    return timestamp_us > t.timestamp_us &&
           static_cast<double>(timestamp_us - t.timestamp_us) * 1e-6 > params_.track_timeout_s;
  });
  std::vector<std::size_t> origin;
  {
    std::vector<Skeleton3D> kept;
    for (std::size_t r = 0; r < raw.size(); ++r)
      if (raw[r].joint_count() > 0) {
        kept.push_back(std::move(raw[r]));
        origin.push_back(r);
      }
    raw = std::move(kept);
  }

  struct Candidate {
    double dist;
    std::size_t raw, track;
  };
  std::vector<Candidate> cands;
  for (std::size_t r = 0; r < raw.size(); ++r) {
    const Vec3 c = *raw[r].centroid();
    for (std::size_t t = 0; t < tracks_.size(); ++t) {
      const double dt = timestamp_us > tracks_[t].timestamp_us ? static_cast<double>(timestamp_us - tracks_[t].timestamp_us) * 1e-6 : 0.0;
      const auto tc = predict(tracks_[t], dt, params_).centroid();
      if (!tc) continue;
      const double d = (c - *tc).norm();
      if (d <= params_.track_gate_m) cands.push_back({d, r, t});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    if (a.raw != b.raw) return a.raw < b.raw;
    return a.track < b.track;
  });
  std::vector<int> match(raw.size(), -1);
  std::vector<bool> track_taken(tracks_.size(), false);
  for (const auto& c : cands) {
    if (match[c.raw] >= 0 || track_taken[c.track]) continue;
    match[c.raw] = static_cast<int>(c.track);
    track_taken[c.track] = true;
  }
  std::vector<std::pair<Skeleton3D, std::size_t>> updated;
  for (std::size_t r = 0; r < raw.size(); ++r) {
    raw[r].timestamp_us = timestamp_us;
    if (match[r] >= 0) {
      auto& track = tracks_[static_cast<std::size_t>(match[r])];
      raw[r].person_id = track.person_id;
      track = refine_skeleton(raw[r], &track, params_);
      updated.emplace_back(track, origin[r]);
    } else {
      raw[r].person_id = next_id_++;
      tracks_.push_back(refine_skeleton(raw[r], nullptr, params_));
      updated.emplace_back(tracks_.back(), origin[r]);
    }
  }
  std::sort(updated.begin(), updated.end(), [](const auto& a, const auto& b) { return a.first.person_id < b.first.person_id; });
  std::vector<Skeleton3D> out;
  if (raw_index) raw_index->clear();
  for (auto& [skel, idx] : updated) {
    out.push_back(std::move(skel));
    if (raw_index) raw_index->push_back(idx);
  }
  return out;
}

void write_skeleton_log(std::ostream& out, const Skeleton3D& skel) {
  char buf[256];
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    const auto& jt = skel.joints[j];
    if (!jt) continue;
    std::snprintf(buf, sizeof buf, "%llu %u %zu %.6f %.6f %.6f %.4f %d\n", static_cast<unsigned long long>(skel.timestamp_us),
                  skel.person_id, j, jt->position.x(), jt->position.y(), jt->position.z(), jt->confidence, jt->n_views);
    out << buf;
  }
}

std::vector<SkeletonLogRecord> read_skeleton_log(std::istream& in, const std::string& source_name) {
  std::vector<SkeletonLogRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    SkeletonLogRecord r;
    double x, y, z;
    if (!(ss >> r.timestamp_us >> r.person_id >> r.joint >> x >> y >> z >> r.confidence >> r.n_views) || r.joint < 0 ||
        r.joint >= static_cast<int>(kNumJoints))
      throw std::runtime_error(source_name + ":" + std::to_string(lineno) + ": malformed skeleton record");
    r.position = Vec3(x, y, z);
    out.push_back(r);
  }
  return out;
}

}  // namespace semgrid
