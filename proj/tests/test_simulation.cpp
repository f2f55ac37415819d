#include "doctest.h"

#include "semgrid/evaluation.hpp"
#include "semgrid/simulation.hpp"

#include <sstream>

using namespace semgrid;

namespace {

Scene one_person_scene() {
  std::istringstream in(R"(
[room]
size = 6 6 2.6
seed = 11
[box desk]
class = table
min = 0.8 -0.4 0
max = 1.6 0.4 0.75
prior = true
[person p]
path = -1 -1 1 1
speed = 0.6
)");
  return parse_scene(in, "test");
}

std::vector<CameraCalib> rig() {
  std::vector<CameraCalib> cams;
  const double r = 2.7;
  const Vec3 eyes[] = {{r, r, 2.4}, {-r, r, 2.4}, {-r, -r, 2.4}, {r, -r, 2.4}};
  for (int i = 0; i < 4; ++i)
    cams.push_back(look_at(static_cast<std::uint16_t>(i + 1), 320, 240, 220, eyes[i], Vec3(0, 0, 0.9), 0.02));
  return cams;
}

SimulationOptions options(double duration) {
  SimulationOptions o;
  o.duration_s = duration;
  o.sensor.depth_stride = 4;
  return o;
}

}  // namespace

TEST_CASE("simulated rates over 10 s") {
  auto o = options(10.0);
  o.record_clouds = true;
  const auto r = run_simulation(one_person_scene(), rig(), default_class_set(), o);
  REQUIRE(r.sensors.size() == 4);
  for (const auto& s : r.sensors) {
    std::size_t poses = 0, clouds = 0;
    for (const auto& m : r.uplink) {
      if (m.sensor_id != s.sensor_id) continue;
      poses += std::holds_alternative<PoseSet2p5D>(m.msg);
      clouds += std::holds_alternative<SemanticCloud>(m.msg);
    }
    CHECK(poses >= 299);
    CHECK(poses <= 301);
    CHECK(clouds >= 9);
    CHECK(clouds <= 11);
    CHECK(s.dropped_clouds == 0);
  }
  CHECK(r.skeletons.size() > 250);
  CHECK(r.final_map.size() > 0);
  CHECK(r.end_us >= 9'900'000u);
}

TEST_CASE("zero duration gives an empty run") {
  const auto r = run_simulation(one_person_scene(), rig(), default_class_set(), options(0.0));
  CHECK(r.skeletons.empty());
  CHECK(r.associations.empty());
  std::size_t hellos = 0;
  for (const auto& m : r.uplink) hellos += std::holds_alternative<HelloMsg>(m.msg);
  CHECK(hellos == 4);
  CHECK(r.uplink.size() == 4);
  CHECK(r.final_map.size() > 0);  // the prior
}

TEST_CASE("runs are deterministic and lockstep lanes match single runs") {
  auto o = options(2.0);
  const auto scene = one_person_scene();
  const auto cams = rig();
  const auto a = run_simulation(scene, cams, default_class_set(), o);
  const auto b = run_simulation(scene, cams, default_class_set(), o);
  REQUIRE(a.skeletons.size() == b.skeletons.size());
  for (std::size_t i = 0; i < a.skeletons.size(); ++i)
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      REQUIRE(a.skeletons[i].joints[j].has_value() == b.skeletons[i].joints[j].has_value());
      if (a.skeletons[i].joints[j]) CHECK(a.skeletons[i].joints[j]->position == b.skeletons[i].joints[j]->position);
    }

  ObservationCache cache;
  const auto lanes = run_ablations(scene, cams, default_class_set(), o, {Ablation::none, Ablation::fb_occ_depth}, &cache);
  REQUIRE(lanes.size() == 2);
  const auto& same = lanes[1];
  REQUIRE(same.skeletons.size() == a.skeletons.size());
  for (std::size_t i = 0; i < a.skeletons.size(); ++i)
    for (std::size_t j = 0; j < kNumJoints; ++j)
      if (a.skeletons[i].joints[j]) CHECK(a.skeletons[i].joints[j]->position == same.skeletons[i].joints[j]->position);
  CHECK(lanes[0].final_map.size() == a.final_map.size());
  CHECK(lanes[1].map == lanes[0].map);
}

TEST_CASE("replaying the recorded uplink reproduces the skeletons") {
  auto o = options(3.0);
  o.record_clouds = true;
  const auto scene = one_person_scene();
  const auto r = run_simulation(scene, rig(), default_class_set(), o);

  std::stringstream rec;
  write_recording(rec, r.uplink);
  const auto back = read_recording(rec, "rec");
  REQUIRE(back.size() == r.uplink.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].recv_us == r.uplink[i].recv_us);
    CHECK(back[i].sensor_id == r.uplink[i].sensor_id);
  }

  const auto replay = replay_uplink(back, r.prior, default_class_set(), o, 0.0);
  REQUIRE(replay.skeletons.size() == r.skeletons.size());
  for (std::size_t i = 0; i < r.skeletons.size(); ++i) {
    CHECK(replay.skeletons[i].timestamp_us == r.skeletons[i].timestamp_us);
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      REQUIRE(replay.skeletons[i].joints[j].has_value() == r.skeletons[i].joints[j].has_value());
      if (r.skeletons[i].joints[j])
        CHECK((replay.skeletons[i].joints[j]->position - r.skeletons[i].joints[j]->position).norm() < 1e-12);
    }
  }
  CHECK(replay.final_map.size() == r.final_map.size());
}

TEST_CASE("truncated recording is a data error") {
  auto o = options(0.5);
  const auto r = run_simulation(one_person_scene(), rig(), default_class_set(), o);
  std::stringstream rec;
  write_recording(rec, r.uplink);
  auto bytes = rec.str();
  bytes.resize(bytes.size() - 3);
  std::istringstream cut(bytes);
  CHECK_THROWS(read_recording(cut, "cut"));
}

TEST_CASE("csv logs round trip") {
  const auto r = run_simulation(one_person_scene(), rig(), default_class_set(), options(1.0));
  std::stringstream sk, as;
  write_skeletons_csv(sk, r.skeletons);
  write_associations_csv(as, r.associations);
  const auto sk2 = read_skeletons_csv(sk, "sk");
  const auto as2 = read_associations_csv(as, "as");
  std::size_t nonempty = 0;
  for (const auto& s : r.skeletons) nonempty += s.joint_count() > 0;
  REQUIRE(sk2.size() == nonempty);
  REQUIRE(as2.size() == r.associations.size());
  for (std::size_t i = 0; i < as2.size(); ++i) {
    CHECK(as2[i].pose_ts_us == r.associations[i].pose_ts_us);
    CHECK(as2[i].local_person_id == r.associations[i].local_person_id);
  }
  std::istringstream bad("timestamp_us,person_id,joint,x,y,z,confidence,n_views\n1,2,3,x,0,0,1,2\n");
  CHECK_THROWS_AS(read_skeletons_csv(bad, "bad"), std::runtime_error);
}

TEST_CASE("reprojection error of exact skeletons is zero") {
  const auto cams = rig();
  const auto joints = person_joints(ScenePerson{{Vec2(0, 0)}, 0.0, 1.0, 0.0}, 0.0);
  Skeleton3D sk;
  sk.person_id = 7;
  sk.timestamp_us = 100;
  PersonKeypoints kp;
  kp.person_id = 3;
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    sk.joints[j] = Joint3D{joints[j], 1.0, 4};
    const auto p = project_unbounded(cams[0], joints[j]);
    kp.joints[j] = Keypoint2p5D{p->u + (j == kLeftWrist ? 3.0 : 0.0), p->v + (j == kLeftWrist ? 4.0 : 0.0), 1.0};
  }
  const PoseSet2p5D pose{cams[0].sensor_id, 90, {kp}};
  const AssociationRecord rec{100, 7, cams[0].sensor_id, 3, 90};
  const std::vector<PoseSet2p5D> poses{pose};
  const std::vector<Skeleton3D> sks{sk};
  const std::vector<AssociationRecord> recs{rec};
  const auto st = reprojection_errors(poses, sks, recs, cams);
  CHECK(st.samples() == kNumJoints);
  CHECK(*st.mean(JointClass::head) < 1e-9);
  CHECK(*st.mean(JointClass::wrists) == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(*st.average() == doctest::Approx(2.5 / 7).epsilon(1e-12));
  CHECK(reprojection_errors({}, sks, recs, cams).samples() == 0);
  CHECK_FALSE(ReprojectionStats{}.average());
}

TEST_CASE("map evaluation against ground truth") {
  auto scene = one_person_scene();
  const auto gt = ground_truth_voxels(scene, 0.0, 0.1);
  std::vector<SnapshotEntry> perfect;
  for (const auto& g : gt) perfect.push_back({g.index, 2.0, g.class_idx, 0.9, CellSource::observed});
  const auto ev = evaluate_map(perfect, scene, 0.0, 0.1);
  CHECK(ev.iou == 1.0);
  CHECK(ev.semantic_accuracy == 1.0);
  CHECK(evaluate_map({}, scene, 0.0, 0.1).iou == 0.0);

  scene.boxes.push_back(SceneBox{"chair", 7, {0.8, 0.3, 0}, {1.3, 0.8, 0.9}, false, 15.0, Vec3(-2, 0, 0)});
  const auto vacated = vacated_cells(scene, 0.1);
  CHECK(vacated.size() > 20);
  const auto before = ground_truth_voxels(scene, 10.0, 0.1);
  std::vector<SnapshotEntry> stale;
  for (const auto& g : before) stale.push_back({g.index, 2.0, g.class_idx, 0.9, CellSource::observed});
  CHECK(evaluate_freed(stale, scene, 0.1).fraction == 0.0);
  const auto after = ground_truth_voxels(scene, 20.0, 0.1);
  std::vector<SnapshotEntry> fresh;
  for (const auto& g : after) fresh.push_back({g.index, 2.0, g.class_idx, 0.9, CellSource::observed});
  CHECK(evaluate_freed(fresh, scene, 0.1).fraction == 1.0);
}
