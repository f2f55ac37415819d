#include "semgrid/backend.hpp"
#include "semgrid/semantics.hpp"
#include "semgrid/sensor_node.hpp"

#include "doctest.h"

#include <cmath>
#include <algorithm>
#include <map>
#include <random>
#include <set>

using namespace semgrid;

namespace {

const std::array<Vec3, kNumJoints> kStanding = {{
    {0.10, 0.00, 1.60}, {0.08, 0.03, 1.64},  {0.08, -0.03, 1.64}, {0.02, 0.07, 1.62},  {0.02, -0.07, 1.62},
    {0.00, 0.19, 1.42}, {0.00, -0.19, 1.42}, {0.00, 0.22, 1.15},  {0.00, -0.22, 1.15}, {0.05, 0.22, 0.90},
    {0.05, -0.22, 0.90}, {0.00, 0.11, 0.95}, {0.00, -0.11, 0.95}, {0.02, 0.11, 0.50},  {0.02, -0.11, 0.50},
    {0.00, 0.11, 0.08}, {0.00, -0.11, 0.08},
}};

std::array<Vec3, kNumJoints> person_at(const Vec3& base) {
  auto j = kStanding;
  for (auto& p : j) p += base;
  return j;
}

std::vector<CameraCalib> rig() {
  std::vector<CameraCalib> cams;
  const Vec3 eyes[] = {{1.5, 1.5, 2.5}, {-1.5, 1.5, 2.5}, {-1.5, -1.5, 2.5}, {1.5, -1.5, 2.5}};
  for (int i = 0; i < 4; ++i)
    cams.push_back(look_at(static_cast<std::uint16_t>(i + 1), 320, 240, 260, eyes[i], Vec3(0, 0, 1.0), 0.02));
  return cams;
}

PoseSet2p5D observe(const CameraCalib& cam, const std::vector<std::array<Vec3, kNumJoints>>& persons, std::uint64_t ts) {
  PoseSet2p5D set;
  set.sensor_id = cam.sensor_id;
  set.timestamp_us = ts;
  for (std::size_t i = 0; i < persons.size(); ++i) {
    PersonKeypoints p;
    p.person_id = static_cast<std::uint32_t>(i + 1);
    for (std::size_t j = 0; j < kNumJoints; ++j)
      if (const auto pr = project(cam, persons[i][j]))
        p.joints[j] = Keypoint2p5D{pr->u, pr->v, 0.9, pr->z_cam, 0.03, false};
    if (p.count() > 0) set.persons.push_back(p);
  }
  return set;
}

HelloMsg hello_of(const CameraCalib& cam, std::uint64_t fp) {
  HelloMsg h;
  h.class_set_fingerprint = fp;
  h.calib = cam;
  return h;
}

Backend connected_backend(Ablation ab, const std::vector<CameraCalib>& cams, std::span<const Vec3> prior = {}) {
  BackendConfig cfg;
  cfg.ablation = ab;
  cfg.class_fingerprint = default_class_set().fingerprint();
  Backend b(cfg, prior);
  for (const auto& c : cams) b.on_hello(c.sensor_id, hello_of(c, cfg.class_fingerprint), 0);
  return b;
}

std::vector<PoseSet2p5D> make_buffer(std::initializer_list<std::uint64_t> stamps) {
  std::vector<PoseSet2p5D> buf;
  for (auto ts : stamps) {
    PoseSet2p5D p;
    p.timestamp_us = ts;
    buf.push_back(p);
  }
  return buf;
}

}  // namespace

TEST_CASE("ablation names") {
  for (auto a : {Ablation::none, Ablation::fb, Ablation::fb_occ, Ablation::fb_occ_depth})
    CHECK(parse_ablation(to_string(a)) == a);
  CHECK_FALSE(parse_ablation("depth"));
  CHECK_FALSE(flags_of(Ablation::none).feedback);
  CHECK(flags_of(Ablation::fb).feedback);
  CHECK_FALSE(flags_of(Ablation::fb).occlusion);
  CHECK(flags_of(Ablation::fb_occ).occlusion);
  CHECK_FALSE(flags_of(Ablation::fb_occ).depth);
  CHECK(flags_of(Ablation::fb_occ_depth).depth);
}

TEST_CASE("sync window selection") {
  const auto exact = make_buffer({1'000'000});
  CHECK(sync_window_select(exact, 1'000'000, 25'000) == 0u);

  const auto far = make_buffer({960'000});
  CHECK_FALSE(sync_window_select(far, 1'000'000, 25'000));

  const auto straddle = make_buffer({990'000, 1'004'000, 1'020'000});
  CHECK(sync_window_select(straddle, 1'000'000, 25'000) == 1u);

  const auto tie = make_buffer({990'000, 1'010'000});
  CHECK(sync_window_select(tie, 1'000'000, 25'000) == 1u);

  CHECK(sync_window_select(make_buffer({975'000}), 1'000'000, 25'000) == 0u);
  CHECK_FALSE(sync_window_select(make_buffer({}), 1'000'000, 25'000));
}

TEST_CASE("handshake mismatches are refused with typed errors") {
  const auto cams = rig();
  BackendConfig cfg;
  cfg.class_fingerprint = 42;
  Backend b(cfg);

  auto h = hello_of(cams[0], 42);
  h.protocol_version = 7;
  try {
    b.on_hello(1, h, 0);
    FAIL("accepted a foreign version");
  } catch (const ProtocolError& e) {
    CHECK(e.code() == ProtocolErrc::version_mismatch);
  }
  try {
    b.on_hello(1, hello_of(cams[0], 43), 0);
    FAIL("accepted a foreign class set");
  } catch (const ProtocolError& e) {
    CHECK(e.code() == ProtocolErrc::fingerprint_mismatch);
  }
  CHECK(b.sensors().empty());
  try {
    b.on_message(1, observe(cams[0], {}, 0), 0);
    FAIL("accepted data before hello");
  } catch (const ProtocolError& e) {
    CHECK(e.code() == ProtocolErrc::not_registered);
  }
  b.on_hello(1, hello_of(cams[0], 42), 0);
  CHECK(b.sensors() == std::vector<std::uint16_t>{1});
}

TEST_CASE("zero sensors: empty snapshots at 1 Hz") {
  Backend b(BackendConfig{});
  std::size_t snapshots = 0;
  for (int k = 0; k < 90; ++k) {
    const auto r = b.tick(static_cast<std::uint64_t>(std::llround(k * 1e6 / 30.0)));
    CHECK(r.views == 0);
    CHECK(r.skeletons.empty());
    CHECK(r.feedback.empty());
    if (r.snapshot) {
      ++snapshots;
      CHECK(r.snapshot->cells.empty());
    }
  }
  CHECK(snapshots == 3);
}

TEST_CASE("four views fuse two persons and feed back to every sensor") {
  const auto cams = rig();
  const std::vector<std::array<Vec3, kNumJoints>> truth = {person_at(Vec3(0.5, 0.3, 0)), person_at(Vec3(-0.6, -0.4, 0))};
  for (auto ab : {Ablation::none, Ablation::fb, Ablation::fb_occ, Ablation::fb_occ_depth}) {
    auto b = connected_backend(ab, cams);
    for (const auto& c : cams) b.on_message(c.sensor_id, observe(c, truth, 1'000'000), 1'005'000);
    const auto r = b.tick(1'015'000);
    CHECK(r.views == 4);
    REQUIRE(r.skeletons.size() == 2);
    for (const auto& s : r.skeletons) {
      CHECK(s.timestamp_us == 1'000'000);
      const auto& t = truth[(*s.centroid()).x() > 0 ? 0 : 1];
      for (std::size_t j = 0; j < kNumJoints; ++j) {
        REQUIRE(s.joints[j]);
        CHECK((s.joints[j]->position - t[j]).norm() < 1e-6);
      }
    }
    CHECK(r.associations.size() == 8);
    if (ab == Ablation::none) {
      CHECK(r.feedback.empty());
    } else {
      REQUIRE(r.feedback.size() == 4);
      for (const auto& fb : r.feedback) {
        CHECK(fb.timestamp_us == 1'000'000);
        CHECK(fb.persons.size() == 2);
      }
    }
  }
}

TEST_CASE("a 50 ms clock offset on one sensor still groups persons") {
  const auto cams = rig();
  auto b = connected_backend(Ablation::fb_occ_depth, cams);
  for (int k = 0; k < 60; ++k) {
    const double t = k / 30.0;
    const std::vector<std::array<Vec3, kNumJoints>> truth = {person_at(Vec3(-0.8 + t, 0.4, 0)),
                                                            person_at(Vec3(0.6, -0.9 + 0.8 * t, 0))};
    const auto ts = static_cast<std::uint64_t>(std::llround(t * 1e6));
    for (const auto& c : cams) {
      const std::uint64_t stamp = c.sensor_id == 3 ? ts + 50'000 : ts;
      b.on_message(c.sensor_id, observe(c, truth, stamp), ts + 5'000);
    }
    const auto r = b.tick(ts + 15'000);
    if (k < 3) continue;  // the offset sensor has no in-window message yet
    REQUIRE(r.views == 4);
    CHECK(r.skeletons.size() == 2);
    std::map<std::uint32_t, std::set<std::uint16_t>> members;
    for (const auto& a : r.associations) members[a.person_id].insert(a.sensor_id);
    CHECK(members.size() == 2);
    for (const auto& [pid, sensors] : members) CHECK(sensors.size() == 4);
  }
}

TEST_CASE("stale sensors are left out") {
  const auto cams = rig();
  auto b = connected_backend(Ablation::fb, cams);
  const std::vector<std::array<Vec3, kNumJoints>> truth = {person_at(Vec3(0.2, 0.1, 0))};
  for (int k = 0; k < 150; ++k) {
    const auto ts = static_cast<std::uint64_t>(std::llround(k * 1e6 / 30.0));
    for (const auto& c : cams) {
      if (c.sensor_id == 2 && ts > 1'000'000) continue;  // sensor 2 goes silent after 1 s
      b.on_message(c.sensor_id, observe(c, truth, ts), ts + 5'000);
    }
    const auto r = b.tick(ts + 15'000);
    const bool stale = ts + 15'000 > 1'000'000 + 5'000 + 2'000'000;
    bool fed_two = false;
    for (const auto& fb : r.feedback) fed_two = fed_two || fb.sensor_id == 2;
    if (ts > 1'030'000) CHECK(r.views == 3);
    CHECK(fed_two == !stale);
    CHECK(r.skeletons.size() == 1);
  }
}

TEST_CASE("loop delay estimates converge within 50 ticks") {
  const auto cams = rig();
  const auto fp = default_class_set().fingerprint();
  Scene scene;
  scene.size_x = scene.size_y = 5.9;
  ScenePerson walker;
  walker.path = {Vec2(-1.0, 0.5), Vec2(1.0, 0.5)};
  scene.persons.push_back(walker);

  for (const bool jitter : {false, true}) {
    auto b = connected_backend(Ablation::fb_occ_depth, cams);
    std::vector<SensorNode> nodes;
    for (const auto& c : cams) {
      SensorConfig sc;
      sc.sensor_id = c.sensor_id;
      sc.calib = c;
      sc.use_feedback = sc.use_occlusion = true;
      nodes.emplace_back(sc, scene);
      b.on_hello(c.sensor_id, nodes.back().hello(fp), 0);
    }
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> jit(-2000, 2000);
    std::vector<double> true_delays;
    std::vector<std::pair<std::uint64_t, FeedbackMsg>> in_flight;
    for (std::uint64_t k = 0; k < 120; ++k) {
      const auto t_frame = nodes[0].frame_time_us(k);
      std::sort(in_flight.begin(), in_flight.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
      while (!in_flight.empty() && in_flight.front().first <= t_frame) {
        nodes[in_flight.front().second.sensor_id - 1].on_feedback(in_flight.front().second);
        in_flight.erase(in_flight.begin());
      }
      for (auto& n : nodes) {
        const FrameObservation obs{t_frame, {}, {}};
        n.step_with(k, obs, std::nullopt);
        while (auto m = n.outbox().pop()) {
          // The observation carries no persons; substitute a visible one so feedback exists.
          const auto& cam = cams[n.config().sensor_id - 1];
          const auto latency = static_cast<std::uint64_t>(5'000 + (jitter ? jit(rng) : 0));
          b.on_message(cam.sensor_id, observe(cam, {person_at(Vec3(0, 0, 0))}, message_timestamp(*m)), t_frame + latency);
        }
      }
      const auto r = b.tick(t_frame + 15'000);
      for (const auto& fb : r.feedback)
        in_flight.push_back({t_frame + 20'000 + static_cast<std::uint64_t>(jitter ? jit(rng) : 0), fb});
    }
    const auto& backend_hist = b.delay_history(1);
    const auto& sensor_hist = nodes[0].delay_history();
    REQUIRE(backend_hist.size() >= 50);
    REQUIRE(sensor_hist.size() >= 50);
    // Steady state: feedback from frame k reaches the sensor before frame k + 1.
    const double steady = 1.0 / 30.0;
    CHECK(std::abs(sensor_hist[49] - steady) < 1e-4);
    CHECK(std::abs(backend_hist[49] - steady) < 1e-4);
    for (std::size_t i = 0; i < std::min(backend_hist.size(), sensor_hist.size()); ++i)
      CHECK(std::abs(backend_hist[i] - sensor_hist[i]) < 1e-9);
  }
}

TEST_CASE("cloud integration order does not change occupied classes") {
  Scene scene;
  scene.size_x = scene.size_y = 5.9;
  scene.noise.depth_noise = false;
  SceneBox box;
  box.name = "cab";
  box.class_idx = 9;
  box.lo = Vec3(-0.45, -0.35, 0);
  box.hi = Vec3(0.55, 0.45, 1.2);
  scene.boxes.push_back(box);
  const auto cams = rig();
  std::vector<SemanticCloud> clouds;
  for (std::size_t i = 0; i < 2; ++i) {
    SensorConfig sc;
    sc.sensor_id = cams[i].sensor_id;
    sc.calib = cams[i];
    sc.cloud.outlier_k = 8;
    SyntheticCamera cam(scene, sc);
    clouds.push_back(build_semantic_cloud(cam.observe_cloud(0, 0), sc));
    REQUIRE(clouds.back().points.size() > 1000);
  }
  auto forward = connected_backend(Ablation::none, cams);
  auto backward = connected_backend(Ablation::none, cams);
  forward.on_message(1, clouds[0], 10);
  forward.on_message(2, clouds[1], 20);
  backward.on_message(2, clouds[1], 10);
  backward.on_message(1, clouds[0], 20);
  std::size_t compared = 0, agree = 0;
  for (const auto& [idx, cell] : forward.map().cells()) {
    const auto* other = backward.map().find(idx);
    REQUIRE(other);
    if (!cell.occupied() || !other->occupied()) continue;
    ++compared;
    agree += argmax_class(cell.dist).class_idx == argmax_class(other->dist).class_idx;
  }
  CHECK(compared > 100);
  CHECK(agree == compared);
}

TEST_CASE("joints matching occluded feedback are left out of triangulation") {
  const auto cams = rig();
  // A wall slab between camera 1 and the person.
  std::vector<Vec3> prior;
  for (double y = -0.5; y <= 1.3; y += 0.05)
    for (double z = 0.0; z <= 2.0; z += 0.05) prior.emplace_back(0.95, y, z);
  const std::vector<std::array<Vec3, kNumJoints>> truth = {person_at(Vec3(0.3, 0.3, 0))};

  for (auto ab : {Ablation::fb, Ablation::fb_occ}) {
    auto b = connected_backend(ab, cams, prior);
    for (const auto& c : cams) b.on_message(c.sensor_id, observe(c, truth, 0), 5'000);
    const auto first = b.tick(15'000);
    REQUIRE(first.feedback.size() == 4);
    std::size_t occluded = 0;
    for (const auto& fb : first.feedback)
      for (const auto& p : fb.persons)
        for (const auto& j : p.joints) occluded += (j && j->occluded) ? 1 : 0;
    if (ab == Ablation::fb) {
      CHECK(occluded == 0);
    } else {
      CHECK(occluded > 0);
    }

    // Sensor 1 reports the fed-back joints verbatim, as a sensor does for occluded joints.
    for (const auto& c : cams) {
      PoseSet2p5D set = observe(c, truth, 33'333);
      if (c.sensor_id == 1) {
        const auto& fb = first.feedback[0].persons.at(0);
        for (std::size_t j = 0; j < kNumJoints; ++j)
          if (fb.joints[j] && set.persons[0].joints[j]) {
            set.persons[0].joints[j]->u = fb.joints[j]->u;
            set.persons[0].joints[j]->v = fb.joints[j]->v;
          }
      }
      b.on_message(c.sensor_id, set, 38'333);
    }
    const auto second = b.tick(48'333);
    REQUIRE(second.skeletons.size() == 1);
    if (ab == Ablation::fb) {
      CHECK(b.stats().excluded_joints == 0);
    } else {
      CHECK(b.stats().excluded_joints == occluded);
      for (std::size_t j = 0; j < kNumJoints; ++j) {
        REQUIRE(second.skeletons[0].joints[j]);
        CHECK((second.skeletons[0].joints[j]->position - truth[0][j]).norm() < 0.01);
      }
    }
  }
}
