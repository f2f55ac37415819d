#include "semgrid/synthworld.hpp"

#include "semgrid/ini.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>

namespace semgrid {

namespace {

constexpr double kEps = 1e-9;

// Standing template in the body frame (forward, left, up), meters at scale 1.
const JointPositions kTemplate = {{
    {0.10, 0.00, 1.60}, {0.08, 0.03, 1.64},  {0.08, -0.03, 1.64}, {0.02, 0.07, 1.62},  {0.02, -0.07, 1.62},
    {0.00, 0.19, 1.42}, {0.00, -0.19, 1.42}, {0.00, 0.22, 1.15},  {0.00, -0.22, 1.15}, {0.05, 0.22, 0.90},
    {0.05, -0.22, 0.90}, {0.00, 0.11, 0.95}, {0.00, -0.11, 0.95}, {0.02, 0.11, 0.50},  {0.02, -0.11, 0.50},
    {0.00, 0.11, 0.08}, {0.00, -0.11, 0.08},
}};

constexpr double kStrideLength = 1.2;
constexpr double kLegSwing = 0.45;
constexpr double kArmSwing = 0.3;

// Rotation about the body's lateral axis; positive swings a hanging limb forward.
Vec3 swing(const Vec3& v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {v.x() * c - v.z() * s, v.y(), v.x() * s + v.z() * c};
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::optional<double> ray_box(const Ray& ray, const Vec3& lo, const Vec3& hi) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    const double d = ray.direction[i], o = ray.origin[i];
    if (std::abs(d) < 1e-15) {
      if (o < lo[i] || o > hi[i]) return std::nullopt;
      continue;
    }
    double a = (lo[i] - o) / d, b = (hi[i] - o) / d;
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
    if (t0 > t1) return std::nullopt;
  }
  if (t0 <= kEps) return std::nullopt;  // behind or starting inside
  return t0;
}

std::optional<double> ray_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
  const Vec3 oc = o - c;
  const double b = d.dot(oc), cc = oc.squaredNorm() - r * r;
  const double h = b * b - cc;
  if (h < 0) return std::nullopt;
  const double t = -b - std::sqrt(h);
  if (t <= kEps) return std::nullopt;
  return t;
}

std::optional<double> ray_capsule(const Ray& ray, const Capsule& cap) {
  const Vec3& o = ray.origin;
  const Vec3& d = ray.direction;
  const Vec3 ba = cap.b - cap.a;
  const double baba = ba.squaredNorm();
  if (baba < 1e-12) return ray_sphere(o, d, cap.a, cap.radius);
  const Vec3 oa = o - cap.a;
  const double bard = ba.dot(d), baoa = ba.dot(oa), rdoa = d.dot(oa), oaoa = oa.squaredNorm();
  const double qa = baba - bard * bard;
  std::optional<double> best;
  if (qa > 1e-12) {
    const double qb = baba * rdoa - baoa * bard;
    const double qc = baba * oaoa - baoa * baoa - cap.radius * cap.radius * baba;
    const double h = qb * qb - qa * qc;
    if (h >= 0) {
      const double t = (-qb - std::sqrt(h)) / qa;
      const double y = baoa + t * bard;
      if (y > 0 && y < baba && t > kEps) return t;
    }
  }
  for (const Vec3* c : {&cap.a, &cap.b}) {
    const auto t = ray_sphere(o, d, *c, cap.radius);
    if (t && (!best || *t < *best)) best = t;
  }
  return best;
}

double path_length(const std::vector<Vec2>& path) {
  double len = 0;
  for (std::size_t i = 1; i < path.size(); ++i) len += (path[i] - path[i - 1]).norm();
  return len;
}

// Position and heading after walking `s` meters along the polyline (0 <= s <= length).
std::pair<Vec2, Vec2> point_on_path(const std::vector<Vec2>& path, double s) {
  for (std::size_t i = 1; i < path.size(); ++i) {
    const Vec2 seg = path[i] - path[i - 1];
    const double len = seg.norm();
    if (len < 1e-12) continue;
    if (s <= len || i + 1 == path.size()) return {path[i - 1] + seg * (std::min(s, len) / len), seg / len};
    s -= len;
  }
  return {path.front(), Vec2(1, 0)};
}

struct LabeledSample {
  Vec3 p;
  int class_idx;
  int priority;
};

void sample_rect(const Vec3& origin, const Vec3& e1, const Vec3& e2, double spacing, int class_idx, int priority,
                 std::vector<LabeledSample>& out) {
  const int n1 = std::max(1, static_cast<int>(std::ceil(e1.norm() / spacing)));
  const int n2 = std::max(1, static_cast<int>(std::ceil(e2.norm() / spacing)));
  for (int i = 0; i <= n1; ++i)
    for (int j = 0; j <= n2; ++j)
      out.push_back({origin + e1 * (static_cast<double>(i) / n1) + e2 * (static_cast<double>(j) / n2), class_idx, priority});
}

std::vector<LabeledSample> labeled_surfaces(const Scene& scene, double t, double spacing, bool prior_only) {
  std::vector<LabeledSample> out;
  const double hx = scene.size_x / 2, hy = scene.size_y / 2, h = scene.height;
  if (scene.floor)
    sample_rect({-hx, -hy, 0}, {scene.size_x, 0, 0}, {0, scene.size_y, 0}, spacing, kFloorClass, 0, out);
  if (scene.walls) {
    sample_rect({-hx, -hy, 0}, {scene.size_x, 0, 0}, {0, 0, h}, spacing, kWallClass, 1, out);
    sample_rect({-hx, hy, 0}, {scene.size_x, 0, 0}, {0, 0, h}, spacing, kWallClass, 1, out);
    sample_rect({-hx, -hy, 0}, {0, scene.size_y, 0}, {0, 0, h}, spacing, kWallClass, 1, out);
    sample_rect({hx, -hy, 0}, {0, scene.size_y, 0}, {0, 0, h}, spacing, kWallClass, 1, out);
  }
  for (const auto& b : scene.boxes) {
    if (prior_only && !b.in_prior) continue;
    const Vec3 lo = b.lo_at(t), hi = b.hi_at(t), d = hi - lo;
    const Vec3 ex(d.x(), 0, 0), ey(0, d.y(), 0), ez(0, 0, d.z());
    for (const Vec3& base : {lo, Vec3(lo + ez)}) sample_rect(base, ex, ey, spacing, b.class_idx, 2, out);
    for (const Vec3& base : {lo, Vec3(lo + ey)}) sample_rect(base, ex, ez, spacing, b.class_idx, 2, out);
    for (const Vec3& base : {lo, Vec3(lo + ex)}) sample_rect(base, ey, ez, spacing, b.class_idx, 2, out);
  }
  return out;
}

}  // namespace

void Scene::validate() const {
  if (!(size_x > 0 && size_y > 0 && height > 0)) throw std::invalid_argument("scene: room size must be positive");
  const double hx = size_x / 2 + 1e-9, hy = size_y / 2 + 1e-9;
  for (const auto& b : boxes) {
    if (b.class_idx < 0 || b.class_idx >= static_cast<int>(kNumClasses))
      throw std::invalid_argument("scene: box '" + b.name + "' has an invalid class");
    if ((b.hi.array() <= b.lo.array()).any()) throw std::invalid_argument("scene: box '" + b.name + "' is empty");
    for (const double t : {0.0, std::numeric_limits<double>::infinity()}) {
      const Vec3 lo = b.lo_at(t), hi = b.hi_at(t);
      if (lo.x() < -hx || hi.x() > hx || lo.y() < -hy || hi.y() > hy || lo.z() < -1e-9 || hi.z() > height + 1e-9)
        throw std::invalid_argument("scene: box '" + b.name + "' leaves the room");
    }
  }
  for (const auto& p : persons) {
    if (p.path.empty()) throw std::invalid_argument("scene: person without path");
    if (p.speed < 0 || p.scale <= 0) throw std::invalid_argument("scene: person speed/scale invalid");
  }
}

std::optional<double> Scene::first_move_time() const {
  std::optional<double> first;
  for (const auto& b : boxes)
    if (b.move_time_s && (!first || *b.move_time_s < *first)) first = b.move_time_s;
  return first;
}

Scene parse_scene(std::istream& in, const std::string& source_name) {
  const auto ini = IniFile::parse(in, source_name);
  const auto classes = default_class_set();
  Scene scene;
  std::vector<std::string> sections;
  for (const auto& e : ini.entries())
    if (std::find(sections.begin(), sections.end(), e.section) == sections.end()) sections.push_back(e.section);

  auto vec = [&](const IniFile::Entry& e, std::size_t n) {
    std::vector<double> v;
    try {
      v = parse_numbers(e.value);
    } catch (const std::invalid_argument&) {
      ini.error(e, "expected numbers");
    }
    if (v.size() != n) ini.error(e, "expected " + std::to_string(n) + " numbers");
    return v;
  };
  auto vec3 = [&](const IniFile::Entry& e) {
    const auto v = vec(e, 3);
    return Vec3(v[0], v[1], v[2]);
  };

  for (const auto& sec : sections) {
    if (sec == "room") {
      ini.check_keys(sec, {"size", "walls", "floor", "seed"});
      if (const auto* e = ini.find(sec, "size")) {
        const auto v = vec(*e, 3);
        scene.size_x = v[0];
        scene.size_y = v[1];
        scene.height = v[2];
      }
      scene.walls = ini.get_bool(sec, "walls", true);
      scene.floor = ini.get_bool(sec, "floor", true);
      scene.seed = static_cast<std::uint64_t>(ini.get_int(sec, "seed", 1));
    } else if (sec == "noise") {
      ini.check_keys(sec, {"keypoint_px", "miss_rate", "p_occ_fail", "label_noise", "logit_margin", "depth_noise"});
      auto& n = scene.noise;
      n.keypoint_px = ini.get_double(sec, "keypoint_px", n.keypoint_px);
      n.miss_rate = ini.get_double(sec, "miss_rate", n.miss_rate);
      n.p_occ_fail = ini.get_double(sec, "p_occ_fail", n.p_occ_fail);
      n.label_noise = ini.get_double(sec, "label_noise", n.label_noise);
      n.logit_margin = ini.get_double(sec, "logit_margin", n.logit_margin);
      n.depth_noise = ini.get_bool(sec, "depth_noise", n.depth_noise);
    } else if (sec.rfind("box", 0) == 0) {
      ini.check_keys(sec, {"class", "min", "max", "prior", "move_at", "move_by"});
      SceneBox b;
      b.name = sec.size() > 4 ? sec.substr(4) : sec;
      const auto* ce = ini.find(sec, "class");
      if (!ce) throw std::runtime_error(source_name + ": [" + sec + "] needs a class");
      b.class_idx = classes.index_of(ce->value);
      if (b.class_idx < 0) ini.error(*ce, "unknown class '" + ce->value + "'");
      const auto* lo = ini.find(sec, "min");
      const auto* hi = ini.find(sec, "max");
      if (!lo || !hi) throw std::runtime_error(source_name + ": [" + sec + "] needs min and max");
      b.lo = vec3(*lo);
      b.hi = vec3(*hi);
      b.in_prior = ini.get_bool(sec, "prior", false);
      if (const auto* m = ini.find(sec, "move_at")) {
        b.move_time_s = ini.get_double(sec, "move_at", 0);
        const auto* by = ini.find(sec, "move_by");
        if (!by) ini.error(*m, "move_at requires move_by");
        b.move_offset = vec3(*by);
      }
      scene.boxes.push_back(b);
    } else if (sec.rfind("person", 0) == 0) {
      ini.check_keys(sec, {"path", "speed", "scale", "offset"});
      ScenePerson p;
      const auto* pe = ini.find(sec, "path");
      if (!pe) throw std::runtime_error(source_name + ": [" + sec + "] needs a path");
      std::vector<double> v;
      try {
        v = parse_numbers(pe->value);
      } catch (const std::invalid_argument&) {
        ini.error(*pe, "expected numbers");
      }
      if (v.empty() || v.size() % 2 != 0) ini.error(*pe, "expected x y pairs");
      for (std::size_t i = 0; i < v.size(); i += 2) p.path.emplace_back(v[i], v[i + 1]);
      p.speed = ini.get_double(sec, "speed", 0.0);
      p.scale = ini.get_double(sec, "scale", 1.0);
      p.start_offset_m = ini.get_double(sec, "offset", 0.0);
      scene.persons.push_back(p);
    } else {
      const auto& e = *std::find_if(ini.entries().begin(), ini.entries().end(),
                                    [&](const IniFile::Entry& x) { return x.section == sec; });
      ini.error(e, "unknown section [" + sec + "]");
    }
  }
  try {
    scene.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(source_name + ": " + e.what());
  }
  return scene;
}

Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  return parse_scene(in, path);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t sensor, std::uint64_t frame, std::uint64_t purpose) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ sensor);
  h = splitmix64(h ^ frame);
  return splitmix64(h ^ purpose);
}

JointPositions person_joints(const ScenePerson& person, double t) {
  const double len = path_length(person.path);
  double travelled = person.start_offset_m + person.speed * t;
  Vec2 pos = person.path.front();
  Vec2 heading(1, 0);
  if (person.path.size() >= 2 && len > 1e-12) {
    double s = std::fmod(travelled, 2 * len);
    if (s < 0) s += 2 * len;
    const bool back = s > len;
    auto [p, dir] = point_on_path(person.path, back ? 2 * len - s : s);
    pos = p;
    heading = back ? Vec2(-dir) : dir;
  }
  const bool walking = person.speed > 0;
  const double phase = walking ? 2 * std::numbers::pi * travelled / (kStrideLength * person.scale) : 0.0;
  const double sp = std::sin(phase), cp = std::cos(phase);
  const double leg_l = walking ? kLegSwing * sp : 0.0, leg_r = -leg_l;
  const double knee_l = walking ? 0.25 * (1 - cp) : 0.0, knee_r = walking ? 0.25 * (1 + cp) : 0.0;
  const double arm_l = walking ? -kArmSwing * sp : 0.0, arm_r = -arm_l;

  JointPositions body = kTemplate;
  auto idx = [](Joint j) { return static_cast<std::size_t>(j); };
  auto limb = [&](Joint root, Joint mid, Joint end, double a1, double a2) {
    const Vec3 upper = kTemplate[idx(mid)] - kTemplate[idx(root)];
    const Vec3 lower = kTemplate[idx(end)] - kTemplate[idx(mid)];
    body[idx(mid)] = body[idx(root)] + swing(upper, a1);
    body[idx(end)] = body[idx(mid)] + swing(lower, a1 - a2);
  };
  limb(kLeftHip, kLeftKnee, kLeftAnkle, leg_l, knee_l);
  limb(kRightHip, kRightKnee, kRightAnkle, leg_r, knee_r);
  limb(kLeftShoulder, kLeftElbow, kLeftWrist, arm_l, -0.2 * std::abs(arm_l));
  limb(kRightShoulder, kRightElbow, kRightWrist, arm_r, -0.2 * std::abs(arm_r));

  const Vec3 f(heading.x(), heading.y(), 0), l(-heading.y(), heading.x(), 0), up(0, 0, 1);
  const Vec3 root(pos.x(), pos.y(), 0);
  JointPositions out;
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    const Vec3& b = body[j];
    out[j] = root + person.scale * (b.x() * f + b.y() * l + b.z() * up);
  }
  return out;
}

std::vector<Capsule> person_capsules(const JointPositions& j, double scale) {
  auto at = [&](Joint x) { return j[static_cast<std::size_t>(x)]; };
  const Vec3 head = 0.5 * (at(kLeftEar) + at(kRightEar));
  const Vec3 neck = 0.5 * (at(kLeftShoulder) + at(kRightShoulder));
  const Vec3 pelvis = 0.5 * (at(kLeftHip) + at(kRightHip));
  const double s = scale;
  return {
      {head, head, 0.11 * s},
      {neck, head, 0.06 * s},
      {pelvis, neck, 0.16 * s},
      {at(kLeftShoulder), at(kLeftElbow), 0.05 * s},
      {at(kRightShoulder), at(kRightElbow), 0.05 * s},
      {at(kLeftElbow), at(kLeftWrist), 0.045 * s},
      {at(kRightElbow), at(kRightWrist), 0.045 * s},
      {at(kLeftHip), at(kLeftKnee), 0.08 * s},
      {at(kRightHip), at(kRightKnee), 0.08 * s},
      {at(kLeftKnee), at(kLeftAnkle), 0.06 * s},
      {at(kRightKnee), at(kRightAnkle), 0.06 * s},
  };
}

WorldState::WorldState(const Scene& scene, double t) : scene_(&scene), t_(t) {
  for (const auto& p : scene.persons) {
    joints_.push_back(person_joints(p, t));
    Body body;
    body.capsules = person_capsules(joints_.back(), p.scale);
    Vec3 lo = joints_.back()[0], hi = lo;
    for (const auto& c : body.capsules) {
      lo = lo.cwiseMin(c.a - Vec3::Constant(c.radius)).cwiseMin(c.b - Vec3::Constant(c.radius));
      hi = hi.cwiseMax(c.a + Vec3::Constant(c.radius)).cwiseMax(c.b + Vec3::Constant(c.radius));
    }
    body.center = 0.5 * (lo + hi);
    body.bound = 0.5 * (hi - lo).norm();
    bodies_.push_back(std::move(body));
  }
  for (const auto& b : scene.boxes) boxes_.emplace_back(b.lo_at(t), b.hi_at(t));
}

std::optional<SurfaceHit> WorldState::raycast(const Ray& ray, double max_range, int skip_person) const {
  std::optional<SurfaceHit> best;
  auto offer = [&](double r, SurfaceKind kind, int cls, int inst) {
    if (r > kEps && r < max_range && (!best || r < best->range)) best = SurfaceHit{r, kind, cls, inst};
  };
  const auto& sc = *scene_;
  const double hx = sc.size_x / 2, hy = sc.size_y / 2;
  const Vec3& o = ray.origin;
  const Vec3& d = ray.direction;
  if (sc.floor && d.z() < 0) {
    const double r = -o.z() / d.z();
    const Vec3 p = ray.at(r);
    if (std::abs(p.x()) <= hx && std::abs(p.y()) <= hy) offer(r, SurfaceKind::floor, kFloorClass, -1);
  }
  if (sc.walls) {
    for (int axis = 0; axis < 2; ++axis) {
      const double half = axis == 0 ? hx : hy, other = axis == 0 ? hy : hx;
      if (std::abs(d[axis]) < 1e-15) continue;
      const double plane = d[axis] > 0 ? half : -half;
      const double r = (plane - o[axis]) / d[axis];
      const Vec3 p = ray.at(r);
      if (std::abs(p[1 - axis]) <= other && p.z() >= 0 && p.z() <= sc.height) offer(r, SurfaceKind::wall, kWallClass, -1);
    }
  }
  for (std::size_t i = 0; i < boxes_.size(); ++i)
    if (const auto r = ray_box(ray, boxes_[i].first, boxes_[i].second))
      offer(*r, SurfaceKind::box, sc.boxes[i].class_idx, static_cast<int>(i));
  for (std::size_t i = 0; i < bodies_.size(); ++i) {
    if (static_cast<int>(i) == skip_person) continue;
    const auto& body = bodies_[i];
    // Cheap reject against the bounding sphere.
    const Vec3 oc = body.center - o;
    const double along = oc.dot(d);
    if ((oc - along * d).squaredNorm() > body.bound * body.bound) continue;
    if (along + body.bound < 0) continue;
    for (const auto& c : body.capsules)
      if (const auto r = ray_capsule(ray, c)) offer(*r, SurfaceKind::person, kPersonClass, static_cast<int>(i));
  }
  return best;
}

bool WorldState::segment_blocked(const Vec3& from, const Vec3& to, int skip_person) const {
  const double len = (to - from).norm();
  if (len < 1e-9) return false;
  return raycast(Ray(from, to - from), len - 1e-6, skip_person).has_value();
}

namespace {

double noisy_depth(double z, const CameraCalib& calib, std::mt19937_64* noise) {
  if (!noise || calib.depth_noise_sigma <= 0) return z;
  const double sigma = calib.depth_noise_sigma * (z / 4.0) * (z / 4.0);
  std::normal_distribution<double> g(0.0, sigma);
  const double d = z + g(*noise);
  return d > 0 ? d : 0.0;
}

}  // namespace

RenderedFrame render_frame(const WorldState& world, const CameraCalib& calib, std::uint64_t timestamp_us,
                           std::mt19937_64* noise, int stride) {
  if (stride < 1) throw std::invalid_argument("render_frame: stride must be >= 1");
  RenderedFrame f;
  f.stride = stride;
  f.depth = DepthImage(calib.width, calib.height, timestamp_us);
  const auto n = static_cast<std::size_t>(calib.width) * static_cast<std::size_t>(calib.height);
  f.label.assign(n, -1);
  f.instance.assign(n, -1);
  const Vec3 axis = calib.rotation.col(2);
  for (int y = 0; y < calib.height; y += stride) {
    for (int x = 0; x < calib.width; x += stride) {
      const Ray ray = pixel_ray(calib, x, y);
      const auto hit = world.raycast(ray);
      if (!hit) continue;
      const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(calib.width) + static_cast<std::size_t>(x);
      f.depth.depth[i] = static_cast<float>(noisy_depth(hit->range * ray.direction.dot(axis), calib, noise));
      f.label[i] = static_cast<std::int16_t>(hit->class_idx);
      f.instance[i] = hit->kind == SurfaceKind::box      ? hit->instance
                      : hit->kind == SurfaceKind::person ? kPersonInstanceBase + hit->instance
                                                         : -1;
    }
  }
  if (stride > 1) {
    for (int y = 0; y < calib.height; ++y)
      for (int x = 0; x < calib.width; ++x) {
        const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(calib.width) + static_cast<std::size_t>(x);
        const auto src = static_cast<std::size_t>(y - y % stride) * static_cast<std::size_t>(calib.width) +
                         static_cast<std::size_t>(x - x % stride);
        f.label[i] = f.label[src];
        f.instance[i] = f.instance[src];
      }
  }
  return f;
}

DepthImage render_depth(const WorldState& world, const CameraCalib& calib, std::uint64_t timestamp_us,
                        std::mt19937_64* noise, int stride) {
  return render_frame(world, calib, timestamp_us, noise, stride).depth;
}

void render_depth_pixels(const WorldState& world, const CameraCalib& calib, std::span<const std::pair<int, int>> pixels,
                         std::mt19937_64* noise, DepthImage& out) {
  if (out.width != calib.width || out.height != calib.height)
    throw std::invalid_argument("render_depth_pixels: image size does not match calibration");
  const Vec3 axis = calib.rotation.col(2);
  for (const auto& [x, y] : pixels) {
    if (x < 0 || y < 0 || x >= calib.width || y >= calib.height) continue;
    const Ray ray = pixel_ray(calib, x, y);
    const auto hit = world.raycast(ray);
    out.at(x, y) = hit ? static_cast<float>(noisy_depth(hit->range * ray.direction.dot(axis), calib, noise)) : 0.0f;
  }
}

SegmentationMask render_segmentation(const RenderedFrame& frame, const ObservationNoise& noise, std::mt19937_64& rng,
                                     int num_classes) {
  SegmentationMask mask(frame.depth.width, frame.depth.height, num_classes);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> other(1, num_classes - 1);
  const auto margin = static_cast<float>(noise.logit_margin);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(mask.width) + static_cast<std::size_t>(x);
      int cls = frame.label[i];
      if (cls < 0) continue;
      if (noise.label_noise > 0 && u01(rng) < noise.label_noise) cls = (cls + other(rng)) % num_classes;
      mask.pixel(x, y)[static_cast<std::size_t>(cls)] = margin;
    }
  return mask;
}

CameraCalib thermal_calib_of(const CameraCalib& color) {
  CameraCalib t = color;
  t.width = color.width / 2;
  t.height = color.height / 2;
  t.fx = color.fx / 2;
  t.fy = color.fy / 2;
  t.cx = (color.cx + 0.5) / 2 - 0.5;
  t.cy = (color.cy + 0.5) / 2 - 0.5;
  return t;
}

DetectionSet render_detections(const RenderedFrame& frame, const CameraCalib& calib, const DetectionOptions& options,
                               std::mt19937_64& rng) {
  struct Extent {
    int x0 = std::numeric_limits<int>::max(), y0 = std::numeric_limits<int>::max(), x1 = -1, y1 = -1;
    int count = 0;
    int class_idx = 0;
  };
  std::map<std::int32_t, Extent> extents;
  const int w = frame.depth.width;
  for (int y = 0; y < frame.depth.height; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x);
      const auto inst = frame.instance[i];
      if (inst < 0) continue;
      auto& e = extents[inst];
      e.x0 = std::min(e.x0, x);
      e.y0 = std::min(e.y0, y);
      e.x1 = std::max(e.x1, x);
      e.y1 = std::max(e.y1, y);
      ++e.count;
      e.class_idx = frame.label[i];
    }
  std::uniform_real_distribution<double> score(0.6, 0.95), u01(0.0, 1.0);
  DetectionSet out;
  for (const auto& [inst, e] : extents) {
    if (e.count < options.min_pixels) continue;
    if (e.class_idx == kFloorClass || e.class_idx == kWallClass || e.class_idx == kCeilingClass) continue;
    const PixelBox box{e.x0 - 0.5, e.y0 - 0.5, e.x1 + 0.5, e.y1 + 0.5};
    const bool person = inst >= kPersonInstanceBase;
    if (!person || u01(rng) < options.person_rate_rgb) out.detections.push_back({e.class_idx, score(rng), box, Modality::rgb});
    if (person && options.thermal && u01(rng) < options.person_rate_thermal) {
      const auto& th = *options.thermal;
      auto map_u = [&](double u) { return (u - calib.cx) * th.fx / calib.fx + th.cx; };
      auto map_v = [&](double v) { return (v - calib.cy) * th.fy / calib.fy + th.cy; };
      out.detections.push_back({kPersonClass, score(rng), {map_u(box.x0), map_v(box.y0), map_u(box.x1), map_v(box.y1)}, Modality::thermal});
    }
  }
  return out;
}

std::vector<SynthPersonKeypoints> render_keypoints(const WorldState& world, const CameraCalib& calib,
                                                   const ObservationNoise& noise, std::mt19937_64& rng) {
  std::vector<SynthPersonKeypoints> out;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto clamp_u = [&](double u) { return std::clamp(u, 0.0, calib.width - 1e-3); };
  auto clamp_v = [&](double v) { return std::clamp(v, 0.0, calib.height - 1e-3); };
  const Vec3 eye = calib.center();
  for (std::size_t p = 0; p < world.joints().size(); ++p) {
    SynthPersonKeypoints kp;
    kp.person_index = static_cast<std::uint32_t>(p);
    bool any = false;
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      const Vec3& x = world.joints()[p][j];
      const auto pr = project(calib, x);
      if (!pr) continue;
      kp.in_image[j] = any = true;
      kp.occluded[j] = world.segment_blocked(eye, x, static_cast<int>(p));
      double u = pr->u + noise.keypoint_px * gauss(rng);
      double v = pr->v + noise.keypoint_px * gauss(rng);
      const double roll = u01(rng), roll2 = u01(rng);
      double conf;
      if (!kp.occluded[j]) {
        if (roll < noise.miss_rate) continue;
        conf = 0.7 + 0.3 * roll2;
      } else {
        conf = 0.3 + 0.3 * roll2;
        if (roll < noise.p_occ_fail) {
          if (u01(rng) < 0.5) continue;
          const double angle = 2 * std::numbers::pi * u01(rng);
          const double mag = noise.occ_error_min_px + (noise.occ_error_max_px - noise.occ_error_min_px) * u01(rng);
          u += mag * std::cos(angle);
          v += mag * std::sin(angle);
        }
      }
      kp.joints[j] = Keypoint2p5D{clamp_u(u), clamp_v(v), conf, std::nullopt, std::nullopt, false};
    }
    if (any) out.push_back(kp);
  }
  return out;
}

bool joint_visible(const WorldState& world, const CameraCalib& calib, std::size_t person, int joint) {
  const Vec3& x = world.joints().at(person)[static_cast<std::size_t>(joint)];
  if (!project(calib, x)) return false;
  return !world.segment_blocked(calib.center(), x, static_cast<int>(person));
}

std::vector<Vec3> sample_surfaces(const Scene& scene, double t, double spacing, bool prior_only) {
  std::vector<Vec3> out;
  for (const auto& s : labeled_surfaces(scene, t, spacing, prior_only)) out.push_back(s.p);
  return out;
}

std::vector<GroundTruthVoxel> ground_truth_voxels(const Scene& scene, double t, double resolution) {
  std::map<VoxelIndex, std::pair<int, int>> cells;  // priority, class
  for (const auto& s : labeled_surfaces(scene, t, resolution / 4, false)) {
    const auto idx = voxel_index_of(s.p, resolution);
    auto [it, fresh] = cells.try_emplace(idx, s.priority, s.class_idx);
    if (!fresh && s.priority > it->second.first) it->second = {s.priority, s.class_idx};
  }
  std::vector<GroundTruthVoxel> out;
  out.reserve(cells.size());
  for (const auto& [idx, pc] : cells) out.push_back({idx, pc.second});
  return out;
}

}  // namespace semgrid
