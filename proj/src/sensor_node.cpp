#include "semgrid/sensor_node.hpp"

#include "semgrid/ini.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

namespace semgrid {

namespace {

constexpr std::uint64_t kStreamKeypoints = 1;
constexpr std::uint64_t kStreamDepthPatch = 2;
constexpr std::uint64_t kStreamCloudDepth = 3;
constexpr std::uint64_t kStreamSegmentation = 4;
constexpr std::uint64_t kStreamDetections = 5;

double median_of(std::vector<double>& v) {
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
  const double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2)));
}

double median_joint_distance(const PersonKeypoints& local, const FeedbackPose& fb) {
  std::vector<double> d;
  for (std::size_t j = 0; j < kNumJoints; ++j)
    if (local.joints[j] && fb.joints[j]) d.push_back(std::hypot(local.joints[j]->u - fb.joints[j]->u, local.joints[j]->v - fb.joints[j]->v));
  if (d.empty()) return std::numeric_limits<double>::infinity();
  return median_of(d);
}

}  // namespace

void SensorConfig::validate() const {
  if (!(pose_rate_hz > 0) || !(cloud_rate_hz > 0) || !(detector_period_s > 0))
    throw std::invalid_argument("sensor config: rates must be positive");
  if (cloud_rate_hz > pose_rate_hz) throw std::invalid_argument("sensor config: cloud_rate_hz exceeds pose_rate_hz");
  if (kappa_fb <= 0 || kappa_fb >= 1) throw std::invalid_argument("sensor config: kappa_fb must be in (0, 1)");
  if (depth_stride < 1) throw std::invalid_argument("sensor config: depth_stride must be >= 1");
  if (cloud_queue_capacity == 0) throw std::invalid_argument("sensor config: queue_capacity must be >= 1");
  calib.validate();
}

SensorConfigFile load_sensor_config(const std::string& path) {
  const auto ini = IniFile::load(path);
  ini.check_keys("", {"sensor_id", "calibration", "scene", "pose_rate_hz", "cloud_rate_hz", "detector_period_s",
                      "has_depth", "use_feedback", "use_occlusion", "kappa_fb", "depth_stride", "thermal",
                      "queue_capacity", "duration_s"});
  for (const auto& e : ini.entries())
    if (!e.section.empty()) ini.error(e, "sections are not used in sensor configs");
  const auto base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };
  SensorConfigFile out;
  auto& c = out.config;
  const long long id = ini.get_int("", "sensor_id", 1);
  if (id < 0 || id > 0xFFFF) ini.error(*ini.find("", "sensor_id"), "out of range");
  c.sensor_id = static_cast<std::uint16_t>(id);
  const auto calibs = load_calibrations(resolve(ini.require("", "calibration")));
  const auto it = std::find_if(calibs.begin(), calibs.end(), [&](const CameraCalib& k) { return k.sensor_id == c.sensor_id; });
  if (it == calibs.end()) throw std::runtime_error(path + ": no calibration for sensor " + std::to_string(c.sensor_id));
  c.calib = *it;
  c.pose_rate_hz = ini.get_double("", "pose_rate_hz", c.pose_rate_hz);
  c.cloud_rate_hz = ini.get_double("", "cloud_rate_hz", c.cloud_rate_hz);
  c.detector_period_s = ini.get_double("", "detector_period_s", c.detector_period_s);
  c.has_depth = ini.get_bool("", "has_depth", c.has_depth);
  c.use_feedback = ini.get_bool("", "use_feedback", c.use_feedback);
  c.use_occlusion = ini.get_bool("", "use_occlusion", c.use_occlusion);
  c.kappa_fb = ini.get_double("", "kappa_fb", c.kappa_fb);
  c.depth_stride = static_cast<int>(ini.get_int("", "depth_stride", c.depth_stride));
  c.thermal = ini.get_bool("", "thermal", c.thermal);
  c.cloud_queue_capacity = static_cast<std::size_t>(ini.get_int("", "queue_capacity", static_cast<long long>(c.cloud_queue_capacity)));
  out.scene_path = resolve(ini.require("", "scene"));
  out.duration_s = ini.get_double("", "duration_s", 0.0);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return out;
}

std::optional<std::pair<double, double>> estimate_keypoint_depth(const DepthImage& depth, double u, double v,
                                                                 double sigma_floor) {
  const int cx = static_cast<int>(std::lround(u)), cy = static_cast<int>(std::lround(v));
  std::vector<double> vals;
  vals.reserve(25);
  for (int y = cy - 2; y <= cy + 2; ++y)
    for (int x = cx - 2; x <= cx + 2; ++x) {
      if (x < 0 || y < 0 || x >= depth.width || y >= depth.height) continue;
      const float d = depth.at(x, y);
      if (d > 0 && std::isfinite(d)) vals.push_back(d);
    }
  if (vals.empty()) return std::nullopt;
  auto work = vals;
  const double med = median_of(work);
  for (auto& x : vals) x = std::abs(x - med);
  const double mad = median_of(vals) * 1.4826;
  return std::make_pair(med, std::max(mad, sigma_floor));
}

PoseSet2p5D process_frame(const FrameObservation& obs, const std::vector<FeedbackPose>* feedback,
                          const SensorConfig& config) {
  PoseSet2p5D out;
  out.sensor_id = config.sensor_id;
  out.timestamp_us = obs.timestamp_us;
  out.persons = obs.persons;
  const double kappa = config.kappa_fb;

  if (feedback && (config.use_feedback || config.use_occlusion)) {
    std::vector<bool> taken(out.persons.size(), false);
    for (const auto& fb : *feedback) {
      std::optional<std::size_t> match;
      double best = config.person_match_px;
      for (std::size_t i = 0; i < taken.size(); ++i) {
        if (taken[i]) continue;
        const double d = median_joint_distance(out.persons[i], fb);
        if (d < best) {
          best = d;
          match = i;
        }
      }
      if (match) {
        taken[*match] = true;
        auto& person = out.persons[*match];
        for (std::size_t j = 0; j < kNumJoints; ++j) {
          if (!fb.joints[j]) continue;
          const auto& f = *fb.joints[j];
          auto& local = person.joints[j];
          if (config.use_occlusion && f.occluded) {
            local = Keypoint2p5D{f.u, f.v, kappa, std::nullopt, std::nullopt, true};
          } else if (config.use_feedback) {
            if (!local) {
              local = Keypoint2p5D{f.u, f.v, kappa, std::nullopt, std::nullopt, false};
            } else if (std::hypot(local->u - f.u, local->v - f.v) <= config.feedback_match_px) {
              const double w = local->confidence;
              local->u = (w * local->u + kappa * f.u) / (w + kappa);
              local->v = (w * local->v + kappa * f.v) / (w + kappa);
            }
          }
        }
        continue;
      }
      // Persons hidden from this view entirely come back from feedback alone.
      if (!config.use_occlusion) continue;
      PersonKeypoints added;
      added.person_id = kFeedbackOnlyPersonBit | fb.person_id;
      bool all_occluded = true, any = false;
      for (std::size_t j = 0; j < kNumJoints; ++j) {
        if (!fb.joints[j]) continue;
        any = true;
        all_occluded = all_occluded && fb.joints[j]->occluded;
        added.joints[j] = Keypoint2p5D{fb.joints[j]->u, fb.joints[j]->v, kappa, std::nullopt, std::nullopt, true};
      }
      if (any && all_occluded) out.persons.push_back(added);
    }
  }

  if (config.has_depth && obs.depth.width > 0) {
    for (auto& person : out.persons)
      for (auto& kp : person.joints) {
        if (!kp || kp->occluded_by_feedback) continue;
        if (const auto d = estimate_keypoint_depth(obs.depth, kp->u, kp->v, config.calib.depth_noise_sigma)) {
          kp->depth = d->first;
          kp->depth_sigma = d->second;
        }
      }
  }
  return out;
}

SemanticCloud build_semantic_cloud(const CloudObservation& obs, const SensorConfig& config) {
  if (!config.has_depth) throw std::logic_error("build_semantic_cloud: sensor has no depth");
  SemanticCloud cloud;
  if (obs.depth.width == 0 || obs.depth.height == 0) {
    cloud.sensor_id = config.sensor_id;
    cloud.timestamp_us = obs.depth.timestamp_us;
    return cloud;
  }
  FusionOptions fusion;
  if (config.thermal) fusion.thermal_calib = thermal_calib_of(config.calib);
  cloud = build_cloud(obs.depth, config.calib, obs.mask, obs.detections, config.cloud, fusion);
  cloud.sensor_id = config.sensor_id;
  return cloud;
}

SyntheticCamera::SyntheticCamera(const Scene& scene, const SensorConfig& config) : scene_(&scene), config_(config) {}

FrameObservation SyntheticCamera::observe_frame(std::uint64_t frame_index, std::uint64_t timestamp_us) {
  const double t = static_cast<double>(timestamp_us) * 1e-6;
  const WorldState world(*scene_, t);
  std::mt19937_64 rng(stream_seed(scene_->seed, config_.sensor_id, frame_index, kStreamKeypoints));
  const auto kps = render_keypoints(world, config_.calib, scene_->noise, rng);

  const auto period_us = static_cast<std::uint64_t>(std::llround(config_.detector_period_s * 1e6));
  if (!last_detector_us_ || timestamp_us >= *last_detector_us_ + period_us) {
    last_detector_us_ = timestamp_us;
    tracked_.clear();
    for (const auto& p : kps) {
      int visible = 0;
      for (std::size_t j = 0; j < kNumJoints; ++j) visible += p.in_image[j] && !p.occluded[j];
      if (visible >= 3) tracked_.push_back(p.person_index);
    }
  } else {
    // Tracks end when the person leaves the image.
    std::erase_if(tracked_, [&](std::uint32_t idx) {
      return std::none_of(kps.begin(), kps.end(), [&](const SynthPersonKeypoints& p) { return p.person_index == idx; });
    });
  }

  FrameObservation obs;
  obs.timestamp_us = timestamp_us;
  std::vector<std::pair<int, int>> patch;
  for (const auto& p : kps) {
    if (std::find(tracked_.begin(), tracked_.end(), p.person_index) == tracked_.end()) continue;
    PersonKeypoints person;
    person.person_id = p.person_index + 1;
    person.joints = p.joints;
    if (person.count() == 0) continue;
    for (const auto& kp : person.joints) {
      if (!kp) continue;
      const int cx = static_cast<int>(std::lround(kp->u)), cy = static_cast<int>(std::lround(kp->v));
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) patch.emplace_back(cx + dx, cy + dy);
    }
    obs.persons.push_back(person);
  }
  if (config_.has_depth) {
    std::sort(patch.begin(), patch.end());
    patch.erase(std::unique(patch.begin(), patch.end()), patch.end());
    obs.depth = DepthImage(config_.calib.width, config_.calib.height, timestamp_us);
    std::mt19937_64 drng(stream_seed(scene_->seed, config_.sensor_id, frame_index, kStreamDepthPatch));
    render_depth_pixels(world, config_.calib, patch, scene_->noise.depth_noise ? &drng : nullptr, obs.depth);
  }
  return obs;
}

CloudObservation SyntheticCamera::observe_cloud(std::uint64_t frame_index, std::uint64_t timestamp_us) const {
  CloudObservation obs;
  if (!config_.has_depth) return obs;
  const WorldState world(*scene_, static_cast<double>(timestamp_us) * 1e-6);
  std::mt19937_64 drng(stream_seed(scene_->seed, config_.sensor_id, frame_index, kStreamCloudDepth));
  const auto frame = render_frame(world, config_.calib, timestamp_us, scene_->noise.depth_noise ? &drng : nullptr,
                                  config_.depth_stride);
  std::mt19937_64 srng(stream_seed(scene_->seed, config_.sensor_id, frame_index, kStreamSegmentation));
  obs.mask = render_segmentation(frame, scene_->noise, srng);
  std::mt19937_64 dets_rng(stream_seed(scene_->seed, config_.sensor_id, frame_index, kStreamDetections));
  DetectionOptions dopt;
  if (config_.thermal) dopt.thermal = thermal_calib_of(config_.calib);
  obs.detections = render_detections(frame, config_.calib, dopt, dets_rng);
  obs.depth = frame.depth;
  return obs;
}

void OutboundQueue::push(Message msg) {
  if (!std::holds_alternative<SemanticCloud>(msg)) {
    priority_.push_back(std::move(msg));
    return;
  }
  if (clouds_.size() >= cloud_capacity_) {
    clouds_.pop_front();
    ++dropped_;
  }
  clouds_.push_back(std::move(msg));
}

std::optional<Message> OutboundQueue::pop() {
  auto& q = !priority_.empty() ? priority_ : clouds_;
  if (q.empty()) return std::nullopt;
  Message m = std::move(q.front());
  q.pop_front();
  return m;
}

SensorNode::SensorNode(SensorConfig config, const Scene& scene)
    : config_(std::move(config)), camera_(scene, config_), outbox_(config_.cloud_queue_capacity) {
  config_.validate();
}

HelloMsg SensorNode::hello(std::uint64_t class_fingerprint) const {
  HelloMsg h;
  h.class_set_fingerprint = class_fingerprint;
  h.calib = config_.calib;
  h.calib.sensor_id = config_.sensor_id;
  return h;
}

void SensorNode::on_feedback(const FeedbackMsg& msg) {
  ++stats_.feedback_received;
  if (!feedback_ || msg.timestamp_us >= feedback_->timestamp_us) feedback_ = msg;
}

std::uint64_t SensorNode::frame_time_us(std::uint64_t frame_index) const {
  return static_cast<std::uint64_t>(std::llround(static_cast<double>(frame_index) * 1e6 / config_.pose_rate_hz));
}

bool SensorNode::cloud_due(std::uint64_t frame_index) const {
  if (!config_.has_depth) return false;
  if (frame_index == 0) return true;
  const double ratio = config_.cloud_rate_hz / config_.pose_rate_hz;
  return std::floor(static_cast<double>(frame_index) * ratio + 1e-9) >
         std::floor(static_cast<double>(frame_index - 1) * ratio + 1e-9);
}

void SensorNode::step(std::uint64_t frame_index) {
  const auto ts = frame_time_us(frame_index);
  const auto obs = camera_.observe_frame(frame_index, ts);
  std::optional<SemanticCloud> cloud;
  if (cloud_due(frame_index)) cloud = build_semantic_cloud(camera_.observe_cloud(frame_index, ts), config_);
  step_with(frame_index, obs, cloud);
}

void SensorNode::step_with(std::uint64_t frame_index, const FrameObservation& obs,
                           const std::optional<SemanticCloud>& cloud) {
  (void)frame_index;
  if (stats_.frames > 0 && obs.timestamp_us < last_ts_)
    throw std::invalid_argument("sensor node: frame timestamps must not decrease");
  last_ts_ = obs.timestamp_us;
  ++stats_.frames;

  const std::vector<FeedbackPose>* fb = nullptr;
  if (feedback_ && feedback_->timestamp_us <= obs.timestamp_us) {
    const double age = static_cast<double>(obs.timestamp_us - feedback_->timestamp_us) * 1e-6;
    if (!measured_fb_ts_ || *measured_fb_ts_ != feedback_->timestamp_us) {
      // The first frame to see a feedback message closes that loop.
      measured_fb_ts_ = feedback_->timestamp_us;
      delay_s_ = update_delay(delay_s_, age);
      delay_history_.push_back(*delay_s_);
    }
    if (age <= config_.feedback_timeout_s) {
      fb = &feedback_->persons;
      ++stats_.feedback_used;
    }
  }
  last_output_ = process_frame(obs, fb, config_);
  outbox_.push(last_output_);
  ++stats_.pose_messages;
  if (cloud) {
    outbox_.push(*cloud);
    ++stats_.cloud_messages;
  }
}

}  // namespace semgrid
