#include "semgrid/backend.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace semgrid {

std::optional<Ablation> parse_ablation(std::string_view text) {
  if (text == "none") return Ablation::none;
  if (text == "fb") return Ablation::fb;
  if (text == "fb-occ") return Ablation::fb_occ;
  if (text == "fb-occ-depth") return Ablation::fb_occ_depth;
  return std::nullopt;
}

const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::fb: return "fb";
    case Ablation::fb_occ: return "fb-occ";
    case Ablation::fb_occ_depth: return "fb-occ-depth";
  }
  return "?";
}

AblationFlags flags_of(Ablation a) {
  switch (a) {
    case Ablation::none: return {false, false, false};
    case Ablation::fb: return {true, false, false};
    case Ablation::fb_occ: return {true, true, false};
    case Ablation::fb_occ_depth: return {true, true, true};
  }
  return {};
}

std::optional<std::size_t> sync_window_select(std::span<const PoseSet2p5D> buffer, std::uint64_t t_tick_us,
                                              std::uint64_t window_us) {
  std::optional<std::size_t> best;
  std::uint64_t best_gap = 0;
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const auto ts = buffer[i].timestamp_us;
    const std::uint64_t gap = ts > t_tick_us ? ts - t_tick_us : t_tick_us - ts;
    if (gap > window_us) continue;
    if (!best || gap < best_gap || (gap == best_gap && ts > buffer[*best].timestamp_us)) {
      best = i;
      best_gap = gap;
    }
  }
  return best;
}

Backend::Backend(BackendConfig config, std::span<const Vec3> prior_points)
    : config_(config),
      own_map_(std::make_shared<VoxelMap>(config.voxel_resolution, config.occupancy)),
      map_(own_map_),
      tracker_(config.pose) {
  if (!(config_.sync_window_s > 0)) throw std::invalid_argument("backend: sync window must be positive");
  if (!prior_points.empty()) own_map_->load_prior(prior_points);
}

Backend::Backend(BackendConfig config, std::shared_ptr<const VoxelMap> shared_map)
    : config_(config), map_(std::move(shared_map)), tracker_(config.pose) {
  if (!(config_.sync_window_s > 0)) throw std::invalid_argument("backend: sync window must be positive");
  if (!map_) throw std::invalid_argument("backend: null shared map");
}

void Backend::on_hello(std::uint16_t sensor_id, const HelloMsg& hello, std::uint64_t now_us) {
  if (hello.protocol_version != kProtocolVersion)
    throw ProtocolError(ProtocolErrc::version_mismatch, "sensor " + std::to_string(sensor_id) + " speaks version " +
                                                            std::to_string(hello.protocol_version));
  if (hello.class_set_fingerprint != config_.class_fingerprint)
    throw ProtocolError(ProtocolErrc::fingerprint_mismatch, "sensor " + std::to_string(sensor_id) + " uses another class set");
  SensorState st;
  st.calib = hello.calib;
  st.calib.sensor_id = sensor_id;
  st.last_recv_us = now_us;
  sensors_[sensor_id] = std::move(st);
}

void Backend::disconnect(std::uint16_t sensor_id) { sensors_.erase(sensor_id); }

std::vector<std::uint16_t> Backend::sensors() const {
  std::vector<std::uint16_t> ids;
  for (const auto& [id, st] : sensors_) ids.push_back(id);
  return ids;
}

std::optional<double> Backend::delay_estimate_s(std::uint16_t sensor_id) const {
  const auto it = sensors_.find(sensor_id);
  return it == sensors_.end() ? std::nullopt : it->second.delay_s;
}

const std::vector<double>& Backend::delay_history(std::uint16_t sensor_id) const {
  static const std::vector<double> empty;
  const auto it = sensors_.find(sensor_id);
  return it == sensors_.end() ? empty : it->second.delay_history;
}

void Backend::update_delay_estimate(SensorState& st, const PoseSet2p5D& pose, std::uint64_t now_us) {
  if (now_us >= pose.timestamp_us)
    st.latency_s = update_delay(st.latency_s, static_cast<double>(now_us - pose.timestamp_us) * 1e-6);
  const double latency = st.latency_s.value_or(0.0);
  // The newest feedback that could have reached the sensor before it took this frame.
  const SentFeedback* used = nullptr;
  for (const auto& s : st.sent)
    if (static_cast<double>(s.send_us) + latency * 1e6 <= static_cast<double>(pose.timestamp_us) &&
        s.data_ts_us <= pose.timestamp_us)
      used = &s;
  if (!used || (st.delay_fb_ts && *st.delay_fb_ts == used->data_ts_us)) return;
  st.delay_fb_ts = used->data_ts_us;
  st.delay_s = update_delay(st.delay_s, static_cast<double>(pose.timestamp_us - used->data_ts_us) * 1e-6);
  st.delay_history.push_back(*st.delay_s);
}

void Backend::on_message(std::uint16_t sensor_id, const Message& msg, std::uint64_t now_us) {
  if (const auto* hello = std::get_if<HelloMsg>(&msg)) {
    on_hello(sensor_id, *hello, now_us);
    return;
  }
  const auto it = sensors_.find(sensor_id);
  if (it == sensors_.end())
    throw ProtocolError(ProtocolErrc::not_registered, "sensor " + std::to_string(sensor_id) + " sent data before Hello");
  auto& st = it->second;
  st.last_recv_us = std::max(st.last_recv_us, now_us);
  if (const auto* pose = std::get_if<PoseSet2p5D>(&msg)) {
    ++stats_.pose_messages;
    update_delay_estimate(st, *pose, now_us);
    st.poses.push_back(*pose);
    while (st.poses.size() > config_.pose_buffer) st.poses.pop_front();
  } else if (const auto* cloud = std::get_if<SemanticCloud>(&msg)) {
    ++stats_.cloud_messages;
    if (own_map_) own_map_->integrate_cloud(*cloud, st.calib);
  } else {
    throw ProtocolError(ProtocolErrc::unknown_type, "backend does not accept this message type from sensors");
  }
}

PoseSet2p5D Backend::exclude_occluded(const PoseSet2p5D& view, const SensorState& st) {
  PoseSet2p5D out = view;
  if (st.recent_feedback.empty()) return out;
  const double r2 = config_.exclusion_px * config_.exclusion_px;
  for (auto& person : out.persons)
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      auto& kp = person.joints[j];
      if (!kp) continue;
      bool hit = false;
      for (const auto& fb : st.recent_feedback) {
        for (const auto& fp : fb.persons) {
          const auto& f = fp.joints[j];
          if (f && f->occluded && (f->u - kp->u) * (f->u - kp->u) + (f->v - kp->v) * (f->v - kp->v) < r2) {
            hit = true;
            break;
          }
        }
        if (hit) break;
      }
      if (hit) {
        kp.reset();
        ++stats_.excluded_joints;
      }
    }
  return out;
}

TickResult Backend::tick(std::uint64_t t_tick_us) {
  ++stats_.ticks;
  const auto flags = flags_of(config_.ablation);
  TickResult result;
  result.tick_us = t_tick_us;
  const auto window_us = static_cast<std::uint64_t>(std::llround(config_.sync_window_s * 1e6));
  const auto stale_us = static_cast<std::uint64_t>(std::llround(config_.stale_timeout_s * 1e6));

  std::vector<PoseSet2p5D> views;
  std::vector<CameraCalib> calibs;
  std::vector<std::uint16_t> active;
  std::uint64_t data_ts = 0;
  for (auto& [id, st] : sensors_) {
    if (t_tick_us > st.last_recv_us && t_tick_us - st.last_recv_us > stale_us) continue;
    active.push_back(id);
    const std::vector<PoseSet2p5D> buf(st.poses.begin(), st.poses.end());
    const auto sel = sync_window_select(buf, t_tick_us, window_us);
    if (!sel) continue;
    views.push_back(flags.occlusion ? exclude_occluded(buf[*sel], st) : buf[*sel]);
    views.back().sensor_id = id;
    calibs.push_back(st.calib);
    data_ts = std::max(data_ts, buf[*sel].timestamp_us);
  }
  result.views = views.size();

  if (!views.empty()) {
    const auto groups = associate(views, calibs, config_.pose, flags.depth);
    std::vector<Skeleton3D> raw;
    raw.reserve(groups.size());
    for (const auto& g : groups) raw.push_back(triangulate_group(g, views, calibs, config_.pose, flags.depth));
    std::vector<std::size_t> origin;
    result.skeletons = tracker_.update(std::move(raw), data_ts, &origin);
    for (std::size_t i = 0; i < result.skeletons.size(); ++i)
      for (const auto& ref : groups[origin[i]]) {
        const auto v = std::find_if(views.begin(), views.end(), [&](const PoseSet2p5D& p) { return p.sensor_id == ref.sensor_id; });
        result.associations.push_back({data_ts, result.skeletons[i].person_id, ref.sensor_id, ref.person_id, v->timestamp_us});
      }

    if (flags.feedback) {
      for (const auto id : active) {
        auto& st = sensors_.at(id);
        FeedbackMsg fb;
        fb.sensor_id = id;
        fb.timestamp_us = data_ts;
        fb.persons = make_feedback(result.skeletons, st.calib, flags.occlusion ? map_.get() : nullptr,
                                   st.delay_s.value_or(0.0), config_.pose);
        st.recent_feedback.push_back(fb);
        while (st.recent_feedback.size() > 4) st.recent_feedback.pop_front();
        st.sent.push_back({t_tick_us, data_ts});
        while (st.sent.size() > config_.feedback_history) st.sent.pop_front();
        result.feedback.push_back(std::move(fb));
        ++stats_.feedback_messages;
      }
    }
  }

  const auto period_us = static_cast<std::uint64_t>(std::llround(config_.snapshot_period_s * 1e6));
  if (!last_snapshot_us_ || t_tick_us >= *last_snapshot_us_ + period_us) {
    last_snapshot_us_ = t_tick_us;
    result.snapshot = SnapshotMsg{t_tick_us, map_->snapshot()};
    ++stats_.snapshots;
  }
  return result;
}

}  // namespace semgrid
