#include "semgrid/simulation.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <istream>
#include <ostream>
#include <queue>
#include <stdexcept>

namespace semgrid {

namespace {

std::uint64_t to_us(double s) { return static_cast<std::uint64_t>(std::llround(s * 1e6)); }

struct Event {
  enum Kind { uplink = 0, downlink = 1, frame = 2, tick = 3 };
  std::uint64_t t = 0;
  Kind kind = frame;
  std::uint64_t seq = 0;
  std::uint64_t index = 0;  // frame or tick number
  std::uint16_t sensor = 0;
  std::vector<std::uint8_t> bytes;
};

struct EventLater {
  bool operator()(const Event& a, const Event& b) const {
    if (a.t != b.t) return a.t > b.t;
    if (a.kind != b.kind) return a.kind > b.kind;
    return a.seq > b.seq;
  }
};

std::size_t count_instants(double duration_s, double rate_hz) {
  const auto end = to_us(duration_s);
  std::size_t n = 0;
  while (to_us(static_cast<double>(n) / rate_hz) < end) ++n;
  return n;
}

struct Link {
  StreamDecoder decoder;
  std::uint64_t last_arrival = 0;
};

}  // namespace

const ObservationCache::Frame& ObservationCache::frame(SyntheticCamera& camera, const SensorConfig& config,
                                                       std::uint64_t k, std::uint64_t ts) {
  auto& frames = frames_[config.sensor_id];
  if (k < frames.size()) return frames[k];
  if (k != frames.size()) throw std::logic_error("observation cache: frames must be requested in order");
  const auto obs = camera.observe_frame(k, ts);
  Frame f;
  f.timestamp_us = obs.timestamp_us;
  f.persons = obs.persons;
  for (std::size_t i = 0; i < obs.depth.depth.size(); ++i)
    if (obs.depth.depth[i] != 0.0f) f.depth.emplace_back(static_cast<std::uint32_t>(i), obs.depth.depth[i]);
  frames.push_back(std::move(f));
  return frames.back();
}

const SemanticCloud& ObservationCache::cloud(const SyntheticCamera& camera, const SensorConfig& config,
                                             std::uint64_t k, std::uint64_t ts) {
  const auto key = std::make_pair(config.sensor_id, k);
  auto it = clouds_.find(key);
  if (it == clouds_.end()) it = clouds_.emplace(key, build_semantic_cloud(camera.observe_cloud(k, ts), config)).first;
  return it->second;
}

namespace {

struct Lane {
  Ablation ablation;
  std::unique_ptr<Backend> backend;
  std::vector<SensorNode> nodes;
  std::map<std::uint16_t, std::size_t> node_of;
  std::map<std::uint16_t, Link> up, down;
  SimulationResult result;
};

}  // namespace

std::vector<SimulationResult> run_ablations(const Scene& scene, const std::vector<CameraCalib>& cameras,
                                            const ClassSet& classes, const SimulationOptions& options,
                                            const std::vector<Ablation>& ablations, ObservationCache* cache) {
  const auto fingerprint = classes.fingerprint();
  const auto prior = sample_surfaces(scene, 0.0, options.prior_spacing_m, true);

  std::vector<Lane> lanes(ablations.size());
  for (std::size_t l = 0; l < lanes.size(); ++l) {
    auto& lane = lanes[l];
    lane.ablation = ablations[l];
    lane.result.prior = prior;
    BackendConfig bcfg = options.backend;
    bcfg.ablation = lane.ablation;
    bcfg.class_fingerprint = fingerprint;
    lane.backend = l == 0 ? std::make_unique<Backend>(bcfg, prior)
                          : std::make_unique<Backend>(bcfg, lanes[0].backend->shared_map());
    const auto flags = flags_of(lane.ablation);
    lane.nodes.reserve(cameras.size());
    for (const auto& cam : cameras) {
      SensorConfig sc = options.sensor;
      sc.sensor_id = cam.sensor_id;
      sc.calib = cam;
      sc.calib.sensor_id = cam.sensor_id;
      sc.use_feedback = flags.feedback;
      sc.use_occlusion = flags.occlusion;
      lane.node_of[cam.sensor_id] = lane.nodes.size();
      lane.nodes.emplace_back(sc, scene);
    }
  }
  std::vector<FrameObservation> scratch(cameras.size());
  for (std::size_t i = 0; i < cameras.size(); ++i)
    if (options.sensor.has_depth) scratch[i].depth = DepthImage(cameras[i].width, cameras[i].height);

  std::priority_queue<Event, std::vector<Event>, EventLater> queue;
  std::uint64_t seq = 0;
  const auto latency_us = to_us(options.link_latency_s);
  auto send = [&](std::size_t l, Event::Kind kind, std::uint16_t sensor, std::uint64_t now,
                  std::vector<std::uint8_t> bytes) {
    auto& lane = lanes[l];
    auto& link = (kind == Event::uplink ? lane.up : lane.down)[sensor];
    const auto arrival = std::max(now + latency_us, link.last_arrival);
    link.last_arrival = arrival;
    (kind == Event::uplink ? lane.result.bytes_up : lane.result.bytes_down) += bytes.size();
    queue.push(Event{arrival, kind, seq++, l, sensor, std::move(bytes)});
  };

  for (std::size_t l = 0; l < lanes.size(); ++l)
    for (auto& node : lanes[l].nodes) send(l, Event::uplink, node.config().sensor_id, 0, encode(node.hello(fingerprint)));
  const auto frames = count_instants(options.duration_s, options.sensor.pose_rate_hz);
  const auto ticks = count_instants(options.duration_s, options.fusion_rate_hz);
  for (std::size_t k = 0; k < frames; ++k)
    queue.push(Event{to_us(static_cast<double>(k) / options.sensor.pose_rate_hz), Event::frame, seq++, k, 0, {}});
  const auto offset_us = to_us(options.tick_offset_s);
  for (std::size_t j = 0; j < ticks; ++j)
    queue.push(Event{to_us(static_cast<double>(j) / options.fusion_rate_hz) + offset_us, Event::tick, seq++, j, 0, {}});

  const auto move_s = scene.first_move_time();
  std::uint64_t end_us = 0;
  while (!queue.empty()) {
    Event ev = queue.top();
    queue.pop();
    end_us = std::max(end_us, ev.t);
    switch (ev.kind) {
      case Event::uplink: {
        auto& lane = lanes[ev.index];
        auto& link = lane.up[ev.sensor];
        link.decoder.feed(ev.bytes);
        while (auto msg = link.decoder.next()) {
          lane.backend->on_message(ev.sensor, *msg, ev.t);
          if (!std::holds_alternative<SemanticCloud>(*msg) || options.record_clouds)
            lane.result.uplink.push_back(TimedMessage{ev.t, ev.sensor, std::move(*msg)});
        }
        break;
      }
      case Event::downlink: {
        auto& lane = lanes[ev.index];
        auto& link = lane.down[ev.sensor];
        link.decoder.feed(ev.bytes);
        while (auto msg = link.decoder.next())
          if (const auto* fb = std::get_if<FeedbackMsg>(&*msg)) lane.nodes[lane.node_of.at(ev.sensor)].on_feedback(*fb);
        break;
      }
      case Event::frame: {
        for (std::size_t i = 0; i < cameras.size(); ++i) {
          const ObservationCache::Frame* cached = nullptr;
          if (cache) {
            auto& node = lanes[0].nodes[i];
            cached = &cache->frame(node.camera(), node.config(), ev.index, node.frame_time_us(ev.index));
            for (const auto& [idx, d] : cached->depth) scratch[i].depth.depth[idx] = d;
            scratch[i].timestamp_us = cached->timestamp_us;
          }
          for (std::size_t l = 0; l < lanes.size(); ++l) {
            auto& node = lanes[l].nodes[i];
            const auto ts = node.frame_time_us(ev.index);
            const bool cloud_due = l == 0 && node.cloud_due(ev.index);
            if (!cached) {
              auto obs = node.camera().observe_frame(ev.index, ts);
              std::optional<SemanticCloud> cloud;
              if (cloud_due) cloud = build_semantic_cloud(node.camera().observe_cloud(ev.index, ts), node.config());
              node.step_with(ev.index, obs, cloud);
            } else {
              scratch[i].persons = cached->persons;
              std::optional<SemanticCloud> cloud;
              if (cloud_due) cloud = cache->cloud(node.camera(), node.config(), ev.index, ts);
              node.step_with(ev.index, scratch[i], cloud);
            }
            while (auto m = node.outbox().pop()) send(l, Event::uplink, node.config().sensor_id, ev.t, encode(*m));
            if (options.on_frame) options.on_frame(l, node, ev.index);
          }
          if (cached)
            for (const auto& [idx, d] : cached->depth) scratch[i].depth.depth[idx] = 0.0f;
        }
        break;
      }
      case Event::tick: {
        for (std::size_t l = 0; l < lanes.size(); ++l) {
          auto& lane = lanes[l];
          auto r = lane.backend->tick(ev.t);
          for (auto& fb : r.feedback) send(l, Event::downlink, fb.sensor_id, ev.t, encode(fb));
          if (r.snapshot && move_s && ev.t < to_us(*move_s)) {
            lane.result.premove_map = std::move(r.snapshot->cells);
            lane.result.premove_us = ev.t;
          }
          for (auto& sk : r.skeletons) lane.result.skeletons.push_back(std::move(sk));
          for (auto& a : r.associations) lane.result.associations.push_back(a);
        }
        break;
      }
    }
  }

  std::vector<SimulationResult> out;
  for (auto& lane : lanes) {
    auto& result = lane.result;
    result.end_us = end_us;
    result.final_map = lane.backend->map().snapshot();
    result.map = lane.backend->shared_map();
    result.backend = lane.backend->stats();
    for (auto& node : lane.nodes) {
      SensorRunStats s;
      s.sensor_id = node.config().sensor_id;
      s.node = node.stats();
      s.dropped_clouds = node.outbox().dropped_clouds();
      s.sensor_delay_s = node.delay_estimate_s();
      s.sensor_delay_history = node.delay_history();
      s.backend_delay_s = lane.backend->delay_estimate_s(s.sensor_id);
      s.backend_delay_history = lane.backend->delay_history(s.sensor_id);
      result.sensors.push_back(std::move(s));
    }
    out.push_back(std::move(result));
  }
  return out;
}

SimulationResult run_simulation(const Scene& scene, const std::vector<CameraCalib>& cameras, const ClassSet& classes,
                                const SimulationOptions& options, ObservationCache* cache) {
  return std::move(run_ablations(scene, cameras, classes, options, {options.ablation}, cache).front());
}

SimulationResult replay_uplink(const std::vector<TimedMessage>& uplink, const std::vector<Vec3>& prior,
                               const ClassSet& classes, const SimulationOptions& options, double first_move_s) {
  SimulationResult result;
  result.prior = prior;
  BackendConfig bcfg = options.backend;
  bcfg.ablation = options.ablation;
  bcfg.class_fingerprint = classes.fingerprint();
  Backend backend(bcfg, prior);
  const auto ticks = count_instants(options.duration_s, options.fusion_rate_hz);
  const auto offset_us = to_us(options.tick_offset_s);
  std::size_t next = 0;
  for (std::size_t j = 0; j < ticks; ++j) {
    const auto t = to_us(static_cast<double>(j) / options.fusion_rate_hz) + offset_us;
    for (; next < uplink.size() && uplink[next].recv_us <= t; ++next) {
      backend.on_message(uplink[next].sensor_id, uplink[next].msg, uplink[next].recv_us);
      result.uplink.push_back(uplink[next]);
    }
    auto r = backend.tick(t);
    if (r.snapshot && first_move_s > 0 && t < to_us(first_move_s)) {
      result.premove_map = std::move(r.snapshot->cells);
      result.premove_us = t;
    }
    for (auto& s : r.skeletons) result.skeletons.push_back(std::move(s));
    for (auto& a : r.associations) result.associations.push_back(a);
    result.end_us = t;
  }
  for (; next < uplink.size(); ++next) {
    backend.on_message(uplink[next].sensor_id, uplink[next].msg, uplink[next].recv_us);
    result.uplink.push_back(uplink[next]);
  }
  result.final_map = backend.map().snapshot();
  result.map = backend.shared_map();
  result.backend = backend.stats();
  for (const auto id : backend.sensors()) {
    SensorRunStats s;
    s.sensor_id = id;
    s.backend_delay_s = backend.delay_estimate_s(id);
    s.backend_delay_history = backend.delay_history(id);
    result.sensors.push_back(std::move(s));
  }
  return result;
}

void write_recording(std::ostream& out, const std::vector<TimedMessage>& messages) {
  for (const auto& m : messages) {
    unsigned char ts[8];
    for (int i = 0; i < 8; ++i) ts[i] = static_cast<unsigned char>(m.recv_us >> (8 * i));
    out.write(reinterpret_cast<const char*>(ts), 8);
    const auto bytes = encode(m.msg);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

std::vector<TimedMessage> read_recording(std::istream& in, const std::string& source_name) {
  std::vector<TimedMessage> out;
  std::vector<std::uint8_t> frame;
  for (std::size_t n = 0;; ++n) {
    unsigned char ts[8];
    in.read(reinterpret_cast<char*>(ts), 8);
    if (in.gcount() == 0) break;
    auto fail = [&](const std::string& what) {
      return std::runtime_error(source_name + ": record " + std::to_string(n) + ": " + what);
    };
    if (in.gcount() != 8) throw fail("truncated arrival time");
    std::uint64_t recv = 0;
    for (int i = 0; i < 8; ++i) recv |= static_cast<std::uint64_t>(ts[i]) << (8 * i);
    frame.resize(kFrameHeaderSize);
    in.read(reinterpret_cast<char*>(frame.data()), static_cast<std::streamsize>(kFrameHeaderSize));
    if (static_cast<std::size_t>(in.gcount()) != kFrameHeaderSize) throw fail("truncated frame header");
    try {
      const auto h = decode_header(frame);
      frame.resize(kFrameHeaderSize + h.payload_len);
      in.read(reinterpret_cast<char*>(frame.data() + kFrameHeaderSize), static_cast<std::streamsize>(h.payload_len));
      if (static_cast<std::size_t>(in.gcount()) != h.payload_len) throw fail("truncated payload");
      auto msg = decode(frame);
      out.push_back(TimedMessage{recv, h.sensor_id, std::move(msg)});
    } catch (const ProtocolError& e) {
      throw fail(e.what());
    }
  }
  return out;
}

}  // namespace semgrid
