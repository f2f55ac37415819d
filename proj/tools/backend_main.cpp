#include "semgrid/backend.hpp"
#include "semgrid/evaluation.hpp"
#include "semgrid/net.hpp"
#include "semgrid/ply.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <poll.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace semgrid;

namespace {

volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }

struct Peer {
  Connection conn;
  std::optional<std::uint16_t> sensor;
};

// Written to a temporary name first so readers never see half a file.
template <typename Write>
void write_atomic(const fs::path& p, Write&& write) {
  const auto tmp = fs::path(p.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    write(out);
  }
  fs::rename(tmp, p);
}

void export_map(const fs::path& dir, const SnapshotMsg& snap, double resolution) {
  write_atomic(dir / "map_snapshot.bin", [&](std::ostream& out) {
    const auto bytes = encode(snap);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  });
  write_atomic(dir / "map.ply", [&](std::ostream& out) { write_map_ply(out, snap.cells, resolution); });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"backend: fuses poses and semantic clouds streamed by sensor nodes"};
  std::string listen_addr, prior_path, classes_path, export_dir, ablation_name = "fb-occ-depth";
  double duration = 0, fusion_lag_ms = 50;
  std::size_t max_send = 8u << 20;
  app.add_option("--listen", listen_addr, "host:port to accept sensors on")->required();
  app.add_option("--prior", prior_path, "Prior map points (PLY with x y z)")->required()->check(CLI::ExistingFile);
  app.add_option("--classes", classes_path, "Class set file")->required()->check(CLI::ExistingFile);
  app.add_option("--export-dir", export_dir, "Directory for skeleton logs and map snapshots")->required();
  app.add_option("--ablation", ablation_name, "none | fb | fb-occ | fb-occ-depth")
      ->capture_default_str()
      ->check(CLI::IsMember({"none", "fb", "fb-occ", "fb-occ-depth"}));
  app.add_option("--duration", duration, "Seconds to run, 0 = until interrupted")->capture_default_str();
  app.add_option("--max-send-bytes", max_send, "Send buffer bound per sensor")->capture_default_str();
  app.add_option("--fusion-lag-ms", fusion_lag_ms, "Each tick fuses the poses from this long ago")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::signal(SIGPIPE, SIG_IGN);
  try {
    const auto classes = load_class_set(classes_path);
    const auto ply = read_ply_file(prior_path);
    if (!ply.has("x") || !ply.has("y") || !ply.has("z")) throw std::runtime_error(prior_path + ": no x/y/z properties");
    std::vector<Vec3> prior(ply.size());
    for (std::size_t i = 0; i < prior.size(); ++i)
      prior[i] = Vec3(ply.column("x")[i], ply.column("y")[i], ply.column("z")[i]);

    BackendConfig cfg;
    cfg.ablation = *parse_ablation(ablation_name);
    cfg.class_fingerprint = classes.fingerprint();
    Backend backend(cfg, prior);

    const fs::path dir(export_dir);
    fs::create_directories(dir);
    std::ofstream skeletons(dir / "skeletons.csv"), associations(dir / "associations.csv");
    if (!skeletons || !associations) throw std::runtime_error("cannot write to " + dir.string());
    write_skeletons_csv(skeletons, {});
    write_associations_csv(associations, {});
    export_map(dir, SnapshotMsg{unix_time_us(), backend.map().snapshot()}, cfg.voxel_resolution);

    const int listen_fd = listen_tcp(parse_endpoint(listen_addr));
    std::cout << "backend listening on port " << local_port(listen_fd) << std::endl;

    std::map<int, Peer> peers;
    const auto start = unix_time_us();
    const auto period_us = static_cast<std::uint64_t>(1e6 / 30.0);
    auto next_tick = start + period_us;
    const auto lag_us = static_cast<std::uint64_t>(fusion_lag_ms * 1e3);
    std::size_t rejected = 0;

    auto drop = [&](int fd, const std::string& why) {
      auto it = peers.find(fd);
      if (it == peers.end()) return;
      if (it->second.sensor) backend.disconnect(*it->second.sensor);
      std::cerr << "backend: closing sensor " << (it->second.sensor ? std::to_string(*it->second.sensor) : "?")
                << ": " << why << '\n';
      peers.erase(it);
    };

    while (!g_stop) {
      const auto now = unix_time_us();
      if (duration > 0 && now - start >= static_cast<std::uint64_t>(duration * 1e6)) break;
      if (now >= next_tick) {
        // Sensors run on their own frame grids; fusing slightly in the past lets every
        // frame inside the sync window arrive first.
        auto r = backend.tick(now - lag_us);
        next_tick += period_us;
        if (next_tick <= now) next_tick = now + period_us;
        write_skeletons_csv_rows(skeletons, r.skeletons);
        write_associations_csv_rows(associations, r.associations);
        for (const auto& fb : r.feedback)
          for (auto& [fd, peer] : peers)
            if (peer.sensor == fb.sensor_id) peer.conn.send(fb);
        if (r.snapshot) export_map(dir, *r.snapshot, cfg.voxel_resolution);
      }

      std::vector<pollfd> fds{{listen_fd, POLLIN, 0}};
      for (auto& [fd, peer] : peers) fds.push_back({fd, static_cast<short>(POLLIN | (peer.conn.wants_write() ? POLLOUT : 0)), 0});
      const auto wait_us = next_tick > unix_time_us() ? next_tick - unix_time_us() : 0;
      if (poll(fds.data(), fds.size(), static_cast<int>(wait_us / 1000)) < 0 && errno != EINTR) break;

      if (fds[0].revents & POLLIN)
        for (int fd; (fd = accept_tcp(listen_fd)) >= 0;) peers.emplace(fd, Peer{Connection(fd, max_send), {}});
      for (std::size_t i = 1; i < fds.size(); ++i) {
        const int fd = fds[i].fd;
        auto it = peers.find(fd);
        if (it == peers.end()) continue;
        auto& peer = it->second;
        try {
          if ((fds[i].revents & (POLLIN | POLLHUP | POLLERR)) && !peer.conn.receive()) {
            drop(fd, "disconnected");
            continue;
          }
          const auto t = unix_time_us();
          while (!peer.conn.inbox().empty()) {
            auto msg = std::move(peer.conn.inbox().front());
            peer.conn.inbox().pop_front();
            const auto id = message_sensor(msg);
            if (!peer.sensor && !std::holds_alternative<HelloMsg>(msg))
              throw ProtocolError(ProtocolErrc::not_registered, "first message must be a hello");
            if (peer.sensor && id != *peer.sensor)
              throw ProtocolError(ProtocolErrc::not_registered, "sensor id changed on an open connection");
            backend.on_message(id, msg, t);
            peer.sensor = id;
          }
          if ((fds[i].revents & POLLOUT) && !peer.conn.flush()) drop(fd, "send failed");
        } catch (const ProtocolError& e) {
          ++rejected;
          drop(fd, e.what());
        }
      }
    }

    close_fd(listen_fd);
    peers.clear();
    export_map(dir, SnapshotMsg{unix_time_us(), backend.map().snapshot()}, cfg.voxel_resolution);
    const auto& st = backend.stats();
    nlohmann::json stats{{"ticks", st.ticks},
                         {"pose_messages", st.pose_messages},
                         {"cloud_messages", st.cloud_messages},
                         {"feedback_messages", st.feedback_messages},
                         {"snapshots", st.snapshots},
                         {"excluded_joints", st.excluded_joints},
                         {"rejected_connections", rejected},
                         {"map_cells", backend.map().size()}};
    write_atomic(dir / "stats.json", [&](std::ostream& out) { out << stats.dump(2) << '\n'; });
    std::cout << "backend: " << st.ticks << " ticks, " << st.pose_messages << " pose sets, " << st.cloud_messages
              << " clouds, " << st.feedback_messages << " feedback messages\n";
  } catch (const std::exception& e) {
    std::cerr << "backend: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
