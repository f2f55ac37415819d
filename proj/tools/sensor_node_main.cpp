#include "semgrid/net.hpp"
#include "semgrid/sensor_node.hpp"

#include <CLI11.hpp>

#include <poll.h>

#include <csignal>
#include <iostream>
#include <thread>

using namespace semgrid;

namespace {

volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }

int connect_with_retry(const Endpoint& ep, double wait_s) {
  const auto deadline = unix_time_us() + static_cast<std::uint64_t>(wait_s * 1e6);
  for (;;) {
    try {
      return connect_tcp(ep);
    } catch (const std::runtime_error&) {
      if (unix_time_us() >= deadline || g_stop) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sensor-node: one simulated smart edge sensor streaming to a backend"};
  std::string config_path, backend_addr, classes_path;
  double duration = -1, connect_wait = 5.0;
  app.add_option("--config", config_path, "Sensor INI file")->required()->check(CLI::ExistingFile);
  app.add_option("--backend", backend_addr, "Backend host:port")->required();
  app.add_option("--classes", classes_path, "Class set file (default: built-in set)")->check(CLI::ExistingFile);
  app.add_option("--duration", duration, "Seconds to run (default: duration_s from the config, 0 = until interrupted)");
  app.add_option("--connect-wait", connect_wait, "Seconds to keep retrying the connection")->capture_default_str();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  try {
    const auto file = load_sensor_config(config_path);
    const auto scene = load_scene(file.scene_path);
    const ClassSet classes = classes_path.empty() ? default_class_set() : load_class_set(classes_path);
    const Endpoint ep = parse_endpoint(backend_addr);
    const double run_s = duration >= 0 ? duration : file.duration_s;

    SensorNode node(file.config, scene);
    Connection conn(connect_with_retry(ep, connect_wait));
    // Frame times count from the start of this process; the wire carries Unix time.
    const auto epoch = static_cast<std::int64_t>(unix_time_us());
    conn.send(node.hello(classes.fingerprint()));

    std::uint64_t k = 0;
    std::size_t skipped = 0;
    while (!g_stop) {
      const auto elapsed = static_cast<std::int64_t>(unix_time_us()) - epoch;
      const auto due = static_cast<std::int64_t>(node.frame_time_us(k));
      if (run_s > 0 && due >= static_cast<std::int64_t>(run_s * 1e6)) break;
      if (elapsed >= due) {
        // Fall behind by more than a frame and the late frames are dropped.
        while (static_cast<std::int64_t>(node.frame_time_us(k + 1)) <= elapsed) {
          ++k;
          ++skipped;
        }
        node.step(k++);
        while (auto m = node.outbox().pop()) {
          shift_timestamps(*m, epoch);
          conn.send(*m);
        }
      }
      pollfd pfd{conn.fd(), static_cast<short>(POLLIN | (conn.wants_write() ? POLLOUT : 0)), 0};
      const auto now = static_cast<std::int64_t>(unix_time_us()) - epoch;
      const auto wait_ms = std::max<std::int64_t>(0, (static_cast<std::int64_t>(node.frame_time_us(k)) - now) / 1000);
      if (poll(&pfd, 1, static_cast<int>(std::min<std::int64_t>(wait_ms, 100))) < 0 && errno != EINTR) break;
      if (pfd.revents & (POLLERR | POLLHUP)) {
        std::cerr << "sensor-node: backend closed the connection\n";
        break;
      }
      if ((pfd.revents & POLLIN) && !conn.receive()) {
        std::cerr << "sensor-node: backend closed the connection\n";
        break;
      }
      if ((pfd.revents & POLLOUT) && !conn.flush()) break;
      while (!conn.inbox().empty()) {
        auto msg = std::move(conn.inbox().front());
        conn.inbox().pop_front();
        if (auto* fb = std::get_if<FeedbackMsg>(&msg)) {
          shift_timestamps(msg, -epoch);
          node.on_feedback(*fb);
        }
      }
      conn.flush();
    }
    for (int i = 0; i < 50 && conn.wants_write() && conn.flush(); ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    const auto& st = node.stats();
    std::cout << "sensor " << file.config.sensor_id << ": " << st.frames << " frames, " << st.pose_messages
              << " pose sets, " << st.cloud_messages << " clouds, " << st.feedback_received << " feedback, " << skipped
              << " frames skipped, " << conn.dropped() << " messages dropped\n";
  } catch (const std::exception& e) {
    std::cerr << "sensor-node: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
