#include "semgrid/evaluation.hpp"
#include "semgrid/ply.hpp"
#include "semgrid/simulation.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace semgrid;

namespace {

// Bad input data rather than bad usage.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  const auto s = read_text(p);
  return {s.begin(), s.end()};
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

json stats_json(const SimulationResult& r) {
  json sensors = json::array();
  for (const auto& s : r.sensors) {
    json j{{"sensor_id", s.sensor_id},
           {"frames", s.node.frames},
           {"pose_messages", s.node.pose_messages},
           {"cloud_messages", s.node.cloud_messages},
           {"feedback_received", s.node.feedback_received},
           {"feedback_used", s.node.feedback_used},
           {"dropped_clouds", s.dropped_clouds}};
    j["sensor_delay_s"] = s.sensor_delay_s ? json(*s.sensor_delay_s) : json(nullptr);
    j["backend_delay_s"] = s.backend_delay_s ? json(*s.backend_delay_s) : json(nullptr);
    sensors.push_back(j);
  }
  return json{{"bytes_up", r.bytes_up},
              {"bytes_down", r.bytes_down},
              {"end_us", r.end_us},
              {"skeletons", r.skeletons.size()},
              {"associations", r.associations.size()},
              {"map_cells", r.final_map.size()},
              {"backend",
               {{"ticks", r.backend.ticks},
                {"pose_messages", r.backend.pose_messages},
                {"cloud_messages", r.backend.cloud_messages},
                {"feedback_messages", r.backend.feedback_messages},
                {"snapshots", r.backend.snapshots},
                {"excluded_joints", r.backend.excluded_joints}}},
              {"sensors", sensors}};
}

void write_snapshot(const fs::path& p, std::uint64_t ts, const std::vector<SnapshotEntry>& cells) {
  const auto bytes = encode(SnapshotMsg{ts, cells});
  open_out(p).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

SnapshotMsg read_snapshot(const fs::path& p) {
  if (!fs::exists(p)) throw DataError("missing map snapshot " + p.string());
  const auto bytes = read_bytes(p);
  try {
    auto msg = decode(bytes);
    if (auto* s = std::get_if<SnapshotMsg>(&msg)) return std::move(*s);
  } catch (const ProtocolError& e) {
    throw DataError(p.string() + ": " + e.what());
  }
  throw DataError(p.string() + ": not a map snapshot");
}

// Everything a run directory holds except the map snapshots.
struct RunDir {
  fs::path dir;
  json meta;
  std::string scene_text;
  Scene scene;
  std::vector<CameraCalib> cameras;
  ClassSet classes;
};

RunDir open_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + " is not a run directory");
  RunDir r;
  r.dir = dir;
  r.meta = read_json(dir / "run.json");
  r.scene_text = read_text(dir / "scene.ini");
  std::istringstream scene_in(r.scene_text);
  r.scene = parse_scene(scene_in, (dir / "scene.ini").string());
  r.cameras = load_calibrations((dir / "cameras.txt").string());
  r.classes = load_class_set((dir / "classes.txt").string());
  return r;
}

void write_outputs(const fs::path& dir, const SimulationResult& r, double resolution) {
  {
    auto out = open_out(dir / "skeletons.csv");
    write_skeletons_csv(out, r.skeletons);
  }
  {
    auto out = open_out(dir / "associations.csv");
    write_associations_csv(out, r.associations);
  }
  {
    auto out = open_out(dir / "frames.bin");
    write_recording(out, r.uplink);
  }
  write_snapshot(dir / "map_snapshot.bin", r.end_us, r.final_map);
  if (r.premove_map) write_snapshot(dir / "map_premove.bin", r.premove_us, *r.premove_map);
  {
    auto out = open_out(dir / "map.ply");
    write_map_ply(out, r.final_map, resolution);
  }
  write_points_ascii_ply_file((dir / "prior.ply").string(), r.prior);
  write_json(dir / "stats.json", stats_json(r));
}

std::vector<PoseSet2p5D> poses_of(const std::vector<TimedMessage>& uplink) {
  std::vector<PoseSet2p5D> out;
  for (const auto& m : uplink)
    if (const auto* p = std::get_if<PoseSet2p5D>(&m.msg)) out.push_back(*p);
  return out;
}

std::vector<TimedMessage> read_frames(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  return read_recording(in, p.string());
}

struct SimulateArgs {
  std::string scene, cameras, classes, out, ablation = "fb-occ-depth";
  double duration = 60.0;
  std::optional<std::uint64_t> seed;
  bool record_clouds = false;
  int depth_stride = 2;
  double latency_ms = 5.0;
};

int cmd_simulate(const SimulateArgs& a) {
  const auto ablation = parse_ablation(a.ablation);
  if (!ablation) throw CLI::ValidationError("--ablation", "unknown ablation '" + a.ablation + "'");
  const auto scene_text = read_text(a.scene);
  std::istringstream scene_in(scene_text);
  Scene scene = parse_scene(scene_in, a.scene);
  if (a.seed) scene.seed = *a.seed;
  const auto cameras = load_calibrations(a.cameras);
  const ClassSet classes = a.classes.empty() ? default_class_set() : load_class_set(a.classes);

  SimulationOptions opt;
  opt.duration_s = a.duration;
  opt.ablation = *ablation;
  opt.record_clouds = a.record_clouds;
  opt.sensor.depth_stride = a.depth_stride;
  opt.link_latency_s = a.latency_ms * 1e-3;
  const auto result = run_simulation(scene, cameras, classes, opt);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  // Seed overrides land in the copied scene so the run directory is self-contained.
  {
    auto out = open_out(dir / "scene.ini");
    out << scene_text;
    if (a.seed) out << "\n[room]\nseed = " << *a.seed << '\n';
  }
  {
    auto out = open_out(dir / "cameras.txt");
    write_calibrations(out, cameras);
  }
  {
    auto out = open_out(dir / "classes.txt");
    write_class_set(out, classes);
  }
  const auto move = scene.first_move_time();
  write_json(dir / "run.json", json{{"ablation", to_string(*ablation)},
                                    {"seed", scene.seed},
                                    {"duration_s", opt.duration_s},
                                    {"depth_stride", opt.sensor.depth_stride},
                                    {"link_latency_s", opt.link_latency_s},
                                    {"fusion_rate_hz", opt.fusion_rate_hz},
                                    {"tick_offset_s", opt.tick_offset_s},
                                    {"prior_spacing_m", opt.prior_spacing_m},
                                    {"voxel_resolution", opt.backend.voxel_resolution},
                                    {"record_clouds", opt.record_clouds},
                                    {"first_move_s", move ? json(*move) : json(nullptr)},
                                    {"premove_us", result.premove_map ? json(result.premove_us) : json(nullptr)},
                                    {"end_us", result.end_us},
                                    {"class_fingerprint", classes.fingerprint()}});
  write_outputs(dir, result, opt.backend.voxel_resolution);
  std::cout << "wrote " << dir.string() << ": " << result.skeletons.size() << " skeletons, " << result.final_map.size()
            << " map cells\n";
  return 0;
}

std::string fmt(std::optional<double> v, int width, int precision) {
  char buf[64];
  if (v)
    std::snprintf(buf, sizeof(buf), "%*.*f", width, precision, *v);
  else
    std::snprintf(buf, sizeof(buf), "%*s", width, "-");
  return buf;
}

int cmd_eval_reproj(const std::vector<std::string>& runs, const std::string& csv_path) {
  std::vector<RunDir> dirs;
  for (const auto& r : runs) dirs.push_back(open_run(r));
  for (const auto& d : dirs) {
    if (d.meta.value("seed", json()) != dirs.front().meta.value("seed", json()) || d.scene_text != dirs.front().scene_text)
      throw DataError("runs do not share scene and seed: " + d.dir.string() + " vs " + dirs.front().dir.string());
  }

  std::ostringstream table, csv;
  table << std::left;
  char head[32];
  std::snprintf(head, sizeof(head), "%-14s", "config");
  table << head;
  csv << "config";
  for (std::size_t c = 0; c < kNumJointClasses; ++c) {
    std::snprintf(head, sizeof(head), "%10s", joint_class_name(static_cast<JointClass>(c)));
    table << head;
    csv << ',' << joint_class_name(static_cast<JointClass>(c));
  }
  std::snprintf(head, sizeof(head), "%10s%10s", "Avg", "samples");
  table << head << '\n';
  csv << ",Avg,samples\n";

  for (const auto& d : dirs) {
    std::ifstream sk_in(d.dir / "skeletons.csv"), as_in(d.dir / "associations.csv");
    if (!sk_in || !as_in) throw DataError(d.dir.string() + ": missing skeleton or association log");
    const auto skeletons = read_skeletons_csv(sk_in, (d.dir / "skeletons.csv").string());
    const auto assoc = read_associations_csv(as_in, (d.dir / "associations.csv").string());
    const auto poses = poses_of(read_frames(d.dir / "frames.bin"));
    const auto st = reprojection_errors(poses, skeletons, assoc, d.cameras);
    if (st.samples() == 0) {
      std::cerr << d.dir.string() << ": no associated joints\n";
      continue;
    }
    const auto name = d.meta.value("ablation", d.dir.filename().string());
    char label[32];
    std::snprintf(label, sizeof(label), "%-14s", name.c_str());
    table << label;
    csv << name;
    for (std::size_t c = 0; c < kNumJointClasses; ++c) {
      const auto m = st.mean(static_cast<JointClass>(c));
      table << fmt(m, 10, 2);
      csv << ',' << (m ? fmt(m, 0, 6) : "");
    }
    table << fmt(st.average(), 10, 2) << std::right;
    char n[32];
    std::snprintf(n, sizeof(n), "%10zu", st.samples());
    table << n << std::left << '\n';
    csv << ',' << fmt(st.average(), 0, 6) << ',' << st.samples() << '\n';
  }
  std::cout << table.str();
  if (!csv_path.empty()) open_out(csv_path) << csv.str();
  return 0;
}

json map_eval_json(const MapEvaluation& e) {
  return json{{"iou", e.iou},
              {"gt_cells", e.gt_cells},
              {"map_cells", e.map_cells},
              {"intersection", e.intersection},
              {"semantic_accuracy", e.semantic_accuracy},
              {"labelled", e.labelled},
              {"correct", e.correct}};
}

int cmd_eval_map(const std::string& run, const std::string& json_path) {
  const auto d = open_run(run);
  const double res = d.meta.value("voxel_resolution", 0.10);
  const auto final_map = read_snapshot(d.dir / "map_snapshot.bin");
  const double end_s = static_cast<double>(final_map.timestamp_us) * 1e-6;
  json out;
  const auto fin = evaluate_map(final_map.cells, d.scene, end_s, res);
  out["final"] = map_eval_json(fin);
  std::printf("final map    IoU %.4f  semantic accuracy %.4f  (%zu gt cells, %zu map cells)\n", fin.iou,
              fin.semantic_accuracy, fin.gt_cells, fin.map_cells);
  if (d.scene.first_move_time()) {
    const auto pre_path = d.dir / "map_premove.bin";
    if (fs::exists(pre_path)) {
      const auto pre = read_snapshot(pre_path);
      const auto ev = evaluate_map(pre.cells, d.scene, static_cast<double>(pre.timestamp_us) * 1e-6, res);
      out["premove"] = map_eval_json(ev);
      std::printf("before move  IoU %.4f  semantic accuracy %.4f\n", ev.iou, ev.semantic_accuracy);
    }
    const auto freed = evaluate_freed(final_map.cells, d.scene, res);
    out["freed"] = json{{"old_cells", freed.old_cells}, {"freed", freed.freed}, {"fraction", freed.fraction}};
    std::printf("after move   IoU %.4f  vacated cells free %zu/%zu (%.4f)\n", fin.iou, freed.freed, freed.old_cells,
                freed.fraction);
  }
  if (!json_path.empty()) write_json(json_path, out);
  return 0;
}

int cmd_export_map(const std::string& run, const std::string& out_path, bool premove) {
  const fs::path dir(run);
  const auto meta = read_json(dir / "run.json");
  const auto snap = read_snapshot(dir / (premove ? "map_premove.bin" : "map_snapshot.bin"));
  const fs::path out = out_path.empty() ? dir / (premove ? "map_premove.ply" : "map.ply") : fs::path(out_path);
  auto os = open_out(out);
  write_map_ply(os, snap.cells, meta.value("voxel_resolution", 0.10));
  std::cout << "wrote " << out.string() << " (" << snap.cells.size() << " cells)\n";
  return 0;
}

int cmd_replay(const std::string& run, const std::string& out_dir, const std::string& ablation_name) {
  const auto d = open_run(run);
  if (!d.meta.value("record_clouds", false))
    throw DataError(run + ": the recording holds no clouds; simulate with --record-clouds");
  const auto ablation = parse_ablation(ablation_name.empty() ? d.meta.value("ablation", std::string()) : ablation_name);
  if (!ablation) throw CLI::ValidationError("--ablation", "unknown ablation '" + ablation_name + "'");

  SimulationOptions opt;
  opt.duration_s = d.meta.value("duration_s", 0.0);
  opt.ablation = *ablation;
  opt.fusion_rate_hz = d.meta.value("fusion_rate_hz", opt.fusion_rate_hz);
  opt.tick_offset_s = d.meta.value("tick_offset_s", opt.tick_offset_s);
  opt.prior_spacing_m = d.meta.value("prior_spacing_m", opt.prior_spacing_m);
  opt.backend.voxel_resolution = d.meta.value("voxel_resolution", opt.backend.voxel_resolution);
  const auto uplink = read_frames(d.dir / "frames.bin");
  const auto prior = sample_surfaces(d.scene, 0.0, opt.prior_spacing_m, true);
  const auto move = d.scene.first_move_time();
  auto result = replay_uplink(uplink, prior, d.classes, opt, move ? *move : 0.0);
  result.end_us = std::max(result.end_us, d.meta.value("end_us", std::uint64_t{0}));

  const fs::path dir(out_dir);
  if (fs::exists(dir) && fs::equivalent(dir, d.dir))
    throw DataError("replay output must differ from the source run");
  fs::create_directories(dir);
  for (const char* f : {"scene.ini", "cameras.txt", "classes.txt"})
    fs::copy_file(d.dir / f, dir / f, fs::copy_options::overwrite_existing);
  auto meta = d.meta;
  meta["ablation"] = to_string(*ablation);
  meta["replayed_from"] = fs::absolute(d.dir).string();
  meta["premove_us"] = result.premove_map ? json(result.premove_us) : json(nullptr);
  write_json(dir / "run.json", meta);
  write_outputs(dir, result, opt.backend.voxel_resolution);

  std::ifstream orig_in(d.dir / "skeletons.csv");
  std::ostringstream replayed;
  write_skeletons_csv(replayed, result.skeletons);
  std::ostringstream orig;
  orig << orig_in.rdbuf();
  std::cout << "replayed " << uplink.size() << " messages: " << result.skeletons.size() << " skeletons";
  if (*ablation == parse_ablation(d.meta.value("ablation", std::string())))
    std::cout << (orig.str() == replayed.str() ? ", identical to the recorded run" : ", DIFFERS from the recorded run");
  std::cout << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semgrid: semantic scene mapping and multi-view pose fusion over simulated smart sensors"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Run backend and sensor nodes on a synthetic scene");
  simulate->add_option("--scene", sim.scene, "Scene INI file")->required()->check(CLI::ExistingFile);
  simulate->add_option("--cameras", sim.cameras, "Camera calibration file")->required()->check(CLI::ExistingFile);
  simulate->add_option("--classes", sim.classes, "Class set file (default: built-in set)")->check(CLI::ExistingFile);
  simulate->add_option("--duration", sim.duration, "Simulated seconds")->capture_default_str()->check(CLI::NonNegativeNumber);
  simulate->add_option("--ablation", sim.ablation, "none | fb | fb-occ | fb-occ-depth")->capture_default_str();
  simulate->add_option("--out", sim.out, "Run directory")->required();
  simulate->add_option("--seed", sim.seed, "Override the scene seed");
  simulate->add_flag("--record-clouds", sim.record_clouds, "Keep semantic clouds in frames.bin (needed by replay)");
  simulate->add_option("--depth-stride", sim.depth_stride, "Back-project every n-th depth pixel")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  simulate->add_option("--latency-ms", sim.latency_ms, "One-way link latency")->capture_default_str()->check(CLI::NonNegativeNumber);

  std::vector<std::string> reproj_runs;
  std::string reproj_csv;
  auto* eval_reproj = app.add_subcommand("eval-reproj", "Reprojection error per joint class for one or more runs");
  eval_reproj->add_option("runs", reproj_runs, "Run directories")->required();
  eval_reproj->add_option("--csv", reproj_csv, "Also write the table as CSV");

  std::string map_run, map_json;
  auto* eval_map = app.add_subcommand("eval-map", "Occupancy IoU and semantic accuracy against ground truth");
  eval_map->add_option("run", map_run, "Run directory")->required();
  eval_map->add_option("--json", map_json, "Also write the metrics as JSON");

  std::string export_run, export_out;
  bool export_premove = false;
  auto* export_map = app.add_subcommand("export-map", "Write a map snapshot as PLY");
  export_map->add_option("run", export_run, "Run directory")->required();
  export_map->add_option("--out", export_out, "Output PLY (default: <run>/map.ply)");
  export_map->add_flag("--premove", export_premove, "Export the snapshot taken before the first object move");

  std::string replay_run, replay_out, replay_ablation;
  auto* replay = app.add_subcommand("replay", "Feed a recorded uplink to a fresh backend");
  replay->add_option("run", replay_run, "Run directory recorded with --record-clouds")->required();
  replay->add_option("--out", replay_out, "Output run directory")->required();
  replay->add_option("--ablation", replay_ablation, "Backend ablation (default: the recorded one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*simulate) return cmd_simulate(sim);
    if (*eval_reproj) return cmd_eval_reproj(reproj_runs, reproj_csv);
    if (*eval_map) return cmd_eval_map(map_run, map_json);
    if (*export_map) return cmd_export_map(export_run, export_out, export_premove);
    if (*replay) return cmd_replay(replay_run, replay_out, replay_ablation);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
