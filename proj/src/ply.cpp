#include "semgrid/ply.hpp"

#include "semgrid/bytes.hpp"
#include "semgrid/cloud.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace semgrid {

namespace {

std::size_t type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  throw std::runtime_error("ply: unsupported property type " + t);
}

double read_binary_scalar(std::istream& in, const std::string& t) {
  unsigned char buf[8];
  const std::size_t n = type_size(t);
  if (!in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(n))) throw std::runtime_error("ply: truncated body");
  auto as = [&]<typename T>() {
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return static_cast<double>(v);
  };
  if (t == "char" || t == "int8") return as.operator()<std::int8_t>();
  if (t == "uchar" || t == "uint8") return as.operator()<std::uint8_t>();
  if (t == "short" || t == "int16") return as.operator()<std::int16_t>();
  if (t == "ushort" || t == "uint16") return as.operator()<std::uint16_t>();
  if (t == "int" || t == "int32") return as.operator()<std::int32_t>();
  if (t == "uint" || t == "uint32") return as.operator()<std::uint32_t>();
  if (t == "float" || t == "float32") return as.operator()<float>();
  return as.operator()<double>();
}

}  // namespace

bool PlyVertices::has(const std::string& name) const {
  for (const auto& n : names)
    if (n == name) return true;
  return false;
}

const std::vector<double>& PlyVertices::column(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return columns[i];
  throw std::runtime_error("ply: missing vertex property " + name);
}

std::vector<Vec3> PlyVertices::positions() const {
  const auto &x = column("x"), &y = column("y"), &z = column("z");
  std::vector<Vec3> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = Vec3(x[i], y[i], z[i]);
  return out;
}

PlyVertices read_ply(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw std::runtime_error("ply: missing magic");
  std::string format;
  std::size_t vertex_count = 0;
  bool in_vertex = false, seen_vertex = false, vertex_first = true;
  std::vector<std::string> types;
  PlyVertices out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      ls >> format;
    } else if (kw == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      in_vertex = name == "vertex";
      if (in_vertex) {
        seen_vertex = true;
        vertex_count = count;
      } else if (!seen_vertex && count > 0) {
        vertex_first = false;
      }
    } else if (kw == "property" && in_vertex) {
      std::string type, name;
      ls >> type;
      if (type == "list") throw std::runtime_error("ply: list properties on vertices are not supported");
      ls >> name;
      types.push_back(type);
      out.names.push_back(name);
    } else if (kw == "end_header") {
      break;
    }
  }
  if (!seen_vertex) throw std::runtime_error("ply: no vertex element");
  if (!vertex_first) throw std::runtime_error("ply: vertex element must come first");
  out.columns.assign(types.size(), std::vector<double>(vertex_count));
  if (format == "ascii") {
    for (std::size_t v = 0; v < vertex_count; ++v)
      for (std::size_t p = 0; p < types.size(); ++p)
        if (!(in >> out.columns[p][v])) throw std::runtime_error("ply: truncated ascii body");
  } else if (format == "binary_little_endian") {
    for (std::size_t v = 0; v < vertex_count; ++v)
      for (std::size_t p = 0; p < types.size(); ++p) out.columns[p][v] = read_binary_scalar(in, types[p]);
  } else {
    throw std::runtime_error("ply: unsupported format " + format);
  }
  return out;
}

PlyVertices read_ply_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return read_ply(f);
}

void write_points_ascii_ply(std::ostream& out, std::span<const Vec3> points) {
  out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  out.precision(9);
  for (const auto& p : points) out << static_cast<float>(p.x()) << ' ' << static_cast<float>(p.y()) << ' ' << static_cast<float>(p.z()) << '\n';
}

void write_points_ascii_ply_file(const std::string& path, std::span<const Vec3> points) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  write_points_ascii_ply(f, points);
}

void write_binary_ply_header(std::ostream& out, std::size_t vertex_count, std::span<const PlyProperty> props) {
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << vertex_count << '\n';
  for (const auto& p : props) out << "property " << p.type << ' ' << p.name << '\n';
  out << "end_header\n";
}

void write_cloud_ply(std::ostream& out, const SemanticCloud& cloud) {
  const PlyProperty props[] = {{"float", "x"}, {"float", "y"}, {"float", "z"}, {"uchar", "class"}, {"float", "prob"}};
  write_binary_ply_header(out, cloud.points.size(), props);
  std::vector<std::uint8_t> buf;
  buf.reserve(cloud.points.size() * 17);
  for (const auto& p : cloud.points) {
    const auto top = argmax_class(p.dist);
    bytes::put(buf, static_cast<float>(p.position.x()));
    bytes::put(buf, static_cast<float>(p.position.y()));
    bytes::put(buf, static_cast<float>(p.position.z()));
    bytes::put(buf, static_cast<std::uint8_t>(top.class_idx));
    bytes::put(buf, static_cast<float>(top.probability));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace semgrid
