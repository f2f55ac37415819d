#pragma once

#include "semgrid/geometry.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace semgrid {

/// Vertex element of a PLY file, every scalar property widened to double.
struct PlyVertices {
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;

  std::size_t size() const { return columns.empty() ? 0 : columns.front().size(); }
  bool has(const std::string& name) const;
  const std::vector<double>& column(const std::string& name) const;
  std::vector<Vec3> positions() const;
};

/// Reads the vertex element of an ascii or binary_little_endian PLY. Other elements
/// and list properties are skipped when they follow the vertex element.
PlyVertices read_ply(std::istream& in);
PlyVertices read_ply_file(const std::string& path);

void write_points_ascii_ply(std::ostream& out, std::span<const Vec3> points);
void write_points_ascii_ply_file(const std::string& path, std::span<const Vec3> points);

struct PlyProperty {
  std::string type;  // float, uchar, int, ...
  std::string name;
};

/// Header for a binary little-endian vertex-only PLY.
void write_binary_ply_header(std::ostream& out, std::size_t vertex_count, std::span<const PlyProperty> props);

}  // namespace semgrid
