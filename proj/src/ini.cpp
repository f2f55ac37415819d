#include "semgrid/ini.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace semgrid {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

IniFile IniFile::parse(std::istream& in, const std::string& source_name) {
  IniFile f;
  f.source_ = source_name;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    const std::string t = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3)
        throw std::runtime_error(source_name + ":" + std::to_string(lineno) + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos || trim(t.substr(0, eq)).empty())
      throw std::runtime_error(source_name + ":" + std::to_string(lineno) + ": expected key = value");
    f.entries_.push_back({section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)), lineno});
  }
  return f;
}

IniFile IniFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  return parse(in, path);
}

const IniFile::Entry* IniFile::find(const std::string& section, const std::string& key) const {
  const Entry* hit = nullptr;
  for (const auto& e : entries_)
    if (e.section == section && e.key == key) hit = &e;
  return hit;
}

std::vector<const IniFile::Entry*> IniFile::all(const std::string& section, const std::string& key) const {
  std::vector<const Entry*> out;
  for (const auto& e : entries_)
    if (e.section == section && e.key == key) out.push_back(&e);
  return out;
}

void IniFile::error(const Entry& e, const std::string& what) const {
  throw std::runtime_error(source_ + ":" + std::to_string(e.line) + ": " + e.key + ": " + what);
}

std::string IniFile::get_string(const std::string& section, const std::string& key, const std::string& fallback) const {
  const auto* e = find(section, key);
  return e ? e->value : fallback;
}

double IniFile::get_double(const std::string& section, const std::string& key, double fallback) const {
  const auto* e = find(section, key);
  if (!e) return fallback;
  double v = 0;
  const auto* end = e->value.data() + e->value.size();
  const auto [ptr, ec] = std::from_chars(e->value.data(), end, v);
  if (ec != std::errc() || ptr != end) error(*e, "expected a number, got '" + e->value + "'");
  return v;
}

long long IniFile::get_int(const std::string& section, const std::string& key, long long fallback) const {
  const auto* e = find(section, key);
  if (!e) return fallback;
  long long v = 0;
  const auto* end = e->value.data() + e->value.size();
  const auto [ptr, ec] = std::from_chars(e->value.data(), end, v);
  if (ec != std::errc() || ptr != end) error(*e, "expected an integer, got '" + e->value + "'");
  return v;
}

bool IniFile::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const auto* e = find(section, key);
  if (!e) return fallback;
  std::string v = e->value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  error(*e, "expected a boolean, got '" + e->value + "'");
}

std::string IniFile::require(const std::string& section, const std::string& key) const {
  const auto* e = find(section, key);
  if (!e) throw std::runtime_error(source_ + ": missing key '" + key + "'" + (section.empty() ? "" : " in [" + section + "]"));
  return e->value;
}

void IniFile::check_keys(const std::string& section, const std::vector<std::string>& allowed) const {
  for (const auto& e : entries_)
    if (e.section == section && std::find(allowed.begin(), allowed.end(), e.key) == allowed.end())
      error(e, "unknown key");
}

std::vector<double> parse_numbers(const std::string& text) {
  std::vector<double> out;
  const char* p = text.data();
  const char* end = p + text.size();
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t' || *p == ',')) ++p;
    if (p == end) break;
    double v = 0;
    const auto [ptr, ec] = std::from_chars(p, end, v);
    if (ec != std::errc()) throw std::invalid_argument("expected numbers, got '" + text + "'");
    out.push_back(v);
    p = ptr;
  }
  return out;
}

}  // namespace semgrid
