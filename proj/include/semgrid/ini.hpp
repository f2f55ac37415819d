#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace semgrid {

/// INI-style `key = value` file with optional `[section]` headers. Keys may repeat.
class IniFile {
 public:
  struct Entry {
    std::string section, key, value;
    int line = 0;
  };

  static IniFile parse(std::istream& in, const std::string& source_name = "<stream>");
  static IniFile load(const std::string& path);

  const std::string& source() const { return source_; }
  const std::vector<Entry>& entries() const { return entries_; }

  const Entry* find(const std::string& section, const std::string& key) const;  // last occurrence
  std::vector<const Entry*> all(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::string require(const std::string& section, const std::string& key) const;

  /// Throws std::runtime_error prefixed with `source:line:`.
  [[noreturn]] void error(const Entry& e, const std::string& what) const;
  /// Rejects keys outside the allowed set for a section.
  void check_keys(const std::string& section, const std::vector<std::string>& allowed) const;

 private:
  std::string source_;
  std::vector<Entry> entries_;
};

/// Whitespace-separated numbers; throws std::invalid_argument on junk.
std::vector<double> parse_numbers(const std::string& text);

}  // namespace semgrid
