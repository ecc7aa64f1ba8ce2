#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "petsynth/util.hpp"

namespace petsynth {

/// Parsed key=value configuration with [section] headers and '#' comments.
/// Keys are addressed as "section.key". Typed getters mark keys as consumed;
/// finish() rejects anything left over so typos are reported by name.
class Config {
 public:
  static Config parse_text(const std::string& text, const std::string& origin = "<text>");
  static Config parse_file(const fs::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& def);
  double get_double(const std::string& key, double def);
  std::int64_t get_int(const std::string& key, std::int64_t def);
  bool get_bool(const std::string& key, bool def);

  /// Overrides like "section.key=value" from the command line.
  void set(const std::string& key, const std::string& value);

  /// Throws ConfigError naming the first unconsumed (unknown) key.
  void finish() const;

  /// Canonical echo of every entry, sorted by key, one "key = value" per line.
  std::string echo() const;

 private:
  std::string raw(const std::string& key, const std::string& def);
  std::map<std::string, std::string> entries_;
  mutable std::map<std::string, bool> consumed_;
  std::string origin_;
};

/// Insertion-ordered key=value document used for run manifests and reports.
class Manifest {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, double value);
  void set_hex(const std::string& key, std::uint64_t value);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;

  std::string to_text() const;
  static Manifest parse_text(const std::string& text);
  static Manifest load(const fs::path& path);
  void save(const fs::path& path) const;

 private:
  std::vector<std::pair<std::string, std::string>> items_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace petsynth
