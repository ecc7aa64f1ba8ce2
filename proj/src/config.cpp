#include "petsynth/config.hpp"

#include <cstdlib>
#include <sstream>

#include "petsynth/errors.hpp"

namespace petsynth {

Config Config::parse_text(const std::string& text, const std::string& origin) {
  Config c;
  c.origin_ = origin;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    c.entries_[key] = value;
  }
  return c;
}

Config Config::parse_file(const fs::path& path) {
  return parse_text(read_file_text(path), path.string());
}

std::string Config::raw(const std::string& key, const std::string& def) {
  consumed_[key] = true;
  auto it = entries_.find(key);
  return it == entries_.end() ? def : it->second;
}

std::string Config::get_string(const std::string& key, const std::string& def) {
  return raw(key, def);
}

double Config::get_double(const std::string& key, double def) {
  const std::string s = raw(key, format_double(def));
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw ConfigError("config key '" + key + "': not a number: '" + s + "'");
  return v;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t def) {
  const std::string s = raw(key, std::to_string(def));
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    throw ConfigError("config key '" + key + "': not an integer: '" + s + "'");
  return v;
}

bool Config::get_bool(const std::string& key, bool def) {
  const std::string s = raw(key, def ? "true" : "false");
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config key '" + key + "': not a boolean: '" + s + "'");
}

void Config::set(const std::string& key, const std::string& value) {
  entries_[key] = value;
}

void Config::finish() const {
  for (const auto& [key, value] : entries_) {
    if (!consumed_.count(key))
      throw ConfigError("unknown config key '" + key + "' in " + origin_);
  }
}

std::string Config::echo() const {
  std::string out;
  for (const auto& [key, value] : entries_) {
    out += key;
    out += " = ";
    out += value;
    out += "\n";
  }
  return out;
}

void Manifest::set(const std::string& key, const std::string& value) {
  auto it = index_.find(key);
  if (it != index_.end()) {
    items_[it->second].second = value;
  } else {
    index_[key] = items_.size();
    items_.emplace_back(key, value);
  }
}

void Manifest::set(const std::string& key, std::int64_t value) { set(key, std::to_string(value)); }
void Manifest::set(const std::string& key, double value) { set(key, format_double(value)); }
void Manifest::set_hex(const std::string& key, std::uint64_t value) { set(key, hex64(value)); }

bool Manifest::has(const std::string& key) const { return index_.count(key) != 0; }

const std::string& Manifest::get(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw IoError("manifest has no key '" + key + "'");
  return items_[it->second].second;
}

std::int64_t Manifest::get_int(const std::string& key) const {
  return std::strtoll(get(key).c_str(), nullptr, 10);
}

double Manifest::get_double(const std::string& key) const {
  return std::strtod(get(key).c_str(), nullptr);
}

std::string Manifest::to_text() const {
  std::string out;
  for (const auto& [key, value] : items_) {
    out += key;
    out += " = ";
    out += value;
    out += "\n";
  }
  return out;
}

Manifest Manifest::parse_text(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    m.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return m;
}

Manifest Manifest::load(const fs::path& path) { return parse_text(read_file_text(path)); }

void Manifest::save(const fs::path& path) const { write_file_text(path, to_text()); }

}  // namespace petsynth
