#pragma once

// Flat key=value configuration with [section] headers. Keys are stored as
// "section.key"; later assignments override earlier ones.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace star4d {

class Config {
 public:
  // Throws std::invalid_argument naming the line on malformed input.
  static Config parse(std::string_view text, const std::string& origin = "<config>");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  // Applies "section.key=value".
  void set_assignment(std::string_view assignment);
  void merge(const Config& other);
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Canonical text: sections sorted, keys sorted. parse(to_text()) round-trips.
  std::string to_text() const;
  // Subset of keys starting with "prefix.".
  Config section(const std::string& prefix) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Field-level comparison of two configs restricted to `prefix`; returns an
// empty string when equal, otherwise a message naming the first differing field.
std::string config_mismatch(const Config& expected, const Config& found, const std::string& prefix);

std::string format_double(double value);

}  // namespace star4d
