#include "star4d/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace star4d {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void bad_field(const std::string& key, const std::string& expected, const std::string& value) {
  throw std::invalid_argument("config field '" + key + "': expected " + expected + ", got '" + value + "'");
}

}  // namespace

Config Config::parse(std::string_view text, const std::string& origin) {
  Config cfg;
  std::string section;
  int line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t end = std::min(text.find('\n', pos), text.size());
    std::string line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line = trim(line.substr(0, hash));
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": empty key");
    cfg.set(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
    if (end == text.size()) break;
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set_assignment(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw std::invalid_argument("override '" + std::string(assignment) + "' is not of the form section.key=value");
  }
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::merge(const Config& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

int64_t Config::get_int(const std::string& key, int64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  int64_t v = 0;
  const auto& s = it->second;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) bad_field(key, "an integer", s);
  return v;
}

double Config::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& s = it->second;
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) bad_field(key, "a number", s);
    return v;
  } catch (const std::logic_error&) {
    bad_field(key, "a number", s);
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& s = it->second;
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  bad_field(key, "a boolean", s);
}

std::string Config::to_text() const {
  std::string out, current;
  bool first = true;
  for (const auto& [key, value] : values_) {
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (first || section != current) {
      if (!section.empty()) out += (first ? "" : "\n") + ("[" + section + "]\n");
      current = section;
      first = false;
    }
    out += name + " = " + value + "\n";
  }
  return out;
}

Config Config::section(const std::string& prefix) const {
  Config out;
  const std::string p = prefix + ".";
  for (const auto& [k, v] : values_) {
    if (k.compare(0, p.size(), p) == 0) out.values_[k] = v;
  }
  return out;
}

std::string config_mismatch(const Config& expected, const Config& found, const std::string& prefix) {
  const Config a = expected.section(prefix), b = found.section(prefix);
  for (const auto& [k, v] : a.values()) {
    const auto it = b.values().find(k);
    if (it == b.values().end()) return "field '" + k + "' missing from checkpoint (expected " + v + ")";
    if (it->second != v) return "field '" + k + "' is " + it->second + " in checkpoint but " + v + " in config";
  }
  for (const auto& [k, v] : b.values()) {
    if (!a.has(k)) return "field '" + k + "' present in checkpoint but unknown to config";
  }
  return {};
}

std::string format_double(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  // Prefer the shortest representation that reads back exactly.
  for (int precision = 1; precision < 17; ++precision) {
    char shorter[64];
    std::snprintf(shorter, sizeof shorter, "%.*g", precision, value);
    if (std::stod(shorter) == value) return shorter;
  }
  return buf;
}

}  // namespace star4d
