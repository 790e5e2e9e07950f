#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "segdiff/common.hpp"

namespace segdiff {

/// Flat `key = value` text, one pair per line, '#' comments. Used for dataset
/// manifests, run configs, and plain-text reports.
class KvFile {
 public:
  void set(const std::string& key, const std::string& value) {
    if (auto it = index_.find(key); it != index_.end()) {
      entries_[it->second].second = value;
      return;
    }
    index_[key] = entries_.size();
    entries_.emplace_back(key, value);
  }

  void set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
  }

  void set(const std::string& key, std::int64_t value) { set(key, std::to_string(value)); }
  void set(const std::string& key, int value) { set(key, std::to_string(value)); }
  void set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }

  bool has(const std::string& key) const { return index_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw ConfigError("missing key '" + key + "'");
    return entries_[it->second].second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    auto it = index_.find(key);
    return it == index_.end() ? fallback : entries_[it->second].second;
  }

  double get_double(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' is not a number: " + get(key));
    }
  }

  std::int64_t get_int(const std::string& key) const {
    try {
      return std::stoll(get(key));
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' is not an integer: " + get(key));
    }
  }

  std::uint64_t get_u64(const std::string& key) const {
    try {
      return std::stoull(get(key));
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' is not an integer: " + get(key));
    }
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
    return os.str();
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << to_text();
    if (!out) throw IoError("short write to " + path.string());
  }

  static KvFile parse(const std::string& text, const std::string& origin = "<text>") {
    KvFile kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto strip = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      if (strip(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      kv.set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return kv;
  }

  static KvFile load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str(), path.string());
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace segdiff
