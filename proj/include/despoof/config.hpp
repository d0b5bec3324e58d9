#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "despoof/hash.hpp"
#include "despoof/params.hpp"
#include "despoof/tensor.hpp"

namespace despoof {

/// Flat `key = value` text with `#` comments. A `[name]` line prefixes the
/// keys that follow with `name.`.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text, std::string source = "<config>") {
    KeyValueConfig cfg;
    cfg.source_ = std::move(source);
    std::string section;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw ConfigError(cfg.where(line_no) + "unterminated section header");
        section = trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError(cfg.where(line_no) + "expected key = value, got '" + t + "'");
      std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError(cfg.where(line_no) + "empty key");
      if (!section.empty()) key = section + "." + key;
      if (cfg.values_.count(key)) throw ConfigError(cfg.where(line_no) + "duplicate key '" + key + "'");
      cfg.values_[key] = trim(t.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    std::string text;
    try {
      text = read_file(path);
    } catch (const DataError&) {
      throw ConfigError("cannot read config file " + path.string());
    }
    auto cfg = parse(text, path.string());
    cfg.path_ = path;
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key) const { return raw(key); }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? raw(key) : fallback;
  }

  double get_double(const std::string& key) const { return to_double(key, raw(key)); }
  double get_double(const std::string& key, double fallback) const { return has(key) ? get_double(key) : fallback; }

  std::int64_t get_int(const std::string& key) const {
    const std::string v = raw(key);
    std::int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(bad(key, v, "an integer"));
    return out;
  }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const { return has(key) ? get_int(key) : fallback; }

  std::size_t get_size(const std::string& key) const {
    const auto v = get_int(key);
    if (v < 0) throw ConfigError(bad(key, raw(key), "a nonnegative integer"));
    return static_cast<std::size_t>(v);
  }
  std::size_t get_size(const std::string& key, std::size_t fallback) const { return has(key) ? get_size(key) : fallback; }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = raw(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(bad(key, v, "a boolean"));
  }

  /// Whitespace-separated list of numbers.
  std::vector<double> get_doubles(const std::string& key) const {
    std::istringstream in(raw(key));
    std::vector<double> out;
    for (std::string tok; in >> tok;) out.push_back(to_double(key, tok));
    return out;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) out.push_back(k);
    return out;
  }

  /// Throws naming the first key that is not in `known`.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) throw ConfigError(source_ + ": unknown key '" + k + "'");
  }

  /// Stable digest of the key/value pairs.
  std::uint64_t hash() const {
    Fnv1a h;
    for (const auto& [k, v] : values_) {
      h.update(k);
      h.update("=");
      h.update(v);
      h.update("\n");
    }
    return h.digest();
  }

  const std::string& source() const { return source_; }
  /// Directory used to resolve relative paths named inside the config.
  std::filesystem::path base_dir() const { return path_.empty() ? std::filesystem::path(".") : path_.parent_path(); }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
  }

  std::string where(std::size_t line) const { return source_ + ":" + std::to_string(line) + ": "; }

  std::string bad(const std::string& key, const std::string& v, const char* what) const {
    return source_ + ": key '" + key + "' must be " + what + ", got '" + v + "'";
  }

  std::string raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(source_ + ": missing key '" + key + "'");
    return it->second;
  }

  double to_double(const std::string& key, const std::string& v) const {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::logic_error&) {
      throw ConfigError(bad(key, v, "a number"));
    }
  }

  std::map<std::string, std::string> values_;
  std::string source_ = "<config>";
  std::filesystem::path path_;
};

}  // namespace despoof
