#pragma once

// key = value text files. '#' starts a comment; blank lines are ignored.
// Readers consume keys as they parse them and call finish() to reject any
// key nobody asked for.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace svos {

class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<text>");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::optional<std::string> take_string(const std::string& key);
  std::optional<double> take_double(const std::string& key);
  std::optional<long long> take_int(const std::string& key);
  std::optional<bool> take_bool(const std::string& key);
  // Comma-separated list of integers.
  std::optional<std::vector<int>> take_int_list(const std::string& key);
  // Two comma-separated reals "lo,hi".
  std::optional<std::pair<double, double>> take_range(const std::string& key);

  // Throws ConfigError naming any keys that were never taken.
  void finish() const;
  const std::string& origin() const { return origin_; }

 private:
  std::string origin_;
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> taken_;
};

// Canonical "key = value" rendering, sorted by key.
std::string render_key_values(const std::map<std::string, std::string>& values);

}  // namespace svos
