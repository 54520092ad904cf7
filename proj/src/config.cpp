#include "svos/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "svos/error.hpp"

namespace svos {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& origin) {
  KeyValues kv;
  kv.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(number) + ": empty key");
    if (kv.values_.contains(key)) throw ConfigError(origin + ": duplicate key '" + key + "'");
    kv.values_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), path.string());
}

std::optional<std::string> KeyValues::take_string(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  taken_[key] = true;
  return it->second;
}

std::optional<double> KeyValues::take_double(const std::string& key) {
  auto s = take_string(key);
  if (!s) return std::nullopt;
  try {
    std::size_t used = 0;
    double v = std::stod(*s, &used);
    if (used != s->size()) throw std::invalid_argument(*s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": '" + key + "' is not a number: " + *s);
  }
}

std::optional<long long> KeyValues::take_int(const std::string& key) {
  auto s = take_string(key);
  if (!s) return std::nullopt;
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s->data(), s->data() + s->size(), v);
  if (ec != std::errc() || ptr != s->data() + s->size())
    throw ConfigError(origin_ + ": '" + key + "' is not an integer: " + *s);
  return v;
}

std::optional<bool> KeyValues::take_bool(const std::string& key) {
  auto s = take_string(key);
  if (!s) return std::nullopt;
  if (*s == "true" || *s == "1" || *s == "on") return true;
  if (*s == "false" || *s == "0" || *s == "off") return false;
  throw ConfigError(origin_ + ": '" + key + "' is not a boolean: " + *s);
}

std::optional<std::vector<int>> KeyValues::take_int_list(const std::string& key) {
  auto s = take_string(key);
  if (!s) return std::nullopt;
  std::vector<int> out;
  for (const auto& item : split_commas(*s)) {
    int v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size())
      throw ConfigError(origin_ + ": '" + key + "' is not an integer list: " + *s);
    out.push_back(v);
  }
  return out;
}

std::optional<std::pair<double, double>> KeyValues::take_range(const std::string& key) {
  auto s = take_string(key);
  if (!s) return std::nullopt;
  const auto parts = split_commas(*s);
  if (parts.size() != 2) throw ConfigError(origin_ + ": '" + key + "' must be 'lo,hi': " + *s);
  try {
    const double lo = std::stod(parts[0]), hi = std::stod(parts[1]);
    if (lo > hi) throw ConfigError(origin_ + ": '" + key + "' has lo > hi");
    return std::pair{lo, hi};
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": '" + key + "' must be 'lo,hi': " + *s);
  }
}

void KeyValues::finish() const {
  std::string unknown;
  for (const auto& [key, _] : values_)
    if (!taken_.contains(key)) unknown += (unknown.empty() ? "" : ", ") + key;
  if (!unknown.empty()) throw ConfigError(origin_ + ": unknown key(s): " + unknown);
}

std::string render_key_values(const std::map<std::string, std::string>& values) {
  std::string out;
  for (const auto& [k, v] : values) out += k + " = " + v + "\n";
  return out;
}

}  // namespace svos
