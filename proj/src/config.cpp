#include "magrelax/config.hpp"

#include "magrelax/core.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

namespace magrelax {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view s, std::string_view what) {
  std::string t = trim(s);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v))
    throw InputError("invalid number for " + std::string(what) + ": '" + t + "'");
  return v;
}

std::vector<double> parse_double_list(std::string_view s, std::string_view what) {
  std::vector<double> out;
  if (trim(s).empty()) return out;
  for (const auto& item : split(s, ',')) out.push_back(parse_double(item, what));
  return out;
}

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string source) {
  KeyValueConfig cfg;
  cfg.source_ = std::move(source);
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    std::string t = trim(line);
    if (t.empty()) {
      if (end == text.size()) break;
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw InputError(cfg.source_ + ":" + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty())
      throw InputError(cfg.source_ + ":" + std::to_string(line_no) + ": empty key");
    cfg.entries_.emplace_back(std::move(key), std::move(value));
    if (end == text.size()) break;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  return parse(read_file(path), path.string());
}

bool KeyValueConfig::has(std::string_view key) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == key; });
}

std::string KeyValueConfig::text(std::string_view key) const {
  std::optional<std::string> found;
  for (const auto& [k, v] : entries_) {
    if (k != key) continue;
    if (found) throw InputError(source_ + ": key '" + std::string(key) + "' given more than once");
    found = v;
  }
  if (!found) throw InputError(source_ + ": missing key '" + std::string(key) + "'");
  return *found;
}

std::string KeyValueConfig::text(std::string_view key, std::string fallback) const {
  return has(key) ? text(key) : fallback;
}

std::vector<std::string> KeyValueConfig::all(std::string_view key) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_)
    if (k == key) out.push_back(v);
  return out;
}

double KeyValueConfig::number(std::string_view key) const {
  return parse_double(text(key), source_ + ": " + std::string(key));
}

double KeyValueConfig::number(std::string_view key, double fallback) const {
  return has(key) ? number(key) : fallback;
}

long KeyValueConfig::integer(std::string_view key, long fallback) const {
  if (!has(key)) return fallback;
  std::string t = text(key);
  long v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
    throw InputError(source_ + ": invalid integer for " + std::string(key) + ": '" + t + "'");
  return v;
}

bool KeyValueConfig::flag(std::string_view key, bool fallback) const {
  if (!has(key)) return fallback;
  std::string t = text(key);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw InputError(source_ + ": invalid boolean for " + std::string(key) + ": '" + t + "'");
}

std::vector<double> KeyValueConfig::numbers(std::string_view key) const {
  return parse_double_list(text(key), source_ + ": " + std::string(key));
}

void KeyValueConfig::require_known(const std::set<std::string>& known) const {
  for (const auto& [k, v] : entries_)
    if (!known.count(k)) throw InputError(source_ + ": unknown key '" + k + "'");
}

}  // namespace magrelax
