#include "xt2c/config.hpp"

#include "xt2c/errors.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace xt2c {

namespace {

std::string trim(const std::string& s) {
  auto b = std::find_if_not(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
  auto e = std::find_if_not(s.rbegin(), s.rend(), [](unsigned char c) { return std::isspace(c); }).base();
  return b < e ? std::string(b, e) : std::string();
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  N v{};
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
    kv.entries_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::optional<std::string> KeyValues::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

void KeyValues::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty()) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  entries_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

std::string format_value(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }

double parse_double(const std::string& key, const std::string& text) { return parse_number<double>(key, text); }
int parse_int(const std::string& key, const std::string& text) { return parse_number<int>(key, text); }
std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  return parse_number<std::uint64_t>(key, text);
}

bool parse_bool(const std::string& key, const std::string& text) {
  std::string t = trim(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
}

void FieldBinder::field(const std::string& key, double& v) {
  if (source_) {
    if (auto s = source_->get(key)) v = parse_double(key, *s);
  } else {
    sink_->set(key, format_value(v));
  }
}

void FieldBinder::field(const std::string& key, int& v) {
  if (source_) {
    if (auto s = source_->get(key)) v = parse_int(key, *s);
  } else {
    sink_->set(key, format_value(v));
  }
}

void FieldBinder::field(const std::string& key, std::uint64_t& v) {
  if (source_) {
    if (auto s = source_->get(key)) v = parse_u64(key, *s);
  } else {
    sink_->set(key, format_value(v));
  }
}

void FieldBinder::field(const std::string& key, bool& v) {
  if (source_) {
    if (auto s = source_->get(key)) v = parse_bool(key, *s);
  } else {
    sink_->set(key, format_value(v));
  }
}

void FieldBinder::field(const std::string& key, std::string& v) {
  if (source_) {
    if (auto s = source_->get(key)) v = *s;
  } else {
    sink_->set(key, v);
  }
}

}  // namespace xt2c
