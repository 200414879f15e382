#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace xt2c {

// Flat "key = value" configuration. '#' starts a comment; blank lines are
// ignored. Keys are dotted names such as "optim.lr".
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source = "<config>");
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

  // Sorted "key = value" lines.
  std::string to_text() const;

  // Applies "key=value" override strings (flags win over file values).
  void apply_override(const std::string& assignment);

 private:
  std::map<std::string, std::string> entries_;
};

std::string format_value(double v);  // shortest round-trip form
std::string format_value(int v);
std::string format_value(std::uint64_t v);
std::string format_value(bool v);

double parse_double(const std::string& key, const std::string& text);
int parse_int(const std::string& key, const std::string& text);
std::uint64_t parse_u64(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);

// Reads or writes one field depending on the direction, so a config type
// only lists its keys once.
class FieldBinder {
 public:
  static FieldBinder reader(const KeyValues& source) { return FieldBinder(&source, nullptr); }
  static FieldBinder writer(KeyValues& sink) { return FieldBinder(nullptr, &sink); }

  void field(const std::string& key, double& v);
  void field(const std::string& key, int& v);
  void field(const std::string& key, std::uint64_t& v);
  void field(const std::string& key, bool& v);
  void field(const std::string& key, std::string& v);

  bool reading() const { return source_ != nullptr; }

 private:
  FieldBinder(const KeyValues* source, KeyValues* sink) : source_(source), sink_(sink) {}
  const KeyValues* source_;
  KeyValues* sink_;
};

}  // namespace xt2c
