#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "multiwin/errors.hpp"

namespace multiwin {

/// Flat `key = value` configuration text with dotted section names.
/// Preserves insertion order so serialization is diff-stable.
class KvMap {
 public:
  static KvMap parse(const std::string& text);
  std::string serialize() const;

  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, int64_t v);
  void set_double(const std::string& key, double v);
  void set_bool(const std::string& key, bool v);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;  // ConfigError if absent

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Required variants; ConfigError names the field path.
  int64_t require_int(const std::string& key) const;
  double require_double(const std::string& key) const;
  const std::string& require_string(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  /// Keys outside `known` — used to reject typos with a field path.
  std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  int find(const std::string& key) const;
};

/// Full-precision double formatting that round-trips.
std::string format_double(double v);

}  // namespace multiwin
