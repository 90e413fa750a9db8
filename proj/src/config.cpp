#include "multiwin/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace multiwin {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvMap KvMap::parse(const std::string& text) {
  KvMap kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected `key = value`, got: " + t);
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    kv.set(key, value);
  }
  return kv;
}

std::string KvMap::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << " = " << v << '\n';
  return os.str();
}

int KvMap::find(const std::string& key) const {
  for (size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].first == key) return static_cast<int>(i);
  return -1;
}

void KvMap::set(const std::string& key, const std::string& value) {
  const int i = find(key);
  if (i >= 0)
    entries_[size_t(i)].second = value;
  else
    entries_.emplace_back(key, value);
}

void KvMap::set_int(const std::string& key, int64_t v) { set(key, std::to_string(v)); }
void KvMap::set_double(const std::string& key, double v) { set(key, format_double(v)); }
void KvMap::set_bool(const std::string& key, bool v) { set(key, v ? "true" : "false"); }

bool KvMap::has(const std::string& key) const { return find(key) >= 0; }

const std::string& KvMap::get(const std::string& key) const {
  const int i = find(key);
  if (i < 0) throw ConfigError("missing required field: " + key);
  return entries_[size_t(i)].second;
}

std::string KvMap::get_string(const std::string& key, const std::string& fallback) const {
  const int i = find(key);
  return i < 0 ? fallback : entries_[size_t(i)].second;
}

int64_t KvMap::get_int(const std::string& key, int64_t fallback) const {
  return has(key) ? require_int(key) : fallback;
}

double KvMap::get_double(const std::string& key, double fallback) const {
  return has(key) ? require_double(key) : fallback;
}

bool KvMap::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("field " + key + ": expected a boolean, got: " + v);
}

int64_t KvMap::require_int(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("field " + key + ": expected an integer, got: " + v);
  return x;
}

double KvMap::require_double(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("field " + key + ": expected a number, got: " + v);
  return x;
}

const std::string& KvMap::require_string(const std::string& key) const { return get(key); }

std::vector<std::string> KvMap::unknown_keys(const std::vector<std::string>& known) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_)
    if (std::find(known.begin(), known.end(), k) == known.end()) out.push_back(k);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // Prefer the shortest representation that round-trips.
  for (int prec = 1; prec <= 16; ++prec) {
    char t[64];
    std::snprintf(t, sizeof(t), "%.*g", prec, v);
    if (std::strtod(t, nullptr) == v) return t;
  }
  return buf;
}

}  // namespace multiwin
