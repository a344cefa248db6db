#include "handda/text.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <stdexcept>

namespace handda::text {
namespace {

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected) {
  throw std::invalid_argument("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& value) {
  if (value.empty()) bad(key, value, "a number");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(value.c_str(), &end);
  if (errno != 0 || end != value.c_str() + value.size()) bad(key, value, "a number");
  return v;
}

long long parse_int(const std::string& key, const std::string& value) {
  if (value.empty()) bad(key, value, "an integer");
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (errno != 0 || end != value.c_str() + value.size()) bad(key, value, "an integer");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  if (value.empty() || value.front() == '-') bad(key, value, "a non-negative integer");
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (errno != 0 || end != value.c_str() + value.size()) bad(key, value, "a non-negative integer");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  bad(key, value, "true/false");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  return parts;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  if (value.empty()) return out;
  for (const std::string& part : split(value, ',')) {
    const long long v = parse_int(key, part);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) bad(key, value, "int list");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

std::string join_ints(const std::vector<int>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(values[i]);
  }
  return out;
}

bool get(const io::KeyValues& kv, const std::string& key, double& out) {
  const auto it = kv.find(key);
  if (it == kv.end()) return false;
  out = parse_double(key, it->second);
  return true;
}

bool get(const io::KeyValues& kv, const std::string& key, int& out) {
  const auto it = kv.find(key);
  if (it == kv.end()) return false;
  const long long v = parse_int(key, it->second);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    bad(key, it->second, "a 32-bit integer");
  }
  out = static_cast<int>(v);
  return true;
}

bool get(const io::KeyValues& kv, const std::string& key, std::uint64_t& out) {
  const auto it = kv.find(key);
  if (it == kv.end()) return false;
  out = parse_u64(key, it->second);
  return true;
}

bool get(const io::KeyValues& kv, const std::string& key, bool& out) {
  const auto it = kv.find(key);
  if (it == kv.end()) return false;
  out = parse_bool(key, it->second);
  return true;
}

bool get(const io::KeyValues& kv, const std::string& key, std::string& out) {
  const auto it = kv.find(key);
  if (it == kv.end()) return false;
  out = it->second;
  return true;
}

bool get(const io::KeyValues& kv, const std::string& key, std::vector<int>& out) {
  const auto it = kv.find(key);
  if (it == kv.end()) return false;
  out = parse_int_list(key, it->second);
  return true;
}

}  // namespace handda::text
