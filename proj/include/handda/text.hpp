#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "handda/io.hpp"

namespace handda::text {

/// Shortest-safe round-trip formatting of a double (%.17g).
std::string format_double(double v);

double parse_double(const std::string& key, const std::string& value);
long long parse_int(const std::string& key, const std::string& value);
std::uint64_t parse_u64(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
std::vector<int> parse_int_list(const std::string& key, const std::string& value);
std::string join_ints(const std::vector<int>& values);
std::vector<std::string> split(const std::string& s, char sep);

/// Typed lookups into a key/value map; return false when the key is absent.
bool get(const io::KeyValues& kv, const std::string& key, double& out);
bool get(const io::KeyValues& kv, const std::string& key, int& out);
bool get(const io::KeyValues& kv, const std::string& key, std::uint64_t& out);
bool get(const io::KeyValues& kv, const std::string& key, bool& out);
bool get(const io::KeyValues& kv, const std::string& key, std::string& out);
bool get(const io::KeyValues& kv, const std::string& key, std::vector<int>& out);

}  // namespace handda::text
