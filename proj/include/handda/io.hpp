#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "handda/nn/tape.hpp"

namespace handda::io {

/// Flat key=value configuration text. Lines starting with '#' and blank
/// lines are ignored; keys are unique.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::istream& in);
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

/// Writes through a temporary sibling and renames it into place.
void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer);

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);

/// Dense array: dims header followed by row-major little-endian binary32 values.
struct Array {
  std::vector<std::uint64_t> dims;
  std::vector<float> values;

  [[nodiscard]] std::uint64_t count() const;
};

/// Encoding: u32 rank, u64 dims[rank], f32 values[prod(dims)].
void write_array(std::ostream& out, const Array& array);
Array read_array(std::istream& in);

Array to_array(const nn::Matrix& m);
nn::Matrix to_matrix(const Array& array);

/// Self-describing checkpoint: kind tag, configuration, step counter and
/// named parameter arrays.
///
///   magic "HANDDA-CKPT\n" | u32 version | u32 kind_len | kind
///   | u64 step | u32 config_len | config (key=value lines)
///   | u32 array_count | { u32 name_len | name | array }*
struct Checkpoint {
  std::string kind;
  KeyValues config;
  std::uint64_t step = 0;
  std::map<std::string, Array> arrays;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies parameter values into named arrays.
void store_parameters(Checkpoint& ckpt, const nn::ParameterList& params);
/// Restores parameter values; throws when a name is missing or a shape differs.
void restore_parameters(const Checkpoint& ckpt, const nn::ParameterList& params);

}  // namespace handda::io
