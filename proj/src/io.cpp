#include "handda/io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace handda::io {
namespace {

constexpr char kMagic[] = "HANDDA-CKPT\n";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 8;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, std::uint32_t limit) {
  const std::uint32_t n = read_u32(in);
  if (n > limit) throw std::runtime_error("checkpoint: string field too long");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

}  // namespace

KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, trim(t.substr(eq + 1))).second) {
      throw std::runtime_error("config line " + std::to_string(lineno) + ": duplicate key " + key);
    }
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_key_values(in);
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    writer(out);
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), 8);
}

std::uint32_t read_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw std::runtime_error("binary read: unexpected end of stream");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), 8);
  if (!in) throw std::runtime_error("binary read: unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

std::uint64_t Array::count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void write_array(std::ostream& out, const Array& array) {
  if (array.count() != array.values.size()) throw std::invalid_argument("array: dims do not match value count");
  write_u32(out, static_cast<std::uint32_t>(array.dims.size()));
  for (auto d : array.dims) write_u64(out, d);
  for (float f : array.values) write_u32(out, std::bit_cast<std::uint32_t>(f));
}

Array read_array(std::istream& in) {
  Array a;
  const std::uint32_t rank = read_u32(in);
  if (rank > kMaxRank) throw std::runtime_error("array: rank too large");
  a.dims.resize(rank);
  for (auto& d : a.dims) d = read_u64(in);
  const std::uint64_t n = a.count();
  if (n > (1ULL << 31)) throw std::runtime_error("array: too many values");
  a.values.resize(static_cast<std::size_t>(n));
  for (auto& f : a.values) f = std::bit_cast<float>(read_u32(in));
  return a;
}

Array to_array(const nn::Matrix& m) {
  Array a;
  a.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  a.values.resize(static_cast<std::size_t>(m.size()));
  for (nn::Index i = 0; i < m.size(); ++i) a.values[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return a;
}

nn::Matrix to_matrix(const Array& array) {
  if (array.dims.size() != 2) throw std::runtime_error("array: expected rank 2");
  nn::Matrix m(static_cast<nn::Index>(array.dims[0]), static_cast<nn::Index>(array.dims[1]));
  for (nn::Index i = 0; i < m.size(); ++i) m.data()[i] = array.values[static_cast<std::size_t>(i)];
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  atomic_write(path, [&](std::ostream& out) {
    out.write(kMagic, sizeof(kMagic) - 1);
    write_u32(out, kVersion);
    write_string(out, ckpt.kind);
    write_u64(out, ckpt.step);
    write_string(out, format_key_values(ckpt.config));
    write_u32(out, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, array] : ckpt.arrays) {
      write_string(out, name);
      write_array(out, array);
    }
  });
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string magic(sizeof(kMagic) - 1, '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kMagic) throw std::runtime_error("not a checkpoint: " + path.string());
  if (read_u32(in) != kVersion) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.kind = read_string(in, 256);
  ckpt.step = read_u64(in);
  std::istringstream cfg(read_string(in, 1u << 20));
  ckpt.config = parse_key_values(cfg);
  const std::uint32_t count = read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(in, 4096);
    ckpt.arrays.emplace(std::move(name), read_array(in));
  }
  return ckpt;
}

void store_parameters(Checkpoint& ckpt, const nn::ParameterList& params) {
  for (const nn::Parameter* p : params) ckpt.arrays[p->name] = to_array(p->value);
}

void restore_parameters(const Checkpoint& ckpt, const nn::ParameterList& params) {
  for (nn::Parameter* p : params) {
    const auto it = ckpt.arrays.find(p->name);
    if (it == ckpt.arrays.end()) throw std::runtime_error("checkpoint: missing parameter " + p->name);
    const Array& a = it->second;
    if (a.dims.size() != 2 || a.dims[0] != static_cast<std::uint64_t>(p->value.rows()) ||
        a.dims[1] != static_cast<std::uint64_t>(p->value.cols())) {
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name);
    }
    p->value = to_matrix(a);
    p->grad = nn::Matrix::Zero(p->value.rows(), p->value.cols());
  }
  if (ckpt.arrays.size() != params.size()) {
    throw std::runtime_error("checkpoint: parameter count does not match model");
  }
}

}  // namespace handda::io
