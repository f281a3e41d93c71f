#include "rlp/parameters.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace rlp {

Tensor& ParameterSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

Tensor& ParameterSet::at(std::string_view name) {
  for (auto& [n, t] : entries_)
    if (n == name) return t;
  throw std::out_of_range("no parameter named " + std::string(name));
}

const Tensor& ParameterSet::at(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw std::out_of_range("no parameter named " + std::string(name));
}

bool ParameterSet::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

bool operator==(const ParameterSet& a, const ParameterSet& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].first != b.entries_[i].first) return false;
    if (!(a.entries_[i].second == b.entries_[i].second)) return false;
  }
  return true;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                              static_cast<char>((v >> 16) & 0xFF),
                              static_cast<char>((v >> 24) & 0xFF)};
  os.write(b.data(), 4);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw std::length_error(std::string("checkpoint: ") + what + " too large");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_checkpoint(std::ostream& os, const ParameterSet& params) {
  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  for (const auto& [name, t] : params) {
    put_u32(os, checked_u32(name.size(), "name"));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, checked_u32(t.rank(), "rank"));
    for (std::size_t e : t.shape()) put_u32(os, checked_u32(e, "extent"));
    for (float v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

ParameterSet read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) ||
      std::string_view(magic.data(), 4) != kCheckpointMagic) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  ParameterSet params;
  std::uint32_t name_len = 0;
  while (get_u32(is, name_len)) {
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated name");
    std::uint32_t rank = 0;
    if (!get_u32(is, rank)) throw std::runtime_error("checkpoint: truncated rank");
    Shape shape(rank);
    for (auto& e : shape) {
      std::uint32_t v = 0;
      if (!get_u32(is, v)) throw std::runtime_error("checkpoint: truncated extents");
      e = v;
    }
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) {
      std::uint32_t bits = 0;
      if (!get_u32(is, bits)) throw std::runtime_error("checkpoint: truncated payload");
      v = std::bit_cast<float>(bits);
    }
    params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(os, params);
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char c;
  while (is.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace rlp
