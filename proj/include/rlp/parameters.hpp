#pragma once

#include <deque>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>

#include "rlp/tensor.hpp"

namespace rlp {

/// Ordered collection of named trainable tensors. References returned by
/// add()/at() stay valid while the set is alive.
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  /// Inserts a tensor with requires_grad enabled. Names must be unique.
  Tensor& add(std::string name, Tensor value);
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();

  /// Same names, order, shapes and bit-identical values.
  friend bool operator==(const ParameterSet& a, const ParameterSet& b);

 private:
  std::deque<Entry> entries_;
};

// Checkpoint layout: the ASCII magic "PDT1", then per tensor
//   u32 name length | UTF-8 name | u32 rank | u32 extent * rank | f32 payload
// with every integer and float little-endian. The stream ends after the last
// tensor.
inline constexpr std::string_view kCheckpointMagic = "PDT1";

void write_checkpoint(std::ostream& os, const ParameterSet& params);
ParameterSet read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params);
ParameterSet load_checkpoint(const std::filesystem::path& path);

/// Hex digest of a file's bytes (FNV-1a 64), used for provenance records.
std::string file_digest(const std::filesystem::path& path);

}  // namespace rlp
