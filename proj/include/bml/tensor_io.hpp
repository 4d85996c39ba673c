#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bml/tensor.hpp"

namespace bml {

// Binary tensor layout (all little-endian):
//   "TNSR" | u32 rank | u64 dim[rank] | f64 payload[product(dims)]
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// Versioned model container:
//   "BMLCKPT 1\n", then "key=value\n" header lines, then an empty line,
//   then u32 tensor count and per tensor: u32 name length, name bytes,
//   one TNSR block. Doubles in the header use round-trip decimal text.
struct Checkpoint {
  static constexpr int kVersion = 1;

  std::vector<std::pair<std::string, std::string>> header;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void set(const std::string& key, const std::string& value);
  std::optional<std::string> find(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  const Tensor& tensor(const std::string& name) const;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace bml
