#pragma once

// Binary tensor files.
//
// Tensor record ("PCFT"):
//   4 bytes  magic "PCFT"
//   u8       rank (0..3)
//   u32 LE   extent, repeated rank times
//   f32 LE   payload, row-major, product(extents) values
//
// Named-tensor archive ("PCFK"), used for checkpoints:
//   4 bytes  magic "PCFK"
//   u32 LE   format version (1)
//   u32 LE   metadata byte length, then UTF-8 metadata (JSON)
//   u32 LE   entry count
//   per entry: u16 LE name length, name bytes, one tensor record

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "cofact/tensor.hpp"

namespace cofact {

void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

struct TensorArchive {
  std::string metadata;
  std::vector<std::pair<std::string, Tensor>> entries;

  // Throws FormatError naming the entry when absent.
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

}  // namespace cofact
