#include "cofact/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace cofact {

namespace {

constexpr std::array<char, 4> kTensorMagic{'P', 'C', 'F', 'T'};
constexpr std::array<char, 4> kArchiveMagic{'P', 'C', 'F', 'K'};
constexpr std::uint32_t kArchiveVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

void put_u16(std::ostream& out, std::uint16_t v) {
  const char bytes[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(bytes, 2);
}

void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw FormatError(std::string("truncated tensor stream while reading ") + what);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t get_u16(std::istream& in, const char* what) {
  unsigned char b[2];
  read_exact(in, reinterpret_cast<char*>(b), 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
  out.write(kTensorMagic.data(), 4);
  const auto& shape = tensor.shape();
  const char rank = static_cast<char>(shape.size());
  out.write(&rank, 1);
  for (auto e : shape) {
    if (e > 0xffffffffULL) throw FormatError("extent does not fit in 32 bits");
    put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (float v : tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw IoError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  read_exact(in, magic.data(), 4, "magic");
  if (magic != kTensorMagic) throw FormatError("bad tensor magic (expected PCFT)");
  char rank = 0;
  read_exact(in, &rank, 1, "rank");
  const auto r = static_cast<unsigned char>(rank);
  if (r > kMaxRank) throw FormatError("tensor rank " + std::to_string(r) + " exceeds 3");
  Shape shape;
  for (unsigned i = 0; i < r; ++i) {
    const auto e = get_u32(in, "extent");
    if (e == 0) throw FormatError("zero extent in tensor header");
    shape.push_back(e);
  }
  const std::size_t n = shape_size(shape);
  std::vector<unsigned char> raw(n * 4);
  read_exact(in, reinterpret_cast<char*>(raw.data()), raw.size(), "payload");
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* b = raw.data() + 4 * i;
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                               (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) |
                               (static_cast<std::uint32_t>(b[3]) << 24);
    values[i] = std::bit_cast<float>(bits);
  }
  return Tensor::constant(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, tensor);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor file " + path.string());
  try {
    return read_tensor(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

const Tensor& TensorArchive::at(const std::string& name) const {
  for (const auto& [key, tensor] : entries)
    if (key == name) return tensor;
  throw FormatError("archive has no entry '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& entry : entries)
    if (entry.first == name) return true;
  return false;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kArchiveMagic.data(), 4);
  put_u32(out, kArchiveVersion);
  put_u32(out, static_cast<std::uint32_t>(archive.metadata.size()));
  out.write(archive.metadata.data(), static_cast<std::streamsize>(archive.metadata.size()));
  put_u32(out, static_cast<std::uint32_t>(archive.entries.size()));
  for (const auto& [name, tensor] : archive.entries) {
    if (name.size() > 0xffff) throw FormatError("entry name too long: " + name.substr(0, 32));
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, tensor);
  }
  if (!out) throw IoError("failed writing archive " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  try {
    std::array<char, 4> magic{};
    read_exact(in, magic.data(), 4, "magic");
    if (magic != kArchiveMagic) throw FormatError("bad archive magic (expected PCFK)");
    const auto version = get_u32(in, "version");
    if (version != kArchiveVersion)
      throw FormatError("unsupported archive version " + std::to_string(version));
    TensorArchive archive;
    archive.metadata.resize(get_u32(in, "metadata length"));
    read_exact(in, archive.metadata.data(), archive.metadata.size(), "metadata");
    const auto count = get_u32(in, "entry count");
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name(get_u16(in, "name length"), '\0');
      read_exact(in, name.data(), name.size(), "entry name");
      archive.entries.emplace_back(std::move(name), read_tensor(in));
    }
    return archive;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace cofact
