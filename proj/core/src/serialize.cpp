#include "unimask/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace unimask::io {
namespace {

template <typename U>
void write_le(std::ostream& os, U v) {
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = char((v >> (8 * i)) & 0xff);
  os.write(buf, sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(buf[i]) << (8 * i);
  return v;
}

constexpr std::uint64_t kMaxElements = std::uint64_t(1) << 32;

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v); }
void write_u16(std::ostream& os, std::uint16_t v) { write_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<std::uint32_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
std::uint16_t read_u16(std::istream& is) { return read_le<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<std::uint32_t>(is)); }

std::string read_string(std::istream& is) {
  const auto n = read_u32(is);
  if (n > (1u << 24)) throw FormatError("string length " + std::to_string(n) + " too large");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("unexpected end of file in string");
  return s;
}

void write_tensor_body(std::ostream& os, const Tensor& t) {
  write_u8(os, kDtypeF32);
  write_u8(os, std::uint8_t(t.rank()));
  for (auto e : t.shape()) write_u64(os, e);
  for (double v : t.data()) write_f32(os, float(v));
}

Tensor read_tensor_body(std::istream& is) {
  const auto dtype = read_u8(is);
  if (dtype != kDtypeF32) throw FormatError("unsupported tensor dtype tag " + std::to_string(dtype));
  const auto rank = read_u8(is);
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    e = read_u64(is);
    count *= e;
    if (count > kMaxElements) throw FormatError("tensor too large");
  }
  std::vector<double> data(count);
  for (auto& v : data) v = read_f32(is);
  return Tensor(std::move(shape), std::move(data));
}

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 4);
  write_u16(os, kTensorVersion);
  write_tensor_body(os, t);
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0) {
    throw FormatError("bad tensor magic");
  }
  const auto version = read_u16(is);
  if (version != kTensorVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version));
  }
  return read_tensor_body(is);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << contents;
}

}  // namespace unimask::io
