#include "unimask/checkpoint.hpp"

#include <cstring>
#include <sstream>

#ifndef UNIMASK_BUILD_TAG
#define UNIMASK_BUILD_TAG "unknown"
#endif

namespace unimask {
namespace {

constexpr char kMagic[4] = {'U', 'M', 'C', 'K'};

void write_i64(std::ostream& os, std::int64_t v) { io::write_u64(os, std::uint64_t(v)); }
std::int64_t read_i64(std::istream& is) { return std::int64_t(io::read_u64(is)); }
void write_i32(std::ostream& os, int v) { io::write_u32(os, std::uint32_t(v)); }
int read_i32(std::istream& is) { return int(std::int32_t(io::read_u32(is))); }

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  io::write_u64(os, bits);
}

double read_f64(std::istream& is) {
  const std::uint64_t bits = io::read_u64(is);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

void write_config(std::ostream& os, const ModelConfig& c) {
  for (int v : {c.dim_a, c.dim_b, c.frontend_dim, c.embed_dim, c.layers, c.heads, c.ffn_dim,
                c.clusters, c.decoder_layers, c.classes}) {
    write_i32(os, v);
  }
  io::write_u8(os, c.positional ? 1 : 0);
}

ModelConfig read_config(std::istream& is) {
  ModelConfig c;
  for (int* v : {&c.dim_a, &c.dim_b, &c.frontend_dim, &c.embed_dim, &c.layers, &c.heads,
                 &c.ffn_dim, &c.clusters, &c.decoder_layers, &c.classes}) {
    *v = read_i32(is);
  }
  c.positional = io::read_u8(is) != 0;
  return c;
}

std::string describe(const ModelConfig& c) {
  std::ostringstream os;
  os << "dim_a=" << c.dim_a << " dim_b=" << c.dim_b << " frontend_dim=" << c.frontend_dim
     << " embed_dim=" << c.embed_dim << " layers=" << c.layers << " heads=" << c.heads
     << " ffn_dim=" << c.ffn_dim << " clusters=" << c.clusters
     << " decoder_layers=" << c.decoder_layers << " classes=" << c.classes
     << " positional=" << c.positional;
  return os.str();
}

}  // namespace

std::string build_tag() { return UNIMASK_BUILD_TAG; }

std::string serialize_checkpoint(const Checkpoint& ck) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, 4);
  io::write_u16(os, kCheckpointVersion);
  write_config(os, ck.config);
  io::write_string(os, ck.provenance.kind);
  io::write_string(os, ck.provenance.config_hash);
  io::write_string(os, ck.provenance.build_tag);
  write_i64(os, ck.provenance.step);
  io::write_u64(os, ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    io::write_string(os, ck.params.name(i));
    io::write_tensor_body(os, ck.params.value(i));
  }
  io::write_u8(os, ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const AdamState& a = *ck.optimizer;
    if (a.m.size() != ck.params.size() || a.v.size() != ck.params.size()) {
      throw FormatError("checkpoint: optimizer state does not align with parameters");
    }
    write_f64(os, a.beta1);
    write_f64(os, a.beta2);
    write_f64(os, a.eps);
    write_i64(os, a.step);
    for (std::size_t i = 0; i < a.m.size(); ++i) {
      io::write_tensor_body(os, a.m[i]);
      io::write_tensor_body(os, a.v[i]);
    }
  }
  return os.str();
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(ck));
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const ModelConfig* expected) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const auto version = io::read_u16(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.config = read_config(is);
  if (expected && !(*expected == ck.config)) {
    throw FormatError("checkpoint model config mismatch: stored {" + describe(ck.config) +
                      "} vs expected {" + describe(*expected) + "}");
  }
  ck.provenance.kind = io::read_string(is);
  ck.provenance.config_hash = io::read_string(is);
  ck.provenance.build_tag = io::read_string(is);
  ck.provenance.step = read_i64(is);
  const auto n = io::read_u64(is);
  if (n > 100000) throw FormatError("checkpoint: implausible parameter count");
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = io::read_string(is);
    ck.params.add(std::move(name), io::read_tensor_body(is));
  }
  if (io::read_u8(is)) {
    AdamState a;
    a.beta1 = read_f64(is);
    a.beta2 = read_f64(is);
    a.eps = read_f64(is);
    a.step = read_i64(is);
    for (std::uint64_t i = 0; i < n; ++i) {
      a.m.push_back(io::read_tensor_body(is));
      a.v.push_back(io::read_tensor_body(is));
    }
    ck.optimizer = std::move(a);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  return deserialize_checkpoint(io::read_file(path), expected);
}

}  // namespace unimask
