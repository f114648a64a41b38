#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "unimask/graph.hpp"
#include "unimask/model.hpp"
#include "unimask/optim.hpp"
#include "unimask/serialize.hpp"

namespace unimask {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Provenance {
  std::string kind;         ///< "init", "pretrain", "finetune"
  std::string config_hash;  ///< hash of the experiment config that produced it
  std::string build_tag;
  std::int64_t step = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Model parameters plus enough context to resume or audit a run. Values are
/// stored as f32, so a loaded checkpoint saves back to identical bytes.
struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  std::optional<AdamState> optimizer;
  Provenance provenance;
};

/// Build identifier compiled into the library.
std::string build_tag();

/// Layout: magic "UMCK", version u16, model config, provenance, named tensors,
/// optional optimizer moments. Little-endian throughout.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& ck);

/// Throws FormatError on a bad magic or version, or when `expected` is given
/// and differs from the stored model config.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig* expected = nullptr);
Checkpoint deserialize_checkpoint(const std::string& bytes, const ModelConfig* expected = nullptr);

}  // namespace unimask
