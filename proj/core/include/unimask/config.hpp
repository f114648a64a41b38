#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "unimask/clustering.hpp"
#include "unimask/datagen.hpp"
#include "unimask/finetune.hpp"
#include "unimask/metrics.hpp"
#include "unimask/model.hpp"
#include "unimask/pretrain.hpp"

namespace unimask {

/// Raised for malformed, unknown or out-of-range configuration entries.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Corpus sizes generated alongside the generator parameters.
struct DataConfig {
  std::size_t train_utterances = 400;
  std::size_t test_utterances = 80;
  ProfileMix mix;
  /// Size of the out-of-domain A-only corpus (0 = none).
  std::size_t ood_utterances = 200;
  double ood_perturbation = 0.8;
};

struct TargetConfig {
  int iterations = 1;
  std::size_t clusters = 40;
  int kmeans_iters = 100;
  int kmeans_restarts = 3;
  std::size_t max_pooled_frames = kMaxPooledFrames;
};

struct MetricConfig {
  std::size_t clusters = 40;
  int kmeans_iters = 40;
  int kmeans_restarts = 1;
  std::size_t max_utterances = 60;
  std::size_t projection_frames = 500;
};

/// One file fully defines an experiment. Sections: [experiment], [generator],
/// [data], [model], [targets], [pretrain], [finetune], [decode], [metrics].
/// Sub-seeds are derived from `seed` by purpose unless set explicitly.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "runs/default";
  GeneratorConfig generator;
  DataConfig data;
  ModelConfig model;
  TargetConfig targets;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  DecodeConfig decode;
  MetricConfig metrics;

  /// Validate every section; throws ConfigError.
  void validate() const;
  /// Canonical INI rendering (every key, fixed order).
  std::string to_ini() const;
  /// Stable hex digest of to_ini().
  std::string hash() const;

  TargetOptions target_options() const;
  MetricOptions metric_options() const;
};

/// Defaults with the global seed propagated to every sub-seed.
ExperimentConfig default_config(std::uint64_t seed = 1);
ExperimentConfig parse_config(const std::string& ini_text);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace unimask
