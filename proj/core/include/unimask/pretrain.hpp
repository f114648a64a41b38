#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unimask/clustering.hpp"
#include "unimask/datagen.hpp"
#include "unimask/gradcheck.hpp"
#include "unimask/graph.hpp"
#include "unimask/model.hpp"
#include "unimask/optim.hpp"
#include "unimask/random.hpp"

namespace unimask {

/// Categorical distribution over the input subsets of a two-stream utterance.
struct ModalityDropoutConfig {
  double p_ab = 0.5;
  double p_a = 0.25;
  double p_b = 0.25;

  static ModalityDropoutConfig none() { return {1.0, 0.0, 0.0}; }
  void validate() const;
};

/// AB utterances draw a subset with one uniform variate; unimodal utterances
/// keep their single stream and consume no randomness.
Profile sample_modalities(const ModalityDropoutConfig& config, Profile profile, Rng& rng);

struct MaskSpec {
  double p_mask = 0.0;
  std::size_t span = 0;
  std::vector<std::size_t> indices;  ///< sorted, unique, all < T

  bool empty() const { return indices.empty(); }
};

/// Every frame starts a span of `span` frames with probability `p_mask`; the
/// mask is the union of spans clipped to [0, T). Draws exactly T variates.
MaskSpec sample_mask(std::size_t frames, double p_mask, std::size_t span, Rng& rng);

struct MaskedLoss {
  std::optional<NodeId> loss;  ///< absent when nothing is weighted (utterance skipped)
  double weight = 0.0;         ///< total frame weight behind the mean
  std::size_t masked = 0;
  std::size_t correct = 0;     ///< argmax hits on masked frames
};

/// Mean cross-entropy over masked frames; unmasked frames carry
/// `unmasked_weight` (0 by default, so their logits do not matter).
MaskedLoss masked_prediction_loss(Graph& g, NodeId logits, std::span<const int> targets,
                                  const MaskSpec& mask, double unmasked_weight = 0.0);

struct NoiseConfig {
  bool enabled = true;
  double snr_db = kDefaultSnrDb;
  double p_apply = kDefaultNoiseProb;
};

struct PretrainConfig {
  std::int64_t updates = 2000;
  double peak_lr = 2e-3;
  double warmup_fraction = 0.08;
  /// Utterances are drawn until their frames reach this budget.
  std::size_t batch_frames = 400;
  ModalityDropoutConfig dropout;
  double mask_prob = 0.08;
  std::size_t mask_span = 5;
  double unmasked_weight = 0.0;
  NoiseConfig noise;
  double clip = 1.0;
  std::uint64_t seed = 1;
  std::int64_t log_interval = 100;
  /// Checkpoint callback cadence in updates (0 = end only).
  std::int64_t checkpoint_interval = 0;

  void validate() const;
};

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double masked_acc = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;

  std::string to_json() const;
};

struct PretrainStats {
  std::size_t skipped_empty_mask = 0;
  std::size_t noise_applied = 0;
  std::size_t noise_skipped_zero_power = 0;
  std::array<std::size_t, 3> subsets{};  ///< drawn inputs: AB, A, B
  std::uint64_t modality_draws = 0;      ///< variates consumed by modality sampling
};

struct PretrainResult {
  ParamStore params;
  AdamState optimizer;
  std::vector<StepRecord> log;
  PretrainStats stats;
};

/// Called with the update count at every checkpoint interval and at the end.
using CheckpointFn = std::function<void(std::int64_t, const ParamStore&, const AdamState&)>;
using LogFn = std::function<void(const StepRecord&)>;

/// Raised when training produces a non-finite value.
class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Masked cluster prediction training. Utterances without targets are never
/// drawn. Throws TrainingError naming the step and batch on non-finite loss.
PretrainResult pretrain(ParamStore params, const ModelConfig& model, const Corpus& corpus,
                        const std::vector<std::optional<std::vector<int>>>& targets,
                        const PretrainConfig& config, const CheckpointFn& on_checkpoint = {},
                        const LogFn& on_log = {});

/// Masked-prediction accuracy with every available stream present, masks drawn
/// from `seed`. Utterances without targets or with empty masks are ignored.
double masked_accuracy(const ParamStore& params, const ModelConfig& model, const Corpus& corpus,
                       const std::vector<std::optional<std::vector<int>>>& targets,
                       const PretrainConfig& config, std::uint64_t seed);

/// Finite-difference check of the masked-prediction loss through the whole
/// encoder and cluster head on one synthetic utterance of `frames` frames.
GradCheckResult pretrain_gradcheck(const ModelConfig& model, std::uint64_t seed,
                                   std::size_t frames = 12, const GradCheckOptions& options = {});

struct IterationConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  TargetOptions targets;
  std::uint64_t init_seed = 1;
};

struct IterationRecord {
  int iteration = 0;
  Codebook codebook;
  std::size_t labeled_utterances = 0;
  std::vector<std::string> skipped;
  double target_pnmi = 0.0;  ///< PNMI of targets against ground-truth units
};

struct IterationResult {
  ParamStore params;
  std::vector<IterationRecord> iterations;
  std::vector<StepRecord> last_log;
};

/// Alternate target building and training from a fresh initialization.
IterationResult run_iteration_cycle(const Corpus& corpus, int iterations,
                                    const IterationConfig& config);

}  // namespace unimask
