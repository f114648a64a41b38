#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "unimask/datagen.hpp"
#include "unimask/model.hpp"
#include "unimask/optim.hpp"
#include "unimask/pretrain.hpp"

namespace unimask {

enum class Task { Frame, Seq2Seq };
std::string_view to_string(Task t);
Task parse_task(std::string_view s);

struct FinetuneConfig {
  Task task = Task::Frame;
  /// Streams used for supervision. AB applies `dropout`; A or B restricts
  /// every utterance to that stream.
  Profile profile = Profile::A;
  ModalityDropoutConfig dropout;
  double lr = 1e-3;
  TriStageSchedule schedule;
  std::int64_t updates = 3000;
  /// Updates during which the whole pre-trained network is frozen.
  std::int64_t nfrz = 1500;
  /// Encoder blocks frozen throughout (0..lfrz-1). Any lfrz >= 1 also freezes
  /// the frontends, fusion and mask embedding below block 0; lfrz = L also
  /// freezes the final layer norm.
  int lfrz = 0;
  std::size_t batch_frames = 400;
  NoiseConfig noise;
  double clip = 1.0;
  std::uint64_t seed = 1;

  void validate(const ModelConfig& model) const;
};

struct FinetuneRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  ///< frame or next-token accuracy of the batch
  double lr = 0.0;
  double grad_norm = 0.0;

  std::string to_json() const;
};

struct FinetuneResult {
  ParamStore params;
  std::vector<FinetuneRecord> log;
};

/// True when parameter `name` stays fixed for the whole run under `lfrz`.
bool frozen_by_lfrz(std::string_view name, int lfrz, int layers);

/// Drop the cluster head, attach a seeded task head and train it (and, after
/// `nfrz` updates, the unfrozen encoder) on transcripts.
FinetuneResult finetune(ParamStore params, const ModelConfig& model, const Corpus& corpus,
                        const FinetuneConfig& config);

/// Levenshtein alignment counts.
struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t matches = 0;

  std::size_t errors() const { return substitutions + insertions + deletions; }
};

EditCounts align(std::span<const int> reference, std::span<const int> hypothesis);
/// (S + I + D) / |reference|; throws on an empty reference.
double wer(std::span<const int> reference, std::span<const int> hypothesis);

/// Next-token log-probabilities given a prefix that starts with the start symbol.
using StepScorer = std::function<std::vector<double>(std::span<const int>)>;

struct BeamConfig {
  std::size_t beam = 1;
  double alpha = 0.0;
  std::size_t max_len = 32;  ///< generated tokens, end symbol included
  int sos = 0;
  int eos = 1;
  /// Symbols never proposed (e.g. start and padding).
  std::vector<int> banned;
};

struct Hypothesis {
  std::vector<int> tokens;  ///< generated tokens, without start or end symbols
  double log_prob = 0.0;    ///< raw sum over generated tokens (end included)
  double score = 0.0;       ///< log_prob / length^alpha
  std::size_t length = 0;   ///< generated tokens including the end symbol
  bool forced_end = false;  ///< max_len reached without an end symbol
};

/// Beam search. Each step ranks all expansions of the live beams by raw
/// log-probability sum (ties: lexicographically smaller sequence) and keeps
/// the best `beam - finished` of them; expansions ending in the end symbol
/// retire. The result is the finished hypothesis with the best normalized
/// score; with none finished, the best forced-ended one.
Hypothesis beam_search(const StepScorer& scorer, const BeamConfig& config);
/// Argmax at every step (lowest id on ties) until the end symbol or max_len.
Hypothesis greedy_decode(const StepScorer& scorer, const BeamConfig& config);

/// Normalized score used to rank finished hypotheses.
double length_normalized(double log_prob, std::size_t length, double alpha);

struct EvalCondition {
  Profile input = Profile::AB;
  bool noisy = false;

  std::string name() const;
};

/// AB clean, AB noisy, A clean, A noisy, B.
std::array<EvalCondition, 5> standard_conditions();

struct DecodeConfig {
  bool greedy = false;
  std::size_t beam = 1;
  double alpha = 1.0;
  std::size_t max_len = 0;  ///< 0: frames + 1
};

struct EvalEntry {
  EvalCondition condition;
  double wer = 0.0;             ///< corpus level: total edits / total reference tokens
  double token_accuracy = 0.0;  ///< aligned matches / reference tokens
  std::size_t utterances = 0;
  DecodeConfig decode;

  std::string to_json() const;
};

/// Transcribe every utterance that carries the streams `condition` needs.
/// Noise, when requested, is 0 dB colored noise on modality A, seeded per
/// utterance from `seed`.
EvalEntry evaluate(const ParamStore& params, const ModelConfig& model, const Corpus& corpus,
                   const EvalCondition& condition, const DecodeConfig& decode,
                   std::uint64_t seed = 7);

/// Hypothesis transcript of one input.
std::vector<int> transcribe(const ParamStore& params, const ModelConfig& model,
                            const ModalityInput& input, const DecodeConfig& decode);

struct TransferMatrix {
  static constexpr std::array<Profile, 3> kFinetuneProfiles = {Profile::AB, Profile::A, Profile::B};
  std::array<std::array<EvalEntry, 5>, 3> entries;

  double row_average(std::size_t row) const;
  std::string to_csv() const;
};

/// Fine-tune on AB, A and B labels and evaluate each on every standard condition.
TransferMatrix transfer_matrix(const ParamStore& pretrained, const ModelConfig& model,
                               const Corpus& train, const Corpus& test,
                               const FinetuneConfig& base, const DecodeConfig& decode);

}  // namespace unimask
