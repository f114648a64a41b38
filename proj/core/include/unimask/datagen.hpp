#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "unimask/random.hpp"
#include "unimask/tensor.hpp"

namespace unimask {

/// Which modality streams an utterance carries. Modality A is the anchor.
enum class Profile { AB, A, B };

std::string_view to_string(Profile p);
Profile parse_profile(std::string_view s);
inline bool has_a(Profile p) { return p != Profile::B; }
inline bool has_b(Profile p) { return p != Profile::A; }

/// Parameters of the synthetic two-modality source.
///
/// A latent unit sequence follows a Markov chain over `units` states (zero
/// self-transition probability) with geometric dwell. Modality A emits
/// `W_a z(u) + sigma_a * noise`; modality B emits `W_b z(viseme(u)) +
/// sigma_b * noise`, where viseme(u) = u mod `visemes` merges units so B
/// carries strictly less information than A whenever visemes < units.
struct GeneratorConfig {
  int units = 20;
  int visemes = 10;
  int dim_a = 16;
  int dim_b = 24;
  int latent_dim = 8;
  double mean_dwell = 4.0;
  double sigma_a = 0.5;
  double sigma_b = 0.5;
  std::size_t min_frames = 40;
  std::size_t max_frames = 120;
  std::uint64_t seed = 1;
  /// Explicit transition matrix [units x units]; derived from `seed` when absent.
  std::optional<Tensor> transitions;

  void validate() const;
};

/// Fixed random maps shared by every utterance drawn from one seed.
struct EmissionModel {
  Tensor unit_embedding;  ///< [units x latent]
  Tensor map_a;           ///< [dim_a x latent]
  Tensor map_b;           ///< [dim_b x latent]
  std::vector<int> viseme_of;

  static EmissionModel from_config(const GeneratorConfig& config);
  /// Noise-free emission of unit `u` in modality A or B.
  std::vector<double> mean_a(int u) const;
  std::vector<double> mean_b(int u) const;
};

/// Default transition matrix for a seed: sparse random rows, zero diagonal.
Tensor default_transitions(int units, std::uint64_t seed);
/// Transition matrix in effect for a config (explicit or derived).
Tensor resolved_transitions(const GeneratorConfig& config);

struct Utterance {
  std::string id;
  Profile profile = Profile::AB;
  std::optional<Tensor> features_a;  ///< [T x dim_a]
  std::optional<Tensor> features_b;  ///< [T x dim_b]
  std::vector<int> units;            ///< ground truth, evaluation only
  std::vector<int> transcript;       ///< run-length collapsed units

  std::size_t frames() const { return units.size(); }
};

struct ProfileMix {
  double ab = 1.0;
  double a = 0.0;
  double b = 0.0;
};

struct CorpusSpec {
  std::size_t utterances = 100;
  ProfileMix mix;
  std::string id_prefix = "utt";
};

struct Corpus {
  GeneratorConfig config;
  CorpusSpec spec;
  std::vector<Utterance> utterances;
  std::string fingerprint;

  std::size_t total_frames() const;
};

/// Generate a corpus. Each utterance is seeded by hash(config seed, id), so the
/// result is identical for any `threads` value.
Corpus generate_corpus(const GeneratorConfig& config, const CorpusSpec& spec,
                       unsigned threads = 1);

/// Generate one utterance of a corpus.
Utterance generate_utterance(const GeneratorConfig& config, const EmissionModel& emission,
                             const Tensor& transitions, const std::string& id, Profile profile);

/// Concatenate corpora drawn from the same emission model.
Corpus merge_corpora(const Corpus& first, const Corpus& second);

/// Keep only utterances [begin, end).
Corpus slice_corpus(const Corpus& corpus, std::size_t begin, std::size_t end);

/// Out-of-domain variant: same units and emission maps, transition matrix
/// mixed toward an independent random chain by `perturbation` in [0,1], and
/// emission noise scaled by (1 + 0.5 * perturbation).
GeneratorConfig make_ood_config(const GeneratorConfig& base, double perturbation = 0.8);
Corpus make_ood_corpus(const GeneratorConfig& base, const CorpusSpec& spec,
                       double perturbation = 0.8);

/// Collapse runs of repeated values.
std::vector<int> collapse_runs(const std::vector<int>& seq);
/// Printable rendering of a unit/token sequence, one character per unit.
std::string render_transcript(const std::vector<int>& tokens);
inline constexpr std::string_view kAlphabet =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Outcome of noise augmentation.
struct NoiseResult {
  Tensor features;
  bool applied = false;
  bool skipped_zero_power = false;
};

inline constexpr double kDefaultSnrDb = 0.0;
inline constexpr double kDefaultNoiseProb = 0.25;
inline constexpr double kNoiseCorrelation = 0.9;

/// With probability `p_apply`, add AR(1) colored Gaussian noise scaled so the
/// realized signal-to-noise power ratio equals `snr_db`. A zero-power signal
/// is returned unchanged and flagged.
NoiseResult add_noise(const Tensor& features, double snr_db, double p_apply, Rng& rng);

/// 10 log10(signal power / noise power) from a clean/noisy pair.
double measured_snr_db(const Tensor& clean, const Tensor& noisy);

/// Corpus directory: `manifest.tsv`, `generator.cfg`, optional
/// `transitions.umod`, and per-utterance UMOD tensors.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

std::string generator_fingerprint(const GeneratorConfig& config, const CorpusSpec& spec);

}  // namespace unimask
