#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "unimask/datagen.hpp"
#include "unimask/model.hpp"
#include "unimask/tensor.hpp"

namespace unimask {

/// K centroids plus where they came from and how the fit went.
struct Codebook {
  Tensor centroids;  ///< [K x D]
  /// One of "union", "ab", "a", "b", "raw-anchor".
  std::string source;
  double inertia = 0.0;
  int iterations = 0;
  std::vector<double> inertia_history;  ///< per Lloyd assignment pass, best restart

  std::size_t k() const { return centroids.rows(); }
  std::size_t dim() const { return centroids.cols(); }
};

struct KMeansOptions {
  int max_iters = 100;
  int restarts = 3;
  std::uint64_t seed = 0;
};

/// k-means++ seeding followed by Lloyd iterations; best of `restarts` by
/// inertia. Empty clusters are reseeded at the point farthest from its
/// centroid. Throws if there are fewer points than clusters.
Codebook kmeans_fit(const Tensor& features, std::size_t k, const KMeansOptions& options = {});

/// Nearest-centroid ids; ties go to the lowest id.
std::vector<int> assign(const Codebook& codebook, const Tensor& features);

/// Sum of squared distances of `features` to their assigned centroids.
double inertia(const Codebook& codebook, const Tensor& features, const std::vector<int>& ids);

/// Stack 2-D tensors row-wise; optionally subsample to at most `max_rows`
/// rows uniformly at random (order preserved).
Tensor pool_rows(const std::vector<Tensor>& parts, std::size_t max_rows, std::uint64_t seed);

inline constexpr std::size_t kMaxPooledFrames = 200000;

/// Pseudo-label targets for a corpus.
struct TargetSet {
  std::vector<std::optional<std::vector<int>>> labels;  ///< per utterance, nullopt if excluded
  std::vector<std::string> skipped;                      ///< ids excluded (no anchor stream)
  Codebook codebook;
  int iteration = 1;

  std::size_t labeled_count() const;
};

struct TargetOptions {
  std::size_t clusters = 40;
  KMeansOptions kmeans;
  std::size_t max_pooled_frames = kMaxPooledFrames;
};

/// Iteration 1: cluster raw anchor (A) frames; utterances without A are
/// skipped. Needs no model.
TargetSet build_raw_targets(const Corpus& corpus, const TargetOptions& options);

/// Iteration >= 2: cluster final-layer features computed from every stream
/// each utterance has; every utterance receives targets.
TargetSet build_model_targets(const ParamStore& params, const ModelConfig& config,
                              const Corpus& corpus, int iteration, const TargetOptions& options);

/// Dispatch on iteration: 1 uses raw anchor frames, >= 2 requires a model.
TargetSet build_targets(const ParamStore* params, const ModelConfig* config, const Corpus& corpus,
                        int iteration, const TargetOptions& options);

/// Label a (possibly held-out) corpus with an existing codebook. Raw-anchor
/// codebooks read modality A and skip utterances without it; model codebooks
/// read final-layer features from every available stream.
std::vector<std::optional<std::vector<int>>> label_corpus(const Codebook& codebook,
                                                          const Corpus& corpus,
                                                          const ParamStore* params = nullptr,
                                                          const ModelConfig* config = nullptr);

/// Targets file: one line per labeled utterance, "id<TAB>c0 c1 ...".
void save_targets(const std::vector<std::optional<std::vector<int>>>& labels, const Corpus& corpus,
                  const std::filesystem::path& path);
/// Utterances missing from the file get no targets. Unknown ids or length
/// mismatches raise FormatError.
std::vector<std::optional<std::vector<int>>> load_targets(const std::filesystem::path& path,
                                                          const Corpus& corpus);

/// Codebook file: magic "UMKM", K u64, D u64, f32 centroids, source tag.
void save_codebook(const Codebook& codebook, const std::filesystem::path& path);
Codebook load_codebook(const std::filesystem::path& path);

}  // namespace unimask
