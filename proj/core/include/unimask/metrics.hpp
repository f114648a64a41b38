#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unimask/clustering.hpp"
#include "unimask/datagen.hpp"
#include "unimask/model.hpp"

namespace unimask {

/// I(labels; clusters) / H(labels) from empirical joint counts (natural log,
/// plug-in estimates). Throws when lengths differ, input is empty, or the
/// labels have zero entropy.
double pnmi(std::span<const int> labels, std::span<const int> clusters);

/// Rows: codebook trained on {all pooled, AB, A, B} features.
/// Columns: features extracted from {AB, A, B} input.
struct PnmiMatrix {
  static constexpr std::array<const char*, 4> kRows = {"union", "ab", "a", "b"};
  static constexpr std::array<const char*, 3> kCols = {"ab", "a", "b"};
  std::array<std::array<double, 3>, 4> values{};

  double at(std::size_t row, std::size_t col) const { return values[row][col]; }
  double column_min(std::size_t col) const;
  double column_max(std::size_t col) const;
  std::string to_csv() const;
};

/// Average over feature modalities m of (own-codebook PNMI minus the mean PNMI
/// under the other two single-modality codebooks). Near zero when features of
/// every modality share one distribution.
double cross_modal_gap(const PnmiMatrix& m);

struct MetricOptions {
  std::size_t clusters = 40;
  KMeansOptions kmeans{40, 1, 0};
  /// Cap on AB utterances used (0 = all).
  std::size_t max_utterances = 0;
};

/// Features of every AB utterance under AB, A-only and B-only input are
/// clustered per source and cross-assigned. `layer` < 0 selects the final layer.
PnmiMatrix cross_quantization(const ParamStore& params, const ModelConfig& config,
                              const Corpus& corpus, const MetricOptions& options, int layer = -1);

struct LayerwisePnmi {
  std::vector<PnmiMatrix> layers;  ///< L + 1 entries, embedding output first

  std::string to_csv() const;
};

LayerwisePnmi layerwise_pnmi(const ParamStore& params, const ModelConfig& config,
                             const Corpus& corpus, const MetricOptions& options);

/// Leading principal directions of row data.
struct PcaResult {
  std::vector<double> mean;
  Tensor components;                ///< [k x D], unit rows
  std::vector<double> eigenvalues;  ///< covariance eigenvalues, descending
  bool rank_deficient = false;
};

/// Power iteration with deflation on the sample covariance (divisor n).
PcaResult pca(const Tensor& data, std::size_t k, double tol = 1e-9);

/// Project centered rows onto the components.
Tensor project(const PcaResult& pca, const Tensor& data);

struct ProjectionExport {
  Tensor features;  ///< pooled raw features [N x D]
  Tensor coords;    ///< [N x 2]
  std::vector<Profile> modality;
  std::vector<std::string> utterance;
  std::vector<std::size_t> frame;
  PcaResult basis;

  std::string to_csv() const;
};

/// Sample `n_frames` frames from AB utterances, extract features under AB, A
/// and B input at those frames, pool and project onto the top two components.
ProjectionExport project_features(const ParamStore& params, const ModelConfig& config,
                                  const Corpus& corpus, std::size_t n_frames, std::uint64_t seed);

/// Mean distance between per-modality centroids divided by the mean distance
/// of points to their own modality centroid, in projected coordinates.
double modality_separation(const ProjectionExport& e);

}  // namespace unimask
