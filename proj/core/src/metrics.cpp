#include "unimask/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "unimask/random.hpp"

namespace unimask {
namespace {

std::vector<int> densify(std::span<const int> v, std::size_t& distinct) {
  std::unordered_map<int, int> ids;
  std::vector<int> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto [it, inserted] = ids.emplace(v[i], int(ids.size()));
    out[i] = it->second;
  }
  distinct = ids.size();
  return out;
}

constexpr std::array<Profile, 3> kConditions = {Profile::AB, Profile::A, Profile::B};

/// Per condition, per layer: pooled features over the selected utterances.
struct ConditionFeatures {
  std::array<std::vector<Tensor>, 3> per_condition;  // [condition][layer]
  std::vector<int> labels;
};

ConditionFeatures collect(const ParamStore& params, const ModelConfig& config, const Corpus& corpus,
                          std::size_t max_utterances) {
  std::array<std::vector<std::vector<Tensor>>, 3> parts;  // [cond][layer][utt]
  ConditionFeatures out;
  std::size_t used = 0;
  for (const auto& u : corpus.utterances) {
    if (u.profile != Profile::AB) continue;
    if (max_utterances && used >= max_utterances) break;
    ++used;
    for (std::size_t c = 0; c < kConditions.size(); ++c) {
      auto layers = extract_layers(params, config, ModalityInput::from(u, kConditions[c]));
      if (parts[c].empty()) parts[c].resize(layers.size());
      for (std::size_t l = 0; l < layers.size(); ++l) parts[c][l].push_back(std::move(layers[l]));
    }
    out.labels.insert(out.labels.end(), u.units.begin(), u.units.end());
  }
  if (!used) throw std::invalid_argument("metrics: corpus has no AB utterances");
  for (std::size_t c = 0; c < kConditions.size(); ++c) {
    for (auto& layer_parts : parts[c]) {
      out.per_condition[c].push_back(pool_rows(layer_parts, SIZE_MAX, 0));
    }
  }
  return out;
}

PnmiMatrix grid_for(const std::array<const Tensor*, 3>& feats, const std::vector<int>& labels,
                    const MetricOptions& options) {
  std::array<Codebook, 4> books;
  books[0] = kmeans_fit(pool_rows({*feats[0], *feats[1], *feats[2]}, kMaxPooledFrames,
                                  derive_seed(options.kmeans.seed, "union")),
                        options.clusters, options.kmeans);
  for (std::size_t c = 0; c < 3; ++c) {
    books[c + 1] = kmeans_fit(*feats[c], options.clusters, options.kmeans);
  }
  PnmiMatrix m;
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 3; ++c) m.values[r][c] = pnmi(labels, assign(books[r], *feats[c]));
  }
  return m;
}

}  // namespace

double pnmi(std::span<const int> labels, std::span<const int> clusters) {
  if (labels.size() != clusters.size()) throw std::invalid_argument("pnmi: length mismatch");
  if (labels.empty()) throw std::invalid_argument("pnmi: no frames");
  std::size_t ny = 0, nc = 0;
  const auto y = densify(labels, ny);
  const auto c = densify(clusters, nc);
  std::vector<double> joint(ny * nc, 0.0), py(ny, 0.0), pc(nc, 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    joint[std::size_t(y[i]) * nc + std::size_t(c[i])] += 1.0;
    py[std::size_t(y[i])] += 1.0;
    pc[std::size_t(c[i])] += 1.0;
  }
  const double n = double(y.size());
  double hy = 0.0;
  for (double v : py) hy -= (v / n) * std::log(v / n);
  if (!(hy > 0.0)) throw std::invalid_argument("pnmi: labels have zero entropy");
  double mi = 0.0;
  for (std::size_t a = 0; a < ny; ++a) {
    for (std::size_t b = 0; b < nc; ++b) {
      const double j = joint[a * nc + b];
      if (j > 0.0) mi += (j / n) * std::log(j * n / (py[a] * pc[b]));
    }
  }
  return std::clamp(mi / hy, 0.0, 1.0);
}

double PnmiMatrix::column_min(std::size_t col) const {
  double m = values[0][col];
  for (const auto& row : values) m = std::min(m, row[col]);
  return m;
}

double PnmiMatrix::column_max(std::size_t col) const {
  double m = values[0][col];
  for (const auto& row : values) m = std::max(m, row[col]);
  return m;
}

std::string PnmiMatrix::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << "codebook,ab,a,b\n";
  for (std::size_t r = 0; r < 4; ++r) {
    os << kRows[r];
    for (double v : values[r]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

double cross_modal_gap(const PnmiMatrix& m) {
  double gap = 0.0;
  for (std::size_t f = 0; f < 3; ++f) {
    const double own = m.values[f + 1][f];
    double other = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      if (c != f) other += m.values[c + 1][f];
    }
    gap += own - other / 2.0;
  }
  return gap / 3.0;
}

PnmiMatrix cross_quantization(const ParamStore& params, const ModelConfig& config,
                              const Corpus& corpus, const MetricOptions& options, int layer) {
  const ConditionFeatures cf = collect(params, config, corpus, options.max_utterances);
  const std::size_t n_layers = cf.per_condition[0].size();
  const std::size_t l = layer < 0 ? n_layers - 1 : std::size_t(layer);
  if (l >= n_layers) throw std::out_of_range("cross_quantization: layer out of range");
  return grid_for({&cf.per_condition[0][l], &cf.per_condition[1][l], &cf.per_condition[2][l]},
                  cf.labels, options);
}

std::string LayerwisePnmi::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << "layer,codebook,feature,pnmi\n";
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t c = 0; c < 3; ++c) {
        os << l << ',' << PnmiMatrix::kRows[r] << ',' << PnmiMatrix::kCols[c] << ','
           << layers[l].values[r][c] << '\n';
      }
    }
  }
  return os.str();
}

LayerwisePnmi layerwise_pnmi(const ParamStore& params, const ModelConfig& config,
                             const Corpus& corpus, const MetricOptions& options) {
  const ConditionFeatures cf = collect(params, config, corpus, options.max_utterances);
  LayerwisePnmi out;
  for (std::size_t l = 0; l < cf.per_condition[0].size(); ++l) {
    out.layers.push_back(grid_for(
        {&cf.per_condition[0][l], &cf.per_condition[1][l], &cf.per_condition[2][l]}, cf.labels,
        options));
  }
  return out;
}

PcaResult pca(const Tensor& data, std::size_t k, double tol) {
  if (data.rank() != 2 || data.rows() == 0) throw ShapeError("pca: need non-empty 2-D data");
  const std::size_t n = data.rows(), d = data.cols();
  PcaResult r;
  r.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) r.mean[j] += data.at(i, j);
  }
  for (double& m : r.mean) m /= double(n);
  Tensor cov = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = data.at(i, a) - r.mean[a];
      for (std::size_t b = 0; b < d; ++b) cov.at(a, b) += xa * (data.at(i, b) - r.mean[b]);
    }
  }
  for (double& v : cov.storage()) v /= double(n);
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov.at(a, a);

  std::vector<std::vector<double>> comps;
  for (std::size_t c = 0; c < std::min(k, d); ++c) {
    std::vector<double> v(d), w(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 + 0.1 * double(j % 7) + 0.01 * double(c);
    double lambda = 0.0;
    for (int it = 0; it < 200000; ++it) {
      double norm = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b) s += cov.at(a, b) * v[b];
        w[a] = s;
        norm += s * s;
      }
      norm = std::sqrt(norm);
      if (norm == 0.0) break;
      double delta = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        w[a] /= norm;
        delta = std::max(delta, std::abs(w[a] - v[a]));
      }
      v.swap(w);
      lambda = norm;
      if (delta < tol) break;
    }
    if (!(lambda > 1e-12 * std::max(trace, 1e-300))) {
      r.rank_deficient = true;
      break;
    }
    // Rayleigh quotient for the eigenvalue.
    double rq = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < d; ++b) s += cov.at(a, b) * v[b];
      rq += v[a] * s;
    }
    // Fix the sign: largest-magnitude coordinate positive.
    const auto big = std::max_element(v.begin(), v.end(),
                                      [](double x, double y) { return std::abs(x) < std::abs(y); });
    if (*big < 0) {
      for (double& x : v) x = -x;
    }
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) cov.at(a, b) -= rq * v[a] * v[b];
    }
    r.eigenvalues.push_back(rq);
    comps.push_back(std::move(v));
  }
  if (comps.size() < k) r.rank_deficient = true;
  r.components = Tensor::matrix(comps.size(), d);
  for (std::size_t c = 0; c < comps.size(); ++c) {
    std::copy(comps[c].begin(), comps[c].end(), r.components.row(c).begin());
  }
  return r;
}

Tensor project(const PcaResult& p, const Tensor& data) {
  const std::size_t k = p.components.rows();
  Tensor out = Tensor::matrix(data.rows(), k);
  for (std::size_t i = 0; i < data.rows(); ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < data.cols(); ++j) {
        s += (data.at(i, j) - p.mean[j]) * p.components.at(c, j);
      }
      out.at(i, c) = s;
    }
  }
  return out;
}

std::string ProjectionExport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(9) << "x,y,modality,utterance,frame\n";
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    os << coords.at(i, 0) << ',' << (coords.cols() > 1 ? coords.at(i, 1) : 0.0) << ','
       << to_string(modality[i]) << ',' << utterance[i] << ',' << frame[i] << '\n';
  }
  return os.str();
}

ProjectionExport project_features(const ParamStore& params, const ModelConfig& config,
                                  const Corpus& corpus, std::size_t n_frames, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> positions;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto& u = corpus.utterances[i];
    if (u.profile != Profile::AB) continue;
    for (std::size_t t = 0; t < u.frames(); ++t) positions.emplace_back(i, t);
  }
  if (positions.size() < n_frames) {
    throw std::invalid_argument("project_features: corpus has fewer than n_frames AB frames");
  }
  Rng rng(derive_seed(seed, "projection"));
  std::shuffle(positions.begin(), positions.end(), rng.engine());
  positions.resize(n_frames);
  std::sort(positions.begin(), positions.end());

  ProjectionExport e;
  const auto dc = std::size_t(config.embed_dim);
  e.features = Tensor::matrix(3 * n_frames, dc);
  std::size_t row = 0;
  for (Profile cond : kConditions) {
    std::size_t cached = SIZE_MAX;
    Tensor feats;
    for (const auto& [ui, t] : positions) {
      if (ui != cached) {
        feats = extract_features(params, config, ModalityInput::from(corpus.utterances[ui], cond));
        cached = ui;
      }
      std::copy(feats.row(t).begin(), feats.row(t).end(), e.features.row(row++).begin());
      e.modality.push_back(cond);
      e.utterance.push_back(corpus.utterances[ui].id);
      e.frame.push_back(t);
    }
  }
  e.basis = pca(e.features, 2);
  e.coords = project(e.basis, e.features);
  return e;
}

double modality_separation(const ProjectionExport& e) {
  const std::size_t k = e.coords.cols();
  std::array<std::vector<double>, 3> centroid;
  std::array<std::size_t, 3> count{};
  for (auto& c : centroid) c.assign(k, 0.0);
  auto slot = [](Profile p) { return p == Profile::AB ? 0u : (p == Profile::A ? 1u : 2u); };
  for (std::size_t i = 0; i < e.coords.rows(); ++i) {
    const auto s = slot(e.modality[i]);
    for (std::size_t j = 0; j < k; ++j) centroid[s][j] += e.coords.at(i, j);
    ++count[s];
  }
  for (std::size_t s = 0; s < 3; ++s) {
    for (double& v : centroid[s]) v /= double(std::max<std::size_t>(count[s], 1));
  }
  auto dist = [&](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return std::sqrt(s);
  };
  double inter = 0.0;
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = a + 1; b < 3; ++b) inter += dist(centroid[a], centroid[b]);
  }
  inter /= 3.0;
  double intra = 0.0;
  for (std::size_t i = 0; i < e.coords.rows(); ++i) {
    intra += dist(e.coords.row(i), centroid[slot(e.modality[i])]);
  }
  intra /= double(std::max<std::size_t>(e.coords.rows(), 1));
  return inter / intra;
}

}  // namespace unimask
