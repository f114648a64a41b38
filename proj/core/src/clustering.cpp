#include "unimask/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <stdexcept>

#include "unimask/random.hpp"
#include "unimask/serialize.hpp"

namespace unimask {
namespace {

inline double sq_dist(std::span<const double> x, std::span<const double> c) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - c[i];
    s += d * d;
  }
  return s;
}

/// Assign every row; fills ids and per-point distances, returns total inertia.
double assign_all(const Tensor& centroids, const Tensor& x, std::vector<int>& ids,
                  std::vector<double>& dist) {
  const std::size_t n = x.rows(), k = centroids.rows();
  ids.resize(n);
  dist.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = x.row(i);
    double best = std::numeric_limits<double>::infinity();
    int best_id = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = sq_dist(row, centroids.row(c));
      if (d < best) {
        best = d;
        best_id = int(c);
      }
    }
    ids[i] = best_id;
    dist[i] = best;
    total += best;
  }
  return total;
}

Tensor kmeanspp_init(const Tensor& x, std::size_t k, Rng& rng) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor c = Tensor::matrix(k, d);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.index(n);
  for (std::size_t j = 0; j < k; ++j) {
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sq_dist(x.row(i), c.row(j)));
      total += nearest[i];
    }
    if (j + 1 == k) break;
    if (total <= 0.0) {
      pick = rng.index(n);
      continue;
    }
    double r = rng.uniform() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      r -= nearest[i];
      if (r < 0.0 && nearest[i] > 0.0) {
        pick = i;
        break;
      }
    }
  }
  return c;
}

Codebook lloyd(const Tensor& x, std::size_t k, int max_iters, Rng& rng) {
  const std::size_t n = x.rows(), d = x.cols();
  Codebook cb;
  cb.centroids = kmeanspp_init(x, k, rng);
  std::vector<int> ids, prev;
  std::vector<double> dist;
  for (int it = 0; it < max_iters; ++it) {
    const double total = assign_all(cb.centroids, x, ids, dist);
    cb.inertia_history.push_back(total);
    cb.iterations = it + 1;
    if (ids == prev) break;
    prev = ids;

    Tensor sums = Tensor::matrix(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sums.row(std::size_t(ids[i]));
      auto row = x.row(i);
      for (std::size_t j = 0; j < d; ++j) s[j] += row[j];
      ++counts[std::size_t(ids[i])];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Reseed at the point currently farthest from its centroid.
        const auto far = std::size_t(std::max_element(dist.begin(), dist.end()) - dist.begin());
        std::copy(x.row(far).begin(), x.row(far).end(), cb.centroids.row(c).begin());
        dist[far] = 0.0;
        continue;
      }
      auto out = cb.centroids.row(c);
      auto s = sums.row(c);
      for (std::size_t j = 0; j < d; ++j) out[j] = s[j] / double(counts[c]);
    }
  }
  cb.inertia = assign_all(cb.centroids, x, ids, dist);
  if (cb.inertia_history.empty() || cb.inertia != cb.inertia_history.back()) {
    cb.inertia_history.push_back(cb.inertia);
  }
  return cb;
}

}  // namespace

Codebook kmeans_fit(const Tensor& features, std::size_t k, const KMeansOptions& options) {
  if (features.rank() != 2) throw ShapeError("kmeans_fit: features must be 2-D");
  if (k < 2) throw std::invalid_argument("kmeans_fit: need K >= 2");
  if (features.rows() < k) {
    throw std::invalid_argument("kmeans_fit: " + std::to_string(features.rows()) +
                                " points cannot form " + std::to_string(k) + " clusters");
  }
  if (options.restarts < 1 || options.max_iters < 1) {
    throw std::invalid_argument("kmeans_fit: restarts and max_iters must be positive");
  }
  std::optional<Codebook> best;
  for (int r = 0; r < options.restarts; ++r) {
    Rng rng(derive_seed(options.seed, std::uint64_t(r)));
    Codebook cb = lloyd(features, k, options.max_iters, rng);
    if (!best || cb.inertia < best->inertia) best = std::move(cb);
  }
  return *best;
}

std::vector<int> assign(const Codebook& codebook, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != codebook.dim()) {
    throw ShapeError("assign: features " + shape_string(features.shape()) +
                     " do not match codebook dimension " + std::to_string(codebook.dim()));
  }
  std::vector<int> ids;
  std::vector<double> dist;
  assign_all(codebook.centroids, features, ids, dist);
  return ids;
}

double inertia(const Codebook& codebook, const Tensor& features, const std::vector<int>& ids) {
  double s = 0.0;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    s += sq_dist(features.row(i), codebook.centroids.row(std::size_t(ids[i])));
  }
  return s;
}

Tensor pool_rows(const std::vector<Tensor>& parts, std::size_t max_rows, std::uint64_t seed) {
  std::size_t total = 0, dim = 0;
  for (const auto& p : parts) {
    if (p.rows() == 0) continue;
    if (dim && p.cols() != dim) throw ShapeError("pool_rows: inconsistent feature dimensions");
    dim = p.cols();
    total += p.rows();
  }
  std::vector<std::size_t> keep(total);
  std::iota(keep.begin(), keep.end(), 0);
  if (total > max_rows) {
    Rng rng(derive_seed(seed, "pool"));
    std::shuffle(keep.begin(), keep.end(), rng.engine());
    keep.resize(max_rows);
    std::sort(keep.begin(), keep.end());
  }
  Tensor out = Tensor::matrix(keep.size(), dim);
  std::size_t part = 0, base = 0, out_row = 0;
  for (std::size_t flat : keep) {
    while (flat >= base + parts[part].rows()) base += parts[part++].rows();
    auto src = parts[part].row(flat - base);
    std::copy(src.begin(), src.end(), out.row(out_row++).begin());
  }
  return out;
}

std::size_t TargetSet::labeled_count() const {
  return std::size_t(std::count_if(labels.begin(), labels.end(), [](const auto& l) { return l.has_value(); }));
}

TargetSet build_raw_targets(const Corpus& corpus, const TargetOptions& options) {
  TargetSet ts;
  ts.iteration = 1;
  ts.labels.resize(corpus.utterances.size());
  std::vector<Tensor> parts;
  for (const auto& u : corpus.utterances) {
    if (u.features_a) {
      parts.push_back(*u.features_a);
    } else {
      ts.skipped.push_back(u.id);
    }
  }
  if (parts.empty()) {
    throw std::invalid_argument("build_targets: iteration 1 needs utterances with the anchor modality");
  }
  ts.codebook = kmeans_fit(pool_rows(parts, options.max_pooled_frames, options.kmeans.seed),
                           options.clusters, options.kmeans);
  ts.codebook.source = "raw-anchor";
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto& u = corpus.utterances[i];
    if (u.features_a) ts.labels[i] = assign(ts.codebook, *u.features_a);
  }
  return ts;
}

TargetSet build_model_targets(const ParamStore& params, const ModelConfig& config,
                              const Corpus& corpus, int iteration, const TargetOptions& options) {
  if (iteration < 2) throw std::invalid_argument("build_model_targets: iteration must be >= 2");
  TargetSet ts;
  ts.iteration = iteration;
  ts.labels.resize(corpus.utterances.size());
  std::vector<Tensor> feats;
  bool all_ab = true;
  for (const auto& u : corpus.utterances) {
    feats.push_back(extract_features(params, config, ModalityInput::from(u)));
    all_ab = all_ab && u.profile == Profile::AB;
  }
  ts.codebook = kmeans_fit(pool_rows(feats, options.max_pooled_frames, options.kmeans.seed),
                           options.clusters, options.kmeans);
  ts.codebook.source = all_ab ? "ab" : "union";
  for (std::size_t i = 0; i < feats.size(); ++i) ts.labels[i] = assign(ts.codebook, feats[i]);
  return ts;
}

TargetSet build_targets(const ParamStore* params, const ModelConfig* config, const Corpus& corpus,
                        int iteration, const TargetOptions& options) {
  if (iteration < 1) throw std::invalid_argument("build_targets: iteration must be >= 1");
  if (iteration == 1) return build_raw_targets(corpus, options);
  if (!params || !config) throw std::invalid_argument("build_targets: iteration >= 2 needs a model");
  return build_model_targets(*params, *config, corpus, iteration, options);
}

std::vector<std::optional<std::vector<int>>> label_corpus(const Codebook& codebook,
                                                          const Corpus& corpus,
                                                          const ParamStore* params,
                                                          const ModelConfig* config) {
  std::vector<std::optional<std::vector<int>>> out(corpus.utterances.size());
  const bool raw = codebook.source == "raw-anchor";
  if (!raw && (!params || !config)) {
    throw std::invalid_argument("label_corpus: a model codebook needs model parameters");
  }
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto& u = corpus.utterances[i];
    if (raw) {
      if (u.features_a) out[i] = assign(codebook, *u.features_a);
    } else {
      out[i] = assign(codebook, extract_features(*params, *config, ModalityInput::from(u)));
    }
  }
  return out;
}

void save_targets(const std::vector<std::optional<std::vector<int>>>& labels, const Corpus& corpus,
                  const std::filesystem::path& path) {
  if (labels.size() != corpus.utterances.size()) {
    throw std::invalid_argument("save_targets: labels do not align with the corpus");
  }
  std::ostringstream os;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    os << corpus.utterances[i].id << '\t';
    for (std::size_t t = 0; t < labels[i]->size(); ++t) os << (t ? " " : "") << (*labels[i])[t];
    os << '\n';
  }
  io::write_file(path, os.str());
}

std::vector<std::optional<std::vector<int>>> load_targets(const std::filesystem::path& path,
                                                          const Corpus& corpus) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) index[corpus.utterances[i].id] = i;
  std::vector<std::optional<std::vector<int>>> out(corpus.utterances.size());
  std::istringstream is(io::read_file(path));
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string id = line.substr(0, tab);
    const auto it = index.find(id);
    if (tab == std::string::npos || it == index.end()) {
      throw FormatError("targets file " + path.string() + ": unknown utterance '" + id + "'");
    }
    std::istringstream ls(line.substr(tab + 1));
    std::vector<int> ids;
    for (int v; ls >> v;) ids.push_back(v);
    if (ids.size() != corpus.utterances[it->second].frames()) {
      throw FormatError("targets file " + path.string() + ": wrong length for '" + id + "'");
    }
    out[it->second] = std::move(ids);
  }
  return out;
}

void save_codebook(const Codebook& codebook, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write("UMKM", 4);
  io::write_u64(os, codebook.k());
  io::write_u64(os, codebook.dim());
  for (double v : codebook.centroids.data()) io::write_f32(os, float(v));
  io::write_string(os, codebook.source);
}

Codebook load_codebook(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "UMKM", 4) != 0) {
    throw FormatError("bad codebook magic in " + path.string());
  }
  const auto k = io::read_u64(is);
  const auto d = io::read_u64(is);
  if (k * d > (std::uint64_t(1) << 28)) throw FormatError("codebook too large");
  Codebook cb;
  cb.centroids = Tensor::matrix(k, d);
  for (double& v : cb.centroids.storage()) v = io::read_f32(is);
  cb.source = io::read_string(is);
  return cb;
}

}  // namespace unimask
