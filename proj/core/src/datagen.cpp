#include "unimask/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "unimask/serialize.hpp"

namespace unimask {

std::string_view to_string(Profile p) {
  switch (p) {
    case Profile::AB: return "ab";
    case Profile::A: return "a";
    case Profile::B: return "b";
  }
  return "?";
}

Profile parse_profile(std::string_view s) {
  if (s == "ab" || s == "AB") return Profile::AB;
  if (s == "a" || s == "A") return Profile::A;
  if (s == "b" || s == "B") return Profile::B;
  throw std::invalid_argument("unknown modality profile '" + std::string(s) + "'");
}

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("generator config: " + m); };
  if (units < 2) fail("units must be >= 2");
  if (units > int(kAlphabet.size())) fail("units exceed transcript alphabet");
  if (visemes < 1 || visemes > units) fail("visemes must be in [1, units]");
  if (dim_a < 1 || dim_b < 1 || latent_dim < 1) fail("dimensions must be positive");
  if (!(mean_dwell >= 1.0)) fail("mean_dwell must be >= 1");
  if (!(sigma_a >= 0.0) || !(sigma_b >= 0.0)) fail("noise scales must be non-negative");
  if (min_frames > max_frames) fail("min_frames exceeds max_frames");
  if (transitions) {
    const Tensor& t = *transitions;
    if (t.shape() != Shape{std::size_t(units), std::size_t(units)}) {
      fail("transition matrix shape " + shape_string(t.shape()));
    }
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double s = 0.0;
      for (double v : t.row(r)) {
        if (!std::isfinite(v) || v < 0.0) fail("transition row " + std::to_string(r) + " invalid");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) {
        fail("transition row " + std::to_string(r) + " sums to " + std::to_string(s));
      }
      if (t.at(r, r) != 0.0) {
        fail("transition row " + std::to_string(r) + " is degenerate (self-transition mass)");
      }
    }
  }
}

Tensor default_transitions(int units, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "transitions"));
  std::gamma_distribution<double> gamma(0.3, 1.0);
  Tensor t = Tensor::matrix(std::size_t(units), std::size_t(units));
  for (int r = 0; r < units; ++r) {
    double s = 0.0;
    for (int c = 0; c < units; ++c) {
      if (c == r) continue;
      // Floor keeps every transition reachable.
      const double w = gamma(rng.engine()) + 1e-3;
      t.at(std::size_t(r), std::size_t(c)) = w;
      s += w;
    }
    for (double& v : t.row(std::size_t(r))) v /= s;
  }
  return t;
}

Tensor resolved_transitions(const GeneratorConfig& config) {
  return config.transitions ? *config.transitions : default_transitions(config.units, config.seed);
}

EmissionModel EmissionModel::from_config(const GeneratorConfig& config) {
  Rng rng(derive_seed(config.seed, "emission"));
  EmissionModel e;
  const auto U = std::size_t(config.units);
  const auto Z = std::size_t(config.latent_dim);
  e.unit_embedding = Tensor::matrix(U, Z);
  for (double& v : e.unit_embedding.storage()) v = rng.normal();
  const double s = 1.0 / std::sqrt(double(Z));
  e.map_a = Tensor::matrix(std::size_t(config.dim_a), Z);
  for (double& v : e.map_a.storage()) v = s * rng.normal();
  e.map_b = Tensor::matrix(std::size_t(config.dim_b), Z);
  for (double& v : e.map_b.storage()) v = s * rng.normal();
  for (int u = 0; u < config.units; ++u) e.viseme_of.push_back(u % config.visemes);
  return e;
}

namespace {

std::vector<double> project(const Tensor& map, const Tensor& embedding, int row) {
  std::vector<double> out(map.rows(), 0.0);
  auto z = embedding.row(std::size_t(row));
  for (std::size_t i = 0; i < map.rows(); ++i) {
    auto w = map.row(i);
    for (std::size_t k = 0; k < z.size(); ++k) out[i] += w[k] * z[k];
  }
  return out;
}

}  // namespace

std::vector<double> EmissionModel::mean_a(int u) const { return project(map_a, unit_embedding, u); }
std::vector<double> EmissionModel::mean_b(int u) const {
  return project(map_b, unit_embedding, viseme_of.at(std::size_t(u)));
}

std::vector<int> collapse_runs(const std::vector<int>& seq) {
  std::vector<int> out;
  for (int v : seq) {
    if (out.empty() || out.back() != v) out.push_back(v);
  }
  return out;
}

std::string render_transcript(const std::vector<int>& tokens) {
  std::string s;
  for (int t : tokens) {
    s.push_back(t >= 0 && std::size_t(t) < kAlphabet.size() ? kAlphabet[std::size_t(t)] : '?');
  }
  return s;
}

Utterance generate_utterance(const GeneratorConfig& config, const EmissionModel& emission,
                             const Tensor& transitions, const std::string& id, Profile profile) {
  std::uint64_t h = config.seed;
  for (unsigned char c : id) h = mix64(h ^ c);
  Rng rng(derive_seed(h, "utterance"));

  Utterance u;
  u.id = id;
  u.profile = profile;
  const std::size_t T = config.min_frames + rng.index(config.max_frames - config.min_frames + 1);
  u.units.reserve(T);
  std::geometric_distribution<int> dwell(1.0 / config.mean_dwell);
  int unit = int(rng.index(std::size_t(config.units)));
  while (u.units.size() < T) {
    const int len = 1 + dwell(rng.engine());
    for (int k = 0; k < len && u.units.size() < T; ++k) u.units.push_back(unit);
    const double r = rng.uniform();
    double acc = 0.0;
    int next = -1;
    for (int c = 0; c < config.units; ++c) {
      acc += transitions.at(std::size_t(unit), std::size_t(c));
      if (r < acc) {
        next = c;
        break;
      }
    }
    if (next < 0) {
      // Rounding at the top of the cumulative sum: take the last non-zero entry.
      for (int c = config.units - 1; c >= 0; --c) {
        if (transitions.at(std::size_t(unit), std::size_t(c)) > 0.0) {
          next = c;
          break;
        }
      }
    }
    unit = next;
  }
  u.transcript = collapse_runs(u.units);

  // Both streams are always drawn so a profile never changes the other stream.
  Tensor fa = Tensor::matrix(T, std::size_t(config.dim_a));
  Tensor fb = Tensor::matrix(T, std::size_t(config.dim_b));
  std::vector<std::vector<double>> means_a(std::size_t(config.units));
  std::vector<std::vector<double>> means_b(std::size_t(config.units));
  for (int k = 0; k < config.units; ++k) {
    means_a[std::size_t(k)] = emission.mean_a(k);
    means_b[std::size_t(k)] = emission.mean_b(k);
  }
  for (std::size_t t = 0; t < T; ++t) {
    const auto& ma = means_a[std::size_t(u.units[t])];
    auto ra = fa.row(t);
    for (std::size_t i = 0; i < ra.size(); ++i) ra[i] = ma[i] + config.sigma_a * rng.normal();
    const auto& mb = means_b[std::size_t(u.units[t])];
    auto rb = fb.row(t);
    for (std::size_t i = 0; i < rb.size(); ++i) rb[i] = mb[i] + config.sigma_b * rng.normal();
  }
  if (has_a(profile)) u.features_a = round_to_f32(std::move(fa));
  if (has_b(profile)) u.features_b = round_to_f32(std::move(fb));
  return u;
}

std::string generator_fingerprint(const GeneratorConfig& config, const CorpusSpec& spec) {
  std::ostringstream os;
  os << std::setprecision(17) << "v1|" << config.units << '|' << config.visemes << '|'
     << config.dim_a << '|' << config.dim_b << '|' << config.latent_dim << '|'
     << config.mean_dwell << '|' << config.sigma_a << '|' << config.sigma_b << '|'
     << config.min_frames << '|' << config.max_frames << '|' << config.seed << '|'
     << spec.utterances << '|' << spec.mix.ab << '|' << spec.mix.a << '|' << spec.mix.b << '|'
     << spec.id_prefix;
  if (config.transitions) {
    for (double v : config.transitions->data()) os << '|' << v;
  }
  const std::string s = os.str();
  std::uint64_t h = derive_seed(0, s);
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << h;
  return hex.str();
}

std::size_t Corpus::total_frames() const {
  std::size_t n = 0;
  for (const auto& u : utterances) n += u.frames();
  return n;
}

Corpus generate_corpus(const GeneratorConfig& config, const CorpusSpec& spec, unsigned threads) {
  config.validate();
  const ProfileMix& mix = spec.mix;
  if (mix.ab < 0 || mix.a < 0 || mix.b < 0 || std::abs(mix.ab + mix.a + mix.b - 1.0) > 1e-9) {
    throw std::invalid_argument("profile mix must be non-negative and sum to 1");
  }
  const std::size_t n = spec.utterances;
  const auto n_ab = std::size_t(std::llround(mix.ab * double(n)));
  const auto n_a = std::min(n - std::min(n, n_ab), std::size_t(std::llround(mix.a * double(n))));
  std::vector<Profile> profiles;
  profiles.insert(profiles.end(), std::min(n, n_ab), Profile::AB);
  profiles.insert(profiles.end(), n_a, Profile::A);
  profiles.resize(n, Profile::B);
  Rng shuffle_rng(derive_seed(config.seed, "profiles:" + spec.id_prefix));
  std::shuffle(profiles.begin(), profiles.end(), shuffle_rng.engine());

  const EmissionModel emission = EmissionModel::from_config(config);
  const Tensor transitions = resolved_transitions(config);

  Corpus corpus;
  corpus.config = config;
  corpus.spec = spec;
  corpus.fingerprint = generator_fingerprint(config, spec);
  corpus.utterances.resize(n);
  auto make = [&](std::size_t i) {
    std::ostringstream id;
    id << spec.id_prefix << std::setw(5) << std::setfill('0') << i;
    corpus.utterances[i] = generate_utterance(config, emission, transitions, id.str(), profiles[i]);
  };
  threads = std::max(1u, threads);
  if (threads == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) make(i);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += threads) make(i);
      });
    }
  }
  return corpus;
}

Corpus merge_corpora(const Corpus& first, const Corpus& second) {
  Corpus out = first;
  out.utterances.insert(out.utterances.end(), second.utterances.begin(), second.utterances.end());
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0')
      << derive_seed(0, first.fingerprint + "+" + second.fingerprint);
  out.fingerprint = hex.str();
  return out;
}

Corpus slice_corpus(const Corpus& corpus, std::size_t begin, std::size_t end) {
  end = std::min(end, corpus.utterances.size());
  begin = std::min(begin, end);
  Corpus out;
  out.config = corpus.config;
  out.spec = corpus.spec;
  out.utterances.assign(corpus.utterances.begin() + long(begin),
                        corpus.utterances.begin() + long(end));
  std::ostringstream fp;
  fp << corpus.fingerprint << '[' << begin << ':' << end << ']';
  out.fingerprint = fp.str();
  return out;
}

GeneratorConfig make_ood_config(const GeneratorConfig& base, double perturbation) {
  if (!(perturbation >= 0.0 && perturbation <= 1.0)) {
    throw std::invalid_argument("ood perturbation must lie in [0, 1]");
  }
  GeneratorConfig ood = base;
  if (perturbation == 0.0) return ood;
  const Tensor t0 = resolved_transitions(base);
  const Tensor r = default_transitions(base.units, derive_seed(base.seed, "ood"));
  Tensor t = t0;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < t.cols(); ++j) {
      t.at(i, j) = (1.0 - perturbation) * t0.at(i, j) + perturbation * r.at(i, j);
      s += t.at(i, j);
    }
    for (double& v : t.row(i)) v /= s;
  }
  ood.transitions = std::move(t);
  ood.sigma_a = base.sigma_a * (1.0 + 0.5 * perturbation);
  ood.sigma_b = base.sigma_b * (1.0 + 0.5 * perturbation);
  return ood;
}

Corpus make_ood_corpus(const GeneratorConfig& base, const CorpusSpec& spec, double perturbation) {
  return generate_corpus(make_ood_config(base, perturbation), spec);
}

NoiseResult add_noise(const Tensor& features, double snr_db, double p_apply, Rng& rng) {
  if (!std::isfinite(snr_db)) throw std::invalid_argument("add_noise: snr_db must be finite");
  if (!(p_apply >= 0.0 && p_apply <= 1.0)) {
    throw std::invalid_argument("add_noise: p_apply must lie in [0, 1]");
  }
  NoiseResult result{features, false, false};
  if (p_apply == 0.0 || rng.uniform() >= p_apply) return result;
  double signal = 0.0;
  for (double v : features.data()) signal += v * v;
  if (features.empty() || signal == 0.0) {
    result.skipped_zero_power = true;
    return result;
  }
  const std::size_t T = features.rows();
  const std::size_t D = features.cols();
  Tensor noise(features.shape());
  const double innovation = std::sqrt(1.0 - kNoiseCorrelation * kNoiseCorrelation);
  for (std::size_t d = 0; d < D; ++d) {
    double prev = rng.normal();
    noise.at(0, d) = prev;
    for (std::size_t t = 1; t < T; ++t) {
      prev = kNoiseCorrelation * prev + innovation * rng.normal();
      noise.at(t, d) = prev;
    }
  }
  double noise_power = 0.0;
  for (double v : noise.data()) noise_power += v * v;
  const double gain = std::sqrt(signal / (noise_power * std::pow(10.0, snr_db / 10.0)));
  for (std::size_t i = 0; i < noise.size(); ++i) result.features[i] += gain * noise[i];
  result.applied = true;
  return result;
}

double measured_snr_db(const Tensor& clean, const Tensor& noisy) {
  double s = 0.0, n = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    s += clean[i] * clean[i];
    const double d = noisy[i] - clean[i];
    n += d * d;
  }
  return 10.0 * std::log10(s / n);
}

namespace {

void write_generator(const GeneratorConfig& c, const CorpusSpec& s, const std::filesystem::path& p) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "units=" << c.units << "\nvisemes=" << c.visemes << "\ndim_a=" << c.dim_a
     << "\ndim_b=" << c.dim_b << "\nlatent_dim=" << c.latent_dim << "\nmean_dwell=" << c.mean_dwell
     << "\nsigma_a=" << c.sigma_a << "\nsigma_b=" << c.sigma_b << "\nmin_frames=" << c.min_frames
     << "\nmax_frames=" << c.max_frames << "\nseed=" << c.seed << "\nutterances=" << s.utterances
     << "\nmix_ab=" << s.mix.ab << "\nmix_a=" << s.mix.a << "\nmix_b=" << s.mix.b
     << "\nid_prefix=" << s.id_prefix << '\n';
  io::write_file(p, os.str());
}

void read_generator(const std::filesystem::path& p, GeneratorConfig& c, CorpusSpec& s) {
  std::istringstream is(io::read_file(p));
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(std::string("generator.cfg: missing key ") + k);
    return it->second;
  };
  c.units = std::stoi(get("units"));
  c.visemes = std::stoi(get("visemes"));
  c.dim_a = std::stoi(get("dim_a"));
  c.dim_b = std::stoi(get("dim_b"));
  c.latent_dim = std::stoi(get("latent_dim"));
  c.mean_dwell = std::stod(get("mean_dwell"));
  c.sigma_a = std::stod(get("sigma_a"));
  c.sigma_b = std::stod(get("sigma_b"));
  c.min_frames = std::stoul(get("min_frames"));
  c.max_frames = std::stoul(get("max_frames"));
  c.seed = std::stoull(get("seed"));
  s.utterances = std::stoul(get("utterances"));
  s.mix = {std::stod(get("mix_ab")), std::stod(get("mix_a")), std::stod(get("mix_b"))};
  s.id_prefix = get("id_prefix");
}

std::vector<int> parse_transcript(const std::string& s) {
  std::vector<int> out;
  for (char ch : s) {
    const auto pos = kAlphabet.find(ch);
    if (pos == std::string_view::npos) throw FormatError("transcript character outside alphabet");
    out.push_back(int(pos));
  }
  return out;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_generator(corpus.config, corpus.spec, dir / "generator.cfg");
  if (corpus.config.transitions) io::save_tensor(dir / "transitions.umod", *corpus.config.transitions);
  std::ostringstream manifest;
  manifest << "# fingerprint " << corpus.fingerprint << '\n';
  for (const auto& u : corpus.utterances) {
    manifest << u.id << '\t' << u.frames() << '\t' << to_string(u.profile) << '\t'
             << render_transcript(u.transcript) << '\n';
    if (u.features_a) io::save_tensor(dir / (u.id + ".a.umod"), *u.features_a);
    if (u.features_b) io::save_tensor(dir / (u.id + ".b.umod"), *u.features_b);
    Tensor labels = Tensor::vector(u.units.size());
    for (std::size_t t = 0; t < u.units.size(); ++t) labels[t] = u.units[t];
    io::save_tensor(dir / (u.id + ".units.umod"), labels);
  }
  io::write_file(dir / "manifest.tsv", manifest.str());
}

Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  read_generator(dir / "generator.cfg", corpus.config, corpus.spec);
  if (std::filesystem::exists(dir / "transitions.umod")) {
    corpus.config.transitions = io::load_tensor(dir / "transitions.umod");
  }
  std::istringstream is(io::read_file(dir / "manifest.tsv"));
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    if (line.rfind("# fingerprint ", 0) == 0) {
      corpus.fingerprint = line.substr(14);
      continue;
    }
    std::istringstream ls(line);
    Utterance u;
    std::size_t T = 0;
    std::string profile, transcript;
    if (!(ls >> u.id >> T >> profile)) throw FormatError("malformed manifest line: " + line);
    ls >> transcript;
    u.profile = parse_profile(profile);
    u.transcript = parse_transcript(transcript);
    const Tensor labels = io::load_tensor(dir / (u.id + ".units.umod"));
    if (labels.size() != T) throw FormatError("label count mismatch for " + u.id);
    for (double v : labels.data()) u.units.push_back(int(v));
    if (has_a(u.profile)) u.features_a = io::load_tensor(dir / (u.id + ".a.umod"));
    if (has_b(u.profile)) u.features_b = io::load_tensor(dir / (u.id + ".b.umod"));
    for (const auto* f : {&u.features_a, &u.features_b}) {
      if (*f && (*f)->rows() != T) throw FormatError("frame count mismatch for " + u.id);
    }
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace unimask
