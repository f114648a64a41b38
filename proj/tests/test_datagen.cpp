#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "unimask/datagen.hpp"
#include "unimask/random.hpp"
#include "test_support.hpp"

using namespace unimask;

namespace {

/// Index of the emission mean nearest to `row`; ties go to the lowest index.
int nearest(std::span<const double> row, const std::vector<std::vector<double>>& means) {
  int best = 0;
  double bd = INFINITY;
  for (std::size_t m = 0; m < means.size(); ++m) {
    double d = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) d += (row[j] - means[m][j]) * (row[j] - means[m][j]);
    if (d < bd) {
      bd = d;
      best = int(m);
    }
  }
  return best;
}

/// Plug-in mutual information (nats) from paired samples.
double mutual_information(const std::vector<int>& x, const std::vector<int>& y) {
  std::map<int, double> px, py;
  std::map<std::pair<int, int>, double> pxy;
  const double n = double(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    px[x[i]] += 1.0 / n;
    py[y[i]] += 1.0 / n;
    pxy[{x[i], y[i]}] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [k, p] : pxy) mi += p * std::log(p / (px[k.first] * py[k.second]));
  return mi;
}

std::vector<double> unit_histogram(const Corpus& c, int units) {
  std::vector<double> h(std::size_t(units), 0.0);
  double n = 0.0;
  for (const auto& u : c.utterances) {
    for (int v : u.units) {
      h[std::size_t(v)] += 1.0;
      n += 1.0;
    }
  }
  for (double& v : h) v /= n;
  return h;
}

}  // namespace

TEST_SUITE("datagen") {
  TEST_CASE("noiseless invertible emissions are recovered exactly") {
    GeneratorConfig cfg;
    cfg.sigma_a = cfg.sigma_b = 0.0;
    cfg.visemes = cfg.units;
    const EmissionModel em = EmissionModel::from_config(cfg);
    std::vector<std::vector<double>> ma, mb;
    for (int u = 0; u < cfg.units; ++u) {
      ma.push_back(em.mean_a(u));
      mb.push_back(em.mean_b(u));
    }
    const Corpus c = generate_corpus(cfg, {20, {}, "clean"});
    std::size_t frames = 0, ok_a = 0, ok_b = 0;
    for (const auto& u : c.utterances) {
      for (std::size_t t = 0; t < u.frames(); ++t) {
        ++frames;
        ok_a += nearest(u.features_a->row(t), ma) == u.units[t] ? 1 : 0;
        ok_b += nearest(u.features_b->row(t), mb) == u.units[t] ? 1 : 0;
      }
    }
    CHECK(ok_a == frames);
    CHECK(ok_b == frames);
  }

  TEST_CASE("viseme merge lowers the information carried by modality B") {
    GeneratorConfig cfg;
    cfg.visemes = cfg.units / 2;
    cfg.sigma_b = cfg.sigma_a;
    const EmissionModel em = EmissionModel::from_config(cfg);
    std::vector<std::vector<double>> ma, mb;
    for (int u = 0; u < cfg.units; ++u) {
      ma.push_back(em.mean_a(u));
      mb.push_back(em.mean_b(u));
    }
    const Corpus c = generate_corpus(cfg, {150, {}, "mi"});
    std::vector<int> units, qa, qb;
    for (const auto& u : c.utterances) {
      for (std::size_t t = 0; t < u.frames(); ++t) {
        units.push_back(u.units[t]);
        qa.push_back(nearest(u.features_a->row(t), ma));
        qb.push_back(nearest(u.features_b->row(t), mb));
      }
    }
    const double mi_a = mutual_information(units, qa);
    const double mi_b = mutual_information(units, qb);
    CAPTURE(mi_a);
    CAPTURE(mi_b);
    CHECK(mi_b < mi_a);
    // B can at best identify the viseme.
    CHECK(mi_b <= std::log(double(cfg.visemes)) + 1e-9);
  }

  TEST_CASE("generation is deterministic per (seed, id) and thread count") {
    GeneratorConfig cfg;
    const Corpus a = generate_corpus(cfg, {12, {0.5, 0.25, 0.25}, "d"});
    const Corpus b = generate_corpus(cfg, {12, {0.5, 0.25, 0.25}, "d"}, 3);
    REQUIRE(a.utterances.size() == b.utterances.size());
    for (std::size_t i = 0; i < a.utterances.size(); ++i) {
      CHECK(a.utterances[i].units == b.utterances[i].units);
      CHECK(a.utterances[i].features_a == b.utterances[i].features_a);
      CHECK(a.utterances[i].features_b == b.utterances[i].features_b);
    }
    CHECK(a.fingerprint == b.fingerprint);

    const EmissionModel em = EmissionModel::from_config(cfg);
    const Tensor tr = resolved_transitions(cfg);
    const Utterance u1 = generate_utterance(cfg, em, tr, "same", Profile::AB);
    const Utterance u2 = generate_utterance(cfg, em, tr, "same", Profile::AB);
    CHECK(u1.features_a == u2.features_a);
    CHECK(u1.units == u2.units);
    cfg.seed = 2;
    CHECK(generate_utterance(cfg, EmissionModel::from_config(cfg), resolved_transitions(cfg), "same",
                             Profile::AB)
              .units != u1.units);
  }

  TEST_CASE("utterance structure: lengths, profiles, transcripts, dwell") {
    GeneratorConfig cfg;
    const Corpus c = generate_corpus(cfg, {300, {0.5, 0.3, 0.2}, "s"});
    std::map<Profile, int> counts;
    double runs = 0.0, run_frames = 0.0;
    for (const auto& u : c.utterances) {
      CHECK(u.frames() >= cfg.min_frames);
      CHECK(u.frames() <= cfg.max_frames);
      ++counts[u.profile];
      CHECK(u.features_a.has_value() == has_a(u.profile));
      CHECK(u.features_b.has_value() == has_b(u.profile));
      CHECK(u.transcript == collapse_runs(u.units));
      CHECK(collapse_runs(u.transcript) == u.transcript);
      // Interior runs only: edge runs are truncated by the utterance bounds.
      const auto& s = u.units;
      std::size_t start = 0;
      bool first = true;
      for (std::size_t t = 1; t <= s.size(); ++t) {
        if (t == s.size() || s[t] != s[t - 1]) {
          if (!first && t != s.size()) {
            runs += 1.0;
            run_frames += double(t - start);
          }
          first = false;
          start = t;
        }
      }
    }
    CHECK(counts[Profile::AB] > 100);
    CHECK(counts[Profile::A] > 50);
    CHECK(counts[Profile::B] > 30);
    CHECK(run_frames / runs == doctest::Approx(cfg.mean_dwell).epsilon(0.05));
  }

  TEST_CASE("collapse and render") {
    CHECK(collapse_runs({}) == std::vector<int>{});
    CHECK(collapse_runs({1, 1, 2, 2, 2, 1, 3, 3}) == std::vector<int>{1, 2, 1, 3});
    CHECK(render_transcript({0, 1, 25, 26}) == "abzA");
  }

  TEST_CASE("noise mixer") {
    GeneratorConfig cfg;
    const Corpus c = generate_corpus(cfg, {5, {}, "n"});
    Rng rng(3);
    const Tensor& a = *c.utterances[0].features_a;
    const NoiseResult none = add_noise(a, 0.0, 0.0, rng);
    CHECK_FALSE(none.applied);
    CHECK(none.features == a);
    for (double snr : {0.0, 5.0, -3.0}) {
      const NoiseResult r = add_noise(a, snr, 1.0, rng);
      CHECK(r.applied);
      // Recompute the power ratio directly.
      double ps = 0.0, pn = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        ps += a[i] * a[i];
        pn += (r.features[i] - a[i]) * (r.features[i] - a[i]);
      }
      CHECK(std::abs(10.0 * std::log10(ps / pn) - snr) <= 0.1);
    }
    const NoiseResult z = add_noise(Tensor::matrix(4, 3), 0.0, 1.0, rng);
    CHECK(z.skipped_zero_power);
    CHECK(z.features == Tensor::matrix(4, 3));
    CHECK(kDefaultSnrDb == 0.0);
    CHECK(kDefaultNoiseProb == 0.25);
  }

  TEST_CASE("out-of-domain corpus shifts transitions and marginals") {
    GeneratorConfig cfg;
    const Tensor base = resolved_transitions(cfg);
    const Tensor same = resolved_transitions(make_ood_config(cfg, 0.0));
    CHECK(same == base);
    CHECK(make_ood_config(cfg, 0.0).sigma_a == cfg.sigma_a);

    const Tensor ood = resolved_transitions(make_ood_config(cfg));
    double kl = 0.0;
    for (std::size_t r = 0; r < base.rows(); ++r) {
      for (std::size_t c = 0; c < base.cols(); ++c) {
        const double p = ood.at(r, c), q = base.at(r, c);
        if (p > 0.0) kl += p * std::log(p / q);
      }
    }
    CHECK(kl > 0.0);
    CHECK(std::isfinite(kl));

    const Corpus in = generate_corpus(cfg, {200, {0, 1, 0}, "in"});
    const Corpus out = make_ood_corpus(cfg, {200, {0, 1, 0}, "ood"});
    const auto hi = unit_histogram(in, cfg.units), ho = unit_histogram(out, cfg.units);
    double tv = 0.0;
    for (std::size_t u = 0; u < hi.size(); ++u) tv += 0.5 * std::abs(hi[u] - ho[u]);
    CAPTURE(tv);
    CHECK(tv > 0.05);
    for (const auto& u : out.utterances) CHECK_FALSE(u.features_b.has_value());
  }

  TEST_CASE("corpus directories round trip") {
    GeneratorConfig cfg;
    const Corpus c = generate_corpus(cfg, {6, {0.5, 0.25, 0.25}, "io"});
    test::TempDir dir;
    save_corpus(c, dir.path / "corpus");
    const Corpus back = load_corpus(dir.path / "corpus");
    REQUIRE(back.utterances.size() == c.utterances.size());
    CHECK(back.fingerprint == c.fingerprint);
    for (std::size_t i = 0; i < c.utterances.size(); ++i) {
      const auto& a = c.utterances[i];
      const auto& b = back.utterances[i];
      CHECK(a.id == b.id);
      CHECK(a.units == b.units);
      CHECK(a.profile == b.profile);
      if (a.features_a) CHECK(*b.features_a == round_to_f32(*a.features_a));
      if (a.features_b) CHECK(*b.features_b == round_to_f32(*a.features_b));
    }
  }

  TEST_CASE("generator validation") {
    GeneratorConfig cfg;
    cfg.visemes = cfg.units + 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.min_frames = 200;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.sigma_b = -1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK_THROWS(parse_profile("xy"));
    CHECK(parse_profile(to_string(Profile::B)) == Profile::B);
  }
}
