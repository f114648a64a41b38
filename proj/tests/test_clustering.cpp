#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "unimask/clustering.hpp"
#include "unimask/model.hpp"
#include "unimask/random.hpp"
#include "unimask/serialize.hpp"
#include "test_support.hpp"

using namespace unimask;

namespace {

Tensor gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::matrix(n, d);
  for (double& v : t.storage()) v = rng.normal();
  return t;
}

double sq(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

/// Minimum within-cluster sum of squares over every two-way partition.
double best_two_partition(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  double best = INFINITY;
  for (std::uint64_t bits = 1; bits < (std::uint64_t{1} << (n - 1)); ++bits) {
    auto side = [&](std::size_t i) { return i == 0 ? 0 : int((bits >> (i - 1)) & 1u); };
    double sse = 0.0;
    for (int c = 0; c < 2; ++c) {
      std::vector<double> mean(d, 0.0);
      double cnt = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (side(i) != c) continue;
        cnt += 1.0;
        for (std::size_t j = 0; j < d; ++j) mean[j] += x.at(i, j);
      }
      for (double& m : mean) m /= cnt;
      for (std::size_t i = 0; i < n; ++i) {
        if (side(i) == c) sse += sq(x.row(i), mean);
      }
    }
    best = std::min(best, sse);
  }
  return best;
}

Corpus mixed_corpus(std::size_t n) {
  GeneratorConfig cfg;
  cfg.min_frames = 10;
  cfg.max_frames = 20;
  return generate_corpus(cfg, {n, {0.5, 0.25, 0.25}, "m"});
}

}  // namespace

TEST_SUITE("clustering") {
  TEST_CASE("K = N distinct points gives zero inertia") {
    const Tensor x = gaussian(6, 3, 1);
    const Codebook cb = kmeans_fit(x, 6, {50, 3, 2});
    CHECK(cb.inertia == 0.0);
    auto ids = assign(cb, x);
    std::sort(ids.begin(), ids.end());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
  }

  TEST_CASE("four 1-D points") {
    const Tensor x({4, 1}, {0, 1, 10, 11});
    const Codebook cb = kmeans_fit(x, 2, {100, 8, 3});
    std::vector<double> c = {cb.centroids[0], cb.centroids[1]};
    std::sort(c.begin(), c.end());
    CHECK(c[0] == 0.5);
    CHECK(c[1] == 10.5);
    CHECK(cb.inertia == 1.0);
    CHECK(best_two_partition(x) == 1.0);
  }

  TEST_CASE("inertia never increases across Lloyd passes") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Codebook cb = kmeans_fit(gaussian(300, 4, 10 + s), 7, {100, 1, s});
      for (std::size_t i = 1; i < cb.inertia_history.size(); ++i) {
        CHECK(cb.inertia_history[i] <= cb.inertia_history[i - 1] * (1 + 1e-12));
      }
    }
  }

  TEST_CASE("multi-restart K = 2 matches the exhaustive optimum on 1-D points") {
    for (std::uint64_t inst = 0; inst < 24; ++inst) {
      Rng rng(derive_seed(11, inst));
      const std::size_t n = 5 + inst % 8;
      Tensor x = Tensor::matrix(n, 1);
      for (double& v : x.storage()) v = rng.normal();
      const Codebook cb = kmeans_fit(x, 2, {100, 8, derive_seed(12, inst)});
      const double opt = best_two_partition(x);
      CAPTURE(inst);
      CHECK(inertia(cb, x, assign(cb, x)) == doctest::Approx(opt).epsilon(1e-9));
    }
  }

  TEST_CASE("Lloyd local optimum that only more restarts escape") {
    // A 2-D instance where all 8 seeded restarts converge to the same
    // suboptimal split; 32 restarts reach the partition optimum.
    Rng rng(derive_seed(11, 14));
    Tensor x = Tensor::matrix(11, 2);
    for (double& v : x.storage()) v = rng.normal();
    const double opt = best_two_partition(x);
    const Codebook eight = kmeans_fit(x, 2, {100, 8, derive_seed(12, 14)});
    const Codebook many = kmeans_fit(x, 2, {100, 32, derive_seed(12, 14)});
    CHECK(eight.inertia > opt * (1 + 1e-6));
    CHECK(many.inertia == doctest::Approx(opt).epsilon(1e-9));
  }

  TEST_CASE("assignment") {
    const Tensor c = gaussian(5, 3, 20);
    Codebook cb;
    cb.centroids = c;
    const auto ids = assign(cb, c);
    for (std::size_t i = 0; i < 5; ++i) CHECK(ids[i] == int(i));

    Codebook two;
    two.centroids = Tensor({2, 1}, {-1.0, 1.0});
    CHECK(assign(two, Tensor({1, 1}, {0.0}))[0] == 0);

    const Tensor x = gaussian(200, 3, 21);
    const auto got = assign(cb, x);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      int best = 0;
      for (std::size_t k = 1; k < 5; ++k) {
        if (sq(x.row(i), c.row(k)) < sq(x.row(i), c.row(std::size_t(best)))) best = int(k);
      }
      CHECK(got[i] == best);
    }
    CHECK_THROWS_AS(assign(cb, gaussian(3, 4, 22)), ShapeError);
  }

  TEST_CASE("kmeans is deterministic and validates its inputs") {
    const Tensor x = gaussian(100, 2, 23);
    CHECK(kmeans_fit(x, 4, {20, 2, 5}).centroids == kmeans_fit(x, 4, {20, 2, 5}).centroids);
    CHECK_THROWS_AS(kmeans_fit(x, 1), std::invalid_argument);
    CHECK_THROWS_AS(kmeans_fit(gaussian(3, 2, 1), 4), std::invalid_argument);
    CHECK_THROWS_AS(kmeans_fit(x, 2, {0, 1, 0}), std::invalid_argument);
  }

  TEST_CASE("pooling caps rows deterministically") {
    const std::vector<Tensor> parts = {gaussian(30, 2, 1), gaussian(50, 2, 2)};
    const Tensor all = pool_rows(parts, 1000, 0);
    CHECK(all.rows() == 80);
    const Tensor some = pool_rows(parts, 25, 7);
    CHECK(some.rows() == 25);
    CHECK(some == pool_rows(parts, 25, 7));
  }

  TEST_CASE("anchor rule for iteration-1 targets") {
    const Corpus c = mixed_corpus(40);
    TargetOptions o;
    o.clusters = 5;
    o.kmeans = {30, 1, 1};
    const TargetSet ts = build_targets(nullptr, nullptr, c, 1, o);
    for (std::size_t i = 0; i < c.utterances.size(); ++i) {
      const auto& u = c.utterances[i];
      CHECK(ts.labels[i].has_value() == has_a(u.profile));
      if (ts.labels[i]) CHECK(ts.labels[i]->size() == u.frames());
      const bool listed = std::find(ts.skipped.begin(), ts.skipped.end(), u.id) != ts.skipped.end();
      CHECK(listed == !has_a(u.profile));
    }
    CHECK_THROWS(build_targets(nullptr, nullptr, c, 2, o));

    GeneratorConfig g;
    g.min_frames = 10;
    g.max_frames = 20;
    const Corpus a_only = generate_corpus(g, {10, {0, 1, 0}, "a"});
    CHECK(build_raw_targets(a_only, o).labeled_count() == 10);
  }

  TEST_CASE("iteration-2 targets use every stream") {
    const Corpus c = mixed_corpus(30);
    ModelConfig mc;
    ParamStore p = init_params(mc, 3);
    // Make B dominate so AB features and A-only features disagree.
    for (double& v : p["frontend_b.fc1.w"].storage()) v *= 30.0;
    TargetOptions o;
    o.clusters = 6;
    o.kmeans = {30, 1, 2};
    const TargetSet ts = build_targets(&p, &mc, c, 2, o);
    CHECK(ts.skipped.empty());
    CHECK(ts.labeled_count() == c.utterances.size());
    std::size_t differing = 0;
    for (std::size_t i = 0; i < c.utterances.size(); ++i) {
      const auto& u = c.utterances[i];
      const auto both = assign(ts.codebook, extract_features(p, mc, ModalityInput::from(u)));
      CHECK(*ts.labels[i] == both);
      if (u.profile == Profile::AB) {
        const auto a_only = assign(ts.codebook, extract_features(p, mc, ModalityInput::from(u, Profile::A)));
        differing += a_only != both ? 1 : 0;
      }
    }
    CHECK(differing > 0);
    CHECK(label_corpus(ts.codebook, c, &p, &mc) == ts.labels);
  }

  TEST_CASE("targets and codebook files round trip") {
    const Corpus c = mixed_corpus(12);
    TargetOptions o;
    o.clusters = 4;
    o.kmeans = {30, 1, 1};
    const TargetSet ts = build_raw_targets(c, o);
    test::TempDir dir;
    save_targets(ts.labels, c, dir.path / "t.tsv");
    CHECK(load_targets(dir.path / "t.tsv", c) == ts.labels);
    save_codebook(ts.codebook, dir.path / "c.umkm");
    const Codebook back = load_codebook(dir.path / "c.umkm");
    CHECK(back.centroids == round_to_f32(ts.codebook.centroids));
    CHECK(back.source == ts.codebook.source);

    std::ofstream(dir.path / "bad.tsv") << "nosuchid\t1 2 3\n";
    CHECK_THROWS_AS(load_targets(dir.path / "bad.tsv", c), FormatError);
    std::ofstream(dir.path / "short.tsv") << c.utterances[0].id << "\t1 2\n";
    CHECK_THROWS_AS(load_targets(dir.path / "short.tsv", c), FormatError);
  }
}
