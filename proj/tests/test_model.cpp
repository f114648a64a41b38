#include <doctest.h>

#include <cmath>

#include "unimask/gradcheck.hpp"
#include "unimask/model.hpp"
#include "unimask/ops.hpp"
#include "unimask/random.hpp"

using namespace unimask;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.storage()) v = rng.normal();
  return t;
}

ModelConfig small_config() {
  ModelConfig c;
  c.dim_a = 5;
  c.dim_b = 4;
  c.frontend_dim = 8;
  c.embed_dim = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_dim = 24;
  c.clusters = 6;
  c.classes = 5;
  return c;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("absent modality and explicit zeros encode identically") {
    const ModelConfig cfg;
    const ParamStore p = init_params(cfg, 1);
    const Tensor a = random_matrix(30, std::size_t(cfg.dim_a), 2);
    const Tensor b = random_matrix(30, std::size_t(cfg.dim_b), 3);
    const Tensor za = Tensor::matrix(30, std::size_t(cfg.dim_a));
    const Tensor zb = Tensor::matrix(30, std::size_t(cfg.dim_b));
    const auto only_a = extract_layers(p, cfg, {&a, nullptr});
    const auto a_zero = extract_layers(p, cfg, {&a, &zb});
    const auto only_b = extract_layers(p, cfg, {nullptr, &b});
    const auto zero_b = extract_layers(p, cfg, {&za, &b});
    REQUIRE(only_a.size() == a_zero.size());
    for (std::size_t l = 0; l < only_a.size(); ++l) {
      CHECK(only_a[l] == a_zero[l]);
      CHECK(only_b[l] == zero_b[l]);
    }
  }

  TEST_CASE("hand-set fusion passes modality A through") {
    ModelConfig cfg = small_config();
    ParamStore p = init_params(cfg, 4);
    Tensor& w = p["fusion.w"];
    w.fill(0.0);
    for (std::size_t i = 0; i < std::size_t(cfg.frontend_dim); ++i) w.at(i, i) = 1.0;
    p["fusion.b"].fill(0.0);
    const Tensor a = random_matrix(7, 5, 5), b = random_matrix(7, 4, 6);
    Graph g;
    const FrontendStreams s = frontends(g, p, cfg, {&a, &b});
    const Tensor ha = g.value(*s.a);
    const Tensor fused = g.value(fuse(g, p, cfg, s));
    for (std::size_t t = 0; t < 7; ++t) {
      for (std::size_t j = 0; j < std::size_t(cfg.embed_dim); ++j) {
        CHECK(fused.at(t, j) == (j < std::size_t(cfg.frontend_dim) ? ha.at(t, j) : 0.0));
      }
    }
  }

  TEST_CASE("frontends map zeros to zeros") {
    const ModelConfig cfg = small_config();
    const ParamStore p = init_params(cfg, 7);
    const Tensor z = Tensor::matrix(3, 5);
    Graph g;
    const FrontendStreams s = frontends(g, p, cfg, {&z, nullptr});
    for (double v : g.value(*s.a).data()) CHECK(v == 0.0);
  }

  TEST_CASE("zero frames give an empty output") {
    const ModelConfig cfg = small_config();
    const ParamStore p = init_params(cfg, 8);
    const Tensor a = Tensor::matrix(0, 5);
    const Tensor f = extract_features(p, cfg, {&a, nullptr});
    CHECK(f.rows() == 0);
  }

  TEST_CASE("input validation") {
    const ModelConfig cfg = small_config();
    const ParamStore p = init_params(cfg, 9);
    const Tensor a = random_matrix(4, 5, 10), b = random_matrix(5, 4, 11);
    CHECK_THROWS(extract_features(p, cfg, {&a, &b}));
    CHECK_THROWS(extract_features(p, cfg, {nullptr, nullptr}));
    Graph g;
    const std::vector<std::size_t> bad = {4};
    CHECK_THROWS_AS(encode(g, p, cfg, {&a, nullptr}, bad), std::out_of_range);
    ModelConfig no_b = cfg;
    no_b.dim_b = 0;
    const ParamStore pa = init_params(no_b, 9);
    CHECK_FALSE(pa.contains("frontend_b.fc1.w"));
    const Tensor b4 = random_matrix(4, 4, 12);
    CHECK_THROWS_AS(extract_features(pa, no_b, {nullptr, &b4}), std::invalid_argument);
  }

  TEST_CASE("masking") {
    const ModelConfig cfg = small_config();
    const ParamStore p = init_params(cfg, 13);
    const Tensor a1 = random_matrix(9, 5, 14), a2 = random_matrix(9, 5, 15);
    auto run = [&](const Tensor& a, std::span<const std::size_t> mask) {
      Graph g;
      g.disable_grad();
      return g.value(encode(g, p, cfg, {&a, nullptr}, mask).final);
    };
    CHECK(run(a1, {}) == run(a1, {}));
    std::vector<std::size_t> all(9);
    for (std::size_t i = 0; i < 9; ++i) all[i] = i;
    CHECK(run(a1, all) == run(a2, all));
    CHECK_FALSE(run(a1, {}) == run(a2, {}));
    const std::vector<std::size_t> some = {2, 3};
    CHECK_FALSE(run(a1, some) == run(a1, {}));
  }

  TEST_CASE("positions break permutation equivariance") {
    ModelConfig cfg = small_config();
    const Tensor a = random_matrix(6, 5, 16);
    const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    Tensor pa = Tensor::matrix(6, 5);
    for (std::size_t t = 0; t < 6; ++t) {
      for (std::size_t j = 0; j < 5; ++j) pa.at(t, j) = a.at(perm[t], j);
    }
    for (bool positional : {false, true}) {
      cfg.positional = positional;
      const ParamStore p = init_params(cfg, 17);
      const Tensor y = extract_features(p, cfg, {&a, nullptr});
      const Tensor py = extract_features(p, cfg, {&pa, nullptr});
      double max_diff = 0.0;
      for (std::size_t t = 0; t < 6; ++t) {
        for (std::size_t j = 0; j < y.cols(); ++j) max_diff = std::max(max_diff, std::abs(py.at(t, j) - y.at(perm[t], j)));
      }
      if (positional) CHECK(max_diff > 1e-3);
      else CHECK(max_diff < 1e-12);
    }
  }

  TEST_CASE("layer outputs: embedding plus one per block") {
    const ModelConfig cfg = small_config();
    const ParamStore p = init_params(cfg, 18);
    const Tensor a = random_matrix(5, 5, 19);
    const auto layers = extract_layers(p, cfg, {&a, nullptr});
    CHECK(layers.size() == std::size_t(cfg.layers) + 1);
    CHECK(layers.back() == extract_features(p, cfg, {&a, nullptr}));
  }

  TEST_CASE("cluster head") {
    const ModelConfig cfg = small_config();
    ParamStore p = init_params(cfg, 20);
    p["cluster_head.b"].fill(0.0);
    Graph g;
    const NodeId probs = ops::softmax(g, cluster_logits(g, p, g.constant(Tensor::matrix(3, 16))));
    for (double v : g.value(probs).data()) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-15));

    // K = 2 with hand-set weights.
    ParamStore h;
    h.add("cluster_head.w", Tensor::from_rows({{1, -1}, {2, 0.5}}));
    h.add("cluster_head.b", Tensor({2}, {0.25, -0.5}));
    Graph g2;
    const Tensor& l = g2.value(cluster_logits(g2, h, g2.constant(Tensor::from_rows({{3, 4}}))));
    CHECK(l.at(0, 0) == doctest::Approx(3 * 1 + 4 * 2 + 0.25));
    CHECK(l.at(0, 1) == doctest::Approx(3 * -1 + 4 * 0.5 - 0.5));

    Graph g3;
    const Tensor a = random_matrix(4, 5, 21);
    const NodeId sm = ops::softmax(g3, cluster_logits(g3, p, encode(g3, p, cfg, {&a, nullptr}).final));
    const Tensor& s = g3.value(sm);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      double total = 0.0;
      for (double v : s.row(r)) total += v;
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("decoder is causal and normalized") {
    const ModelConfig cfg = small_config();
    ParamStore p = init_params(cfg, 22);
    add_decoder(p, cfg, 23);
    const Tensor a = random_matrix(6, 5, 24);
    const std::vector<int> t1 = {cfg.sos(), 1, 2, 3, 4};
    std::vector<int> t2 = t1;
    t2[3] = 0;
    Graph g;
    g.disable_grad();
    const NodeId enc = encode(g, p, cfg, {&a, nullptr}).final;
    const Tensor l1 = g.value(decoder_forward(g, p, cfg, enc, t1).log_probs);
    const Tensor l2 = g.value(decoder_forward(g, p, cfg, enc, t2).log_probs);
    for (std::size_t r = 0; r < 5; ++r) {
      const bool before = r < 3;
      bool same = true;
      for (std::size_t c = 0; c < l1.cols(); ++c) same = same && l1.at(r, c) == l2.at(r, c);
      CHECK(same == before);
      CHECK(ops::logsumexp(l1.row(r)) == doctest::Approx(0.0).epsilon(1e-9));
    }
    const std::vector<int> no_sos = {1, 2};
    CHECK_THROWS_AS(decoder_forward(g, p, cfg, enc, no_sos), std::invalid_argument);
  }

  TEST_CASE("cross attention over a single frame is all ones") {
    const ModelConfig cfg = small_config();
    ParamStore p = init_params(cfg, 25);
    add_decoder(p, cfg, 26);
    const Tensor a = random_matrix(1, 5, 27);
    Graph g;
    g.disable_grad();
    const NodeId enc = encode(g, p, cfg, {&a, nullptr}).final;
    const std::vector<int> toks = {cfg.sos(), 2, 3};
    const DecoderOutput out = decoder_forward(g, p, cfg, enc, toks);
    REQUIRE(out.cross_attention.size() == std::size_t(cfg.decoder_layers * cfg.heads));
    for (NodeId n : out.cross_attention) {
      for (double v : g.value(n).data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
    }
  }

  TEST_CASE("hand-set attention weights") {
    // One head, dimension 2, identity projections: probs = softmax(q k^T / sqrt 2).
    ParamStore p;
    for (const char* k : {"q", "k", "v", "o"}) {
      p.add(std::string("att.w") + k, Tensor::from_rows({{1, 0}, {0, 1}}));
      p.add(std::string("att.b") + k, Tensor::vector(2));
    }
    const Tensor q = Tensor::from_rows({{1, 0}, {0, 2}});
    const Tensor m = Tensor::from_rows({{1, 1}, {-1, 0}, {0, 3}});
    Graph g;
    std::vector<NodeId> probs;
    const NodeId out = attention(g, p, "att", g.constant(q), g.constant(m), 1, nullptr, &probs);
    REQUIRE(probs.size() == 1);
    const Tensor& pr = g.value(probs[0]);
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<double> s(3);
      double z = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        s[j] = std::exp((q.at(i, 0) * m.at(j, 0) + q.at(i, 1) * m.at(j, 1)) / std::sqrt(2.0));
        z += s[j];
      }
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(pr.at(i, j) == doctest::Approx(s[j] / z).epsilon(1e-14));
      }
      // Output is the attention-weighted memory.
      for (std::size_t c = 0; c < 2; ++c) {
        double v = 0.0;
        for (std::size_t j = 0; j < 3; ++j) v += s[j] / z * m.at(j, c);
        CHECK(g.value(out).at(i, c) == doctest::Approx(v).epsilon(1e-13));
      }
    }
  }

  TEST_CASE("full two-block encoder passes the gradient check") {
    ModelConfig cfg = small_config();
    cfg.embed_dim = 16;
    ParamStore p = init_params(cfg, 28);
    const Tensor a = random_matrix(6, 5, 29), b = random_matrix(6, 4, 30);
    const std::vector<std::size_t> mask = {1, 2};
    const std::vector<int> targets = {0, 1, 2, 3, 4, 5};
    Rng rng(31);
    for (std::size_t i = 0; i < p.size(); ++i) {
      for (double& v : p.value(i).storage()) v += 0.1 * rng.normal();
    }
    const GradCheckResult r = grad_check(p, [&](Graph& g, const ParamStore& s) {
      const NodeId f = encode(g, s, cfg, {&a, &b}, mask).final;
      return ops::cross_entropy(g, cluster_logits(g, s, f), targets);
    });
    CAPTURE(r.worst_param);
    CHECK(r.max_rel_error < 1e-4);
    CHECK(r.coords_checked >= 50);
  }

  TEST_CASE("heads and config validation") {
    ModelConfig cfg = small_config();
    ParamStore p = init_params(cfg, 32);
    add_frame_head(p, cfg, 33);
    CHECK(p["frame_head.w"].shape() == Shape{16, 5});
    drop_cluster_head(p);
    CHECK_FALSE(p.contains("cluster_head.w"));
    CHECK(cfg.vocab() == cfg.classes + 3);
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK(init_params(small_config(), 5) == init_params(small_config(), 5));
  }
}
