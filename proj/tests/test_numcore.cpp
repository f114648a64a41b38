#include <doctest.h>

#include <cmath>
#include <sstream>

#include "unimask/gradcheck.hpp"
#include "unimask/graph.hpp"
#include "unimask/ops.hpp"
#include "unimask/optim.hpp"
#include "unimask/random.hpp"
#include "unimask/serialize.hpp"
#include "unimask/tensor.hpp"

using namespace unimask;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}

Tensor random_vector(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::vector(n);
  for (double& v : t.storage()) v = rng.normal();
  return t;
}

/// sum(node * R) for a fixed random R, so every output coordinate matters.
NodeId project_out(Graph& g, NodeId node, std::uint64_t seed) {
  const Tensor& v = g.value(node);
  Tensor r = v.rank() == 2 ? random_matrix(v.rows(), v.cols(), seed) : random_vector(v.size(), seed);
  return ops::sum(g, ops::mul(g, node, g.constant(std::move(r))));
}

GradCheckResult check(ParamStore& p, const LossBuilder& f) {
  GradCheckOptions o;
  o.min_coords = 50;
  return grad_check(p, f, o);
}

}  // namespace

TEST_SUITE("numcore") {
  TEST_CASE("softmax of equal logits is uniform") {
    Graph g;
    const NodeId s = ops::softmax(g, g.constant(Tensor::from_rows({{0, 0, 0}})));
    for (double v : g.value(s).data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("layer norm of a constant row is zero before the affine terms") {
    Graph g;
    Tensor gamma = Tensor::vector(4);
    gamma.fill(3.0);
    const NodeId y = ops::layer_norm(g, g.constant(Tensor::from_rows({{2, 2, 2, 2}})),
                                     g.constant(gamma), g.constant(Tensor::vector(4)));
    for (double v : g.value(y).data()) CHECK(v == 0.0);
  }

  TEST_CASE("matmul matches a triple-loop product") {
    const Tensor a = random_matrix(2, 3, 1), b = random_matrix(3, 2, 2);
    Graph g;
    const Tensor& c = g.value(ops::matmul(g, g.constant(a), g.constant(b)));
    REQUIRE(c.shape() == Shape{2, 2});
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) s += a.at(i, k) * b.at(k, j);
        CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-14));
      }
    }
    // Larger shapes go through the same path.
    const Tensor x = random_matrix(17, 33, 3), y = random_matrix(33, 9, 4);
    const Tensor& z = g.value(ops::matmul(g, g.constant(x), g.constant(y)));
    for (std::size_t i = 0; i < 17; ++i) {
      for (std::size_t j = 0; j < 9; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 33; ++k) s += x.at(i, k) * y.at(k, j);
        CHECK(z.at(i, j) == doctest::Approx(s).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("matmul rejects mismatched inner dimensions") {
    Graph g;
    CHECK_THROWS_AS(ops::matmul(g, g.constant(Tensor::matrix(2, 3)), g.constant(Tensor::matrix(2, 3))),
                    ShapeError);
  }

  TEST_CASE("gradient of sum is all ones; of sum(x^2)/2 is x") {
    ParamStore p;
    p.add("x", random_matrix(3, 4, 5));
    {
      Graph g;
      const Gradients gr = backward(g, ops::sum(g, g.param(p, "x")), p);
      for (double v : gr[0]->data()) CHECK(v == 1.0);
    }
    {
      Graph g;
      const NodeId x = g.param(p, "x");
      const Gradients gr = backward(g, ops::scale(g, ops::sum(g, ops::mul(g, x, x)), 0.5), p);
      CHECK(*gr[0] == p["x"]);
    }
  }

  TEST_CASE("backward requires a scalar loss") {
    ParamStore p;
    p.add("x", random_matrix(2, 2, 6));
    Graph g;
    CHECK_THROWS_AS(backward(g, g.param(p, "x"), p), ShapeError);
  }

  TEST_CASE("frozen parameters receive no gradient") {
    ParamStore p;
    p.add("a", random_matrix(2, 2, 7));
    p.add("b", random_matrix(2, 2, 8));
    Graph g;
    g.set_trainable_mask({false, true});
    const NodeId loss = ops::sum(g, ops::matmul(g, g.param(p, "a"), g.param(p, "b")));
    const Gradients gr = backward(g, loss, p);
    CHECK_FALSE(gr[0].has_value());
    CHECK(gr[1].has_value());
  }

  TEST_CASE("every primitive agrees with central finite differences") {
    ParamStore p;
    p.add("a", random_matrix(4, 5, 10));
    p.add("b", random_matrix(5, 3, 11));
    p.add("c", random_matrix(4, 5, 12));
    p.add("bias", random_vector(5, 13));
    p.add("gamma", random_vector(5, 14));
    p.add("beta", random_vector(5, 15));
    p.add("table", random_matrix(6, 5, 16));
    p.add("fill", random_vector(5, 17));

    const std::vector<std::pair<const char*, LossBuilder>> cases = {
        {"matmul", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::matmul(g, g.param(s, "a"), g.param(s, "b")), 1);
         }},
        {"transpose", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::transpose(g, g.param(s, "a")), 2);
         }},
        {"add", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::add(g, g.param(s, "a"), g.param(s, "c")), 3);
         }},
        {"add_bias", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::add_bias(g, g.param(s, "a"), g.param(s, "bias")), 4);
         }},
        {"mul", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::mul(g, g.param(s, "a"), g.param(s, "c")), 5);
         }},
        {"layer_norm", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::layer_norm(g, g.param(s, "a"), g.param(s, "gamma"), g.param(s, "beta")), 6);
         }},
        {"softmax", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::softmax(g, g.param(s, "a")), 7);
         }},
        {"log_softmax", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::log_softmax(g, g.param(s, "a")), 8);
         }},
        {"gelu", [](Graph& g, const ParamStore& s) {
           return project_out(g, ops::gelu(g, g.param(s, "a")), 9);
         }},
        {"embedding", [](Graph& g, const ParamStore& s) {
           const std::vector<int> ids = {0, 3, 3, 5};
           return project_out(g, ops::embedding_lookup(g, g.param(s, "table"), ids), 10);
         }},
        {"concat/slice", [](Graph& g, const ParamStore& s) {
           const NodeId cat = ops::concat_lastdim(g, g.param(s, "a"), g.param(s, "c"));
           return project_out(g, ops::slice_lastdim(g, cat, 3, 4), 11);
         }},
        {"replace_rows", [](Graph& g, const ParamStore& s) {
           const std::vector<std::size_t> rows = {1, 3};
           return project_out(g, ops::replace_rows(g, g.param(s, "a"), rows, g.param(s, "fill")), 12);
         }},
        {"cross_entropy", [](Graph& g, const ParamStore& s) {
           const std::vector<int> t = {0, 4, 2, 1};
           const std::vector<double> w = {1.0, 0.0, 0.5, 2.0};
           return ops::cross_entropy(g, g.param(s, "a"), t, w);
         }},
    };
    for (const auto& [name, f] : cases) {
      CAPTURE(name);
      const GradCheckResult r = check(p, f);
      CHECK(r.max_rel_error < 1e-6);
      CHECK(r.coords_checked >= 50);
    }
  }

  TEST_CASE("gradient check of a random two-layer composite") {
    ParamStore p;
    p.add("w1", random_matrix(6, 8, 20, 0.5));
    p.add("b1", random_vector(8, 21));
    p.add("w2", random_matrix(8, 3, 22, 0.5));
    const Tensor x = random_matrix(5, 6, 23);
    const std::vector<int> t = {0, 1, 2, 1, 0};
    const GradCheckResult r = check(p, [&](Graph& g, const ParamStore& s) {
      const NodeId h = ops::gelu(g, ops::add_bias(g, ops::matmul(g, g.constant(x), g.param(s, "w1")), g.param(s, "b1")));
      return ops::cross_entropy(g, ops::matmul(g, h, g.param(s, "w2")), t);
    });
    CHECK(r.max_rel_error < 1e-4);
  }

  TEST_CASE("gradient check detects a corrupted backward rule") {
    ParamStore p;
    p.add("x", random_matrix(3, 3, 30));
    const GradCheckResult r = check(p, [](Graph& g, const ParamStore& s) {
      const NodeId x = g.param(s, "x");
      Tensor out = g.value(x);
      for (double& v : out.storage()) v = v * v;
      // d(x^2)/dx is 2x; the rule below claims 3x.
      const NodeId sq = g.record("bad_square", std::move(out), {x}, [x](Graph& gg, NodeId self) {
        const Tensor d = gg.grad(self);
        const Tensor xv = gg.value(x);
        Tensor& dx = gg.grad(x);
        for (std::size_t i = 0; i < d.size(); ++i) dx[i] += 3.0 * xv[i] * d[i];
      });
      return ops::sum(g, sq);
    });
    CHECK(r.max_rel_error > 1e-2);
  }

  TEST_CASE("cross entropy of uniform logits is log K; zero-weight rows are ignored") {
    Graph g;
    const std::vector<int> t = {3, 7};
    const NodeId l = ops::cross_entropy(g, g.constant(Tensor::matrix(2, 40)), t);
    CHECK(g.value(l).item() == doctest::Approx(std::log(40.0)).epsilon(1e-14));

    Tensor logits = random_matrix(3, 4, 31);
    const std::vector<int> t3 = {0, 1, 2};
    const std::vector<double> w = {1.0, 0.0, 1.0};
    Tensor other = logits;
    for (std::size_t c = 0; c < 4; ++c) other.at(1, c) += 5.0 * (c + 1);
    Graph g2;
    const double a = g2.value(ops::cross_entropy(g2, g2.constant(logits), t3, w)).item();
    const double b = g2.value(ops::cross_entropy(g2, g2.constant(other), t3, w)).item();
    CHECK(a == b);
  }

  TEST_CASE("adam: zero gradients leave parameters unchanged") {
    ParamStore p;
    p.add("x", random_matrix(2, 3, 40));
    const ParamStore before = p;
    AdamState st = AdamState::for_params(p);
    Gradients gr = {Tensor::matrix(2, 3)};
    for (int i = 0; i < 5; ++i) adam_step(p, gr, st, 0.1);
    CHECK(p == before);
  }

  TEST_CASE("adam: first step moves by lr for a constant unit gradient") {
    ParamStore p;
    p.add("x", Tensor::vector(1));
    p["x"][0] = 2.0;
    AdamState st = AdamState::for_params(p);
    Gradients gr = {Tensor({1}, {1.0})};
    adam_step(p, gr, st, 0.1);
    // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    CHECK(p["x"][0] == doctest::Approx(2.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  }

  TEST_CASE("adam: 100 steps on x^2 from x = 1") {
    ParamStore p;
    p.add("x", Tensor({1}, {1.0}));
    AdamState st = AdamState::for_params(p);
    for (int i = 0; i < 100; ++i) {
      Gradients gr = {Tensor({1}, {2.0 * p["x"][0]})};
      adam_step(p, gr, st, 0.1);
    }
    CHECK(std::abs(p["x"][0]) < 0.1);
  }

  TEST_CASE("adam rejects a non-finite gradient") {
    ParamStore p;
    p.add("x", Tensor({1}, {1.0}));
    AdamState st = AdamState::for_params(p);
    Gradients gr = {Tensor({1}, {std::nan("")})};
    CHECK_THROWS_AS(adam_step(p, gr, st, 0.1), NumericError);
  }

  TEST_CASE("gradient clipping") {
    Gradients small = {Tensor({2}, {0.3, 0.4})};
    CHECK(clip_grad_norm(small, 1.0) == doctest::Approx(0.5));
    CHECK((*small[0])[0] == 0.3);
    Gradients big = {Tensor({2}, {0.0, 4.0})};
    CHECK(clip_grad_norm(big, 1.0) == doctest::Approx(4.0));
    CHECK((*big[0])[1] == doctest::Approx(1.0).epsilon(1e-15));

    for (std::uint64_t s = 0; s < 20; ++s) {
      Gradients gr = {random_matrix(3, 3, 100 + s, 0.2 * double(s)), std::nullopt, random_vector(5, 200 + s)};
      const double pre = global_norm(gr);
      clip_grad_norm(gr, 1.0);
      CHECK(global_norm(gr) == doctest::Approx(std::min(pre, 1.0)).epsilon(1e-10));
      const Gradients once = gr;
      clip_grad_norm(gr, 1.0);
      CHECK(*gr[0] == *once[0]);
    }
  }

  TEST_CASE("learning-rate schedules") {
    CHECK(warmup_linear_lr(0, 100, 1.0, 0.1) == 0.0);
    CHECK(warmup_linear_lr(5, 100, 1.0, 0.1) == doctest::Approx(0.5));
    CHECK(warmup_linear_lr(10, 100, 1.0, 0.1) == doctest::Approx(1.0));
    CHECK(warmup_linear_lr(55, 100, 1.0, 0.1) == doctest::Approx(0.5));
    CHECK(warmup_linear_lr(100, 100, 1.0, 0.1) == doctest::Approx(0.0));

    const TriStageSchedule s;
    CHECK(s.lr(0, 300, 1.0) == doctest::Approx(0.01));
    CHECK(s.lr(99, 300, 1.0) == doctest::Approx(1.0));
    CHECK(s.lr(300, 300, 1.0) == doctest::Approx(0.05));
    double prev = 0.0;
    for (int i = 0; i <= 99; ++i) {
      CHECK(s.lr(i, 300, 1.0) >= prev);
      prev = s.lr(i, 300, 1.0);
    }
  }

  TEST_CASE("tensor serialization round trip") {
    Tensor t = random_matrix(3, 5, 50);
    std::stringstream ss;
    io::write_tensor(ss, t);
    const Tensor back = io::read_tensor(ss);
    CHECK(back == round_to_f32(t));
    std::stringstream again;
    io::write_tensor(again, back);
    CHECK(again.str() == [&] {
      std::stringstream s2;
      io::write_tensor(s2, round_to_f32(t));
      return s2.str();
    }());
  }

  TEST_CASE("tensor reader rejects bad magic and truncation") {
    std::stringstream bad("XXXX garbage");
    CHECK_THROWS_AS(io::read_tensor(bad), FormatError);
    std::stringstream ss;
    io::write_tensor(ss, random_matrix(2, 2, 51));
    std::string s = ss.str();
    std::stringstream cut(s.substr(0, s.size() - 3));
    CHECK_THROWS_AS(io::read_tensor(cut), FormatError);
  }

  TEST_CASE("derived seeds are stable and purpose-separated") {
    CHECK(derive_seed(1, "batch") == derive_seed(1, "batch"));
    CHECK(derive_seed(1, "batch") != derive_seed(1, "mask"));
    CHECK(derive_seed(1, "batch") != derive_seed(2, "batch"));
    CHECK(derive_seed(1, std::uint64_t{0}) != derive_seed(1, std::uint64_t{1}));
  }
}
