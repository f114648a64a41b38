#include <doctest.h>

#include <cmath>
#include <functional>

#include "unimask/finetune.hpp"
#include "unimask/random.hpp"

using namespace unimask;

namespace {

StepScorer random_scorer(std::size_t vocab, std::uint64_t seed) {
  return [vocab, seed](std::span<const int> prefix) {
    std::uint64_t h = seed;
    for (int t : prefix) h = derive_seed(h, std::uint64_t(t) + 1);
    Rng rng(h);
    std::vector<double> l(vocab);
    double z = 0.0;
    for (double& v : l) {
      v = 2.0 * rng.normal();
      z += std::exp(v);
    }
    for (double& v : l) v -= std::log(z);
    return l;
  };
}

/// Best finished hypothesis over every string of non-end symbols shorter
/// than max_len followed by the end symbol.
Hypothesis enumerate_best(const StepScorer& scorer, const BeamConfig& cfg, std::size_t vocab) {
  Hypothesis best;
  bool have = false;
  std::vector<int> prefix = {cfg.sos};
  std::function<void(double)> rec = [&](double lp) {
    const auto step = scorer(prefix);
    Hypothesis h;
    h.tokens.assign(prefix.begin() + 1, prefix.end());
    h.log_prob = lp + step[std::size_t(cfg.eos)];
    h.length = h.tokens.size() + 1;
    h.score = h.log_prob / std::pow(double(h.length), cfg.alpha);
    if (!have || h.score > best.score) best = h;
    have = true;
    if (h.length >= cfg.max_len) return;
    for (std::size_t v = 0; v < vocab; ++v) {
      if (int(v) == cfg.eos) continue;
      prefix.push_back(int(v));
      rec(lp + step[v]);
      prefix.pop_back();
    }
  };
  rec(0.0);
  return best;
}

Corpus corpus(std::size_t n, ProfileMix mix, const char* prefix, std::uint64_t seed = 1) {
  GeneratorConfig g;
  g.seed = seed;
  g.min_frames = 20;
  g.max_frames = 40;
  return generate_corpus(g, {n, mix, prefix});
}

ModelConfig small_model() {
  ModelConfig m;
  m.frontend_dim = 16;
  m.embed_dim = 32;
  m.layers = 3;
  m.heads = 2;
  m.ffn_dim = 48;
  m.clusters = 8;
  return m;
}

FinetuneConfig quick(std::int64_t updates, std::int64_t nfrz, int lfrz) {
  FinetuneConfig f;
  f.updates = updates;
  f.nfrz = nfrz;
  f.lfrz = lfrz;
  f.batch_frames = 80;
  return f;
}

bool is_head(const std::string& n) { return n.starts_with("frame_head.") || n.starts_with("decoder."); }

}  // namespace

TEST_SUITE("finetune") {
  TEST_CASE("word error rate") {
    const std::vector<int> abc = {0, 1, 2};
    CHECK(wer(abc, abc) == 0.0);
    CHECK(wer(abc, std::vector<int>{0, 23, 2}) == doctest::Approx(1.0 / 3.0));
    CHECK(wer(std::vector<int>{0}, abc) == 2.0);
    CHECK_THROWS_AS(wer(std::vector<int>{}, abc), std::invalid_argument);

    struct Case {
      std::vector<int> ref, hyp;
      std::size_t s, i, d;
    };
    const std::vector<Case> table = {
        {{1, 2, 3}, {1, 2, 3}, 0, 0, 0},    {{1, 2, 3}, {1, 4, 3}, 1, 0, 0},
        {{1, 2, 3}, {1, 3}, 0, 0, 1},       {{1, 2, 3}, {1, 2, 5, 3}, 0, 1, 0},
        {{1, 2, 3}, {}, 0, 0, 3},           {{1}, {2, 3}, 1, 1, 0},
        {{1, 2, 3, 4}, {2, 3, 4, 5}, 0, 1, 1}, {{1, 1, 2}, {1, 2, 2}, 1, 0, 0},
        {{5, 6, 7, 8, 9}, {9, 8, 7, 6, 5}, 4, 0, 0}, {{1, 2}, {3, 1, 2, 4}, 0, 2, 0},
    };
    for (const auto& c : table) {
      const EditCounts e = align(c.ref, c.hyp);
      CHECK(e.substitutions == c.s);
      CHECK(e.insertions == c.i);
      CHECK(e.deletions == c.d);
      CHECK(e.matches + e.substitutions + e.deletions == c.ref.size());
    }

    // Equal lengths: symmetric. Unequal: generally not.
    const std::vector<int> x = {1, 2, 3, 4}, y = {2, 2, 4, 3};
    CHECK(wer(x, y) == wer(y, x));
    const std::vector<int> s = {1, 2}, l = {1, 2, 3, 4};
    CHECK(wer(s, l) == 1.0);
    CHECK(wer(l, s) == 0.5);
  }

  TEST_CASE("beam search against exhaustive enumeration") {
    for (double alpha : {0.0, 0.5, 1.0}) {
      for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const BeamConfig cfg{64, alpha, 4, 3, 0, {}};
        const StepScorer sc = random_scorer(3, seed);
        const Hypothesis got = beam_search(sc, cfg);
        const Hypothesis want = enumerate_best(sc, cfg, 3);
        CAPTURE(seed);
        CHECK(got.tokens == want.tokens);
        CHECK(got.score == doctest::Approx(want.score).epsilon(1e-12));
        CHECK_FALSE(got.forced_end);
      }
    }
  }

  TEST_CASE("beam of one is greedy; alpha zero ranks by raw sum") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const StepScorer sc = random_scorer(5, seed);
      for (double alpha : {0.0, 1.0}) {
        const BeamConfig cfg{1, alpha, 8, 5, 0, {}};
        const Hypothesis b = beam_search(sc, cfg);
        const Hypothesis g = greedy_decode(sc, cfg);
        CHECK(b.tokens == g.tokens);
        CHECK(b.log_prob == g.log_prob);
      }
      const Hypothesis h = beam_search(sc, {6, 0.0, 6, 5, 0, {}});
      CHECK(h.score == h.log_prob);
    }
    CHECK(length_normalized(-3.0, 7, 0.0) == -3.0);
    CHECK(length_normalized(-3.0, 4, 1.0) == -0.75);
  }

  TEST_CASE("wider beams reach the exhaustive optimum and never lose to it") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const StepScorer sc = random_scorer(3, seed);
      const double top = beam_search(sc, {64, 0.5, 4, 3, 0, {}}).score;
      for (std::size_t b = 1; b <= 8; ++b) {
        const Hypothesis h = beam_search(sc, {b, 0.5, 4, 3, 0, {}});
        if (!h.forced_end) CHECK(h.score <= top + 1e-12);
      }
    }
  }

  TEST_CASE("score is not monotone in the beam width in general") {
    // A pruned beam of two keeps a prefix whose best completion is worse than
    // the one greedy search follows. Both hypotheses end with the end symbol.
    const StepScorer sc = random_scorer(3, 36961);
    const Hypothesis one = beam_search(sc, {1, 0.0, 4, 3, 0, {}});
    const Hypothesis two = beam_search(sc, {2, 0.0, 4, 3, 0, {}});
    CHECK_FALSE(one.forced_end);
    CHECK_FALSE(two.forced_end);
    CHECK(two.score < one.score);
  }

  TEST_CASE("forced end when no hypothesis finishes") {
    const StepScorer never = [](std::span<const int>) {
      return std::vector<double>{-INFINITY, std::log(0.5), std::log(0.5)};
    };
    const Hypothesis h = beam_search(never, {2, 1.0, 3, 3, 0, {}});
    CHECK(h.forced_end);
    CHECK(h.tokens.size() == 3);
    CHECK(h.tokens == std::vector<int>{1, 1, 1});
  }

  TEST_CASE("lfrz freezes frontends, fusion, mask and a block prefix") {
    CHECK_FALSE(frozen_by_lfrz("frontend_a.fc1.w", 0, 3));
    CHECK(frozen_by_lfrz("frontend_a.fc1.w", 1, 3));
    CHECK(frozen_by_lfrz("fusion.b", 1, 3));
    CHECK(frozen_by_lfrz("mask_emb", 1, 3));
    CHECK(frozen_by_lfrz("encoder.block.0.ln1.g", 1, 3));
    CHECK_FALSE(frozen_by_lfrz("encoder.block.1.ln1.g", 1, 3));
    CHECK_FALSE(frozen_by_lfrz("encoder.final_ln.g", 2, 3));
    CHECK(frozen_by_lfrz("encoder.final_ln.g", 3, 3));
    CHECK_FALSE(frozen_by_lfrz("frame_head.w", 3, 3));
  }

  TEST_CASE("freezing is bitwise exact") {
    const Corpus c = corpus(16, {}, "f");
    const ModelConfig mc = small_model();
    const ParamStore base = init_params(mc, 2);

    SUBCASE("everything frozen: only the head moves") {
      const ParamStore out = finetune(base, mc, c, quick(8, 8, 3)).params;
      for (std::size_t i = 0; i < base.size(); ++i) {
        if (base.name(i).starts_with("cluster_head.")) continue;
        CHECK(out[base.name(i)] == base.value(i));
      }
      CHECK_FALSE(out.contains("cluster_head.w"));
      CHECK(out.contains("frame_head.w"));
    }
    SUBCASE("nothing frozen: the encoder moves") {
      const ParamStore out = finetune(base, mc, c, quick(8, 0, 0)).params;
      std::size_t moved = 0;
      for (std::size_t i = 0; i < base.size(); ++i) {
        if (!base.name(i).starts_with("cluster_head.")) moved += out[base.name(i)] == base.value(i) ? 0 : 1;
      }
      CHECK(moved > 0);
    }
    for (int lfrz : {1, 2}) {
      CAPTURE(lfrz);
      const ParamStore out = finetune(base, mc, c, quick(8, 2, lfrz)).params;
      for (std::size_t i = 0; i < base.size(); ++i) {
        const std::string& n = base.name(i);
        if (n.starts_with("cluster_head.") || is_head(n)) continue;
        const bool same = out[n] == base.value(i);
        CAPTURE(n);
        if (frozen_by_lfrz(n, lfrz, mc.layers)) CHECK(same);
        // Biases and gains of the trainable blocks all move under Adam.
        else if (n.starts_with("encoder.block.")) CHECK_FALSE(same);
      }
    }
  }

  TEST_CASE("configuration validation") {
    ModelConfig mc = small_model();
    FinetuneConfig f;
    f.nfrz = f.updates + 1;
    CHECK_THROWS_AS(f.validate(mc), std::invalid_argument);
    f = {};
    f.lfrz = mc.layers + 1;
    CHECK_THROWS_AS(f.validate(mc), std::invalid_argument);
    f = {};
    f.schedule.hold = 0.5;
    CHECK_THROWS_AS(f.validate(mc), std::invalid_argument);
    f = {};
    f.profile = Profile::B;
    mc.dim_b = 0;
    CHECK_THROWS_AS(f.validate(mc), std::invalid_argument);
    CHECK(parse_task("seq2seq") == Task::Seq2Seq);
    CHECK_THROWS(parse_task("ctc"));
  }

  TEST_CASE("leaked labels give zero WER") {
    // A frame head that reads the unit straight from a hand-built encoder.
    ModelConfig mc;
    mc.dim_a = 20;
    mc.dim_b = 0;
    mc.frontend_dim = 20;
    mc.embed_dim = 40;
    mc.layers = 1;
    mc.heads = 1;
    mc.classes = 20;
    ParamStore p = init_params(mc, 3);
    // Zero residual branches so the encoder passes the fused input through
    // the final norm; identity frontends and fusion place the one-hot unit
    // in the first 20 channels.
    for (std::size_t i = 0; i < p.size(); ++i) {
      const std::string& n = p.name(i);
      if (n.find(".attn.wo") != std::string::npos || n.find(".ffn.fc2.w") != std::string::npos) p.value(i).fill(0.0);
      if (n.find(".attn.bo") != std::string::npos || n.find(".ffn.fc2.b") != std::string::npos) p.value(i).fill(0.0);
    }
    for (const char* w : {"frontend_a.fc1.w", "frontend_a.fc2.w"}) {
      Tensor& t = p[w];
      t.fill(0.0);
      for (std::size_t j = 0; j < 20; ++j) t.at(j, j) = 1.0;
    }
    p["fusion.w"].fill(0.0);
    for (std::size_t j = 0; j < 20; ++j) p["fusion.w"].at(j, j) = 1.0;
    mc.positional = false;
    add_frame_head(p, mc, 4);
    p["frame_head.w"].fill(0.0);
    for (std::size_t j = 0; j < 20; ++j) p["frame_head.w"].at(j, j) = 1.0;

    Corpus c = corpus(10, {0, 1, 0}, "oracle");
    for (auto& u : c.utterances) {
      Tensor onehot = Tensor::matrix(u.frames(), 20);
      for (std::size_t t = 0; t < u.frames(); ++t) onehot.at(t, std::size_t(u.units[t])) = 1.0;
      u.features_a = onehot;
    }
    const EvalEntry e = evaluate(p, mc, c, {Profile::A, false}, {});
    CHECK(e.wer == 0.0);
    CHECK(e.token_accuracy == 1.0);
  }

  TEST_CASE("evaluation: determinism, zero-fill, greedy equivalence") {
    const Corpus train = corpus(30, {}, "tr");
    Corpus test = corpus(10, {}, "te");
    const ModelConfig mc = small_model();
    FinetuneConfig f = quick(20, 0, 0);
    f.profile = Profile::AB;
    const ParamStore frame = finetune(init_params(mc, 5), mc, train, f).params;
    for (const auto& cond : standard_conditions()) {
      const EvalEntry a = evaluate(frame, mc, test, cond, {});
      const EvalEntry b = evaluate(frame, mc, test, cond, {});
      CHECK(a.to_json() == b.to_json());
      CHECK(a.wer >= 0.0);
      CHECK(a.utterances == test.utterances.size());
    }
    Corpus zeroed = test;
    for (auto& u : zeroed.utterances) u.features_b->fill(0.0);
    CHECK(evaluate(frame, mc, test, {Profile::A, false}, {}).wer ==
          evaluate(frame, mc, zeroed, {Profile::AB, false}, {}).wer);

    f.task = Task::Seq2Seq;
    const ParamStore s2s = finetune(init_params(mc, 6), mc, train, f).params;
    CHECK(s2s.contains("decoder.embed"));
    CHECK_FALSE(s2s.contains("frame_head.w"));
    DecodeConfig greedy;
    greedy.greedy = true;
    DecodeConfig beam1;
    beam1.beam = 1;
    const EvalEntry g = evaluate(s2s, mc, test, {Profile::AB, false}, greedy);
    const EvalEntry b = evaluate(s2s, mc, test, {Profile::AB, false}, beam1);
    CHECK(g.wer == b.wer);
  }

  TEST_CASE("transfer grid from a randomly initialized control") {
    const Corpus train = corpus(120, {}, "tr", 3);
    const Corpus test = corpus(30, {}, "te", 3);
    ModelConfig mc = small_model();
    FinetuneConfig f = quick(250, 0, 0);
    f.batch_frames = 200;
    f.lr = 2e-3;
    const TransferMatrix m = transfer_matrix(init_params(mc, 7), mc, train, test, f, {});
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 5; ++c) CHECK(m.entries[r][c].utterances == test.utterances.size());
    }
    // Columns: ab-clean, ab-noisy, a-clean, a-noisy, b-clean.
    const auto wer = [&](std::size_t r, std::size_t c) { return m.entries[r][c].wer; };
    CHECK(wer(1, 2) <= wer(1, 4));
    CHECK(wer(2, 4) <= wer(2, 2));
    CHECK(wer(0, 0) <= wer(0, 2));
    CHECK(wer(0, 0) <= wer(0, 4));
    CHECK(m.to_csv().find("b-clean") != std::string::npos);
  }
}
