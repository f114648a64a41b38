#include "acceptance.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "unimask/checkpoint.hpp"
#include "unimask/clustering.hpp"
#include "unimask/datagen.hpp"
#include "unimask/finetune.hpp"
#include "unimask/metrics.hpp"
#include "unimask/pretrain.hpp"
#include "unimask/serialize.hpp"

namespace unimask::acceptance {
namespace fs = std::filesystem;

namespace {

using Labels = std::vector<std::optional<std::vector<int>>>;

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Corpora, targets and models for one seed, built on first use.
class Workspace {
 public:
  Workspace(std::uint64_t seed, const SuiteOptions& options)
      : seed_(seed), options_(options), config_(pattern_config(seed, options.protocol)) {}

  const ExperimentConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  const Corpus& train() {
    if (!train_) train_ = generate_corpus(config_.generator, {config_.data.train_utterances, config_.data.mix, "train"});
    return *train_;
  }
  const Corpus& test() {
    if (!test_) test_ = generate_corpus(config_.generator, {config_.data.test_utterances, config_.data.mix, "test"});
    return *test_;
  }
  const Corpus& ood() {
    if (!ood_) {
      ood_ = make_ood_corpus(config_.generator, {config_.data.ood_utterances, {0.0, 1.0, 0.0}, "ood"},
                             config_.data.ood_perturbation);
    }
    return *ood_;
  }
  const Corpus& mixed() {
    if (!mixed_) {
      const Corpus extra = generate_corpus(
          config_.generator, {options_.protocol.extra_a_utterances, {0.0, 1.0, 0.0}, "extra"});
      mixed_ = merge_corpora(train(), extra);
    }
    return *mixed_;
  }
  const TargetSet& targets() {
    if (!targets_) targets_ = build_raw_targets(train(), config_.target_options());
    return *targets_;
  }
  const TargetSet& mixed_targets() {
    if (!mixed_targets_) mixed_targets_ = build_raw_targets(mixed(), config_.target_options());
    return *mixed_targets_;
  }

  /// "drop": modality dropout on AB data; "nodrop": AB only; "mixed": dropout
  /// on AB data plus extra A-only utterances.
  /// `updates` overrides the protocol budget.
  const ParamStore& model(const std::string& variant, std::int64_t updates = 0) {
    ExperimentConfig c = config_;
    if (updates > 0) c.pretrain.updates = updates;
    const std::string key = variant + "/" + std::to_string(c.pretrain.updates);
    auto it = models_.find(key);
    if (it != models_.end()) return it->second;
    if (variant == "nodrop") c.pretrain.dropout = ModalityDropoutConfig::none();
    const bool mixed_data = variant == "mixed";
    const std::string hash = c.hash() + (mixed_data ? "-mixed" : "");
    const fs::path path = options_.output_dir / "cache" / (variant + "_s" + std::to_string(seed_) + "_" + hash + ".umck");
    std::optional<Checkpoint> ck;
    if (fs::exists(path)) {
      try {
        ck = load_checkpoint(path, &c.model);
        if (ck->provenance.config_hash != hash) ck.reset();
      } catch (const std::exception&) {
        ck.reset();
      }
    }
    if (!ck) {
      const Corpus& corpus = mixed_data ? mixed() : train();
      const Labels& labels = mixed_data ? mixed_targets().labels : targets().labels;
      const auto t0 = std::chrono::steady_clock::now();
      PretrainResult r = pretrain(init_params(c.model, derive_seed(c.seed, "init")), c.model, corpus,
                                  labels, c.pretrain);
      train_seconds_[key] = seconds_since(t0);
      fs::create_directories(path.parent_path());
      save_checkpoint({c.model, std::move(r.params), std::nullopt, {"pretrain", hash, build_tag(), c.pretrain.updates}},
                      path);
      // Always continue from the stored (f32) values so cached and fresh runs agree.
      ck = load_checkpoint(path, &c.model);
    }
    return models_.emplace(key, std::move(ck->params)).first->second;
  }

  /// Pre-training time of a model trained in this process (nullopt if loaded).
  std::optional<double> train_seconds(const std::string& variant, std::int64_t updates) const {
    const auto it = train_seconds_.find(variant + "/" + std::to_string(updates));
    if (it == train_seconds_.end()) return std::nullopt;
    return it->second;
  }

  const LayerwisePnmi& layerwise(const std::string& variant) {
    auto it = layerwise_.find(variant);
    if (it != layerwise_.end()) return it->second;
    return layerwise_.emplace(variant, layerwise_pnmi(model(variant), config_.model, train(),
                                                      config_.metric_options()))
        .first->second;
  }

  /// Fine-tune `variant` on A-only labels from `data` ("train" or "ood").
  const ParamStore& finetuned(const std::string& variant, const std::string& data) {
    const std::string key = variant + "/" + data;
    auto it = finetuned_.find(key);
    if (it != finetuned_.end()) return it->second;
    const Corpus& corpus = data == "ood" ? ood() : train();
    FinetuneResult r = finetune(model(variant), config_.model, corpus, config_.finetune);
    return finetuned_.emplace(key, std::move(r.params)).first->second;
  }

  double wer(const std::string& variant, const std::string& data, EvalCondition condition) {
    return evaluate(finetuned(variant, data), config_.model, test(), condition, config_.decode).wer;
  }

 private:
  std::uint64_t seed_;
  const SuiteOptions& options_;
  ExperimentConfig config_;
  std::optional<Corpus> train_, test_, ood_, mixed_;
  std::optional<TargetSet> targets_, mixed_targets_;
  std::map<std::string, ParamStore> models_;
  std::map<std::string, double> train_seconds_;
  std::map<std::string, LayerwisePnmi> layerwise_;
  std::map<std::string, ParamStore> finetuned_;
};

class Runner {
 public:
  Runner(const SuiteOptions& options, std::ostream& out) : options_(options), out_(out) {
    fs::create_directories(options_.output_dir);
  }

  Workspace& ws(std::uint64_t seed) {
    auto it = spaces_.find(seed);
    if (it == spaces_.end()) it = spaces_.emplace(seed, std::make_unique<Workspace>(seed, options_)).first;
    return *it->second;
  }

  void write(const std::string& name, const std::string& text) {
    io::write_file(options_.output_dir / name, text);
  }

  CriterionResult report(CriterionResult r) {
    out_ << (r.pass ? "[PASS] " : (r.hard ? "[FAIL] " : "[WARN] ")) << r.id << " " << r.name << ": "
         << r.detail << std::endl;
    return r;
  }

  /// Per-seed verdicts with a majority rule.
  CriterionResult majority(int id, const std::string& name, bool hard,
                           const std::function<bool(Workspace&, std::string&)>& check) {
    const auto& seeds = options_.protocol.seeds;
    std::size_t passed = 0;
    std::string detail;
    for (std::uint64_t s : seeds) {
      std::string d;
      const bool ok = check(ws(s), d);
      passed += ok ? 1 : 0;
      detail += "s" + std::to_string(s) + (ok ? " ok" : " no") + " (" + d + "); ";
    }
    const std::size_t need = seeds.size() / 2 + 1;
    return report({id, name, passed >= need, hard,
                   std::to_string(passed) + "/" + std::to_string(seeds.size()) + " seeds; " + detail});
  }

  const SuiteOptions& options() const { return options_; }

 private:
  const SuiteOptions& options_;
  std::ostream& out_;
  std::map<std::uint64_t, std::unique_ptr<Workspace>> spaces_;
};

// ---- criterion 1 ------------------------------------------------------------

CriterionResult gradcheck_criterion(Runner& run) {
  const ExperimentConfig c = default_config(run.options().protocol.seeds.front());
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckResult r = pretrain_gradcheck(c.model, derive_seed(c.seed, "gradcheck"));
  const double secs = seconds_since(t0);
  const bool ok = r.max_rel_error < 1e-4 && r.coords_checked >= 50 && secs < 60.0;
  return run.report({1, "gradcheck", ok, true,
                     "max rel error " + fmt("%.2e", r.max_rel_error) + " over " +
                         std::to_string(r.coords_checked) + " coords, " + fmt("%.1f s", secs)});
}

// ---- criterion 2 ------------------------------------------------------------

CriterionResult learning_signal_criterion(Runner& run) {
  Workspace& w = run.ws(run.options().protocol.seeds.front());
  const ExperimentConfig& c = w.config();
  const ParamStore& params = w.model("drop", 2000);
  const std::optional<double> secs = w.train_seconds("drop", 2000);
  const Labels held_out = label_corpus(w.targets().codebook, w.test());
  const double acc = masked_accuracy(params, c.model, w.test(), held_out, c.pretrain,
                                     derive_seed(c.seed, "held-out"));
  const double chance = 1.0 / c.model.clusters;
  return run.report({2, "learning-signal", acc >= 3.0 * chance, true,
                     "held-out masked accuracy " + fmt("%.4f", acc) + " (3x chance " +
                         fmt("%.4f", 3.0 * chance) + "), pre-training " +
                         (secs ? fmt("%.0f s", *secs) : std::string("loaded from cache"))});
}

// ---- criteria 3 and 6 -------------------------------------------------------

CriterionResult shared_codebook_criterion(Runner& run) {
  return run.majority(3, "table1-pattern", true, [&](Workspace& w, std::string& d) {
    const PnmiMatrix& drop = w.layerwise("drop").layers.back();
    const PnmiMatrix& nodrop = w.layerwise("nodrop").layers.back();
    run.write("table1_s" + std::to_string(w.seed()) + "_drop.csv", drop.to_csv());
    run.write("table1_s" + std::to_string(w.seed()) + "_nodrop.csv", nodrop.to_csv());
    double worst = 1.0;
    for (std::size_t col = 0; col < 3; ++col) worst = std::min(worst, drop.column_min(col) / drop.column_max(col));
    // Rows: union, ab, a, b. Columns: ab, a, b.
    const double b_on_ab = nodrop.at(3, 0) / nodrop.at(1, 0);
    const double b_on_a = nodrop.at(3, 1) / nodrop.at(2, 1);
    const double collapse = std::min(b_on_ab, b_on_a);
    d = "drop min/max " + fmt("%.3f", worst) + ", nodrop cross " + fmt("%.3f", collapse);
    return worst >= 0.85 && collapse <= 0.6;
  });
}

CriterionResult layerwise_criterion(Runner& run) {
  return run.majority(6, "fig5-layerwise", true, [&](Workspace& w, std::string& d) {
    const LayerwisePnmi& drop = w.layerwise("drop");
    const LayerwisePnmi& nodrop = w.layerwise("nodrop");
    run.write("layerwise_s" + std::to_string(w.seed()) + "_drop.csv", drop.to_csv());
    run.write("layerwise_s" + std::to_string(w.seed()) + "_nodrop.csv", nodrop.to_csv());
    const double first = cross_modal_gap(drop.layers.at(1));
    const double last = cross_modal_gap(drop.layers.back());
    const double control = cross_modal_gap(nodrop.layers.back());
    d = "drop gap L1 " + fmt("%.4f", first) + " final " + fmt("%.4f", last) + ", nodrop final " +
        fmt("%.4f", control);
    return last <= first && control >= 2.0 * last;
  });
}

// ---- criteria 4, 5 and 7 ----------------------------------------------------

constexpr EvalCondition kAbClean{Profile::AB, false};
constexpr EvalCondition kAClean{Profile::A, false};
constexpr EvalCondition kBClean{Profile::B, false};

CriterionResult zero_shot_criterion(Runner& run) {
  return run.majority(4, "table2-zero-shot", true, [&](Workspace& w, std::string& d) {
    const double b_drop = w.wer("drop", "train", kBClean);
    const double b_ctrl = w.wer("nodrop", "train", kBClean);
    const double ab = w.wer("drop", "train", kAbClean);
    const double a = w.wer("drop", "train", kAClean);
    d = "B wer " + fmt("%.3f", b_drop) + " vs control " + fmt("%.3f", b_ctrl) + ", AB " + fmt("%.3f", ab) +
        " vs A " + fmt("%.3f", a);
    return b_drop <= 0.5 * b_ctrl && ab <= 1.5 * a;
  });
}

CriterionResult ood_criterion(Runner& run) {
  return run.majority(5, "table3-ood", true, [&](Workspace& w, std::string& d) {
    const double b_drop = w.wer("drop", "ood", kBClean);
    const double b_ctrl = w.wer("nodrop", "ood", kBClean);
    d = "B wer " + fmt("%.3f", b_drop) + " vs control " + fmt("%.3f", b_ctrl);
    return b_drop <= 0.7 * b_ctrl;
  });
}

CriterionResult extra_a_criterion(Runner& run) {
  return run.majority(7, "fig4-mixed", false, [&](Workspace& w, std::string& d) {
    const double mixed = w.wer("mixed", "train", kAClean);
    const double ab_only = w.wer("drop", "train", kAClean);
    d = "A wer mixed " + fmt("%.3f", mixed) + " vs AB-only " + fmt("%.3f", ab_only);
    return mixed <= ab_only;
  });
}

// ---- criterion 8 ------------------------------------------------------------

double exhaustive_two_means(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  double best = INFINITY;
  // Point 0 always in cluster 0; every other point free; both clusters non-empty.
  for (std::uint64_t bits = 1; bits < (std::uint64_t{1} << (n - 1)); ++bits) {
    double sse = 0.0;
    for (int c = 0; c < 2; ++c) {
      std::vector<double> mean(d, 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const int ci = i == 0 ? 0 : static_cast<int>((bits >> (i - 1)) & 1u);
        if (ci != c) continue;
        ++count;
        for (std::size_t j = 0; j < d; ++j) mean[j] += x.at(i, j);
      }
      for (auto& m : mean) m /= static_cast<double>(count);
      for (std::size_t i = 0; i < n; ++i) {
        const int ci = i == 0 ? 0 : static_cast<int>((bits >> (i - 1)) & 1u);
        if (ci != c) continue;
        for (std::size_t j = 0; j < d; ++j) sse += (x.at(i, j) - mean[j]) * (x.at(i, j) - mean[j]);
      }
    }
    best = std::min(best, sse);
  }
  return best;
}

/// Deterministic context-dependent next-token distribution.
StepScorer random_scorer(std::size_t vocab, std::uint64_t seed) {
  return [vocab, seed](std::span<const int> prefix) {
    std::uint64_t h = seed;
    for (int t : prefix) h = derive_seed(h, static_cast<std::uint64_t>(t) + 1);
    Rng rng(h);
    std::vector<double> logits(vocab);
    double z = 0.0;
    for (auto& l : logits) {
      l = 2.0 * rng.normal();
      z += std::exp(l);
    }
    for (auto& l : logits) l -= std::log(z);
    return logits;
  };
}

/// Best finished hypothesis by enumeration: every token string over the
/// non-end symbols of length < max_len followed by the end symbol.
Hypothesis exhaustive_best(const StepScorer& scorer, const BeamConfig& cfg, std::size_t vocab) {
  Hypothesis best;
  bool have = false;
  std::vector<int> prefix = {cfg.sos};
  double lp = 0.0;
  std::function<void()> rec = [&]() {
    const std::vector<double> step = scorer(prefix);
    const std::size_t generated = prefix.size() - 1;
    {
      Hypothesis h;
      h.tokens.assign(prefix.begin() + 1, prefix.end());
      h.log_prob = lp + step[cfg.eos];
      h.length = generated + 1;
      h.score = length_normalized(h.log_prob, h.length, cfg.alpha);
      if (!have || h.score > best.score || (h.score == best.score && h.tokens < best.tokens)) best = h;
      have = true;
    }
    if (generated + 1 >= cfg.max_len) return;
    for (std::size_t v = 0; v < vocab; ++v) {
      const int t = static_cast<int>(v);
      if (t == cfg.eos || t == cfg.sos) continue;
      prefix.push_back(t);
      lp += step[v];
      rec();
      lp -= step[v];
      prefix.pop_back();
    }
  };
  rec();
  return best;
}

struct WerCase {
  std::vector<int> ref, hyp;
  std::size_t s, i, d;
};

const std::vector<WerCase>& wer_table() {
  static const std::vector<WerCase> table = {
      {{1, 2, 3}, {1, 2, 3}, 0, 0, 0},
      {{1, 2, 3}, {1, 4, 3}, 1, 0, 0},
      {{1, 2, 3}, {1, 3}, 0, 0, 1},
      {{1, 2, 3}, {1, 2, 5, 3}, 0, 1, 0},
      {{1, 2, 3}, {}, 0, 0, 3},
      {{1}, {2, 3}, 1, 1, 0},
      {{1, 2, 3, 4}, {2, 3, 4, 5}, 0, 1, 1},
      {{1, 1, 2}, {1, 2, 2}, 1, 0, 0},
      {{5, 6, 7, 8, 9}, {9, 8, 7, 6, 5}, 4, 0, 0},
      {{1, 2}, {3, 1, 2, 4}, 0, 2, 0},
  };
  return table;
}

CriterionResult oracles_criterion(Runner& run) {
  std::string detail;
  bool ok = true;

  // K-means against exhaustive two-way partitions of 1-D points.
  std::size_t km_match = 0, km_total = 0;
  for (std::uint64_t inst = 0; inst < 24; ++inst) {
    Rng rng(derive_seed(11, inst));
    const std::size_t n = 5 + inst % 8;
    Tensor x = Tensor::matrix(n, 1);
    for (auto& v : x.storage()) v = rng.normal();
    const double optimum = exhaustive_two_means(x);
    const Codebook cb = kmeans_fit(x, 2, {100, 8, derive_seed(12, inst)});
    const double got = inertia(cb, x, assign(cb, x));
    ++km_total;
    km_match += std::abs(got - optimum) <= 1e-9 * std::max(1.0, optimum) ? 1 : 0;
  }
  ok = ok && km_match == km_total;
  detail += "kmeans " + std::to_string(km_match) + "/" + std::to_string(km_total);

  // Beam search with a beam wide enough to be exact against enumeration.
  std::size_t bs_match = 0, bs_total = 0;
  for (std::size_t vocab : {2, 3}) {
    for (double alpha : {0.0, 0.5, 1.0}) {
      for (std::size_t max_len = 1; max_len <= 4; ++max_len) {
        for (std::uint64_t s = 0; s < 5; ++s) {
          // Symbol 0 is the end symbol; start is outside the vocabulary.
          BeamConfig cfg{64, alpha, max_len, static_cast<int>(vocab), 0, {}};
          const StepScorer scorer = random_scorer(vocab, derive_seed(13, s * 100 + vocab * 10 + max_len));
          const Hypothesis want = exhaustive_best(scorer, cfg, vocab);
          const Hypothesis got = beam_search(scorer, cfg);
          ++bs_total;
          bs_match += got.tokens == want.tokens && std::abs(got.score - want.score) < 1e-12 ? 1 : 0;
        }
      }
    }
  }
  ok = ok && bs_match == bs_total;
  detail += ", beam " + std::to_string(bs_match) + "/" + std::to_string(bs_total);

  // PNMI on the 2x2 count table [[2,1],[0,3]] (rows: label, cols: cluster).
  const std::vector<int> labels = {0, 0, 0, 1, 1, 1};
  const std::vector<int> clusters = {0, 0, 1, 1, 1, 1};
  const double h_y = std::log(2.0);
  const double h_y_given_c = (4.0 / 6.0) * -(0.25 * std::log(0.25) + 0.75 * std::log(0.75));
  const double want = 1.0 - h_y_given_c / h_y;
  const double got = pnmi(labels, clusters);
  const bool pnmi_ok = std::abs(got - want) <= 1e-12;
  ok = ok && pnmi_ok;
  detail += ", pnmi " + fmt("%.3e", std::abs(got - want));

  std::size_t wer_ok = 0;
  for (const auto& c : wer_table()) {
    const EditCounts e = align(c.ref, c.hyp);
    const double expect = static_cast<double>(c.s + c.i + c.d) / static_cast<double>(c.ref.size());
    wer_ok += e.substitutions == c.s && e.insertions == c.i && e.deletions == c.d &&
                      wer(c.ref, c.hyp) == expect
                  ? 1
                  : 0;
  }
  ok = ok && wer_ok == wer_table().size();
  detail += ", wer " + std::to_string(wer_ok) + "/" + std::to_string(wer_table().size());
  return run.report({8, "oracles", ok, true, detail});
}

// ---- criterion 9 ------------------------------------------------------------

ExperimentConfig tiny_config(std::uint64_t seed) {
  ExperimentConfig c = default_config(seed);
  c.data.train_utterances = 24;
  c.data.test_utterances = 8;
  c.targets.clusters = 8;
  c.model.clusters = 8;
  c.targets.kmeans_iters = 20;
  c.targets.kmeans_restarts = 1;
  c.pretrain.updates = 12;
  c.pretrain.batch_frames = 120;
  c.pretrain.log_interval = 4;
  c.finetune.updates = 10;
  c.finetune.nfrz = 4;
  c.finetune.batch_frames = 120;
  return c;
}

/// gen-data -> raw targets -> pretrain -> finetune -> evaluate, returning the
/// serialized fine-tuned checkpoint and the evaluation records.
std::string tiny_pipeline(const ExperimentConfig& c) {
  const Corpus train = generate_corpus(c.generator, {c.data.train_utterances, c.data.mix, "train"});
  const Corpus test = generate_corpus(c.generator, {c.data.test_utterances, c.data.mix, "test"});
  const TargetSet ts = build_raw_targets(train, c.target_options());
  PretrainResult pre = pretrain(init_params(c.model, derive_seed(c.seed, "init")), c.model, train, ts.labels,
                                c.pretrain);
  std::string out = serialize_checkpoint({c.model, pre.params, pre.optimizer, {"pretrain", c.hash(), "", c.pretrain.updates}});
  const FinetuneResult ft = finetune(pre.params, c.model, train, c.finetune);
  out += serialize_checkpoint({c.model, ft.params, std::nullopt, {"finetune", c.hash(), "", c.finetune.updates}});
  for (const auto& cond : standard_conditions()) out += evaluate(ft.params, c.model, test, cond, c.decode).to_json();
  return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.storage().begin(), a.storage().end(), b.storage().begin(),
                    [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

CriterionResult invariants_criterion(Runner& run) {
  std::string detail;
  bool ok = true;
  const ExperimentConfig c = tiny_config(run.options().protocol.seeds.front());
  const Corpus corpus = generate_corpus(c.generator, {c.data.train_utterances, c.data.mix, "train"});

  // Zero-fill: an absent B stream encodes exactly like an all-zero one.
  {
    const ParamStore p = init_params(c.model, 5);
    bool same = true;
    for (std::size_t i = 0; i < 4; ++i) {
      const Utterance& u = corpus.utterances[i];
      Tensor zeros = Tensor::matrix(u.frames(), static_cast<std::size_t>(c.model.dim_b));
      const auto absent = extract_layers(p, c.model, ModalityInput::from(u, Profile::A));
      const auto filled = extract_layers(p, c.model, {&*u.features_a, &zeros});
      for (std::size_t l = 0; l < absent.size(); ++l) same = same && bitwise_equal(absent[l], filled[l]);
    }
    ok = ok && same;
    detail += std::string("zero-fill ") + (same ? "ok" : "differs");
  }

  // Freezing: L_frz prefix and a full N_frz freeze.
  {
    const ParamStore base = init_params(c.model, 6);
    auto encoder_param = [](const std::string& n) {
      return !n.starts_with("cluster_head.") && !n.starts_with("frame_head.") && !n.starts_with("decoder.");
    };
    FinetuneConfig f = c.finetune;
    f.lfrz = 2;
    f.nfrz = 0;
    const ParamStore partial = finetune(base, c.model, corpus, f).params;
    bool prefix_same = true, rest_moved = false;
    for (std::size_t i = 0; i < base.size(); ++i) {
      const std::string& n = base.name(i);
      if (!encoder_param(n)) continue;
      const bool same = bitwise_equal(base.value(i), partial[n]);
      if (frozen_by_lfrz(n, f.lfrz, c.model.layers)) prefix_same = prefix_same && same;
      else rest_moved = rest_moved || !same;
    }
    f.lfrz = 0;
    f.nfrz = f.updates;
    const ParamStore full = finetune(base, c.model, corpus, f).params;
    bool all_same = true;
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (encoder_param(base.name(i))) all_same = all_same && bitwise_equal(base.value(i), full[base.name(i)]);
    }
    const bool frz = prefix_same && rest_moved && all_same;
    ok = ok && frz;
    detail += std::string(", freezing ") + (frz ? "ok" : "broken");
  }

  // Modality sampling frequencies at 100k draws.
  {
    const ModalityDropoutConfig d;
    Rng rng(derive_seed(c.seed, "sampling-check"));
    std::array<std::size_t, 3> counts{};
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_modalities(d, Profile::AB, rng))];
    const std::array<double, 3> p = {d.p_ab, d.p_a, d.p_b};
    double worst = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double sigma = std::sqrt(n * p[k] * (1.0 - p[k]));
      worst = std::max(worst, std::abs(counts[k] - n * p[k]) / sigma);
    }
    ok = ok && worst <= 3.0;
    detail += ", sampling " + fmt("%.2f sigma", worst);
  }

  // Noise mixer at 0 dB.
  {
    Rng rng(derive_seed(c.seed, "snr-check"));
    double worst = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
      const Tensor& a = *corpus.utterances[i].features_a;
      const NoiseResult r = add_noise(a, 0.0, 1.0, rng);
      worst = std::max(worst, std::abs(measured_snr_db(a, r.features)));
    }
    ok = ok && worst <= 0.1;
    detail += ", snr err " + fmt("%.2e dB", worst);
  }

  // Whole pipeline twice from the same config.
  {
    const bool same = tiny_pipeline(c) == tiny_pipeline(c);
    ok = ok && same;
    detail += std::string(", pipeline ") + (same ? "reproducible" : "differs");
  }

  // Checkpoint round trip.
  {
    ParamStore p = init_params(c.model, 7);
    AdamState adam = AdamState::for_params(p);
    const std::string once = serialize_checkpoint({c.model, p, adam, {"roundtrip", c.hash(), build_tag(), 3}});
    const std::string twice = serialize_checkpoint(deserialize_checkpoint(once, &c.model));
    ok = ok && once == twice;
    detail += std::string(", checkpoint ") + (once == twice ? "stable" : "unstable");
  }
  return run.report({9, "invariants", ok, true, detail});
}

// ---- criterion 10 -----------------------------------------------------------

CriterionResult beam_criterion(Runner& run) {
  std::string detail;
  ExperimentConfig c = tiny_config(run.options().protocol.seeds.front());
  c.data.train_utterances = 60;
  c.finetune.task = Task::Seq2Seq;
  c.finetune.profile = Profile::AB;
  c.finetune.updates = 60;
  c.finetune.nfrz = 0;
  const Corpus train = generate_corpus(c.generator, {c.data.train_utterances, c.data.mix, "train"});
  const Corpus test = generate_corpus(c.generator, {100, c.data.mix, "beam"});
  const ParamStore params = finetune(init_params(c.model, derive_seed(c.seed, "init")), c.model, train,
                                     c.finetune).params;
  std::size_t same = 0;
  DecodeConfig beam1{false, 1, 1.0, 0};
  DecodeConfig greedy{true, 1, 1.0, 0};
  for (const Utterance& u : test.utterances) {
    const ModalityInput in = ModalityInput::from(u);
    same += transcribe(params, c.model, in, beam1) == transcribe(params, c.model, in, greedy) ? 1 : 0;
  }
  bool ok = same == test.utterances.size();
  detail += "beam=1 vs greedy identical on " + std::to_string(same) + "/" + std::to_string(test.utterances.size());

  // With alpha = 0 the normalized score is the raw sum, so the winner of an
  // exact search is the raw-likelihood maximum.
  std::size_t rank_ok = 0, rank_total = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    BeamConfig cfg{64, 0.0, 4, 3, 0, {}};
    const StepScorer scorer = random_scorer(3, derive_seed(21, s));
    const Hypothesis got = beam_search(scorer, cfg);
    const Hypothesis want = exhaustive_best(scorer, cfg, 3);
    ++rank_total;
    rank_ok += got.score == got.log_prob && got.tokens == want.tokens ? 1 : 0;
  }
  Rng rng(derive_seed(c.seed, "alpha0"));
  for (int i = 0; i < 1000; ++i) {
    const double a = -10 * rng.uniform(), b = -10 * rng.uniform();
    const std::size_t la = 1 + rng.index(8), lb = 1 + rng.index(8);
    ++rank_total;
    rank_ok += (length_normalized(a, la, 0.0) < length_normalized(b, lb, 0.0)) == (a < b) ? 1 : 0;
  }
  ok = ok && rank_ok == rank_total;
  detail += ", alpha=0 ranking " + std::to_string(rank_ok) + "/" + std::to_string(rank_total);
  return run.report({10, "beam-degeneracies", ok, true, detail});
}

using CriterionFn = CriterionResult (*)(Runner&);

const std::vector<std::pair<std::string, CriterionFn>>& registry() {
  static const std::vector<std::pair<std::string, CriterionFn>> r = {
      {"gradcheck", gradcheck_criterion},
      {"learning-signal", learning_signal_criterion},
      {"table1-pattern", shared_codebook_criterion},
      {"table2-zero-shot", zero_shot_criterion},
      {"table3-ood", ood_criterion},
      {"fig5-layerwise", layerwise_criterion},
      {"fig4-mixed", extra_a_criterion},
      {"oracles", oracles_criterion},
      {"invariants", invariants_criterion},
      {"beam-degeneracies", beam_criterion},
  };
  return r;
}

}  // namespace

ExperimentConfig pattern_config(std::uint64_t seed, const Protocol& protocol) {
  ExperimentConfig c = default_config(seed);
  c.output_dir = "runs/acceptance";
  c.pretrain.updates = protocol.pretrain_updates;
  c.finetune.profile = Profile::A;
  c.finetune.updates = protocol.finetune_updates;
  c.finetune.nfrz = protocol.finetune_nfrz;
  c.finetune.lfrz = protocol.finetune_lfrz;
  c.validate();
  return c;
}

std::vector<std::string> suite_names() {
  std::vector<std::string> names = {"all"};
  for (const auto& [name, fn] : registry()) names.push_back(name);
  return names;
}

std::vector<CriterionResult> run_suite(const std::string& name, const SuiteOptions& options,
                                       std::ostream& out) {
  Runner run(options, out);
  std::vector<CriterionResult> results;
  for (const auto& [suite, fn] : registry()) {
    if (name == "all" || name == suite) results.push_back(fn(run));
  }
  if (results.empty()) throw std::invalid_argument("unknown acceptance suite: " + name);
  return results;
}

}  // namespace unimask::acceptance
