// unimask: command-line driver for data generation, pre-training, clustering,
// fine-tuning, evaluation and analysis. Every command writes its artifacts and
// a manifest.json into one run directory.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 acceptance
// (or gradient check) failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "acceptance.hpp"
#include "unimask/checkpoint.hpp"
#include "unimask/clustering.hpp"
#include "unimask/config.hpp"
#include "unimask/datagen.hpp"
#include "unimask/finetune.hpp"
#include "unimask/metrics.hpp"
#include "unimask/pretrain.hpp"
#include "unimask/serialize.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace unimask;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitAcceptance = 3;

/// Artifacts of one command plus enough context to re-derive them.
class Manifest {
 public:
  Manifest(std::string command, int argc, char** argv) {
    doc_["command"] = std::move(command);
    for (int i = 0; i < argc; ++i) doc_["argv"].push_back(argv[i]);
    doc_["build_tag"] = build_tag();
  }
  void config(const ExperimentConfig& c) {
    doc_["config_hash"] = c.hash();
    doc_["seed"] = c.seed;
  }
  void set(const std::string& key, json value) { doc_[key] = std::move(value); }
  void output(const fs::path& p) { doc_["outputs"].push_back(p.filename().string()); }
  void write(const fs::path& dir) const {
    io::write_file(dir / "manifest.json", doc_.dump(2) + "\n");
  }

 private:
  json doc_;
};

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) return default_config();
  return load_config(path);
}

fs::path run_dir(const std::string& out, const ExperimentConfig& c, const char* leaf) {
  fs::path dir = out.empty() ? c.output_dir / leaf : fs::path(out);
  fs::create_directories(dir);
  return dir;
}

void write_text(Manifest& m, const fs::path& path, const std::string& text) {
  io::write_file(path, text);
  m.output(path);
}

// ---- gen-data ---------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, const std::string& out, bool ood, int argc,
                 char** argv) {
  const ExperimentConfig c = config_or_default(config_path);
  const fs::path dir = run_dir(out, c, "data");
  Manifest m("gen-data", argc, argv);
  m.config(c);
  write_text(m, dir / "experiment.ini", c.to_ini());

  CorpusSpec train{c.data.train_utterances, c.data.mix, "train"};
  CorpusSpec test{c.data.test_utterances, c.data.mix, "test"};
  const Corpus tr = generate_corpus(c.generator, train);
  const Corpus te = generate_corpus(c.generator, test);
  save_corpus(tr, dir / "train");
  save_corpus(te, dir / "test");
  m.output(dir / "train");
  m.output(dir / "test");
  json corpora = {{"train", tr.fingerprint}, {"test", te.fingerprint}};
  if (ood && c.data.ood_utterances > 0) {
    CorpusSpec spec{c.data.ood_utterances, {0.0, 1.0, 0.0}, "ood"};
    const Corpus o = make_ood_corpus(c.generator, spec, c.data.ood_perturbation);
    save_corpus(o, dir / "ood");
    m.output(dir / "ood");
    corpora["ood"] = o.fingerprint;
  }
  m.set("corpora", corpora);
  m.write(dir);
  std::cout << "wrote corpora under " << dir << "\n";
  return kExitOk;
}

// ---- cluster ----------------------------------------------------------------

int cmd_cluster(const std::string& config_path, const std::string& corpus_dir,
                const std::string& source, int iteration, const std::string& out, int argc,
                char** argv) {
  const ExperimentConfig c = config_or_default(config_path);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path dir = run_dir(out, c, "cluster");
  Manifest m("cluster", argc, argv);
  m.config(c);

  TargetSet ts;
  if (source == "raw") {
    ts = build_targets(nullptr, nullptr, corpus, 1, c.target_options());
  } else {
    if (iteration < 2) throw std::invalid_argument("cluster: a checkpoint source needs --iteration >= 2");
    const Checkpoint ck = load_checkpoint(source);
    ts = build_targets(&ck.params, &ck.config, corpus, iteration, c.target_options());
  }
  save_codebook(ts.codebook, dir / "codebook.umkm");
  m.output(dir / "codebook.umkm");
  save_targets(ts.labels, corpus, dir / "targets.tsv");
  m.output(dir / "targets.tsv");
  std::string skipped;
  for (const auto& id : ts.skipped) skipped += id + "\n";
  write_text(m, dir / "skipped.txt", skipped);
  m.set("codebook", {{"source", ts.codebook.source},
                     {"k", ts.codebook.k()},
                     {"inertia", ts.codebook.inertia},
                     {"iterations", ts.codebook.iterations}});
  m.set("labeled", ts.labeled_count());
  m.set("skipped", ts.skipped.size());
  m.set("corpus", corpus.fingerprint);
  m.write(dir);
  std::cout << "codebook " << ts.codebook.source << " K=" << ts.codebook.k() << " labeled "
            << ts.labeled_count() << " skipped " << ts.skipped.size() << "\n";
  return kExitOk;
}

// ---- pretrain ---------------------------------------------------------------

int cmd_pretrain(const std::string& config_path, const std::string& corpus_dir,
                 const std::string& targets_path, const std::string& out, int argc, char** argv) {
  const ExperimentConfig c = config_or_default(config_path);
  const Corpus corpus = load_corpus(corpus_dir);
  const auto targets = load_targets(targets_path, corpus);
  const fs::path dir = run_dir(out, c, "pretrain");
  Manifest m("pretrain", argc, argv);
  m.config(c);

  std::ofstream log(dir / "metrics.jsonl");
  m.output(dir / "metrics.jsonl");
  const CheckpointFn save = [&](std::int64_t step, const ParamStore& p, const AdamState& a) {
    Checkpoint ck{c.model, p, a, {"pretrain", c.hash(), build_tag(), step}};
    const fs::path path = step == c.pretrain.updates
                              ? dir / "checkpoint.umck"
                              : dir / ("checkpoint_" + std::to_string(step) + ".umck");
    save_checkpoint(ck, path);
    m.output(path);
  };
  const LogFn on_log = [](const StepRecord& r) { std::cout << r.to_json() << "\n"; };
  const PretrainResult r = pretrain(init_params(c.model, derive_seed(c.seed, "init")), c.model,
                                    corpus, targets, c.pretrain, save, on_log);
  for (const auto& rec : r.log) log << rec.to_json() << "\n";
  m.set("stats", {{"skipped_empty_mask", r.stats.skipped_empty_mask},
                  {"noise_applied", r.stats.noise_applied},
                  {"subsets_ab_a_b", r.stats.subsets}});
  m.set("corpus", corpus.fingerprint);
  m.write(dir);
  return kExitOk;
}

// ---- finetune ---------------------------------------------------------------

struct FinetuneFlags {
  std::string modality, task;
  std::optional<int> lfrz;
  std::optional<std::int64_t> nfrz, updates;
  std::optional<double> lr;
};

int cmd_finetune(const std::string& config_path, const std::string& checkpoint,
                 const std::string& corpus_dir, const FinetuneFlags& flags, const std::string& out,
                 int argc, char** argv) {
  ExperimentConfig c = config_or_default(config_path);
  if (!flags.modality.empty()) c.finetune.profile = parse_profile(flags.modality);
  if (!flags.task.empty()) c.finetune.task = parse_task(flags.task);
  if (flags.lfrz) c.finetune.lfrz = *flags.lfrz;
  if (flags.updates) c.finetune.updates = *flags.updates;
  if (flags.nfrz) c.finetune.nfrz = *flags.nfrz;
  if (flags.lr) c.finetune.lr = *flags.lr;
  c.validate();
  const Checkpoint base = load_checkpoint(checkpoint, &c.model);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path dir = run_dir(out, c, "finetune");
  Manifest m("finetune", argc, argv);
  m.config(c);

  const FinetuneResult r = finetune(base.params, c.model, corpus, c.finetune);
  std::ofstream log(dir / "finetune.jsonl");
  for (const auto& rec : r.log) log << rec.to_json() << "\n";
  m.output(dir / "finetune.jsonl");
  save_checkpoint({c.model, r.params, std::nullopt, {"finetune", c.hash(), build_tag(), c.finetune.updates}},
                  dir / "checkpoint.umck");
  m.output(dir / "checkpoint.umck");
  m.set("finetune", {{"modality", to_string(c.finetune.profile)},
                     {"task", to_string(c.finetune.task)},
                     {"lfrz", c.finetune.lfrz},
                     {"nfrz", c.finetune.nfrz},
                     {"lr", c.finetune.lr},
                     {"updates", c.finetune.updates}});
  m.write(dir);
  return kExitOk;
}

// ---- evaluate ---------------------------------------------------------------

int cmd_evaluate(const std::string& checkpoint, const std::string& corpus_dir,
                 const std::string& modality, const std::string& noise, DecodeConfig decode,
                 const std::string& out, int argc, char** argv) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path dir = out.empty() ? fs::path(checkpoint).parent_path() / "eval" : fs::path(out);
  fs::create_directories(dir);
  Manifest m("evaluate", argc, argv);
  std::vector<EvalCondition> conditions;
  for (const auto& cond : standard_conditions()) {
    if (modality != "all" && cond.input != parse_profile(modality)) continue;
    if (noise == "on" && !cond.noisy) continue;
    if (noise == "off" && cond.noisy) continue;
    conditions.push_back(cond);
  }
  if (noise == "on" && conditions.empty() && modality == "b") conditions.push_back({Profile::B, true});
  std::ofstream records(dir / "eval.jsonl");
  for (const auto& cond : conditions) {
    const EvalEntry e = evaluate(ck.params, ck.config, corpus, cond, decode);
    records << e.to_json() << "\n";
    std::cout << e.to_json() << "\n";
  }
  m.output(dir / "eval.jsonl");
  m.set("checkpoint_config_hash", ck.provenance.config_hash);
  m.set("corpus", corpus.fingerprint);
  m.write(dir);
  return kExitOk;
}

// ---- pnmi / project ---------------------------------------------------------

int cmd_pnmi(const std::string& config_path, const std::string& checkpoint,
             const std::string& corpus_dir, std::optional<std::size_t> k, const std::string& out,
             int argc, char** argv) {
  const ExperimentConfig c = config_or_default(config_path);
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path dir = run_dir(out, c, "pnmi");
  Manifest m("pnmi", argc, argv);
  m.config(c);
  MetricOptions opt = c.metric_options();
  if (k) opt.clusters = *k;
  const LayerwisePnmi lw = layerwise_pnmi(ck.params, ck.config, corpus, opt);
  write_text(m, dir / "pnmi.csv", lw.layers.back().to_csv());
  write_text(m, dir / "layerwise.csv", lw.to_csv());
  std::cout << lw.layers.back().to_csv();
  json gaps = json::array();
  for (const auto& layer : lw.layers) gaps.push_back(cross_modal_gap(layer));
  m.set("cross_modal_gap", gaps);
  m.set("corpus", corpus.fingerprint);
  m.write(dir);
  return kExitOk;
}

int cmd_project(const std::string& config_path, const std::string& checkpoint,
                const std::string& corpus_dir, std::optional<std::size_t> frames,
                const std::string& out, int argc, char** argv) {
  const ExperimentConfig c = config_or_default(config_path);
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path dir = run_dir(out, c, "project");
  Manifest m("project", argc, argv);
  m.config(c);
  const ProjectionExport e = project_features(ck.params, ck.config, corpus,
                                              frames.value_or(c.metrics.projection_frames),
                                              derive_seed(c.seed, "projection"));
  write_text(m, dir / "projection.csv", e.to_csv());
  std::string raw;
  for (std::size_t i = 0; i < e.features.rows(); ++i) {
    raw += std::string(to_string(e.modality[i]));
    for (double v : e.features.row(i)) raw += "," + std::to_string(v);
    raw += "\n";
  }
  write_text(m, dir / "features.csv", raw);
  m.set("eigenvalues", e.basis.eigenvalues);
  m.set("rank_deficient", e.basis.rank_deficient);
  m.set("separation", modality_separation(e));
  m.write(dir);
  std::cout << "separation " << modality_separation(e) << "\n";
  return kExitOk;
}

// ---- gradcheck / repro ------------------------------------------------------

int cmd_gradcheck(const std::string& config_path) {
  const ExperimentConfig c = config_or_default(config_path);
  const GradCheckResult r = pretrain_gradcheck(c.model, derive_seed(c.seed, "gradcheck"));
  std::printf("max relative error %.3e over %zu coordinates (worst %s[%zu]: analytic %.6e numeric %.6e)\n",
              r.max_rel_error, r.coords_checked, r.worst_param.c_str(), r.worst_index,
              r.worst_analytic, r.worst_numeric);
  const bool ok = r.max_rel_error < 1e-4;
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? kExitOk : kExitAcceptance;
}

int cmd_repro(const std::string& suite, const std::string& out, int argc, char** argv) {
  acceptance::SuiteOptions opt;
  if (!out.empty()) opt.output_dir = out;
  fs::create_directories(opt.output_dir);
  Manifest m("repro", argc, argv);
  const auto results = acceptance::run_suite(suite, opt, std::cout);
  bool ok = true;
  json verdicts = json::array();
  for (const auto& r : results) {
    ok = ok && (r.pass || !r.hard);
    verdicts.push_back({{"criterion", r.id}, {"name", r.name}, {"pass", r.pass},
                        {"hard", r.hard}, {"detail", r.detail}});
  }
  m.set("suite", suite);
  m.set("verdicts", verdicts);
  m.write(opt.output_dir);
  return ok ? kExitOk : kExitAcceptance;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unimask: unified masked cluster prediction pre-training on synthetic two-stream data"};
  app.require_subcommand(1);

  std::string config, corpus, out, checkpoint, targets, source = "raw", suite;
  bool ood = false;
  int iteration = 1;

  auto* gen = app.add_subcommand("gen-data", "Generate train/test (and OOD) corpora");
  gen->add_option("--config", config, "Experiment INI file");
  gen->add_option("--out", out, "Output directory");
  gen->add_flag("--ood", ood, "Also write the out-of-domain A-only corpus");

  auto* clus = app.add_subcommand("cluster", "Fit a codebook and write frame targets");
  clus->add_option("--config", config);
  clus->add_option("--corpus", corpus)->required();
  clus->add_option("--source", source, "'raw' (anchor frames) or a checkpoint path");
  clus->add_option("--iteration", iteration, "Target iteration (1 = raw anchor)");
  clus->add_option("--out", out);

  auto* pre = app.add_subcommand("pretrain", "Masked cluster prediction pre-training");
  pre->add_option("--config", config);
  pre->add_option("--corpus", corpus)->required();
  pre->add_option("--targets", targets, "targets.tsv from the cluster command")->required();
  pre->add_option("--out", out);

  FinetuneFlags ff;
  auto* fin = app.add_subcommand("finetune", "Supervised fine-tuning with freezing controls");
  fin->add_option("--config", config);
  fin->add_option("--checkpoint", checkpoint)->required();
  fin->add_option("--corpus", corpus)->required();
  fin->add_option("--ft-modality", ff.modality)->check(CLI::IsMember({"ab", "a", "b"}));
  fin->add_option("--task", ff.task)->check(CLI::IsMember({"frame", "seq2seq"}));
  fin->add_option("--lfrz", ff.lfrz);
  fin->add_option("--nfrz", ff.nfrz);
  fin->add_option("--lr", ff.lr);
  fin->add_option("--updates", ff.updates);
  fin->add_option("--out", out);

  DecodeConfig decode;
  std::string modality = "all", noise = "both";
  auto* ev = app.add_subcommand("evaluate", "WER and token accuracy per test condition");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--corpus", corpus)->required();
  ev->add_option("--modality", modality)->check(CLI::IsMember({"all", "ab", "a", "b"}));
  ev->add_option("--noise", noise)->check(CLI::IsMember({"on", "off", "both"}));
  ev->add_option("--beam", decode.beam)->check(CLI::PositiveNumber);
  ev->add_option("--alpha", decode.alpha)->check(CLI::NonNegativeNumber);
  ev->add_flag("--greedy", decode.greedy);
  ev->add_option("--max-len", decode.max_len);
  ev->add_option("--out", out);

  std::optional<std::size_t> k, frames;
  auto* pn = app.add_subcommand("pnmi", "Cross-quantization PNMI matrix and layerwise table");
  pn->add_option("--config", config);
  pn->add_option("--checkpoint", checkpoint)->required();
  pn->add_option("--corpus", corpus)->required();
  pn->add_option("--k", k);
  pn->add_option("--out", out);

  auto* pr = app.add_subcommand("project", "2-D PCA projection of pooled features");
  pr->add_option("--config", config);
  pr->add_option("--checkpoint", checkpoint)->required();
  pr->add_option("--corpus", corpus)->required();
  pr->add_option("--frames", frames);
  pr->add_option("--out", out);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of encoder + cluster head");
  gc->add_option("--config", config);

  auto* rep = app.add_subcommand("repro", "Run a named acceptance suite");
  rep->add_option("suite", suite, "Suite name or 'all'")
      ->required()
      ->check(CLI::IsMember(acceptance::suite_names()));
  rep->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_data(config, out, ood, argc, argv);
    if (*clus) return cmd_cluster(config, corpus, source, iteration, out, argc, argv);
    if (*pre) return cmd_pretrain(config, corpus, targets, out, argc, argv);
    if (*fin) return cmd_finetune(config, checkpoint, corpus, ff, out, argc, argv);
    if (*ev) return cmd_evaluate(checkpoint, corpus, modality, noise, decode, out, argc, argv);
    if (*pn) return cmd_pnmi(config, checkpoint, corpus, k, out, argc, argv);
    if (*pr) return cmd_project(config, checkpoint, corpus, frames, out, argc, argv);
    if (*gc) return cmd_gradcheck(config);
    if (*rep) return cmd_repro(suite, out, argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid configuration: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
