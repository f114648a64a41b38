#include "unimask/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "unimask/ops.hpp"

namespace unimask {

std::string_view to_string(Task t) { return t == Task::Frame ? "frame" : "seq2seq"; }

Task parse_task(std::string_view s) {
  if (s == "frame") return Task::Frame;
  if (s == "seq2seq") return Task::Seq2Seq;
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected frame or seq2seq)");
}

void FinetuneConfig::validate(const ModelConfig& model) const {
  if (profile == Profile::AB) dropout.validate();
  if (!(lr > 0.0)) throw std::invalid_argument("finetune: lr must be positive");
  const double phases = schedule.warmup + schedule.hold + schedule.decay;
  if (std::abs(phases - 1.0) > 1e-9 || schedule.warmup < 0 || schedule.hold < 0 ||
      schedule.decay < 0) {
    throw std::invalid_argument("finetune: lr phase ratio must be non-negative and sum to 1");
  }
  if (updates < 0) throw std::invalid_argument("finetune: updates must be non-negative");
  if (nfrz < 0 || nfrz > updates) throw std::invalid_argument("finetune: need 0 <= nfrz <= updates");
  if (lfrz < 0 || lfrz > model.layers) {
    throw std::invalid_argument("finetune: need 0 <= lfrz <= " + std::to_string(model.layers));
  }
  if (batch_frames == 0) throw std::invalid_argument("finetune: batch_frames must be positive");
  if (!(clip > 0.0)) throw std::invalid_argument("finetune: clip must be positive");
  if (!(noise.p_apply >= 0.0 && noise.p_apply <= 1.0)) {
    throw std::invalid_argument("finetune: noise probability must lie in [0,1]");
  }
  if (has_b(profile) && model.dim_b == 0) {
    throw std::invalid_argument("finetune: profile " + std::string(to_string(profile)) +
                                " needs a modality-B frontend, which this model lacks");
  }
}

std::string FinetuneRecord::to_json() const {
  std::ostringstream os;
  os.precision(9);
  os << "{\"step\":" << step << ",\"loss\":" << loss << ",\"accuracy\":" << accuracy
     << ",\"lr\":" << lr << ",\"grad_norm\":" << grad_norm << '}';
  return os.str();
}

bool frozen_by_lfrz(std::string_view name, int lfrz, int layers) {
  if (lfrz <= 0) return false;
  if (name.starts_with("frontend_") || name.starts_with("fusion.") || name == "mask_emb") {
    return true;
  }
  constexpr std::string_view block = "encoder.block.";
  if (name.starts_with(block)) {
    const auto rest = name.substr(block.size());
    return std::stoi(std::string(rest.substr(0, rest.find('.')))) < lfrz;
  }
  if (name.starts_with("encoder.final_ln")) return lfrz >= layers;
  return false;
}

namespace {

bool is_head(std::string_view name) {
  return name.starts_with("frame_head.") || name.starts_with("decoder.");
}

std::vector<int> teacher_input(const ModelConfig& m, const std::vector<int>& transcript) {
  std::vector<int> in{m.sos()};
  in.insert(in.end(), transcript.begin(), transcript.end());
  return in;
}

std::vector<int> teacher_target(const ModelConfig& m, const std::vector<int>& transcript) {
  std::vector<int> out(transcript);
  out.push_back(m.eos());
  return out;
}

std::size_t argmax(std::span<const double> row) {
  return std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

FinetuneResult finetune(ParamStore params, const ModelConfig& model, const Corpus& corpus,
                        const FinetuneConfig& config) {
  model.validate();
  config.validate(model);
  if (has_b(config.profile) && !params.contains("frontend_b.fc1.w")) {
    throw std::invalid_argument("finetune: B-stream fine-tuning needs frontend_b parameters");
  }
  drop_cluster_head(params);
  if (config.task == Task::Frame) {
    add_frame_head(params, model, derive_seed(config.seed, "head"));
  } else {
    add_decoder(params, model, derive_seed(config.seed, "head"));
  }

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto& u = corpus.utterances[i];
    if (u.frames() == 0) continue;
    const bool ok = config.profile == Profile::AB ? true
                    : config.profile == Profile::A ? has_a(u.profile)
                                                   : has_b(u.profile);
    if (ok) pool.push_back(i);
  }
  if (pool.empty() && config.updates > 0) {
    throw std::invalid_argument("finetune: corpus has no utterance with the requested streams");
  }

  std::vector<bool> head_only(params.size()), unfrozen(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    head_only[i] = is_head(params.name(i));
    unfrozen[i] = head_only[i] || !frozen_by_lfrz(params.name(i), config.lfrz, model.layers);
  }

  FinetuneResult result;
  AdamState adam = AdamState::for_params(params);
  Rng batch_rng(derive_seed(config.seed, "batch"));
  Rng modality_rng(derive_seed(config.seed, "modality"));
  Rng noise_rng(derive_seed(config.seed, "noise"));

  for (std::int64_t step = 0; step < config.updates; ++step) {
    std::vector<std::size_t> batch;
    std::size_t frames = 0;
    while (frames < config.batch_frames) {
      const std::size_t i = pool[batch_rng.index(pool.size())];
      batch.push_back(i);
      frames += corpus.utterances[i].frames();
    }
    Graph g;
    g.set_trainable_mask(step < config.nfrz ? head_only : unfrozen);
    std::vector<Tensor> noisy;
    noisy.reserve(batch.size());
    std::optional<NodeId> total;
    double weight = 0.0;
    std::size_t hits = 0, count = 0;
    for (std::size_t i : batch) {
      const Utterance& u = corpus.utterances[i];
      Profile use = config.profile;
      if (use == Profile::AB) use = sample_modalities(config.dropout, u.profile, modality_rng);
      ModalityInput in = ModalityInput::from(u, use);
      if (in.a && config.noise.enabled && config.noise.p_apply > 0.0) {
        noisy.push_back(add_noise(*in.a, config.noise.snr_db, config.noise.p_apply, noise_rng).features);
        in.a = &noisy.back();
      }
      const EncoderOutput enc = encode(g, params, model, in);
      NodeId loss;
      double w;
      if (config.task == Task::Frame) {
        const NodeId logits = frame_logits(g, params, enc.final);
        loss = ops::cross_entropy(g, logits, u.units);
        const Tensor& z = g.value(logits);
        for (std::size_t t = 0; t < z.rows(); ++t) hits += argmax(z.row(t)) == std::size_t(u.units[t]);
        count += z.rows();
        w = double(u.frames());
      } else {
        const auto in_tokens = teacher_input(model, u.transcript);
        const auto targets = teacher_target(model, u.transcript);
        const DecoderOutput dec = decoder_forward(g, params, model, enc.final, in_tokens);
        const Tensor& lp = g.value(dec.log_probs);
        // Log-probabilities are already normalized; cross_entropy renormalizes harmlessly.
        loss = ops::cross_entropy(g, dec.log_probs, targets);
        for (std::size_t t = 0; t < lp.rows(); ++t) hits += argmax(lp.row(t)) == std::size_t(targets[t]);
        count += lp.rows();
        w = double(targets.size());
      }
      const NodeId part = ops::scale(g, loss, w);
      total = total ? ops::add(g, *total, part) : part;
      weight += w;
    }
    FinetuneRecord rec;
    rec.step = step + 1;
    rec.lr = config.schedule.lr(step, config.updates, config.lr);
    const NodeId loss = ops::scale(g, *total, 1.0 / weight);
    rec.loss = g.value(loss).item();
    rec.accuracy = count ? double(hits) / double(count) : 0.0;
    Gradients grads = backward(g, loss, params);
    rec.grad_norm = clip_grad_norm(grads, config.clip);
    adam_step(params, grads, adam, rec.lr);
    result.log.push_back(rec);
  }
  result.params = std::move(params);
  return result;
}

EditCounts align(std::span<const int> ref, std::span<const int> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({sub, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      (ref[i - 1] == hyp[j - 1] ? c.matches : c.substitutions)++;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

double wer(std::span<const int> reference, std::span<const int> hypothesis) {
  if (reference.empty()) throw std::invalid_argument("wer: empty reference");
  return double(align(reference, hypothesis).errors()) / double(reference.size());
}

double length_normalized(double log_prob, std::size_t length, double alpha) {
  if (alpha == 0.0) return log_prob;
  return log_prob / std::pow(double(std::max<std::size_t>(length, 1)), alpha);
}

namespace {

struct Partial {
  std::vector<int> seq;  // start symbol first
  double log_prob = 0.0;
};

bool raw_better(const Partial& a, const Partial& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.seq < b.seq;
}

Hypothesis finish(const Partial& p, const BeamConfig& c, bool ended) {
  Hypothesis h;
  h.length = p.seq.size() - 1;
  h.tokens.assign(p.seq.begin() + 1, p.seq.end() - (ended ? 1 : 0));
  h.log_prob = p.log_prob;
  h.score = length_normalized(p.log_prob, h.length, c.alpha);
  h.forced_end = !ended;
  return h;
}

bool score_better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens != b.tokens) return a.tokens < b.tokens;
  return a.length < b.length;
}

void check(const BeamConfig& c) {
  if (c.beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  if (!(c.alpha >= 0.0)) throw std::invalid_argument("beam_search: alpha must be >= 0");
  if (c.max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");
}

}  // namespace

Hypothesis beam_search(const StepScorer& scorer, const BeamConfig& config) {
  check(config);
  std::vector<Partial> live{{{config.sos}, 0.0}};
  std::vector<Hypothesis> finished;
  for (std::size_t len = 1; len <= config.max_len && !live.empty(); ++len) {
    std::vector<Partial> cand;
    for (const Partial& p : live) {
      const std::vector<double> lp = scorer(p.seq);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        const int tok = int(v);
        if (std::find(config.banned.begin(), config.banned.end(), tok) != config.banned.end()) continue;
        Partial q{p.seq, p.log_prob + lp[v]};
        q.seq.push_back(tok);
        cand.push_back(std::move(q));
      }
    }
    std::sort(cand.begin(), cand.end(), raw_better);
    const std::size_t width = config.beam - std::min(config.beam, finished.size());
    cand.resize(std::min(cand.size(), width));
    live.clear();
    for (Partial& q : cand) {
      if (q.seq.back() == config.eos) {
        finished.push_back(finish(q, config, true));
      } else {
        live.push_back(std::move(q));
      }
    }
  }
  if (!finished.empty()) {
    return *std::min_element(finished.begin(), finished.end(), score_better);
  }
  std::vector<Hypothesis> forced;
  for (const Partial& p : live) forced.push_back(finish(p, config, false));
  if (forced.empty()) throw std::logic_error("beam_search: scorer proposed no tokens");
  return *std::min_element(forced.begin(), forced.end(), score_better);
}

Hypothesis greedy_decode(const StepScorer& scorer, const BeamConfig& config) {
  check(config);
  Partial p{{config.sos}, 0.0};
  for (std::size_t len = 1; len <= config.max_len; ++len) {
    const std::vector<double> lp = scorer(p.seq);
    std::size_t best = lp.size();
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (std::find(config.banned.begin(), config.banned.end(), int(v)) != config.banned.end()) continue;
      if (best == lp.size() || lp[v] > lp[best]) best = v;
    }
    if (best == lp.size()) throw std::logic_error("greedy_decode: scorer proposed no tokens");
    p.seq.push_back(int(best));
    p.log_prob += lp[best];
    if (int(best) == config.eos) return finish(p, config, true);
  }
  return finish(p, config, false);
}

std::string EvalCondition::name() const {
  return std::string(to_string(input)) + (noisy ? "-noisy" : "-clean");
}

std::array<EvalCondition, 5> standard_conditions() {
  return {EvalCondition{Profile::AB, false}, EvalCondition{Profile::AB, true},
          EvalCondition{Profile::A, false}, EvalCondition{Profile::A, true},
          EvalCondition{Profile::B, false}};
}

std::string EvalEntry::to_json() const {
  std::ostringstream os;
  os.precision(9);
  os << "{\"condition\":\"" << condition.name() << "\",\"wer\":" << wer
     << ",\"token_accuracy\":" << token_accuracy << ",\"utterances\":" << utterances
     << ",\"decode\":\"" << (decode.greedy ? "greedy" : "beam") << "\",\"beam\":" << decode.beam
     << ",\"alpha\":" << decode.alpha << '}';
  return os.str();
}

std::vector<int> transcribe(const ParamStore& params, const ModelConfig& model,
                            const ModalityInput& input, const DecodeConfig& decode) {
  if (params.contains("frame_head.w")) {
    const Tensor feats = extract_features(params, model, input);
    Graph g;
    g.disable_grad();
    const Tensor& z = g.value(frame_logits(g, params, g.constant(feats)));
    std::vector<int> frames(z.rows());
    for (std::size_t t = 0; t < z.rows(); ++t) frames[t] = int(argmax(z.row(t)));
    return collapse_runs(frames);
  }
  if (!params.contains("decoder.embed")) {
    throw std::invalid_argument("transcribe: model has neither a frame head nor a decoder");
  }
  const Tensor feats = extract_features(params, model, input);
  StepScorer scorer = [&](std::span<const int> prefix) {
    Graph g;
    g.disable_grad();
    const DecoderOutput out = decoder_forward(g, params, model, g.constant(feats), prefix);
    const auto row = g.value(out.log_probs).row(prefix.size() - 1);
    return std::vector<double>(row.begin(), row.end());
  };
  BeamConfig bc;
  bc.beam = decode.beam;
  bc.alpha = decode.alpha;
  bc.max_len = decode.max_len ? decode.max_len : input.frames() + 1;
  bc.sos = model.sos();
  bc.eos = model.eos();
  bc.banned = {model.sos(), model.pad()};
  return (decode.greedy ? greedy_decode(scorer, bc) : beam_search(scorer, bc)).tokens;
}

EvalEntry evaluate(const ParamStore& params, const ModelConfig& model, const Corpus& corpus,
                   const EvalCondition& condition, const DecodeConfig& decode, std::uint64_t seed) {
  EvalEntry e;
  e.condition = condition;
  e.decode = decode;
  std::size_t errors = 0, matches = 0, ref_tokens = 0;
  for (const Utterance& u : corpus.utterances) {
    if ((has_a(condition.input) && !u.features_a) || (has_b(condition.input) && !u.features_b)) {
      continue;
    }
    if (u.transcript.empty()) continue;
    ModalityInput in = ModalityInput::from(u, condition.input);
    std::optional<Tensor> noisy;
    if (condition.noisy && in.a) {
      Rng rng(derive_seed(seed, "eval-noise:" + u.id));
      noisy = add_noise(*in.a, kDefaultSnrDb, 1.0, rng).features;
      in.a = &*noisy;
    }
    const auto hyp = transcribe(params, model, in, decode);
    const EditCounts c = align(u.transcript, hyp);
    errors += c.errors();
    matches += c.matches;
    ref_tokens += u.transcript.size();
    ++e.utterances;
  }
  if (ref_tokens) {
    e.wer = double(errors) / double(ref_tokens);
    e.token_accuracy = double(matches) / double(ref_tokens);
  }
  return e;
}

double TransferMatrix::row_average(std::size_t row) const {
  double s = 0.0;
  for (const auto& e : entries[row]) s += e.wer;
  return s / double(entries[row].size());
}

std::string TransferMatrix::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << "finetune";
  for (const auto& c : standard_conditions()) os << ',' << c.name();
  os << ",average\n";
  for (std::size_t r = 0; r < entries.size(); ++r) {
    os << to_string(kFinetuneProfiles[r]);
    for (const auto& e : entries[r]) os << ',' << e.wer;
    os << ',' << row_average(r) << '\n';
  }
  return os.str();
}

TransferMatrix transfer_matrix(const ParamStore& pretrained, const ModelConfig& model,
                               const Corpus& train, const Corpus& test,
                               const FinetuneConfig& base, const DecodeConfig& decode) {
  TransferMatrix m;
  const auto conditions = standard_conditions();
  for (std::size_t r = 0; r < TransferMatrix::kFinetuneProfiles.size(); ++r) {
    FinetuneConfig fc = base;
    fc.profile = TransferMatrix::kFinetuneProfiles[r];
    const FinetuneResult ft = finetune(pretrained, model, train, fc);
    for (std::size_t c = 0; c < conditions.size(); ++c) {
      m.entries[r][c] = evaluate(ft.params, model, test, conditions[c], decode);
    }
  }
  return m;
}

}  // namespace unimask
