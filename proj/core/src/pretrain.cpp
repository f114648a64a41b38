#include "unimask/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "unimask/metrics.hpp"
#include "unimask/ops.hpp"

namespace unimask {

void ModalityDropoutConfig::validate() const {
  for (double p : {p_ab, p_a, p_b}) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument("modality dropout probabilities must lie in [0,1]");
    }
  }
  if (std::abs(p_ab + p_a + p_b - 1.0) > 1e-9) {
    throw std::invalid_argument("modality dropout probabilities must sum to 1");
  }
}

Profile sample_modalities(const ModalityDropoutConfig& config, Profile profile, Rng& rng) {
  if (profile != Profile::AB) return profile;
  const double u = rng.uniform();
  if (u < config.p_ab) return Profile::AB;
  if (u < config.p_ab + config.p_a) return Profile::A;
  // Guard against p_b == 0 with rounding in the cumulative sum.
  return config.p_b > 0.0 ? Profile::B : (config.p_a > 0.0 ? Profile::A : Profile::AB);
}

MaskSpec sample_mask(std::size_t frames, double p_mask, std::size_t span, Rng& rng) {
  MaskSpec m{p_mask, span, {}};
  std::vector<char> hit(frames, 0);
  for (std::size_t t = 0; t < frames; ++t) {
    if (rng.uniform() < p_mask) {
      for (std::size_t k = t; k < std::min(frames, t + span); ++k) hit[k] = 1;
    }
  }
  for (std::size_t t = 0; t < frames; ++t) {
    if (hit[t]) m.indices.push_back(t);
  }
  return m;
}

MaskedLoss masked_prediction_loss(Graph& g, NodeId logits, std::span<const int> targets,
                                  const MaskSpec& mask, double unmasked_weight) {
  const Tensor& z = g.value(logits);
  if (z.rank() != 2 || targets.size() != z.rows()) {
    throw ShapeError("masked_prediction_loss: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_string(z.shape()));
  }
  MaskedLoss out;
  std::vector<double> w(z.rows(), unmasked_weight);
  for (std::size_t t : mask.indices) {
    if (t >= z.rows()) throw std::out_of_range("masked_prediction_loss: mask index out of range");
    w[t] = 1.0;
    auto row = z.row(t);
    const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
    out.correct += best == std::size_t(targets[t]) ? 1 : 0;
  }
  out.masked = mask.indices.size();
  for (double v : w) out.weight += v;
  if (out.weight > 0.0) out.loss = ops::cross_entropy(g, logits, targets, w);
  return out;
}

void PretrainConfig::validate() const {
  dropout.validate();
  if (updates < 0) throw std::invalid_argument("pretrain: updates must be non-negative");
  if (!(peak_lr > 0.0)) throw std::invalid_argument("pretrain: peak_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw std::invalid_argument("pretrain: warmup_fraction must lie in [0,1)");
  }
  if (batch_frames == 0) throw std::invalid_argument("pretrain: batch_frames must be positive");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0) || mask_span == 0) {
    throw std::invalid_argument("pretrain: mask_prob must lie in [0,1] and mask_span be positive");
  }
  if (unmasked_weight < 0.0) throw std::invalid_argument("pretrain: unmasked_weight must be >= 0");
  if (!(noise.p_apply >= 0.0 && noise.p_apply <= 1.0) || !std::isfinite(noise.snr_db)) {
    throw std::invalid_argument("pretrain: invalid noise settings");
  }
  if (!(clip > 0.0)) throw std::invalid_argument("pretrain: clip must be positive");
  if (log_interval < 1 || checkpoint_interval < 0) {
    throw std::invalid_argument("pretrain: invalid log or checkpoint interval");
  }
}

std::string StepRecord::to_json() const {
  std::ostringstream os;
  os.precision(9);
  os << "{\"step\":" << step << ",\"loss\":" << loss << ",\"masked_acc\":" << masked_acc
     << ",\"lr\":" << lr << ",\"grad_norm\":" << grad_norm << '}';
  return os.str();
}

PretrainResult pretrain(ParamStore params, const ModelConfig& model, const Corpus& corpus,
                        const std::vector<std::optional<std::vector<int>>>& targets,
                        const PretrainConfig& config, const CheckpointFn& on_checkpoint,
                        const LogFn& on_log) {
  config.validate();
  model.validate();
  if (targets.size() != corpus.utterances.size()) {
    throw std::invalid_argument("pretrain: targets do not align with the corpus");
  }
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!targets[i]) continue;
    if (targets[i]->size() != corpus.utterances[i].frames()) {
      throw std::invalid_argument("pretrain: targets of " + corpus.utterances[i].id +
                                  " have the wrong length");
    }
    if (corpus.utterances[i].frames() > 0) pool.push_back(i);
  }
  if (pool.empty() && config.updates > 0) {
    throw std::invalid_argument("pretrain: no utterance has targets");
  }

  PretrainResult result;
  result.optimizer = AdamState::for_params(params);
  Rng batch_rng(derive_seed(config.seed, "batch"));
  Rng modality_rng(derive_seed(config.seed, "modality"));
  Rng mask_rng(derive_seed(config.seed, "mask"));
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
    std::optional<NodeId> total;
    double total_weight = 0.0;
    std::size_t masked = 0, correct = 0;
    std::vector<Tensor> noisy;  // keeps augmented inputs alive for the graph
    noisy.reserve(batch.size());
    try {
      for (std::size_t i : batch) {
        const Utterance& u = corpus.utterances[i];
        const auto before = modality_rng.draws();
        const Profile use = sample_modalities(config.dropout, u.profile, modality_rng);
        result.stats.modality_draws += modality_rng.draws() - before;
        ++result.stats.subsets[std::size_t(use)];

        ModalityInput in = ModalityInput::from(u, use);
        if (in.a && config.noise.enabled && config.noise.p_apply > 0.0) {
          NoiseResult nr = add_noise(*in.a, config.noise.snr_db, config.noise.p_apply, noise_rng);
          result.stats.noise_applied += nr.applied ? 1 : 0;
          result.stats.noise_skipped_zero_power += nr.skipped_zero_power ? 1 : 0;
          noisy.push_back(std::move(nr.features));
          in.a = &noisy.back();
        }
        const MaskSpec mask = sample_mask(u.frames(), config.mask_prob, config.mask_span, mask_rng);
        if (mask.empty() && config.unmasked_weight == 0.0) {
          ++result.stats.skipped_empty_mask;
          continue;
        }
        const EncoderOutput enc = encode(g, params, model, in, mask.indices);
        const NodeId logits = cluster_logits(g, params, enc.final);
        const MaskedLoss ml =
            masked_prediction_loss(g, logits, *targets[i], mask, config.unmasked_weight);
        masked += ml.masked;
        correct += ml.correct;
        if (!ml.loss) continue;
        const NodeId part = ops::scale(g, *ml.loss, ml.weight);
        total = total ? ops::add(g, *total, part) : part;
        total_weight += ml.weight;
      }
    } catch (const NumericError& e) {
      std::string ids;
      for (std::size_t i : batch) ids += (ids.empty() ? "" : ",") + corpus.utterances[i].id;
      throw TrainingError("pretrain: non-finite value at step " + std::to_string(step) +
                          " (batch " + ids + "): " + e.what());
    }

    StepRecord rec;
    rec.step = step + 1;
    rec.lr = warmup_linear_lr(step, config.updates, config.peak_lr, config.warmup_fraction);
    if (total) {
      const NodeId loss = ops::scale(g, *total, 1.0 / total_weight);
      rec.loss = g.value(loss).item();
      if (!std::isfinite(rec.loss)) {
        throw TrainingError("pretrain: non-finite loss at step " + std::to_string(step));
      }
      Gradients grads = backward(g, loss, params);
      rec.grad_norm = clip_grad_norm(grads, config.clip);
      adam_step(params, grads, result.optimizer, rec.lr);
    }
    rec.masked_acc = masked ? double(correct) / double(masked) : 0.0;
    result.log.push_back(rec);
    if (on_log && (rec.step % config.log_interval == 0 || rec.step == config.updates)) on_log(rec);
    if (on_checkpoint && config.checkpoint_interval > 0 &&
        rec.step % config.checkpoint_interval == 0 && rec.step != config.updates) {
      on_checkpoint(rec.step, params, result.optimizer);
    }
  }
  if (on_checkpoint) on_checkpoint(config.updates, params, result.optimizer);
  result.params = std::move(params);
  return result;
}

double masked_accuracy(const ParamStore& params, const ModelConfig& model, const Corpus& corpus,
                       const std::vector<std::optional<std::vector<int>>>& targets,
                       const PretrainConfig& config, std::uint64_t seed) {
  Rng mask_rng(derive_seed(seed, "eval-mask"));
  std::size_t masked = 0, correct = 0;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    if (!targets.at(i)) continue;
    const Utterance& u = corpus.utterances[i];
    const MaskSpec mask = sample_mask(u.frames(), config.mask_prob, config.mask_span, mask_rng);
    if (mask.empty()) continue;
    Graph g;
    g.disable_grad();
    const EncoderOutput enc = encode(g, params, model, ModalityInput::from(u), mask.indices);
    const NodeId logits = cluster_logits(g, params, enc.final);
    const MaskedLoss ml = masked_prediction_loss(g, logits, *targets[i], mask);
    masked += ml.masked;
    correct += ml.correct;
  }
  return masked ? double(correct) / double(masked) : 0.0;
}

GradCheckResult pretrain_gradcheck(const ModelConfig& model, std::uint64_t seed,
                                   std::size_t frames, const GradCheckOptions& options) {
  model.validate();
  Rng rng(derive_seed(seed, "gradcheck-data"));
  Tensor a = Tensor::matrix(frames, std::size_t(model.dim_a));
  for (double& v : a.storage()) v = rng.normal();
  std::optional<Tensor> b;
  if (model.dim_b > 0) {
    b = Tensor::matrix(frames, std::size_t(model.dim_b));
    for (double& v : b->storage()) v = rng.normal();
  }
  std::vector<int> targets(frames);
  for (int& t : targets) t = int(rng.index(std::size_t(model.clusters)));
  MaskSpec mask = sample_mask(frames, 0.25, 2, rng);
  if (mask.empty()) mask.indices = {0};
  ParamStore params = init_params(model, derive_seed(seed, "gradcheck-init"));
  // Perturb the zero-initialized biases and norms so every path carries signal.
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double& v : params.value(i).storage()) v += 0.1 * rng.normal();
  }
  const LossBuilder build = [&](Graph& g, const ParamStore& p) {
    ModalityInput in{&a, b ? &*b : nullptr};
    const EncoderOutput enc = encode(g, p, model, in, mask.indices);
    return *masked_prediction_loss(g, cluster_logits(g, p, enc.final), targets, mask).loss;
  };
  GradCheckOptions opt = options;
  opt.seed = derive_seed(seed, "gradcheck-coords");
  return grad_check(params, build, opt);
}

namespace {

double targets_pnmi(const Corpus& corpus, const std::vector<std::optional<std::vector<int>>>& t) {
  std::vector<int> units, ids;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!t[i]) continue;
    const auto& u = corpus.utterances[i].units;
    units.insert(units.end(), u.begin(), u.end());
    ids.insert(ids.end(), t[i]->begin(), t[i]->end());
  }
  return units.empty() ? 0.0 : pnmi(units, ids);
}

}  // namespace

IterationResult run_iteration_cycle(const Corpus& corpus, int iterations,
                                    const IterationConfig& config) {
  if (iterations < 1) throw std::invalid_argument("run_iteration_cycle: need at least 1 iteration");
  IterationResult out;
  std::optional<ParamStore> current;
  for (int it = 1; it <= iterations; ++it) {
    TargetOptions topt = config.targets;
    topt.kmeans.seed = derive_seed(config.targets.kmeans.seed, std::uint64_t(it));
    TargetSet ts = build_targets(current ? &*current : nullptr, &config.model, corpus, it, topt);
    IterationRecord rec;
    rec.iteration = it;
    rec.labeled_utterances = ts.labeled_count();
    rec.skipped = ts.skipped;
    rec.target_pnmi = targets_pnmi(corpus, ts.labels);

    PretrainConfig pc = config.pretrain;
    pc.seed = derive_seed(config.pretrain.seed, std::uint64_t(it));
    ParamStore fresh = init_params(config.model, derive_seed(config.init_seed, std::uint64_t(it)));
    PretrainResult pr = pretrain(std::move(fresh), config.model, corpus, ts.labels, pc);
    rec.codebook = std::move(ts.codebook);
    out.iterations.push_back(std::move(rec));
    out.last_log = std::move(pr.log);
    current = std::move(pr.params);
  }
  out.params = std::move(*current);
  return out;
}

}  // namespace unimask
