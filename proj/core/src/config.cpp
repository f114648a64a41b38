#include "unimask/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <cstdio>
#include <functional>
#include <sstream>

#include "unimask/random.hpp"
#include "unimask/serialize.hpp"

namespace unimask {
namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

[[noreturn]] void bad_value(const std::string& where, const std::string& v, const char* what) {
  throw ConfigError(where + ": cannot parse '" + v + "' as " + what);
}

template <class Int>
Field int_field(std::string s, std::string k, Int& ref, long long min_value) {
  const std::string where = s + "." + k;
  return {s, k, [&ref] { return std::to_string(ref); },
          [&ref, where, min_value](const std::string& v) {
            std::size_t used = 0;
            long long x = 0;
            try {
              x = std::stoll(v, &used);
            } catch (const std::exception&) {
              bad_value(where, v, "an integer");
            }
            if (used != v.size()) bad_value(where, v, "an integer");
            if (x < min_value) {
              throw ConfigError(where + ": must be >= " + std::to_string(min_value));
            }
            ref = Int(x);
          }};
}

Field real_field(std::string s, std::string k, double& ref) {
  const std::string where = s + "." + k;
  return {s, k,
          [&ref] {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", ref);
            return std::string(buf);
          },
          [&ref, where](const std::string& v) {
            std::size_t used = 0;
            try {
              ref = std::stod(v, &used);
            } catch (const std::exception&) {
              bad_value(where, v, "a number");
            }
            if (used != v.size()) bad_value(where, v, "a number");
          }};
}

Field bool_field(std::string s, std::string k, bool& ref) {
  const std::string where = s + "." + k;
  return {s, k, [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, where](const std::string& v) {
            if (v == "true" || v == "on" || v == "1") {
              ref = true;
            } else if (v == "false" || v == "off" || v == "0") {
              ref = false;
            } else {
              bad_value(where, v, "a boolean");
            }
          }};
}

std::vector<Field> fields(ExperimentConfig& c) {
  std::vector<Field> f;
  f.push_back(int_field("experiment", "seed", c.seed, 0));
  f.push_back({"experiment", "output_dir", [&c] { return c.output_dir.string(); },
               [&c](const std::string& v) { c.output_dir = v; }});

  auto& g = c.generator;
  f.push_back(int_field("generator", "units", g.units, 2));
  f.push_back(int_field("generator", "visemes", g.visemes, 1));
  f.push_back(int_field("generator", "dim_a", g.dim_a, 1));
  f.push_back(int_field("generator", "dim_b", g.dim_b, 1));
  f.push_back(int_field("generator", "latent_dim", g.latent_dim, 1));
  f.push_back(real_field("generator", "mean_dwell", g.mean_dwell));
  f.push_back(real_field("generator", "sigma_a", g.sigma_a));
  f.push_back(real_field("generator", "sigma_b", g.sigma_b));
  f.push_back(int_field("generator", "min_frames", g.min_frames, 0));
  f.push_back(int_field("generator", "max_frames", g.max_frames, 0));

  auto& d = c.data;
  f.push_back(int_field("data", "train_utterances", d.train_utterances, 1));
  f.push_back(int_field("data", "test_utterances", d.test_utterances, 1));
  f.push_back(real_field("data", "mix_ab", d.mix.ab));
  f.push_back(real_field("data", "mix_a", d.mix.a));
  f.push_back(real_field("data", "mix_b", d.mix.b));
  f.push_back(int_field("data", "ood_utterances", d.ood_utterances, 0));
  f.push_back(real_field("data", "ood_perturbation", d.ood_perturbation));

  auto& m = c.model;
  f.push_back(int_field("model", "frontend_dim", m.frontend_dim, 1));
  f.push_back(int_field("model", "embed_dim", m.embed_dim, 1));
  f.push_back(int_field("model", "layers", m.layers, 1));
  f.push_back(int_field("model", "heads", m.heads, 1));
  f.push_back(int_field("model", "ffn_dim", m.ffn_dim, 1));
  f.push_back(int_field("model", "decoder_layers", m.decoder_layers, 0));
  f.push_back(bool_field("model", "positional", m.positional));
  f.push_back({"model", "modality_b", [&m] { return std::string(m.dim_b > 0 ? "true" : "false"); },
               [&m](const std::string& v) {
                 bool on = true;
                 bool_field("model", "modality_b", on).set(v);
                 m.dim_b = on ? 1 : 0;  // resolved against the generator after parsing
               }});

  auto& t = c.targets;
  f.push_back(int_field("targets", "iterations", t.iterations, 1));
  f.push_back(int_field("targets", "clusters", t.clusters, 2));
  f.push_back(int_field("targets", "kmeans_iters", t.kmeans_iters, 1));
  f.push_back(int_field("targets", "kmeans_restarts", t.kmeans_restarts, 1));
  f.push_back(int_field("targets", "max_pooled_frames", t.max_pooled_frames, 1));

  auto& p = c.pretrain;
  f.push_back(int_field("pretrain", "updates", p.updates, 0));
  f.push_back(real_field("pretrain", "peak_lr", p.peak_lr));
  f.push_back(real_field("pretrain", "warmup_fraction", p.warmup_fraction));
  f.push_back(int_field("pretrain", "batch_frames", p.batch_frames, 1));
  f.push_back(real_field("pretrain", "p_ab", p.dropout.p_ab));
  f.push_back(real_field("pretrain", "p_a", p.dropout.p_a));
  f.push_back(real_field("pretrain", "p_b", p.dropout.p_b));
  f.push_back(real_field("pretrain", "mask_prob", p.mask_prob));
  f.push_back(int_field("pretrain", "mask_span", p.mask_span, 1));
  f.push_back(real_field("pretrain", "unmasked_weight", p.unmasked_weight));
  f.push_back(bool_field("pretrain", "noise", p.noise.enabled));
  f.push_back(real_field("pretrain", "snr_db", p.noise.snr_db));
  f.push_back(real_field("pretrain", "noise_prob", p.noise.p_apply));
  f.push_back(real_field("pretrain", "clip", p.clip));
  f.push_back(int_field("pretrain", "log_interval", p.log_interval, 1));
  f.push_back(int_field("pretrain", "checkpoint_interval", p.checkpoint_interval, 0));

  auto& ft = c.finetune;
  f.push_back({"finetune", "task", [&ft] { return std::string(to_string(ft.task)); },
               [&ft](const std::string& v) {
                 try {
                   ft.task = parse_task(v);
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(std::string("finetune.task: ") + e.what());
                 }
               }});
  f.push_back({"finetune", "modality", [&ft] { return std::string(to_string(ft.profile)); },
               [&ft](const std::string& v) {
                 try {
                   ft.profile = parse_profile(v);
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(std::string("finetune.modality: ") + e.what());
                 }
               }});
  f.push_back(real_field("finetune", "p_ab", ft.dropout.p_ab));
  f.push_back(real_field("finetune", "p_a", ft.dropout.p_a));
  f.push_back(real_field("finetune", "p_b", ft.dropout.p_b));
  f.push_back(real_field("finetune", "lr", ft.lr));
  f.push_back(real_field("finetune", "phase_warmup", ft.schedule.warmup));
  f.push_back(real_field("finetune", "phase_hold", ft.schedule.hold));
  f.push_back(real_field("finetune", "phase_decay", ft.schedule.decay));
  f.push_back(int_field("finetune", "updates", ft.updates, 0));
  f.push_back(int_field("finetune", "nfrz", ft.nfrz, 0));
  f.push_back(int_field("finetune", "lfrz", ft.lfrz, 0));
  f.push_back(int_field("finetune", "batch_frames", ft.batch_frames, 1));
  f.push_back(bool_field("finetune", "noise", ft.noise.enabled));
  f.push_back(real_field("finetune", "snr_db", ft.noise.snr_db));
  f.push_back(real_field("finetune", "noise_prob", ft.noise.p_apply));
  f.push_back(real_field("finetune", "clip", ft.clip));

  auto& dc = c.decode;
  f.push_back(bool_field("decode", "greedy", dc.greedy));
  f.push_back(int_field("decode", "beam", dc.beam, 1));
  f.push_back(real_field("decode", "alpha", dc.alpha));
  f.push_back(int_field("decode", "max_len", dc.max_len, 0));

  auto& mt = c.metrics;
  f.push_back(int_field("metrics", "clusters", mt.clusters, 2));
  f.push_back(int_field("metrics", "kmeans_iters", mt.kmeans_iters, 1));
  f.push_back(int_field("metrics", "kmeans_restarts", mt.kmeans_restarts, 1));
  f.push_back(int_field("metrics", "max_utterances", mt.max_utterances, 0));
  f.push_back(int_field("metrics", "projection_frames", mt.projection_frames, 1));
  return f;
}

/// Fill values that follow from other sections.
void resolve(ExperimentConfig& c) {
  c.generator.seed = derive_seed(c.seed, "generator");
  c.pretrain.seed = derive_seed(c.seed, "pretrain");
  c.finetune.seed = derive_seed(c.seed, "finetune");
  c.model.dim_a = c.generator.dim_a;
  c.model.dim_b = c.model.dim_b > 0 ? c.generator.dim_b : 0;
  c.model.classes = c.generator.units;
  c.model.clusters = int(c.targets.clusters);
}

}  // namespace

void ExperimentConfig::validate() const {
  auto wrap = [](const char* section, const auto& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("[") + section + "] " + e.what());
    }
  };
  wrap("generator", [&] { generator.validate(); });
  wrap("data", [&] {
    if (data.mix.ab < 0 || data.mix.a < 0 || data.mix.b < 0 ||
        !(data.mix.ab + data.mix.a + data.mix.b > 0)) {
      throw ConfigError("[data] profile mix must be non-negative with a positive total");
    }
    if (!(data.ood_perturbation >= 0.0 && data.ood_perturbation <= 1.0)) {
      throw ConfigError("[data] ood_perturbation must lie in [0,1]");
    }
  });
  wrap("model", [&] { model.validate(); });
  wrap("pretrain", [&] { pretrain.validate(); });
  wrap("finetune", [&] { finetune.validate(model); });
  if (decode.alpha < 0) throw ConfigError("[decode] alpha must be >= 0");
  if (metrics.clusters < 2) throw ConfigError("[metrics] clusters must be >= 2");
}

std::string ExperimentConfig::to_ini() const {
  ExperimentConfig copy = *this;
  std::ostringstream os;
  std::string section;
  for (const Field& f : fields(copy)) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get() << '\n';
  }
  return os.str();
}

std::string ExperimentConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : to_ini()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TargetOptions ExperimentConfig::target_options() const {
  TargetOptions o;
  o.clusters = targets.clusters;
  o.kmeans = {targets.kmeans_iters, targets.kmeans_restarts, derive_seed(seed, "kmeans")};
  o.max_pooled_frames = targets.max_pooled_frames;
  return o;
}

MetricOptions ExperimentConfig::metric_options() const {
  MetricOptions o;
  o.clusters = metrics.clusters;
  o.kmeans = {metrics.kmeans_iters, metrics.kmeans_restarts, derive_seed(seed, "metrics")};
  o.max_utterances = metrics.max_utterances;
  return o;
}

ExperimentConfig default_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  resolve(c);
  return c;
}

ExperimentConfig parse_config(const std::string& ini_text) {
  boost::property_tree::ptree tree;
  std::istringstream is(ini_text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config syntax error at line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig c;
  const std::vector<Field> table = fields(c);
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("key '" + section + "' appears outside any section");
    bool known_section = false;
    for (const Field& f : table) known_section = known_section || f.section == section;
    if (!known_section) throw ConfigError("unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) {
        return f.section == section && f.key == key;
      });
      if (it == table.end()) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      it->set(value.get_value<std::string>());
    }
  }
  resolve(c);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

}  // namespace unimask
