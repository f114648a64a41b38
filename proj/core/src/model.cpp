#include "unimask/model.hpp"

#include <cmath>
#include <stdexcept>

#include "unimask/ops.hpp"
#include "unimask/random.hpp"

namespace unimask {
namespace {

constexpr double kMaskedScore = -1e30;

Tensor random_weight(std::uint64_t seed, const std::string& name, std::size_t in, std::size_t out) {
  Rng rng(derive_seed(seed, "init:" + name));
  Tensor w = Tensor::matrix(in, out);
  const double std = std::sqrt(2.0 / double(in + out));
  for (double& v : w.storage()) v = std * rng.normal();
  return w;
}

Tensor filled(std::size_t n, double v) {
  Tensor t = Tensor::vector(n);
  t.fill(v);
  return t;
}

void add_linear(ParamStore& p, std::uint64_t seed, const std::string& prefix, std::size_t in,
                std::size_t out, bool bias = true) {
  p.add(prefix + ".w", random_weight(seed, prefix + ".w", in, out));
  if (bias) p.add(prefix + ".b", Tensor::vector(out));
}

void add_norm(ParamStore& p, const std::string& prefix, std::size_t dim) {
  p.add(prefix + ".g", filled(dim, 1.0));
  p.add(prefix + ".b", Tensor::vector(dim));
}

void add_attention(ParamStore& p, std::uint64_t seed, const std::string& prefix, std::size_t dim) {
  for (const char* k : {"q", "k", "v", "o"}) {
    const std::string w = prefix + ".w" + k;
    p.add(w, random_weight(seed, w, dim, dim));
    p.add(prefix + ".b" + k, Tensor::vector(dim));
  }
}

NodeId linear(Graph& g, const ParamStore& p, const std::string& prefix, NodeId x) {
  NodeId y = ops::matmul(g, x, g.param(p, prefix + ".w"));
  if (auto b = p.find(prefix + ".b")) y = ops::add_bias(g, y, g.param(p, *b));
  return y;
}

NodeId norm(Graph& g, const ParamStore& p, const std::string& prefix, NodeId x) {
  return ops::layer_norm(g, x, g.param(p, prefix + ".g"), g.param(p, prefix + ".b"));
}

NodeId feed_forward(Graph& g, const ParamStore& p, const std::string& prefix, NodeId x) {
  return linear(g, p, prefix + ".fc2", ops::gelu(g, linear(g, p, prefix + ".fc1", x)));
}

NodeId frontend(Graph& g, const ParamStore& p, const std::string& prefix, const Tensor& x,
                int expected_dim) {
  if (x.rank() != 2 || x.cols() != std::size_t(expected_dim)) {
    throw ShapeError(prefix + ": features " + shape_string(x.shape()) + " expected [T x " +
                     std::to_string(expected_dim) + "]");
  }
  NodeId in = g.constant(x);
  return linear(g, p, prefix + ".fc2", ops::gelu(g, linear(g, p, prefix + ".fc1", in)));
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (dim_a < 1) fail("dim_a must be positive");
  if (dim_b < 0) fail("dim_b must be non-negative");
  if (frontend_dim < 1 || embed_dim < 1 || ffn_dim < 1) fail("dimensions must be positive");
  if (layers < 1) fail("layers must be >= 1");
  if (heads < 1 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (clusters < 2) fail("clusters must be >= 2");
  if (decoder_layers < 0) fail("decoder_layers must be >= 0");
  if (classes < 1) fail("classes must be >= 1");
}

std::size_t ModalityInput::frames() const {
  if (a) return a->rows();
  if (b) return b->rows();
  return 0;
}

ModalityInput ModalityInput::from(const Utterance& u, Profile use) {
  ModalityInput in;
  if (has_a(use) && u.features_a) in.a = &*u.features_a;
  if (has_b(use) && u.features_b) in.b = &*u.features_b;
  return in;
}

std::string block_path(int i) { return "encoder.block." + std::to_string(i); }

ParamStore init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParamStore p;
  const auto dh = std::size_t(config.frontend_dim);
  const auto dc = std::size_t(config.embed_dim);
  add_linear(p, seed, "frontend_a.fc1", std::size_t(config.dim_a), dh, false);
  add_linear(p, seed, "frontend_a.fc2", dh, dh, false);
  if (config.dim_b > 0) {
    add_linear(p, seed, "frontend_b.fc1", std::size_t(config.dim_b), dh, false);
    add_linear(p, seed, "frontend_b.fc2", dh, dh, false);
  }
  add_linear(p, seed, "fusion", 2 * dh, dc);
  {
    Rng rng(derive_seed(seed, "init:mask_emb"));
    Tensor m = Tensor::vector(dc);
    for (double& v : m.storage()) v = rng.normal();
    p.add("mask_emb", std::move(m));
  }
  for (int i = 0; i < config.layers; ++i) {
    const std::string b = block_path(i);
    add_norm(p, b + ".ln1", dc);
    add_attention(p, seed, b + ".attn", dc);
    add_norm(p, b + ".ln2", dc);
    add_linear(p, seed, b + ".ffn.fc1", dc, std::size_t(config.ffn_dim));
    add_linear(p, seed, b + ".ffn.fc2", std::size_t(config.ffn_dim), dc);
  }
  add_norm(p, "encoder.final_ln", dc);
  add_linear(p, seed, "cluster_head", dc, std::size_t(config.clusters));
  return p;
}

void add_frame_head(ParamStore& params, const ModelConfig& config, std::uint64_t seed) {
  params.erase_prefix("frame_head.");
  add_linear(params, seed, "frame_head", std::size_t(config.embed_dim),
             std::size_t(config.classes));
}

void add_decoder(ParamStore& params, const ModelConfig& config, std::uint64_t seed) {
  params.erase_prefix("decoder.");
  const auto dc = std::size_t(config.embed_dim);
  {
    Rng rng(derive_seed(seed, "init:decoder.embed"));
    Tensor e = Tensor::matrix(std::size_t(config.vocab()), dc);
    for (double& v : e.storage()) v = rng.normal();
    params.add("decoder.embed", std::move(e));
  }
  for (int i = 0; i < config.decoder_layers; ++i) {
    const std::string b = "decoder.block." + std::to_string(i);
    add_norm(params, b + ".ln1", dc);
    add_attention(params, seed, b + ".self_attn", dc);
    add_norm(params, b + ".ln2", dc);
    add_attention(params, seed, b + ".cross_attn", dc);
    add_norm(params, b + ".ln3", dc);
    add_linear(params, seed, b + ".ffn.fc1", dc, std::size_t(config.ffn_dim));
    add_linear(params, seed, b + ".ffn.fc2", std::size_t(config.ffn_dim), dc);
  }
  add_norm(params, "decoder.final_ln", dc);
  add_linear(params, seed, "decoder.out", dc, std::size_t(config.vocab()));
}

void drop_cluster_head(ParamStore& params) { params.erase_prefix("cluster_head."); }

Tensor sinusoidal_positions(std::size_t frames, std::size_t dim) {
  Tensor t = Tensor::matrix(frames, dim);
  for (std::size_t pos = 0; pos < frames; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -double(2 * (i / 2)) / double(dim));
      t.at(pos, i) = (i % 2 == 0) ? std::sin(double(pos) * rate) : std::cos(double(pos) * rate);
    }
  }
  return t;
}

NodeId attention(Graph& g, const ParamStore& params, const std::string& prefix, NodeId query,
                 NodeId memory, int heads, const Tensor* additive_mask,
                 std::vector<NodeId>* probabilities) {
  auto proj = [&](const char* k, NodeId x) {
    NodeId y = ops::matmul(g, x, g.param(params, prefix + ".w" + k));
    return ops::add_bias(g, y, g.param(params, prefix + ".b" + k));
  };
  const NodeId q = proj("q", query);
  const NodeId k = proj("k", memory);
  const NodeId v = proj("v", memory);
  const std::size_t dim = g.value(q).cols();
  const std::size_t dh = dim / std::size_t(heads);
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  std::optional<NodeId> mask;
  if (additive_mask) mask = g.constant(*additive_mask);
  std::optional<NodeId> merged;
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = std::size_t(h) * dh;
    const NodeId qh = ops::slice_lastdim(g, q, off, dh);
    const NodeId kh = ops::slice_lastdim(g, k, off, dh);
    const NodeId vh = ops::slice_lastdim(g, v, off, dh);
    NodeId scores = ops::scale(g, ops::matmul(g, qh, ops::transpose(g, kh)), inv_sqrt);
    if (mask) scores = ops::add(g, scores, *mask);
    const NodeId p = ops::softmax(g, scores);
    if (probabilities) probabilities->push_back(p);
    const NodeId ctx = ops::matmul(g, p, vh);
    merged = merged ? ops::concat_lastdim(g, *merged, ctx) : ctx;
  }
  return proj("o", *merged);
}

FrontendStreams frontends(Graph& g, const ParamStore& params, const ModelConfig& config,
                          const ModalityInput& input) {
  FrontendStreams s;
  if (input.a && input.b && input.a->rows() != input.b->rows()) {
    throw ShapeError("frontends: modality lengths differ (" + std::to_string(input.a->rows()) +
                     " vs " + std::to_string(input.b->rows()) + ")");
  }
  if (input.a) s.a = frontend(g, params, "frontend_a", *input.a, config.dim_a);
  if (input.b) {
    if (config.dim_b == 0) throw std::invalid_argument("model has no modality-B frontend");
    s.b = frontend(g, params, "frontend_b", *input.b, config.dim_b);
  }
  s.frames = input.frames();
  return s;
}

NodeId fuse(Graph& g, const ParamStore& params, const ModelConfig& config,
            const FrontendStreams& streams) {
  if (!streams.a && !streams.b) throw std::invalid_argument("fuse: both modalities absent");
  const std::size_t T = streams.a ? g.value(*streams.a).rows() : g.value(*streams.b).rows();
  const auto dh = std::size_t(config.frontend_dim);
  const NodeId ha = streams.a ? *streams.a : g.constant(Tensor::matrix(T, dh));
  const NodeId hb = streams.b ? *streams.b : g.constant(Tensor::matrix(T, dh));
  if (g.value(ha).rows() != g.value(hb).rows()) {
    throw ShapeError("fuse: stream lengths differ");
  }
  return linear(g, params, "fusion", ops::concat_lastdim(g, ha, hb));
}

EncoderOutput encode_fused(Graph& g, const ParamStore& params, const ModelConfig& config,
                           NodeId fused, std::span<const std::size_t> mask) {
  const std::size_t T = g.value(fused).rows();
  for (std::size_t m : mask) {
    if (m >= T) {
      throw std::out_of_range("encode: mask index " + std::to_string(m) + " >= frames " +
                              std::to_string(T));
    }
  }
  NodeId x = fused;
  if (!mask.empty()) x = ops::replace_rows(g, x, mask, g.param(params, "mask_emb"));
  if (config.positional) {
    x = ops::add(g, x, g.constant(sinusoidal_positions(T, std::size_t(config.embed_dim))));
  }
  EncoderOutput out;
  out.layers.push_back(x);
  for (int i = 0; i < config.layers; ++i) {
    const std::string b = block_path(i);
    const NodeId n1 = norm(g, params, b + ".ln1", x);
    x = ops::add(g, x, attention(g, params, b + ".attn", n1, n1, config.heads));
    x = ops::add(g, x, feed_forward(g, params, b + ".ffn", norm(g, params, b + ".ln2", x)));
    if (i + 1 < config.layers) out.layers.push_back(x);
  }
  out.final = norm(g, params, "encoder.final_ln", x);
  out.layers.push_back(out.final);
  return out;
}

EncoderOutput encode(Graph& g, const ParamStore& params, const ModelConfig& config,
                     const ModalityInput& input, std::span<const std::size_t> mask) {
  return encode_fused(g, params, config, fuse(g, params, config, frontends(g, params, config, input)),
                      mask);
}

NodeId cluster_logits(Graph& g, const ParamStore& params, NodeId features) {
  return linear(g, params, "cluster_head", features);
}

NodeId frame_logits(Graph& g, const ParamStore& params, NodeId features) {
  return linear(g, params, "frame_head", features);
}

DecoderOutput decoder_forward(Graph& g, const ParamStore& params, const ModelConfig& config,
                              NodeId encoder_features, std::span<const int> prev_tokens) {
  if (prev_tokens.empty() || prev_tokens.front() != config.sos()) {
    throw std::invalid_argument("decoder: token prefix must begin with the start symbol");
  }
  for (int t : prev_tokens) {
    if (t < 0 || t >= config.vocab()) {
      throw std::out_of_range("decoder: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(config.vocab()));
    }
  }
  const std::size_t len = prev_tokens.size();
  const auto dc = std::size_t(config.embed_dim);
  NodeId x = ops::embedding_lookup(g, g.param(params, "decoder.embed"), prev_tokens);
  x = ops::add(g, x, g.constant(sinusoidal_positions(len, dc)));
  Tensor causal = Tensor::matrix(len, len);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = i + 1; j < len; ++j) causal.at(i, j) = kMaskedScore;
  }
  DecoderOutput out;
  for (int i = 0; i < config.decoder_layers; ++i) {
    const std::string b = "decoder.block." + std::to_string(i);
    const NodeId n1 = norm(g, params, b + ".ln1", x);
    x = ops::add(g, x, attention(g, params, b + ".self_attn", n1, n1, config.heads, &causal));
    const NodeId n2 = norm(g, params, b + ".ln2", x);
    x = ops::add(g, x, attention(g, params, b + ".cross_attn", n2, encoder_features, config.heads,
                                 nullptr, &out.cross_attention));
    x = ops::add(g, x, feed_forward(g, params, b + ".ffn", norm(g, params, b + ".ln3", x)));
  }
  x = norm(g, params, "decoder.final_ln", x);
  out.log_probs = ops::log_softmax(g, linear(g, params, "decoder.out", x));
  return out;
}

std::vector<Tensor> extract_layers(const ParamStore& params, const ModelConfig& config,
                                   const ModalityInput& input) {
  Graph g;
  g.disable_grad();
  const EncoderOutput enc = encode(g, params, config, input);
  std::vector<Tensor> out;
  for (NodeId id : enc.layers) out.push_back(g.value(id));
  return out;
}

Tensor extract_features(const ParamStore& params, const ModelConfig& config,
                        const ModalityInput& input) {
  Graph g;
  g.disable_grad();
  return g.value(encode(g, params, config, input).final);
}

}  // namespace unimask
