#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unimask/datagen.hpp"
#include "unimask/graph.hpp"

namespace unimask {

/// Network dimensions. `dim_b == 0` builds a model without a modality-B frontend.
struct ModelConfig {
  int dim_a = 16;
  int dim_b = 24;
  int frontend_dim = 32;
  int embed_dim = 64;
  int layers = 3;
  int heads = 4;
  int ffn_dim = 128;
  int clusters = 40;
  int decoder_layers = 1;
  /// Output classes of the frame classifier (synthetic units).
  int classes = 20;
  bool positional = true;

  /// Decoder vocabulary: classes plus start, end and padding symbols.
  int vocab() const { return classes + 3; }
  int sos() const { return classes; }
  int eos() const { return classes + 1; }
  int pad() const { return classes + 2; }

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Per-frame feature streams handed to the network; absent streams are null.
struct ModalityInput {
  const Tensor* a = nullptr;
  const Tensor* b = nullptr;

  std::size_t frames() const;
  /// Streams of `u` restricted to `use` (streams the utterance lacks stay null).
  static ModalityInput from(const Utterance& u, Profile use);
  static ModalityInput from(const Utterance& u) { return from(u, u.profile); }
};

/// Frontends, fusion, mask embedding, encoder blocks, final norm and cluster head.
ParamStore init_params(const ModelConfig& config, std::uint64_t seed);
void add_frame_head(ParamStore& params, const ModelConfig& config, std::uint64_t seed);
void add_decoder(ParamStore& params, const ModelConfig& config, std::uint64_t seed);
void drop_cluster_head(ParamStore& params);

/// Stable path prefix of encoder block `i`, e.g. "encoder.block.0".
std::string block_path(int i);

struct FrontendStreams {
  std::optional<NodeId> a;
  std::optional<NodeId> b;
  std::size_t frames = 0;
};

/// Bias-free two-layer perceptrons per modality. f(0) = 0, so an all-zero
/// feature stream and an absent one fuse identically.
FrontendStreams frontends(Graph& g, const ParamStore& params, const ModelConfig& config,
                          const ModalityInput& input);

/// Frame-wise concatenation followed by a linear projection; an absent
/// stream is replaced by zeros. Throws if both streams are absent.
NodeId fuse(Graph& g, const ParamStore& params, const ModelConfig& config,
            const FrontendStreams& streams);

struct EncoderOutput {
  /// layers[0] is the embedding (fused, masked, position-encoded); layers[i]
  /// is the output of block i; the last entry is the final normalized output.
  std::vector<NodeId> layers;
  NodeId final = 0;
};

/// Encode from a fused sequence. Frames listed in `mask` are replaced by the
/// learned mask embedding before positions are added.
EncoderOutput encode_fused(Graph& g, const ParamStore& params, const ModelConfig& config,
                           NodeId fused, std::span<const std::size_t> mask = {});
EncoderOutput encode(Graph& g, const ParamStore& params, const ModelConfig& config,
                     const ModalityInput& input, std::span<const std::size_t> mask = {});

NodeId cluster_logits(Graph& g, const ParamStore& params, NodeId features);
NodeId frame_logits(Graph& g, const ParamStore& params, NodeId features);

struct DecoderOutput {
  NodeId log_probs = 0;  ///< [len x vocab]; row t predicts token t+1
  /// Cross-attention probabilities per layer and head, each [len x frames].
  std::vector<NodeId> cross_attention;
};

/// Teacher-forced causal decoder over `prev_tokens` (which must start with
/// the start symbol). Row t depends only on tokens 0..t and the encoder.
DecoderOutput decoder_forward(Graph& g, const ParamStore& params, const ModelConfig& config,
                              NodeId encoder_features, std::span<const int> prev_tokens);

/// Fixed sinusoidal position table [frames x dim].
Tensor sinusoidal_positions(std::size_t frames, std::size_t dim);

/// Multi-head attention with parameters under `prefix` (wq, bq, wk, bk, wv,
/// bv, wo, bo). `additive_mask`, when given, is added to every head's scores.
NodeId attention(Graph& g, const ParamStore& params, const std::string& prefix, NodeId query,
                 NodeId memory, int heads, const Tensor* additive_mask = nullptr,
                 std::vector<NodeId>* probabilities = nullptr);

/// Inference helper: every layer output for one input, no gradients.
std::vector<Tensor> extract_layers(const ParamStore& params, const ModelConfig& config,
                                   const ModalityInput& input);
/// Inference helper: final encoder features.
Tensor extract_features(const ParamStore& params, const ModelConfig& config,
                        const ModalityInput& input);

}  // namespace unimask
