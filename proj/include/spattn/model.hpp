#pragma once

// Toy non-autoregressive encoder/decoder built from pre-norm FFT blocks.
// Tokens are embedded and conditioned on a style vector, encoded, expanded to
// frames at a fixed rate, decoded and projected to output frames. Pruning
// masks act on the self-attention of the blocks selected by PruneScope.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spattn/attention.hpp"
#include "spattn/tensor.hpp"

namespace spattn {

enum class PruneScope { kNone, kDecoderOnly, kEncoderOnly, kBoth };
enum class PruneMode { kNone, kVanilla, kDifferentiable };
/// Which differentiable mask the forward pass applies.
enum class MaskStage { kSoft, kHard };

const char* to_string(PruneScope scope);
const char* to_string(PruneMode mode);

struct ModelConfig {
  std::size_t vocab_size = 40;
  std::size_t model_dim = 64;
  std::size_t heads = 2;
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 4;
  std::size_t ffn_hidden = 256;
  std::size_t expansion = 4;
  std::size_t out_dim = 16;
  std::size_t style_dim = 8;
  PruneScope prune_scope = PruneScope::kDecoderOnly;

  std::size_t head_dim() const { return model_dim / heads; }
  bool encoder_pruned() const { return prune_scope == PruneScope::kEncoderOnly || prune_scope == PruneScope::kBoth; }
  bool decoder_pruned() const { return prune_scope == PruneScope::kDecoderOnly || prune_scope == PruneScope::kBoth; }
  /// Encoder layers in scope come first, then decoder layers.
  std::size_t pruned_layer_count() const;
  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct FeedForwardParams {
  Tensor w1, b1;  // [D, F], [F]
  Tensor w2, b2;  // [F, D], [D]
};

struct FFTBlockParams {
  AttentionParams attention;
  LayerNormParams norm1;
  LayerNormParams norm2;
  FeedForwardParams ffn;
};

struct ModelParams {
  Tensor token_embedding;  // [V, D]
  Tensor style_proj;       // [S, D]
  std::vector<FFTBlockParams> encoder;
  std::vector<FFTBlockParams> decoder;
  Tensor out_proj;  // [D, out]
  Tensor out_bias;  // [out]
  /// One scalar per pruned layer; present only for differentiable pruning.
  std::vector<Tensor> thresholds;

  /// Every trainable tensor except the thresholds, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_weights() const;
  std::size_t weight_count() const;
};

/// Seeded initialization: matrices uniform in +-1/sqrt(fan_in), biases and
/// norm shifts 0, norm gains 1, embedding rows uniform in [-1, 1],
/// thresholds 0 (differentiable mode only).
ModelParams init_params(const ModelConfig& config, PruneMode mode, std::uint64_t seed);

struct PruneContext {
  PruneMode mode = PruneMode::kNone;
  MaskStage stage = MaskStage::kHard;
  double temperature = 0.01;
};

/// Padded token batch. tokens is [batch, max_tokens] row-major; padding uses id 0.
struct ModelInput {
  std::vector<std::size_t> tokens;
  std::size_t batch = 0;
  std::size_t max_tokens = 0;
  std::vector<std::size_t> token_len;
  Tensor style;  // [batch, style_dim]
};

struct BlockTrace {
  AttentionProbs probs;
  std::optional<SparseMask> mask;  // applied mask; empty when unpruned
  bool pruned = false;
  double relu_margin = 0.0;  // smallest |FFN pre-activation| at valid positions
};

struct ForwardOutput {
  Tensor frames;       // [B, max_tokens * r, out_dim]
  Tensor encoder_out;  // [B, max_tokens, D]
  std::vector<BlockTrace> encoder_trace;
  std::vector<BlockTrace> decoder_trace;
  std::vector<std::size_t> frame_len;

  /// Traces of pruned layers in threshold order.
  std::vector<const BlockTrace*> pruned_traces() const;
};

/// Sinusoidal positional table [n, dim].
Tensor positional_encoding(std::size_t n, std::size_t dim);

/// Token embedding + positional encoding + linear style projection at every
/// position. Throws RangeError for token ids outside the vocabulary.
Tensor embed_and_condition(const ModelInput& input, const ModelParams& params, const ModelConfig& config);

/// Repeats every position r times in order.
Tensor length_expand(const Tensor& h, std::size_t r);

/// Pre-norm block: y = x + Attn(LN(x)), out = y + FFN(LN(y)). When `pruned`,
/// the attention mask follows ctx: vanilla uses the head-union mean mask,
/// differentiable uses the soft or hard threshold mask of `theta`.
Tensor fft_block(const Tensor& x, std::span<const std::size_t> valid_len, const FFTBlockParams& params, bool pruned,
                 const PruneContext& ctx, const Tensor* theta, BlockTrace* trace = nullptr);

ForwardOutput model_forward(const ModelInput& input, const ModelParams& params, const ModelConfig& config,
                            const PruneContext& ctx);

}  // namespace spattn
