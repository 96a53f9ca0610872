#include "spattn/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spattn/error.hpp"
#include "spattn/random.hpp"

namespace spattn {

namespace {

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor matrix(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return uniform_tensor(rng, {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

FFTBlockParams init_block(Rng& rng, const ModelConfig& c) {
  FFTBlockParams p;
  const std::size_t inner = c.heads * c.head_dim();
  p.attention.heads = c.heads;
  p.attention.head_dim = c.head_dim();
  p.attention.w_q = matrix(rng, c.model_dim, inner);
  p.attention.w_k = matrix(rng, c.model_dim, inner);
  p.attention.w_v = matrix(rng, c.model_dim, inner);
  p.attention.w_o = matrix(rng, inner, c.model_dim);
  p.norm1 = {Tensor::full({c.model_dim}, 1.0, true), Tensor::zeros({c.model_dim}, true)};
  p.norm2 = {Tensor::full({c.model_dim}, 1.0, true), Tensor::zeros({c.model_dim}, true)};
  p.ffn.w1 = matrix(rng, c.model_dim, c.ffn_hidden);
  p.ffn.b1 = Tensor::zeros({c.ffn_hidden}, true);
  p.ffn.w2 = matrix(rng, c.ffn_hidden, c.model_dim);
  p.ffn.b2 = Tensor::zeros({c.model_dim}, true);
  return p;
}

void push_block(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const FFTBlockParams& b) {
  out.emplace_back(prefix + ".attention.w_q", b.attention.w_q);
  out.emplace_back(prefix + ".attention.w_k", b.attention.w_k);
  out.emplace_back(prefix + ".attention.w_v", b.attention.w_v);
  out.emplace_back(prefix + ".attention.w_o", b.attention.w_o);
  out.emplace_back(prefix + ".norm1.gain", b.norm1.gain);
  out.emplace_back(prefix + ".norm1.bias", b.norm1.bias);
  out.emplace_back(prefix + ".norm2.gain", b.norm2.gain);
  out.emplace_back(prefix + ".norm2.bias", b.norm2.bias);
  out.emplace_back(prefix + ".ffn.w1", b.ffn.w1);
  out.emplace_back(prefix + ".ffn.b1", b.ffn.b1);
  out.emplace_back(prefix + ".ffn.w2", b.ffn.w2);
  out.emplace_back(prefix + ".ffn.b2", b.ffn.b2);
}

// Position-wise ReLU network. `kink` receives the smallest |pre-activation|
// over valid positions.
Tensor feed_forward(const Tensor& x, const FeedForwardParams& p, std::span<const std::size_t> valid_len,
                    double* kink) {
  const Tensor pre = add(matmul(x, p.w1), p.b1);
  if (kink != nullptr) {
    const std::size_t n = pre.dim(1), hidden = pre.dim(2);
    auto v = pre.data();
    *kink = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < valid_len.size(); ++b) {
      for (std::size_t k = b * n * hidden; k < (b * n + valid_len[b]) * hidden; ++k) {
        *kink = std::min(*kink, std::abs(v[k]));
      }
    }
  }
  return add(matmul(relu(pre), p.w2), p.b2);
}

}  // namespace

const char* to_string(PruneScope scope) {
  switch (scope) {
    case PruneScope::kNone:
      return "none";
    case PruneScope::kDecoderOnly:
      return "decoder_only";
    case PruneScope::kEncoderOnly:
      return "encoder_only";
    case PruneScope::kBoth:
      return "both";
  }
  return "unknown";
}

const char* to_string(PruneMode mode) {
  switch (mode) {
    case PruneMode::kNone:
      return "none";
    case PruneMode::kVanilla:
      return "vanilla";
    case PruneMode::kDifferentiable:
      return "differentiable";
  }
  return "unknown";
}

std::size_t ModelConfig::pruned_layer_count() const {
  return (encoder_pruned() ? enc_layers : 0) + (decoder_pruned() ? dec_layers : 0);
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + ": must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(model_dim, "model_dim");
  positive(heads, "heads");
  positive(ffn_hidden, "ffn_hidden");
  positive(expansion, "expansion");
  positive(out_dim, "out_dim");
  positive(style_dim, "style_dim");
  if (model_dim % heads != 0) throw ConfigError("model.model_dim: must be divisible by model.heads");
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_weights() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("style_proj", style_proj);
  for (std::size_t i = 0; i < encoder.size(); ++i) push_block(out, "encoder." + std::to_string(i), encoder[i]);
  for (std::size_t i = 0; i < decoder.size(); ++i) push_block(out, "decoder." + std::to_string(i), decoder[i]);
  out.emplace_back("out_proj", out_proj);
  out.emplace_back("out_bias", out_bias);
  return out;
}

std::size_t ModelParams::weight_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_weights()) n += t.numel();
  return n;
}

ModelParams init_params(const ModelConfig& config, PruneMode mode, std::uint64_t seed) {
  config.validate();
  Rng rng(seed, Stream::kInit);
  ModelParams p;
  p.token_embedding = uniform_tensor(rng, {config.vocab_size, config.model_dim}, 1.0);
  p.style_proj = matrix(rng, config.style_dim, config.model_dim);
  for (std::size_t i = 0; i < config.enc_layers; ++i) p.encoder.push_back(init_block(rng, config));
  for (std::size_t i = 0; i < config.dec_layers; ++i) p.decoder.push_back(init_block(rng, config));
  p.out_proj = matrix(rng, config.model_dim, config.out_dim);
  p.out_bias = Tensor::zeros({config.out_dim}, true);
  if (mode == PruneMode::kDifferentiable) {
    for (std::size_t i = 0; i < config.pruned_layer_count(); ++i) p.thresholds.push_back(Tensor::scalar(0.0, true));
  }
  return p;
}

std::vector<const BlockTrace*> ForwardOutput::pruned_traces() const {
  std::vector<const BlockTrace*> out;
  for (const auto& t : encoder_trace) {
    if (t.pruned) out.push_back(&t);
  }
  for (const auto& t : decoder_trace) {
    if (t.pruned) out.push_back(&t);
  }
  return out;
}

Tensor positional_encoding(std::size_t n, std::size_t dim) {
  std::vector<double> v(n * dim);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double pair = static_cast<double>(i / 2 * 2);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, pair / static_cast<double>(dim));
      v[pos * dim + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({n, dim}, std::move(v));
}

Tensor embed_and_condition(const ModelInput& input, const ModelParams& params, const ModelConfig& config) {
  if (input.tokens.size() != input.batch * input.max_tokens || input.token_len.size() != input.batch) {
    throw DimensionError("model input: token buffer does not match batch layout");
  }
  if (input.style.shape() != Shape{input.batch, config.style_dim}) {
    throw DimensionError("model input: style must be " + shape_str({input.batch, config.style_dim}) + ", got " +
                         shape_str(input.style.shape()));
  }
  for (auto id : input.tokens) {
    if (id >= config.vocab_size) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
    }
  }
  const Tensor emb = embedding(params.token_embedding, input.tokens, {input.batch, input.max_tokens});
  const Tensor style = expand_rows(matmul(input.style, params.style_proj), input.max_tokens);
  return add(add(emb, positional_encoding(input.max_tokens, config.model_dim)), style);
}

Tensor length_expand(const Tensor& h, std::size_t r) { return repeat_rows(h, r); }

Tensor fft_block(const Tensor& x, std::span<const std::size_t> valid_len, const FFTBlockParams& params, bool pruned,
                 const PruneContext& ctx, const Tensor* theta, BlockTrace* trace) {
  const Tensor h = layer_norm(x, params.norm1.gain, params.norm1.bias);
  AttentionProbs probs = attention_probs(h, params.attention, valid_len);

  std::optional<SparseMask> mask;
  const bool masked = pruned && ctx.mode != PruneMode::kNone;
  if (masked && ctx.mode == PruneMode::kVanilla) {
    mask = or_across_heads(vanilla_mask(probs));
  } else if (masked) {
    if (theta == nullptr || !theta->defined()) throw ContractError("fft_block: differentiable pruning needs theta");
    mask = ctx.stage == MaskStage::kSoft ? soft_mask(probs, *theta, ctx.temperature)
                                         : hard_mask(probs, theta->item());
  }

  const Tensor y = add(x, attend_values(probs, h, params.attention, mask ? &*mask : nullptr));
  double kink = 0.0;
  const Tensor out = add(y, feed_forward(layer_norm(y, params.norm2.gain, params.norm2.bias), params.ffn, valid_len,
                                         trace ? &kink : nullptr));
  if (trace != nullptr) {
    trace->probs = std::move(probs);
    trace->mask = std::move(mask);
    trace->pruned = masked;
    trace->relu_margin = kink;
  }
  return out;
}

ForwardOutput model_forward(const ModelInput& input, const ModelParams& params, const ModelConfig& config,
                            const PruneContext& ctx) {
  if (ctx.mode == PruneMode::kDifferentiable && params.thresholds.size() != config.pruned_layer_count()) {
    throw ContractError("model_forward: expected " + std::to_string(config.pruned_layer_count()) +
                        " thresholds, found " + std::to_string(params.thresholds.size()));
  }
  ForwardOutput out;
  std::size_t next_theta = 0;
  auto theta_for = [&](bool pruned) -> const Tensor* {
    if (!pruned || ctx.mode != PruneMode::kDifferentiable) return nullptr;
    return &params.thresholds[next_theta++];
  };

  Tensor h = embed_and_condition(input, params, config);
  out.encoder_trace.resize(params.encoder.size());
  for (std::size_t l = 0; l < params.encoder.size(); ++l) {
    const bool pruned = config.encoder_pruned();
    h = fft_block(h, input.token_len, params.encoder[l], pruned, ctx, theta_for(pruned), &out.encoder_trace[l]);
  }
  out.encoder_out = h;

  const std::size_t r = config.expansion;
  for (auto len : input.token_len) out.frame_len.push_back(len * r);
  h = add(length_expand(h, r), positional_encoding(input.max_tokens * r, config.model_dim));
  out.decoder_trace.resize(params.decoder.size());
  for (std::size_t l = 0; l < params.decoder.size(); ++l) {
    const bool pruned = config.decoder_pruned();
    h = fft_block(h, out.frame_len, params.decoder[l], pruned, ctx, theta_for(pruned), &out.decoder_trace[l]);
  }
  out.frames = add(matmul(h, params.out_proj), params.out_bias);
  return out;
}

}  // namespace spattn
