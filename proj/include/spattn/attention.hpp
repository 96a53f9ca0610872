#pragma once

// Multi-head self-attention with pruning masks.
//
// Activations are batched as [B, N, model_dim]; attention probabilities and
// masks as [B, H, N, N]. Each sequence b has a valid (unpadded) length; a
// pair (i, j) is valid when both i and j are below it. Thresholds that scale
// with sequence length use the valid length.

#include <cstddef>
#include <span>
#include <vector>

#include "spattn/tensor.hpp"

namespace spattn {

struct AttentionParams {
  Tensor w_q;  // [model_dim, H*d]
  Tensor w_k;  // [model_dim, H*d]
  Tensor w_v;  // [model_dim, H*d]
  Tensor w_o;  // [H*d, model_dim]
  std::size_t heads = 1;
  std::size_t head_dim = 1;

  /// Throws DimensionError unless every weight fits model_dim, heads, head_dim.
  void validate(std::size_t model_dim) const;
};

struct AttentionProbs {
  Tensor probs;                      // [B, H, N, N]
  std::vector<std::size_t> valid_len;  // one per sequence

  std::size_t batch() const { return probs.dim(0); }
  std::size_t heads() const { return probs.dim(1); }
  std::size_t length() const { return probs.dim(2); }
};

enum class MaskKind { kVanilla, kOrCombined, kHard, kSoft };

const char* to_string(MaskKind kind);

struct SparseMask {
  Tensor values;  // [B, H, N, N]; head-shared kinds store every head
  MaskKind kind = MaskKind::kHard;

  bool binary_kind() const { return kind != MaskKind::kSoft; }
};

/// Softmax of scaled query-key products per head, with -inf logits on padded
/// keys. `x` is [B, N, model_dim], or [N, model_dim] for a single sequence.
AttentionProbs attention_probs(const Tensor& x, const AttentionParams& params,
                               std::span<const std::size_t> valid_len);
AttentionProbs attention_probs(const Tensor& x, const AttentionParams& params, std::size_t valid_len);

/// Per-head mask keeping entries at or above their row's mean over valid keys.
/// Constant: carries no gradient.
SparseMask vanilla_mask(const AttentionProbs& a);

/// Elementwise union of same-shaped binary masks.
SparseMask or_combine(std::span<const SparseMask> masks);
/// Union over the head axis, written back to every head.
SparseMask or_across_heads(const SparseMask& per_head);

/// Binary mask: entry active iff A >= theta / valid_len. Constant.
SparseMask hard_mask(const AttentionProbs& a, double theta);

/// sigmoid((A - theta / valid_len) / temperature), differentiable in both A
/// and the scalar tensor theta.
SparseMask soft_mask(const AttentionProbs& a, const Tensor& theta, double temperature);

/// (mask * A) V per head without renormalization, heads concatenated and
/// projected by W_o. `mask` may be null for plain attention.
Tensor attend_values(const AttentionProbs& a, const Tensor& x, const AttentionParams& params,
                     const SparseMask* mask);

/// Convenience composition of attention_probs and attend_values.
Tensor masked_attention(const Tensor& x, const AttentionParams& params, std::span<const std::size_t> valid_len,
                        const SparseMask* mask);

/// 1 on valid (i, j) pairs, 0 elsewhere, shaped [B, heads, N, N].
std::vector<double> valid_pairs(std::size_t heads, std::size_t n, std::span<const std::size_t> valid_len);

/// Mean mask value over valid pairs of every head and sequence; the active
/// fraction for binary masks.
double sparsity_of(const SparseMask& mask, std::span<const std::size_t> valid_len);

/// Differentiable per-head mean over valid pairs pooled across the batch; [H].
Tensor head_means(const SparseMask& mask, std::span<const std::size_t> valid_len);

/// True when every valid entry is exactly 0 or 1.
bool is_binary(const SparseMask& mask, std::span<const std::size_t> valid_len);
/// True when every valid entry lies strictly inside (0, 1).
bool in_open_unit_interval(const SparseMask& mask, std::span<const std::size_t> valid_len);

}  // namespace spattn
