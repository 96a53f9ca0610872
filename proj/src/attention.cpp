#include "spattn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spattn/error.hpp"

namespace spattn {

namespace {

void check_lengths(std::span<const std::size_t> valid_len, std::size_t batch, std::size_t n) {
  if (valid_len.size() != batch) {
    throw DimensionError("attention: " + std::to_string(valid_len.size()) + " valid lengths for batch of " +
                         std::to_string(batch));
  }
  for (auto len : valid_len) {
    if (len == 0) throw ContractError("attention: empty sequence (valid_len == 0)");
    if (len > n) {
      throw DimensionError("attention: valid_len " + std::to_string(len) + " exceeds sequence length " +
                           std::to_string(n));
    }
  }
}

void check_mask_shape(const SparseMask& mask, const AttentionProbs& a) {
  if (mask.values.shape() != a.probs.shape()) {
    throw DimensionError("mask shape " + shape_str(mask.values.shape()) + " does not match attention " +
                         shape_str(a.probs.shape()));
  }
}

// Calls fn(flat_index, row_len) for every valid row (b, h, i).
template <class Fn>
void for_valid_rows(std::size_t batch, std::size_t heads, std::size_t n, std::span<const std::size_t> valid_len,
                    Fn fn) {
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = valid_len[b];
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) fn(((b * heads + h) * n + i) * n, len);
    }
  }
}

}  // namespace

const char* to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::kVanilla:
      return "vanilla";
    case MaskKind::kOrCombined:
      return "or_combined";
    case MaskKind::kHard:
      return "hard";
    case MaskKind::kSoft:
      return "soft";
  }
  return "unknown";
}

void AttentionParams::validate(std::size_t model_dim) const {
  const std::size_t inner = heads * head_dim;
  const Shape in_shape{model_dim, inner};
  if (heads == 0 || head_dim == 0) throw DimensionError("attention: heads and head_dim must be positive");
  for (const Tensor* w : {&w_q, &w_k, &w_v}) {
    if (!w->defined() || w->shape() != in_shape) {
      throw DimensionError("attention: projection weight must be " + shape_str(in_shape) +
                           (w->defined() ? ", got " + shape_str(w->shape()) : std::string()));
    }
  }
  if (!w_o.defined() || w_o.shape() != Shape{inner, model_dim}) {
    throw DimensionError("attention: output weight must be " + shape_str({inner, model_dim}));
  }
}

AttentionProbs attention_probs(const Tensor& x, const AttentionParams& params, std::span<const std::size_t> valid_len) {
  if (x.rank() != 3) throw DimensionError("attention_probs: expected [B, N, D], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), n = x.dim(1);
  params.validate(x.dim(2));
  check_lengths(valid_len, batch, n);

  const Tensor q = split_heads(matmul(x, params.w_q), params.heads);
  const Tensor k = split_heads(matmul(x, params.w_k), params.heads);
  Tensor logits = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(params.head_dim)));

  const bool padded = std::any_of(valid_len.begin(), valid_len.end(), [n](auto len) { return len < n; });
  if (padded) {
    std::vector<double> bias(batch * params.heads * n * n, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t row = 0; row < params.heads * n; ++row) {
        double* r = bias.data() + (b * params.heads * n + row) * n;
        std::fill(r + valid_len[b], r + n, -std::numeric_limits<double>::infinity());
      }
    }
    logits = add(logits, Tensor::from(logits.shape(), std::move(bias)));
  }
  return {softmax_rows(logits), std::vector<std::size_t>(valid_len.begin(), valid_len.end())};
}

AttentionProbs attention_probs(const Tensor& x, const AttentionParams& params, std::size_t valid_len) {
  if (x.rank() != 2) throw DimensionError("attention_probs: expected [N, D], got " + shape_str(x.shape()));
  const std::size_t lens[1] = {valid_len};
  return attention_probs(reshape(x, {1, x.dim(0), x.dim(1)}), params, lens);
}

SparseMask vanilla_mask(const AttentionProbs& a) {
  const std::size_t batch = a.batch(), heads = a.heads(), n = a.length();
  auto av = a.probs.data();
  std::vector<double> out(av.size(), 0.0);
  for_valid_rows(batch, heads, n, a.valid_len, [&](std::size_t row, std::size_t len) {
    double total = 0.0;
    double row_max = av[row];
    for (std::size_t j = 0; j < len; ++j) {
      total += av[row + j];
      row_max = std::max(row_max, av[row + j]);
    }
    // A row mean cannot exceed the row maximum; the clamp absorbs rounding.
    const double mean = std::min(total / static_cast<double>(len), row_max);
    for (std::size_t j = 0; j < len; ++j) out[row + j] = av[row + j] >= mean ? 1.0 : 0.0;
  });
  return {Tensor::from(a.probs.shape(), std::move(out)), MaskKind::kVanilla};
}

SparseMask or_combine(std::span<const SparseMask> masks) {
  if (masks.empty()) throw ContractError("or_combine: no masks to combine");
  const Shape& shape = masks.front().values.shape();
  std::vector<double> out(masks.front().values.numel(), 0.0);
  for (const auto& m : masks) {
    if (!m.binary_kind()) throw ContractError("or_combine: soft masks cannot be combined");
    if (m.values.shape() != shape) {
      throw DimensionError("or_combine: mask shapes " + shape_str(shape) + " and " + shape_str(m.values.shape()) +
                           " differ");
    }
    auto v = m.values.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] != 0.0 || v[i] != 0.0) ? 1.0 : 0.0;
  }
  return {Tensor::from(shape, std::move(out)), MaskKind::kOrCombined};
}

SparseMask or_across_heads(const SparseMask& per_head) {
  const Tensor& v = per_head.values;
  if (v.rank() != 4) throw DimensionError("or_across_heads: expected [B, H, N, N], got " + shape_str(v.shape()));
  if (!per_head.binary_kind()) throw ContractError("or_across_heads: soft masks cannot be combined");
  const std::size_t batch = v.dim(0), heads = v.dim(1), plane = v.dim(2) * v.dim(3);
  auto in = v.data();
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      bool any = false;
      for (std::size_t h = 0; h < heads; ++h) any = any || in[(b * heads + h) * plane + p] != 0.0;
      for (std::size_t h = 0; h < heads; ++h) out[(b * heads + h) * plane + p] = any ? 1.0 : 0.0;
    }
  }
  return {Tensor::from(v.shape(), std::move(out)), MaskKind::kOrCombined};
}

SparseMask hard_mask(const AttentionProbs& a, double theta) {
  if (!std::isfinite(theta)) throw ContractError("hard_mask: theta must be finite");
  const std::size_t batch = a.batch(), heads = a.heads(), n = a.length();
  auto av = a.probs.data();
  std::vector<double> out(av.size(), 0.0);
  for_valid_rows(batch, heads, n, a.valid_len, [&](std::size_t row, std::size_t len) {
    const double threshold = theta / static_cast<double>(len);
    for (std::size_t j = 0; j < len; ++j) out[row + j] = av[row + j] >= threshold ? 1.0 : 0.0;
  });
  return {Tensor::from(a.probs.shape(), std::move(out)), MaskKind::kHard};
}

SparseMask soft_mask(const AttentionProbs& a, const Tensor& theta, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("soft_mask: temperature must be positive");
  if (theta.numel() != 1) throw DimensionError("soft_mask: theta must be a scalar, got " + shape_str(theta.shape()));
  const std::size_t batch = a.batch(), per_seq = a.heads() * a.length() * a.length();
  std::vector<double> inv_len(a.probs.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill_n(inv_len.begin() + b * per_seq, per_seq, 1.0 / static_cast<double>(a.valid_len[b]));
  }
  const Tensor threshold = mul(Tensor::from(a.probs.shape(), std::move(inv_len)), theta);
  return {sigmoid(scale(sub(a.probs, threshold), 1.0 / temperature)), MaskKind::kSoft};
}

Tensor attend_values(const AttentionProbs& a, const Tensor& x, const AttentionParams& params, const SparseMask* mask) {
  if (x.rank() != 3) throw DimensionError("attend_values: expected [B, N, D], got " + shape_str(x.shape()));
  params.validate(x.dim(2));
  const Tensor v = split_heads(matmul(x, params.w_v), params.heads);
  Tensor weights = a.probs;
  if (mask != nullptr) {
    check_mask_shape(*mask, a);
    weights = mul(a.probs, mask->values);
  }
  return matmul(merge_heads(matmul(weights, v)), params.w_o);
}

Tensor masked_attention(const Tensor& x, const AttentionParams& params, std::span<const std::size_t> valid_len,
                        const SparseMask* mask) {
  return attend_values(attention_probs(x, params, valid_len), x, params, mask);
}

std::vector<double> valid_pairs(std::size_t heads, std::size_t n, std::span<const std::size_t> valid_len) {
  std::vector<double> out(valid_len.size() * heads * n * n, 0.0);
  for_valid_rows(valid_len.size(), heads, n, valid_len, [&](std::size_t row, std::size_t len) {
    std::fill_n(out.begin() + row, len, 1.0);
  });
  return out;
}

double sparsity_of(const SparseMask& mask, std::span<const std::size_t> valid_len) {
  const Tensor& v = mask.values;
  const std::size_t batch = v.dim(0), heads = v.dim(1), n = v.dim(2);
  check_lengths(valid_len, batch, n);
  auto mv = v.data();
  double total = 0.0;
  double count = 0.0;
  for_valid_rows(batch, heads, n, valid_len, [&](std::size_t row, std::size_t len) {
    for (std::size_t j = 0; j < len; ++j) total += mv[row + j];
    count += static_cast<double>(len);
  });
  return total / count;
}

Tensor head_means(const SparseMask& mask, std::span<const std::size_t> valid_len) {
  const Tensor& v = mask.values;
  const std::size_t batch = v.dim(0), heads = v.dim(1), n = v.dim(2);
  check_lengths(valid_len, batch, n);
  double pairs = 0.0;
  for (auto len : valid_len) pairs += static_cast<double>(len * len);
  std::vector<double> weights = valid_pairs(heads, n, valid_len);
  for (auto& w : weights) w /= pairs;
  return sum_except(mul(v, Tensor::from(v.shape(), std::move(weights))), 1);
}

bool is_binary(const SparseMask& mask, std::span<const std::size_t> valid_len) {
  const Tensor& v = mask.values;
  auto mv = v.data();
  bool ok = true;
  for_valid_rows(v.dim(0), v.dim(1), v.dim(2), valid_len, [&](std::size_t row, std::size_t len) {
    for (std::size_t j = 0; j < len; ++j) ok = ok && (mv[row + j] == 0.0 || mv[row + j] == 1.0);
  });
  return ok;
}

bool in_open_unit_interval(const SparseMask& mask, std::span<const std::size_t> valid_len) {
  const Tensor& v = mask.values;
  auto mv = v.data();
  bool ok = true;
  for_valid_rows(v.dim(0), v.dim(1), v.dim(2), valid_len, [&](std::size_t row, std::size_t len) {
    for (std::size_t j = 0; j < len; ++j) ok = ok && mv[row + j] > 0.0 && mv[row + j] < 1.0;
  });
  return ok;
}

}  // namespace spattn
