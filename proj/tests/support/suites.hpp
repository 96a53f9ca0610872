#pragma once

// Randomized suites shared by the unit tests and the acceptance gate: mask
// invariants and agreement with the scalar-loop reference.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reference.hpp"
#include "spattn/attention.hpp"
#include "spattn/model.hpp"
#include "spattn/random.hpp"

namespace spattn::suites {

struct Outcome {
  std::string name;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double worst = 0.0;  // largest observed violation or difference
  bool passed() const { return failures == 0; }
};

struct Instance {
  Tensor x;  // [B, N, D]
  AttentionParams params;
  std::vector<std::size_t> valid_len;
};

inline Tensor random_tensor(Rng& rng, Shape shape, double scale, bool grad = false) {
  std::vector<double> v(numel_of(shape));
  for (auto& e : v) e = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

inline AttentionParams random_attention(Rng& rng, std::size_t dim, std::size_t heads, std::size_t head_dim,
                                        double scale) {
  AttentionParams p;
  p.heads = heads;
  p.head_dim = head_dim;
  p.w_q = random_tensor(rng, {dim, heads * head_dim}, scale);
  p.w_k = random_tensor(rng, {dim, heads * head_dim}, scale);
  p.w_v = random_tensor(rng, {dim, heads * head_dim}, 1.0 / std::sqrt(static_cast<double>(dim)));
  p.w_o = random_tensor(rng, {heads * head_dim, dim}, 1.0 / std::sqrt(static_cast<double>(heads * head_dim)));
  return p;
}

/// Batch of 1-3 sequences, 1-3 heads, length up to max_len with random
/// padding. Logit scale varies so that rows range from flat to peaked.
inline Instance random_instance(Rng& rng, std::size_t max_len, std::size_t max_heads, std::size_t max_batch) {
  Instance in;
  const std::size_t batch = 1 + rng.below(max_batch);
  const std::size_t heads = 1 + rng.below(max_heads);
  const std::size_t head_dim = 1 + rng.below(4);
  const std::size_t n = 1 + rng.below(max_len);
  const std::size_t dim = heads * head_dim;
  const double scales[] = {0.1, 0.5, 1.0, 2.0};
  in.params = random_attention(rng, dim, heads, head_dim, scales[rng.below(4)]);
  in.x = random_tensor(rng, {batch, n, dim}, 1.0);
  for (std::size_t b = 0; b < batch; ++b) in.valid_len.push_back(1 + rng.below(n));
  return in;
}

template <class F>
void for_valid(const AttentionProbs& a, F&& f) {
  const std::size_t n = a.length();
  for (std::size_t b = 0; b < a.batch(); ++b) {
    for (std::size_t h = 0; h < a.heads(); ++h) {
      for (std::size_t i = 0; i < a.valid_len[b]; ++i) f(b, h, i, ((b * a.heads() + h) * n + i) * n, a.valid_len[b]);
    }
  }
}

/// The five mask invariants, each over `instances` random cases.
inline std::vector<Outcome> mask_properties(std::uint64_t seed, std::size_t instances) {
  constexpr double kT = 0.01;
  Outcome nonempty{"vanilla_rows_nonempty"}, superset{"or_mask_superset_of_heads"},
      monotone{"hard_mask_monotone_in_theta"}, agree{"soft_hard_agree_beyond_10T"},
      identity{"zero_theta_matches_unmasked"};
  Rng rng(seed, Stream::kGradcheck, 101);

  for (std::size_t t = 0; t < instances; ++t) {
    const Instance in = random_instance(rng, 12, 3, 3);
    const AttentionProbs a = attention_probs(in.x, in.params, in.valid_len);
    auto av = a.probs.data();

    const SparseMask per_head = vanilla_mask(a);
    const SparseMask combined = or_across_heads(per_head);
    auto ph = per_head.values.data();
    auto oc = combined.values.data();
    bool empty_row = false, not_superset = false;
    for_valid(a, [&](std::size_t, std::size_t, std::size_t, std::size_t row, std::size_t len) {
      double active = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        active += ph[row + j];
        not_superset = not_superset || (ph[row + j] == 1.0 && oc[row + j] != 1.0);
      }
      empty_row = empty_row || active < 1.0;
    });
    ++nonempty.instances;
    nonempty.failures += empty_row ? 1 : 0;
    ++superset.instances;
    superset.failures += not_superset ? 1 : 0;

    const double lo = rng.uniform(0.0, 2.0), hi = lo + rng.uniform(0.0, 2.0);
    const SparseMask small_mask = hard_mask(a, lo);
    const SparseMask large_mask = hard_mask(a, hi);
    auto small = small_mask.values.data();
    auto large = large_mask.values.data();
    bool grew = false;
    for (std::size_t k = 0; k < small.size(); ++k) grew = grew || (large[k] == 1.0 && small[k] != 1.0);
    ++monotone.instances;
    monotone.failures += grew ? 1 : 0;

    const double theta = rng.uniform(0.0, 2.0);
    const SparseMask soft = soft_mask(a, Tensor::scalar(theta), kT);
    const SparseMask hard = hard_mask(a, theta);
    auto sv = soft.values.data();
    auto hv = hard.values.data();
    double gap = 0.0;
    for_valid(a, [&](std::size_t, std::size_t, std::size_t, std::size_t row, std::size_t len) {
      const double cut = theta / static_cast<double>(len);
      for (std::size_t j = 0; j < len; ++j) {
        if (std::abs(av[row + j] - cut) >= 10.0 * kT) gap = std::max(gap, std::abs(sv[row + j] - hv[row + j]));
      }
    });
    ++agree.instances;
    agree.worst = std::max(agree.worst, gap);
    agree.failures += gap > 5e-5 ? 1 : 0;

    const SparseMask zero = hard_mask(a, 0.0);
    const Tensor masked_out = attend_values(a, in.x, in.params, &zero);
    const Tensor plain_out = attend_values(a, in.x, in.params, nullptr);
    auto masked = masked_out.data();
    auto plain = plain_out.data();
    const std::size_t n = a.length(), dim = in.x.dim(2);
    bool differs = false;
    for (std::size_t b = 0; b < a.batch(); ++b) {
      for (std::size_t k = b * n * dim; k < (b * n + in.valid_len[b]) * dim; ++k) {
        differs = differs || masked[k] != plain[k];
      }
    }
    ++identity.instances;
    identity.failures += differs ? 1 : 0;
  }
  return {nonempty, superset, monotone, agree, identity};
}

inline FFTBlockParams random_block(Rng& rng, std::size_t dim, std::size_t heads, std::size_t head_dim,
                                   std::size_t hidden) {
  FFTBlockParams p;
  p.attention = random_attention(rng, dim, heads, head_dim, 1.0);
  p.norm1 = {random_tensor(rng, {dim}, 0.3), random_tensor(rng, {dim}, 0.3)};
  p.norm2 = {random_tensor(rng, {dim}, 0.3), random_tensor(rng, {dim}, 0.3)};
  for (auto* g : {&p.norm1.gain, &p.norm2.gain}) {
    for (auto& v : g->mutable_data()) v += 1.0;
  }
  p.ffn.w1 = random_tensor(rng, {dim, hidden}, 1.0 / std::sqrt(static_cast<double>(dim)));
  p.ffn.b1 = random_tensor(rng, {hidden}, 0.1);
  p.ffn.w2 = random_tensor(rng, {hidden, dim}, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.ffn.b2 = random_tensor(rng, {dim}, 0.1);
  return p;
}

/// Largest |library - reference| over the valid rows of one sequence.
inline double max_diff(std::span<const double> lib, const reference::Matrix& ref, std::size_t len) {
  const std::size_t dim = ref.front().size();
  double worst = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < dim; ++j) worst = std::max(worst, std::abs(lib[i * dim + j] - ref[i][j]));
  }
  return worst;
}

/// Attention under every mask kind and a full block under each prune mode,
/// on single sequences with N <= 6 and H <= 2.
inline std::vector<Outcome> oracle_equivalence(std::uint64_t seed, std::size_t instances, double tol) {
  constexpr double kT = 0.01;
  using reference::Mask;
  const Mask kinds[] = {Mask::kNone, Mask::kVanilla, Mask::kHard, Mask::kSoft};
  const char* names[] = {"none", "vanilla", "hard", "soft"};
  std::vector<Outcome> att(4), block(4);
  for (std::size_t k = 0; k < 4; ++k) {
    att[k].name = std::string("attention_") + names[k];
    block[k].name = std::string("fft_block_") + names[k];
  }
  Rng rng(seed, Stream::kGradcheck, 202);

  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t heads = 1 + rng.below(2), head_dim = 1 + rng.below(4);
    const std::size_t dim = heads * head_dim, n = 1 + rng.below(6), len = 1 + rng.below(n);
    const FFTBlockParams p = random_block(rng, dim, heads, head_dim, 2 + rng.below(8));
    const Tensor x = random_tensor(rng, {1, n, dim}, 1.0);
    const reference::Matrix xm = reference::to_matrix(x, n, dim);
    const double theta = rng.uniform(0.0, 1.5);
    const std::size_t lens[1] = {len};
    const Tensor theta_t = Tensor::scalar(theta);

    for (std::size_t k = 0; k < 4; ++k) {
      const AttentionProbs a = attention_probs(x, p.attention, lens);
      std::optional<SparseMask> mask;
      if (kinds[k] == Mask::kVanilla) mask = or_across_heads(vanilla_mask(a));
      if (kinds[k] == Mask::kHard) mask = hard_mask(a, theta);
      if (kinds[k] == Mask::kSoft) mask = soft_mask(a, theta_t, kT);
      const Tensor lib = attend_values(a, x, p.attention, mask ? &*mask : nullptr);
      const double d = max_diff(lib.data(), reference::attention(xm, p.attention, len, kinds[k], theta, kT), len);
      ++att[k].instances;
      att[k].worst = std::max(att[k].worst, d);
      att[k].failures += d <= tol ? 0 : 1;

      PruneContext ctx;
      ctx.temperature = kT;
      ctx.mode = kinds[k] == Mask::kNone      ? PruneMode::kNone
                 : kinds[k] == Mask::kVanilla ? PruneMode::kVanilla
                                              : PruneMode::kDifferentiable;
      ctx.stage = kinds[k] == Mask::kSoft ? MaskStage::kSoft : MaskStage::kHard;
      const Tensor out = spattn::fft_block(x, lens, p, true, ctx, &theta_t);
      const double e = max_diff(out.data(), reference::fft_block(xm, p, len, kinds[k], theta, kT), len);
      ++block[k].instances;
      block[k].worst = std::max(block[k].worst, e);
      block[k].failures += e <= tol ? 0 : 1;
    }
  }
  att.insert(att.end(), block.begin(), block.end());
  return att;
}

}  // namespace spattn::suites
