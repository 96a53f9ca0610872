#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "spattn/attention.hpp"
#include "spattn/error.hpp"
#include "support/suites.hpp"

using namespace spattn;

namespace {

// Three identical rows over a length-3 sequence, one head.
AttentionProbs rows_of(std::vector<double> row) {
  std::vector<double> v;
  for (int i = 0; i < 3; ++i) v.insert(v.end(), row.begin(), row.end());
  return {Tensor::from({1, 1, 3, 3}, std::move(v)), {3}};
}

std::vector<double> first_row(const SparseMask& m) {
  auto v = m.values.data();
  return {v[0], v[1], v[2]};
}

AttentionParams zero_query_params(std::size_t dim) {
  Rng rng(4);
  AttentionParams p = suites::random_attention(rng, dim, 1, dim, 1.0);
  p.w_q = Tensor::zeros({dim, dim});
  return p;
}

}  // namespace

TEST(AttentionProbs, ZeroQueriesGiveUniformRowsOverValidKeys) {
  Rng rng(2);
  const std::size_t lens[] = {3, 5};
  auto probs = attention_probs(suites::random_tensor(rng, {2, 5, 4}, 1.0), zero_query_params(4), lens);
  auto v = probs.probs.data();
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_NEAR(v[j], j < 3 ? 1.0 / 3 : 0.0, 1e-15);
    EXPECT_NEAR(v[25 + j], 1.0 / 5, 1e-15);
  }
}

TEST(AttentionProbs, EmptySequenceThrows) {
  Rng rng(2);
  const std::size_t lens[] = {0};
  EXPECT_THROW(attention_probs(suites::random_tensor(rng, {1, 3, 4}, 1.0), zero_query_params(4), lens), Error);
}

TEST(VanillaMask, RowExamples) {
  EXPECT_EQ(first_row(vanilla_mask(rows_of({0.5, 0.3, 0.2}))), (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(first_row(vanilla_mask(rows_of({1.0 / 3, 1.0 / 3, 1.0 / 3}))), (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(first_row(vanilla_mask(rows_of({0.7, 0.2, 0.1}))), (std::vector<double>{1, 0, 0}));
}

TEST(OrCombine, Examples) {
  auto mask = [](std::vector<double> v) { return SparseMask{Tensor::from({1, 1, 1, 3}, std::move(v)), MaskKind::kHard}; };
  std::vector<SparseMask> pair = {mask({1, 0, 0}), mask({0, 1, 0})};
  EXPECT_EQ(first_row(or_combine(pair)), (std::vector<double>{1, 1, 0}));
  std::vector<SparseMask> same = {mask({1, 0, 1}), mask({1, 0, 1})};
  EXPECT_EQ(first_row(or_combine(same)), (std::vector<double>{1, 0, 1}));
  std::vector<SparseMask> ones = {mask({0, 1, 0}), mask({1, 1, 1})};
  EXPECT_EQ(first_row(or_combine(ones)), (std::vector<double>{1, 1, 1}));
  EXPECT_THROW(or_combine(std::vector<SparseMask>{}), ContractError);
}

TEST(HardMask, Examples) {
  EXPECT_EQ(first_row(hard_mask(rows_of({0.5, 0.3, 0.2}), 0.0)), (std::vector<double>{1, 1, 1}));
  // theta 0.9 over length 3 cuts at 0.3.
  EXPECT_EQ(first_row(hard_mask(rows_of({0.5, 0.3, 0.2}), 0.9)), (std::vector<double>{1, 1, 0}));
  EXPECT_EQ(first_row(hard_mask(rows_of({0.5, 0.3, 0.2}), 3.0)), (std::vector<double>{0, 0, 0}));
}

TEST(SoftMask, Examples) {
  const double t = 0.01;
  auto at_cut = soft_mask(rows_of({0.3, 0.5, 0.2}), Tensor::scalar(0.9), t);
  const auto row = first_row(at_cut);
  EXPECT_NEAR(row[0], 0.5, 1e-12);
  EXPECT_NEAR(row[1], 0.9999999979, 1e-10);
  EXPECT_NEAR(row[2], 4.54e-5, 1e-7);
  EXPECT_THROW(soft_mask(rows_of({0.3, 0.5, 0.2}), Tensor::scalar(0.9), 0.0), ContractError);
}

TEST(AttendValues, AllOnesMaskIsBitwiseIdentity) {
  Rng rng(8);
  auto in = suites::random_instance(rng, 6, 2, 2);
  auto a = attention_probs(in.x, in.params, in.valid_len);
  SparseMask ones{Tensor::full(a.probs.shape(), 1.0), MaskKind::kHard};
  auto masked = attend_values(a, in.x, in.params, &ones);
  auto plain = attend_values(a, in.x, in.params, nullptr);
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_EQ(masked.data()[i], plain.data()[i]);
}

TEST(AttendValues, AllZerosMaskGivesZeroOutput) {
  Rng rng(9);
  auto in = suites::random_instance(rng, 6, 2, 2);
  auto a = attention_probs(in.x, in.params, in.valid_len);
  SparseMask zeros{Tensor::zeros(a.probs.shape()), MaskKind::kHard};
  const Tensor out = attend_values(a, in.x, in.params, &zeros);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sparsity, Examples) {
  SparseMask ones{Tensor::full({1, 1, 3, 3}, 1.0), MaskKind::kHard};
  const std::size_t len3[] = {3};
  EXPECT_EQ(sparsity_of(ones, len3), 1.0);
  SparseMask third{Tensor::from({1, 1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), MaskKind::kHard};
  EXPECT_NEAR(sparsity_of(third, len3), 1.0 / 3, 1e-15);
  SparseMask soft{Tensor::from({1, 1, 2, 2}, {0.9, 0.1, 0.5, 0.5}), MaskKind::kSoft};
  const std::size_t len2[] = {2};
  EXPECT_NEAR(sparsity_of(soft, len2), 0.5, 1e-15);
}

TEST(Sparsity, PaddedPairsAreIgnored) {
  // Valid length 2 of 3: only the top-left 2x2 block counts.
  SparseMask m{Tensor::from({1, 1, 3, 3}, {1, 0, 1, 1, 1, 1, 1, 1, 1}), MaskKind::kHard};
  const std::size_t len[] = {2};
  EXPECT_NEAR(sparsity_of(m, len), 0.75, 1e-15);
  EXPECT_TRUE(is_binary(m, len));
  EXPECT_FALSE(in_open_unit_interval(m, len));
}

TEST(HeadMeans, PoolsValidPairsAcrossBatch) {
  // Two heads; sequence 0 has length 1 of 2, sequence 1 length 2.
  std::vector<double> v = {
      0.2, 9, 9, 9,   0.4, 9, 9, 9,              // b0 h0, b0 h1
      0.6, 0.6, 0.6, 0.6, 0.1, 0.1, 0.1, 0.1,    // b1 h0, b1 h1
  };
  SparseMask m{Tensor::from({2, 2, 2, 2}, std::move(v)), MaskKind::kSoft};
  const std::size_t lens[] = {1, 2};
  auto means = head_means(m, lens);
  EXPECT_NEAR(means.data()[0], (0.2 + 4 * 0.6) / 5, 1e-15);
  EXPECT_NEAR(means.data()[1], (0.4 + 4 * 0.1) / 5, 1e-15);
}

TEST(MaskProperties, HoldOnRandomInstances) {
  for (const auto& o : suites::mask_properties(17, 1000)) {
    EXPECT_TRUE(o.passed()) << o.name << ": " << o.failures << " of " << o.instances << " worst " << o.worst;
  }
}

TEST(Oracle, AttentionAndBlockMatchScalarLoops) {
  for (const auto& o : suites::oracle_equivalence(23, 300, 1e-10)) {
    EXPECT_TRUE(o.passed()) << o.name << ": worst " << o.worst;
  }
}
