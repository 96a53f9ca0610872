#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "spattn/error.hpp"
#include "spattn/gradcheck.hpp"
#include "spattn/random.hpp"
#include "spattn/tensor.hpp"

using namespace spattn;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool grad = false) {
  std::vector<double> v(numel_of(shape));
  for (auto& e : v) e = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

void expect_values(const Tensor& t, const std::vector<double>& want, double tol = 1e-15) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.data()[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(Matmul, IdentityLeftFactor) {
  auto a = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2, 2}, {3, 4, 5, 6});
  expect_values(matmul(a, b), {3, 4, 5, 6}, 0.0);
}

TEST(Matmul, DotProduct) {
  auto c = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoopWithBatchBroadcast) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t batch = 1 + rng.below(3), m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6);
    const bool shared_rhs = trial % 2 == 0;
    auto a = random_tensor(rng, {batch, m, k});
    auto b = shared_rhs ? random_tensor(rng, {k, n}) : random_tensor(rng, {batch, k, n});
    auto c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{batch, m, n}));
    for (std::size_t s = 0; s < batch; ++s) {
      const std::size_t rhs = shared_rhs ? 0 : s * k * n;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double want = 0.0;
          for (std::size_t t = 0; t < k; ++t) want += a.data()[(s * m + i) * k + t] * b.data()[rhs + t * n + j];
          EXPECT_NEAR(c.data()[(s * m + i) * n + j], want, 1e-13);
        }
      }
    }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 5]"), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformLogits) { expect_values(softmax_rows(Tensor::from({3}, {0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3}); }

TEST(Softmax, LargeLogitDoesNotOverflow) {
  auto p = softmax_rows(Tensor::from({2}, {1000, 0}));
  EXPECT_TRUE(std::isfinite(p.data()[0]));
  EXPECT_NEAR(p.data()[0], 1.0, 1e-15);
  EXPECT_NEAR(p.data()[1], 0.0, 1e-15);
}

TEST(Softmax, NegativeInfinityMapsToZero) {
  const double inf = std::numeric_limits<double>::infinity();
  auto p = softmax_rows(Tensor::from({4}, {std::log(1.0), std::log(2.0), std::log(3.0), -inf}));
  expect_values(p, {1.0 / 6, 2.0 / 6, 3.0 / 6, 0.0});
  EXPECT_EQ(p.data()[3], 0.0);
}

TEST(Softmax, AllNegativeInfinityRowThrows) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax_rows(Tensor::from({2, 2}, {0, 1, -inf, -inf})), ContractError);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(3);
  auto p = softmax_rows(random_tensor(rng, {5, 7}));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += p.data()[r * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Sigmoid, ReferenceValues) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_NEAR(sigmoid(Tensor::scalar(20.0)).item(), 1.0 / (1.0 + std::exp(-20.0)), 1e-16);
  EXPECT_NEAR(sigmoid(Tensor::scalar(20.0)).item(), 0.9999999979, 1e-10);
  EXPECT_NEAR(sigmoid(Tensor::scalar(-20.0)).item(), 2.061e-9, 1e-12);
}

TEST(Sigmoid, StaysInsideOpenInterval) {
  for (double v : {-1e6, -800.0, -40.0, 40.0, 800.0, 1e6}) {
    const double s = sigmoid(Tensor::scalar(v)).item();
    EXPECT_GT(s, 0.0) << v;
    EXPECT_LT(s, 1.0) << v;
  }
}

TEST(Reductions, Examples) {
  EXPECT_EQ(mse(Tensor::from({2}, {1, 2}), Tensor::from({2}, {1, 2})).item(), 0.0);
  EXPECT_NEAR(reduce_mean(Tensor::from({3}, {0.2, 0.4, 0.6})).item(), 0.4, 1e-15);
  expect_values(mul(Tensor::from({3}, {1, 2, 3}), Tensor::from({3}, {0, 1, 0})), {0, 2, 0}, 0.0);
  EXPECT_THROW(mse(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST(Reductions, AxisMeanAndSumExcept) {
  auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  expect_values(reduce_mean(t, 0), {2.5, 3.5, 4.5});
  expect_values(reduce_mean(t, 1), {2, 5});
  expect_values(sum_except(t, 1), {5, 7, 9}, 0.0);
  expect_values(sum_except(t, 0), {6, 15}, 0.0);
}

TEST(Broadcast, SuffixAndScalar) {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  expect_values(add(a, Tensor::from({2}, {10, 20})), {11, 22, 13, 24}, 0.0);
  expect_values(mul(a, Tensor::scalar(2.0)), {2, 4, 6, 8}, 0.0);
  EXPECT_THROW(add(a, Tensor::zeros({3})), DimensionError);
}

TEST(Shapes, RepeatSplitMerge) {
  auto a = Tensor::from({1, 2, 1}, {1, 2});
  expect_values(repeat_rows(a, 3), {1, 1, 1, 2, 2, 2}, 0.0);
  EXPECT_EQ(repeat_rows(a, 3).shape(), (Shape{1, 6, 1}));

  Rng rng(5);
  auto x = random_tensor(rng, {2, 3, 4});
  auto split = split_heads(x, 2);
  EXPECT_EQ(split.shape(), (Shape{2, 2, 3, 2}));
  EXPECT_EQ(split.at({1, 1, 2, 0}), x.at({1, 2, 2}));
  auto back = merge_heads(split);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back.data()[i], x.data()[i]);
}

TEST(Shapes, EmbeddingGathersRows) {
  auto table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21});
  const std::size_t ids[] = {2, 0, 1, 2};
  auto e = embedding(table, ids, {2, 2});
  EXPECT_EQ(e.shape(), (Shape{2, 2, 2}));
  expect_values(e, {20, 21, 0, 1, 10, 11, 20, 21}, 0.0);
}

TEST(Backward, MeanOfSquares) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  reduce_mean(square(x)).backward();
  expect_values(Tensor::from({3}, {x.grad().begin(), x.grad().end()}), {2.0 / 3, 4.0 / 3, 2.0});
}

TEST(Backward, DisconnectedParameterGetsZero) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto p = Tensor::from({2}, {5, 6}, true);
  reduce_sum(x).backward();
  ASSERT_EQ(p.grad().size(), 2u);
  EXPECT_EQ(p.grad()[0], 0.0);
  EXPECT_EQ(p.grad()[1], 0.0);
}

TEST(Backward, ReuseAccumulates) {
  auto y = Tensor::from({3}, {1, -2, 4}, true);
  add(reduce_sum(y), reduce_sum(y)).backward();
  for (double g : y.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, SecondCallThrows) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto loss = reduce_sum(square(x));
  loss.backward();
  EXPECT_THROW(loss.backward(), ContractError);
}

TEST(Backward, NonScalarThrows) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(square(x).backward(), ContractError);
}

TEST(GradCheck, LinearFunctionIsExact) {
  Rng rng(11);
  auto p = random_tensor(rng, {3, 4}, true);
  auto w = random_tensor(rng, {3, 4});
  const double err = grad_check([&] { return reduce_sum(mul(p, w)); }, {p});
  EXPECT_LE(err, 1e-9);
}

TEST(GradCheck, MseThroughMatmulSoftmax) {
  Rng rng(12);
  auto a = random_tensor(rng, {3, 4}, true);
  auto b = random_tensor(rng, {4, 4}, true);
  auto target = random_tensor(rng, {3, 4});
  const double err = grad_check([&] { return mse(softmax_rows(matmul(a, b)), target); }, {a, b});
  EXPECT_LE(err, 1e-5);
}

TEST(GradCheck, RejectsStepOutsideRange) {
  auto p = Tensor::from({1}, {1.0}, true);
  GradCheckOptions opt;
  opt.eps = 1e-2;
  EXPECT_THROW(grad_check([&] { return square(p); }, {p}, opt), ContractError);
}
