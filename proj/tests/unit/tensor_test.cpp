#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cocomix/error.hpp"
#include "cocomix/gradcheck.hpp"
#include "cocomix/tensor.hpp"
#include "kernel_cases.hpp"

namespace cocomix {
namespace {

using testing::KernelCase;
using testing::kernel_cases;
using testing::probe;
using testing::random_matrix;
using testing::spaced_matrix;

std::vector<double> values_of(const GraphTensor& t) {
  return {t.values().begin(), t.values().end()};
}

TEST(TensorForward, MatmulIdentityReturnsOperand) {
  auto eye = GraphTensor::matrix(2, 2, {1, 0, 0, 1});
  auto a = GraphTensor::matrix(2, 2, {1.5, -2, 3.25, 4});
  EXPECT_EQ(values_of(ops::matmul(eye, a)), values_of(a));
}

TEST(TensorForward, AddZeroIsIdentity) {
  auto x = GraphTensor::matrix(2, 3, {1, 2, 3, -4, 5, 6});
  auto z = GraphTensor::zeros({2, 3});
  EXPECT_EQ(values_of(ops::add(x, z)), values_of(x));
}

TEST(TensorForward, GeluOfZeroIsZero) {
  EXPECT_EQ(ops::gelu(GraphTensor::vector({0.0})).values()[0], 0.0);
}

TEST(TensorForward, AddBroadcastsRowVector) {
  auto x = GraphTensor::matrix(2, 2, {1, 2, 3, 4});
  auto b = GraphTensor::vector({10, 20});
  EXPECT_EQ(values_of(ops::add(x, b)), (std::vector<double>{11, 22, 13, 24}));
}

TEST(TensorForward, MatmulShapeMismatchNamesKernel) {
  auto a = GraphTensor::matrix(2, 3, std::vector<double>(6, 1.0));
  auto b = GraphTensor::matrix(2, 2, std::vector<double>(4, 1.0));
  try {
    ops::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
}

TEST(TensorForward, NonFiniteInputRaises) {
  auto x = GraphTensor::vector({1.0, std::nan("")});
  EXPECT_THROW(ops::gelu(x), NonFiniteError);
  auto y = GraphTensor::vector({1.0, INFINITY});
  EXPECT_THROW(ops::add(y, y), NonFiniteError);
}

TEST(TopKMask, KeepsLargestEntries) {
  auto out = ops::topk_mask(GraphTensor::vector({3, 1, 2}), 2);
  EXPECT_EQ(values_of(out), (std::vector<double>{3, 0, 2}));
}

TEST(TopKMask, KEqualLengthIsIdentity) {
  auto out = ops::topk_mask(GraphTensor::vector({5, 7}), 2);
  EXPECT_EQ(values_of(out), (std::vector<double>{5, 7}));
}

TEST(TopKMask, TiesBreakTowardLowestIndex) {
  auto out = ops::topk_mask(GraphTensor::vector({1, 1, 0}), 1);
  EXPECT_EQ(values_of(out), (std::vector<double>{1, 0, 0}));
  auto flat = ops::topk_mask(GraphTensor::vector({2, 2, 2, 2}), 2);
  EXPECT_EQ(values_of(flat), (std::vector<double>{2, 2, 0, 0}));
}

TEST(TopKMask, RejectsKLargerThanRow) {
  EXPECT_THROW(ops::topk_mask(GraphTensor::vector({1, 2}), 3), RangeError);
  EXPECT_THROW(ops::topk_mask(GraphTensor::vector({1, 2}), 0), RangeError);
}

TEST(TopKMask, RowWiseOnMatrices) {
  auto out = ops::topk_mask(GraphTensor::matrix(2, 3, {1, 5, 3, 9, 8, 7}), 1);
  EXPECT_EQ(values_of(out), (std::vector<double>{0, 5, 0, 9, 0, 0}));
}

// Idempotence holds whenever the kept entries are non-negative; when a kept
// entry is negative the masked zeros outrank it on the second pass.
TEST(TopKMask, IsIdempotentWhenKeptEntriesAreNonNegative) {
  std::mt19937_64 rng(7);
  int checked = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t cols = 1 + rng() % 12;
    const std::size_t k = 1 + rng() % cols;
    auto x = random_matrix(1, cols, rng, false);
    auto once = ops::topk_mask(x, k);
    bool kept_negative = false;
    for (double v : once.values()) kept_negative |= v < 0.0;
    if (kept_negative) continue;
    ++checked;
    auto twice = ops::topk_mask(once, k);
    ASSERT_EQ(values_of(once), values_of(twice)) << "k=" << k << " cols=" << cols;
  }
  EXPECT_GT(checked, 100);
}

TEST(TopKMask, NegativeKeptEntryIsNotIdempotent) {
  auto once = ops::topk_mask(GraphTensor::vector({-1, -2, -3}), 2);
  EXPECT_EQ(values_of(once), (std::vector<double>{-1, -2, 0}));
  EXPECT_EQ(values_of(ops::topk_mask(once, 2)), (std::vector<double>{-1, 0, 0}));
}

TEST(TopKMask, BackwardOnlyThroughKeptEntries) {
  auto x = GraphTensor::vector({3, 1, 2}, true);
  ops::reduce_sum(ops::topk_mask(x, 2)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{1, 0, 1}));
}

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(ops::cross_entropy(GraphTensor::vector({0, 0}), 0).item(),
              0.693147180559945, 1e-12);
  EXPECT_NEAR(ops::cross_entropy(GraphTensor::vector({0, 0, 0, 0}), 2).item(),
              1.386294361119891, 1e-12);
}

TEST(CrossEntropy, MatchesExtendedPrecisionSoftmax) {
  // Brute-force oracle in long double.
  const long double z[3] = {2.0L, 1.0L, 0.0L};
  long double denom = 0.0L;
  for (long double v : z) denom += std::exp(v);
  const long double expected = -std::log(std::exp(z[0]) / denom);
  const double got = ops::cross_entropy(GraphTensor::vector({2, 1, 0}), 0).item();
  EXPECT_NEAR(got, static_cast<double>(expected), 1e-14);
}

TEST(CrossEntropy, RejectsOutOfRangeTarget) {
  EXPECT_THROW(ops::cross_entropy(GraphTensor::vector({0, 0}), 2), RangeError);
  EXPECT_THROW(ops::cross_entropy(GraphTensor::vector({0, 0}), -1), RangeError);
}

TEST(CrossEntropy, StableForLargeLogits) {
  const double v = ops::cross_entropy(GraphTensor::vector({1000, 0}), 1).item();
  EXPECT_NEAR(v, 1000.0, 1e-9);
}

TEST(TensorProperties, SoftmaxRowsSumToOneAndCrossEntropyNonNegative) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cols = 2 + rng() % 20;
    auto x = random_matrix(4, cols, rng, false, 5.0);
    auto s = ops::softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) sum += s.at(r, c);
      ASSERT_NEAR(sum, 1.0, 1e-12);
    }
    std::vector<int> targets(4);
    for (int& t : targets) t = static_cast<int>(rng() % cols);
    ASSERT_GE(ops::cross_entropy(x, targets).item(), 0.0);
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = GraphTensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  ops::reduce_sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, FanOutAccumulates) {
  auto x = GraphTensor::vector({1.5}, true);
  ops::reduce_sum(ops::add(x, x)).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, RejectsNonScalarRoot) {
  auto x = GraphTensor::vector({1, 2}, true);
  EXPECT_THROW(ops::scale(x, 2.0).backward(), ShapeError);
}

TEST(Backward, MatmulReduceMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto a = random_matrix(3, 4, rng);
  auto b = random_matrix(4, 2, rng);
  std::vector<GraphTensor> params{a, b};
  auto report = finite_diff_check(
      [&] { return ops::reduce_mean(ops::matmul(a, b)); }, params, 1e-5, 100);
  EXPECT_LT(report.max_rel_err, 1e-6);
}

TEST(Backward, IsBitwiseDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(5);
    auto x = random_matrix(6, 8, rng);
    auto w = random_matrix(8, 24, rng);
    auto qkv = ops::matmul(x, w);
    auto out = ops::attention(qkv, AttentionLayout{2, 3, {}});
    ops::cross_entropy(out, std::vector<int>{0, 1, 2, 3, 4, 5}).backward();
    return std::make_pair(values_of(x.detach()),
                          std::vector<double>(w.grad().begin(), w.grad().end()));
  };
  EXPECT_EQ(run(), run());
}

TEST(Attention, CausalRowsIgnoreFuture) {
  std::mt19937_64 rng(9);
  auto qkv = random_matrix(5, 12, rng, false);
  auto base = ops::attention(qkv, AttentionLayout{2, 0, {}});
  auto perturbed = values_of(qkv);
  for (std::size_t c = 0; c < 12; ++c) perturbed[4 * 12 + c] += 1.0;
  auto out = ops::attention(GraphTensor::matrix(5, 12, perturbed), AttentionLayout{2, 0, {}});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(base.at(r, c), out.at(r, c));
}

TEST(Attention, RowWithNoVisibleKeyIsAnError) {
  auto qkv = GraphTensor::matrix(2, 3, std::vector<double>(6, 0.5));
  AttentionLayout lay{1, 2, {0, 0, 1, 1}};
  EXPECT_THROW(ops::attention(qkv, lay), ShapeError);
}

TEST(KlDivergence, ZeroWhenDistributionsMatch) {
  auto logits = GraphTensor::matrix(2, 3, {0.3, -1.0, 2.0, 1.0, 1.0, 0.0});
  auto p = ops::softmax(logits);
  EXPECT_NEAR(ops::kl_divergence(p, logits).item(), 0.0, 1e-15);
}

TEST(CosineDistance, BoundsAndIdentity) {
  auto a = GraphTensor::matrix(2, 2, {1, 0, 0, 1});
  auto b = GraphTensor::matrix(2, 2, {-1, 0, 0, 1});
  EXPECT_NEAR(ops::cosine_distance(a, a).item(), 0.0, 1e-15);
  EXPECT_NEAR(ops::cosine_distance(a, b).item(), 1.0, 1e-15);  // mean of 2 and 0
}

TEST(Forward, DispatcherRoutesKinds) {
  auto x = GraphTensor::vector({3, 1, 2});
  KernelAttrs attrs;
  attrs.k = 2;
  std::vector<GraphTensor> in{x};
  EXPECT_EQ(values_of(forward(KernelKind::kTopKMask, in, attrs)),
            (std::vector<double>{3, 0, 2}));
  attrs.scale = -2.0;
  EXPECT_EQ(values_of(forward(KernelKind::kScale, in, attrs)),
            (std::vector<double>{-6, -2, -4}));
  EXPECT_THROW(forward(KernelKind::kMatMul, in, attrs), ShapeError);
}

// ---- gradient property test over every kernel ------------------------------

class KernelGradient : public ::testing::TestWithParam<KernelCase> {};

TEST_P(KernelGradient, MatchesCentralDifferencesOver100Trials) {
  const KernelCase& kc = GetParam();
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(1000 + trial);
    auto [fn, params] = kc.make(rng);
    auto report = finite_diff_check(fn, params, 1e-5, 64, trial);
    worst = std::max(worst, report.max_rel_err);
    ASSERT_LT(report.max_rel_err, 1e-4)
        << kc.name << " trial " << trial << " param " << report.worst_param
        << " idx " << report.worst_index << " autodiff " << report.worst_autodiff
        << " numeric " << report.worst_numeric;
  }
  RecordProperty("worst_rel_err", std::to_string(worst));
}

INSTANTIATE_TEST_SUITE_P(AllKernels, KernelGradient, ::testing::ValuesIn(kernel_cases()),
                         [](const auto& info) { return info.param.name; });

}  // namespace
}  // namespace cocomix
