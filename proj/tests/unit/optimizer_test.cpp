#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "cocomix/error.hpp"
#include "cocomix/optimizer.hpp"

namespace cocomix {
namespace {

// Reference values from torch.optim.AdamW (float64; lr 0.01, betas
// (0.9, 0.95), eps 1e-8, weight decay 0.1 on the matrix only) after three
// steps on sum(W*W*cW) + sum(b*b*b*cb).
TEST(AdamW, MatchesReferenceImplementationOverThreeSteps) {
  GraphTensor w = GraphTensor::matrix(2, 2, {0.5, -0.3, 0.2, 0.8}, true);
  GraphTensor b = GraphTensor::vector({0.1, -0.4}, true);
  const GraphTensor cw = GraphTensor::matrix(2, 2, {1.0, -2.0, 0.5, 3.0});
  const GraphTensor cb = GraphTensor::vector({-1.5, 0.25});
  AdamW opt({{"w", w}, {"b", b}}, AdamWConfig{0.9, 0.95, 1e-8, 0.1});
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    GraphTensor loss = ops::add(ops::reduce_sum(ops::mul(ops::mul(w, w), cw)),
                                ops::reduce_sum(ops::mul(ops::mul(ops::mul(b, b), b), cb)));
    loss.backward();
    opt.step(0.01);
  }
  const double ew[] = {0.46854415182932146, -0.3290819138688354, 0.16946999045466091,
                       0.76763999165129204};
  const double eb[] = {0.12993892469344667, -0.43001321429091233};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(w.values()[i], ew[i], 1e-15);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(b.values()[i], eb[i], 1e-15);
  EXPECT_EQ(opt.step_count(), 3u);
}

TEST(AdamW, SkipsFrozenParameters) {
  GraphTensor w = GraphTensor::matrix(1, 2, {1.0, 2.0}, true);
  AdamW opt({{"w", w}}, AdamWConfig{});
  GraphTensor loss = ops::reduce_sum(ops::mul(w, w));
  loss.backward();
  w.set_requires_grad(false);
  opt.step(0.1);
  EXPECT_EQ(w.values()[0], 1.0);
  EXPECT_EQ(w.values()[1], 2.0);
}

TEST(LrSchedule, WarmupPeakAndCosineFloor) {
  const LrSchedule s = LrSchedule::from_fractions(2e-3, 3000, 1.0 / 300.0, 0.1);
  EXPECT_EQ(s.warmup_steps, 10u);
  EXPECT_DOUBLE_EQ(s.lr(0), 2e-4);
  EXPECT_DOUBLE_EQ(s.lr(4), 1e-3);
  EXPECT_DOUBLE_EQ(s.lr(9), 2e-3);
  EXPECT_DOUBLE_EQ(s.lr(10), 2e-3);
  EXPECT_NEAR(s.lr(2999), 2e-4, 1e-18);
  EXPECT_NEAR(s.lr(10 + 2989 / 2.0), 2e-4 + 1.8e-3 * 0.5 * (1.0 + std::cos(std::numbers::pi * 0.5)), 1e-6);
  for (std::uint64_t t = 10; t + 1 < 3000; ++t) EXPECT_LE(s.lr(t + 1), s.lr(t));
}

TEST(LrSchedule, RejectsBadFractions) {
  EXPECT_THROW(LrSchedule::from_fractions(1e-3, 0, 0.1, 0.1), ConfigError);
  EXPECT_THROW(LrSchedule::from_fractions(1e-3, 10, 1.0, 0.1), ConfigError);
  EXPECT_THROW(LrSchedule::from_fractions(1e-3, 10, 0.1, 0.0), ConfigError);
}

TEST(ClipGradNorm, ScalesToMaxNormAndReportsOriginal) {
  GraphTensor a = GraphTensor::vector({3.0}, true), b = GraphTensor::vector({4.0}, true);
  GraphTensor loss = ops::add(ops::reduce_sum(ops::mul(a, a)), ops::reduce_sum(ops::mul(b, b)));
  loss.backward();  // grads 6, 8 -> norm 10
  const ParameterList p{{"a", a}, {"b", b}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(p, 5.0), 10.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(p, 100.0), 5.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
}

TEST(ClipGradNorm, NonFiniteNormIsDivergence) {
  GraphTensor a = GraphTensor::vector({1.0}, true);
  ops::reduce_sum(a).backward();
  a.mutable_grad()[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(clip_grad_norm({{"a", a}}, 1.0), DivergenceError);
}

}  // namespace
}  // namespace cocomix
