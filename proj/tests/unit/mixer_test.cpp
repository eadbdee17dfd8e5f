#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cocomix/error.hpp"
#include "cocomix/mixer.hpp"
#include "cocomix/trainer.hpp"
#include "tiny.hpp"

namespace cocomix {
namespace {

GraphTensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(r * c);
  for (double& x : v) x = nd(rng);
  return GraphTensor::matrix(r, c, v);
}

TEST(Interleave, AlternatesSlotsAndDoublesTheLength) {
  const GraphTensor h = random_matrix(6, 4, 1), c = random_matrix(6, 4, 2);
  const Interleaved m = interleave(h, c, 3);
  ASSERT_EQ(m.rows.rows(), 12u);
  EXPECT_EQ(m.segment_len, 6u);
  EXPECT_EQ(m.position_ids, (std::vector<int>{0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(m.token_slots, (std::vector<std::size_t>{0, 2, 4, 6, 8, 10}));
  EXPECT_EQ(m.concept_slots, (std::vector<std::size_t>{1, 3, 5, 7, 9, 11}));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(m.rows.at(b * 6 + 2 * t, j), h.at(b * 3 + t, j));
        EXPECT_EQ(m.rows.at(b * 6 + 2 * t + 1, j), c.at(b * 3 + t, j));
      }
    }
  }
  const auto [h2, c2] = deinterleave(m);
  EXPECT_TRUE(std::ranges::equal(h2.values(), h.values()));
  EXPECT_TRUE(std::ranges::equal(c2.values(), c.values()));
}

TEST(Interleave, SharedPositionsRepeatEachIndex) {
  const Interleaved m = interleave(random_matrix(3, 2, 1), random_matrix(3, 2, 2), 3, true);
  EXPECT_EQ(m.position_ids, (std::vector<int>{0, 0, 1, 1, 2, 2}));
}

TEST(Interleave, MismatchedShapesAreRejected) {
  EXPECT_THROW(interleave(random_matrix(6, 4, 1), random_matrix(6, 3, 2), 3), ShapeError);
  EXPECT_THROW(interleave(random_matrix(6, 4, 1), random_matrix(6, 4, 2), 4), ShapeError);
  EXPECT_THROW(intervene(random_matrix(2, 4, 1), random_matrix(3, 4, 2)), ShapeError);
}

TEST(Intervene, AddsTheConceptVector) {
  const GraphTensor h = random_matrix(3, 4, 1), c = random_matrix(3, 4, 2);
  const GraphTensor r = intervene(h, c);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(r.values()[i], h.values()[i] + c.values()[i]);
}

double ce(const std::vector<double>& z, int label) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return std::log(s) + m - z[static_cast<std::size_t>(label)];
}

TEST(ConceptLoss, IsMeanOfPerLabelCrossEntropy) {
  const std::vector<double> r0{1.0, -0.5, 2.0}, r1{0.0, 3.0, -1.0};
  std::vector<double> z = r0;
  z.insert(z.end(), r1.begin(), r1.end());
  const GraphTensor zt = GraphTensor::matrix(2, 3, z);
  const std::vector<int> labels{0, 2, 1, 1};
  const double expect = ((ce(r0, 0) + ce(r0, 2)) / 2 + (ce(r1, 1) + ce(r1, 1)) / 2) / 2;
  EXPECT_NEAR(concept_loss(zt, labels, 2).item(), expect, 1e-14);
  EXPECT_THROW(concept_loss(zt, std::vector<int>{0, 1, 2}, 2), ShapeError);
}

TEST(ConceptMixer, TopKCompressionKeepsOnlyKLogits) {
  const ConceptMixer mix(4, 10, 3, 1);
  const GraphTensor h = random_matrix(5, 4, 3);
  const GraphTensor z = mix.predict(h);
  ASSERT_EQ(z.rows(), 5u);
  ASSERT_EQ(z.cols(), 10u);
  const GraphTensor c = mix.compress(z);
  ASSERT_EQ(c.cols(), 4u);
  const GraphTensor kept = ops::topk_mask(z, 3);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t j = 0; j < 4; ++j) {
      double v = mix.comp_b().values()[j];
      for (std::size_t i = 0; i < 10; ++i) v += kept.at(r, i) * mix.comp_w().at(i, j);
      EXPECT_NEAR(c.at(r, j), v, 1e-12);
    }
  }
}

// d(total)/d(theta) = d(ntp)/d(theta) + lambda d(aux)/d(theta), so the
// gradient is affine in lambda.
TEST(ConceptLoss, TotalGradientIsAffineInLambda) {
  const auto data = testing::tiny_data();
  Student s(Method::kCocomix, testing::tiny_model(4), 24, 4, 16);
  std::vector<std::vector<int>> inputs;
  std::vector<int> targets, labels;
  std::mt19937_64 rng(3);
  for (std::size_t w = 0; w < 3; ++w) {
    inputs.push_back(data.train[w].inputs());
    const auto t = data.train[w].targets();
    targets.insert(targets.end(), t.begin(), t.end());
    for (std::size_t i = 0; i < t.size() * 2; ++i) labels.push_back(static_cast<int>(rng() % 24));
  }
  LossInputs in{&inputs, &targets, &labels, 2, nullptr};
  const auto params = s.parameters();
  auto grads = [&](double lambda) {
    TrainConfig cfg;
    cfg.method = Method::kCocomix;
    cfg.lambda = lambda;
    for (auto p : params) p.tensor.zero_grad();
    const StepLosses l = compute_losses(s, cfg, in);
    EXPECT_NEAR(l.total.item(), l.ntp.item() + lambda * l.aux.item(), 1e-12);
    l.total.backward();
    std::vector<double> g;
    for (const auto& p : params) g.insert(g.end(), p.tensor.grad().begin(), p.tensor.grad().end());
    return g;
  };
  const auto g0 = grads(0.0), g1 = grads(0.3), g2 = grads(0.6);
  double scale = 0.0;
  for (double v : g1) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < g0.size(); ++i) EXPECT_NEAR(g2[i] - g1[i], g1[i] - g0[i], 1e-12 * (1 + scale));
}

}  // namespace
}  // namespace cocomix
