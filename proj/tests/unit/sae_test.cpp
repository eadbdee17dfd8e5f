#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "cocomix/error.hpp"
#include "cocomix/gradcheck.hpp"
#include "cocomix/sae.hpp"
#include "planted.hpp"

namespace cocomix {
namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

double decoder_column_norm(const SaeModel& sae, std::size_t i) {
  const auto d = sae.dec_t().values();
  double sq = 0.0;
  for (int j = 0; j < sae.d_in(); ++j) sq += d[i * sae.d_in() + j] * d[i * sae.d_in() + j];
  return std::sqrt(sq);
}

TEST(SaeEncode, ZeroEncoderGivesBiasAndTopKOfBias) {
  SaeModel sae(4, 6, 2, 1);
  for (double& x : sae.enc_t().mutable_values()) x = 0.0;
  const std::vector<double> bias{0.1, -2.0, 3.0, 0.5, 0.2, 3.0};
  std::copy(bias.begin(), bias.end(), sae.b_enc().mutable_values().begin());
  const ConceptActivation a = sae.encode(random_vector(4, 2));
  EXPECT_EQ(a.c_pre, bias);
  EXPECT_EQ(a.active_indices, (std::vector<int>{2, 5}));
  EXPECT_EQ(a.c, (std::vector<double>{0, 0, 3.0, 0, 0, 3.0}));
}

TEST(SaeEncode, ExactlyKActiveAndCMatchesCPreOnThem) {
  SaeModel sae(8, 32, 5, 3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ConceptActivation a = sae.encode(random_vector(8, s));
    ASSERT_EQ(a.active_indices.size(), 5u);
    EXPECT_TRUE(std::is_sorted(a.active_indices.begin(), a.active_indices.end()));
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < a.c.size(); ++i) {
      const bool active = std::binary_search(a.active_indices.begin(), a.active_indices.end(), static_cast<int>(i));
      EXPECT_EQ(a.c[i], active ? a.c_pre[i] : 0.0);
      nonzero += a.c[i] != 0.0;
    }
    EXPECT_EQ(nonzero, 5u);
  }
}

TEST(SaeEncode, DimensionMismatchIsShapeError) {
  SaeModel sae(8, 16, 2, 1);
  EXPECT_THROW(sae.encode(random_vector(7, 1)), ShapeError);
  EXPECT_THROW(sae.decode(random_vector(15, 1)), ShapeError);
}

TEST(SaeDecode, ZeroCodeGivesBiasPlusMean) {
  SaeModel sae(3, 5, 2, 1);
  const std::vector<double> b{0.5, -1.0, 2.0}, mu{1.0, 1.0, -3.0};
  std::copy(b.begin(), b.end(), sae.b_dec().mutable_values().begin());
  std::copy(mu.begin(), mu.end(), sae.input_mean().mutable_values().begin());
  const auto h = sae.decode(std::vector<double>(5, 0.0));
  for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(h[j], b[j] + mu[j]);
}

TEST(SaeDecode, IsAffine) {
  SaeModel sae(6, 10, 3, 4);
  const auto a = random_vector(10, 1), b = random_vector(10, 2);
  std::vector<double> ab(10);
  for (int i = 0; i < 10; ++i) ab[i] = a[i] + b[i];
  const auto h0 = sae.decode(std::vector<double>(10, 0.0));
  const auto ha = sae.decode(a), hb = sae.decode(b), hab = sae.decode(ab);
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(hab[j] - h0[j], (ha[j] - h0[j]) + (hb[j] - h0[j]), 1e-12);
}

TEST(SaeDecode, JacobianEqualsDecoderMatrix) {
  SaeModel sae(5, 7, 2, 8);
  const auto c = random_vector(7, 3);
  const double eps = 1e-6;
  for (int i = 0; i < 7; ++i) {
    auto up = c, dn = c;
    up[i] += eps;
    dn[i] -= eps;
    const auto hu = sae.decode(up), hd = sae.decode(dn);
    for (int j = 0; j < 5; ++j) {
      EXPECT_NEAR((hu[j] - hd[j]) / (2 * eps), sae.dec_t().values()[i * 5 + j], 1e-8);
    }
  }
}

TEST(SaeLoss, NonNegativeAndZeroOnOwnReconstruction) {
  SaeModel sae(6, 12, 3, 5);
  for (std::uint64_t s = 0; s < 10; ++s) EXPECT_GE(sae.sae_loss(random_vector(6, s)), 0.0);
  SaeModel id(3, 3, 3, 1);
  for (double& x : id.enc_t().mutable_values()) x = 0.0;
  for (double& x : id.dec_t().mutable_values()) x = 0.0;
  for (int i = 0; i < 3; ++i) {
    id.enc_t().mutable_values()[i * 3 + i] = 1.0;
    id.dec_t().mutable_values()[i * 3 + i] = 1.0;
  }
  const auto h = id.decode(std::vector<double>{0.3, -1.0, 2.0});
  EXPECT_EQ(id.sae_loss(h), 0.0);
}

TEST(SaeLoss, GradientMatchesFiniteDifferences) {
  SaeModel sae(6, 12, 3, 5);
  std::vector<double> rows;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto v = random_vector(6, 40 + s);
    rows.insert(rows.end(), v.begin(), v.end());
  }
  const GraphTensor h = GraphTensor::matrix(4, 6, rows);
  sae.set_trainable(true);
  std::vector<GraphTensor> leaves;
  for (const auto& p : sae.parameters()) leaves.push_back(p.tensor);
  const auto report = finite_diff_check([&] { return sae.loss(h); }, leaves, 1e-6, 12, 3);
  EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(SaeLoss, GraphLossMatchesPerRowLoss) {
  SaeModel sae(6, 12, 3, 5);
  std::vector<double> rows;
  double expected = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto v = random_vector(6, s);
    rows.insert(rows.end(), v.begin(), v.end());
    expected += sae.sae_loss(v);
  }
  EXPECT_NEAR(sae.loss(GraphTensor::matrix(5, 6, rows)).item(), expected / 5.0, 1e-12);
}

class PlantedSae : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    planted_ = new testing::PlantedDictionary(testing::planted_dictionary(6144, 32, 16, 3, 5));
    cfg_.n_concepts = 64;
    cfg_.k = 4;
    cfg_.steps = 800;
    cfg_.batch = 256;
    cfg_.seed = 1;
  }
  static void TearDownTestSuite() { delete planted_; }
  static testing::PlantedDictionary* planted_;
  static SaeConfig cfg_;
};
testing::PlantedDictionary* PlantedSae::planted_ = nullptr;
SaeConfig PlantedSae::cfg_;

TEST_F(PlantedSae, HeldOutLossDropsThirtyPercentWithUnitDecoderColumns) {
  const auto train = testing::slice_rows(planted_->data, 0, 5120);
  const auto held = testing::slice_rows(planted_->data, 5120, 6144);
  SaeConfig zero = cfg_;
  zero.steps = 0;
  const double before = evaluate_sae(train_sae(train, zero), held).mse;
  SaeTrainLog log;
  const SaeModel sae = train_sae(train, cfg_, &log);
  const SaeEvaluation after = evaluate_sae(sae, held);
  EXPECT_LT(after.mse, 0.7 * before);
  EXPECT_LT(after.fvu, 1.0);
  ASSERT_FALSE(log.step.empty());
  EXPECT_EQ(log.step.front(), 0);
  EXPECT_EQ(log.step.back(), cfg_.steps - 1);
  for (std::size_t i = 0; i < static_cast<std::size_t>(sae.n_concepts()); ++i) {
    EXPECT_NEAR(decoder_column_norm(sae, i), 1.0, 1e-9);
  }
}

TEST_F(PlantedSae, SameSeedIsBitIdentical) {
  SaeConfig c = cfg_;
  c.steps = 50;
  const auto data = testing::slice_rows(planted_->data, 0, 1024);
  EXPECT_EQ(train_sae(data, c).content_hash(), train_sae(data, c).content_hash());
  SaeConfig other = c;
  other.seed = 2;
  EXPECT_NE(train_sae(data, c).content_hash(), train_sae(data, other).content_hash());
}

TEST_F(PlantedSae, DenseCodeIsNoWorseThanTopK) {
  const auto data = testing::slice_rows(planted_->data, 0, 2048);
  SaeConfig sparse = cfg_, dense = cfg_;
  sparse.n_concepts = dense.n_concepts = 16;
  sparse.k = 4;
  dense.k = 16;
  sparse.steps = dense.steps = 600;
  EXPECT_LE(evaluate_sae(train_sae(data, dense), data).mse,
            evaluate_sae(train_sae(data, sparse), data).mse);
}

TEST(TrainSae, EmptyDumpAndBadConfigAreErrors) {
  ActivationMatrix empty;
  empty.cols = 4;
  EXPECT_THROW(train_sae(empty, SaeConfig{}), RangeError);
  const auto p = testing::planted_dictionary(16, 4, 4, 1, 1);
  SaeConfig c;
  c.n_concepts = 4;
  c.k = 5;
  EXPECT_THROW(train_sae(p.data, c), ConfigError);
}

TEST(TrainSae, NonFiniteLossIsDivergence) {
  auto p = testing::planted_dictionary(64, 4, 4, 1, 1);
  SaeConfig c;
  c.n_concepts = 8;
  c.k = 2;
  c.steps = 200;
  c.batch = 64;
  c.lr = 1e300;
  EXPECT_THROW(train_sae(p.data, c), DivergenceError);
}

}  // namespace
}  // namespace cocomix
