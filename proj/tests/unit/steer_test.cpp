#include <gtest/gtest.h>

#include <cmath>

#include "cocomix/error.hpp"
#include "cocomix/steer.hpp"
#include "tiny.hpp"

namespace cocomix {
namespace {

class Steering : public ::testing::Test {
 protected:
  Steering() : data_(testing::tiny_data()), student_(Method::kCocomix, testing::tiny_model(2), 24, 4, 16) {
    for (std::size_t i = 0; i < 4; ++i) {
      const auto in = data_.heldout[i].inputs();
      prompts_.emplace_back(in.begin(), in.begin() + 3);
    }
  }
  SampleOptions opts(std::uint64_t seed = 5) const {
    SampleOptions o;
    o.n_tokens = 12;
    o.seed = seed;
    return o;
  }
  testing::TinyData data_;
  Student student_;
  std::vector<std::vector<int>> prompts_;
};

TEST_F(Steering, GenerationKeepsPromptsAndIsSeeded) {
  const auto a = generate(student_, prompts_, opts());
  const auto b = generate(student_, prompts_, opts());
  const auto c = generate(student_, prompts_, opts(6));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_EQ(a[i].size(), 15u);
    EXPECT_TRUE(std::equal(prompts_[i].begin(), prompts_[i].end(), a[i].begin()));
    for (int t : a[i]) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, 256);
    }
  }
}

TEST_F(Steering, GreedyDecodingPicksTheArgmax) {
  SampleOptions o = opts();
  o.greedy = true;
  o.n_tokens = 1;
  const auto out = generate(student_, prompts_, o);
  const GraphTensor logits = student_forward(student_, prompts_).logits;
  for (std::size_t i = 0; i < prompts_.size(); ++i) {
    const std::size_t row = i * 3 + 2;
    std::size_t best = 0;
    for (std::size_t v = 1; v < 256; ++v) {
      if (logits.at(row, v) > logits.at(row, best)) best = v;
    }
    EXPECT_EQ(out[i].back(), static_cast<int>(best));
  }
}

TEST_F(Steering, MultiplierOneIsBitIdenticalToNoSteering) {
  const auto plain = generate(student_, prompts_, opts());
  for (bool after : {false, true}) {
    SteerSpec s;
    s.concept_index = 7;
    s.multiplier = 1.0;
    s.after_topk = after;
    EXPECT_EQ(generate(student_, prompts_, opts(), s), plain);
  }
}

TEST_F(Steering, ScalingAConceptThatNeverWinsTopKChangesNothing) {
  GraphTensor b = student_.mixer->head_b();
  b.mutable_values()[11] = -1e6;
  const auto plain = generate(student_, prompts_, opts());
  SteerSpec pre;
  pre.concept_index = 11;
  pre.multiplier = 0.5;
  EXPECT_EQ(generate(student_, prompts_, opts(), pre), plain);
  SteerSpec post = pre;
  post.multiplier = 0.0;
  post.after_topk = true;
  EXPECT_EQ(generate(student_, prompts_, opts(), post), plain);
}

TEST_F(Steering, LargeMultiplierChangesSamples) {
  const auto plain = generate(student_, prompts_, opts());
  SteerSpec s;
  s.concept_index = 3;
  s.multiplier = 1e4;
  EXPECT_NE(generate(student_, prompts_, opts(), s), plain);
}

TEST_F(Steering, InvalidIndexAndMissingConceptHeadAreRejected) {
  SteerSpec s;
  s.concept_index = 24;
  EXPECT_THROW(generate(student_, prompts_, opts(), s), RangeError);
  s.concept_index = -1;
  EXPECT_THROW(generate(student_, prompts_, opts(), s), RangeError);
  const Student plain(Method::kNtp, testing::tiny_model(2), 0, 0, 16);
  s.concept_index = 0;
  EXPECT_THROW(generate(plain, prompts_, opts(), s), ConfigError);
}

TEST_F(Steering, TeacherSteeringAtMultiplierOneEqualsReconstruction) {
  const TransformerModel teacher(testing::tiny_model(3));
  const SaeModel sae(16, 24, 4, 1);
  SteerSpec s;
  s.concept_index = 2;
  s.multiplier = 1.0;
  s.target = SteerTarget::kTeacherSaeSpace;
  const auto a = steer_teacher(teacher, sae, prompts_, opts(), s);
  EXPECT_EQ(a, steer_teacher(teacher, sae, prompts_, opts(), s));
  s.concept_index = 99;
  EXPECT_THROW(steer_teacher(teacher, sae, prompts_, opts(), s), RangeError);
  const double ppl = reconstructed_perplexity(teacher, sae, data_.heldout);
  EXPECT_TRUE(std::isfinite(ppl));
  EXPECT_GE(ppl, 1.0);
}

TEST(TopicFrequency, CountsOnlyGeneratedTokens) {
  const Corpus c = gen_corpus(testing::tiny_corpus_spec());
  // Topic 1 owns tokens 16..31.
  const std::vector<std::vector<int>> samples{{16, 17, 16, 200, 0}, {16, 16, 20, 21, 22}};
  EXPECT_DOUBLE_EQ(topic_frequency(c, samples, 2, 1), 4.0 / 6.0);
  EXPECT_DOUBLE_EQ(topic_frequency(c, samples, 0, 1), 8.0 / 10.0);
}

TEST_F(Steering, SweepCsvHasOneRowPerMultiplier) {
  const SteeringSweep sw =
      steering_sweep(student_, data_.corpus, prompts_, 3, 1, {0.0, 2.0, 10.0}, {0, 1, 2}, 20);
  ASSERT_EQ(sw.rows.size(), 3u);
  for (const auto& r : sw.rows) {
    EXPECT_EQ(r.per_seed_frequency.size(), 3u);
    auto f = r.per_seed_frequency;
    std::sort(f.begin(), f.end());
    EXPECT_DOUBLE_EQ(r.topic_k_frequency, f[1]);
    EXPECT_GE(r.topic_k_frequency, 0.0);
    EXPECT_LE(r.topic_k_frequency, 1.0);
    EXPECT_TRUE(std::isfinite(r.ppl_of_sample));
  }
  const std::string csv = format_steering_csv(sw);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "multiplier,topic_k_frequency,ppl_of_sample");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto dir = testing::scratch_dir("steer_csv");
  write_steering_csv((dir / "s.csv").string(), sw);
  EXPECT_EQ(testing::read_bytes(dir / "s.csv"), csv);
}

}  // namespace
}  // namespace cocomix
