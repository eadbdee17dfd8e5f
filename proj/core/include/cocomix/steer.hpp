#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cocomix/corpus.hpp"
#include "cocomix/sae.hpp"
#include "cocomix/trainer.hpp"

namespace cocomix {

enum class SteerTarget { kStudentLogits, kTeacherSaeSpace };

struct SteerSpec {
  int concept_index = 0;
  double multiplier = 1.0;
  SteerTarget target = SteerTarget::kStudentLogits;
  // Scale after TopK instead of before (student side only).
  bool after_topk = false;
};

struct SampleOptions {
  std::size_t n_tokens = 32;
  double temperature = 1.0;
  bool greedy = false;
  std::uint64_t seed = 0;
};

// Autoregressive sampling for a batch of equal-length prompts, advanced in
// lock step; the context is the last context_len tokens. Returns prompt +
// continuation per row.
std::vector<std::vector<int>> generate(const Student& s,
                                       const std::vector<std::vector<int>>& prompts,
                                       const SampleOptions& opt,
                                       const std::optional<SteerSpec>& steer = {});

// Teacher generation with the hidden states at the split layer replaced by
// decode(TopK(c_pre)), where the steered concept's pre-activation is scaled
// by the multiplier.
std::vector<std::vector<int>> steer_teacher(const TransformerModel& teacher,
                                            const SaeModel& sae,
                                            const std::vector<std::vector<int>>& prompts,
                                            const SampleOptions& opt, const SteerSpec& steer);

// Teacher perplexity with every split-layer hidden state replaced by its SAE
// reconstruction (multiplier 1 steering).
double reconstructed_perplexity(const TransformerModel& teacher, const SaeModel& sae,
                                const std::vector<Window>& windows);

struct SteeringRow {
  double multiplier = 0.0;
  double topic_k_frequency = 0.0;  // median over seeds
  double ppl_of_sample = 0.0;      // median over seeds
  std::vector<double> per_seed_frequency;
};

struct SteeringSweep {
  int concept_index = 0;
  int topic = 0;
  std::vector<SteeringRow> rows;
};

// Fraction of the generated (non-prompt) tokens that belong to `topic`.
double topic_frequency(const Corpus& corpus, const std::vector<std::vector<int>>& samples,
                       std::size_t prompt_len, int topic);

// Samples `tokens_per_seed` new tokens per seed and multiplier. Sample
// perplexity is scored by the unsteered generator.
SteeringSweep steering_sweep(const Student& s, const Corpus& corpus,
                             const std::vector<std::vector<int>>& prompts, int concept_index,
                             int topic, const std::vector<double>& multipliers,
                             const std::vector<std::uint64_t>& seeds, std::size_t tokens_per_seed,
                             bool after_topk = false);
SteeringSweep teacher_steering_sweep(const TransformerModel& teacher, const SaeModel& sae,
                                     const Corpus& corpus,
                                     const std::vector<std::vector<int>>& prompts,
                                     int concept_index, int topic,
                                     const std::vector<double>& multipliers,
                                     const std::vector<std::uint64_t>& seeds,
                                     std::size_t tokens_per_seed);

// "multiplier,topic_k_frequency,ppl_of_sample" plus one line per row.
std::string format_steering_csv(const SteeringSweep& sweep);
void write_steering_csv(const std::string& path, const SteeringSweep& sweep);

}  // namespace cocomix
