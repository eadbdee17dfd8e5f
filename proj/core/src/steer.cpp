#include "cocomix/steer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "binary_io.hpp"
#include "cocomix/error.hpp"

namespace cocomix {

namespace {

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

int sample_row(const double* logits, std::size_t v, const SampleOptions& opt,
               std::mt19937_64& rng) {
  if (opt.greedy) return static_cast<int>(std::max_element(logits, logits + v) - logits);
  const double temp = opt.temperature > 0.0 ? opt.temperature : 1.0;
  const double mx = *std::max_element(logits, logits + v);
  std::vector<double> cdf(v);
  double acc = 0.0;
  for (std::size_t j = 0; j < v; ++j) {
    acc += std::exp((logits[j] - mx) / temp);
    cdf[j] = acc;
  }
  const double u = uniform01(rng) * acc;
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(v) - 1));
}

GraphTensor scale_row(std::size_t width, int index, double multiplier) {
  std::vector<double> s(width, 1.0);
  s[static_cast<std::size_t>(index)] = multiplier;
  return GraphTensor::matrix(1, width, std::move(s));
}

void check_prompts(const std::vector<std::vector<int>>& prompts) {
  if (prompts.empty()) throw RangeError("generate: no prompts");
  for (const auto& p : prompts) {
    if (p.empty()) throw RangeError("generate: empty prompt");
    if (p.size() != prompts[0].size()) throw ShapeError("generate: prompts differ in length");
  }
}

// Drives lock-step sampling; `logits_for` maps the current contexts to
// packed logits (one row per context position).
template <typename LogitsFor>
std::vector<std::vector<int>> sample_loop(std::vector<std::vector<int>> seqs, std::size_t context,
                                          const SampleOptions& opt, LogitsFor logits_for) {
  std::mt19937_64 rng(opt.seed);
  std::vector<std::vector<int>> ctx(seqs.size());
  for (std::size_t step = 0; step < opt.n_tokens; ++step) {
    const std::size_t len = std::min(context, seqs[0].size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      ctx[i].assign(seqs[i].end() - static_cast<std::ptrdiff_t>(len), seqs[i].end());
    }
    GraphTensor logits = logits_for(ctx);
    const std::size_t v = logits.cols();
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const double* row = logits.values().data() + (i * len + len - 1) * v;
      seqs[i].push_back(sample_row(row, v, opt, rng));
    }
  }
  return seqs;
}

std::vector<int> repeated_positions(std::size_t b, std::size_t t) {
  std::vector<int> p(b * t);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<int>(i % t);
  return p;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// exp(mean NLL) of the generated part of each sample under `logits_for`.
template <typename LogitsFor>
double sample_perplexity(const std::vector<std::vector<int>>& samples, std::size_t prompt_len,
                         LogitsFor logits_for) {
  std::vector<std::vector<int>> inputs;
  for (const auto& s : samples) inputs.emplace_back(s.begin(), s.end() - 1);
  GraphTensor logits = logits_for(inputs);
  const std::size_t t = inputs[0].size(), v = logits.cols();
  long double sum = 0.0L;
  std::size_t count = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t r = prompt_len - 1; r < t; ++r) {
      const double* row = logits.values().data() + (i * t + r) * v;
      const double mx = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
      sum += std::log(z) + mx - row[samples[i][r + 1]];
      ++count;
    }
  }
  return std::exp(static_cast<double>(sum / static_cast<long double>(count)));
}

std::vector<std::vector<int>> sweep_prompts(const std::vector<std::vector<int>>& prompts,
                                            std::size_t context, std::size_t tokens_per_seed,
                                            std::size_t* n_new) {
  check_prompts(prompts);
  const std::size_t plen = prompts[0].size();
  if (plen >= context + 1) throw RangeError("steering: prompt leaves no room to generate");
  *n_new = context + 1 - plen;
  const std::size_t n = (tokens_per_seed + *n_new - 1) / *n_new;
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prompts[i % prompts.size()]);
  return out;
}

template <typename Gen, typename Score>
SteeringSweep run_sweep(const Corpus& corpus, const std::vector<std::vector<int>>& prompts,
                        std::size_t context, int concept_index, int topic,
                        const std::vector<double>& multipliers,
                        const std::vector<std::uint64_t>& seeds, std::size_t tokens_per_seed,
                        Gen gen, Score score) {
  std::size_t n_new = 0;
  const auto batch = sweep_prompts(prompts, context, tokens_per_seed, &n_new);
  const std::size_t plen = prompts[0].size();
  SteeringSweep sweep;
  sweep.concept_index = concept_index;
  sweep.topic = topic;
  for (double m : multipliers) {
    SteeringRow row;
    row.multiplier = m;
    std::vector<double> ppl;
    for (std::uint64_t seed : seeds) {
      SampleOptions opt;
      opt.n_tokens = n_new;
      opt.seed = seed;
      const auto samples = gen(batch, opt, m);
      row.per_seed_frequency.push_back(topic_frequency(corpus, samples, plen, topic));
      ppl.push_back(score(samples, plen));
    }
    row.topic_k_frequency = median(row.per_seed_frequency);
    row.ppl_of_sample = median(ppl);
    sweep.rows.push_back(std::move(row));
  }
  return sweep;
}

}  // namespace

std::vector<std::vector<int>> generate(const Student& s,
                                       const std::vector<std::vector<int>>& prompts,
                                       const SampleOptions& opt,
                                       const std::optional<SteerSpec>& steer) {
  check_prompts(prompts);
  FrozenScope frozen(s.parameters());
  ConceptTransform transform;
  if (steer) {
    if (!s.mixer) throw ConfigError("steering needs a student with a concept head");
    const int c = s.mixer->n_concepts();
    if (steer->concept_index < 0 || steer->concept_index >= c) {
      throw RangeError("steer: concept index " + std::to_string(steer->concept_index) +
                       " outside [0, " + std::to_string(c) + ")");
    }
    const GraphTensor row = scale_row(static_cast<std::size_t>(c), steer->concept_index,
                                      steer->multiplier);
    const std::size_t k = static_cast<std::size_t>(s.mixer->k_mix());
    const bool after = steer->after_topk;
    transform = [row, k, after](const GraphTensor& z) {
      return ops::mul(after ? ops::topk_mask(z, k) : z, row);
    };
  }
  const ConceptTransform* tp = steer ? &transform : nullptr;
  return sample_loop(prompts, static_cast<std::size_t>(s.model.config().context_len), opt,
                     [&](const std::vector<std::vector<int>>& ctx) {
                       return student_forward(s, ctx, tp).logits;
                     });
}

std::vector<std::vector<int>> steer_teacher(const TransformerModel& teacher,
                                            const SaeModel& sae,
                                            const std::vector<std::vector<int>>& prompts,
                                            const SampleOptions& opt, const SteerSpec& steer) {
  check_prompts(prompts);
  if (steer.concept_index < 0 || steer.concept_index >= sae.n_concepts()) {
    throw RangeError("steer_teacher: concept index " + std::to_string(steer.concept_index) +
                     " outside [0, " + std::to_string(sae.n_concepts()) + ")");
  }
  FrozenScope frozen_t(teacher.parameters());
  FrozenScope frozen_s(sae.parameters());
  const GraphTensor row = scale_row(static_cast<std::size_t>(sae.n_concepts()),
                                    steer.concept_index, steer.multiplier);
  return sample_loop(prompts, static_cast<std::size_t>(teacher.config().context_len), opt,
                     [&](const std::vector<std::vector<int>>& ctx) {
                       const std::size_t len = ctx[0].size();
                       GraphTensor pre = ops::mul(sae.pre_activation(teacher.forward_prefix(ctx)), row);
                       GraphTensor rec = sae.decode(ops::topk_mask(pre, static_cast<std::size_t>(sae.k())));
                       return teacher.forward_suffix(rec, repeated_positions(ctx.size(), len), len);
                     });
}

double reconstructed_perplexity(const TransformerModel& teacher, const SaeModel& sae,
                                const std::vector<Window>& windows) {
  if (windows.empty()) throw RangeError("reconstructed_perplexity: no windows");
  FrozenScope frozen_t(teacher.parameters());
  FrozenScope frozen_s(sae.parameters());
  long double sum = 0.0L;
  std::size_t count = 0;
  for (std::size_t b = 0; b < windows.size(); b += 16) {
    std::vector<std::vector<int>> in;
    std::vector<int> targets;
    for (std::size_t i = b; i < std::min(windows.size(), b + 16); ++i) {
      in.push_back(windows[i].inputs());
      auto t = windows[i].targets();
      targets.insert(targets.end(), t.begin(), t.end());
    }
    const std::size_t len = in[0].size();
    GraphTensor rec = sae.decode(ops::topk_mask(sae.pre_activation(teacher.forward_prefix(in)),
                                                static_cast<std::size_t>(sae.k())));
    GraphTensor logits = teacher.forward_suffix(rec, repeated_positions(in.size(), len), len);
    sum += static_cast<long double>(ops::cross_entropy(logits, targets).item()) *
           static_cast<long double>(targets.size());
    count += targets.size();
  }
  return std::exp(static_cast<double>(sum / static_cast<long double>(count)));
}

double topic_frequency(const Corpus& corpus, const std::vector<std::vector<int>>& samples,
                       std::size_t prompt_len, int topic) {
  std::size_t hits = 0, total = 0;
  for (const auto& s : samples) {
    for (std::size_t i = prompt_len; i < s.size(); ++i) {
      hits += corpus.token_topic(s[i]) == topic ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

SteeringSweep steering_sweep(const Student& s, const Corpus& corpus,
                             const std::vector<std::vector<int>>& prompts, int concept_index,
                             int topic, const std::vector<double>& multipliers,
                             const std::vector<std::uint64_t>& seeds, std::size_t tokens_per_seed,
                             bool after_topk) {
  const std::size_t context = static_cast<std::size_t>(s.model.config().context_len);
  return run_sweep(
      corpus, prompts, context, concept_index, topic, multipliers, seeds, tokens_per_seed,
      [&](const std::vector<std::vector<int>>& batch, const SampleOptions& opt, double m) {
        return generate(s, batch, opt,
                        SteerSpec{concept_index, m, SteerTarget::kStudentLogits, after_topk});
      },
      [&](const std::vector<std::vector<int>>& samples, std::size_t plen) {
        FrozenScope frozen(s.parameters());
        return sample_perplexity(samples, plen, [&](const std::vector<std::vector<int>>& in) {
          return student_forward(s, in).logits;
        });
      });
}

SteeringSweep teacher_steering_sweep(const TransformerModel& teacher, const SaeModel& sae,
                                     const Corpus& corpus,
                                     const std::vector<std::vector<int>>& prompts,
                                     int concept_index, int topic,
                                     const std::vector<double>& multipliers,
                                     const std::vector<std::uint64_t>& seeds,
                                     std::size_t tokens_per_seed) {
  const std::size_t context = static_cast<std::size_t>(teacher.config().context_len);
  return run_sweep(
      corpus, prompts, context, concept_index, topic, multipliers, seeds, tokens_per_seed,
      [&](const std::vector<std::vector<int>>& batch, const SampleOptions& opt, double m) {
        return steer_teacher(teacher, sae, batch, opt,
                             SteerSpec{concept_index, m, SteerTarget::kTeacherSaeSpace});
      },
      [&](const std::vector<std::vector<int>>& samples, std::size_t plen) {
        FrozenScope frozen(teacher.parameters());
        return sample_perplexity(samples, plen, [&](const std::vector<std::vector<int>>& in) {
          return teacher.forward_full(in);
        });
      });
}

std::string format_steering_csv(const SteeringSweep& sweep) {
  std::string out = "multiplier,topic_k_frequency,ppl_of_sample\n";
  char buf[96];
  for (const auto& r : sweep.rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", r.multiplier, r.topic_k_frequency,
                  r.ppl_of_sample);
    out += buf;
  }
  return out;
}

void write_steering_csv(const std::string& path, const SteeringSweep& sweep) {
  io::write_text(path, format_steering_csv(sweep));
}

}  // namespace cocomix
