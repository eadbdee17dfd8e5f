#include "cocomix/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cocomix/error.hpp"

namespace cocomix {

namespace {

// Adds -log softmax(row)[target] for each row to `sum`, in row order.
void accumulate_nll(const GraphTensor& logits, std::span<const int> targets, long double& sum) {
  const std::size_t v = logits.cols();
  const auto x = logits.values();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const double* row = x.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    sum += static_cast<long double>(std::log(z) + mx - row[targets[r]]);
  }
}

template <typename Forward>
double chunked_perplexity(const std::vector<Window>& windows, std::size_t batch, Forward fwd) {
  if (windows.empty()) throw RangeError("perplexity: no evaluation windows");
  if (batch == 0) batch = 1;
  long double sum = 0.0L;
  std::size_t count = 0;
  for (std::size_t b = 0; b < windows.size(); b += batch) {
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    for (std::size_t i = b; i < std::min(windows.size(), b + batch); ++i) {
      inputs.push_back(windows[i].inputs());
      auto t = windows[i].targets();
      targets.insert(targets.end(), t.begin(), t.end());
    }
    accumulate_nll(fwd(inputs), targets, sum);
    count += targets.size();
  }
  return std::exp(static_cast<double>(sum / static_cast<long double>(count)));
}

}  // namespace

void check_disjoint(const std::vector<Window>& train, const std::vector<Window>& heldout) {
  std::set<std::uint32_t> docs;
  for (const auto& w : train) docs.insert(w.doc);
  for (const auto& w : heldout) {
    if (docs.count(w.doc)) {
      throw RangeError("held-out document " + std::to_string(w.doc) + " also appears in training");
    }
  }
}

double perplexity(const Student& s, const std::vector<Window>& windows,
                  const std::vector<Window>* train_windows, std::size_t batch) {
  if (train_windows) check_disjoint(*train_windows, windows);
  FrozenScope frozen(s.parameters());
  return chunked_perplexity(windows, batch, [&](const std::vector<std::vector<int>>& in) {
    return student_forward(s, in).logits;
  });
}

double perplexity(const TransformerModel& m, const std::vector<Window>& windows,
                  std::size_t batch) {
  FrozenScope frozen(m.parameters());
  return chunked_perplexity(windows, batch, [&](const std::vector<std::vector<int>>& in) {
    return m.forward_full(in);
  });
}

ColumnNormReport compression_column_norms(const ConceptMixer& mixer, double threshold) {
  const GraphTensor& w = mixer.comp_w();
  const std::size_t c = w.rows(), d = w.cols();
  const auto v = w.values();
  ColumnNormReport rep;
  rep.threshold = threshold;
  rep.norms.resize(c);
  std::size_t below = 0;
  for (std::size_t i = 0; i < c; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += v[i * d + j] * v[i * d + j];
    rep.norms[i] = std::sqrt(sq);
    if (rep.norms[i] < threshold) ++below;
  }
  for (double x : v) rep.frobenius_sq += x * x;
  rep.fraction_below = c ? static_cast<double>(below) / static_cast<double>(c) : 0.0;
  return rep;
}

namespace {

TopicAssociation associate(std::size_t n_concepts, int n_topics,
                           const std::vector<std::vector<double>>& sums,
                           const std::vector<std::size_t>& counts) {
  TopicAssociation a;
  a.n_topics = n_topics;
  a.n_concepts = static_cast<int>(n_concepts);
  std::vector<double> global(n_concepts, 0.0);
  std::size_t total = 0;
  for (int k = 0; k < n_topics; ++k) {
    for (std::size_t j = 0; j < n_concepts; ++j) global[j] += sums[static_cast<std::size_t>(k)][j];
    total += counts[static_cast<std::size_t>(k)];
  }
  if (total == 0) throw RangeError("concept_topic_association: no positions");
  for (double& g : global) g /= static_cast<double>(total);
  for (int k = 0; k < n_topics; ++k) {
    const std::size_t kk = static_cast<std::size_t>(k);
    std::vector<double> centered(n_concepts, 0.0);
    if (counts[kk] > 0) {
      for (std::size_t j = 0; j < n_concepts; ++j) {
        centered[j] = sums[kk][j] / static_cast<double>(counts[kk]) - global[j];
      }
    }
    std::vector<int> order(n_concepts);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
      return centered[static_cast<std::size_t>(x)] > centered[static_cast<std::size_t>(y)];
    });
    a.top_concept.push_back(order[0]);
    a.margin.push_back(n_concepts > 1 ? centered[static_cast<std::size_t>(order[0])] -
                                            centered[static_cast<std::size_t>(order[1])]
                                      : 0.0);
    a.ranked.push_back(std::move(order));
    a.centered_mean.push_back(std::move(centered));
  }
  return a;
}

template <typename Codes>
TopicAssociation accumulate_association(const std::vector<Window>& windows, int n_topics,
                                        std::size_t width, Codes codes) {
  std::vector<std::vector<double>> sums(static_cast<std::size_t>(n_topics),
                                        std::vector<double>(width, 0.0));
  std::vector<std::size_t> counts(static_cast<std::size_t>(n_topics), 0);
  const std::size_t chunk = 32;
  for (std::size_t b = 0; b < windows.size(); b += chunk) {
    std::vector<std::vector<int>> inputs;
    const std::size_t e = std::min(windows.size(), b + chunk);
    for (std::size_t i = b; i < e; ++i) inputs.push_back(windows[i].inputs());
    GraphTensor z = codes(inputs);
    const auto v = z.values();
    const std::size_t t = inputs[0].size();
    for (std::size_t i = b; i < e; ++i) {
      const int topic = windows[i].topic;
      if (topic < 0 || topic >= n_topics) throw RangeError("window topic outside [0, n_topics)");
      auto& acc = sums[static_cast<std::size_t>(topic)];
      for (std::size_t r = 0; r < t; ++r) {
        const double* row = v.data() + ((i - b) * t + r) * width;
        for (std::size_t j = 0; j < width; ++j) acc[j] += row[j];
      }
      counts[static_cast<std::size_t>(topic)] += t;
    }
  }
  return associate(width, n_topics, sums, counts);
}

}  // namespace

TopicAssociation concept_topic_association(const Student& s,
                                           const std::vector<Window>& windows, int n_topics) {
  if (!s.mixer) throw ConfigError("concept_topic_association: student has no concept head");
  FrozenScope frozen(s.parameters());
  return accumulate_association(
      windows, n_topics, static_cast<std::size_t>(s.mixer->n_concepts()),
      [&](const std::vector<std::vector<int>>& in) {
        return s.mixer->predict(s.model.forward_prefix(in));
      });
}

TopicAssociation concept_topic_association(const TransformerModel& teacher,
                                           const SaeModel& sae,
                                           const std::vector<Window>& windows, int n_topics) {
  FrozenScope frozen_t(teacher.parameters());
  FrozenScope frozen_s(sae.parameters());
  return accumulate_association(
      windows, n_topics, static_cast<std::size_t>(sae.n_concepts()),
      [&](const std::vector<std::vector<int>>& in) {
        return ops::topk_mask(sae.pre_activation(teacher.forward_prefix(in)),
                              static_cast<std::size_t>(sae.k()));
      });
}

}  // namespace cocomix
