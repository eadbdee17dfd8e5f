#pragma once

#include <cstddef>
#include <vector>

#include "cocomix/corpus.hpp"
#include "cocomix/sae.hpp"
#include "cocomix/trainer.hpp"

namespace cocomix {

// exp(mean next-token NLL) over every target of every window, with the
// student's method deciding where logits are read. Throws RangeError when
// `train_windows` is given and shares a document with `windows`.
double perplexity(const Student& s, const std::vector<Window>& windows,
                  const std::vector<Window>* train_windows = nullptr,
                  std::size_t batch = 16);
// Same for a plain transformer (teacher or NTP model).
double perplexity(const TransformerModel& m, const std::vector<Window>& windows,
                  std::size_t batch = 16);

void check_disjoint(const std::vector<Window>& train, const std::vector<Window>& heldout);

struct ColumnNormReport {
  std::vector<double> norms;  // one per concept (compression column)
  double threshold = 1e-2;
  double fraction_below = 0.0;
  double frobenius_sq = 0.0;  // ||W||_F^2, equal to the sum of squared norms
};
ColumnNormReport compression_column_norms(const ConceptMixer& mixer, double threshold = 1e-2);

// Mean concept activation per topic minus the global mean, and each topic's
// best concept with its margin over the runner-up.
struct TopicAssociation {
  int n_topics = 0;
  int n_concepts = 0;
  std::vector<std::vector<double>> centered_mean;  // [topic][concept]
  std::vector<int> top_concept;                    // per topic
  std::vector<double> margin;                      // per topic
  std::vector<std::vector<int>> ranked;            // per topic, best first
};

// Student side reads the concept logits z; SAE side reads the teacher's
// post-TopK codes c.
TopicAssociation concept_topic_association(const Student& s,
                                           const std::vector<Window>& windows, int n_topics);
TopicAssociation concept_topic_association(const TransformerModel& teacher,
                                           const SaeModel& sae,
                                           const std::vector<Window>& windows, int n_topics);

}  // namespace cocomix
