#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cocomix/hash.hpp"

namespace cocomix {

// Planted-topic corpus. Token ids [0, n_topics * topic_block) are split into
// one block per topic; the remaining ids are background. Each document draws
// a topic, then every next token comes from the topic's own first-order
// chain over its block with probability topic_token_bias and from a shared
// background chain over the whole vocabulary otherwise.
struct CorpusSpec {
  int vocab_size = 256;
  int n_topics = 8;
  double topic_token_bias = 0.8;
  int doc_len = 129;
  int n_docs = 2200;
  int markov_order = 1;
  std::uint64_t seed = 0;
  // Optional topic sampling weights (distribution-shift arm); uniform if empty.
  std::vector<double> shift_profile;

  void validate() const;
  int topic_block() const;
};

bool operator==(const CorpusSpec& a, const CorpusSpec& b);

struct Corpus {
  CorpusSpec spec;
  std::vector<std::vector<int>> docs;
  std::vector<int> topics;

  Digest content_hash() const;
  // Topic owning a token id, or -1 for background tokens.
  int token_topic(int token) const;
};

Corpus gen_corpus(const CorpusSpec& spec);

// A training example: `tokens` holds context_len + 1 ids; inputs are the
// first context_len, targets the last context_len.
struct Window {
  std::uint32_t doc = 0;
  std::uint32_t offset = 0;
  int topic = 0;
  std::vector<int> tokens;

  std::vector<int> inputs() const { return {tokens.begin(), tokens.end() - 1}; }
  std::vector<int> targets() const { return {tokens.begin() + 1, tokens.end()}; }
};

// Consecutive non-overlapping windows (stride context_len, sharing boundary
// tokens) over the documents whose ids lie in [doc_begin, doc_end). A
// document of length L yields floor((L - 1) / context_len) windows.
std::vector<Window> make_windows(const Corpus& corpus, int context_len,
                                 std::size_t doc_begin, std::size_t doc_end);

// Held-out documents are the last `heldout_docs` ids; the rest train.
struct CorpusSplit {
  std::size_t train_begin = 0, train_end = 0;
  std::size_t heldout_begin = 0, heldout_end = 0;
};
CorpusSplit split_corpus(const Corpus& corpus, std::size_t heldout_docs);

// Deterministic random-access batch stream: batch `step` is a function of
// (seed, step) only, so a resumed run sees exactly the batches it would have.
// Each epoch visits every window once in an order shuffled by (seed, epoch).
class BatchIter {
 public:
  BatchIter(std::size_t n_windows, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::size_t> batch(std::uint64_t step) const;
  std::size_t batch_size() const { return batch_size_; }
  std::size_t steps_per_epoch() const { return n_windows_ / batch_size_; }

 private:
  std::vector<std::size_t> permutation(std::uint64_t epoch) const;

  std::size_t n_windows_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  mutable std::vector<std::size_t> cached_perm_;
};

}  // namespace cocomix
