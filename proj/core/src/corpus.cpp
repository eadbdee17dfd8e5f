#include "cocomix/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <string>

#include "cocomix/error.hpp"

namespace cocomix {

namespace {

// Platform-independent draws (std distributions differ across libraries).
double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::size_t sample_index(std::span<const double> cdf, std::mt19937_64& rng) {
  const double u = uniform01(rng) * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  if (it == cdf.end()) --it;
  return static_cast<std::size_t>(it - cdf.begin());
}

// Cumulative random weights; small `concentration` gives peaked rows.
std::vector<double> random_cdf(std::size_t n, double concentration,
                               std::mt19937_64& rng) {
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = -std::log(1.0 - uniform01(rng));
    acc += std::pow(e, 1.0 / concentration);
    cdf[i] = acc;
  }
  return cdf;
}

}  // namespace

void CorpusSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("corpus spec: " + m); };
  if (vocab_size < 4) fail("vocab_size must be >= 4");
  if (n_topics < 1 || n_topics > vocab_size / 4) {
    fail("n_topics must satisfy 1 <= n_topics <= vocab_size/4");
  }
  if (!(topic_token_bias >= 0.0 && topic_token_bias <= 1.0)) {
    fail("topic_token_bias must lie in [0, 1]");
  }
  if (doc_len < 2) fail("doc_len must be >= 2");
  if (n_docs < 1) fail("n_docs must be >= 1");
  if (markov_order != 1) fail("only markov_order = 1 is supported");
  if (!shift_profile.empty()) {
    if (shift_profile.size() != static_cast<std::size_t>(n_topics)) {
      fail("shift_profile must have n_topics entries");
    }
    double sum = 0.0;
    for (double w : shift_profile) {
      if (!(w >= 0.0) || !std::isfinite(w)) fail("shift_profile weights must be >= 0");
      sum += w;
    }
    if (!(sum > 0.0)) fail("shift_profile must have positive mass");
  }
}

int CorpusSpec::topic_block() const { return vocab_size / (2 * n_topics); }

bool operator==(const CorpusSpec& a, const CorpusSpec& b) {
  return a.vocab_size == b.vocab_size && a.n_topics == b.n_topics &&
         a.topic_token_bias == b.topic_token_bias && a.doc_len == b.doc_len &&
         a.n_docs == b.n_docs && a.markov_order == b.markov_order &&
         a.seed == b.seed && a.shift_profile == b.shift_profile;
}

Digest Corpus::content_hash() const {
  Sha256 h;
  h.update("corpus/v1");
  h.update_u64(docs.size());
  for (std::size_t d = 0; d < docs.size(); ++d) {
    h.update_u64(static_cast<std::uint64_t>(topics[d]));
    h.update_u64(docs[d].size());
    for (int t : docs[d]) h.update_u64(static_cast<std::uint64_t>(t));
  }
  return h.finish();
}

int Corpus::token_topic(int token) const {
  const int block = spec.topic_block();
  if (token < 0 || token >= block * spec.n_topics) return -1;
  return token / block;
}

Corpus gen_corpus(const CorpusSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t v = static_cast<std::size_t>(spec.vocab_size);
  const std::size_t block = static_cast<std::size_t>(spec.topic_block());
  const std::size_t n_topics = static_cast<std::size_t>(spec.n_topics);

  std::vector<std::vector<double>> background(v);
  for (auto& row : background) row = random_cdf(v, 0.25, rng);
  std::vector<std::vector<std::vector<double>>> topical(n_topics);
  for (auto& chain : topical) {
    chain.resize(v);
    for (auto& row : chain) row = random_cdf(block, 0.5, rng);
  }
  std::vector<double> topic_cdf(n_topics);
  for (std::size_t k = 0; k < n_topics; ++k) {
    topic_cdf[k] = (k ? topic_cdf[k - 1] : 0.0) +
                   (spec.shift_profile.empty() ? 1.0 : spec.shift_profile[k]);
  }

  Corpus c;
  c.spec = spec;
  c.docs.resize(static_cast<std::size_t>(spec.n_docs));
  c.topics.resize(c.docs.size());
  for (std::size_t d = 0; d < c.docs.size(); ++d) {
    const std::size_t topic = sample_index(topic_cdf, rng);
    c.topics[d] = static_cast<int>(topic);
    auto& doc = c.docs[d];
    doc.resize(static_cast<std::size_t>(spec.doc_len));
    std::size_t prev = static_cast<std::size_t>(rng() % v);
    doc[0] = static_cast<int>(prev);
    for (std::size_t i = 1; i < doc.size(); ++i) {
      std::size_t next;
      if (uniform01(rng) < spec.topic_token_bias) {
        next = topic * block + sample_index(topical[topic][prev], rng);
      } else {
        next = sample_index(background[prev], rng);
      }
      doc[i] = static_cast<int>(next);
      prev = next;
    }
  }
  return c;
}

std::vector<Window> make_windows(const Corpus& corpus, int context_len,
                                 std::size_t doc_begin, std::size_t doc_end) {
  if (context_len < 1) throw ConfigError("make_windows: context_len must be >= 1");
  if (doc_begin > doc_end || doc_end > corpus.docs.size()) {
    throw RangeError("make_windows: document range out of bounds");
  }
  const std::size_t t = static_cast<std::size_t>(context_len);
  std::vector<Window> out;
  for (std::size_t d = doc_begin; d < doc_end; ++d) {
    const auto& doc = corpus.docs[d];
    if (doc.size() < 2) continue;
    const std::size_t n = (doc.size() - 1) / t;
    for (std::size_t w = 0; w < n; ++w) {
      Window win;
      win.doc = static_cast<std::uint32_t>(d);
      win.offset = static_cast<std::uint32_t>(w * t);
      win.topic = corpus.topics[d];
      win.tokens.assign(doc.begin() + static_cast<std::ptrdiff_t>(w * t),
                        doc.begin() + static_cast<std::ptrdiff_t>(w * t + t + 1));
      out.push_back(std::move(win));
    }
  }
  return out;
}

CorpusSplit split_corpus(const Corpus& corpus, std::size_t heldout_docs) {
  const std::size_t n = corpus.docs.size();
  if (heldout_docs == 0 || heldout_docs >= n) {
    throw ConfigError("split_corpus: heldout_docs must be in [1, n_docs)");
  }
  return {0, n - heldout_docs, n - heldout_docs, n};
}

BatchIter::BatchIter(std::size_t n_windows, std::size_t batch_size, std::uint64_t seed)
    : n_windows_(n_windows), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (n_windows < batch_size) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds " +
                      std::to_string(n_windows) + " training windows");
  }
}

std::vector<std::size_t> BatchIter::permutation(std::uint64_t epoch) const {
  if (epoch == cached_epoch_) return cached_perm_;
  std::vector<std::size_t> perm(n_windows_);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::swap(perm[i - 1], perm[rng() % i]);
  }
  cached_epoch_ = epoch;
  cached_perm_ = perm;
  return perm;
}

std::vector<std::size_t> BatchIter::batch(std::uint64_t step) const {
  const std::uint64_t per_epoch = steps_per_epoch();
  const std::uint64_t epoch = step / per_epoch;
  const std::size_t start = static_cast<std::size_t>(step % per_epoch) * batch_size_;
  const std::vector<std::size_t> perm = permutation(epoch);
  return {perm.begin() + static_cast<std::ptrdiff_t>(start),
          perm.begin() + static_cast<std::ptrdiff_t>(start + batch_size_)};
}

}  // namespace cocomix
