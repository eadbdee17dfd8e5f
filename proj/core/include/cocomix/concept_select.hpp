#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cocomix/corpus.hpp"
#include "cocomix/sae.hpp"
#include "cocomix/transformer.hpp"

namespace cocomix {

enum class SelectMode : std::uint32_t { kAttribution = 0, kActivation = 1 };
enum class RankBy : std::uint32_t { kSigned = 0, kAbsolute = 1 };

std::string select_mode_name(SelectMode m);
SelectMode parse_select_mode(const std::string& s);

// Per position t: a = c_pre * g, where g is the gradient of the teacher's
// NLL of x_{t+1} with respect to the C-dim decoder input when decode(c_t)
// replaces the hidden state at position t only.
struct AttributionScores {
  std::vector<double> a;
  std::vector<double> c_pre;
  std::vector<double> g;
  int next_token = 0;
};

// `indices` ascending with `scores` aligned. `padded` marks activation
// selections that needed inactive coordinates to reach K_attr.
struct ConceptSelection {
  std::vector<int> indices;
  std::vector<double> scores;
  bool padded = false;
};

// One entry per position t < tokens.size() - 1.
std::vector<AttributionScores> attribution(const TransformerModel& teacher,
                                           const SaeModel& sae,
                                           std::span<const int> tokens);

// NLL of tokens[t + 1] at position t with decode(code) substituted for the
// teacher hidden state at t and positions < t untouched. Reference path
// for checking the batched gradient.
double substituted_nll(const TransformerModel& teacher, const SaeModel& sae,
                       std::span<const int> tokens, std::size_t t,
                       std::span<const double> code);

ConceptSelection select_topk_concepts(std::span<const double> a, int k_attr,
                                      RankBy rank = RankBy::kSigned);

// Top-k_attr of the post-TopK code restricted to its active coordinates;
// if k_attr > K_SAE the remaining slots take the lowest-index inactive
// coordinates and `padded` is set.
ConceptSelection activation_select(const ConceptActivation& c, int k_attr);

// Labels for every (window, position) pair in window order: positions() =
// windows.size() * context_len.
struct LabelSet {
  int n_concepts = 0;
  int k_attr = 0;
  SelectMode mode = SelectMode::kAttribution;
  RankBy rank = RankBy::kSigned;
  std::vector<std::int32_t> indices;
  std::vector<double> scores;
  std::size_t padded_positions = 0;

  std::size_t positions() const {
    return k_attr ? indices.size() / static_cast<std::size_t>(k_attr) : 0;
  }
  std::span<const std::int32_t> indices_at(std::size_t pos) const {
    return std::span(indices).subspan(pos * static_cast<std::size_t>(k_attr),
                                      static_cast<std::size_t>(k_attr));
  }
};

LabelSet label_batch(const TransformerModel& teacher, const SaeModel& sae,
                     const std::vector<Window>& windows, int k_attr, SelectMode mode,
                     RankBy rank = RankBy::kSigned);

// Digest of the token content of a window list (the cache's slice key).
Digest windows_hash(const std::vector<Window>& windows);

}  // namespace cocomix
