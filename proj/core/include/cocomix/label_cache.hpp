#pragma once

#include <string>

#include "cocomix/concept_select.hpp"
#include "cocomix/hash.hpp"

namespace cocomix {

// Everything a cached label file is valid for.
struct LabelKey {
  Digest teacher_hash{};
  Digest sae_hash{};
  Digest slice_hash{};
  SelectMode mode = SelectMode::kAttribution;
  RankBy rank = RankBy::kSigned;
  int n_concepts = 0;
  int k_attr = 0;
};

// "CLBL", u32 version, u32 C, u32 K_attr, u32 mode, u32 rank, teacher hash,
// SAE hash, corpus-slice hash, u64 positions, payload SHA-256 (32 bytes
// each), then per position K_attr u32 indices and K_attr f64 scores.
inline constexpr std::uint32_t kLabelCacheVersion = 1;

void write_label_cache(const std::string& path, const LabelKey& key, const LabelSet& labels);
// Throws FormatError on corruption (payload hash) or when the file does not
// match `key`.
LabelSet read_label_cache(const std::string& path, const LabelKey& key);
Digest label_cache_payload_hash(const std::string& path);

// Reads `path` when it holds labels for exactly this key; otherwise computes
// them with label_batch and writes the cache. `hit` reports which happened.
LabelSet cached_label_batch(const std::string& path, const TransformerModel& teacher,
                            const SaeModel& sae, const std::vector<Window>& windows,
                            int k_attr, SelectMode mode, RankBy rank, bool* hit = nullptr);

}  // namespace cocomix
