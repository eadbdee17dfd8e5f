#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cocomix/hash.hpp"
#include "cocomix/params.hpp"
#include "cocomix/tensor.hpp"

namespace cocomix {

// GPT-style decoder configuration. `split_layer` counts blocks from 1: the
// prefix runs blocks 1..split_layer, the suffix the rest.
struct ModelConfig {
  int vocab_size = 256;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int context_len = 32;
  int split_layer = 2;
  std::uint64_t seed = 0;

  void validate() const;
  static int default_split_layer(int n_layers) { return n_layers / 2; }
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

struct BlockParams {
  GraphTensor ln1_gamma, ln1_beta;
  // No qkv bias: the key bias is softmax-invariant (identically zero
  // gradient) and the value bias is absorbed by b_out.
  GraphTensor w_qkv;
  GraphTensor w_out, b_out;
  GraphTensor ln2_gamma, ln2_beta;
  GraphTensor w_fc, b_fc;
  GraphTensor w_proj, b_proj;
};

// Pre-norm decoder with learned absolute positions. The positional table has
// 2 * context_len rows: the prefix adds positions 0..T-1 to the token
// embeddings, and the suffix re-adds the embedding of the caller-supplied
// position id to every incoming hidden row, so an interleaved sequence of
// length 2T can carry positions 0..2T-1.
//
// Copies are deleted because parameters are shared graph leaves; use clone().
class TransformerModel {
 public:
  explicit TransformerModel(const ModelConfig& config);
  TransformerModel(TransformerModel&&) = default;
  TransformerModel& operator=(TransformerModel&&) = default;
  TransformerModel(const TransformerModel&) = delete;
  TransformerModel& operator=(const TransformerModel&) = delete;

  TransformerModel clone() const;

  const ModelConfig& config() const { return config_; }
  int d_model() const { return config_.d_model; }

  // Hidden states after block `split_layer` for one sequence: T x d.
  GraphTensor forward_prefix(std::span<const int> tokens) const;
  // Equal-length sequences packed row-wise: (B*T) x d.
  GraphTensor forward_prefix(std::span<const std::vector<int>> batch) const;

  // Runs the remaining blocks, final norm and unembedding over an S x d hidden
  // sequence. `segment_len` splits the rows into independent sequences
  // (0 = one sequence); `mask` overrides the causal mask within a segment.
  GraphTensor forward_suffix(const GraphTensor& hidden,
                             std::span<const int> position_ids,
                             std::size_t segment_len = 0,
                             const std::vector<std::uint8_t>* mask = nullptr) const;
  // Same as forward_suffix but stops after the final norm (rows x d).
  GraphTensor suffix_hidden(const GraphTensor& hidden,
                            std::span<const int> position_ids,
                            std::size_t segment_len = 0,
                            const std::vector<std::uint8_t>* mask = nullptr) const;
  GraphTensor unembed(const GraphTensor& normed) const;

  GraphTensor forward_full(std::span<const int> tokens) const;
  GraphTensor forward_full(std::span<const std::vector<int>> batch) const;

  ParameterList parameters() const;
  void set_trainable(bool on) const;
  Digest content_hash() const;

  // Direct access for tests and analysis.
  const GraphTensor& token_embedding() const { return tok_emb_; }
  const GraphTensor& position_embedding() const { return pos_emb_; }
  const GraphTensor& output_weight() const { return w_head_; }
  const GraphTensor& output_bias() const { return b_head_; }

 private:
  GraphTensor run_block(const BlockParams& b, const GraphTensor& x,
                        const AttentionLayout& layout) const;
  GraphTensor embed(std::span<const int> tokens, std::size_t seq_len) const;

  ModelConfig config_;
  GraphTensor tok_emb_;
  GraphTensor pos_emb_;
  std::vector<BlockParams> blocks_;
  GraphTensor lnf_gamma_, lnf_beta_;
  GraphTensor w_head_, b_head_;
};

}  // namespace cocomix
