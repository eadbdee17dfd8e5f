#include "cocomix/transformer.hpp"

#include <random>
#include <string>

#include "cocomix/error.hpp"

namespace cocomix {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_layers < 2) fail("n_layers must be >= 2");
  if (split_layer < 1 || split_layer >= n_layers) {
    fail("split_layer must satisfy 1 <= split_layer < n_layers (got " +
         std::to_string(split_layer) + ")");
  }
  if (context_len < 2) fail("context_len must be >= 2");
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.vocab_size == b.vocab_size && a.d_model == b.d_model &&
         a.n_layers == b.n_layers && a.n_heads == b.n_heads &&
         a.context_len == b.context_len && a.split_layer == b.split_layer &&
         a.seed == b.seed;
}

namespace {

constexpr double kInitStd = 0.02;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

}  // namespace

TransformerModel::TransformerModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t d = sz(config_.d_model), v = sz(config_.vocab_size);
  tok_emb_ = normal_leaf({v, d}, kInitStd, rng);
  pos_emb_ = normal_leaf({2 * sz(config_.context_len), d}, kInitStd, rng);
  for (int l = 0; l < config_.n_layers; ++l) {
    BlockParams b;
    b.ln1_gamma = constant_leaf({d}, 1.0);
    b.ln1_beta = constant_leaf({d}, 0.0);
    b.w_qkv = normal_leaf({d, 3 * d}, kInitStd, rng);
    b.w_out = normal_leaf({d, d}, kInitStd, rng);
    b.b_out = constant_leaf({d}, 0.0);
    b.ln2_gamma = constant_leaf({d}, 1.0);
    b.ln2_beta = constant_leaf({d}, 0.0);
    b.w_fc = normal_leaf({d, 4 * d}, kInitStd, rng);
    b.b_fc = constant_leaf({4 * d}, 0.0);
    b.w_proj = normal_leaf({4 * d, d}, kInitStd, rng);
    b.b_proj = constant_leaf({d}, 0.0);
    blocks_.push_back(std::move(b));
  }
  lnf_gamma_ = constant_leaf({d}, 1.0);
  lnf_beta_ = constant_leaf({d}, 0.0);
  w_head_ = normal_leaf({d, v}, kInitStd, rng);
  b_head_ = constant_leaf({v}, 0.0);
}

TransformerModel TransformerModel::clone() const {
  TransformerModel copy(config_);
  copy_parameter_values(parameters(), copy.parameters());
  const auto src = parameters();
  const auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    GraphTensor t = dst[i].tensor;
    t.set_requires_grad(src[i].tensor.requires_grad());
  }
  return copy;
}

ParameterList TransformerModel::parameters() const {
  ParameterList out;
  out.push_back({"tok_emb", tok_emb_});
  out.push_back({"pos_emb", pos_emb_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    const BlockParams& b = blocks_[l];
    out.push_back({p + "ln1.gamma", b.ln1_gamma});
    out.push_back({p + "ln1.beta", b.ln1_beta});
    out.push_back({p + "attn.w_qkv", b.w_qkv});
    out.push_back({p + "attn.w_out", b.w_out});
    out.push_back({p + "attn.b_out", b.b_out});
    out.push_back({p + "ln2.gamma", b.ln2_gamma});
    out.push_back({p + "ln2.beta", b.ln2_beta});
    out.push_back({p + "mlp.w_fc", b.w_fc});
    out.push_back({p + "mlp.b_fc", b.b_fc});
    out.push_back({p + "mlp.w_proj", b.w_proj});
    out.push_back({p + "mlp.b_proj", b.b_proj});
  }
  out.push_back({"ln_f.gamma", lnf_gamma_});
  out.push_back({"ln_f.beta", lnf_beta_});
  out.push_back({"head.w", w_head_});
  out.push_back({"head.b", b_head_});
  return out;
}

void TransformerModel::set_trainable(bool on) const {
  cocomix::set_trainable(parameters(), on);
}

Digest TransformerModel::content_hash() const {
  Sha256 h;
  h.update("transformer/v1");
  for (int v : {config_.vocab_size, config_.d_model, config_.n_layers,
                config_.n_heads, config_.context_len, config_.split_layer}) {
    h.update_u64(static_cast<std::uint64_t>(v));
  }
  h.update_u64(config_.seed);
  hash_parameters(h, parameters());
  return h.finish();
}

GraphTensor TransformerModel::run_block(const BlockParams& b, const GraphTensor& x,
                                        const AttentionLayout& layout) const {
  GraphTensor a = ops::layer_norm(x, b.ln1_gamma, b.ln1_beta);
  GraphTensor qkv = ops::matmul(a, b.w_qkv);
  GraphTensor att = ops::attention(qkv, layout);
  GraphTensor h = ops::add(x, ops::add(ops::matmul(att, b.w_out), b.b_out));
  GraphTensor m = ops::layer_norm(h, b.ln2_gamma, b.ln2_beta);
  GraphTensor f = ops::gelu(ops::add(ops::matmul(m, b.w_fc), b.b_fc));
  return ops::add(h, ops::add(ops::matmul(f, b.w_proj), b.b_proj));
}

GraphTensor TransformerModel::embed(std::span<const int> tokens,
                                    std::size_t seq_len) const {
  if (seq_len == 0) throw RangeError("forward_prefix: empty token sequence");
  if (seq_len > sz(config_.context_len)) {
    throw RangeError("forward_prefix: sequence length " + std::to_string(seq_len) +
                     " exceeds context_len " + std::to_string(config_.context_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config_.vocab_size) {
      throw RangeError("forward_prefix: token id " + std::to_string(t) +
                       " outside vocabulary of " + std::to_string(config_.vocab_size));
    }
  }
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    positions[i] = static_cast<int>(i % seq_len);
  }
  return ops::add(ops::embedding_gather(tok_emb_, tokens),
                  ops::embedding_gather(pos_emb_, positions));
}

GraphTensor TransformerModel::forward_prefix(std::span<const int> tokens) const {
  GraphTensor x = embed(tokens, tokens.size());
  AttentionLayout layout{sz(config_.n_heads), tokens.size(), {}};
  for (int l = 0; l < config_.split_layer; ++l) x = run_block(blocks_[sz(l)], x, layout);
  return x;
}

GraphTensor TransformerModel::forward_prefix(
    std::span<const std::vector<int>> batch) const {
  if (batch.empty()) throw RangeError("forward_prefix: empty batch");
  const std::size_t t = batch[0].size();
  std::vector<int> flat;
  flat.reserve(batch.size() * t);
  for (const auto& seq : batch) {
    if (seq.size() != t) throw ShapeError("forward_prefix: ragged batch");
    flat.insert(flat.end(), seq.begin(), seq.end());
  }
  GraphTensor x = embed(flat, t);
  AttentionLayout layout{sz(config_.n_heads), t, {}};
  for (int l = 0; l < config_.split_layer; ++l) x = run_block(blocks_[sz(l)], x, layout);
  return x;
}

GraphTensor TransformerModel::suffix_hidden(const GraphTensor& hidden,
                                            std::span<const int> position_ids,
                                            std::size_t segment_len,
                                            const std::vector<std::uint8_t>* mask) const {
  const std::size_t rows = hidden.rows();
  if (hidden.cols() != sz(config_.d_model)) {
    throw ShapeError("forward_suffix: hidden width " + std::to_string(hidden.cols()) +
                     " != d_model " + std::to_string(config_.d_model));
  }
  if (position_ids.size() != rows) {
    throw ShapeError("forward_suffix: " + std::to_string(position_ids.size()) +
                     " position ids for " + std::to_string(rows) + " rows");
  }
  const std::size_t seg = segment_len == 0 ? rows : segment_len;
  if (rows == 0 || rows % seg != 0) {
    throw ShapeError("forward_suffix: rows not a multiple of segment length");
  }
  const std::size_t max_pos = 2 * sz(config_.context_len);
  if (seg > max_pos) {
    throw RangeError("forward_suffix: sequence length " + std::to_string(seg) +
                     " exceeds 2*context_len " + std::to_string(max_pos));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const int p = position_ids[i];
    if (p < 0 || sz(p) >= max_pos) {
      throw RangeError("forward_suffix: position id " + std::to_string(p) +
                       " outside [0, " + std::to_string(max_pos) + ")");
    }
    if (mask == nullptr && i % seg != 0 && p < position_ids[i - 1]) {
      throw RangeError("forward_suffix: position ids must be nondecreasing");
    }
  }
  GraphTensor x = ops::add(hidden, ops::embedding_gather(pos_emb_, position_ids));
  AttentionLayout layout{sz(config_.n_heads), seg, mask ? *mask : std::vector<std::uint8_t>{}};
  for (int l = config_.split_layer; l < config_.n_layers; ++l) {
    x = run_block(blocks_[sz(l)], x, layout);
  }
  return ops::layer_norm(x, lnf_gamma_, lnf_beta_);
}

GraphTensor TransformerModel::unembed(const GraphTensor& normed) const {
  return ops::add(ops::matmul(normed, w_head_), b_head_);
}

GraphTensor TransformerModel::forward_suffix(const GraphTensor& hidden,
                                             std::span<const int> position_ids,
                                             std::size_t segment_len,
                                             const std::vector<std::uint8_t>* mask) const {
  return unembed(suffix_hidden(hidden, position_ids, segment_len, mask));
}

GraphTensor TransformerModel::forward_full(std::span<const int> tokens) const {
  GraphTensor h = forward_prefix(tokens);
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  return forward_suffix(h, positions);
}

GraphTensor TransformerModel::forward_full(std::span<const std::vector<int>> batch) const {
  GraphTensor h = forward_prefix(batch);
  const std::size_t t = batch[0].size();
  std::vector<int> positions(batch.size() * t);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % t);
  return forward_suffix(h, positions, t);
}

}  // namespace cocomix
