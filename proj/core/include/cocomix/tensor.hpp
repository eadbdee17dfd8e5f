#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace cocomix {

// Closed set of differentiable kernels. Every kind has a forward rule in
// tensor.cpp and a matching backward rule in the same switch.
enum class KernelKind : std::uint8_t {
  kLeaf,
  kMatMul,
  kAdd,
  kMul,
  kScale,
  kGelu,
  kLayerNorm,
  kSoftmax,
  kEmbeddingGather,
  kTopKMask,
  kConcatRows,
  kSliceRows,
  kReduceMean,
  kLog,
  kReduceSum,
  kGatherRows,
  kAbs,
  kAttention,
  kCrossEntropy,
  kKlDivergence,
  kCosineDistance,
};

std::string_view kernel_name(KernelKind kind);

using Shape = std::vector<std::size_t>;

// Row layout for the fused multi-head attention kernel. Rows are grouped into
// independent segments of `segment_len`; within a segment, row i may attend to
// row j iff visible(i, j). An empty mask means causal (j <= i).
struct AttentionLayout {
  std::size_t n_heads = 1;
  std::size_t segment_len = 0;
  std::vector<std::uint8_t> mask;

  bool visible(std::size_t i, std::size_t j) const {
    return mask.empty() ? j <= i : mask[i * segment_len + j] != 0;
  }
};

namespace detail {
struct Node;
}

// Node handle in a dynamic computation graph. Copies share the node. Values
// are 64-bit and row-major; rank-0 and rank-1 tensors are treated as a single
// row by the matrix kernels.
class GraphTensor {
 public:
  GraphTensor() = default;

  static GraphTensor leaf(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static GraphTensor zeros(Shape shape, bool requires_grad = false);
  static GraphTensor scalar(double v, bool requires_grad = false);
  static GraphTensor matrix(std::size_t rows, std::size_t cols,
                            std::vector<double> values,
                            bool requires_grad = false);
  static GraphTensor vector(std::vector<double> values,
                            bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Only leaves may be mutated in place (parameters, finite-difference probes).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  KernelKind kind() const;
  std::size_t num_parents() const;

  // Reverse-mode sweep from a scalar root; leaf gradients accumulate.
  void backward() const;

  // New leaf holding a copy of the values, cut from the graph.
  GraphTensor detach() const;

  detail::Node* node() const { return node_.get(); }

 private:
  explicit GraphTensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct KernelAccess;
};

// Attributes for the generic `forward` dispatcher.
struct KernelAttrs {
  double scale = 1.0;
  std::size_t k = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> indices;
  std::vector<int> targets;
  std::size_t targets_per_row = 1;
  AttentionLayout attention;
};

GraphTensor forward(KernelKind kind, std::span<const GraphTensor> inputs,
                    const KernelAttrs& attrs = {});

namespace ops {

GraphTensor matmul(const GraphTensor& a, const GraphTensor& b);
// Elementwise; `b` may also be a single row broadcast over the rows of `a`.
GraphTensor add(const GraphTensor& a, const GraphTensor& b);
GraphTensor mul(const GraphTensor& a, const GraphTensor& b);
GraphTensor scale(const GraphTensor& x, double s);
GraphTensor sub(const GraphTensor& a, const GraphTensor& b);
GraphTensor gelu(const GraphTensor& x);
GraphTensor layer_norm(const GraphTensor& x, const GraphTensor& gamma,
                       const GraphTensor& beta, double eps = 1e-5);
GraphTensor softmax(const GraphTensor& x);
GraphTensor embedding_gather(const GraphTensor& table,
                             std::span<const int> ids);
// Row-wise: keeps the k largest entries, ties broken toward the lowest index.
GraphTensor topk_mask(const GraphTensor& x, std::size_t k);
GraphTensor concat_rows(std::span<const GraphTensor> parts);
GraphTensor concat_rows(std::initializer_list<GraphTensor> parts);
GraphTensor slice_rows(const GraphTensor& x, std::size_t begin,
                       std::size_t end);
GraphTensor gather_rows(const GraphTensor& x,
                        std::span<const std::size_t> indices);
GraphTensor reduce_mean(const GraphTensor& x);
GraphTensor reduce_sum(const GraphTensor& x);
GraphTensor log(const GraphTensor& x);
GraphTensor abs(const GraphTensor& x);

// Fused multi-head scaled dot-product attention over a packed (rows x 3d)
// [q | k | v] matrix; returns rows x d.
GraphTensor attention(const GraphTensor& qkv, const AttentionLayout& layout);

// Mean over all (row, target) pairs of -log softmax(logits[row])[target].
// `targets` holds targets_per_row entries per row.
GraphTensor cross_entropy(const GraphTensor& logits, std::span<const int> targets,
                          std::size_t targets_per_row = 1);
GraphTensor cross_entropy(const GraphTensor& logits, int target);

// Mean over rows of KL(p || softmax(logits)); `target_probs` is treated as a
// constant (no gradient flows into it).
GraphTensor kl_divergence(const GraphTensor& target_probs,
                          const GraphTensor& logits);

// Mean over rows of 1 - cos(a_r, b_r).
GraphTensor cosine_distance(const GraphTensor& a, const GraphTensor& b);

}  // namespace ops

}  // namespace cocomix
