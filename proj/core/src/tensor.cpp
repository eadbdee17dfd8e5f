#include "cocomix/tensor.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>

#include "cocomix/error.hpp"

namespace cocomix {

namespace detail {

struct Node {
  Shape shape;
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> parents;
  KernelKind kind = KernelKind::kLeaf;
  bool requires_grad = false;
  bool finite_checked = false;

  // Kernel attributes and values saved for the backward rule.
  double scalar = 0.0;
  std::size_t k = 0;
  std::size_t begin = 0;
  std::vector<std::size_t> index;
  std::vector<int> targets;
  std::vector<double> saved;
  std::vector<double> saved2;
  std::shared_ptr<const AttentionLayout> layout;
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct KernelAccess {
  static GraphTensor wrap(NodePtr n) { return GraphTensor(std::move(n)); }
  static const NodePtr& ptr(const GraphTensor& t) { return t.node_; }
};

namespace {

void set_shape(Node& n, Shape shape) {
  n.shape = std::move(shape);
  if (n.shape.empty()) {
    n.rows = 1;
    n.cols = 1;
  } else {
    n.cols = n.shape.back();
    n.rows = 1;
    for (std::size_t i = 0; i + 1 < n.shape.size(); ++i) n.rows *= n.shape[i];
  }
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

const Node& node_of(const GraphTensor& t, std::string_view kernel) {
  if (!t.defined()) {
    throw ShapeError(std::string(kernel) + ": undefined input tensor");
  }
  return *KernelAccess::ptr(t);
}

void require_finite(std::string_view kernel, const GraphTensor& t) {
  Node& n = *KernelAccess::ptr(t);
  if (n.finite_checked) return;
  for (double v : n.value) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(kernel) + ": non-finite input value");
    }
  }
  n.finite_checked = true;
}

// Creates an output node. Parents are retained only when some input requires
// grad, so inference graphs free intermediates eagerly.
NodePtr make_output(KernelKind kind, Shape shape,
                    std::initializer_list<GraphTensor> inputs) {
  auto n = std::make_shared<Node>();
  n->kind = kind;
  set_shape(*n, std::move(shape));
  n->value.assign(n->rows * n->cols, 0.0);
  for (const auto& in : inputs) {
    require_finite(kernel_name(kind), in);
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(KernelAccess::ptr(in));
  }
  return n;
}

std::vector<double>& grad_buffer(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k x n] += A^T * G where A is m x k and G is m x n.
void gemm_at_acc(const double* a, const double* g, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* __restrict grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* __restrict crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

std::vector<double> transpose(const double* x, std::size_t r, std::size_t c) {
  std::vector<double> t(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = x[i * c + j];
  return t;
}

enum class Broadcast { kSame, kRow };

Broadcast broadcast_mode(std::string_view kernel, const Node& a, const Node& b) {
  if (a.shape == b.shape) return Broadcast::kSame;
  const bool b_is_row = b.shape.size() <= 1 || b.rows == 1;
  if (b_is_row && b.cols == a.cols && b.value.size() == a.cols) {
    return Broadcast::kRow;
  }
  throw ShapeError(std::string(kernel) + ": incompatible shapes " +
                   shape_str(a.shape) + " and " + shape_str(b.shape));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

bool topk_less(const double* v, std::size_t a, std::size_t b) {
  return v[a] > v[b] || (v[a] == v[b] && a < b);
}

// Kept positions (sorted ascending) of the k largest entries of each row.
std::vector<std::size_t> topk_indices(const double* v, std::size_t rows,
                                      std::size_t cols, std::size_t k) {
  std::vector<std::size_t> kept(rows * k);
  std::vector<std::size_t> order(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v + r * cols;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k),
                      order.end(), [row](std::size_t a, std::size_t b) {
                        return topk_less(row, a, b);
                      });
    std::sort(order.begin(), order.begin() + static_cast<long>(k));
    std::copy_n(order.begin(), k, kept.begin() + static_cast<long>(r * k));
  }
  return kept;
}

void backward_rule(Node& n) {
  const std::vector<double>& g = n.grad;
  auto parent = [&](std::size_t i) -> Node& { return *n.parents[i]; };
  auto wants = [&](std::size_t i) { return n.parents[i]->requires_grad; };

  switch (n.kind) {
    case KernelKind::kLeaf:
      return;

    case KernelKind::kMatMul: {
      Node& a = parent(0);
      Node& b = parent(1);
      const std::size_t m = a.rows, k = a.cols, cols = b.cols;
      if (wants(0)) {
        std::vector<double> bt = transpose(b.value.data(), k, cols);
        gemm_acc(g.data(), bt.data(), grad_buffer(a).data(), m, cols, k);
      }
      if (wants(1)) {
        gemm_at_acc(a.value.data(), g.data(), grad_buffer(b).data(), m, k, cols);
      }
      return;
    }

    case KernelKind::kAdd: {
      Node& a = parent(0);
      Node& b = parent(1);
      if (wants(0)) {
        auto& ga = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants(1)) {
        auto& gb = grad_buffer(b);
        if (gb.size() == g.size()) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        } else {
          for (std::size_t r = 0; r < n.rows; ++r)
            for (std::size_t c = 0; c < n.cols; ++c) gb[c] += g[r * n.cols + c];
        }
      }
      return;
    }

    case KernelKind::kMul: {
      Node& a = parent(0);
      Node& b = parent(1);
      const bool row = b.value.size() != a.value.size();
      auto bval = [&](std::size_t r, std::size_t c) {
        return row ? b.value[c] : b.value[r * n.cols + c];
      };
      if (wants(0)) {
        auto& ga = grad_buffer(a);
        for (std::size_t r = 0; r < n.rows; ++r)
          for (std::size_t c = 0; c < n.cols; ++c)
            ga[r * n.cols + c] += g[r * n.cols + c] * bval(r, c);
      }
      if (wants(1)) {
        auto& gb = grad_buffer(b);
        for (std::size_t r = 0; r < n.rows; ++r)
          for (std::size_t c = 0; c < n.cols; ++c) {
            const double v = g[r * n.cols + c] * a.value[r * n.cols + c];
            if (row) gb[c] += v; else gb[r * n.cols + c] += v;
          }
      }
      return;
    }

    case KernelKind::kScale: {
      auto& ga = grad_buffer(parent(0));
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.scalar * g[i];
      return;
    }

    case KernelKind::kGelu: {
      Node& x = parent(0);
      auto& gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x.value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
      return;
    }

    case KernelKind::kLayerNorm: {
      Node& x = parent(0);
      Node& gamma = parent(1);
      Node& beta = parent(2);
      const std::size_t rows = n.rows, cols = n.cols;
      const std::vector<double>& xhat = n.saved;
      const std::vector<double>& rstd = n.saved2;
      if (wants(1)) {
        auto& gg = grad_buffer(gamma);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            gg[c] += g[r * cols + c] * xhat[r * cols + c];
      }
      if (wants(2)) {
        auto& gb = grad_buffer(beta);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
      if (wants(0)) {
        auto& gx = grad_buffer(x);
        std::vector<double> dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            dxhat[c] = g[r * cols + c] * gamma.value[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xhat[r * cols + c];
          }
          mean_d /= static_cast<double>(cols);
          mean_dx /= static_cast<double>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            gx[r * cols + c] +=
                rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
          }
        }
      }
      return;
    }

    case KernelKind::kSoftmax: {
      auto& gx = grad_buffer(parent(0));
      for (std::size_t r = 0; r < n.rows; ++r) {
        const double* y = n.value.data() + r * n.cols;
        const double* gy = g.data() + r * n.cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < n.cols; ++c) dot += gy[c] * y[c];
        for (std::size_t c = 0; c < n.cols; ++c)
          gx[r * n.cols + c] += y[c] * (gy[c] - dot);
      }
      return;
    }

    case KernelKind::kEmbeddingGather: {
      auto& gt = grad_buffer(parent(0));
      for (std::size_t r = 0; r < n.index.size(); ++r) {
        double* dst = gt.data() + n.index[r] * n.cols;
        const double* src = g.data() + r * n.cols;
        for (std::size_t c = 0; c < n.cols; ++c) dst[c] += src[c];
      }
      return;
    }

    case KernelKind::kTopKMask: {
      auto& gx = grad_buffer(parent(0));
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t j = 0; j < n.k; ++j) {
          const std::size_t pos = r * n.cols + n.index[r * n.k + j];
          gx[pos] += g[pos];
        }
      return;
    }

    case KernelKind::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        Node& p = parent(i);
        const std::size_t len = p.value.size();
        if (wants(i)) {
          auto& gp = grad_buffer(p);
          for (std::size_t j = 0; j < len; ++j) gp[j] += g[offset + j];
        }
        offset += len;
      }
      return;
    }

    case KernelKind::kSliceRows: {
      auto& gx = grad_buffer(parent(0));
      const std::size_t off = n.begin * n.cols;
      for (std::size_t j = 0; j < g.size(); ++j) gx[off + j] += g[j];
      return;
    }

    case KernelKind::kGatherRows: {
      auto& gx = grad_buffer(parent(0));
      for (std::size_t r = 0; r < n.index.size(); ++r) {
        double* dst = gx.data() + n.index[r] * n.cols;
        const double* src = g.data() + r * n.cols;
        for (std::size_t c = 0; c < n.cols; ++c) dst[c] += src[c];
      }
      return;
    }

    case KernelKind::kReduceMean:
    case KernelKind::kReduceSum: {
      Node& x = parent(0);
      auto& gx = grad_buffer(x);
      const double d = n.kind == KernelKind::kReduceMean
                           ? g[0] / static_cast<double>(x.value.size())
                           : g[0];
      for (double& v : gx) v += d;
      return;
    }

    case KernelKind::kLog: {
      Node& x = parent(0);
      auto& gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x.value[i];
      return;
    }

    case KernelKind::kAbs: {
      Node& x = parent(0);
      auto& gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x.value[i];
        gx[i] += v > 0.0 ? g[i] : (v < 0.0 ? -g[i] : 0.0);
      }
      return;
    }

    case KernelKind::kAttention: {
      Node& qkv = parent(0);
      auto& gqkv = grad_buffer(qkv);
      const AttentionLayout& lay = *n.layout;
      const std::size_t d = n.cols, stride = 3 * d, seg = lay.segment_len;
      const std::size_t heads = lay.n_heads, dh = d / heads;
      const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
      const std::size_t n_seg = n.rows / seg;
      const double* base = qkv.value.data();
      std::vector<double> dp(seg), ds(seg);
      for (std::size_t s = 0; s < n_seg; ++s) {
        for (std::size_t h = 0; h < heads; ++h) {
          const double* probs = n.saved.data() + ((s * heads + h) * seg) * seg;
          for (std::size_t i = 0; i < seg; ++i) {
            const std::size_t ri = s * seg + i;
            const double* go = g.data() + ri * d + h * dh;
            const double* p = probs + i * seg;
            double dot = 0.0;
            for (std::size_t j = 0; j < seg; ++j) {
              if (p[j] == 0.0) { dp[j] = 0.0; continue; }
              const double* v = base + (s * seg + j) * stride + 2 * d + h * dh;
              double acc = 0.0;
              for (std::size_t e = 0; e < dh; ++e) acc += go[e] * v[e];
              dp[j] = acc;
              dot += p[j] * acc;
            }
            const double* q = base + ri * stride + h * dh;
            double* gq = gqkv.data() + ri * stride + h * dh;
            for (std::size_t j = 0; j < seg; ++j) {
              if (p[j] == 0.0) continue;
              const std::size_t rj = s * seg + j;
              const double* kv = base + rj * stride + d + h * dh;
              double* gk = gqkv.data() + rj * stride + d + h * dh;
              double* gv = gqkv.data() + rj * stride + 2 * d + h * dh;
              const double dsij = p[j] * (dp[j] - dot) * inv;
              for (std::size_t e = 0; e < dh; ++e) {
                gv[e] += p[j] * go[e];
                gq[e] += dsij * kv[e];
                gk[e] += dsij * q[e];
              }
            }
          }
        }
      }
      return;
    }

    case KernelKind::kCrossEntropy: {
      Node& logits = parent(0);
      auto& gl = grad_buffer(logits);
      const std::size_t m = n.k;
      const double w = g[0] / static_cast<double>(n.targets.size());
      for (std::size_t r = 0; r < logits.rows; ++r) {
        const double* p = n.saved.data() + r * logits.cols;
        double* dst = gl.data() + r * logits.cols;
        for (std::size_t c = 0; c < logits.cols; ++c)
          dst[c] += w * static_cast<double>(m) * p[c];
        for (std::size_t j = 0; j < m; ++j)
          dst[static_cast<std::size_t>(n.targets[r * m + j])] -= w;
      }
      return;
    }

    case KernelKind::kKlDivergence: {
      Node& logits = parent(0);
      auto& gl = grad_buffer(logits);
      const double w = g[0] / static_cast<double>(logits.rows);
      for (std::size_t i = 0; i < gl.size(); ++i)
        gl[i] += w * (n.saved[i] - n.saved2[i]);
      return;
    }

    case KernelKind::kCosineDistance: {
      Node& a = parent(0);
      Node& b = parent(1);
      const std::size_t rows = a.rows, cols = a.cols;
      const double w = g[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const double dot = n.saved[3 * r];
        const double na = n.saved[3 * r + 1];
        const double nb = n.saved[3 * r + 2];
        const double cosv = dot / (na * nb);
        const double* av = a.value.data() + r * cols;
        const double* bv = b.value.data() + r * cols;
        if (wants(0)) {
          double* ga = grad_buffer(a).data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c)
            ga[c] -= w * (bv[c] / (na * nb) - cosv * av[c] / (na * na));
        }
        if (wants(1)) {
          double* gb = grad_buffer(b).data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c)
            gb[c] -= w * (av[c] / (na * nb) - cosv * bv[c] / (nb * nb));
        }
      }
      return;
    }
  }
}

}  // namespace

std::string_view kernel_name(KernelKind kind) {
  switch (kind) {
    case KernelKind::kLeaf: return "leaf";
    case KernelKind::kMatMul: return "matmul";
    case KernelKind::kAdd: return "add";
    case KernelKind::kMul: return "mul";
    case KernelKind::kScale: return "scale";
    case KernelKind::kGelu: return "gelu";
    case KernelKind::kLayerNorm: return "layer_norm";
    case KernelKind::kSoftmax: return "softmax";
    case KernelKind::kEmbeddingGather: return "embedding_gather";
    case KernelKind::kTopKMask: return "topk_mask";
    case KernelKind::kConcatRows: return "concat_rows";
    case KernelKind::kSliceRows: return "slice_rows";
    case KernelKind::kReduceMean: return "reduce_mean";
    case KernelKind::kLog: return "log";
    case KernelKind::kReduceSum: return "reduce_sum";
    case KernelKind::kGatherRows: return "gather_rows";
    case KernelKind::kAbs: return "abs";
    case KernelKind::kAttention: return "attention";
    case KernelKind::kCrossEntropy: return "cross_entropy";
    case KernelKind::kKlDivergence: return "kl_divergence";
    case KernelKind::kCosineDistance: return "cosine_distance";
  }
  return "unknown";
}

// ---- GraphTensor -----------------------------------------------------------

GraphTensor GraphTensor::leaf(Shape shape, std::vector<double> values,
                              bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("leaf: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto n = std::make_shared<Node>();
  set_shape(*n, std::move(shape));
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return GraphTensor(std::move(n));
}

GraphTensor GraphTensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return leaf(std::move(shape), std::move(v), requires_grad);
}

GraphTensor GraphTensor::scalar(double v, bool requires_grad) {
  return leaf({}, {v}, requires_grad);
}

GraphTensor GraphTensor::matrix(std::size_t rows, std::size_t cols,
                                std::vector<double> values, bool requires_grad) {
  return leaf({rows, cols}, std::move(values), requires_grad);
}

GraphTensor GraphTensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return leaf({n}, std::move(values), requires_grad);
}

const Shape& GraphTensor::shape() const { return node_->shape; }
std::size_t GraphTensor::numel() const { return node_->value.size(); }
std::size_t GraphTensor::rows() const { return node_->rows; }
std::size_t GraphTensor::cols() const { return node_->cols; }

std::span<const double> GraphTensor::values() const { return node_->value; }

std::span<double> GraphTensor::mutable_values() {
  if (node_->kind != KernelKind::kLeaf) {
    throw ShapeError("mutable_values: only leaf tensors may be modified");
  }
  node_->finite_checked = false;
  return node_->value;
}

double GraphTensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
  return node_->value[0];
}

double GraphTensor::at(std::size_t r, std::size_t c) const {
  return node_->value[r * node_->cols + c];
}

bool GraphTensor::requires_grad() const { return node_->requires_grad; }

void GraphTensor::set_requires_grad(bool on) {
  if (node_->kind != KernelKind::kLeaf) {
    throw ShapeError("set_requires_grad: only valid on leaf tensors");
  }
  node_->requires_grad = on;
}

bool GraphTensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> GraphTensor::grad() const { return node_->grad; }

std::span<double> GraphTensor::mutable_grad() { return grad_buffer(*node_); }

void GraphTensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

KernelKind GraphTensor::kind() const { return node_->kind; }
std::size_t GraphTensor::num_parents() const { return node_->parents.size(); }

GraphTensor GraphTensor::detach() const {
  return leaf(node_->shape, node_->value, false);
}

void GraphTensor::backward() const {
  if (!defined()) throw ShapeError("backward: undefined root");
  if (numel() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " +
                     shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; each node appears once in `order`.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->kind != KernelKind::kLeaf) n->grad.assign(n->value.size(), 0.0);
  }
  grad_buffer(*node_)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) backward_rule(**it);
}

// ---- kernels ---------------------------------------------------------------

namespace ops {

GraphTensor matmul(const GraphTensor& a, const GraphTensor& b) {
  const Node& na = node_of(a, "matmul");
  const Node& nb = node_of(b, "matmul");
  if (na.cols != nb.rows || nb.shape.size() != 2) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_str(na.shape) +
                     " x " + shape_str(nb.shape) + ")");
  }
  Shape out = na.shape.size() <= 1 ? Shape{nb.cols} : Shape{na.rows, nb.cols};
  NodePtr n = make_output(KernelKind::kMatMul, std::move(out), {a, b});
  gemm_acc(na.value.data(), nb.value.data(), n->value.data(), na.rows, na.cols,
           nb.cols);
  return KernelAccess::wrap(std::move(n));
}

GraphTensor add(const GraphTensor& a, const GraphTensor& b) {
  const Node& na = node_of(a, "add");
  const Node& nb = node_of(b, "add");
  const Broadcast mode = broadcast_mode("add", na, nb);
  NodePtr n = make_output(KernelKind::kAdd, na.shape, {a, b});
  for (std::size_t r = 0; r < na.rows; ++r)
    for (std::size_t c = 0; c < na.cols; ++c) {
      const std::size_t i = r * na.cols + c;
      n->value[i] = na.value[i] + (mode == Broadcast::kRow ? nb.value[c] : nb.value[i]);
    }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor mul(const GraphTensor& a, const GraphTensor& b) {
  const Node& na = node_of(a, "mul");
  const Node& nb = node_of(b, "mul");
  const Broadcast mode = broadcast_mode("mul", na, nb);
  NodePtr n = make_output(KernelKind::kMul, na.shape, {a, b});
  for (std::size_t r = 0; r < na.rows; ++r)
    for (std::size_t c = 0; c < na.cols; ++c) {
      const std::size_t i = r * na.cols + c;
      n->value[i] = na.value[i] * (mode == Broadcast::kRow ? nb.value[c] : nb.value[i]);
    }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor scale(const GraphTensor& x, double s) {
  const Node& nx = node_of(x, "scale");
  NodePtr n = make_output(KernelKind::kScale, nx.shape, {x});
  n->scalar = s;
  for (std::size_t i = 0; i < nx.value.size(); ++i) n->value[i] = s * nx.value[i];
  return KernelAccess::wrap(std::move(n));
}

GraphTensor sub(const GraphTensor& a, const GraphTensor& b) {
  return add(a, scale(b, -1.0));
}

GraphTensor gelu(const GraphTensor& x) {
  const Node& nx = node_of(x, "gelu");
  NodePtr n = make_output(KernelKind::kGelu, nx.shape, {x});
  for (std::size_t i = 0; i < nx.value.size(); ++i) {
    const double v = nx.value[i];
    n->value[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor layer_norm(const GraphTensor& x, const GraphTensor& gamma,
                       const GraphTensor& beta, double eps) {
  const Node& nx = node_of(x, "layer_norm");
  const Node& ng = node_of(gamma, "layer_norm");
  const Node& nb = node_of(beta, "layer_norm");
  if (ng.value.size() != nx.cols || nb.value.size() != nx.cols) {
    throw ShapeError("layer_norm: gamma/beta length must equal " +
                     std::to_string(nx.cols));
  }
  NodePtr n = make_output(KernelKind::kLayerNorm, nx.shape, {x, gamma, beta});
  const std::size_t rows = nx.rows, cols = nx.cols;
  n->saved.assign(rows * cols, 0.0);
  n->saved2.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = nx.value.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(cols);
    const double rstd = 1.0 / std::sqrt(var + eps);
    n->saved2[r] = rstd;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xh = (row[c] - mean) * rstd;
      n->saved[r * cols + c] = xh;
      n->value[r * cols + c] = xh * ng.value[c] + nb.value[c];
    }
  }
  if (!n->requires_grad) {
    n->saved.clear();
    n->saved2.clear();
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor softmax(const GraphTensor& x) {
  const Node& nx = node_of(x, "softmax");
  NodePtr n = make_output(KernelKind::kSoftmax, nx.shape, {x});
  for (std::size_t r = 0; r < nx.rows; ++r) {
    const double* in = nx.value.data() + r * nx.cols;
    double* out = n->value.data() + r * nx.cols;
    const double mx = *std::max_element(in, in + nx.cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < nx.cols; ++c) sum += (out[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < nx.cols; ++c) out[c] /= sum;
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor embedding_gather(const GraphTensor& table, std::span<const int> ids) {
  const Node& nt = node_of(table, "embedding_gather");
  if (nt.shape.size() != 2) throw ShapeError("embedding_gather: table must be 2-D");
  NodePtr n = make_output(KernelKind::kEmbeddingGather, {ids.size(), nt.cols}, {table});
  n->index.resize(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= nt.rows) {
      throw RangeError("embedding_gather: id " + std::to_string(ids[r]) +
                       " outside table of " + std::to_string(nt.rows) + " rows");
    }
    n->index[r] = static_cast<std::size_t>(ids[r]);
    std::copy_n(nt.value.data() + n->index[r] * nt.cols, nt.cols,
                n->value.data() + r * nt.cols);
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor topk_mask(const GraphTensor& x, std::size_t k) {
  const Node& nx = node_of(x, "topk_mask");
  if (k == 0 || k > nx.cols) {
    throw RangeError("topk_mask: k=" + std::to_string(k) +
                     " must lie in [1, " + std::to_string(nx.cols) + "]");
  }
  NodePtr n = make_output(KernelKind::kTopKMask, nx.shape, {x});
  n->k = k;
  n->index = topk_indices(nx.value.data(), nx.rows, nx.cols, k);
  for (std::size_t r = 0; r < nx.rows; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t pos = r * nx.cols + n->index[r * k + j];
      n->value[pos] = nx.value[pos];
    }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor concat_rows(std::span<const GraphTensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = node_of(parts[0], "concat_rows").cols;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    const Node& np = node_of(p, "concat_rows");
    if (np.cols != cols) {
      throw ShapeError("concat_rows: column mismatch " + std::to_string(np.cols) +
                       " vs " + std::to_string(cols));
    }
    rows += np.rows;
  }
  auto n = std::make_shared<Node>();
  n->kind = KernelKind::kConcatRows;
  set_shape(*n, {rows, cols});
  n->value.reserve(rows * cols);
  for (const auto& p : parts) {
    require_finite("concat_rows", p);
    const Node& np = *KernelAccess::ptr(p);
    n->value.insert(n->value.end(), np.value.begin(), np.value.end());
    if (np.requires_grad) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& p : parts) n->parents.push_back(KernelAccess::ptr(p));
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor concat_rows(std::initializer_list<GraphTensor> parts) {
  return concat_rows(std::span<const GraphTensor>(parts.begin(), parts.size()));
}

GraphTensor slice_rows(const GraphTensor& x, std::size_t begin, std::size_t end) {
  const Node& nx = node_of(x, "slice_rows");
  if (begin > end || end > nx.rows) {
    throw RangeError("slice_rows: [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") outside " + std::to_string(nx.rows) +
                     " rows");
  }
  NodePtr n = make_output(KernelKind::kSliceRows, {end - begin, nx.cols}, {x});
  n->begin = begin;
  std::copy(nx.value.begin() + static_cast<long>(begin * nx.cols),
            nx.value.begin() + static_cast<long>(end * nx.cols), n->value.begin());
  return KernelAccess::wrap(std::move(n));
}

GraphTensor gather_rows(const GraphTensor& x, std::span<const std::size_t> indices) {
  const Node& nx = node_of(x, "gather_rows");
  NodePtr n = make_output(KernelKind::kGatherRows, {indices.size(), nx.cols}, {x});
  n->index.assign(indices.begin(), indices.end());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= nx.rows) {
      throw RangeError("gather_rows: row " + std::to_string(indices[r]) +
                       " outside " + std::to_string(nx.rows) + " rows");
    }
    std::copy_n(nx.value.data() + indices[r] * nx.cols, nx.cols,
                n->value.data() + r * nx.cols);
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor reduce_mean(const GraphTensor& x) {
  const Node& nx = node_of(x, "reduce_mean");
  NodePtr n = make_output(KernelKind::kReduceMean, {}, {x});
  double s = 0.0;
  for (double v : nx.value) s += v;
  n->value[0] = s / static_cast<double>(nx.value.size());
  return KernelAccess::wrap(std::move(n));
}

GraphTensor reduce_sum(const GraphTensor& x) {
  const Node& nx = node_of(x, "reduce_sum");
  NodePtr n = make_output(KernelKind::kReduceSum, {}, {x});
  double s = 0.0;
  for (double v : nx.value) s += v;
  n->value[0] = s;
  return KernelAccess::wrap(std::move(n));
}

GraphTensor log(const GraphTensor& x) {
  const Node& nx = node_of(x, "log");
  NodePtr n = make_output(KernelKind::kLog, nx.shape, {x});
  for (std::size_t i = 0; i < nx.value.size(); ++i) {
    if (nx.value[i] <= 0.0) throw NonFiniteError("log: non-positive input");
    n->value[i] = std::log(nx.value[i]);
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor abs(const GraphTensor& x) {
  const Node& nx = node_of(x, "abs");
  NodePtr n = make_output(KernelKind::kAbs, nx.shape, {x});
  for (std::size_t i = 0; i < nx.value.size(); ++i) n->value[i] = std::fabs(nx.value[i]);
  return KernelAccess::wrap(std::move(n));
}

GraphTensor attention(const GraphTensor& qkv, const AttentionLayout& layout) {
  const Node& nq = node_of(qkv, "attention");
  if (nq.cols % 3 != 0) throw ShapeError("attention: qkv width must be 3*d");
  const std::size_t d = nq.cols / 3;
  auto lay = std::make_shared<AttentionLayout>(layout);
  if (lay->segment_len == 0) lay->segment_len = nq.rows;
  const std::size_t seg = lay->segment_len, heads = lay->n_heads;
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: d=" + std::to_string(d) +
                     " not divisible by n_heads=" + std::to_string(heads));
  }
  if (nq.rows % seg != 0) {
    throw ShapeError("attention: " + std::to_string(nq.rows) +
                     " rows not a multiple of segment length " + std::to_string(seg));
  }
  if (!lay->mask.empty() && lay->mask.size() != seg * seg) {
    throw ShapeError("attention: mask must be segment_len^2");
  }
  NodePtr n = make_output(KernelKind::kAttention, {nq.rows, d}, {qkv});
  const std::size_t dh = d / heads, stride = 3 * d, n_seg = nq.rows / seg;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(n_seg * heads * seg * seg, 0.0);
  const double* base = nq.value.data();
  for (std::size_t s = 0; s < n_seg; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* pblock = probs.data() + ((s * heads + h) * seg) * seg;
      for (std::size_t i = 0; i < seg; ++i) {
        const double* q = base + (s * seg + i) * stride + h * dh;
        double* p = pblock + i * seg;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < seg; ++j) {
          if (!lay->visible(i, j)) continue;
          const double* kv = base + (s * seg + j) * stride + d + h * dh;
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += q[e] * kv[e];
          p[j] = acc * inv;
          mx = std::max(mx, p[j]);
          any = true;
        }
        if (any && !std::isfinite(mx)) {
          throw NonFiniteError("attention: non-finite score in row " + std::to_string(i));
        }
        if (!any) {
          throw ShapeError("attention: row " + std::to_string(i) + " attends to nothing");
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < seg; ++j) {
          if (!lay->visible(i, j)) continue;
          p[j] = std::exp(p[j] - mx);
          sum += p[j];
        }
        double* out = n->value.data() + (s * seg + i) * d + h * dh;
        for (std::size_t j = 0; j < seg; ++j) {
          if (!lay->visible(i, j)) continue;
          p[j] /= sum;
          const double* v = base + (s * seg + j) * stride + 2 * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) out[e] += p[j] * v[e];
        }
      }
    }
  }
  if (n->requires_grad) {
    n->saved = std::move(probs);
    n->layout = std::move(lay);
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor cross_entropy(const GraphTensor& logits, std::span<const int> targets,
                          std::size_t targets_per_row) {
  const Node& nl = node_of(logits, "cross_entropy");
  if (targets_per_row == 0 || targets.size() != nl.rows * targets_per_row) {
    throw ShapeError("cross_entropy: expected " +
                     std::to_string(nl.rows * targets_per_row) + " targets, got " +
                     std::to_string(targets.size()));
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= nl.cols) {
      throw RangeError("cross_entropy: target index " + std::to_string(t) +
                       " outside [0, " + std::to_string(nl.cols) + ")");
    }
  }
  NodePtr n = make_output(KernelKind::kCrossEntropy, {}, {logits});
  n->k = targets_per_row;
  n->targets.assign(targets.begin(), targets.end());
  n->saved.resize(nl.value.size());
  double total = 0.0;
  for (std::size_t r = 0; r < nl.rows; ++r) {
    const double* z = nl.value.data() + r * nl.cols;
    double* p = n->saved.data() + r * nl.cols;
    const double mx = *std::max_element(z, z + nl.cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < nl.cols; ++c) sum += (p[c] = std::exp(z[c] - mx));
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < nl.cols; ++c) p[c] /= sum;
    for (std::size_t j = 0; j < targets_per_row; ++j)
      total += lse - z[static_cast<std::size_t>(targets[r * targets_per_row + j])];
  }
  n->value[0] = total / static_cast<double>(targets.size());
  if (!n->requires_grad) n->saved.clear();
  return KernelAccess::wrap(std::move(n));
}

GraphTensor cross_entropy(const GraphTensor& logits, int target) {
  const int t[1] = {target};
  return cross_entropy(logits, std::span<const int>(t, 1), 1);
}

GraphTensor kl_divergence(const GraphTensor& target_probs, const GraphTensor& logits) {
  const Node& np = node_of(target_probs, "kl_divergence");
  const Node& nl = node_of(logits, "kl_divergence");
  if (np.rows != nl.rows || np.cols != nl.cols) {
    throw ShapeError("kl_divergence: shape mismatch " + shape_str(np.shape) +
                     " vs " + shape_str(nl.shape));
  }
  require_finite("kl_divergence", target_probs);
  NodePtr n = make_output(KernelKind::kKlDivergence, {}, {logits});
  n->saved.resize(nl.value.size());
  n->saved2 = np.value;
  double total = 0.0;
  for (std::size_t r = 0; r < nl.rows; ++r) {
    const double* z = nl.value.data() + r * nl.cols;
    const double* p = np.value.data() + r * nl.cols;
    double* q = n->saved.data() + r * nl.cols;
    const double mx = *std::max_element(z, z + nl.cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < nl.cols; ++c) sum += (q[c] = std::exp(z[c] - mx));
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < nl.cols; ++c) {
      q[c] /= sum;
      if (p[c] > 0.0) total += p[c] * (std::log(p[c]) - (z[c] - lse));
    }
  }
  n->value[0] = total / static_cast<double>(nl.rows);
  if (!n->requires_grad) {
    n->saved.clear();
    n->saved2.clear();
  }
  return KernelAccess::wrap(std::move(n));
}

GraphTensor cosine_distance(const GraphTensor& a, const GraphTensor& b) {
  const Node& na = node_of(a, "cosine_distance");
  const Node& nb = node_of(b, "cosine_distance");
  if (na.rows != nb.rows || na.cols != nb.cols) {
    throw ShapeError("cosine_distance: shape mismatch " + shape_str(na.shape) +
                     " vs " + shape_str(nb.shape));
  }
  NodePtr n = make_output(KernelKind::kCosineDistance, {}, {a, b});
  n->saved.resize(3 * na.rows);
  double total = 0.0;
  for (std::size_t r = 0; r < na.rows; ++r) {
    const double* av = na.value.data() + r * na.cols;
    const double* bv = nb.value.data() + r * na.cols;
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t c = 0; c < na.cols; ++c) {
      dot += av[c] * bv[c];
      sa += av[c] * av[c];
      sb += bv[c] * bv[c];
    }
    const double nrm_a = std::max(std::sqrt(sa), 1e-12);
    const double nrm_b = std::max(std::sqrt(sb), 1e-12);
    n->saved[3 * r] = dot;
    n->saved[3 * r + 1] = nrm_a;
    n->saved[3 * r + 2] = nrm_b;
    total += 1.0 - dot / (nrm_a * nrm_b);
  }
  n->value[0] = total / static_cast<double>(na.rows);
  return KernelAccess::wrap(std::move(n));
}

}  // namespace ops

GraphTensor forward(KernelKind kind, std::span<const GraphTensor> inputs,
                    const KernelAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(kernel_name(kind)) + ": expected " +
                       std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case KernelKind::kLeaf:
      need(1);
      return inputs[0];
    case KernelKind::kMatMul: need(2); return ops::matmul(inputs[0], inputs[1]);
    case KernelKind::kAdd: need(2); return ops::add(inputs[0], inputs[1]);
    case KernelKind::kMul: need(2); return ops::mul(inputs[0], inputs[1]);
    case KernelKind::kScale: need(1); return ops::scale(inputs[0], attrs.scale);
    case KernelKind::kGelu: need(1); return ops::gelu(inputs[0]);
    case KernelKind::kLayerNorm:
      need(3);
      return ops::layer_norm(inputs[0], inputs[1], inputs[2]);
    case KernelKind::kSoftmax: need(1); return ops::softmax(inputs[0]);
    case KernelKind::kEmbeddingGather: {
      need(1);
      std::vector<int> ids(attrs.indices.begin(), attrs.indices.end());
      return ops::embedding_gather(inputs[0], ids);
    }
    case KernelKind::kTopKMask: need(1); return ops::topk_mask(inputs[0], attrs.k);
    case KernelKind::kConcatRows: return ops::concat_rows(inputs);
    case KernelKind::kSliceRows:
      need(1);
      return ops::slice_rows(inputs[0], attrs.begin, attrs.end);
    case KernelKind::kReduceMean: need(1); return ops::reduce_mean(inputs[0]);
    case KernelKind::kLog: need(1); return ops::log(inputs[0]);
    case KernelKind::kReduceSum: need(1); return ops::reduce_sum(inputs[0]);
    case KernelKind::kGatherRows: need(1); return ops::gather_rows(inputs[0], attrs.indices);
    case KernelKind::kAbs: need(1); return ops::abs(inputs[0]);
    case KernelKind::kAttention: need(1); return ops::attention(inputs[0], attrs.attention);
    case KernelKind::kCrossEntropy:
      need(1);
      return ops::cross_entropy(inputs[0], attrs.targets, attrs.targets_per_row);
    case KernelKind::kKlDivergence: need(2); return ops::kl_divergence(inputs[0], inputs[1]);
    case KernelKind::kCosineDistance:
      need(2);
      return ops::cosine_distance(inputs[0], inputs[1]);
  }
  throw ShapeError("forward: unknown kernel kind");
}

}  // namespace cocomix
