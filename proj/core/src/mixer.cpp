#include "cocomix/mixer.hpp"

#include <random>
#include <string>

#include "cocomix/error.hpp"

namespace cocomix {

namespace {
constexpr double kInitStd = 0.02;
std::size_t sz(int v) { return static_cast<std::size_t>(v); }
}  // namespace

ConceptMixer::ConceptMixer(int d_model, int n_concepts, int k_mix, std::uint64_t seed)
    : d_model_(d_model), n_concepts_(n_concepts), k_mix_(k_mix) {
  if (d_model < 1 || n_concepts < 1) throw ConfigError("mixer: dimensions must be positive");
  if (k_mix < 1 || k_mix > n_concepts) {
    throw ConfigError("mixer: K_mix must satisfy 1 <= K_mix <= C (got " +
                      std::to_string(k_mix) + ")");
  }
  std::mt19937_64 rng(seed);
  head_w_ = normal_leaf({sz(d_model), sz(n_concepts)}, kInitStd, rng);
  head_b_ = constant_leaf({sz(n_concepts)}, 0.0);
  comp_w_ = normal_leaf({sz(n_concepts), sz(d_model)}, kInitStd, rng);
  comp_b_ = constant_leaf({sz(d_model)}, 0.0);
}

GraphTensor ConceptMixer::predict(const GraphTensor& h) const {
  if (h.cols() != sz(d_model_)) {
    throw ShapeError("predict_concepts: hidden width " + std::to_string(h.cols()) +
                     " != " + std::to_string(d_model_));
  }
  return ops::add(ops::matmul(h, head_w_), head_b_);
}

GraphTensor ConceptMixer::compress(const GraphTensor& z) const {
  if (z.cols() != sz(n_concepts_)) {
    throw ShapeError("compress: concept width " + std::to_string(z.cols()) +
                     " != " + std::to_string(n_concepts_));
  }
  return ops::add(ops::matmul(ops::topk_mask(z, sz(k_mix_)), comp_w_), comp_b_);
}

ParameterList ConceptMixer::parameters() const {
  return {{"mixer.head_w", head_w_}, {"mixer.head_b", head_b_},
          {"mixer.comp_w", comp_w_}, {"mixer.comp_b", comp_b_}};
}

GraphTensor concept_loss(const GraphTensor& z, std::span<const int> labels, std::size_t k) {
  if (k == 0 || labels.size() != z.rows() * k) {
    throw ShapeError("concept_loss: expected " + std::to_string(z.rows() * k) +
                     " labels, got " + std::to_string(labels.size()));
  }
  return ops::cross_entropy(z, labels, k);
}

DirectHead::DirectHead(int d_model, int d_teacher, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = sz(d_model), dc = sz(d_teacher);
  w1 = normal_leaf({d, d}, kInitStd, rng);
  b1 = constant_leaf({d}, 0.0);
  w2 = normal_leaf({d, dc}, kInitStd, rng);
  b2 = constant_leaf({dc}, 0.0);
  wc = normal_leaf({dc, d}, kInitStd, rng);
  bc = constant_leaf({d}, 0.0);
}

GraphTensor DirectHead::predict(const GraphTensor& h) const {
  return ops::add(ops::matmul(ops::gelu(ops::add(ops::matmul(h, w1), b1)), w2), b2);
}

GraphTensor DirectHead::compress(const GraphTensor& g) const {
  return ops::add(ops::matmul(g, wc), bc);
}

ParameterList DirectHead::parameters() const {
  return {{"direct.w1", w1}, {"direct.b1", b1}, {"direct.w2", w2},
          {"direct.b2", b2}, {"direct.wc", wc}, {"direct.bc", bc}};
}

GraphTensor direct_loss(const GraphTensor& pred, const GraphTensor& target, DirectLoss kind) {
  if (pred.shape() != target.shape()) throw ShapeError("direct_loss: shape mismatch");
  const double inv_rows = 1.0 / static_cast<double>(pred.rows());
  switch (kind) {
    case DirectLoss::kL1:
      return ops::scale(ops::reduce_sum(ops::abs(ops::sub(target, pred))), inv_rows);
    case DirectLoss::kL2: {
      GraphTensor diff = ops::sub(target, pred);
      return ops::scale(ops::reduce_sum(ops::mul(diff, diff)), inv_rows);
    }
    case DirectLoss::kCos:
      return ops::cosine_distance(pred, target);
  }
  throw ConfigError("direct_loss: unknown kind");
}

Interleaved interleave(const GraphTensor& h, const GraphTensor& c_hat, std::size_t t,
                       bool shared_positions) {
  if (h.shape() != c_hat.shape()) {
    throw ShapeError("interleave: hidden and concept sequences differ in shape");
  }
  if (t == 0 || h.rows() % t != 0) throw ShapeError("interleave: rows not a multiple of T");
  const std::size_t n = h.rows(), b = n / t;
  Interleaved out;
  out.segment_len = 2 * t;
  std::vector<std::size_t> order(2 * n);
  out.position_ids.resize(2 * n);
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t row = s * 2 * t + 2 * i;
      order[row] = s * t + i;
      order[row + 1] = n + s * t + i;
      out.position_ids[row] = static_cast<int>(shared_positions ? i : 2 * i);
      out.position_ids[row + 1] = static_cast<int>(shared_positions ? i : 2 * i + 1);
      out.token_slots.push_back(row);
      out.concept_slots.push_back(row + 1);
    }
  }
  out.rows = ops::gather_rows(ops::concat_rows({h, c_hat}), order);
  return out;
}

std::pair<GraphTensor, GraphTensor> deinterleave(const Interleaved& mixed) {
  return {ops::gather_rows(mixed.rows, mixed.token_slots),
          ops::gather_rows(mixed.rows, mixed.concept_slots)};
}

GraphTensor intervene(const GraphTensor& h, const GraphTensor& c_hat) {
  if (h.shape() != c_hat.shape()) throw ShapeError("intervene: shape mismatch");
  return ops::add(h, c_hat);
}

}  // namespace cocomix
