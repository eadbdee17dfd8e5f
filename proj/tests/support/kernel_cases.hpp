#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cocomix/tensor.hpp"

namespace cocomix::testing {

inline GraphTensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                          bool rg = true, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(r * c);
  for (double& x : v) x = nd(rng);
  return GraphTensor::matrix(r, c, std::move(v), rg);
}

// Values with pairwise gaps >= 0.05 so finite-difference probes never reorder
// entries (needed by topk_mask).
inline GraphTensor spaced_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    std::vector<double> row(c);
    for (std::size_t j = 0; j < c; ++j) row[j] = 0.1 * static_cast<double>(j) - 0.3;
    std::shuffle(row.begin(), row.end(), rng);
    std::copy(row.begin(), row.end(), v.begin() + static_cast<long>(i * c));
  }
  return GraphTensor::matrix(r, c, std::move(v), true);
}

// Scalar probe: sum(out * R) for a fixed random R.
inline GraphTensor probe(const GraphTensor& out, const GraphTensor& weights) {
  return ops::reduce_sum(ops::mul(out, weights));
}

struct KernelCase {
  std::string name;
  // Builds (loss_fn, params) from a trial seed.
  std::function<std::pair<std::function<GraphTensor()>, std::vector<GraphTensor>>(
      std::mt19937_64&)>
      make;
};

// One scalar-loss builder per differentiable kernel.
inline std::vector<KernelCase> kernel_cases() {
  using Fn = std::function<GraphTensor()>;
  using Made = std::pair<Fn, std::vector<GraphTensor>>;
  std::vector<KernelCase> cases;
  cases.push_back({"matmul", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 4, rng), b = random_matrix(4, 5, rng);
                     auto r = random_matrix(3, 5, rng, false);
                     return {[=] { return probe(ops::matmul(a, b), r); }, {a, b}};
                   }});
  cases.push_back({"add", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 4, rng), b = random_matrix(1, 4, rng);
                     auto r = random_matrix(3, 4, rng, false);
                     return {[=] { return probe(ops::add(a, b), r); }, {a, b}};
                   }});
  cases.push_back({"mul", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng);
                     auto c = random_matrix(1, 4, rng);
                     auto r = random_matrix(3, 4, rng, false);
                     return {[=] { return probe(ops::mul(ops::mul(a, b), c), r); }, {a, b, c}};
                   }});
  cases.push_back({"scale", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(2, 3, rng);
                     auto r = random_matrix(2, 3, rng, false);
                     return {[=] { return probe(ops::scale(a, -1.7), r); }, {a}};
                   }});
  cases.push_back({"gelu", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 4, rng, true, 1.0);
                     auto r = random_matrix(3, 4, rng, false);
                     return {[=] { return probe(ops::gelu(a), r); }, {a}};
                   }});
  cases.push_back({"layer_norm", [](std::mt19937_64& rng) -> Made {
                     auto x = random_matrix(3, 5, rng), g = random_matrix(1, 5, rng);
                     auto b = random_matrix(1, 5, rng);
                     auto r = random_matrix(3, 5, rng, false);
                     return {[=] { return probe(ops::layer_norm(x, g, b), r); }, {x, g, b}};
                   }});
  cases.push_back({"softmax", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 5, rng, true, 2.0);
                     auto r = random_matrix(3, 5, rng, false);
                     return {[=] { return probe(ops::softmax(a), r); }, {a}};
                   }});
  cases.push_back({"embedding_gather", [](std::mt19937_64& rng) -> Made {
                     auto t = random_matrix(5, 3, rng);
                     std::vector<int> ids{4, 0, 4, 2};
                     auto r = random_matrix(4, 3, rng, false);
                     return {[=] { return probe(ops::embedding_gather(t, ids), r); }, {t}};
                   }});
  cases.push_back({"topk_mask", [](std::mt19937_64& rng) -> Made {
                     auto a = spaced_matrix(3, 7, rng);
                     const std::size_t k = 1 + rng() % 7;
                     auto r = random_matrix(3, 7, rng, false);
                     return {[=] { return probe(ops::topk_mask(a, k), r); }, {a}};
                   }});
  cases.push_back({"concat_rows", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(2, 3, rng), b = random_matrix(1, 3, rng);
                     auto r = random_matrix(5, 3, rng, false);
                     return {[=] { return probe(ops::concat_rows({a, b, a}), r); }, {a, b}};
                   }});
  cases.push_back({"slice_rows", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(5, 3, rng);
                     auto r = random_matrix(2, 3, rng, false);
                     return {[=] { return probe(ops::slice_rows(a, 1, 3), r); }, {a}};
                   }});
  cases.push_back({"gather_rows", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(4, 3, rng);
                     std::vector<std::size_t> idx{3, 1, 1, 0};
                     auto r = random_matrix(4, 3, rng, false);
                     return {[=] { return probe(ops::gather_rows(a, idx), r); }, {a}};
                   }});
  cases.push_back({"reduce_mean", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 3, rng);
                     return {[=] { return ops::reduce_mean(ops::mul(a, a)); }, {a}};
                   }});
  cases.push_back({"reduce_sum", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 3, rng);
                     return {[=] { return ops::reduce_sum(ops::mul(a, a)); }, {a}};
                   }});
  cases.push_back({"log", [](std::mt19937_64& rng) -> Made {
                     std::uniform_real_distribution<double> u(0.2, 3.0);
                     std::vector<double> v(6);
                     for (double& x : v) x = u(rng);
                     auto a = GraphTensor::matrix(2, 3, v, true);
                     auto r = random_matrix(2, 3, rng, false);
                     return {[=] { return probe(ops::log(a), r); }, {a}};
                   }});
  cases.push_back({"abs", [](std::mt19937_64& rng) -> Made {
                     std::uniform_real_distribution<double> u(0.05, 2.0);
                     std::vector<double> v(6);
                     for (double& x : v) x = (rng() % 2 ? 1.0 : -1.0) * u(rng);
                     auto a = GraphTensor::matrix(2, 3, v, true);
                     auto r = random_matrix(2, 3, rng, false);
                     return {[=] { return probe(ops::abs(a), r); }, {a}};
                   }});
  cases.push_back({"attention", [](std::mt19937_64& rng) -> Made {
                     auto qkv = random_matrix(6, 12, rng);
                     auto r = random_matrix(6, 4, rng, false);
                     return {[=] { return probe(ops::attention(qkv, AttentionLayout{2, 3, {}}), r); },
                             {qkv}};
                   }});
  cases.push_back({"attention_masked", [](std::mt19937_64& rng) -> Made {
                     auto qkv = random_matrix(4, 6, rng);
                     AttentionLayout lay{1, 4, {1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 1, 0, 1, 1}};
                     auto r = random_matrix(4, 2, rng, false);
                     return {[=] { return probe(ops::attention(qkv, lay), r); }, {qkv}};
                   }});
  cases.push_back({"cross_entropy", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 5, rng, true, 2.0);
                     std::vector<int> t{0, 4, 2, 2, 1, 3};
                     return {[=] { return ops::cross_entropy(a, t, 2); }, {a}};
                   }});
  cases.push_back({"kl_divergence", [](std::mt19937_64& rng) -> Made {
                     auto p = ops::softmax(random_matrix(3, 4, rng, false));
                     auto a = random_matrix(3, 4, rng);
                     return {[=] { return ops::kl_divergence(p, a); }, {a}};
                   }});
  cases.push_back({"cosine_distance", [](std::mt19937_64& rng) -> Made {
                     auto a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng);
                     return {[=] { return ops::cosine_distance(a, b); }, {a, b}};
                   }});
  return cases;
}

}  // namespace cocomix::testing
