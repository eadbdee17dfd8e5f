#include "cocomix/params.hpp"

#include <algorithm>

#include "cocomix/error.hpp"

namespace cocomix {

GraphTensor normal_leaf(Shape shape, double stddev, std::mt19937_64& rng,
                        bool requires_grad) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return GraphTensor::leaf(std::move(shape), std::move(v), requires_grad);
}

GraphTensor constant_leaf(Shape shape, double value, bool requires_grad) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return GraphTensor::leaf(std::move(shape), std::vector<double>(n, value),
                           requires_grad);
}

GraphTensor clone_leaf(const GraphTensor& t) {
  return GraphTensor::leaf(t.shape(),
                           std::vector<double>(t.values().begin(), t.values().end()),
                           t.requires_grad());
}

void set_trainable(const ParameterList& params, bool on) {
  for (const auto& p : params) {
    GraphTensor t = p.tensor;
    t.set_requires_grad(on);
  }
}

FrozenScope::FrozenScope(ParameterList params) : params_(std::move(params)) {
  for (auto& p : params_) {
    saved_.push_back(p.tensor.requires_grad());
    p.tensor.set_requires_grad(false);
  }
}

FrozenScope::~FrozenScope() {
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor.set_requires_grad(saved_[i]);
}

void zero_grads(const ParameterList& params) {
  for (const auto& p : params) {
    GraphTensor t = p.tensor;
    t.zero_grad();
  }
}

std::size_t count_parameters(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

void hash_parameters(Sha256& h, const ParameterList& params) {
  h.update_u64(params.size());
  for (const auto& p : params) {
    h.update(p.name);
    h.update_u64(p.tensor.shape().size());
    for (auto d : p.tensor.shape()) h.update_u64(d);
    h.update_values(p.tensor.values());
  }
}

void copy_parameter_values(const ParameterList& src, const ParameterList& dst) {
  if (src.size() != dst.size()) {
    throw ShapeError("copy_parameter_values: parameter count mismatch");
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw ShapeError("copy_parameter_values: mismatch at " + src[i].name);
    }
    GraphTensor d = dst[i].tensor;
    auto out = d.mutable_values();
    std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), out.begin());
  }
}

}  // namespace cocomix
