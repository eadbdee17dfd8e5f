#pragma once

#include <random>
#include <string>
#include <vector>

#include "cocomix/hash.hpp"
#include "cocomix/tensor.hpp"

namespace cocomix {

struct NamedTensor {
  std::string name;
  GraphTensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

// Seeded N(0, stddev^2) leaf; fills in row-major order.
GraphTensor normal_leaf(Shape shape, double stddev, std::mt19937_64& rng,
                        bool requires_grad = true);
GraphTensor constant_leaf(Shape shape, double value, bool requires_grad = true);

// Independent leaf with the same values and requires_grad flag.
GraphTensor clone_leaf(const GraphTensor& t);

void set_trainable(const ParameterList& params, bool on);

// Turns gradient tracking off for the lifetime of the guard, then restores
// each parameter's previous flag.
class FrozenScope {
 public:
  explicit FrozenScope(ParameterList params);
  ~FrozenScope();
  FrozenScope(const FrozenScope&) = delete;
  FrozenScope& operator=(const FrozenScope&) = delete;

 private:
  ParameterList params_;
  std::vector<bool> saved_;
};
void zero_grads(const ParameterList& params);
std::size_t count_parameters(const ParameterList& params);

// Digest over names, shapes and values in list order.
void hash_parameters(Sha256& h, const ParameterList& params);

// Copies values from `src` into `dst` by name; both lists must match exactly.
void copy_parameter_values(const ParameterList& src, const ParameterList& dst);

}  // namespace cocomix
