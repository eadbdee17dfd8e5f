#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

#include "cocomix/tensor.hpp"

namespace cocomix {

struct GradCheckReport {
  double max_rel_err = 0.0;
  // Parameter position in the list passed in, and flat index inside it.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

// Compares autodiff gradients against central differences
// (f(p + eps) - f(p - eps)) / 2 eps on `samples` random coordinates of every
// parameter (all coordinates when the parameter is smaller). The relative
// error denominator is max(|autodiff|, abs_floor). Parameters are restored.
GradCheckReport finite_diff_check(const std::function<GraphTensor()>& loss_fn,
                                  std::span<GraphTensor> params, double eps,
                                  std::size_t samples, std::uint64_t seed = 0,
                                  double abs_floor = 1e-8);

}  // namespace cocomix
