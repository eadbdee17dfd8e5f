#include "cocomix/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace cocomix {

GradCheckReport finite_diff_check(const std::function<GraphTensor()>& loss_fn,
                                  std::span<GraphTensor> params, double eps,
                                  std::size_t samples, std::uint64_t seed,
                                  double abs_floor) {
  for (auto& p : params) p.zero_grad();
  GraphTensor loss = loss_fn();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    GraphTensor& p = params[pi];
    const std::size_t n = p.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (samples < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(samples);
    }
    for (std::size_t idx : coords) {
      auto values = p.mutable_values();
      const double orig = values[idx];
      values[idx] = orig + eps;
      const double up = loss_fn().item();
      p.mutable_values()[idx] = orig - eps;
      const double down = loss_fn().item();
      p.mutable_values()[idx] = orig;

      const double numeric = (up - down) / (2.0 * eps);
      const double g = analytic[pi][idx];
      const double rel = std::fabs(g - numeric) / std::max(std::fabs(g), abs_floor);
      ++report.coordinates_checked;
      if (rel > report.max_rel_err || report.coordinates_checked == 1) {
        report.max_rel_err = rel;
        report.worst_param = pi;
        report.worst_index = idx;
        report.worst_autodiff = g;
        report.worst_numeric = numeric;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace cocomix
