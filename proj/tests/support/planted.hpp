#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cocomix/sae.hpp"

namespace cocomix::testing {

// Rows that are sparse nonnegative combinations of `n_dirs` random unit
// directions in R^d: each row mixes `active` distinct directions with
// coefficients in [0.5, 2) plus isotropic noise of standard deviation `noise`.
struct PlantedDictionary {
  std::vector<std::vector<double>> directions;
  ActivationMatrix data;
};

inline PlantedDictionary planted_dictionary(std::size_t rows, std::size_t d, std::size_t n_dirs,
                                            std::size_t active, std::uint64_t seed,
                                            double noise = 0.01) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> coef(0.5, 2.0);
  PlantedDictionary p;
  p.directions.assign(n_dirs, std::vector<double>(d));
  for (auto& dir : p.directions) {
    double sq = 0.0;
    for (double& x : dir) {
      x = normal(rng);
      sq += x * x;
    }
    for (double& x : dir) x /= std::sqrt(sq);
  }
  p.data.rows = rows;
  p.data.cols = d;
  p.data.values.assign(rows * d, 0.0);
  std::vector<std::size_t> order(n_dirs);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < n_dirs; ++i) order[i] = i;
    for (std::size_t i = 0; i < active; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n_dirs - 1);
      std::swap(order[i], order[pick(rng)]);
      const double a = coef(rng);
      for (std::size_t j = 0; j < d; ++j) p.data.values[r * d + j] += a * p.directions[order[i]][j];
    }
    for (std::size_t j = 0; j < d; ++j) p.data.values[r * d + j] += noise * normal(rng);
  }
  return p;
}

inline ActivationMatrix slice_rows(const ActivationMatrix& m, std::size_t begin, std::size_t end) {
  ActivationMatrix out;
  out.rows = end - begin;
  out.cols = m.cols;
  out.values.assign(m.values.begin() + static_cast<std::ptrdiff_t>(begin * m.cols),
                    m.values.begin() + static_cast<std::ptrdiff_t>(end * m.cols));
  return out;
}

}  // namespace cocomix::testing
