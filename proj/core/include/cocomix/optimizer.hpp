#pragma once

#include <cstdint>
#include <vector>

#include "cocomix/params.hpp"

namespace cocomix {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// Linear warmup to lr_max over warmup_steps, then cosine decay to
// final_lr_frac * lr_max at the last step.
struct LrSchedule {
  double lr_max = 1e-3;
  std::uint64_t total_steps = 1;
  std::uint64_t warmup_steps = 1;
  double final_lr_frac = 0.1;

  static LrSchedule from_fractions(double lr_max, std::uint64_t total_steps,
                                   double warmup_frac, double final_lr_frac);
  double lr(std::uint64_t step) const;
};

// Decoupled-weight-decay Adam. Decay applies to rank-2 parameters only
// (matrices and embedding tables); vectors such as biases and norm gains
// are not decayed.
class AdamW {
 public:
  AdamW(ParameterList params, AdamWConfig config);

  void step(double lr);
  void zero_grad();

  const ParameterList& params() const { return params_; }
  std::uint64_t step_count() const { return t_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_step_count(std::uint64_t t) { t_ = t; }

 private:
  ParameterList params_;
  AdamWConfig config_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Rescales gradients so their global l2 norm is at most max_norm (no-op when
// max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(const ParameterList& params, double max_norm);

}  // namespace cocomix
