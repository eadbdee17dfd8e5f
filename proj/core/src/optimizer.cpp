#include "cocomix/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "cocomix/error.hpp"

namespace cocomix {

LrSchedule LrSchedule::from_fractions(double lr_max, std::uint64_t total_steps,
                                      double warmup_frac, double final_lr_frac) {
  if (total_steps == 0) throw ConfigError("schedule: steps must be >= 1");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) {
    throw ConfigError("schedule: warmup_frac must lie in [0, 1)");
  }
  if (!(final_lr_frac > 0.0 && final_lr_frac <= 1.0)) {
    throw ConfigError("schedule: final_lr_frac must lie in (0, 1]");
  }
  LrSchedule s;
  s.lr_max = lr_max;
  s.total_steps = total_steps;
  s.warmup_steps = std::max<std::uint64_t>(
      1, static_cast<std::uint64_t>(std::llround(warmup_frac * static_cast<double>(total_steps))));
  s.final_lr_frac = final_lr_frac;
  return s;
}

double LrSchedule::lr(std::uint64_t step) const {
  if (step < warmup_steps) {
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const std::uint64_t decay = total_steps > warmup_steps + 1 ? total_steps - warmup_steps - 1 : 1;
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(decay);
  if (progress > 1.0) progress = 1.0;
  const double floor = final_lr_frac * lr_max;
  return floor + (lr_max - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(ParameterList params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::zero_grad() { zero_grads(params_); }

void AdamW::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    GraphTensor p = params_[i].tensor;
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto w = p.mutable_values();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay =
        p.shape().size() == 2 ? 1.0 - lr * config_.weight_decay : 1.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = w[j] * decay - lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

double clip_grad_norm(const ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw DivergenceError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      GraphTensor t = p.tensor;
      if (!t.has_grad()) continue;
      for (double& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace cocomix
