#include "latmem/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace latmem {

double lr_schedule_factor(double position, double warmup_ratio) {
  if (position < 0.0) position = 0.0;
  if (position > 1.0) position = 1.0;
  if (warmup_ratio > 0.0 && position < warmup_ratio)
    return position / warmup_ratio;
  if (warmup_ratio >= 1.0) return 1.0;
  const double t = (position - warmup_ratio) / (1.0 - warmup_ratio);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(ParamList params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step(double schedule_position) {
  ++step_count_;
  const double factor = lr_schedule_factor(schedule_position,
                                           cfg_.warmup_ratio);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, step_count_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, step_count_);
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.tensor.has_grad())
      throw std::runtime_error("AdamW::step: parameter '" + p.name +
                               "' has no gradient");
    const double lr = cfg_.lr * factor * p.lr_mult;
    auto& w = p.tensor.data();
    auto& g = p.tensor.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                    cfg_.weight_decay * w[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace latmem
