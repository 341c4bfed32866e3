// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mst {

void ScheduleConfig::validate() const {
  if (!(base_lr >= 0.0)) throw std::invalid_argument("optim.base_lr must be >= 0");
  if (warmup_epochs > total_epochs) throw std::invalid_argument("optim.warmup_epochs must not exceed epochs");
  if (!(0.0 <= momentum_base && momentum_base <= momentum_final && momentum_final <= 1.0)) {
    throw std::invalid_argument("momentum schedule needs 0 <= momentum_base <= momentum_final <= 1");
  }
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optim.weight_decay must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (!(clip_grad >= 0.0)) throw std::invalid_argument("optim.clip_grad must be >= 0");
}

double lr_schedule(std::size_t step, const ScheduleConfig& cfg) {
  const std::size_t warm = cfg.warmup_steps();
  const std::size_t total = cfg.total_steps();
  if (step < warm) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

double momentum_schedule(std::size_t step, std::size_t total_steps, double m0, double m1) {
  if (total_steps == 0) return m1;
  const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return m1 - (m1 - m0) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

void ema_update(std::span<const NamedTensor> teacher, std::span<const NamedTensor> student, double m) {
  if (teacher.size() != student.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("ema_update: momentum outside [0,1]");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].tensor.shape() != student[i].tensor.shape()) {
      throw std::invalid_argument("ema_update: shape mismatch at " + teacher[i].name);
    }
  }
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    Tensor t = teacher[i].tensor;
    auto tv = t.values();
    const auto sv = student[i].tensor.values();
    for (std::size_t k = 0; k < tv.size(); ++k) tv[k] = m * tv[k] + (1.0 - m) * sv[k];
  }
}

double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-6);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      Tensor t = p.tensor;
      for (double& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

void AdamW::step(std::span<const NamedTensor> params, double lr, double weight_decay) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    auto values = t.values();
    const auto grad = t.grad();
    auto& mom = moments_[p.name];
    if (mom.first.empty()) {
      mom.first.assign(values.size(), 0.0);
      mom.second.assign(values.size(), 0.0);
    }
    const double decay = p.decay ? lr * weight_decay : 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      mom.first[i] = beta1_ * mom.first[i] + (1.0 - beta1_) * g;
      mom.second[i] = beta2_ * mom.second[i] + (1.0 - beta2_) * g * g;
      values[i] -= decay * values[i];
      const double mhat = mom.first[i] / bc1;
      const double vhat = mom.second[i] / bc2;
      values[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace mst
