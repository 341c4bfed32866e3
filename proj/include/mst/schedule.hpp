// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Learning-rate and teacher-momentum schedules, the EMA teacher update and a
// decoupled-weight-decay Adam optimizer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mst/encoder.hpp"

namespace mst {

struct ScheduleConfig {
  double base_lr = 2e-3;
  std::size_t warmup_epochs = 10;
  std::size_t total_epochs = 100;
  double weight_decay = 0.04;
  double momentum_base = 0.996;
  double momentum_final = 1.0;
  std::size_t batch_size = 1024;
  std::size_t steps_per_epoch = 1;
  double clip_grad = 3.0;

  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
  void validate() const;
};

// Linear 0 -> base_lr over the warmup steps, then cosine base_lr -> 0 at
// total_steps.
double lr_schedule(std::size_t step, const ScheduleConfig& cfg);

// m1 - (m1 - m0) * (cos(pi * step / total_steps) + 1) / 2
double momentum_schedule(std::size_t step, std::size_t total_steps, double m0, double m1);

// teacher = m * teacher + (1 - m) * student, elementwise, matched by position.
void ema_update(std::span<const NamedTensor> teacher, std::span<const NamedTensor> student, double m);

// Global L2 norm of all gradients; rescales them to max_norm when above it.
double clip_grad_norm(std::span<const NamedTensor> params, double max_norm);

class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One update of every parameter carrying a gradient. Weight decay
  // p -= lr * wd * p applies only where NamedTensor::decay is set.
  void step(std::span<const NamedTensor> params, double lr, double weight_decay);

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }

  struct Moments {
    std::vector<double> first;
    std::vector<double> second;
  };
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace mst
