// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Self-distillation cross-entropy, pixel restoration L1 and their weighted sum.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mst/tensor.hpp"

namespace mst {

struct LossWeights {
  double lambda1 = 1.0;  // distillation
  double lambda2 = 0.6;  // restoration
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  // Optional teacher centering (subtract an EMA of teacher logits). Off by
  // default: targets are a plain temperature softmax.
  bool centering = false;
  double center_momentum = 0.9;

  void validate() const;
};

// Teacher targets softmax((logits - center) / teacher_temp), row-wise.
// center may be empty.
std::vector<double> teacher_targets(const Tensor& teacher_logits, const LossWeights& w,
                                    std::span<const double> center = {});

// -sum_k P_t[k] log P_s[k], averaged over rows. Accepts [K] or [B, K].
// The teacher side is read as constants, so no gradient reaches it.
Tensor ce_pair_loss(const Tensor& teacher_logits, const Tensor& student_logits, const LossWeights& w,
                    std::span<const double> center = {});

// Mean of ce_pair_loss over pairs (i, j), i in the two global views, j over
// all student views with j != i: 2(N+2) - 2 pairs. Student views are ordered
// [global0, global1, local0, ...].
Tensor distillation_loss(std::span<const Tensor> teacher_outputs, std::span<const Tensor> student_outputs,
                         const LossWeights& w, std::span<const double> center = {});

struct RestorationPair {
  Tensor reconstruction;
  std::span<const double> original;
};

// Mean over pairs of mean |x - reconstruction| over all elements.
Tensor restoration_loss(std::span<const RestorationPair> pairs);

Tensor total_loss(const Tensor& ce, const Tensor& restore, const LossWeights& w);

}  // namespace mst
