// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/objectives.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mst/ops.hpp"

namespace mst {

void LossWeights::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw std::invalid_argument("loss weights must be >= 0");
  if (!(teacher_temp > 0.0) || !(student_temp > 0.0)) throw std::invalid_argument("temperatures must be > 0");
  if (!(center_momentum >= 0.0 && center_momentum <= 1.0)) {
    throw std::invalid_argument("loss.center_momentum must lie in [0,1]");
  }
}

namespace {

Tensor as_matrix(const Tensor& t) {
  if (t.rank() == 2) return t;
  if (t.rank() == 1) return ops::reshape(t, {1, t.dim(0)});
  throw std::invalid_argument("logits must be [K] or [B, K], got " + shape_to_string(t.shape()));
}

}  // namespace

std::vector<double> teacher_targets(const Tensor& teacher_logits, const LossWeights& w,
                                    std::span<const double> center) {
  const std::size_t K = teacher_logits.shape().back();
  std::vector<double> shifted(teacher_logits.values().begin(), teacher_logits.values().end());
  for (double v : shifted) {
    if (!std::isfinite(v)) throw std::domain_error("teacher logits are non-finite");
  }
  if (!center.empty()) {
    if (center.size() != K) throw std::invalid_argument("center length != K");
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] -= center[i % K];
  }
  return ops::softmax_rows(shifted, K, w.teacher_temp);
}

Tensor ce_pair_loss(const Tensor& teacher_logits, const Tensor& student_logits, const LossWeights& w,
                    std::span<const double> center) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw std::invalid_argument("ce_pair_loss: teacher " + shape_to_string(teacher_logits.shape()) +
                                " vs student " + shape_to_string(student_logits.shape()));
  }
  const auto targets = teacher_targets(teacher_logits, w, center);
  return ops::soft_cross_entropy(as_matrix(student_logits), targets, w.student_temp);
}

Tensor distillation_loss(std::span<const Tensor> teacher_outputs, std::span<const Tensor> student_outputs,
                         const LossWeights& w, std::span<const double> center) {
  if (teacher_outputs.size() != 2) throw std::invalid_argument("distillation_loss: need 2 teacher views");
  if (student_outputs.size() < 2) throw std::invalid_argument("distillation_loss: fewer than 2 student views");
  std::vector<Tensor> pairs;
  pairs.reserve(2 * student_outputs.size() - 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto targets = teacher_targets(teacher_outputs[i], w, center);
    for (std::size_t j = 0; j < student_outputs.size(); ++j) {
      if (j == i) continue;
      if (student_outputs[j].shape() != teacher_outputs[i].shape()) {
        throw std::invalid_argument("distillation_loss: view " + std::to_string(j) + " shape mismatch");
      }
      pairs.push_back(ops::soft_cross_entropy(as_matrix(student_outputs[j]), targets, w.student_temp));
    }
  }
  return ops::mean_of(pairs);
}

Tensor restoration_loss(std::span<const RestorationPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("restoration_loss: no pairs");
  std::vector<Tensor> terms;
  terms.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.reconstruction.numel() != p.original.size()) {
      throw std::invalid_argument("restoration_loss: reconstruction " +
                                  shape_to_string(p.reconstruction.shape()) + " vs " +
                                  std::to_string(p.original.size()) + " original values");
    }
    terms.push_back(ops::l1_loss(p.reconstruction, p.original));
  }
  return ops::mean_of(terms);
}

Tensor total_loss(const Tensor& ce, const Tensor& restore, const LossWeights& w) {
  if (!std::isfinite(ce.item()) || !std::isfinite(restore.item())) {
    throw std::domain_error("total_loss: non-finite component");
  }
  return ops::add(ops::scale(ce, w.lambda1), ops::scale(restore, w.lambda2));
}

}  // namespace mst
