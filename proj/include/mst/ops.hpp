// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over mst::Tensor. Matrices are row-major
// [rows, cols]; images and feature maps are [batch, channels, height, width].

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mst/tensor.hpp"

namespace mst::ops {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// x[m,in] * w[in,out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Broadcast-adds a [n] row vector to every row of x[m,n].
Tensor add_row(const Tensor& x, const Tensor& row);
// Mean of same-shaped tensors (typically scalars).
Tensor mean_of(std::span<const Tensor> terms);

Tensor reshape(const Tensor& x, Shape shape);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

// Multi-head scaled dot-product self-attention. qkv is [batch*tokens, 3*d]
// with column blocks [Q | K | V]; result is [batch*tokens, d].
Tensor self_attention(const Tensor& qkv, std::size_t batch, std::size_t tokens,
                      std::size_t heads);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
// Row r of the result is replacement[r] where replace[r] != 0, x[r] otherwise.
Tensor replace_rows(const Tensor& x, std::span<const std::uint8_t> replace,
                    const Tensor& replacement);

// x[B*rows*cols, d] (row-major grid per image) -> [B, d, rows, cols].
Tensor tokens_to_map(const Tensor& x, std::size_t batch, std::size_t rows,
                     std::size_t cols);

struct BatchNormBuffers {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  explicit BatchNormBuffers(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
  bool operator==(const BatchNormBuffers&) const = default;
};

enum class NormStats { batch, running };

// Per-channel batch normalization over x[B, C] or x[B, C, H, W].
// With NormStats::batch the batch statistics normalize the input, and the
// running buffers absorb them (momentum 0.1, unbiased variance) only when
// update_running is set. NormStats::running uses the buffers as constants.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormBuffers& buffers, NormStats stats,
                  bool update_running, double momentum = 0.1,
                  double eps = 1e-5);

// Stride-1 convolution, x[B,C,H,W], w[O,C,k,k], bias[O], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t pad);
Tensor upsample_nearest2x(const Tensor& x);

// mean |pred - target| over all elements; target is a constant.
Tensor l1_loss(const Tensor& pred, std::span<const double> target);

// Mean over rows of -sum_k target[r,k] * log softmax(logits[r,:] / temp)[k].
// target is a constant probability table with the shape of logits.
Tensor soft_cross_entropy(const Tensor& logits, std::span<const double> target,
                          double temp);

// Plain row softmax of values / temp (no graph).
std::vector<double> softmax_rows(std::span<const double> values,
                                 std::size_t cols, double temp);

}  // namespace mst::ops
