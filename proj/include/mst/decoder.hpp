// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Convolutional image decoder: patch tokens -> full-resolution RGB image via
// repeated Conv3x3 -> BN -> ReLU -> 2x nearest upsampling, then a 1x1 conv.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mst/encoder.hpp"
#include "mst/image.hpp"
#include "mst/ops.hpp"
#include "mst/tensor.hpp"

namespace mst {

struct DecoderConfig {
  std::size_t in_dim = 64;
  std::size_t stages = 2;
  // Output width of each stage; empty means halve from in_dim per stage.
  std::vector<std::size_t> channels;

  std::vector<std::size_t> resolved_channels() const;
  void validate() const;
};

struct DecoderStage {
  Tensor conv_weight, conv_bias;
  Tensor bn_gamma, bn_beta;
  ops::BatchNormBuffers bn;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, std::uint64_t seed);

  const DecoderConfig& config() const { return cfg_; }
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedBuffer> buffers();

  // patch_tokens [B*rows*cols, in_dim] -> [B, 3, rows*2^stages, cols*2^stages].
  Tensor reconstruct(const Tensor& patch_tokens, std::size_t batch, std::size_t rows, std::size_t cols,
                     bool update_bn_stats, ops::NormStats stats = ops::NormStats::batch);

  std::vector<DecoderStage>& stages() { return stages_; }
  Tensor& out_weight() { return out_weight_; }
  Tensor& out_bias() { return out_bias_; }

 private:
  DecoderConfig cfg_;
  std::vector<DecoderStage> stages_;
  Tensor out_weight_, out_bias_;
};

// Slice image b out of a [B, 3, H, W] tensor.
Image tensor_to_image(const Tensor& batch, std::size_t b);

}  // namespace mst
