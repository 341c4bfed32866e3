// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Vision Transformer backbone with a class token, learnable positional
// table and a BN/GELU projection head. The encoder also reports the
// head-averaged attention of the class-token query over patch keys.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mst/image.hpp"
#include "mst/ops.hpp"
#include "mst/tensor.hpp"

namespace mst {

struct EncoderConfig {
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t head_hidden = 128;
  std::size_t out_dim = 256;
  bool head_bn = true;
  // Global view side; sizes the positional table.
  std::size_t image_size = 32;

  std::size_t grid() const { return image_size / patch_size; }
  void validate() const;
};

// Per-patch importance, length n, non-negative, sums to one.
using AttentionMap = std::vector<double>;

struct TokenSequence {
  // [n+1, d]; row 0 is the class token. Positional encodings included.
  Tensor tokens;
  // [n+1, d] positional rows that were added, reused by mask substitution.
  Tensor positions;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t patch_count() const { return rows * cols; }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  // Participates in decoupled weight decay.
  bool decay = true;
};

struct NamedBuffer {
  std::string name;
  ops::BatchNormBuffers* buffers;
};

struct TransformerBlock {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_weight, qkv_bias;
  Tensor proj_weight, proj_bias;
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

struct ProjectionHead {
  Tensor fc1_weight, fc1_bias, bn1_gamma, bn1_beta;
  Tensor fc2_weight, fc2_bias, bn2_gamma, bn2_beta;
  Tensor fc3_weight, fc3_bias;
  ops::BatchNormBuffers bn1, bn2;
};

struct EncodeOptions {
  // Head BN running buffers absorb the batch statistics only when set.
  bool update_bn_stats = false;
  ops::NormStats head_stats = ops::NormStats::batch;
  bool compute_head = true;
  // Keep the class-attention map of every layer, not only the last.
  bool keep_layer_attention = false;
  // Keep final-normed class tokens of every block (feature concatenation).
  bool keep_block_features = false;
};

struct EncoderOutput {
  std::size_t batch = 0;
  std::size_t patch_count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  // [B, K] projection-head output; undefined when the head was skipped.
  Tensor cls_logits;
  // [B, d] final-normed class tokens before the head.
  Tensor cls_features;
  // [B*n, d] final-normed patch tokens, the decoder input.
  Tensor patch_tokens;
  // Last-layer map per image.
  std::vector<AttentionMap> attention;
  // [layer][image], filled when keep_layer_attention is set.
  std::vector<std::vector<AttentionMap>> layer_attention;
  // [block] -> [B, d], filled when keep_block_features is set.
  std::vector<Tensor> block_features;
};

// Class-token attention of one image from its qkv rows ([T, 3d], class token
// first): softmax of Q_cls K_j / sqrt(d_head) over patch keys j, averaged
// over heads. The class key itself is excluded.
AttentionMap class_attention(std::span<const double> qkv, std::size_t tokens,
                             std::size_t dim, std::size_t heads);

// Row-major [out*out, in*in] bicubic (A = -0.75, half-pixel) resampling of a
// square grid; identity when out == in.
std::vector<double> bicubic_grid_matrix(std::size_t out, std::size_t in);

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, std::uint64_t seed);

  // Independent copy of all parameters and buffers.
  Encoder clone(bool trainable) const;

  const EncoderConfig& config() const { return cfg_; }
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedBuffer> buffers();

  TokenSequence patch_embed(const Image& image) const;
  EncoderOutput encode(std::span<const TokenSequence> batch, const EncodeOptions& opts);
  // cls [B, d] -> [B, K].
  Tensor head_project(const Tensor& cls, bool update_bn_stats,
                      ops::NormStats stats = ops::NormStats::batch);

  // Exposed for tests and weight surgery.
  Tensor& patch_weight() { return patch_weight_; }
  Tensor& pos_embed() { return pos_embed_; }
  Tensor& cls_token() { return cls_token_; }
  std::vector<TransformerBlock>& blocks() { return blocks_; }
  ProjectionHead& head() { return head_; }

 private:
  Tensor positions_for(std::size_t rows) const;

  EncoderConfig cfg_;
  Tensor patch_weight_, patch_bias_;
  Tensor cls_token_;
  // [1 + grid*grid, d]
  Tensor pos_embed_;
  std::vector<TransformerBlock> blocks_;
  Tensor norm_gamma_, norm_beta_;
  ProjectionHead head_;
  mutable std::map<std::size_t, Tensor> interp_cache_;
};

}  // namespace mst
