// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Token masking: Bernoulli random masks, attention-guided masks restricted to
// the least-attended tokens, and substitution by a learnable mask embedding.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mst/encoder.hpp"
#include "mst/rng.hpp"
#include "mst/tensor.hpp"

namespace mst {

enum class MaskStrategy { none, random, attention_guided };

MaskStrategy parse_mask_strategy(std::string_view name);
std::string to_string(MaskStrategy strategy);

struct MaskConfig {
  double p = 0.1;
  // Candidates are the lowest 1/num fraction of tokens by attention.
  std::size_t num = 8;
  MaskStrategy strategy = MaskStrategy::attention_guided;

  void validate() const;
};

// 1 = token replaced by the mask embedding.
struct MaskVector {
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
  std::size_t count() const;
  bool operator==(const MaskVector&) const = default;
};

// Learnable [d] vector substituted for masked patch tokens.
struct MaskEmbedding {
  Tensor vector;

  static MaskEmbedding zeros(std::size_t dim);
};

MaskVector random_mask(std::size_t n, double p, Rng& rng);

// tau = ascending-sorted attention at index floor(n / num), or +inf when
// that index is n (num = 1). Candidates are exactly the tokens with
// attention strictly below tau, so there are none when n < num.
double attention_threshold(std::span<const double> attention, std::size_t num);

// m_i = coin_i AND attention_i < tau, with coin_i already drawn.
MaskVector attention_guided_mask_from_coins(std::span<const double> attention, std::size_t num,
                                            std::span<const std::uint8_t> coins);

// Draws coin_i = (u_i < p) for every token, then restricts to candidates.
MaskVector attention_guided_mask(std::span<const double> attention, const MaskConfig& cfg, Rng& rng);

// Dispatches on cfg.strategy; attention is only read for attention_guided.
MaskVector generate_mask(std::size_t n, std::span<const double> attention, const MaskConfig& cfg, Rng& rng);

// Replaces patch token i by emb + position_i where mask bit i is set. The
// class token is never touched.
TokenSequence apply_mask(const TokenSequence& tokens, const MaskVector& mask, const MaskEmbedding& emb);

}  // namespace mst
