// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/masking.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "mst/ops.hpp"

namespace mst {

MaskStrategy parse_mask_strategy(std::string_view name) {
  if (name == "none") return MaskStrategy::none;
  if (name == "random") return MaskStrategy::random;
  if (name == "attention_guided" || name == "attention-guided") return MaskStrategy::attention_guided;
  throw std::invalid_argument("unknown mask strategy '" + std::string(name) + "'");
}

std::string to_string(MaskStrategy strategy) {
  switch (strategy) {
    case MaskStrategy::none: return "none";
    case MaskStrategy::random: return "random";
    case MaskStrategy::attention_guided: return "attention_guided";
  }
  return "none";
}

void MaskConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("mask.p must lie in [0,1]");
  if (num < 1) throw std::invalid_argument("mask.num must be >= 1");
}

std::size_t MaskVector::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

MaskEmbedding MaskEmbedding::zeros(std::size_t dim) {
  return {Tensor::parameter({dim}, std::vector<double>(dim, 0.0))};
}

MaskVector random_mask(std::size_t n, double p, Rng& rng) {
  if (n == 0) throw std::invalid_argument("random_mask: n must be >= 1");
  MaskVector m;
  m.bits.resize(n);
  for (auto& b : m.bits) b = uniform01(rng) < p ? 1 : 0;
  return m;
}

double attention_threshold(std::span<const double> attention, std::size_t num) {
  if (num < 1) throw std::invalid_argument("attention_threshold: num must be >= 1");
  std::vector<double> sorted(attention.begin(), attention.end());
  const std::size_t index = sorted.size() / num;
  if (index >= sorted.size()) return std::numeric_limits<double>::infinity();
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(index), sorted.end());
  return sorted[index];
}

MaskVector attention_guided_mask_from_coins(std::span<const double> attention, std::size_t num,
                                            std::span<const std::uint8_t> coins) {
  if (coins.size() != attention.size()) throw std::invalid_argument("attention_guided_mask: coin count");
  const double tau = attention_threshold(attention, num);
  MaskVector m;
  m.bits.resize(attention.size());
  for (std::size_t i = 0; i < attention.size(); ++i) {
    m.bits[i] = (coins[i] != 0 && attention[i] < tau) ? 1 : 0;
  }
  return m;
}

MaskVector attention_guided_mask(std::span<const double> attention, const MaskConfig& cfg, Rng& rng) {
  std::vector<std::uint8_t> coins(attention.size());
  for (auto& c : coins) c = uniform01(rng) < cfg.p ? 1 : 0;
  return attention_guided_mask_from_coins(attention, cfg.num, coins);
}

MaskVector generate_mask(std::size_t n, std::span<const double> attention, const MaskConfig& cfg, Rng& rng) {
  switch (cfg.strategy) {
    case MaskStrategy::none:
      return {std::vector<std::uint8_t>(n, 0)};
    case MaskStrategy::random:
      return random_mask(n, cfg.p, rng);
    case MaskStrategy::attention_guided:
      if (attention.size() != n) throw std::invalid_argument("generate_mask: attention length != n");
      return attention_guided_mask(attention, cfg, rng);
  }
  return {std::vector<std::uint8_t>(n, 0)};
}

TokenSequence apply_mask(const TokenSequence& tokens, const MaskVector& mask, const MaskEmbedding& emb) {
  const std::size_t n = tokens.patch_count();
  if (mask.size() != n) {
    throw std::invalid_argument("apply_mask: mask length " + std::to_string(mask.size()) + " vs " +
                                std::to_string(n) + " patch tokens");
  }
  if (mask.count() == 0) return tokens;
  std::vector<std::uint8_t> rows(n + 1, 0);
  std::copy(mask.bits.begin(), mask.bits.end(), rows.begin() + 1);
  TokenSequence out = tokens;
  out.tokens = ops::replace_rows(tokens.tokens, rows, ops::add_row(tokens.positions, emb.vector));
  return out;
}

}  // namespace mst
