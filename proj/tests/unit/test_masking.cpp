// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "mst/masking.hpp"

using namespace mst;

namespace {

std::vector<double> random_attention(std::size_t n, Rng& rng) {
  std::vector<double> a(n);
  double s = 0.0;
  for (auto& v : a) s += (v = uniform01(rng));
  for (auto& v : a) v /= s;
  return a;
}

}  // namespace

TEST_CASE("strategy names") {
  CHECK(parse_mask_strategy("none") == MaskStrategy::none);
  CHECK(parse_mask_strategy("random") == MaskStrategy::random);
  CHECK(parse_mask_strategy("attention_guided") == MaskStrategy::attention_guided);
  CHECK(to_string(MaskStrategy::attention_guided) == "attention_guided");
  CHECK_THROWS(parse_mask_strategy("blockwise"));
  MaskConfig c;
  c.p = 1.2;
  CHECK_THROWS(c.validate());
  c.p = 0.1;
  c.num = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("random mask") {
  Rng rng = make_rng(1);
  CHECK(random_mask(50, 0.0, rng).count() == 0);
  CHECK(random_mask(50, 1.0, rng).count() == 50);
  const std::size_t n = 100000;
  const double frac = static_cast<double>(random_mask(n, 0.15, rng).count()) / n;
  CHECK(std::abs(frac - 0.15) < 0.005);
}

TEST_CASE("threshold examples") {
  const std::vector<double> a{0.4, 0.3, 0.2, 0.1};
  CHECK(attention_threshold(a, 2) == 0.3);
  CHECK(std::isinf(attention_threshold(a, 1)));
  CHECK(attention_threshold(a, 4) == 0.2);
  const std::vector<double> uniform(8, 1.0 / 8);
  CHECK(attention_threshold(uniform, 4) == 1.0 / 8);
  const std::vector<std::uint8_t> ones(8, 1);
  CHECK(attention_guided_mask_from_coins(uniform, 4, ones).count() == 0);
  CHECK(attention_threshold(a, 5) == 0.1);
  CHECK(attention_guided_mask_from_coins(a, 5, std::vector<std::uint8_t>(4, 1)).count() == 0);
}

TEST_CASE("attention guided examples") {
  const std::vector<double> a{0.4, 0.3, 0.2, 0.1};
  MaskConfig cfg;
  cfg.num = 2;
  cfg.p = 1.0;
  Rng rng = make_rng(2);
  CHECK(attention_guided_mask(a, cfg, rng).bits == std::vector<std::uint8_t>{0, 0, 1, 1});
  cfg.p = 0.0;
  CHECK(attention_guided_mask(a, cfg, rng).count() == 0);
  cfg.num = 1;
  cfg.p = 1.0;
  CHECK(attention_guided_mask(a, cfg, rng).count() == 4);
}

TEST_CASE("attention guided masked fraction") {
  Rng rng = make_rng(3);
  const std::size_t n = 10000, trials = 10;
  MaskConfig cfg;
  cfg.num = 8;
  cfg.p = 0.1;
  double frac = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto a = random_attention(n, rng);
    frac += static_cast<double>(attention_guided_mask(a, cfg, rng).count()) / n / trials;
  }
  CHECK(std::abs(frac - 0.1 * (n / 8) / static_cast<double>(n)) < 0.003);
}

TEST_CASE("maximum attention is never masked for num > 1") {
  Rng rng = make_rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 64);
    const auto a = random_attention(n, rng);
    const std::size_t top = static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin());
    for (std::size_t num : {2u, 4u, 8u}) {
      if (n < num) continue;
      MaskConfig cfg;
      cfg.num = num;
      cfg.p = 1.0;
      CHECK(attention_guided_mask(a, cfg, rng).bits[top] == 0);
    }
  }
}

TEST_CASE("generate_mask dispatch") {
  Rng rng = make_rng(5);
  MaskConfig cfg;
  cfg.strategy = MaskStrategy::none;
  cfg.p = 1.0;
  CHECK(generate_mask(10, {}, cfg, rng).count() == 0);
  cfg.strategy = MaskStrategy::random;
  CHECK(generate_mask(10, {}, cfg, rng).count() == 10);
  cfg.strategy = MaskStrategy::attention_guided;
  CHECK_THROWS(generate_mask(10, {}, cfg, rng));
}

TEST_CASE("apply_mask substitutes the embedding plus position") {
  const std::size_t n = 4, d = 3;
  TokenSequence seq;
  seq.rows = 2;
  seq.cols = 2;
  seq.tokens = mst::testing::random_param({n + 1, d}, 1);
  seq.positions = mst::testing::random_input({n + 1, d}, 2);
  MaskEmbedding emb{mst::testing::random_param({d}, 3)};

  MaskVector zero{std::vector<std::uint8_t>(n, 0)};
  TokenSequence same = apply_mask(seq, zero, emb);
  CHECK(std::equal(same.tokens.values().begin(), same.tokens.values().end(), seq.tokens.values().begin()));

  MaskVector all{std::vector<std::uint8_t>(n, 1)};
  TokenSequence full = apply_mask(seq, all, emb);
  for (std::size_t j = 0; j < d; ++j) CHECK(full.tokens.values()[j] == seq.tokens.values()[j]);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(full.tokens.values()[i * d + j] == doctest::Approx(emb.vector.values()[j] + seq.positions.values()[i * d + j]));

  MaskVector first{{1, 0, 0, 0}};
  TokenSequence one = apply_mask(seq, first, emb);
  for (std::size_t i = 2; i <= n; ++i)
    for (std::size_t j = 0; j < d; ++j) CHECK(one.tokens.values()[i * d + j] == seq.tokens.values()[i * d + j]);
  CHECK(one.tokens.values()[d] != seq.tokens.values()[d]);

  TokenSequence twice = apply_mask(one, first, emb);
  CHECK(std::equal(twice.tokens.values().begin(), twice.tokens.values().end(), one.tokens.values().begin()));

  CHECK_THROWS(apply_mask(seq, MaskVector{{1, 0}}, emb));
}

TEST_CASE("mask embedding receives gradient through masked slots") {
  TokenSequence seq;
  seq.rows = 1;
  seq.cols = 2;
  seq.tokens = mst::testing::random_param({3, 2}, 4);
  seq.positions = mst::testing::random_input({3, 2}, 5);
  MaskEmbedding emb = MaskEmbedding::zeros(2);
  Tensor out = apply_mask(seq, MaskVector{{0, 1}}, emb).tokens;
  Tensor loss = ops::reshape(ops::matmul(ops::reshape(out, {1, 6}), Tensor({6, 1}, 1.0)), {});
  loss.backward();
  REQUIRE(emb.vector.has_grad());
  CHECK(emb.vector.grad()[0] == 1.0);
  CHECK(emb.vector.grad()[1] == 1.0);
}
