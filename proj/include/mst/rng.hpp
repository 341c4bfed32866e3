// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Random streams. Every stream is derived from (seed, tag, indices...) so the
// value sequence never depends on call order across workers.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mst {

using Rng = std::mt19937_64;

namespace stream {
// Tags separating independent consumers of the run seed.
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t shuffle = 2;
inline constexpr std::uint64_t augment = 3;
inline constexpr std::uint64_t mask = 4;
inline constexpr std::uint64_t synthetic = 5;
inline constexpr std::uint64_t probe = 6;
}  // namespace stream

Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {});

// Uniform in [0, 1) with 53 random bits; portable across standard libraries.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
// Standard normal via Box-Muller.
double normal(Rng& rng);
// Uniform integer in [0, n).
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

}  // namespace mst
