// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "mst/rng.hpp"
#include "mst/tensor.hpp"

namespace mst::testing {

inline Tensor random_param(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng = make_rng(seed, {99});
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * normal(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor random_input(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t = random_param(std::move(shape), seed, scale);
  t.set_requires_grad(false);
  return t;
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a) + std::abs(b), 1e-8});
}

// Largest relative error between the analytic gradient of loss() with
// respect to p and a central difference, over the given flat indices.
inline double gradient_error(Tensor p, const std::function<Tensor()>& loss, const std::vector<std::size_t>& indices,
                             double h = 1e-6) {
  p.zero_grad();
  Tensor l = loss();
  l.backward();
  std::vector<double> analytic(p.numel(), 0.0);
  if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
  double worst = 0.0;
  auto values = p.values();
  for (std::size_t i : indices) {
    const double keep = values[i];
    double plus, minus;
    {
      NoGradGuard g;
      values[i] = keep + h;
      plus = loss().item();
      values[i] = keep - h;
      minus = loss().item();
    }
    values[i] = keep;
    const double numeric = (plus - minus) / (2.0 * h);
    worst = std::max(worst, rel_error(analytic[i], numeric));
  }
  return worst;
}

inline std::vector<std::size_t> all_indices(const Tensor& t) {
  std::vector<std::size_t> idx(t.numel());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

// Scratch directory removed at scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("mst_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mst::testing
