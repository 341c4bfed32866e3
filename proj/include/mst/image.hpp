// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace mst {

// Planar [channels, height, width] image with values in [0, 1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

struct ImageSample {
  Image image;
  // Class id; evaluation-only, pre-training never reads it.
  std::optional<int> label;
};

// Per-channel statistics applied before the encoder.
struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
  bool operator==(const Normalization&) const = default;
};

// Bilinear resampling with half-pixel centers; identity when sizes match.
Image resize_bilinear(const Image& src, std::size_t height, std::size_t width);
Image crop(const Image& src, std::size_t top, std::size_t left, std::size_t height,
           std::size_t width);
Image normalize(const Image& src, const Normalization& norm);

// PNG I/O. Grayscale and alpha inputs are converted to RGB on read.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
void write_png_gray(const std::filesystem::path& path, std::size_t height,
                    std::size_t width, const std::vector<std::uint8_t>& pixels);

}  // namespace mst
