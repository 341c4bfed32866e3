// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion, synthetic shape datasets and multi-crop view generation.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mst/image.hpp"
#include "mst/rng.hpp"

namespace mst {

enum class DatasetLayout { class_folders, flat };

struct Dataset {
  std::vector<ImageSample> samples;
  // Sorted folder names; index = label. Empty for flat layouts.
  std::vector<std::string> class_names;
  // Originating file per sample (empty for generated data).
  std::vector<std::string> sources;

  std::size_t size() const { return samples.size(); }
  bool labeled() const;
};

// Reads PNG files. Samples are ordered by sorted relative path; with
// class_folders the label is the index of the sorted folder name.
Dataset load_dataset(const std::filesystem::path& root, DatasetLayout layout);

// Writes root/<class>/<index>.png (class_folders) for a labeled dataset.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);

enum class ShapeKind { square, circle, triangle, cross };

struct SyntheticClass {
  std::string name;
  ShapeKind shape = ShapeKind::square;
  std::array<double, 3> color{1.0, 0.0, 0.0};
};

// Shape/color class generator. Pixels are quantized to 8 bits so a written
// PNG reloads bit-identically.
struct SyntheticSpec {
  std::size_t image_size = 32;
  std::vector<SyntheticClass> classes;

  // "red-square,blue-circle" style list of <color>-<shape> names.
  static SyntheticSpec parse(std::string_view classes, std::size_t image_size = 32);
};

// Balanced labels (sample i has class i % classes). Deterministic for a
// fixed seed.
Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t count, std::uint64_t seed);

// Per-channel pixel mean and standard deviation over the whole dataset.
Normalization compute_normalization(const Dataset& dataset);

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

// Augmentation parameters. Defaults follow the BYOL recipe (jitter 0.4/0.4/
// 0.2/0.1 at p=0.8, grayscale 0.2, blur 1.0/0.1, solarize 0.0/0.2 for the two
// global views) with SwAV multi-crop scale ranges.
struct AugmentationConfig {
  std::size_t global_size = 32;
  std::size_t local_size = 16;
  std::size_t local_crops = 8;
  Range global_scale{0.14, 1.0};
  Range local_scale{0.05, 0.14};
  Range aspect_ratio{3.0 / 4.0, 4.0 / 3.0};

  double flip_p = 0.5;
  double jitter_p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double grayscale_p = 0.2;

  std::array<double, 2> blur_p_global{1.0, 0.1};
  double blur_p_local = 0.5;
  std::array<double, 2> solarize_p_global{0.0, 0.2};
  double solarize_p_local = 0.0;

  // Sigma range quoted for a 224-pixel view; scaled linearly with view size.
  Range blur_sigma{0.1, 2.0};
  double blur_reference_size = 224.0;
  double solarize_threshold = 0.5;

  std::uint64_t seed = 0;

  // Throws std::invalid_argument naming the offending field.
  void validate(std::size_t patch_size) const;
};

// What was applied to produce one view.
struct AugmentationRecord {
  std::size_t crop_top = 0;
  std::size_t crop_left = 0;
  std::size_t crop_height = 0;
  std::size_t crop_width = 0;
  bool flipped = false;
  bool jittered = false;
  bool grayscale = false;
  bool blurred = false;
  bool solarized = false;
  double blur_sigma = 0.0;
};

struct View {
  ImageSample sample;
  AugmentationRecord record;
};

struct ViewSet {
  std::array<View, 2> global_views;
  std::vector<View> local_views;
  std::size_t source_id = 0;
};

// Two global views plus cfg.local_crops local views, each independently
// augmented from its own draws of rng.
ViewSet multi_crop(const ImageSample& sample, const AugmentationConfig& cfg, Rng& rng,
                   std::size_t source_id = 0);

// Stream for one sample in one epoch; independent of worker scheduling.
Rng augmentation_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample_index);

}  // namespace mst
