// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Frozen-feature evaluation: weighted k-NN, linear probe and attention
// heatmap export.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mst/config.hpp"
#include "mst/data.hpp"
#include "mst/encoder.hpp"
#include "mst/trainer.hpp"

namespace mst {

struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  // Row-major [rows, dim].
  std::vector<double> features;
  std::vector<int> labels;
  std::string source;

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }
};

// Scales every row to unit L2 norm (zero rows are left as they are).
void normalize_rows(FeatureMatrix& f);

// Resize to image_size, normalize, encode without masking or head; rows
// L2-normalized. concat_blocks joins the class tokens of the last 4 blocks.
FeatureMatrix extract_features(const Dataset& dataset, Encoder& encoder, const Normalization& norm,
                               std::size_t image_size, bool concat_blocks = false);
FeatureMatrix extract_features(const Dataset& dataset, TrainState& state, Branch branch,
                               bool concat_blocks = false);

// Weighted vote of the k most cosine-similar rows, weight exp(sim / temp).
// Ties in similarity go to the lower row index, ties in votes to the lower
// class id.
int knn_classify(const FeatureMatrix& train, std::span<const double> query, std::size_t k, double temp);

double knn_evaluate(const FeatureMatrix& train, const FeatureMatrix& test, std::size_t k, double temp);

struct ProbeConfig {
  double lr = 0.1;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

// Softmax linear classifier trained with plain minibatch SGD, no weight
// decay. Returns test top-1.
double linear_probe(const FeatureMatrix& train, const FeatureMatrix& test, const ProbeConfig& cfg);

struct AttentionExport {
  std::size_t rows = 0;
  std::size_t cols = 0;
  // Raw class-attention map, row-major over the patch grid.
  std::vector<double> values;
  // Min-max normalized, nearest-upsampled to the image size.
  std::vector<std::uint8_t> heatmap;
  std::size_t height = 0;
  std::size_t width = 0;
};

AttentionExport attention_heatmap(const Image& image, Encoder& encoder, const Normalization& norm);

// Writes <out>.png and <out>.csv; out may carry either extension or none.
AttentionExport export_attention(const Image& image, TrainState& state, Branch branch,
                                 const std::filesystem::path& out);

// Appends "checkpoint,mode,k,top1" to a CSV, writing the header first when
// the file is new.
void append_result(const std::filesystem::path& csv, const std::string& checkpoint, const std::string& mode,
                   std::size_t k, double top1);

}  // namespace mst
