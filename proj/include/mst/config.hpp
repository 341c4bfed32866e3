// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// RunConfig: every knob of a run in one value. Serialized as a sectioned
// key-value file:
//
//   seed = 7
//   epochs = 100
//   [mask]
//   strategy = attention_guided
//   p = 0.1
//
// A key inside [mask] is addressed as mask.strategy on the command line.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mst/data.hpp"
#include "mst/decoder.hpp"
#include "mst/encoder.hpp"
#include "mst/masking.hpp"
#include "mst/objectives.hpp"
#include "mst/schedule.hpp"

namespace mst {

// Raised for malformed files, unknown keys and invalid values. key() names
// the offending key when there is one.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class Branch { teacher, student };

struct DataConfig {
  // "synthetic" generates in memory; "folder" reads PNGs from path.
  std::string source = "synthetic";
  std::string path;
  DatasetLayout layout = DatasetLayout::class_folders;
  std::string classes = "red-square,blue-circle";
  std::size_t train_count = 200;
  std::size_t test_count = 100;
  std::uint64_t synth_seed = 7;
  std::size_t image_size = 32;
  // Augmentation worker threads; 0 runs augmentation inline.
  std::size_t workers = 0;
};

struct EvalConfig {
  std::size_t k = 10;
  double temp = 0.07;
  Branch branch = Branch::teacher;
  bool concat_blocks = false;
  double probe_lr = 0.1;
  std::size_t probe_epochs = 100;
  std::size_t probe_batch = 64;
  std::string results_csv = "results.csv";
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 100;
  std::size_t checkpoint_every = 10;
  std::string output_dir = "runs/default";
  bool dump_reconstructions = false;

  DataConfig data;
  AugmentationConfig aug;
  EncoderConfig model;
  // 0 = log2(patch_size), so the decoder reaches full resolution.
  std::size_t decoder_stages = 0;
  std::vector<std::size_t> decoder_channels;
  MaskConfig mask;
  LossWeights loss;
  ScheduleConfig optim;
  EvalConfig eval;

  // Assigns one key from its textual value.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static const std::vector<std::string>& keys();

  // Resolves derived fields (model.image_size, decoder stages, schedule
  // epochs) and checks every invariant. Throws ConfigError.
  void validate();

  EncoderConfig encoder_config() const;
  DecoderConfig decoder_config() const;

  std::string serialize() const;
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // "key=value" override.
  void apply_override(std::string_view assignment);
};

// output_dir resolved against $MST_OUTPUT_ROOT when relative and the
// variable is set.
std::filesystem::path resolve_output_dir(const RunConfig& cfg);

}  // namespace mst
