// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop: teacher/student forward, masking, restoration, optimizer
// and EMA teacher, plus checkpoint files.
//
// Checkpoint layout (little-endian):
//   "MSTCKPT1"  u32 version  str config
//   u64 step  u64 epoch  u64 seed  f64[6] normalization  u64 adam_steps
//   u64 count  { str name, u64 numel, f64[numel] }...
//   u32 crc32 of everything before it
// where str is u64 length followed by the bytes.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mst/config.hpp"
#include "mst/data.hpp"
#include "mst/decoder.hpp"
#include "mst/encoder.hpp"
#include "mst/masking.hpp"
#include "mst/schedule.hpp"

namespace mst {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainState {
  RunConfig config;
  Encoder student;
  Encoder teacher;
  MaskEmbedding mask_embedding;
  Decoder decoder;
  AdamW optimizer;
  std::uint64_t step = 0;
  // Completed epochs.
  std::uint64_t epoch = 0;
  Normalization norm;
  // Teacher logit center; empty unless loss.centering is on.
  std::vector<double> center;

  // Fresh state from a validated config: teacher starts as a copy of the
  // student.
  static TrainState initialize(const RunConfig& cfg, const Normalization& norm);

  // Every tensor the optimizer updates, with stable prefixed names.
  std::vector<NamedTensor> trainable() const;
};

struct StepMetrics {
  std::uint64_t step = 0;
  double ce = 0.0;
  double restore = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double m = 0.0;
  double masked_fraction = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,ce,restore,total,lr,m,masked_fraction";
std::string format_metrics(const StepMetrics& m);

// Fills optim.steps_per_epoch = floor(dataset / batch); incomplete batches
// are dropped. Throws when the dataset is smaller than one batch.
void configure_steps(RunConfig& cfg, std::size_t dataset_size);

struct StepLosses {
  Tensor ce;
  Tensor restore;
  Tensor total;
  // [2B, K] teacher logits of the global views.
  Tensor teacher_logits;
  double masked_fraction = 0.0;
};

// Forward half of a step: teacher targets, masked student passes and the
// weighted loss, with gradients recorded for the student side. Parameters
// and the optimizer are left alone; BN buffers move only when asked.
StepLosses compute_losses(std::span<const ViewSet> batch, TrainState& state, bool update_bn_stats);

// One optimization step on a batch of view sets.
StepMetrics train_step(std::span<const ViewSet> batch, TrainState& state);

// Sample order of an epoch.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n);

// View sets of one batch; computed on `workers` threads when non-zero.
std::vector<ViewSet> make_batch(const Dataset& data, std::span<const std::size_t> indices,
                                const AugmentationConfig& aug, std::uint64_t seed, std::uint64_t epoch,
                                std::size_t workers);

// Runs one epoch from state.epoch; returns the per-step metrics.
std::vector<StepMetrics> train_epoch(const Dataset& data, TrainState& state);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

// Serialized checkpoint bytes, the exact content save_checkpoint writes.
std::string checkpoint_bytes(const TrainState& state);

// Training data described by the config (synthetic train split or folder).
Dataset load_training_data(const RunConfig& cfg);
// Held-out split of the synthetic source.
Dataset synthetic_test_data(const RunConfig& cfg);

std::string checkpoint_name(std::uint64_t epoch);

struct PretrainOptions {
  std::optional<std::filesystem::path> resume;
  // Called after every step.
  std::function<void(const StepMetrics&)> on_step;
  // Epoch index (1-based) and mean total loss.
  std::function<void(std::uint64_t, double)> on_epoch;
};

struct PretrainResult {
  std::filesystem::path output_dir;
  std::filesystem::path final_checkpoint;
  std::vector<double> epoch_mean_total;
};

// Drives full pre-training: writes config.cfg, metrics.csv and checkpoints
// under the resolved output directory.
PretrainResult pretrain(RunConfig cfg, const PretrainOptions& opts = {});

}  // namespace mst
