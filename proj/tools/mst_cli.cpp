// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// mst: pretrain | eval | export-attn | synth-data
// Exit codes: 0 ok, 1 usage or invalid configuration, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mst/config.hpp"
#include "mst/data.hpp"
#include "mst/evaluation.hpp"
#include "mst/trainer.hpp"

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

mst::RunConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
  mst::RunConfig cfg = path.empty() ? mst::RunConfig{} : mst::RunConfig::load(path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

int cmd_pretrain(const std::string& config, const std::vector<std::string>& overrides, const std::string& resume) {
  std::optional<std::filesystem::path> resume_path;
  mst::RunConfig cfg;
  if (!resume.empty()) {
    resume_path = resume;
    cfg = mst::load_checkpoint(resume).config;
    for (const auto& o : overrides) {
      if (o.rfind("output_dir=", 0) != 0) {
        std::cerr << "pretrain: only output_dir may be overridden when resuming (got " << o << ")\n";
        return kUsage;
      }
      cfg.apply_override(o);
    }
  } else {
    if (config.empty()) {
      std::cerr << "pretrain: --config is required unless --resume is given\n";
      return kUsage;
    }
    cfg = build_config(config, overrides);
    cfg.validate();
  }
  mst::PretrainOptions opts;
  opts.resume = resume_path;
  opts.on_epoch = [](std::uint64_t epoch, double mean) {
    std::fprintf(stderr, "epoch %llu  mean_total=%.6f\n", static_cast<unsigned long long>(epoch), mean);
  };
  const mst::PretrainResult r = mst::pretrain(cfg, opts);
  std::cout << "checkpoint=" << r.final_checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& mode,
             const std::vector<std::string>& overrides) {
  if (mode != "knn" && mode != "linear") {
    std::cerr << "eval: --mode must be knn or linear\n";
    return kUsage;
  }
  mst::TrainState state = mst::load_checkpoint(checkpoint);
  for (const auto& o : overrides) state.config.apply_override(o);
  state.config.validate();
  const mst::RunConfig& cfg = state.config;

  mst::Dataset train, test;
  if (!dataset.empty()) {
    const std::filesystem::path root(dataset);
    train = mst::load_dataset(root / "train", mst::DatasetLayout::class_folders);
    test = mst::load_dataset(root / "test", mst::DatasetLayout::class_folders);
  } else if (cfg.data.source == "synthetic") {
    train = mst::load_training_data(cfg);
    test = mst::synthetic_test_data(cfg);
  } else {
    std::cerr << "eval: --dataset is required for folder-sourced runs\n";
    return kUsage;
  }

  const auto ftrain = mst::extract_features(train, state, cfg.eval.branch, cfg.eval.concat_blocks);
  const auto ftest = mst::extract_features(test, state, cfg.eval.branch, cfg.eval.concat_blocks);
  double top1 = 0.0;
  if (mode == "knn") {
    top1 = mst::knn_evaluate(ftrain, ftest, cfg.eval.k, cfg.eval.temp);
  } else {
    mst::ProbeConfig pc;
    pc.lr = cfg.eval.probe_lr;
    pc.epochs = cfg.eval.probe_epochs;
    pc.batch_size = cfg.eval.probe_batch;
    pc.seed = cfg.seed.value();
    top1 = mst::linear_probe(ftrain, ftest, pc);
  }
  std::printf("top1=%.6f\n", top1);
  std::filesystem::path csv(cfg.eval.results_csv);
  if (csv.is_relative()) csv = std::filesystem::path(checkpoint).parent_path() / csv;
  mst::append_result(csv, checkpoint, mode, mode == "knn" ? cfg.eval.k : 0, top1);
  return 0;
}

int cmd_export_attn(const std::string& checkpoint, const std::string& image, const std::string& out,
                    const std::vector<std::string>& overrides) {
  mst::TrainState state = mst::load_checkpoint(checkpoint);
  for (const auto& o : overrides) state.config.apply_override(o);
  state.config.validate();
  const mst::Image img = mst::read_png(image);
  const auto ex = mst::export_attention(img, state, state.config.eval.branch, out);
  std::printf("grid=%zux%zu\n", ex.rows, ex.cols);
  return 0;
}

int cmd_synth_data(const std::string& config, const std::vector<std::string>& overrides, const std::string& out) {
  mst::RunConfig cfg = build_config(config, overrides);
  const std::filesystem::path root(out);
  mst::write_dataset(mst::load_training_data(cfg), root / "train");
  mst::write_dataset(mst::synthetic_test_data(cfg), root / "test");
  std::printf("train=%zu test=%zu\n", cfg.data.train_count, cfg.data.test_count);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked self-supervised transformer pre-training"};
  app.require_subcommand(1);

  std::string config, resume, checkpoint, dataset, mode = "knn", image, out;
  std::vector<std::string> overrides;

  auto* pre = app.add_subcommand("pretrain", "Pre-train teacher and student encoders");
  pre->add_option("--config", config, "Run config file");
  pre->add_option("--set", overrides, "key=value override")->take_all();
  pre->add_option("--resume", resume, "Continue from a checkpoint");

  auto* ev = app.add_subcommand("eval", "k-NN or linear-probe evaluation of a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--dataset", dataset, "Directory with train/ and test/ class folders");
  ev->add_option("--mode", mode, "knn or linear");
  ev->add_option("--set", overrides, "key=value override")->take_all();

  auto* ex = app.add_subcommand("export-attn", "Write the class-attention heatmap of one image");
  ex->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ex->add_option("--image", image, "PNG image")->required();
  ex->add_option("--out", out, "Output path stem")->required();
  ex->add_option("--set", overrides, "key=value override")->take_all();

  auto* sd = app.add_subcommand("synth-data", "Write the synthetic dataset as PNG class folders");
  sd->add_option("--config", config, "Run config file");
  sd->add_option("--set", overrides, "key=value override")->take_all();
  sd->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*pre) return cmd_pretrain(config, overrides, resume);
    if (*ev) return cmd_eval(checkpoint, dataset, mode, overrides);
    if (*ex) return cmd_export_attn(checkpoint, image, out, overrides);
    if (*sd) return cmd_synth_data(config, overrides, out);
  } catch (const mst::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
