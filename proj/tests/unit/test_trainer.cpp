// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "mst/trainer.hpp"

using namespace mst;
using mst::testing::TempDir;

namespace {

RunConfig tiny(const std::filesystem::path& out = "unused") {
  RunConfig c;
  c.seed = 1;
  c.epochs = 2;
  c.checkpoint_every = 1;
  c.output_dir = out.string();
  c.optim.batch_size = 4;
  c.optim.warmup_epochs = 1;
  c.data.train_count = 8;
  c.data.test_count = 4;
  c.data.image_size = 16;
  c.aug.global_size = 16;
  c.aug.local_size = 8;
  c.aug.local_crops = 2;
  c.aug.global_scale = {0.5, 1.0};
  c.aug.local_scale = {0.2, 0.5};
  c.model.patch_size = 4;
  c.model.embed_dim = 8;
  c.model.depth = 2;
  c.model.heads = 2;
  c.model.mlp_hidden = 16;
  c.model.head_hidden = 16;
  c.model.out_dim = 8;
  c.mask.num = 2;
  c.mask.p = 0.5;
  c.validate();
  return c;
}

struct Fixture {
  RunConfig cfg;
  Dataset data;
  TrainState state;

  explicit Fixture(RunConfig c) : cfg(std::move(c)) {
    data = load_training_data(cfg);
    configure_steps(cfg, data.size());
    state = TrainState::initialize(cfg, compute_normalization(data));
  }

  std::vector<ViewSet> batch(std::uint64_t epoch = 0) {
    const auto order = epoch_order(*cfg.seed, epoch, data.size());
    return make_batch(data, std::span<const std::size_t>(order).first(cfg.optim.batch_size), cfg.aug, *cfg.seed,
                      epoch, 0);
  }
};

std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("initial teacher equals the student") {
  Fixture f(tiny());
  const auto s = snapshot(f.state.student.parameters());
  const auto t = snapshot(f.state.teacher.parameters());
  CHECK(s == t);
  for (const auto& p : f.state.teacher.parameters()) CHECK_FALSE(p.tensor.requires_grad());
}

TEST_CASE("train step: teacher untouched by gradients and equal to the EMA replay") {
  Fixture f(tiny());
  f.state.step = 3;
  const auto teacher_before = snapshot(f.state.teacher.parameters());
  const StepMetrics m = train_step(f.batch(), f.state);
  for (const auto& p : f.state.teacher.parameters()) CHECK_FALSE(p.tensor.has_grad());
  CHECK(m.step == 3);
  CHECK(f.state.step == 4);
  CHECK(m.m == doctest::Approx(momentum_schedule(3, f.cfg.optim.total_steps(), 0.996, 1.0)).epsilon(1e-15));
  CHECK(m.lr == doctest::Approx(lr_schedule(3, f.cfg.optim)).epsilon(1e-15));

  const auto teacher = f.state.teacher.parameters();
  const auto student = f.state.student.parameters();
  double worst = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    for (std::size_t k = 0; k < teacher_before[i].size(); ++k) {
      const double expected = m.m * teacher_before[i][k] + (1.0 - m.m) * student[i].tensor.values()[k];
      const double got = teacher[i].tensor.values()[k];
      worst = std::max(worst, std::abs(got - expected) / std::max(std::abs(expected), 1e-300));
    }
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("optimizer holds no teacher state and decay groups follow the audit") {
  Fixture f(tiny());
  train_step(f.batch(), f.state);
  for (const auto& [name, mom] : f.state.optimizer.moments()) CHECK(name.rfind("teacher.", 0) != 0);
  for (const auto& p : f.state.trainable()) {
    const bool no_decay = p.name == "mask_embedding" || p.name.find("bias") != std::string::npos ||
                          p.name.find("gamma") != std::string::npos || p.name.find("beta") != std::string::npos;
    CHECK(p.decay == !no_decay);
  }
}

TEST_CASE("masked fraction stays within [0, p]") {
  RunConfig c = tiny();
  for (auto strategy : {MaskStrategy::random, MaskStrategy::attention_guided}) {
    c.mask.strategy = strategy;
    Fixture f(c);
    for (int s = 0; s < 2; ++s) {
      const StepMetrics m = train_step(f.batch(), f.state);
      CHECK(m.masked_fraction >= 0.0);
      // Guided masking can only pick from the n/num lowest-attention slots.
      if (strategy == MaskStrategy::attention_guided) CHECK(m.masked_fraction <= 0.5);
      else CHECK(std::abs(m.masked_fraction - c.mask.p) < 0.25);
    }
  }
}

TEST_CASE("plain distillation reduction") {
  RunConfig c = tiny();
  c.loss.lambda2 = 0.0;
  c.mask.strategy = MaskStrategy::none;
  Fixture f(c);
  const auto decoder_before = snapshot(f.state.decoder.parameters());
  const StepMetrics m = train_step(f.batch(), f.state);
  CHECK(m.restore == 0.0);
  CHECK(m.masked_fraction == 0.0);
  CHECK(m.total == m.ce);
  CHECK(snapshot(f.state.decoder.parameters()) == decoder_before);
}

TEST_CASE("global passes move BN buffers, teacher and student alike") {
  Fixture f(tiny());
  const auto sb = f.state.student.head().bn1, tb = f.state.teacher.head().bn1, db = f.state.decoder.stages()[0].bn;
  train_step(f.batch(), f.state);
  CHECK_FALSE(f.state.student.head().bn1 == sb);
  CHECK_FALSE(f.state.teacher.head().bn1 == tb);
  CHECK_FALSE(f.state.decoder.stages()[0].bn == db);
}

TEST_CASE("non-finite loss aborts with step diagnostics") {
  Fixture f(tiny());
  f.state.step = 1;
  f.state.student.blocks()[0].fc1_bias.values()[0] = NAN;
  try {
    train_step(f.batch(), f.state);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto a = epoch_order(1, 0, 50), b = epoch_order(1, 0, 50), c = epoch_order(1, 1, 50);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 50);
}

TEST_CASE("steps per epoch drop the incomplete batch") {
  RunConfig c = tiny();
  configure_steps(c, 11);
  CHECK(c.optim.steps_per_epoch == 2);
  CHECK_THROWS_AS(configure_steps(c, 3), ConfigError);
}

TEST_CASE("worker count never changes the views") {
  Fixture f(tiny());
  const auto order = epoch_order(1, 0, f.data.size());
  const auto a = make_batch(f.data, order, f.cfg.aug, 1, 0, 0);
  const auto b = make_batch(f.data, order, f.cfg.aug, 1, 0, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].global_views[1].sample.image == b[i].global_views[1].sample.image);
    CHECK(a[i].local_views[0].sample.image == b[i].local_views[0].sample.image);
  }
}

TEST_CASE("checkpoint round trip and error paths") {
  TempDir dir("ckpt");
  RunConfig c = tiny();
  c.loss.centering = true;
  Fixture f(c);
  train_epoch(f.data, f.state);
  const auto path = dir.path() / "a.bin";
  save_checkpoint(f.state, path);
  TrainState back = load_checkpoint(path);
  CHECK(checkpoint_bytes(back) == read_file(path));
  CHECK(back.step == f.state.step);
  CHECK(back.epoch == 1);
  CHECK(back.norm == f.state.norm);
  CHECK(back.center == f.state.center);
  CHECK(back.optimizer.steps() == f.state.optimizer.steps());

  std::string bytes = read_file(path);
  std::string wrong_version = bytes;
  wrong_version[8] = 9;
  std::ofstream(dir.path() / "v.bin", std::ios::binary) << wrong_version;
  try {
    load_checkpoint(dir.path() / "v.bin");
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  std::string corrupt = bytes;
  corrupt[bytes.size() / 2] ^= 0x10;
  std::ofstream(dir.path() / "c.bin", std::ios::binary) << corrupt;
  try {
    load_checkpoint(dir.path() / "c.bin");
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("checksum") != std::string::npos);
  }
  CHECK_THROWS(load_checkpoint(dir.path() / "missing.bin"));
}

TEST_CASE("identical runs give identical bytes; resume matches an unbroken run") {
  TempDir dir("runs");
  const auto x = dir.path() / "x", a = dir.path() / "a", b = dir.path() / "b";
  pretrain(tiny(x));
  std::filesystem::rename(x, a);
  pretrain(tiny(x));
  std::filesystem::rename(x, b);
  for (const auto& name : {checkpoint_name(1), checkpoint_name(2), std::string("metrics.csv"), std::string("config.cfg")})
    CHECK(read_file(a / name) == read_file(b / name));

  std::filesystem::create_directories(x);
  std::filesystem::copy_file(a / checkpoint_name(1), x / checkpoint_name(1));
  std::filesystem::copy_file(a / "metrics.csv", x / "metrics.csv");
  PretrainOptions opts;
  opts.resume = x / checkpoint_name(1);
  PretrainResult r = pretrain(tiny(x), opts);
  CHECK(r.final_checkpoint == x / checkpoint_name(2));
  CHECK(read_file(x / checkpoint_name(2)) == read_file(a / checkpoint_name(2)));
  CHECK(read_file(x / "metrics.csv") == read_file(a / "metrics.csv"));
}

TEST_CASE("pretrain writes config, metrics and checkpoints") {
  TempDir dir("outputs");
  RunConfig c = tiny(dir.path() / "run");
  c.epochs = 1;
  c.dump_reconstructions = true;
  PretrainResult r = pretrain(c);
  CHECK(std::filesystem::exists(r.output_dir / "config.cfg"));
  CHECK(std::filesystem::exists(r.output_dir / checkpoint_name(1)));
  CHECK(std::filesystem::exists(r.output_dir / "recon_e0001.png"));
  std::ifstream in(r.output_dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,ce,restore,total,lr,m,masked_fraction");
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 2);
  // Re-running from the written config reproduces the checkpoint.
  RunConfig again = RunConfig::load(r.output_dir / "config.cfg");
  again.output_dir = (dir.path() / "again").string();
  again.dump_reconstructions = false;
  PretrainResult r2 = pretrain(again);
  TrainState s1 = load_checkpoint(r.final_checkpoint), s2 = load_checkpoint(r2.final_checkpoint);
  CHECK(snapshot(s1.student.parameters()) == snapshot(s2.student.parameters()));
  CHECK(snapshot(s1.teacher.parameters()) == snapshot(s2.teacher.parameters()));
}
