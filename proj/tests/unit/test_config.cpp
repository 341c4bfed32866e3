// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdlib>

#include "helpers.hpp"
#include "mst/config.hpp"

using namespace mst;

namespace {

RunConfig seeded() {
  RunConfig c;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("defaults validate and resolve derived fields") {
  RunConfig c = seeded();
  CHECK_NOTHROW(c.validate());
  CHECK(c.decoder_stages == 2);
  CHECK(c.model.image_size == 32);
  CHECK(c.optim.total_epochs == c.epochs);
  CHECK(c.decoder_config().in_dim == c.model.embed_dim);
}

TEST_CASE("seed is mandatory") {
  RunConfig c;
  try {
    c.validate();
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "seed");
  }
}

TEST_CASE("unknown keys are rejected by name") {
  RunConfig c = seeded();
  try {
    c.apply_override("foo=1");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "foo");
    CHECK(std::string(e.what()).find("foo") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::parse("[mask]\nbogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("no-equals-sign"), ConfigError);
}

TEST_CASE("invalid values name their key") {
  RunConfig c = seeded();
  auto key_of = [&](const std::string& assignment) {
    RunConfig copy = c;
    try {
      copy.apply_override(assignment);
      copy.validate();
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<none>");
  };
  CHECK(key_of("mask.p=abc") == "mask.p");
  CHECK(key_of("mask.strategy=blockwise") == "mask.strategy");
  CHECK(key_of("epochs=-3") == "epochs");
  CHECK(key_of("mask.p=1.5") == "mask");
  CHECK(key_of("model.heads=3") == "model");
  CHECK(key_of("decoder.stages=3") == "decoder.stages");
  CHECK(key_of("eval.branch=both") == "eval.branch");
  CHECK(key_of("model.head_bn=maybe") == "model.head_bn");
}

TEST_CASE("serialize and parse round trip") {
  RunConfig c = seeded();
  c.apply_override("mask.strategy=random");
  c.apply_override("mask.p=0.15");
  c.apply_override("loss.lambda2=0.1234567890123");
  c.apply_override("decoder.channels=8,4");
  c.apply_override("eval.branch=student");
  c.apply_override("data.layout=flat");
  const std::string text = c.serialize();
  RunConfig back = RunConfig::parse(text);
  CHECK(back.serialize() == text);
  CHECK(back.mask.strategy == MaskStrategy::random);
  CHECK(back.loss.lambda2 == c.loss.lambda2);
  CHECK(back.decoder_channels == std::vector<std::size_t>{8, 4});
  CHECK(back.eval.branch == Branch::student);
  CHECK(*back.seed == 3);
  for (const auto& key : RunConfig::keys()) CHECK(back.get(key) == c.get(key));
}

TEST_CASE("sections, comments and top-level keys") {
  const RunConfig c = RunConfig::parse(
      "# comment\nseed = 11\nepochs=5\n; other comment\n[mask]\nnum = 4\n\n[optim]\nbase_lr = 0.01\n");
  CHECK(*c.seed == 11);
  CHECK(c.epochs == 5);
  CHECK(c.mask.num == 4);
  CHECK(c.optim.base_lr == 0.01);
  CHECK_THROWS(RunConfig::parse("[mask\n"));
  CHECK_THROWS(RunConfig::parse("justtext\n"));
}

TEST_CASE("file save and load") {
  mst::testing::TempDir dir("cfg");
  RunConfig c = seeded();
  c.epochs = 7;
  c.save(dir.path() / "a.cfg");
  CHECK(RunConfig::load(dir.path() / "a.cfg").epochs == 7);
  CHECK_THROWS(RunConfig::load(dir.path() / "missing.cfg"));
}

TEST_CASE("output root from the environment") {
  RunConfig c = seeded();
  c.output_dir = "runs/x";
  ::setenv("MST_OUTPUT_ROOT", "/tmp/root", 1);
  CHECK(resolve_output_dir(c) == std::filesystem::path("/tmp/root/runs/x"));
  c.output_dir = "/abs/x";
  CHECK(resolve_output_dir(c) == std::filesystem::path("/abs/x"));
  ::unsetenv("MST_OUTPUT_ROOT");
  c.output_dir = "runs/x";
  CHECK(resolve_output_dir(c) == std::filesystem::path("runs/x"));
}
