// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion;
// exits nonzero if any fails. Pass criterion numbers to run a subset.

#include <algorithm>
#include <bit>
#include <boost/math/distributions/chi_squared.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "mst/evaluation.hpp"
#include "mst/masking.hpp"
#include "mst/objectives.hpp"
#include "mst/trainer.hpp"

using namespace mst;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / ("mst_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

// Random attention map; with `ties`, values are drawn from 8 levels.
std::vector<double> random_attention(std::size_t n, Rng& rng, bool ties) {
  std::vector<double> a(n);
  double s = 0.0;
  for (auto& v : a) {
    v = ties ? 1.0 + static_cast<double>(uniform_index(rng, 8)) : uniform01(rng) + 1e-12;
    s += v;
  }
  for (auto& v : a) v /= s;
  return a;
}

// Threshold straight from the definition: ascending order, index n / num.
double oracle_tau(std::vector<double> a, std::size_t num) {
  std::sort(a.begin(), a.end());
  const std::size_t idx = a.size() / num;
  return idx < a.size() ? a[idx] : INFINITY;
}

// ---------------------------------------------------------------------------

Outcome mask_safety() {
  const auto t0 = Clock::now();
  Outcome o;
  const std::size_t nums[] = {1, 2, 4, 8};
  const double ps[] = {0.05, 0.10, 0.15};

  std::size_t checked = 0, violations = 0;
  Rng rng = make_rng(101);
  for (std::size_t t = 0; t < 10000; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 256);
    const auto a = random_attention(n, rng, t % 2 == 1);
    for (std::size_t num : nums) {
      if (num > n) continue;
      const double tau = oracle_tau(a, num);
      for (double p : ps) {
        MaskConfig cfg;
        cfg.strategy = MaskStrategy::attention_guided;
        cfg.num = num;
        cfg.p = p;
        const MaskVector m = attention_guided_mask(a, cfg, rng);
        for (std::size_t i = 0; i < n; ++i) violations += (m.bits[i] && a[i] >= tau);
        ++checked;
      }
    }
  }

  // Exact enumeration for n <= 12: masks are subsets of the candidate set C
  // with P(m) = p^|m| (1-p)^(|C|-|m|). Statistics from all configurations are
  // pooled into one chi-square test.
  double stat = 0.0, dof = 0.0;
  std::size_t configs = 0, outside = 0;
  const std::size_t draws = 20000;
  for (std::size_t n = 2; n <= 12; ++n) {
    for (std::size_t num : nums) {
      if (num > n) continue;
      for (double p : ps) {
        Rng arng = make_rng(202, {n, num, static_cast<std::uint64_t>(p * 100)});
        const auto a = random_attention(n, arng, n % 3 == 0);
        const double tau = oracle_tau(a, num);
        std::vector<std::size_t> cand;
        for (std::size_t i = 0; i < n; ++i)
          if (a[i] < tau) cand.push_back(i);
        const std::size_t c = cand.size();
        std::vector<double> expected(std::size_t{1} << c);
        for (std::size_t s = 0; s < expected.size(); ++s) {
          const int k = std::popcount(s);
          expected[s] = draws * std::pow(p, k) * std::pow(1.0 - p, static_cast<double>(c) - k);
        }
        std::vector<double> observed(expected.size(), 0.0);
        MaskConfig cfg;
        cfg.strategy = MaskStrategy::attention_guided;
        cfg.num = num;
        cfg.p = p;
        Rng mrng = make_rng(303, {n, num, static_cast<std::uint64_t>(p * 100)});
        for (std::size_t d = 0; d < draws; ++d) {
          const MaskVector m = attention_guided_mask(a, cfg, mrng);
          std::size_t code = 0;
          std::size_t inside = 0;
          for (std::size_t j = 0; j < c; ++j)
            if (m.bits[cand[j]]) code |= std::size_t{1} << j, ++inside;
          if (inside != m.count()) ++outside;
          observed[code] += 1.0;
        }
        // Pool sparse cells (expected < 5) into one.
        double pooled_e = 0.0, pooled_o = 0.0;
        std::vector<std::pair<double, double>> cells;
        for (std::size_t s = 0; s < expected.size(); ++s) {
          if (expected[s] >= 5.0) cells.push_back({expected[s], observed[s]});
          else pooled_e += expected[s], pooled_o += observed[s];
        }
        if (pooled_e > 0.0) {
          if (pooled_e >= 5.0 || cells.empty()) {
            cells.push_back({pooled_e, pooled_o});
          } else {
            auto smallest = std::min_element(cells.begin(), cells.end());
            smallest->first += pooled_e;
            smallest->second += pooled_o;
          }
        }
        if (cells.size() < 2) continue;
        for (const auto& [e, ob] : cells) stat += (ob - e) * (ob - e) / e;
        dof += static_cast<double>(cells.size() - 1);
        ++configs;
      }
    }
  }
  const boost::math::chi_squared dist(dof);
  const double pvalue = boost::math::cdf(boost::math::complement(dist, stat));
  const double elapsed = seconds_since(t0);
  o.pass = violations == 0 && outside == 0 && pvalue >= 0.01 && elapsed < 30.0;
  o.detail = fmt("%zu masks, %zu at or above tau; enumeration over %zu configs: %zu outside C, chi2=%.1f dof=%.0f "
                 "p=%.3f; %.1fs",
                 checked, violations, configs, outside, stat, dof, pvalue, elapsed);
  return o;
}

Outcome masked_fraction() {
  Outcome o;
  std::string worst;
  double worst_z = 0.0;
  const std::size_t maps = 2000;
  for (std::size_t n : {64u, 196u}) {
    for (std::size_t num : {1u, 2u, 4u, 8u}) {
      for (double p : {0.05, 0.10, 0.15}) {
        MaskConfig cfg;
        cfg.strategy = MaskStrategy::attention_guided;
        cfg.num = num;
        cfg.p = p;
        Rng rng = make_rng(404, {n, num, static_cast<std::uint64_t>(p * 100)});
        double masked = 0.0;
        for (std::size_t t = 0; t < maps; ++t) {
          const auto a = random_attention(n, rng, false);
          masked += static_cast<double>(generate_mask(n, a, cfg, rng).count());
        }
        const double c = static_cast<double>(n / num);
        const double target = p * c / static_cast<double>(n);
        const double frac = masked / static_cast<double>(maps * n);
        const double sigma = std::sqrt(maps * c * p * (1.0 - p)) / static_cast<double>(maps * n);
        const double z = std::abs(frac - target) / sigma;
        if (z > 3.0) o.pass = false;
        if (z >= worst_z) {
          worst_z = z;
          worst = fmt("n=%zu num=%zu p=%.2f: %.5f vs %.5f", n, num, p, frac, target);
        }
      }
    }
  }
  o.detail = fmt("24 cells, %zu maps each; worst |z|=%.2f (%s)", maps, worst_z, worst.c_str());
  return o;
}

RunConfig micro_config() {
  RunConfig c;
  c.seed = 5;
  c.epochs = 2;
  c.optim.batch_size = 4;
  c.optim.warmup_epochs = 1;
  c.data.train_count = 8;
  c.data.image_size = 8;
  c.aug.global_size = 8;
  c.aug.local_size = 4;
  c.aug.local_crops = 2;
  c.aug.global_scale = {0.6, 1.0};
  c.aug.local_scale = {0.2, 0.5};
  c.model.patch_size = 4;
  c.model.embed_dim = 8;
  c.model.depth = 2;
  c.model.heads = 2;
  c.model.mlp_hidden = 16;
  c.model.head_hidden = 16;
  c.model.out_dim = 4;
  c.mask.strategy = MaskStrategy::attention_guided;
  c.mask.num = 2;
  c.mask.p = 1.0;
  c.validate();
  return c;
}

struct Micro {
  RunConfig cfg;
  Dataset data;
  TrainState state;
  std::vector<ViewSet> batch;

  explicit Micro(RunConfig c) : cfg(std::move(c)) {
    data = load_training_data(cfg);
    configure_steps(cfg, data.size());
    state = TrainState::initialize(cfg, compute_normalization(data));
    const auto order = epoch_order(*cfg.seed, 0, data.size());
    batch = make_batch(data, std::span<const std::size_t>(order).first(cfg.optim.batch_size), cfg.aug, *cfg.seed, 0,
                       0);
  }
};

Outcome gradients() {
  Outcome o;
  Micro m(micro_config());
  // Some zero-initialized tensors have degenerate gradients; start from a
  // generic point.
  {
    Rng rng = make_rng(77);
    for (auto& p : m.state.trainable())
      for (auto& v : p.tensor.values()) v += 0.05 * normal(rng);
  }
  auto loss = [&] { return compute_losses(m.batch, m.state, false).total; };

  for (auto& p : m.state.trainable()) p.tensor.zero_grad();
  Tensor total = loss();
  total.backward();
  const double h = 1e-6;

  std::map<std::string, std::vector<Tensor>> groups;
  for (auto& b : m.state.student.blocks()) {
    groups["attention"].push_back(b.qkv_weight);
    groups["attention"].push_back(b.proj_weight);
  }
  auto& hd = m.state.student.head();
  groups["head"] = {hd.fc1_weight, hd.fc2_weight, hd.fc3_weight, hd.fc3_bias, hd.bn1_gamma};
  for (auto& s : m.state.decoder.stages()) groups["decoder"].push_back(s.conv_weight);
  groups["decoder"].push_back(m.state.decoder.out_weight());
  groups["mask embedding"] = {m.state.mask_embedding.vector};

  Rng rng = make_rng(88);
  std::string detail;
  for (auto& [name, tensors] : groups) {
    std::vector<std::pair<std::size_t, std::size_t>> picks;
    const bool exhaustive = tensors.size() == 1 && tensors[0].numel() < 20;
    if (exhaustive) {
      for (std::size_t i = 0; i < tensors[0].numel(); ++i) picks.push_back({0, i});
    } else {
      std::set<std::pair<std::size_t, std::size_t>> seen;
      while (seen.size() < 20) {
        const std::size_t t = uniform_index(rng, tensors.size());
        seen.insert({t, uniform_index(rng, tensors[t].numel())});
      }
      picks.assign(seen.begin(), seen.end());
    }
    double worst = 0.0;
    for (auto [t, i] : picks) {
      Tensor& p = tensors[t];
      const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
      auto values = p.values();
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
      const double err = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-8);
      if (std::getenv("MST_ACCEPTANCE_VERBOSE"))
        std::printf("    %s[%zu][%zu] analytic %.6e numeric %.6e\n", name.c_str(), t, i, analytic, numeric);
      worst = std::max(worst, err);
    }
    if (worst >= 1e-3) o.pass = false;
    detail += fmt("%s%s %zu%s max rel %.1e", detail.empty() ? "" : "; ", name.c_str(), picks.size(),
                  exhaustive ? " (all)" : "", worst);
  }
  o.detail = detail;
  return o;
}

Outcome teacher_isolation() {
  Outcome o;
  Micro m(micro_config());
  m.state.step = 1;
  Tensor total = compute_losses(m.batch, m.state, false).total;
  total.backward();
  bool clean = true;
  for (const auto& p : m.state.teacher.parameters()) {
    if (p.tensor.requires_grad()) clean = false;
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) clean = clean && g == 0.0;
  }

  std::vector<std::vector<double>> before;
  for (const auto& p : m.state.teacher.parameters()) before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  const StepMetrics s = train_step(m.batch, m.state);
  const double mom = momentum_schedule(1, m.cfg.optim.total_steps(), m.cfg.optim.momentum_base,
                                       m.cfg.optim.momentum_final);
  const auto teacher = m.state.teacher.parameters();
  const auto student = m.state.student.parameters();
  double worst = 0.0;
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    for (std::size_t i = 0; i < before[k].size(); ++i) {
      const double want = mom * before[k][i] + (1.0 - mom) * student[k].tensor.values()[i];
      const double got = teacher[k].tensor.values()[i];
      worst = std::max(worst, std::abs(got - want) / std::max(std::abs(want), 1e-300));
    }
  }
  bool moments_clean = true;
  for (const auto& [name, mo] : m.state.optimizer.moments()) moments_clean = moments_clean && name.rfind("teacher.", 0) != 0;
  o.pass = clean && moments_clean && worst <= 1e-12 && s.m == mom;
  o.detail = fmt("teacher grads %s; optimizer %s teacher state; EMA replay max rel %.1e at m=%.9f",
                 clean ? "absent" : "PRESENT", moments_clean ? "holds no" : "HOLDS", worst, mom);
  return o;
}

std::string bn_bytes(TrainState& s) {
  std::string out;
  auto add = [&](std::vector<NamedBuffer> bufs) {
    for (const auto& b : bufs) {
      out += b.name;
      out.append(reinterpret_cast<const char*>(b.buffers->running_mean.data()), b.buffers->running_mean.size() * 8);
      out.append(reinterpret_cast<const char*>(b.buffers->running_var.data()), b.buffers->running_var.size() * 8);
    }
  };
  add(s.student.buffers());
  add(s.teacher.buffers());
  add(s.decoder.buffers());
  return out;
}

Outcome bn_rule() {
  Outcome o;
  RunConfig cfg = micro_config();
  Micro a(cfg), b(cfg), c(cfg);
  // b: same globals, different locals. c: different globals.
  Rng rng = make_rng(55);
  for (auto& vs : b.batch)
    for (auto& lv : vs.local_views)
      for (auto& px : lv.sample.image.pixels) px = uniform01(rng);
  for (auto& px : c.batch[0].global_views[0].sample.image.pixels) px = uniform01(rng);

  a.state.step = b.state.step = c.state.step = 1;
  const std::string initial = bn_bytes(a.state);
  train_step(a.batch, a.state);
  train_step(b.batch, b.state);
  train_step(c.batch, c.state);
  const std::string ba = bn_bytes(a.state), bb = bn_bytes(b.state), bc = bn_bytes(c.state);

  // Locals must have mattered to the step itself.
  bool params_differ = false;
  const auto pa = a.state.student.parameters(), pb = b.state.student.parameters();
  for (std::size_t k = 0; k < pa.size() && !params_differ; ++k)
    params_differ = !std::equal(pa[k].tensor.values().begin(), pa[k].tensor.values().end(),
                                pb[k].tensor.values().begin());

  // Direct check: a student pass over local views with the trainer's flags.
  std::vector<TokenSequence> seqs;
  for (const auto& vs : a.batch)
    for (const auto& lv : vs.local_views) seqs.push_back(a.state.student.patch_embed(normalize(lv.sample.image, a.state.norm)));
  const std::string pre = bn_bytes(a.state);
  {
    EncodeOptions lopts;
    lopts.update_bn_stats = false;
    a.state.student.encode(seqs, lopts);
  }
  const bool direct = bn_bytes(a.state) == pre;

  o.pass = ba == bb && params_differ && ba != initial && ba != bc && direct;
  o.detail = fmt("local views change buffers: %s (params moved: %s); direct local pass: %s; global views change "
                 "buffers: %s; different globals give different buffers: %s",
                 ba == bb ? "no" : "YES", params_differ ? "yes" : "no", direct ? "unchanged" : "CHANGED",
                 ba != initial ? "yes" : "NO", ba != bc ? "yes" : "NO");
  return o;
}

Outcome shapes() {
  Outcome o;
  double worst_sum = 0.0;
  for (std::size_t depth : {1u, 3u}) {
    for (std::size_t size : {16u, 32u}) {
      EncoderConfig ec;
      ec.patch_size = 4;
      ec.embed_dim = 16;
      ec.depth = depth;
      ec.heads = 4;
      ec.mlp_hidden = 32;
      ec.head_hidden = 32;
      ec.out_dim = 16;
      ec.image_size = 32;
      Encoder enc(ec, 9);
      Rng rng = make_rng(66, {depth, size});
      std::vector<TokenSequence> seqs;
      for (int i = 0; i < 3; ++i) {
        Image im(3, size, size);
        for (auto& px : im.pixels) px = normal(rng);
        seqs.push_back(enc.patch_embed(im));
      }
      NoGradGuard g;
      EncodeOptions opts;
      opts.keep_layer_attention = true;
      const EncoderOutput out = enc.encode(seqs, opts);
      for (const auto& layer : out.layer_attention)
        for (const auto& map : layer) worst_sum = std::max(worst_sum, std::abs(std::accumulate(map.begin(), map.end(), 0.0) - 1.0));
      if (out.layer_attention.size() != depth) o.pass = false;
    }
  }
  if (worst_sum > 1e-5) o.pass = false;

  std::size_t decoder_cases = 0;
  for (std::size_t stages : {1u, 2u, 3u}) {
    for (std::size_t grid : {2u, 4u}) {
      DecoderConfig dc;
      dc.in_dim = 16;
      dc.stages = stages;
      Decoder dec(dc, 3);
      Rng rng = make_rng(67, {stages, grid});
      std::vector<double> v(2 * grid * grid * 16);
      for (auto& x : v) x = normal(rng);
      NoGradGuard g;
      const Tensor out = dec.reconstruct(Tensor({2 * grid * grid, 16}, v), 2, grid, grid, false);
      const std::size_t side = (std::size_t{1} << stages) * grid;
      if (out.shape() != std::vector<std::size_t>{2, 3, side, side}) o.pass = false;
      ++decoder_cases;
    }
  }

  double worst_ce = 0.0;
  LossWeights w;
  for (std::size_t K : {4u, 64u, 256u}) {
    for (std::size_t N : {0u, 2u, 6u}) {
      std::vector<Tensor> t(2, Tensor({3, K}, 0.0)), s(N + 2, Tensor({3, K}, 0.0));
      worst_ce = std::max(worst_ce, std::abs(distillation_loss(t, s, w).item() - std::log(static_cast<double>(K))));
    }
  }
  if (worst_ce > 1e-9) o.pass = false;
  o.detail = fmt("attention sum max dev %.1e; %zu decoder shapes %s; uniform-logit loss max dev from ln K %.1e",
                 worst_sum, decoder_cases, o.pass ? "ok" : "checked", worst_ce);
  return o;
}

fs::path toy_config_path() { return fs::path(MST_CONFIG_DIR) / "toy.cfg"; }

struct ToyRun {
  double first = 0.0, last = 0.0, knn = 0.0, seconds = 0.0;
};

ToyRun toy_run(std::uint64_t seed, MaskStrategy strategy) {
  RunConfig cfg = RunConfig::load(toy_config_path());
  cfg.seed = seed;
  cfg.mask.strategy = strategy;
  cfg.output_dir = (scratch_root() / fmt("toy_%s_s%llu", to_string(strategy).c_str(),
                                         static_cast<unsigned long long>(seed)))
                       .string();
  cfg.validate();
  const auto t0 = Clock::now();
  const PretrainResult r = pretrain(cfg);
  ToyRun out;
  out.seconds = seconds_since(t0);
  out.first = r.epoch_mean_total.front();
  out.last = r.epoch_mean_total.back();
  TrainState st = load_checkpoint(r.final_checkpoint);
  const FeatureMatrix train = extract_features(load_training_data(st.config), st, st.config.eval.branch);
  const FeatureMatrix test = extract_features(synthetic_test_data(st.config), st, st.config.eval.branch);
  out.knn = knn_evaluate(train, test, st.config.eval.k, st.config.eval.temp);
  std::printf("    toy %-16s seed %llu: loss %.4f -> %.4f, k-NN top-1 %.3f, %.0fs\n", to_string(strategy).c_str(),
              static_cast<unsigned long long>(seed), out.first, out.last, out.knn, out.seconds);
  std::fflush(stdout);
  fs::remove_all(cfg.output_dir);
  return out;
}

Outcome toy_learning() {
  Outcome o;
  const RunConfig base = RunConfig::load(toy_config_path());
  const std::uint64_t s0 = base.seed.value();
  std::vector<ToyRun> guided, random;
  for (std::uint64_t k = 0; k < 3; ++k) guided.push_back(toy_run(s0 + k, MaskStrategy::attention_guided));
  for (std::uint64_t k = 0; k < 3; ++k) random.push_back(toy_run(s0 + k, MaskStrategy::random));

  const ToyRun& d = guided.front();
  const double drop = (d.first - d.last) / d.first;
  double slowest = 0.0, g = 0.0, r = 0.0;
  for (const auto& x : guided) slowest = std::max(slowest, x.seconds), g += x.knn / 3.0;
  for (const auto& x : random) slowest = std::max(slowest, x.seconds), r += x.knn / 3.0;
  const bool a = drop >= 0.5, b = d.knn >= 0.85, c = g >= r, t = slowest <= 900.0;
  o.pass = a && b && c && t;
  o.detail = fmt("(a) loss drop %.1f%% %s; (b) k-NN %.3f %s; (c) guided mean %.3f vs random %.3f %s; slowest run "
                 "%.0fs %s",
                 100.0 * drop, a ? "ok" : "FAIL", d.knn, b ? "ok" : "FAIL", g, r, c ? "ok" : "FAIL", slowest,
                 t ? "ok" : "FAIL");
  return o;
}

Outcome reproducibility() {
  Outcome o;
  RunConfig cfg = RunConfig::load(toy_config_path());
  cfg.epochs = 4;
  cfg.checkpoint_every = 2;
  cfg.optim.warmup_epochs = 1;
  const fs::path x = scratch_root() / "repro", a = scratch_root() / "repro_a", b = scratch_root() / "repro_b";
  cfg.output_dir = x.string();
  cfg.validate();
  pretrain(cfg);
  fs::rename(x, a);
  pretrain(cfg);
  fs::rename(x, b);
  const std::vector<std::string> files{checkpoint_name(2), checkpoint_name(4), "metrics.csv"};
  bool same = true;
  for (const auto& f : files) same = same && read_file(a / f) == read_file(b / f) && !read_file(a / f).empty();

  fs::create_directories(x);
  fs::copy_file(a / checkpoint_name(2), x / checkpoint_name(2));
  fs::copy_file(a / "metrics.csv", x / "metrics.csv");
  PretrainOptions opts;
  opts.resume = x / checkpoint_name(2);
  pretrain(cfg, opts);
  const bool resumed = read_file(x / checkpoint_name(4)) == read_file(a / checkpoint_name(4)) &&
                       read_file(x / "metrics.csv") == read_file(a / "metrics.csv");
  o.pass = same && resumed;
  o.detail = fmt("repeat run %s; resume from epoch 2 %s", same ? "byte-identical" : "DIFFERS",
                 resumed ? "byte-identical to the unbroken run" : "DIFFERS");
  for (const auto& p : {a, b, x}) fs::remove_all(p);
  return o;
}

FeatureMatrix gaussian_features(std::size_t n, std::size_t d, Rng& rng) {
  FeatureMatrix f;
  f.rows = n;
  f.dim = d;
  f.features.resize(n * d);
  for (auto& v : f.features) v = normal(rng);
  f.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) f.labels[i] = static_cast<int>(i % 2);
  for (std::size_t i = n; i > 1; --i) std::swap(f.labels[i - 1], f.labels[uniform_index(rng, i)]);
  normalize_rows(f);
  return f;
}

Outcome evaluation_oracles() {
  Outcome o;
  Rng rng = make_rng(909);
  const FeatureMatrix train = gaussian_features(500, 32, rng);
  const double self = knn_evaluate(train, train, 1, 0.07);

  // Separable: class c puts its mass on coordinate c.
  FeatureMatrix sep;
  sep.rows = 300;
  sep.dim = 8;
  for (std::size_t i = 0; i < sep.rows; ++i) {
    const int label = static_cast<int>(i % 4);
    sep.labels.push_back(label);
    for (std::size_t j = 0; j < sep.dim; ++j) sep.features.push_back((static_cast<int>(j) == label ? 1.0 : 0.0) + 0.1 * normal(rng));
  }
  normalize_rows(sep);
  ProbeConfig pc;
  const double separable = linear_probe(sep, sep, pc);

  // Labels carry no information about the features: chance is 1/2.
  const FeatureMatrix ptrain = gaussian_features(400, 32, rng), ptest = gaussian_features(1000, 32, rng);
  const double permuted = linear_probe(ptrain, ptest, pc);
  const double sigma = std::sqrt(0.25 / 1000.0);
  const double z = std::abs(permuted - 0.5) / sigma;
  o.pass = self == 1.0 && separable == 1.0 && z <= 3.0;
  o.detail = fmt("k-NN train/train k=1 %.3f; separable probe %.3f; permuted-label probe %.3f (|z|=%.2f)", self,
                 separable, permuted, z);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"mask safety", mask_safety},
      {"masked-fraction expectation", masked_fraction},
      {"gradient correctness", gradients},
      {"teacher isolation", teacher_isolation},
      {"BN update rule", bn_rule},
      {"shape and normalization", shapes},
      {"toy learning", toy_learning},
      {"reproducibility", reproducibility},
      {"evaluation oracles", evaluation_oracles},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::atoi(argv[i])));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome r;
    const auto t0 = Clock::now();
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("error: ") + e.what();
    }
    std::printf("[%s] %zu %s: %s (%.1fs)\n", r.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, r.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
    failed += !r.pass;
  }
  fs::remove_all(scratch_root());
  std::printf("%d failed\n", failed);
  return failed ? 1 : 0;
}
