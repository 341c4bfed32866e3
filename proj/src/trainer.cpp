// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/trainer.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <future>
#include <map>
#include <sstream>
#include <stdexcept>

#include "mst/objectives.hpp"
#include "mst/ops.hpp"
#include "mst/rng.hpp"

namespace mst {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'T', 'C', 'K', 'P', 'T', '1'};

std::vector<std::size_t> iota_rows(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> r(count);
  for (std::size_t i = 0; i < count; ++i) r[i] = begin + i;
  return r;
}

std::vector<NamedTensor> prefixed(std::vector<NamedTensor> params, const std::string& prefix) {
  for (auto& p : params) p.name = prefix + p.name;
  return params;
}

// Named BN buffers and center vector flattened for serialization.
std::vector<std::pair<std::string, std::vector<double>*>> state_vectors(TrainState& s) {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  auto add = [&out](const std::string& prefix, const std::vector<NamedBuffer>& bufs) {
    for (const auto& b : bufs) {
      out.emplace_back(prefix + b.name + ".running_mean", &b.buffers->running_mean);
      out.emplace_back(prefix + b.name + ".running_var", &b.buffers->running_var);
    }
  };
  add("student.", s.student.buffers());
  add("teacher.", s.teacher.buffers());
  add("", s.decoder.buffers());
  out.emplace_back("center", &s.center);
  return out;
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void vec(const std::string& name, std::span<const double> v) {
    str(name);
    u64(v.size());
    bytes(v.data(), v.size() * sizeof(double));
  }
  std::string& data() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  void bytes(void* p, std::size_t n) {
    if (n > end_ - pos_) throw std::runtime_error("checkpoint: truncated file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > end_ - pos_) throw std::runtime_error("checkpoint: truncated file");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> vec() {
    const std::uint64_t n = u64();
    if (n > (end_ - pos_) / sizeof(double)) throw std::runtime_error("checkpoint: truncated file");
    std::vector<double> v(n);
    bytes(v.data(), n * sizeof(double));
    return v;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t checksum(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  constexpr std::size_t chunk = 1u << 30;
  for (std::size_t off = 0; off < n; off += chunk) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data + off), static_cast<uInt>(std::min(chunk, n - off)));
  }
  return static_cast<std::uint32_t>(crc);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> flatten(const std::vector<Image>& images) {
  std::vector<double> out;
  for (const auto& im : images) out.insert(out.end(), im.pixels.begin(), im.pixels.end());
  return out;
}

}  // namespace

TrainState TrainState::initialize(const RunConfig& cfg, const Normalization& norm) {
  TrainState s;
  s.config = cfg;
  const std::uint64_t seed = cfg.seed.value();
  s.student = Encoder(cfg.encoder_config(), seed);
  s.teacher = s.student.clone(false);
  s.mask_embedding = MaskEmbedding::zeros(cfg.model.embed_dim);
  s.decoder = Decoder(cfg.decoder_config(), seed);
  s.norm = norm;
  if (cfg.loss.centering) s.center.assign(cfg.model.out_dim, 0.0);
  return s;
}

std::vector<NamedTensor> TrainState::trainable() const {
  std::vector<NamedTensor> all = prefixed(student.parameters(), "student.");
  all.push_back({"mask_embedding", mask_embedding.vector, false});
  for (auto& p : decoder.parameters()) all.push_back(std::move(p));
  return all;
}

std::string format_metrics(const StepMetrics& m) {
  return std::to_string(m.step) + "," + fmt(m.ce) + "," + fmt(m.restore) + "," + fmt(m.total) + "," + fmt(m.lr) +
         "," + fmt(m.m) + "," + fmt(m.masked_fraction);
}

void configure_steps(RunConfig& cfg, std::size_t dataset_size) {
  if (dataset_size < cfg.optim.batch_size) {
    throw ConfigError("batch_size", "batch_size " + std::to_string(cfg.optim.batch_size) + " exceeds dataset size " +
                                        std::to_string(dataset_size));
  }
  cfg.optim.steps_per_epoch = dataset_size / cfg.optim.batch_size;
  cfg.optim.total_epochs = cfg.epochs;
}

StepLosses compute_losses(std::span<const ViewSet> batch, TrainState& state, bool update_bn_stats) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const RunConfig& cfg = state.config;
  const std::size_t B = batch.size();
  const std::size_t N = batch[0].local_views.size();
  for (const auto& vs : batch) {
    if (vs.local_views.size() != N) throw std::invalid_argument("train_step: ragged local view count");
  }

  // View-major image lists: globals [g0 x B, g1 x B], locals [l0 x B, ...].
  std::vector<Image> global_raw, global_in, local_in;
  global_raw.reserve(2 * B);
  for (std::size_t g = 0; g < 2; ++g) {
    for (const auto& vs : batch) {
      global_raw.push_back(vs.global_views[g].sample.image);
      global_in.push_back(normalize(vs.global_views[g].sample.image, state.norm));
    }
  }
  for (std::size_t j = 0; j < N; ++j) {
    for (const auto& vs : batch) local_in.push_back(normalize(vs.local_views[j].sample.image, state.norm));
  }

  // Teacher: no gradients; BN buffers absorb global-view statistics only.
  Tensor teacher_logits;
  std::vector<AttentionMap> teacher_global_attn, teacher_local_attn;
  {
    NoGradGuard guard;
    std::vector<TokenSequence> seqs;
    for (const auto& im : global_in) seqs.push_back(state.teacher.patch_embed(im));
    EncodeOptions opts;
    opts.update_bn_stats = update_bn_stats;
    EncoderOutput out = state.teacher.encode(seqs, opts);
    teacher_logits = out.cls_logits;
    teacher_global_attn = std::move(out.attention);
    if (N > 0 && cfg.mask.strategy == MaskStrategy::attention_guided) {
      std::vector<TokenSequence> lseqs;
      for (const auto& im : local_in) lseqs.push_back(state.teacher.patch_embed(im));
      EncodeOptions lopts;
      lopts.compute_head = false;
      teacher_local_attn = state.teacher.encode(lseqs, lopts).attention;
    }
  }

  const std::uint64_t step = state.step;
  const std::uint64_t seed = cfg.seed.value();
  std::size_t masked = 0, total_tokens = 0;
  auto masked_sequences = [&](const std::vector<Image>& images, const std::vector<AttentionMap>& attn,
                              std::size_t view_offset) {
    std::vector<TokenSequence> seqs;
    seqs.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      TokenSequence seq = state.student.patch_embed(images[i]);
      const std::size_t n = seq.patch_count();
      const std::size_t view = view_offset + i / B, sample = i % B;
      Rng rng = make_rng(seed, {stream::mask, step, view, sample});
      const std::span<const double> a = attn.empty() ? std::span<const double>() : std::span<const double>(attn[i]);
      const MaskVector mask = generate_mask(n, a, cfg.mask, rng);
      masked += mask.count();
      total_tokens += n;
      seqs.push_back(apply_mask(seq, mask, state.mask_embedding));
    }
    return seqs;
  };

  // Student: globals update BN buffers, locals only read batch statistics.
  std::vector<TokenSequence> sg = masked_sequences(global_in, teacher_global_attn, 0);
  EncodeOptions gopts;
  gopts.update_bn_stats = update_bn_stats;
  EncoderOutput student_global = state.student.encode(sg, gopts);
  std::vector<Tensor> student_logits;
  for (std::size_t g = 0; g < 2; ++g) {
    const auto rows = iota_rows(g * B, B);
    student_logits.push_back(ops::select_rows(student_global.cls_logits, rows));
  }
  if (N > 0) {
    std::vector<TokenSequence> sl = masked_sequences(local_in, teacher_local_attn, 2);
    EncodeOptions lopts;
    lopts.update_bn_stats = false;
    EncoderOutput student_local = state.student.encode(sl, lopts);
    for (std::size_t j = 0; j < N; ++j) {
      const auto rows = iota_rows(j * B, B);
      student_logits.push_back(ops::select_rows(student_local.cls_logits, rows));
    }
  }

  std::vector<Tensor> teacher_views;
  {
    NoGradGuard guard;
    for (std::size_t g = 0; g < 2; ++g) {
      const auto rows = iota_rows(g * B, B);
      teacher_views.push_back(ops::select_rows(teacher_logits, rows));
    }
  }

  StepLosses out;
  out.teacher_logits = teacher_logits;
  Tensor& ce = out.ce;
  Tensor& restore = out.restore;
  {
    ce = distillation_loss(teacher_views, student_logits, cfg.loss, state.center);
    if (cfg.loss.lambda2 > 0.0) {
      Tensor recon = state.decoder.reconstruct(student_global.patch_tokens, 2 * B, student_global.rows,
                                               student_global.cols, update_bn_stats);
      const std::size_t per = recon.numel() / (2 * B);
      Tensor flat = ops::reshape(recon, {2 * B, per});
      const std::vector<double> originals = flatten(global_raw);
      if (originals.size() != recon.numel()) {
        throw std::invalid_argument("train_step: reconstruction size differs from the global views");
      }
      std::vector<RestorationPair> pairs;
      for (std::size_t g = 0; g < 2; ++g) {
        const auto rows = iota_rows(g * B, B);
        pairs.push_back({ops::select_rows(flat, rows), std::span<const double>(originals).subspan(g * B * per, B * per)});
      }
      restore = restoration_loss(pairs);
    } else {
      restore = Tensor::scalar(0.0);
    }
    out.total = total_loss(ce, restore, cfg.loss);
  }
  out.masked_fraction = total_tokens ? static_cast<double>(masked) / static_cast<double>(total_tokens) : 0.0;
  return out;
}

namespace {

StepMetrics train_step_impl(std::span<const ViewSet> batch, TrainState& state) {
  const RunConfig& cfg = state.config;
  const std::uint64_t step = state.step;
  StepLosses losses = compute_losses(batch, state, true);
  Tensor total = losses.total;
  const Tensor& teacher_logits = losses.teacher_logits;
  StepMetrics metrics;
  metrics.step = step;
  metrics.ce = losses.ce.item();
  metrics.restore = losses.restore.item();
  metrics.total = total.item();
  metrics.masked_fraction = losses.masked_fraction;
  if (!std::isfinite(metrics.total)) throw std::domain_error("non-finite total loss");

  const std::vector<NamedTensor> params = state.trainable();
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  total.backward();
  clip_grad_norm(params, cfg.optim.clip_grad);
  metrics.lr = lr_schedule(step, cfg.optim);
  state.optimizer.step(params, metrics.lr, cfg.optim.weight_decay);

  metrics.m = momentum_schedule(step, cfg.optim.total_steps(), cfg.optim.momentum_base, cfg.optim.momentum_final);
  ema_update(state.teacher.parameters(), state.student.parameters(), metrics.m);

  if (cfg.loss.centering) {
    const std::size_t K = teacher_logits.dim(1);
    const auto tv = teacher_logits.values();
    const double rows = static_cast<double>(teacher_logits.dim(0));
    for (std::size_t k = 0; k < K; ++k) {
      double mean = 0.0;
      for (std::size_t r = 0; r < teacher_logits.dim(0); ++r) mean += tv[r * K + k];
      mean /= rows;
      state.center[k] = cfg.loss.center_momentum * state.center[k] + (1.0 - cfg.loss.center_momentum) * mean;
    }
  }

  ++state.step;
  return metrics;
}

}  // namespace

StepMetrics train_step(std::span<const ViewSet> batch, TrainState& state) {
  try {
    return train_step_impl(batch, state);
  } catch (const std::domain_error& e) {
    throw std::runtime_error("step " + std::to_string(state.step) + " (epoch " + std::to_string(state.epoch) +
                             "): " + e.what());
  }
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order = iota_rows(0, n);
  Rng rng = make_rng(seed, {stream::shuffle, epoch});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<ViewSet> make_batch(const Dataset& data, std::span<const std::size_t> indices,
                                const AugmentationConfig& aug, std::uint64_t seed, std::uint64_t epoch,
                                std::size_t workers) {
  std::vector<ViewSet> out(indices.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng = augmentation_rng(seed, epoch, indices[i]);
      out[i] = multi_crop(data.samples[indices[i]], aug, rng, indices[i]);
    }
  };
  if (workers <= 1 || indices.size() < 2) {
    work(0, indices.size());
    return out;
  }
  const std::size_t chunks = std::min(workers, indices.size());
  std::vector<std::future<void>> futures;
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t begin = c * indices.size() / chunks, end = (c + 1) * indices.size() / chunks;
    futures.push_back(std::async(std::launch::async, work, begin, end));
  }
  for (auto& f : futures) f.get();
  return out;
}

std::vector<StepMetrics> train_epoch(const Dataset& data, TrainState& state) {
  const RunConfig& cfg = state.config;
  const std::uint64_t seed = cfg.seed.value();
  const std::uint64_t epoch = state.epoch;
  const std::size_t B = cfg.optim.batch_size;
  const std::size_t steps = cfg.optim.steps_per_epoch;
  if (steps == 0 || steps * B > data.size()) throw std::invalid_argument("train_epoch: steps not configured");
  const std::vector<std::size_t> order = epoch_order(seed, epoch, data.size());
  auto batch_indices = [&](std::size_t s) { return std::span<const std::size_t>(order).subspan(s * B, B); };

  // Next batch is augmented in the background while the current step runs.
  const std::size_t workers = cfg.data.workers;
  std::future<std::vector<ViewSet>> pending;
  auto launch = [&](std::size_t s) {
    return std::async(std::launch::async,
                      [&, s] { return make_batch(data, batch_indices(s), cfg.aug, seed, epoch, workers); });
  };
  if (workers > 0) pending = launch(0);

  std::vector<StepMetrics> metrics;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<ViewSet> batch;
    if (workers > 0) {
      batch = pending.get();
      if (s + 1 < steps) pending = launch(s + 1);
    } else {
      batch = make_batch(data, batch_indices(s), cfg.aug, seed, epoch, 0);
    }
    metrics.push_back(train_step(batch, state));
  }
  ++state.epoch;
  return metrics;
}

std::string checkpoint_bytes(const TrainState& state) {
  TrainState& s = const_cast<TrainState&>(state);
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.str(state.config.serialize());
  w.u64(state.step);
  w.u64(state.epoch);
  w.u64(state.config.seed.value_or(0));
  for (double v : state.norm.mean) w.f64(v);
  for (double v : state.norm.stddev) w.f64(v);
  w.u64(state.optimizer.steps());

  std::vector<std::pair<std::string, std::span<const double>>> entries;
  for (const auto& p : state.trainable()) entries.emplace_back(p.name, p.tensor.values());
  for (const auto& p : prefixed(state.teacher.parameters(), "teacher.")) entries.emplace_back(p.name, p.tensor.values());
  for (const auto& [name, vec] : state_vectors(s)) entries.emplace_back(name, *vec);
  for (const auto& [name, mom] : state.optimizer.moments()) {
    entries.emplace_back("adam.m." + name, mom.first);
    entries.emplace_back("adam.v." + name, mom.second);
  }
  w.u64(entries.size());
  for (const auto& [name, values] : entries) w.vec(name, values);
  const std::uint32_t crc = checksum(w.data().data(), w.data().size());
  w.u32(crc);
  return std::move(w.data());
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(state);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  const std::size_t header = sizeof kMagic + sizeof(std::uint32_t);
  if (buf.size() < header + sizeof(std::uint32_t) || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("checkpoint " + path.string() + ": not an mst checkpoint");
  }
  std::uint32_t version;
  std::memcpy(&version, buf.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path.string() + ": version " + std::to_string(version) +
                             " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = buf.size() - sizeof(std::uint32_t);
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof stored);
  if (checksum(buf.data(), body) != stored) {
    throw std::runtime_error("checkpoint " + path.string() + ": checksum mismatch (corrupt file)");
  }

  Reader r(buf, body);
  char magic[8];
  r.bytes(magic, sizeof magic);
  r.u32();
  RunConfig cfg = RunConfig::parse(r.str());
  cfg.validate();
  const std::uint64_t step = r.u64();
  const std::uint64_t epoch = r.u64();
  const std::uint64_t seed = r.u64();
  Normalization norm;
  for (double& v : norm.mean) v = r.f64();
  for (double& v : norm.stddev) v = r.f64();
  const std::uint64_t adam_steps = r.u64();
  if (cfg.seed.value() != seed) throw std::runtime_error("checkpoint: seed disagrees with embedded config");

  std::map<std::string, std::vector<double>> entries;
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    entries[name] = r.vec();
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");

  TrainState s = TrainState::initialize(cfg, norm);
  s.step = step;
  s.epoch = epoch;
  s.optimizer.set_steps(adam_steps);
  auto take = [&](const std::string& name, std::span<double> dst) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    if (it->second.size() != dst.size()) {
      throw std::runtime_error("checkpoint: tensor " + name + " has " + std::to_string(it->second.size()) +
                               " values, model expects " + std::to_string(dst.size()));
    }
    std::copy(it->second.begin(), it->second.end(), dst.begin());
    entries.erase(it);
  };
  for (const auto& p : s.trainable()) {
    Tensor t = p.tensor;
    take(p.name, t.values());
  }
  for (const auto& p : prefixed(s.teacher.parameters(), "teacher.")) {
    Tensor t = p.tensor;
    take(p.name, t.values());
  }
  for (const auto& [name, vec] : state_vectors(s)) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint: missing buffer " + name);
    *vec = std::move(it->second);
    entries.erase(it);
  }
  for (const auto& p : s.trainable()) {
    auto m = entries.find("adam.m." + p.name);
    auto v = entries.find("adam.v." + p.name);
    if (m == entries.end() || v == entries.end()) continue;
    auto& mom = s.optimizer.moments()[p.name];
    mom.first = std::move(m->second);
    mom.second = std::move(v->second);
    entries.erase(m);
    entries.erase(v);
  }
  if (!entries.empty()) throw std::runtime_error("checkpoint: unexpected tensor " + entries.begin()->first);
  return s;
}

Dataset load_training_data(const RunConfig& cfg) {
  if (cfg.data.source == "folder") return load_dataset(cfg.data.path, cfg.data.layout);
  return generate_synthetic(SyntheticSpec::parse(cfg.data.classes, cfg.data.image_size), cfg.data.train_count,
                            cfg.data.synth_seed);
}

Dataset synthetic_test_data(const RunConfig& cfg) {
  Rng rng = make_rng(cfg.data.synth_seed, {stream::synthetic, 1});
  return generate_synthetic(SyntheticSpec::parse(cfg.data.classes, cfg.data.image_size), cfg.data.test_count, rng());
}

std::string checkpoint_name(std::uint64_t epoch) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "checkpoint_e%04llu.bin", static_cast<unsigned long long>(epoch));
  return buf;
}

PretrainResult pretrain(RunConfig cfg, const PretrainOptions& opts) {
  PretrainResult result;
  TrainState state;
  Dataset data;
  if (opts.resume) {
    state = load_checkpoint(*opts.resume);
    state.config.output_dir = cfg.output_dir;
    data = load_training_data(state.config);
  } else {
    cfg.validate();
    data = load_training_data(cfg);
    configure_steps(cfg, data.size());
    state = TrainState::initialize(cfg, compute_normalization(data));
  }
  configure_steps(state.config, data.size());
  const RunConfig& run = state.config;

  result.output_dir = resolve_output_dir(run);
  std::filesystem::create_directories(result.output_dir);
  run.save(result.output_dir / "config.cfg");

  // Metrics rows past the resume point are discarded so the file matches an
  // unbroken run.
  const std::filesystem::path metrics_path = result.output_dir / "metrics.csv";
  std::vector<std::string> kept;
  if (opts.resume && std::filesystem::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) < state.step) kept.push_back(line);
    }
  }
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
  metrics << kMetricsHeader << "\n";
  for (const auto& line : kept) metrics << line << "\n";
  metrics.flush();

  while (state.epoch < run.epochs) {
    const auto steps = train_epoch(data, state);
    double sum = 0.0;
    for (const auto& m : steps) {
      metrics << format_metrics(m) << "\n";
      sum += m.total;
      if (opts.on_step) opts.on_step(m);
    }
    metrics.flush();
    const double mean = sum / static_cast<double>(steps.size());
    result.epoch_mean_total.push_back(mean);
    if (opts.on_epoch) opts.on_epoch(state.epoch, mean);
    if (state.epoch % run.checkpoint_every == 0 || state.epoch == run.epochs) {
      result.final_checkpoint = result.output_dir / checkpoint_name(state.epoch);
      save_checkpoint(state, result.final_checkpoint);
      if (run.dump_reconstructions && run.loss.lambda2 > 0.0) {
        NoGradGuard guard;
        const std::size_t idx = 0;
        Rng rng = augmentation_rng(run.seed.value(), state.epoch, idx);
        ViewSet vs = multi_crop(data.samples[idx], run.aug, rng, idx);
        const TokenSequence seq = state.student.patch_embed(normalize(vs.global_views[0].sample.image, state.norm));
        EncodeOptions eo;
        eo.compute_head = false;
        EncoderOutput out = state.student.encode(std::span<const TokenSequence>(&seq, 1), eo);
        Tensor recon = state.decoder.reconstruct(out.patch_tokens, 1, out.rows, out.cols, false,
                                                 ops::NormStats::running);
        Image img = tensor_to_image(recon, 0);
        for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
        char name[40];
        std::snprintf(name, sizeof name, "recon_e%04llu.png", static_cast<unsigned long long>(state.epoch));
        write_png(result.output_dir / name, img);
      }
    }
  }
  if (result.final_checkpoint.empty()) {
    result.final_checkpoint = result.output_dir / checkpoint_name(state.epoch);
    save_checkpoint(state, result.final_checkpoint);
  }
  return result;
}

}  // namespace mst
