// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mst/rng.hpp"

namespace mst {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("encoder: " + what); };
  if (patch_size == 0) fail("patch_size must be positive");
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (depth < 1) fail("depth must be >= 1");
  if (out_dim < 2) fail("out_dim must be >= 2");
  if (mlp_hidden == 0 || head_hidden == 0) fail("hidden widths must be positive");
  if (image_size == 0 || image_size % patch_size != 0) fail("image_size must be a multiple of patch_size");
}

AttentionMap class_attention(std::span<const double> qkv, std::size_t tokens, std::size_t dim,
                             std::size_t heads) {
  if (tokens < 2) throw std::invalid_argument("class_attention: need at least one patch token");
  const std::size_t width = 3 * dim, dh = dim / heads, n = tokens - 1;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionMap avg(n, 0.0);
  std::vector<double> logits(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* q = qkv.data() + h * dh;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      const double* k = qkv.data() + (j + 1) * width + dim + h * dh;
      double dot = 0.0;
      for (std::size_t c = 0; c < dh; ++c) dot += q[c] * k[c];
      logits[j] = dot * s;
      mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (auto& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    for (std::size_t j = 0; j < n; ++j) avg[j] += logits[j] / z;
  }
  for (auto& a : avg) a /= static_cast<double>(heads);
  return avg;
}

std::vector<double> bicubic_grid_matrix(std::size_t out, std::size_t in) {
  constexpr double A = -0.75;
  auto cubic = [](double x) {
    x = std::abs(x);
    if (x <= 1.0) return ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    return 0.0;
  };
  std::vector<double> r(out * in, 0.0);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    const double base = std::floor(src);
    const double t = src - base;
    for (int k = -1; k <= 2; ++k) {
      const double w = cubic(static_cast<double>(k) - t);
      const long idx = std::clamp(static_cast<long>(base) + k, 0L, static_cast<long>(in) - 1);
      r[i * in + static_cast<std::size_t>(idx)] += w;
    }
  }
  std::vector<double> m(out * out * in * in, 0.0);
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t k = 0; k < in; ++k)
        for (std::size_t l = 0; l < in; ++l)
          m[(i * out + j) * (in * in) + k * in + l] = r[i * in + k] * r[j * in + l];
  return m;
}

namespace {

Tensor randn(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * normal(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor filled(Shape shape, double value) {
  return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), value));
}

Tensor copy_param(const Tensor& t, bool trainable) {
  Tensor c = t.detach();
  c.set_requires_grad(trainable);
  return c;
}

void check_finite(const Tensor& t, std::size_t layer) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw std::domain_error("encoder: non-finite activation after layer " + std::to_string(layer));
    }
  }
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(seed, {stream::init});
  const std::size_t d = cfg_.embed_dim;
  const std::size_t patch_dim = 3 * cfg_.patch_size * cfg_.patch_size;
  const std::size_t n = cfg_.grid() * cfg_.grid();
  constexpr double std_w = 0.02;
  patch_weight_ = randn(rng, {patch_dim, d}, std_w);
  patch_bias_ = filled({d}, 0.0);
  cls_token_ = randn(rng, {1, d}, std_w);
  pos_embed_ = randn(rng, {n + 1, d}, std_w);
  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    TransformerBlock b;
    b.ln1_gamma = filled({d}, 1.0);
    b.ln1_beta = filled({d}, 0.0);
    b.qkv_weight = randn(rng, {d, 3 * d}, std_w);
    b.qkv_bias = filled({3 * d}, 0.0);
    b.proj_weight = randn(rng, {d, d}, std_w);
    b.proj_bias = filled({d}, 0.0);
    b.ln2_gamma = filled({d}, 1.0);
    b.ln2_beta = filled({d}, 0.0);
    b.fc1_weight = randn(rng, {d, cfg_.mlp_hidden}, std_w);
    b.fc1_bias = filled({cfg_.mlp_hidden}, 0.0);
    b.fc2_weight = randn(rng, {cfg_.mlp_hidden, d}, std_w);
    b.fc2_bias = filled({d}, 0.0);
    blocks_.push_back(std::move(b));
  }
  norm_gamma_ = filled({d}, 1.0);
  norm_beta_ = filled({d}, 0.0);

  const std::size_t hh = cfg_.head_hidden;
  head_.fc1_weight = randn(rng, {d, hh}, 1.0 / std::sqrt(static_cast<double>(d)));
  head_.fc1_bias = filled({hh}, 0.0);
  head_.bn1_gamma = filled({hh}, 1.0);
  head_.bn1_beta = filled({hh}, 0.0);
  head_.fc2_weight = randn(rng, {hh, hh}, 1.0 / std::sqrt(static_cast<double>(hh)));
  head_.fc2_bias = filled({hh}, 0.0);
  head_.bn2_gamma = filled({hh}, 1.0);
  head_.bn2_beta = filled({hh}, 0.0);
  head_.fc3_weight = randn(rng, {hh, cfg_.out_dim}, std_w);
  head_.fc3_bias = filled({cfg_.out_dim}, 0.0);
  head_.bn1 = ops::BatchNormBuffers(hh);
  head_.bn2 = ops::BatchNormBuffers(hh);
}

Encoder Encoder::clone(bool trainable) const {
  Encoder e;
  e.cfg_ = cfg_;
  e.patch_weight_ = copy_param(patch_weight_, trainable);
  e.patch_bias_ = copy_param(patch_bias_, trainable);
  e.cls_token_ = copy_param(cls_token_, trainable);
  e.pos_embed_ = copy_param(pos_embed_, trainable);
  for (const auto& b : blocks_) {
    TransformerBlock c;
    c.ln1_gamma = copy_param(b.ln1_gamma, trainable);
    c.ln1_beta = copy_param(b.ln1_beta, trainable);
    c.qkv_weight = copy_param(b.qkv_weight, trainable);
    c.qkv_bias = copy_param(b.qkv_bias, trainable);
    c.proj_weight = copy_param(b.proj_weight, trainable);
    c.proj_bias = copy_param(b.proj_bias, trainable);
    c.ln2_gamma = copy_param(b.ln2_gamma, trainable);
    c.ln2_beta = copy_param(b.ln2_beta, trainable);
    c.fc1_weight = copy_param(b.fc1_weight, trainable);
    c.fc1_bias = copy_param(b.fc1_bias, trainable);
    c.fc2_weight = copy_param(b.fc2_weight, trainable);
    c.fc2_bias = copy_param(b.fc2_bias, trainable);
    e.blocks_.push_back(std::move(c));
  }
  e.norm_gamma_ = copy_param(norm_gamma_, trainable);
  e.norm_beta_ = copy_param(norm_beta_, trainable);
  const ProjectionHead& h = head_;
  e.head_.fc1_weight = copy_param(h.fc1_weight, trainable);
  e.head_.fc1_bias = copy_param(h.fc1_bias, trainable);
  e.head_.bn1_gamma = copy_param(h.bn1_gamma, trainable);
  e.head_.bn1_beta = copy_param(h.bn1_beta, trainable);
  e.head_.fc2_weight = copy_param(h.fc2_weight, trainable);
  e.head_.fc2_bias = copy_param(h.fc2_bias, trainable);
  e.head_.bn2_gamma = copy_param(h.bn2_gamma, trainable);
  e.head_.bn2_beta = copy_param(h.bn2_beta, trainable);
  e.head_.fc3_weight = copy_param(h.fc3_weight, trainable);
  e.head_.fc3_bias = copy_param(h.fc3_bias, trainable);
  e.head_.bn1 = h.bn1;
  e.head_.bn2 = h.bn2;
  return e;
}

std::vector<NamedTensor> Encoder::parameters() const {
  std::vector<NamedTensor> p;
  p.push_back({"patch.weight", patch_weight_, true});
  p.push_back({"patch.bias", patch_bias_, false});
  p.push_back({"cls_token", cls_token_, true});
  p.push_back({"pos_embed", pos_embed_, true});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    p.push_back({pre + "ln1.gamma", b.ln1_gamma, false});
    p.push_back({pre + "ln1.beta", b.ln1_beta, false});
    p.push_back({pre + "attn.qkv.weight", b.qkv_weight, true});
    p.push_back({pre + "attn.qkv.bias", b.qkv_bias, false});
    p.push_back({pre + "attn.proj.weight", b.proj_weight, true});
    p.push_back({pre + "attn.proj.bias", b.proj_bias, false});
    p.push_back({pre + "ln2.gamma", b.ln2_gamma, false});
    p.push_back({pre + "ln2.beta", b.ln2_beta, false});
    p.push_back({pre + "mlp.fc1.weight", b.fc1_weight, true});
    p.push_back({pre + "mlp.fc1.bias", b.fc1_bias, false});
    p.push_back({pre + "mlp.fc2.weight", b.fc2_weight, true});
    p.push_back({pre + "mlp.fc2.bias", b.fc2_bias, false});
  }
  p.push_back({"norm.gamma", norm_gamma_, false});
  p.push_back({"norm.beta", norm_beta_, false});
  p.push_back({"head.fc1.weight", head_.fc1_weight, true});
  p.push_back({"head.fc1.bias", head_.fc1_bias, false});
  p.push_back({"head.bn1.gamma", head_.bn1_gamma, false});
  p.push_back({"head.bn1.beta", head_.bn1_beta, false});
  p.push_back({"head.fc2.weight", head_.fc2_weight, true});
  p.push_back({"head.fc2.bias", head_.fc2_bias, false});
  p.push_back({"head.bn2.gamma", head_.bn2_gamma, false});
  p.push_back({"head.bn2.beta", head_.bn2_beta, false});
  p.push_back({"head.fc3.weight", head_.fc3_weight, true});
  p.push_back({"head.fc3.bias", head_.fc3_bias, false});
  return p;
}

std::vector<NamedBuffer> Encoder::buffers() {
  return {{"head.bn1", &head_.bn1}, {"head.bn2", &head_.bn2}};
}

Tensor Encoder::positions_for(std::size_t rows) const {
  const std::size_t grid = cfg_.grid();
  const std::size_t cls_row = 0;
  std::vector<std::size_t> patch_rows(grid * grid);
  for (std::size_t i = 0; i < patch_rows.size(); ++i) patch_rows[i] = i + 1;
  Tensor cls_pos = ops::select_rows(pos_embed_, std::span<const std::size_t>(&cls_row, 1));
  Tensor patch_pos = ops::select_rows(pos_embed_, patch_rows);
  if (rows != grid) {
    auto it = interp_cache_.find(rows);
    if (it == interp_cache_.end()) {
      it = interp_cache_.emplace(rows, Tensor({rows * rows, grid * grid}, bicubic_grid_matrix(rows, grid))).first;
    }
    patch_pos = ops::matmul(it->second, patch_pos);
  }
  const Tensor parts[] = {cls_pos, patch_pos};
  return ops::concat_rows(parts);
}

TokenSequence Encoder::patch_embed(const Image& image) const {
  const std::size_t p = cfg_.patch_size;
  if (image.channels != 3) throw std::invalid_argument("patch_embed: expected 3 channels");
  if (image.height == 0 || image.height % p != 0 || image.width % p != 0) {
    throw std::invalid_argument("patch_embed: image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " not divisible by patch " + std::to_string(p));
  }
  if (image.height != image.width) throw std::invalid_argument("patch_embed: square views only");
  const std::size_t rows = image.height / p, cols = image.width / p;
  const std::size_t patch_dim = 3 * p * p;
  std::vector<double> patches(rows * cols * patch_dim);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double* dst = &patches[(r * cols + c) * patch_dim];
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) *dst++ = image.at(ch, r * p + y, c * p + x);
    }
  Tensor proj = ops::linear(Tensor({rows * cols, patch_dim}, std::move(patches)), patch_weight_, patch_bias_);
  const Tensor parts[] = {cls_token_, proj};
  Tensor stacked = ops::concat_rows(parts);
  Tensor pos = positions_for(rows);
  TokenSequence seq;
  seq.tokens = ops::add(stacked, pos);
  seq.positions = pos;
  seq.rows = rows;
  seq.cols = cols;
  return seq;
}

Tensor Encoder::head_project(const Tensor& cls, bool update_bn_stats, ops::NormStats stats) {
  const ProjectionHead& h = head_;
  Tensor x = ops::linear(cls, h.fc1_weight, h.fc1_bias);
  if (cfg_.head_bn) x = ops::batch_norm(x, h.bn1_gamma, h.bn1_beta, head_.bn1, stats, update_bn_stats);
  x = ops::gelu(x);
  x = ops::linear(x, h.fc2_weight, h.fc2_bias);
  if (cfg_.head_bn) x = ops::batch_norm(x, h.bn2_gamma, h.bn2_beta, head_.bn2, stats, update_bn_stats);
  x = ops::gelu(x);
  return ops::linear(x, h.fc3_weight, h.fc3_bias);
}

EncoderOutput Encoder::encode(std::span<const TokenSequence> batch, const EncodeOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("encode: empty batch");
  const std::size_t rows = batch[0].rows, cols = batch[0].cols;
  const std::size_t n = rows * cols, T = n + 1, B = batch.size();
  const std::size_t d = cfg_.embed_dim;
  std::vector<Tensor> parts;
  parts.reserve(B);
  for (const auto& seq : batch) {
    if (seq.rows != rows || seq.cols != cols || seq.tokens.dim(0) != T || seq.tokens.dim(1) != d) {
      throw std::invalid_argument("encode: token sequences in one batch must share a grid");
    }
    parts.push_back(seq.tokens);
  }
  Tensor x = B == 1 ? parts[0] : ops::concat_rows(parts);

  EncoderOutput out;
  out.batch = B;
  out.patch_count = n;
  out.rows = rows;
  out.cols = cols;

  std::vector<std::size_t> cls_rows(B), patch_rows(B * n);
  for (std::size_t b = 0; b < B; ++b) {
    cls_rows[b] = b * T;
    for (std::size_t t = 0; t < n; ++t) patch_rows[b * n + t] = b * T + 1 + t;
  }

  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& blk = blocks_[l];
    Tensor h = ops::layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    Tensor qkv = ops::linear(h, blk.qkv_weight, blk.qkv_bias);
    const bool last = l + 1 == blocks_.size();
    if (last || opts.keep_layer_attention) {
      std::vector<AttentionMap> maps(B);
      const auto values = qkv.values();
      for (std::size_t b = 0; b < B; ++b) {
        maps[b] = class_attention(values.subspan(b * T * 3 * d, T * 3 * d), T, d, cfg_.heads);
      }
      if (opts.keep_layer_attention) out.layer_attention.push_back(maps);
      if (last) out.attention = std::move(maps);
    }
    Tensor attn = ops::self_attention(qkv, B, T, cfg_.heads);
    x = ops::add(x, ops::linear(attn, blk.proj_weight, blk.proj_bias));
    Tensor h2 = ops::layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    Tensor mlp = ops::linear(ops::gelu(ops::linear(h2, blk.fc1_weight, blk.fc1_bias)), blk.fc2_weight, blk.fc2_bias);
    x = ops::add(x, mlp);
    check_finite(x, l);
    if (opts.keep_block_features) {
      out.block_features.push_back(ops::layer_norm(ops::select_rows(x, cls_rows), norm_gamma_, norm_beta_));
    }
  }
  Tensor xn = ops::layer_norm(x, norm_gamma_, norm_beta_);
  out.cls_features = ops::select_rows(xn, cls_rows);
  out.patch_tokens = ops::select_rows(xn, patch_rows);
  if (opts.compute_head) {
    out.cls_logits = head_project(out.cls_features, opts.update_bn_stats, opts.head_stats);
  }
  return out;
}

}  // namespace mst
