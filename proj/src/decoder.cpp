// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/decoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mst/rng.hpp"

namespace mst {

std::vector<std::size_t> DecoderConfig::resolved_channels() const {
  if (!channels.empty()) return channels;
  std::vector<std::size_t> out;
  std::size_t c = in_dim;
  for (std::size_t s = 0; s < stages; ++s) {
    c = std::max<std::size_t>(c / 2, 1);
    out.push_back(c);
  }
  return out;
}

void DecoderConfig::validate() const {
  if (stages < 1) throw std::invalid_argument("decoder: stages must be >= 1");
  if (in_dim == 0) throw std::invalid_argument("decoder: in_dim must be positive");
  if (!channels.empty() && channels.size() != stages) {
    throw std::invalid_argument("decoder: channels must list one width per stage");
  }
}

Decoder::Decoder(const DecoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(seed, {stream::init, 0xdec0de});
  auto randn = [&](Shape shape, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = stddev * normal(rng);
    return Tensor::parameter(std::move(shape), std::move(v));
  };
  auto filled = [](Shape shape, double value) {
    return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), value));
  };
  std::size_t in = cfg_.in_dim;
  for (std::size_t outc : cfg_.resolved_channels()) {
    DecoderStage s;
    s.conv_weight = randn({outc, in, 3, 3}, std::sqrt(2.0 / static_cast<double>(in * 9)));
    s.conv_bias = filled({outc}, 0.0);
    s.bn_gamma = filled({outc}, 1.0);
    s.bn_beta = filled({outc}, 0.0);
    s.bn = ops::BatchNormBuffers(outc);
    stages_.push_back(std::move(s));
    in = outc;
  }
  out_weight_ = randn({3, in, 1, 1}, std::sqrt(1.0 / static_cast<double>(in)));
  out_bias_ = filled({3}, 0.0);
}

std::vector<NamedTensor> Decoder::parameters() const {
  std::vector<NamedTensor> p;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string pre = "decoder.stage" + std::to_string(i) + ".";
    p.push_back({pre + "conv.weight", stages_[i].conv_weight, true});
    p.push_back({pre + "conv.bias", stages_[i].conv_bias, false});
    p.push_back({pre + "bn.gamma", stages_[i].bn_gamma, false});
    p.push_back({pre + "bn.beta", stages_[i].bn_beta, false});
  }
  p.push_back({"decoder.out.weight", out_weight_, true});
  p.push_back({"decoder.out.bias", out_bias_, false});
  return p;
}

std::vector<NamedBuffer> Decoder::buffers() {
  std::vector<NamedBuffer> b;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    b.push_back({"decoder.stage" + std::to_string(i) + ".bn", &stages_[i].bn});
  }
  return b;
}

Tensor Decoder::reconstruct(const Tensor& patch_tokens, std::size_t batch, std::size_t rows, std::size_t cols,
                            bool update_bn_stats, ops::NormStats stats) {
  if (patch_tokens.rank() != 2 || patch_tokens.dim(0) != batch * rows * cols) {
    throw std::invalid_argument("decoder: token count does not match the " + std::to_string(rows) + "x" +
                                std::to_string(cols) + " grid");
  }
  if (patch_tokens.dim(1) != cfg_.in_dim) throw std::invalid_argument("decoder: token width != in_dim");
  Tensor x = ops::tokens_to_map(patch_tokens, batch, rows, cols);
  for (auto& s : stages_) {
    x = ops::conv2d(x, s.conv_weight, s.conv_bias, 1);
    x = ops::batch_norm(x, s.bn_gamma, s.bn_beta, s.bn, stats, update_bn_stats);
    x = ops::relu(x);
    x = ops::upsample_nearest2x(x);
  }
  return ops::conv2d(x, out_weight_, out_bias_, 0);
}

Image tensor_to_image(const Tensor& batch, std::size_t b) {
  if (batch.rank() != 4 || b >= batch.dim(0)) throw std::invalid_argument("tensor_to_image: bad index");
  Image img(batch.dim(1), batch.dim(2), batch.dim(3));
  const std::size_t sz = img.pixels.size();
  const auto v = batch.values();
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(b * sz), v.begin() + static_cast<std::ptrdiff_t>((b + 1) * sz),
            img.pixels.begin());
  return img;
}

}  // namespace mst
