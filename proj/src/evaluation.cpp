// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mst/rng.hpp"

namespace mst {

void normalize_rows(FeatureMatrix& f) {
  for (std::size_t i = 0; i < f.rows; ++i) {
    double* r = f.features.data() + i * f.dim;
    double sq = 0.0;
    for (std::size_t j = 0; j < f.dim; ++j) sq += r[j] * r[j];
    if (sq <= 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t j = 0; j < f.dim; ++j) r[j] *= inv;
  }
}

FeatureMatrix extract_features(const Dataset& dataset, Encoder& encoder, const Normalization& norm,
                               std::size_t image_size, bool concat_blocks) {
  if (dataset.size() == 0) throw std::invalid_argument("extract_features: empty dataset");
  if (!dataset.labeled()) throw std::invalid_argument("extract_features: dataset is unlabeled");
  NoGradGuard guard;
  FeatureMatrix f;
  f.rows = dataset.size();
  const std::size_t depth = encoder.config().depth;
  const std::size_t blocks = concat_blocks ? std::min<std::size_t>(4, depth) : 1;
  f.dim = encoder.config().embed_dim * blocks;
  f.features.reserve(f.rows * f.dim);
  constexpr std::size_t chunk = 64;
  EncodeOptions opts;
  opts.compute_head = false;
  opts.keep_block_features = concat_blocks;
  for (std::size_t start = 0; start < f.rows; start += chunk) {
    const std::size_t end = std::min(f.rows, start + chunk);
    std::vector<TokenSequence> seqs;
    for (std::size_t i = start; i < end; ++i) {
      const Image& src = dataset.samples[i].image;
      const Image sized = resize_bilinear(src, image_size, image_size);
      seqs.push_back(encoder.patch_embed(normalize(sized, norm)));
      f.labels.push_back(*dataset.samples[i].label);
    }
    EncoderOutput out = encoder.encode(seqs, opts);
    const std::size_t d = encoder.config().embed_dim;
    for (std::size_t b = 0; b < end - start; ++b) {
      if (concat_blocks) {
        for (std::size_t l = depth - blocks; l < depth; ++l) {
          const auto v = out.block_features[l].values().subspan(b * d, d);
          f.features.insert(f.features.end(), v.begin(), v.end());
        }
      } else {
        const auto v = out.cls_features.values().subspan(b * d, d);
        f.features.insert(f.features.end(), v.begin(), v.end());
      }
    }
  }
  normalize_rows(f);
  return f;
}

FeatureMatrix extract_features(const Dataset& dataset, TrainState& state, Branch branch, bool concat_blocks) {
  Encoder& enc = branch == Branch::teacher ? state.teacher : state.student;
  FeatureMatrix f = extract_features(dataset, enc, state.norm, state.config.aug.global_size, concat_blocks);
  f.source = branch == Branch::teacher ? "teacher" : "student";
  return f;
}

int knn_classify(const FeatureMatrix& train, std::span<const double> query, std::size_t k, double temp) {
  if (train.rows == 0) throw std::invalid_argument("knn_classify: empty train set");
  if (query.size() != train.dim) throw std::invalid_argument("knn_classify: query width mismatch");
  if (k == 0) throw std::invalid_argument("knn_classify: k must be >= 1");
  if (!(temp > 0.0)) throw std::invalid_argument("knn_classify: temp must be > 0");
  k = std::min(k, train.rows);
  std::vector<double> sim(train.rows);
  for (std::size_t i = 0; i < train.rows; ++i) {
    const auto r = train.row(i);
    sim[i] = std::inner_product(r.begin(), r.end(), query.begin(), 0.0);
  }
  std::vector<std::size_t> idx(train.rows);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); });
  int max_label = 0;
  for (std::size_t i = 0; i < k; ++i) max_label = std::max(max_label, train.labels[idx[i]]);
  std::vector<double> votes(static_cast<std::size_t>(max_label) + 1, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    votes[static_cast<std::size_t>(train.labels[idx[i]])] += std::exp(sim[idx[i]] / temp);
  }
  int best = 0;
  for (std::size_t c = 1; c < votes.size(); ++c) {
    if (votes[c] > votes[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  }
  return best;
}

double knn_evaluate(const FeatureMatrix& train, const FeatureMatrix& test, std::size_t k, double temp) {
  if (test.rows == 0) throw std::invalid_argument("knn_evaluate: empty test set");
  if (train.dim != test.dim) throw std::invalid_argument("knn_evaluate: feature width mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.rows; ++i) {
    if (knn_classify(train, test.row(i), k, temp) == test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.rows);
}

double linear_probe(const FeatureMatrix& train, const FeatureMatrix& test, const ProbeConfig& cfg) {
  if (train.rows == 0 || test.rows == 0) throw std::invalid_argument("linear_probe: empty feature set");
  if (train.dim != test.dim) throw std::invalid_argument("linear_probe: feature width mismatch");
  if (cfg.batch_size == 0) throw std::invalid_argument("linear_probe: batch_size must be >= 1");
  const auto [lo, hi] = std::minmax_element(train.labels.begin(), train.labels.end());
  if (*lo < 0) throw std::invalid_argument("linear_probe: negative label");
  if (*lo == *hi) throw std::invalid_argument("linear_probe: train set holds a single class");
  int max_label = *hi;
  for (int l : test.labels) max_label = std::max(max_label, l);
  const std::size_t C = static_cast<std::size_t>(max_label) + 1;
  const std::size_t D = train.dim;

  std::vector<double> W(D * C, 0.0), b(C, 0.0), gW(D * C), gb(C), logits(C);
  auto forward = [&](std::span<const double> x) {
    for (std::size_t c = 0; c < C; ++c) logits[c] = b[c];
    for (std::size_t j = 0; j < D; ++j) {
      const double xj = x[j];
      const double* w = &W[j * C];
      for (std::size_t c = 0; c < C; ++c) logits[c] += xj * w[c];
    }
  };

  std::vector<std::size_t> order(train.rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, {stream::probe, epoch});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_index(rng, i))]);
    }
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::fill(gW.begin(), gW.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t s = start; s < end; ++s) {
        const auto x = train.row(order[s]);
        forward(x);
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (auto& l : logits) l /= z;
        logits[static_cast<std::size_t>(train.labels[order[s]])] -= 1.0;
        for (std::size_t j = 0; j < D; ++j) {
          for (std::size_t c = 0; c < C; ++c) gW[j * C + c] += x[j] * logits[c];
        }
        for (std::size_t c = 0; c < C; ++c) gb[c] += logits[c];
      }
      const double step = cfg.lr / static_cast<double>(end - start);
      for (std::size_t i = 0; i < W.size(); ++i) W[i] -= step * gW[i];
      for (std::size_t c = 0; c < C; ++c) b[c] -= step * gb[c];
    }
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.rows; ++i) {
    forward(test.row(i));
    const auto pred = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (pred == test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.rows);
}

AttentionExport attention_heatmap(const Image& image, Encoder& encoder, const Normalization& norm) {
  NoGradGuard guard;
  const TokenSequence seq = encoder.patch_embed(normalize(image, norm));
  EncodeOptions opts;
  opts.compute_head = false;
  EncoderOutput out = encoder.encode(std::span<const TokenSequence>(&seq, 1), opts);
  AttentionExport ex;
  ex.rows = out.rows;
  ex.cols = out.cols;
  ex.values = out.attention[0];
  ex.height = image.height;
  ex.width = image.width;
  const auto [mn, mx] = std::minmax_element(ex.values.begin(), ex.values.end());
  const double lo = *mn, range = *mx - *mn;
  const std::size_t p = encoder.config().patch_size;
  ex.heatmap.resize(ex.height * ex.width);
  for (std::size_t y = 0; y < ex.height; ++y) {
    for (std::size_t x = 0; x < ex.width; ++x) {
      const double v = ex.values[(y / p) * ex.cols + x / p];
      const double t = range > 0.0 ? (v - lo) / range : 0.0;
      ex.heatmap[y * ex.width + x] = static_cast<std::uint8_t>(std::lround(255.0 * t));
    }
  }
  return ex;
}

AttentionExport export_attention(const Image& image, TrainState& state, Branch branch,
                                 const std::filesystem::path& out) {
  Encoder& enc = branch == Branch::teacher ? state.teacher : state.student;
  AttentionExport ex = attention_heatmap(image, enc, state.norm);
  std::filesystem::path base = out;
  if (base.extension() == ".png" || base.extension() == ".csv") base.replace_extension();
  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  write_png_gray(base.string() + ".png", ex.height, ex.width, ex.heatmap);
  std::ofstream csv(base.string() + ".csv");
  if (!csv) throw std::runtime_error("cannot write " + base.string() + ".csv");
  char buf[40];
  for (std::size_t r = 0; r < ex.rows; ++r) {
    for (std::size_t c = 0; c < ex.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", ex.values[r * ex.cols + c]);
      csv << (c ? "," : "") << buf;
    }
    csv << "\n";
  }
  if (!csv) throw std::runtime_error("short write to " + base.string() + ".csv");
  return ex;
}

void append_result(const std::filesystem::path& csv, const std::string& checkpoint, const std::string& mode,
                   std::size_t k, double top1) {
  const bool fresh = !std::filesystem::exists(csv);
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  std::ofstream out(csv, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + csv.string());
  if (fresh) out << "checkpoint,mode,k,top1\n";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", top1);
  out << checkpoint << "," << mode << "," << k << "," << buf << "\n";
}

}  // namespace mst
