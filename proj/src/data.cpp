// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace mst {

namespace fs = std::filesystem;

bool Dataset::labeled() const {
  return !samples.empty() &&
         std::all_of(samples.begin(), samples.end(),
                     [](const ImageSample& s) { return s.label.has_value(); });
}

namespace {

bool is_png(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

std::vector<fs::path> sorted_pngs(const fs::path& dir, bool recursive) {
  std::vector<fs::path> files;
  if (recursive) {
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file() && is_png(e.path())) files.push_back(e.path());
    }
  } else {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && is_png(e.path())) files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

Dataset load_dataset(const fs::path& root, DatasetLayout layout) {
  if (!fs::exists(root)) throw std::runtime_error("dataset path does not exist: " + root.string());
  if (!fs::is_directory(root)) throw std::runtime_error("dataset path is not a directory: " + root.string());
  Dataset ds;
  if (layout == DatasetLayout::class_folders) {
    std::vector<fs::path> classes;
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory()) classes.push_back(e.path());
    }
    std::sort(classes.begin(), classes.end());
    for (std::size_t label = 0; label < classes.size(); ++label) {
      ds.class_names.push_back(classes[label].filename().string());
      for (const auto& file : sorted_pngs(classes[label], false)) {
        ds.samples.push_back({read_png(file), static_cast<int>(label)});
        ds.sources.push_back(file.string());
      }
    }
  } else {
    for (const auto& file : sorted_pngs(root, true)) {
      ds.samples.push_back({read_png(file), std::nullopt});
      ds.sources.push_back(file.string());
    }
  }
  if (ds.samples.empty()) throw std::runtime_error("zero images under " + root.string());
  return ds;
}

void write_dataset(const Dataset& dataset, const fs::path& root) {
  if (!dataset.labeled()) throw std::invalid_argument("write_dataset: dataset is unlabeled");
  std::map<int, std::size_t> counter;
  for (const auto& s : dataset.samples) {
    const int label = *s.label;
    const std::string name = static_cast<std::size_t>(label) < dataset.class_names.size()
                                 ? dataset.class_names[static_cast<std::size_t>(label)]
                                 : "class" + std::to_string(label);
    const fs::path dir = root / name;
    fs::create_directories(dir);
    char file[32];
    std::snprintf(file, sizeof file, "%06zu.png", counter[label]++);
    write_png(dir / file, s.image);
  }
}

namespace {

const std::map<std::string, std::array<double, 3>>& color_table() {
  static const std::map<std::string, std::array<double, 3>> table{
      {"red", {0.9, 0.1, 0.1}},    {"green", {0.1, 0.8, 0.2}}, {"blue", {0.1, 0.2, 0.9}},
      {"yellow", {0.9, 0.9, 0.1}}, {"cyan", {0.1, 0.85, 0.85}}, {"magenta", {0.85, 0.1, 0.85}},
      {"white", {0.95, 0.95, 0.95}}, {"orange", {0.95, 0.55, 0.1}},
  };
  return table;
}

ShapeKind parse_shape(const std::string& s) {
  if (s == "square") return ShapeKind::square;
  if (s == "circle") return ShapeKind::circle;
  if (s == "triangle") return ShapeKind::triangle;
  if (s == "cross") return ShapeKind::cross;
  throw std::invalid_argument("unknown synthetic shape '" + s + "'");
}

bool inside(ShapeKind shape, double dx, double dy, double r) {
  switch (shape) {
    case ShapeKind::square:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::triangle:
      return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    case ShapeKind::cross:
      return (std::abs(dx) <= r / 3 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r / 3 && std::abs(dx) <= r);
  }
  return false;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

SyntheticSpec SyntheticSpec::parse(std::string_view classes, std::size_t image_size) {
  SyntheticSpec spec;
  spec.image_size = image_size;
  std::size_t start = 0;
  while (start <= classes.size()) {
    std::size_t end = classes.find(',', start);
    if (end == std::string_view::npos) end = classes.size();
    std::string item(classes.substr(start, end - start));
    item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }),
               item.end());
    if (!item.empty()) {
      const auto dash = item.find('-');
      if (dash == std::string::npos) {
        throw std::invalid_argument("synthetic class '" + item + "' is not <color>-<shape>");
      }
      const std::string color = item.substr(0, dash);
      const auto it = color_table().find(color);
      if (it == color_table().end()) throw std::invalid_argument("unknown synthetic color '" + color + "'");
      spec.classes.push_back({item, parse_shape(item.substr(dash + 1)), it->second});
    }
    start = end + 1;
  }
  return spec;
}

Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("generate_synthetic: count must be >= 1");
  if (spec.classes.size() < 2) throw std::invalid_argument("generate_synthetic: need >= 2 classes");
  if (spec.image_size < 8) throw std::invalid_argument("generate_synthetic: image_size must be >= 8");
  Dataset ds;
  for (const auto& c : spec.classes) ds.class_names.push_back(c.name);
  const double size = static_cast<double>(spec.image_size);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, {stream::synthetic, i});
    const std::size_t label = i % spec.classes.size();
    const auto& cls = spec.classes[label];
    std::array<double, 3> bg{};
    for (auto& b : bg) b = uniform(rng, 0.0, 0.3);
    std::array<double, 3> fg{};
    for (std::size_t c = 0; c < 3; ++c) fg[c] = cls.color[c] + uniform(rng, -0.1, 0.1);
    const double r = uniform(rng, 0.2, 0.35) * size;
    const double cy = uniform(rng, r, size - r);
    const double cx = uniform(rng, r, size - r);
    Image img(3, spec.image_size, spec.image_size);
    for (std::size_t y = 0; y < spec.image_size; ++y)
      for (std::size_t x = 0; x < spec.image_size; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const bool in = inside(cls.shape, dx, dy, r);
        for (std::size_t c = 0; c < 3; ++c) {
          const double noise = uniform(rng, -0.05, 0.05);
          img.at(c, y, x) = quantize((in ? fg[c] : bg[c]) + noise);
        }
      }
    ds.samples.push_back({std::move(img), static_cast<int>(label)});
  }
  return ds;
}

Normalization compute_normalization(const Dataset& dataset) {
  Normalization norm;
  std::array<double, 3> sum{}, sq{};
  double count = 0.0;
  for (const auto& s : dataset.samples) {
    const std::size_t plane = s.image.height * s.image.width;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = s.image.pixels[c * plane + i];
        sum[c] += v;
        sq[c] += v * v;
      }
    count += static_cast<double>(plane);
  }
  if (count == 0.0) return norm;
  for (std::size_t c = 0; c < 3; ++c) {
    norm.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - norm.mean[c] * norm.mean[c]);
    norm.stddev[c] = std::max(std::sqrt(var), 1e-6);
  }
  return norm;
}

void AugmentationConfig::validate(std::size_t patch_size) const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("augmentation: " + what); };
  auto check_range = [&](const Range& r, const char* name) {
    if (!(r.lo > 0.0 && r.lo <= r.hi && r.hi <= 1.0)) fail(std::string(name) + " must lie in (0,1] with lo <= hi");
  };
  auto check_p = [&](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) fail(std::string(name) + " must be a probability");
  };
  check_range(global_scale, "global_scale");
  check_range(local_scale, "local_scale");
  if (!(aspect_ratio.lo > 0.0 && aspect_ratio.lo <= aspect_ratio.hi)) fail("aspect_ratio");
  check_p(flip_p, "flip_p");
  check_p(jitter_p, "jitter_p");
  check_p(grayscale_p, "grayscale_p");
  check_p(blur_p_global[0], "blur_p_global1");
  check_p(blur_p_global[1], "blur_p_global2");
  check_p(blur_p_local, "blur_p_local");
  check_p(solarize_p_global[0], "solarize_p_global1");
  check_p(solarize_p_global[1], "solarize_p_global2");
  check_p(solarize_p_local, "solarize_p_local");
  if (brightness < 0 || contrast < 0 || saturation < 0 || hue < 0 || hue > 0.5) fail("jitter strengths");
  if (!(blur_sigma.lo > 0.0 && blur_sigma.lo <= blur_sigma.hi)) fail("blur_sigma");
  if (patch_size == 0) fail("patch_size must be positive");
  if (global_size == 0 || global_size % patch_size != 0) fail("global_size must be a multiple of the patch size");
  if (local_crops > 0) {
    if (local_size == 0 || local_size % patch_size != 0) fail("local_size must be a multiple of the patch size");
    if (local_size >= global_size) fail("local_size must be smaller than global_size");
  }
}

namespace {

struct CropBox {
  std::size_t top, left, height, width;
};

// Random-resized-crop window selection (10 attempts, then centered fallback).
CropBox sample_crop(std::size_t H, std::size_t W, const Range& scale, const Range& ratio, Rng& rng) {
  const double area = static_cast<double>(H * W);
  if (scale.lo * area < 1.0) {
    throw std::invalid_argument("multi_crop: source " + std::to_string(H) + "x" + std::to_string(W) +
                                " too small for minimum crop scale");
  }
  const double log_lo = std::log(ratio.lo), log_hi = std::log(ratio.hi);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, scale.lo, scale.hi);
    const double aspect = std::exp(uniform(rng, log_lo, log_hi));
    const auto w = static_cast<long>(std::lround(std::sqrt(target * aspect)));
    const auto h = static_cast<long>(std::lround(std::sqrt(target / aspect)));
    if (w > 0 && h > 0 && static_cast<std::size_t>(w) <= W && static_cast<std::size_t>(h) <= H) {
      const std::size_t top = uniform_index(rng, H - static_cast<std::size_t>(h) + 1);
      const std::size_t left = uniform_index(rng, W - static_cast<std::size_t>(w) + 1);
      return {top, left, static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
    }
  }
  const double in_ratio = static_cast<double>(W) / static_cast<double>(H);
  std::size_t w = W, h = H;
  if (in_ratio < ratio.lo) {
    h = static_cast<std::size_t>(std::lround(static_cast<double>(W) / ratio.lo));
  } else if (in_ratio > ratio.hi) {
    w = static_cast<std::size_t>(std::lround(static_cast<double>(H) * ratio.hi));
  }
  h = std::clamp<std::size_t>(h, 1, H);
  w = std::clamp<std::size_t>(w, 1, W);
  return {(H - h) / 2, (W - w) / 2, h, w};
}

void clamp01(Image& img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
}

std::vector<double> luminance(const Image& img) {
  const std::size_t plane = img.height * img.width;
  std::vector<double> gray(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    gray[i] = 0.299 * img.pixels[i] + 0.587 * img.pixels[plane + i] + 0.114 * img.pixels[2 * plane + i];
  }
  return gray;
}

void blend_with(Image& img, const std::vector<double>& other_plane, double factor) {
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      auto& v = img.pixels[c * plane + i];
      v = factor * v + (1.0 - factor) * other_plane[i];
    }
  clamp01(img);
}

void adjust_hue(Image& img, double shift) {
  const std::size_t plane = img.height * img.width;
  for (std::size_t i = 0; i < plane; ++i) {
    double r = img.pixels[i], g = img.pixels[plane + i], b = img.pixels[2 * plane + i];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double delta = mx - mn;
    double h = 0.0;
    if (delta > 0.0) {
      if (mx == r) h = std::fmod((g - b) / delta, 6.0);
      else if (mx == g) h = (b - r) / delta + 2.0;
      else h = (r - g) / delta + 4.0;
      h /= 6.0;
    }
    const double s = mx > 0.0 ? delta / mx : 0.0;
    const double v = mx;
    h = h + shift;
    h -= std::floor(h);
    const double hh = h * 6.0;
    const auto sector = static_cast<int>(std::floor(hh)) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
    switch (sector) {
      case 0: r = v; g = t; b = p; break;
      case 1: r = q; g = v; b = p; break;
      case 2: r = p; g = v; b = t; break;
      case 3: r = p; g = q; b = v; break;
      case 4: r = t; g = p; b = v; break;
      default: r = v; g = p; b = q; break;
    }
    img.pixels[i] = r;
    img.pixels[plane + i] = g;
    img.pixels[2 * plane + i] = b;
  }
  clamp01(img);
}

void color_jitter(Image& img, const AugmentationConfig& cfg, Rng& rng) {
  std::array<int, 4> order{0, 1, 2, 3};
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[uniform_index(rng, i + 1)]);
  }
  for (int op : order) {
    switch (op) {
      case 0: {
        const double f = uniform(rng, std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness);
        for (auto& v : img.pixels) v *= f;
        clamp01(img);
        break;
      }
      case 1: {
        const double f = uniform(rng, std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast);
        const auto gray = luminance(img);
        const double mean = std::accumulate(gray.begin(), gray.end(), 0.0) / static_cast<double>(gray.size());
        blend_with(img, std::vector<double>(gray.size(), mean), f);
        break;
      }
      case 2: {
        const double f = uniform(rng, std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation);
        blend_with(img, luminance(img), f);
        break;
      }
      default: {
        const double shift = uniform(rng, -cfg.hue, cfg.hue);
        adjust_hue(img, shift);
        break;
      }
    }
  }
}

void to_grayscale(Image& img) {
  const auto gray = luminance(img);
  const std::size_t plane = gray.size();
  for (std::size_t c = 0; c < 3; ++c) std::copy(gray.begin(), gray.end(), img.pixels.begin() + c * plane);
}

void gaussian_blur(Image& img, double sigma) {
  const auto radius = static_cast<long>(std::max(1.0, std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double z = 0.0;
  for (long i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    z += w;
  }
  for (auto& w : kernel) w /= z;
  const auto H = static_cast<long>(img.height), W = static_cast<long>(img.width);
  auto reflect = [](long i, long n) {
    if (n == 1) return 0L;
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
  };
  Image tmp = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double acc = 0.0;
        for (long k = -radius; k <= radius; ++k) {
          acc += kernel[static_cast<std::size_t>(k + radius)] *
                 img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(reflect(x + k, W)));
        }
        tmp.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = acc;
      }
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double acc = 0.0;
        for (long k = -radius; k <= radius; ++k) {
          acc += kernel[static_cast<std::size_t>(k + radius)] *
                 tmp.at(c, static_cast<std::size_t>(reflect(y + k, H)), static_cast<std::size_t>(x));
        }
        img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = acc;
      }
  }
  clamp01(img);
}

struct ViewPolicy {
  std::size_t size;
  Range scale;
  double blur_p;
  double solarize_p;
};

View make_view(const ImageSample& sample, const AugmentationConfig& cfg, const ViewPolicy& policy, Rng& rng) {
  View view;
  AugmentationRecord& rec = view.record;
  const Image& src = sample.image;
  const CropBox box = sample_crop(src.height, src.width, policy.scale, cfg.aspect_ratio, rng);
  rec.crop_top = box.top;
  rec.crop_left = box.left;
  rec.crop_height = box.height;
  rec.crop_width = box.width;
  Image img = resize_bilinear(crop(src, box.top, box.left, box.height, box.width), policy.size, policy.size);

  if (uniform01(rng) < cfg.flip_p) {
    rec.flipped = true;
    for (std::size_t c = 0; c < img.channels; ++c)
      for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width / 2; ++x) std::swap(img.at(c, y, x), img.at(c, y, img.width - 1 - x));
  }
  if (uniform01(rng) < cfg.jitter_p) {
    rec.jittered = true;
    color_jitter(img, cfg, rng);
  }
  if (uniform01(rng) < cfg.grayscale_p) {
    rec.grayscale = true;
    to_grayscale(img);
  }
  if (uniform01(rng) < policy.blur_p) {
    rec.blurred = true;
    const double scale = static_cast<double>(policy.size) / cfg.blur_reference_size;
    rec.blur_sigma = uniform(rng, cfg.blur_sigma.lo, cfg.blur_sigma.hi) * scale;
    gaussian_blur(img, rec.blur_sigma);
  }
  if (uniform01(rng) < policy.solarize_p) {
    rec.solarized = true;
    for (auto& v : img.pixels) {
      if (v >= cfg.solarize_threshold) v = 1.0 - v;
    }
  }
  clamp01(img);
  view.sample = {std::move(img), sample.label};
  return view;
}

}  // namespace

ViewSet multi_crop(const ImageSample& sample, const AugmentationConfig& cfg, Rng& rng, std::size_t source_id) {
  if (sample.image.channels != 3 || sample.image.height == 0 || sample.image.width == 0) {
    throw std::invalid_argument("multi_crop: expected a non-empty RGB image");
  }
  ViewSet set;
  set.source_id = source_id;
  for (std::size_t g = 0; g < 2; ++g) {
    set.global_views[g] =
        make_view(sample, cfg, {cfg.global_size, cfg.global_scale, cfg.blur_p_global[g], cfg.solarize_p_global[g]}, rng);
  }
  set.local_views.reserve(cfg.local_crops);
  for (std::size_t l = 0; l < cfg.local_crops; ++l) {
    set.local_views.push_back(
        make_view(sample, cfg, {cfg.local_size, cfg.local_scale, cfg.blur_p_local, cfg.solarize_p_local}, rng));
  }
  return set;
}

Rng augmentation_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample_index) {
  return make_rng(seed, {stream::augment, epoch, sample_index});
}

}  // namespace mst
