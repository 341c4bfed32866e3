// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace mst {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(out)) {
    throw ConfigError(key, "invalid number for '" + key + "': '" + s + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, std::string_view v) {
  std::uint64_t out = 0;
  const auto* first = v.data();
  const auto* last = v.data() + v.size();
  const auto res = std::from_chars(first, last, out);
  if (v.empty() || res.ec != std::errc{} || res.ptr != last) {
    throw ConfigError(key, "invalid non-negative integer for '" + key + "': '" + std::string(v) + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key, "invalid boolean for '" + key + "': '" + std::string(v) + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, std::string_view v) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  const std::string s = trim(v);
  while (start < s.size()) {
    auto end = s.find(',', start);
    if (end == std::string::npos) end = s.size();
    out.push_back(static_cast<std::size_t>(parse_uint(key, trim(std::string_view(s).substr(start, end - start)))));
    start = end + 1;
  }
  return out;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct Entry {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
using Accessor = std::function<T&(RunConfig&)>;

Entry double_entry(std::string key, std::function<double&(RunConfig&)> field) {
  return {key, [key, field](RunConfig& c, std::string_view v) { field(c) = parse_double(key, v); },
          [field](const RunConfig& c) { return fmt_double(field(const_cast<RunConfig&>(c))); }};
}

Entry size_entry(std::string key, std::function<std::size_t&(RunConfig&)> field) {
  return {key,
          [key, field](RunConfig& c, std::string_view v) { field(c) = static_cast<std::size_t>(parse_uint(key, v)); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

Entry u64_entry(std::string key, std::function<std::uint64_t&(RunConfig&)> field) {
  return {key, [key, field](RunConfig& c, std::string_view v) { field(c) = parse_uint(key, v); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

Entry bool_entry(std::string key, std::function<bool&(RunConfig&)> field) {
  return {key, [key, field](RunConfig& c, std::string_view v) { field(c) = parse_bool(key, v); },
          [field](const RunConfig& c) { return field(const_cast<RunConfig&>(c)) ? std::string("true") : "false"; }};
}

Entry string_entry(std::string key, std::function<std::string&(RunConfig&)> field) {
  return {key, [field](RunConfig& c, std::string_view v) { field(c) = std::string(v); },
          [field](const RunConfig& c) { return field(const_cast<RunConfig&>(c)); }};
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
    e.push_back({"seed",
                 [](RunConfig& c, std::string_view v) { c.seed = parse_uint("seed", v); },
                 [](const RunConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }});
    e.push_back(size_entry("epochs", [](RunConfig& c) -> std::size_t& { return c.epochs; }));
    e.push_back(size_entry("batch_size", [](RunConfig& c) -> std::size_t& { return c.optim.batch_size; }));
    e.push_back(size_entry("checkpoint_every", [](RunConfig& c) -> std::size_t& { return c.checkpoint_every; }));
    e.push_back(string_entry("output_dir", [](RunConfig& c) -> std::string& { return c.output_dir; }));
    e.push_back(bool_entry("dump_reconstructions", [](RunConfig& c) -> bool& { return c.dump_reconstructions; }));

    e.push_back(string_entry("data.source", [](RunConfig& c) -> std::string& { return c.data.source; }));
    e.push_back(string_entry("data.path", [](RunConfig& c) -> std::string& { return c.data.path; }));
    e.push_back({"data.layout",
                 [](RunConfig& c, std::string_view v) {
                   if (v == "class-folders") c.data.layout = DatasetLayout::class_folders;
                   else if (v == "flat") c.data.layout = DatasetLayout::flat;
                   else throw ConfigError("data.layout", "data.layout must be class-folders or flat");
                 },
                 [](const RunConfig& c) {
                   return c.data.layout == DatasetLayout::flat ? std::string("flat") : "class-folders";
                 }});
    e.push_back(string_entry("data.classes", [](RunConfig& c) -> std::string& { return c.data.classes; }));
    e.push_back(size_entry("data.train_count", [](RunConfig& c) -> std::size_t& { return c.data.train_count; }));
    e.push_back(size_entry("data.test_count", [](RunConfig& c) -> std::size_t& { return c.data.test_count; }));
    e.push_back(u64_entry("data.synth_seed", [](RunConfig& c) -> std::uint64_t& { return c.data.synth_seed; }));
    e.push_back(size_entry("data.image_size", [](RunConfig& c) -> std::size_t& { return c.data.image_size; }));
    e.push_back(size_entry("data.workers", [](RunConfig& c) -> std::size_t& { return c.data.workers; }));

    e.push_back(size_entry("aug.global_size", [](RunConfig& c) -> std::size_t& { return c.aug.global_size; }));
    e.push_back(size_entry("aug.local_size", [](RunConfig& c) -> std::size_t& { return c.aug.local_size; }));
    e.push_back(size_entry("aug.local_crops", [](RunConfig& c) -> std::size_t& { return c.aug.local_crops; }));
    e.push_back(double_entry("aug.global_scale_min", [](RunConfig& c) -> double& { return c.aug.global_scale.lo; }));
    e.push_back(double_entry("aug.global_scale_max", [](RunConfig& c) -> double& { return c.aug.global_scale.hi; }));
    e.push_back(double_entry("aug.local_scale_min", [](RunConfig& c) -> double& { return c.aug.local_scale.lo; }));
    e.push_back(double_entry("aug.local_scale_max", [](RunConfig& c) -> double& { return c.aug.local_scale.hi; }));
    e.push_back(double_entry("aug.ratio_min", [](RunConfig& c) -> double& { return c.aug.aspect_ratio.lo; }));
    e.push_back(double_entry("aug.ratio_max", [](RunConfig& c) -> double& { return c.aug.aspect_ratio.hi; }));
    e.push_back(double_entry("aug.flip_p", [](RunConfig& c) -> double& { return c.aug.flip_p; }));
    e.push_back(double_entry("aug.jitter_p", [](RunConfig& c) -> double& { return c.aug.jitter_p; }));
    e.push_back(double_entry("aug.brightness", [](RunConfig& c) -> double& { return c.aug.brightness; }));
    e.push_back(double_entry("aug.contrast", [](RunConfig& c) -> double& { return c.aug.contrast; }));
    e.push_back(double_entry("aug.saturation", [](RunConfig& c) -> double& { return c.aug.saturation; }));
    e.push_back(double_entry("aug.hue", [](RunConfig& c) -> double& { return c.aug.hue; }));
    e.push_back(double_entry("aug.grayscale_p", [](RunConfig& c) -> double& { return c.aug.grayscale_p; }));
    e.push_back(double_entry("aug.blur_p_global1", [](RunConfig& c) -> double& { return c.aug.blur_p_global[0]; }));
    e.push_back(double_entry("aug.blur_p_global2", [](RunConfig& c) -> double& { return c.aug.blur_p_global[1]; }));
    e.push_back(double_entry("aug.blur_p_local", [](RunConfig& c) -> double& { return c.aug.blur_p_local; }));
    e.push_back(double_entry("aug.solarize_p_global1",
                             [](RunConfig& c) -> double& { return c.aug.solarize_p_global[0]; }));
    e.push_back(double_entry("aug.solarize_p_global2",
                             [](RunConfig& c) -> double& { return c.aug.solarize_p_global[1]; }));
    e.push_back(double_entry("aug.solarize_p_local", [](RunConfig& c) -> double& { return c.aug.solarize_p_local; }));
    e.push_back(double_entry("aug.blur_sigma_min", [](RunConfig& c) -> double& { return c.aug.blur_sigma.lo; }));
    e.push_back(double_entry("aug.blur_sigma_max", [](RunConfig& c) -> double& { return c.aug.blur_sigma.hi; }));
    e.push_back(double_entry("aug.blur_reference_size",
                             [](RunConfig& c) -> double& { return c.aug.blur_reference_size; }));
    e.push_back(double_entry("aug.solarize_threshold",
                             [](RunConfig& c) -> double& { return c.aug.solarize_threshold; }));

    e.push_back(size_entry("model.patch_size", [](RunConfig& c) -> std::size_t& { return c.model.patch_size; }));
    e.push_back(size_entry("model.embed_dim", [](RunConfig& c) -> std::size_t& { return c.model.embed_dim; }));
    e.push_back(size_entry("model.depth", [](RunConfig& c) -> std::size_t& { return c.model.depth; }));
    e.push_back(size_entry("model.heads", [](RunConfig& c) -> std::size_t& { return c.model.heads; }));
    e.push_back(size_entry("model.mlp_hidden", [](RunConfig& c) -> std::size_t& { return c.model.mlp_hidden; }));
    e.push_back(size_entry("model.head_hidden", [](RunConfig& c) -> std::size_t& { return c.model.head_hidden; }));
    e.push_back(size_entry("model.out_dim", [](RunConfig& c) -> std::size_t& { return c.model.out_dim; }));
    e.push_back(bool_entry("model.head_bn", [](RunConfig& c) -> bool& { return c.model.head_bn; }));

    e.push_back(size_entry("decoder.stages", [](RunConfig& c) -> std::size_t& { return c.decoder_stages; }));
    e.push_back({"decoder.channels",
                 [](RunConfig& c, std::string_view v) { c.decoder_channels = parse_list("decoder.channels", v); },
                 [](const RunConfig& c) { return fmt_list(c.decoder_channels); }});

    e.push_back({"mask.strategy",
                 [](RunConfig& c, std::string_view v) {
                   try {
                     c.mask.strategy = parse_mask_strategy(v);
                   } catch (const std::invalid_argument& ex) {
                     throw ConfigError("mask.strategy", ex.what());
                   }
                 },
                 [](const RunConfig& c) { return to_string(c.mask.strategy); }});
    e.push_back(double_entry("mask.p", [](RunConfig& c) -> double& { return c.mask.p; }));
    e.push_back(size_entry("mask.num", [](RunConfig& c) -> std::size_t& { return c.mask.num; }));

    e.push_back(double_entry("loss.lambda1", [](RunConfig& c) -> double& { return c.loss.lambda1; }));
    e.push_back(double_entry("loss.lambda2", [](RunConfig& c) -> double& { return c.loss.lambda2; }));
    e.push_back(double_entry("loss.teacher_temp", [](RunConfig& c) -> double& { return c.loss.teacher_temp; }));
    e.push_back(double_entry("loss.student_temp", [](RunConfig& c) -> double& { return c.loss.student_temp; }));
    e.push_back(bool_entry("loss.centering", [](RunConfig& c) -> bool& { return c.loss.centering; }));
    e.push_back(double_entry("loss.center_momentum", [](RunConfig& c) -> double& { return c.loss.center_momentum; }));

    e.push_back(double_entry("optim.base_lr", [](RunConfig& c) -> double& { return c.optim.base_lr; }));
    e.push_back(size_entry("optim.warmup_epochs", [](RunConfig& c) -> std::size_t& { return c.optim.warmup_epochs; }));
    e.push_back(double_entry("optim.weight_decay", [](RunConfig& c) -> double& { return c.optim.weight_decay; }));
    e.push_back(double_entry("optim.momentum_base", [](RunConfig& c) -> double& { return c.optim.momentum_base; }));
    e.push_back(double_entry("optim.momentum_final", [](RunConfig& c) -> double& { return c.optim.momentum_final; }));
    e.push_back(double_entry("optim.clip_grad", [](RunConfig& c) -> double& { return c.optim.clip_grad; }));

    e.push_back(size_entry("eval.k", [](RunConfig& c) -> std::size_t& { return c.eval.k; }));
    e.push_back(double_entry("eval.temp", [](RunConfig& c) -> double& { return c.eval.temp; }));
    e.push_back({"eval.branch",
                 [](RunConfig& c, std::string_view v) {
                   if (v == "teacher") c.eval.branch = Branch::teacher;
                   else if (v == "student") c.eval.branch = Branch::student;
                   else throw ConfigError("eval.branch", "eval.branch must be teacher or student");
                 },
                 [](const RunConfig& c) {
                   return c.eval.branch == Branch::teacher ? std::string("teacher") : "student";
                 }});
    e.push_back(bool_entry("eval.concat_blocks", [](RunConfig& c) -> bool& { return c.eval.concat_blocks; }));
    e.push_back(double_entry("eval.probe_lr", [](RunConfig& c) -> double& { return c.eval.probe_lr; }));
    e.push_back(size_entry("eval.probe_epochs", [](RunConfig& c) -> std::size_t& { return c.eval.probe_epochs; }));
    e.push_back(size_entry("eval.probe_batch", [](RunConfig& c) -> std::size_t& { return c.eval.probe_batch; }));
    e.push_back(string_entry("eval.results_csv", [](RunConfig& c) -> std::string& { return c.eval.results_csv; }));
    return e;
  }();
  return entries;
}

const Entry& find_entry(std::string_view key) {
  for (const auto& e : registry()) {
    if (e.key == key) return e;
  }
  throw ConfigError(std::string(key), "unknown config key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  const Entry& e = find_entry(key);
  e.set(*this, trim(value));
}

std::string RunConfig::get(std::string_view key) const { return find_entry(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& e : registry()) out.push_back(e.key);
    return out;
  }();
  return names;
}

void RunConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError(std::string(assignment), "override '" + std::string(assignment) + "' is not key=value");
  }
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig e = model;
  e.image_size = aug.global_size;
  return e;
}

DecoderConfig RunConfig::decoder_config() const {
  DecoderConfig d;
  d.in_dim = model.embed_dim;
  d.stages = decoder_stages;
  d.channels = decoder_channels;
  return d;
}

void RunConfig::validate() {
  if (!seed) throw ConfigError("seed", "missing required key 'seed'");
  auto wrap = [](const char* key, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& ex) {
      throw ConfigError(key, std::string(key) + ": " + ex.what());
    }
  };
  if (epochs == 0) throw ConfigError("epochs", "epochs must be >= 1");
  if (checkpoint_every == 0) throw ConfigError("checkpoint_every", "checkpoint_every must be >= 1");
  if (data.source != "synthetic" && data.source != "folder") {
    throw ConfigError("data.source", "data.source must be synthetic or folder");
  }
  if (data.source == "folder" && data.path.empty()) throw ConfigError("data.path", "data.path required for folder source");
  if (data.source == "synthetic") {
    wrap("data.classes", [&] {
      if (SyntheticSpec::parse(data.classes, data.image_size).classes.size() < 2) {
        throw std::invalid_argument("need at least two classes");
      }
    });
    if (data.train_count == 0) throw ConfigError("data.train_count", "data.train_count must be >= 1");
  }
  model.image_size = aug.global_size;
  wrap("model", [&] { model.validate(); });
  wrap("aug", [&] { aug.validate(model.patch_size); });
  if (decoder_stages == 0) {
    std::size_t s = 0;
    while ((std::size_t{1} << s) < model.patch_size) ++s;
    if ((std::size_t{1} << s) != model.patch_size) {
      throw ConfigError("decoder.stages", "patch_size is not a power of two; set decoder.stages explicitly");
    }
    decoder_stages = s;
  }
  if ((std::size_t{1} << decoder_stages) * model.grid() != aug.global_size) {
    throw ConfigError("decoder.stages", "2^decoder.stages * grid must equal aug.global_size");
  }
  wrap("decoder", [&] { decoder_config().validate(); });
  wrap("mask", [&] { mask.validate(); });
  wrap("loss", [&] { loss.validate(); });
  optim.total_epochs = epochs;
  wrap("optim", [&] { optim.validate(); });
  if (eval.k == 0) throw ConfigError("eval.k", "eval.k must be >= 1");
  if (!(eval.temp > 0.0)) throw ConfigError("eval.temp", "eval.temp must be > 0");
  if (eval.probe_batch == 0) throw ConfigError("eval.probe_batch", "eval.probe_batch must be >= 1");
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  std::string section;
  for (const auto& e : registry()) {
    const auto dot = e.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : e.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? e.key : e.key.substr(dot + 1);
    const std::string value = e.get(*this);
    if (e.key == "seed" && !seed) continue;
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << name << " = " << value << "\n";
  }
  return os.str();
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::istringstream is{std::string(text)};
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("", "line " + std::to_string(lineno) + ": malformed section header");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string name = trim(std::string_view(t).substr(0, eq));
    const std::string key = section.empty() ? name : section + "." + name;
    cfg.set(key, std::string_view(t).substr(eq + 1));
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  out << serialize();
}

std::filesystem::path resolve_output_dir(const RunConfig& cfg) {
  std::filesystem::path p(cfg.output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("MST_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / p;
  }
  return p;
}

}  // namespace mst
