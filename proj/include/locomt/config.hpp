// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` run configuration with model./train./data./check.
// sections. Unknown keys are rejected; all cross-field constraints are
// checked on load.

#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "locomt/attention.hpp"
#include "locomt/dataset.hpp"
#include "locomt/model.hpp"
#include "locomt/training.hpp"
#include "locomt/viewconfig.hpp"

namespace locomt {

struct RunConfig {
  // model.
  std::vector<std::size_t> lengths{8, 8};
  std::vector<std::size_t> feature_dims{8, 8};
  std::size_t d = 16;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t fusion_layers = 1;
  std::size_t ffn_dim = 64;
  std::size_t classes = 2;
  FusionPattern pattern = FusionPattern::locomt;
  std::optional<ViewFrequency> frequency = ViewFrequency{{1, 1}};  // every fusion layer
  std::map<std::size_t, ViewFrequency> layer_frequency;  // 1-based fusion layer overrides
  std::optional<Strategy> strategy;
  std::size_t bottleneck_tokens = 1;
  // train.
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr = 0.05;
  double warmup = 0.1;
  double momentum = 0.9;
  double init_std = 0.02;
  double clip_norm = 1.0;
  // data.
  std::size_t train_samples = 2048;
  std::size_t test_samples = 512;
  double signal = 1.0;
  double noise = 1.0;
  std::string data_file;
  // check.
  std::size_t check_samples = 2;
  double check_init_std = 0.3;
  double check_epsilon = 1e-4;
  double check_threshold = 1e-4;

  std::uint64_t seed = 0;
  std::string out_dir;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  std::size_t modalities() const { return lengths.size(); }

  /// Frequency for fusion layer `layer` (1-based), if one is configured.
  std::optional<ViewFrequency> frequency_for(std::size_t layer) const {
    if (auto it = layer_frequency.find(layer); it != layer_frequency.end()) return it->second;
    return frequency;
  }

  std::vector<ViewAssignment> fusion_plan() const {
    const std::size_t m = modalities();
    if (strategy) {
      Rng rng = Rng::derive(seed, 3);
      return make_strategy(*strategy, heads, fusion_layers, m, rng);
    }
    std::vector<ViewAssignment> plan;
    for (std::size_t l = 1; l <= fusion_layers; ++l) {
      auto f = frequency_for(l);
      if (!f)
        throw ConfigError("no view frequency for fusion layer " + std::to_string(l) +
                          " (set model.frequency, model.frequency." + std::to_string(l) +
                          " or model.strategy)");
      plan.push_back(ViewAssignment::from_frequency(*f, m));
    }
    return plan;
  }

  ModelConfig model_config() const {
    ModelConfig c = assemble();
    c.validate();
    return c;
  }

  ModelConfig assemble() const {
    ModelConfig c;
    c.lengths = lengths;
    c.feature_dims = feature_dims;
    c.d = d;
    c.heads = heads;
    c.layers = layers;
    c.fusion_layers = fusion_layers;
    c.ffn_dim = ffn_dim;
    c.classes = classes;
    c.pattern = pattern;
    c.bottleneck_tokens = bottleneck_tokens;
    if (pattern == FusionPattern::locomt) c.plan = fusion_plan();
    return c;
  }

  TrainOptions train_options() const {
    TrainOptions t;
    t.epochs = epochs;
    t.batch = batch;
    t.base_lr = lr;
    t.warmup_fraction = warmup;
    t.momentum = momentum;
    t.init_std = init_std;
    t.clip_norm = clip_norm;
    return t;
  }

  DatasetSpec dataset_spec() const {
    return {lengths, feature_dims, train_samples + test_samples, signal, noise};
  }

  void validate() const {
    const std::size_t m = modalities();
    if (m == 0) throw ConfigError("model.lengths is empty");
    auto check_freq = [&](const ViewFrequency& f, const std::string& key) {
      if (f.counts.size() != pair_count(m) + 1)
        throw ConfigError(key + " needs " + std::to_string(pair_count(m) + 1) +
                          " counts (p_0 then one per modality pair) for m=" + std::to_string(m));
      if (f.heads() != heads)
        throw ConfigError(key + " assigns " + std::to_string(f.heads()) +
                          " heads but model.heads=" + std::to_string(heads));
    };
    if (frequency) check_freq(*frequency, "model.frequency");
    for (const auto& [l, f] : layer_frequency) {
      if (l == 0 || l > fusion_layers)
        throw ConfigError("model.frequency." + std::to_string(l) + " names a missing fusion layer");
      check_freq(f, "model.frequency." + std::to_string(l));
    }
    if (strategy && (frequency || !layer_frequency.empty()))
      throw ConfigError("model.strategy and model.frequency are mutually exclusive");
    if (strategy && m != 2)
      throw ConfigError("model.strategy requires two modalities; give per-layer frequencies");
    if (epochs == 0 || batch == 0) throw ConfigError("train.epochs and train.batch must be positive");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (warmup < 0.0 || warmup > 1.0) throw ConfigError("train.warmup must be in [0, 1]");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must be in [0, 1)");
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
    if (train_samples == 0) throw ConfigError("data.train_samples must be positive");
    if (check_samples == 0) throw ConfigError("check.samples must be positive");
    assemble().validate(false);
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  is.imbue(std::locale::classic());
  double out = 0.0;
  if (!(is >> out) || !is.eof()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Parses config text. Lines are `key = value`; '#' starts a comment.
inline RunConfig parse_run_config(std::string_view text) {
  RunConfig c;
  c.frequency.reset();
  bool ffn_set = false;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string val = detail::trim(std::string_view(t).substr(eq + 1));
    if (seen.count(key))
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " + key);
    seen[key] = lineno;

    auto u = [&] { return static_cast<std::size_t>(detail::parse_uint(key, val)); };
    auto f = [&] { return detail::parse_double(key, val); };
    if (key == "model.lengths") c.lengths = detail::parse_list(key, val);
    else if (key == "model.feature_dims") c.feature_dims = detail::parse_list(key, val);
    else if (key == "model.d") c.d = u();
    else if (key == "model.heads") c.heads = u();
    else if (key == "model.layers") c.layers = u();
    else if (key == "model.fusion_layers") c.fusion_layers = u();
    else if (key == "model.ffn_dim") { c.ffn_dim = u(); ffn_set = true; }
    else if (key == "model.classes") c.classes = u();
    else if (key == "model.pattern") c.pattern = parse_pattern(val);
    else if (key == "model.strategy") c.strategy = parse_strategy(val);
    else if (key == "model.bottleneck_tokens") c.bottleneck_tokens = u();
    else if (key == "model.frequency") c.frequency = ViewFrequency{detail::parse_list(key, val)};
    else if (key.rfind("model.frequency.", 0) == 0) {
      const auto layer = detail::parse_uint(key, key.substr(std::string("model.frequency.").size()));
      c.layer_frequency[layer] = ViewFrequency{detail::parse_list(key, val)};
    }
    else if (key == "train.epochs") c.epochs = u();
    else if (key == "train.batch") c.batch = u();
    else if (key == "train.lr") c.lr = f();
    else if (key == "train.warmup") c.warmup = f();
    else if (key == "train.momentum") c.momentum = f();
    else if (key == "train.init_std") c.init_std = f();
    else if (key == "train.clip_norm") c.clip_norm = f();
    else if (key == "data.train_samples") c.train_samples = u();
    else if (key == "data.test_samples") c.test_samples = u();
    else if (key == "data.signal") c.signal = f();
    else if (key == "data.noise") c.noise = f();
    else if (key == "data.file") c.data_file = val;
    else if (key == "check.samples") c.check_samples = u();
    else if (key == "check.init_std") c.check_init_std = f();
    else if (key == "check.epsilon") c.check_epsilon = f();
    else if (key == "check.threshold") c.check_threshold = f();
    else if (key == "seed") c.seed = detail::parse_uint(key, val);
    else if (key == "out.dir") c.out_dir = val;
    else throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  if (!ffn_set) c.ffn_dim = 4 * c.d;
  if (c.feature_dims.size() != c.lengths.size() && !seen.count("model.feature_dims"))
    c.feature_dims.assign(c.lengths.size(), 8);
  c.validate();
  return c;
}

inline std::string serialize_run_config(const RunConfig& c) {
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  kv("model.lengths", detail::join(c.lengths));
  kv("model.feature_dims", detail::join(c.feature_dims));
  kv("model.d", std::to_string(c.d));
  kv("model.heads", std::to_string(c.heads));
  kv("model.layers", std::to_string(c.layers));
  kv("model.fusion_layers", std::to_string(c.fusion_layers));
  kv("model.ffn_dim", std::to_string(c.ffn_dim));
  kv("model.classes", std::to_string(c.classes));
  kv("model.pattern", std::string(pattern_name(c.pattern)));
  if (c.strategy) kv("model.strategy", std::string(strategy_name(*c.strategy)));
  if (c.frequency) kv("model.frequency", detail::join(c.frequency->counts));
  for (const auto& [l, f] : c.layer_frequency)
    kv("model.frequency." + std::to_string(l), detail::join(f.counts));
  kv("model.bottleneck_tokens", std::to_string(c.bottleneck_tokens));
  kv("train.epochs", std::to_string(c.epochs));
  kv("train.batch", std::to_string(c.batch));
  kv("train.lr", detail::format_double(c.lr));
  kv("train.warmup", detail::format_double(c.warmup));
  kv("train.momentum", detail::format_double(c.momentum));
  kv("train.init_std", detail::format_double(c.init_std));
  kv("train.clip_norm", detail::format_double(c.clip_norm));
  kv("data.train_samples", std::to_string(c.train_samples));
  kv("data.test_samples", std::to_string(c.test_samples));
  kv("data.signal", detail::format_double(c.signal));
  kv("data.noise", detail::format_double(c.noise));
  if (!c.data_file.empty()) kv("data.file", c.data_file);
  kv("check.samples", std::to_string(c.check_samples));
  kv("check.init_std", detail::format_double(c.check_init_std));
  kv("check.epsilon", detail::format_double(c.check_epsilon));
  kv("check.threshold", detail::format_double(c.check_threshold));
  kv("seed", std::to_string(c.seed));
  if (!c.out_dir.empty()) kv("out.dir", c.out_dir);
  return os.str();
}

}  // namespace locomt
