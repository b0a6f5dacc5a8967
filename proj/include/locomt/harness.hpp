// SPDX-License-Identifier: Apache-2.0
//
// Implementations of the `locomt` subcommands. Each returns its exit code and
// the text destined for stdout; files go under an optional output directory
// and are written atomically.

#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "locomt/config.hpp"
#include "locomt/costmodel.hpp"
#include "locomt/dataset.hpp"
#include "locomt/io.hpp"
#include "locomt/model.hpp"
#include "locomt/training.hpp"
#include "locomt/viewconfig.hpp"

namespace locomt::harness {

enum ExitCode : int { kOk = 0, kViolated = 1, kUsage = 2 };

struct CommandResult {
  int exit_code = kOk;
  std::string output;
};

using OutDir = std::optional<std::filesystem::path>;

inline void emit(const OutDir& out, const std::string& name, std::string_view bytes) {
  if (out) io::write_file_atomic(*out / name, bytes);
}

// ---------------------------------------------------------------------------
// cost

inline CostQuery cost_query(const RunConfig& cfg) {
  auto f = cfg.frequency_for(1);
  if (!f && cfg.strategy) f = cfg.fusion_plan().at(0).frequency(cfg.modalities());
  if (!f) throw ConfigError("cost needs model.frequency (p_0 then one count per modality pair)");
  CostQuery q{ModalityLayout(cfg.lengths), static_cast<std::int64_t>(cfg.d), *f,
              static_cast<std::int64_t>(cfg.bottleneck_tokens)};
  q.validate();
  if (q.heads() != cfg.heads)
    throw ConfigError("view frequency assigns " + std::to_string(q.heads()) +
                      " heads but model.heads=" + std::to_string(cfg.heads));
  return q;
}

inline std::string cost_csv(const CostReport& r) {
  std::string s = "pattern,cost\n";
  s += "self," + to_string(r.c_self) + "\n";
  if (r.c_cross) s += "cross," + to_string(*r.c_cross) + "\n";
  s += "multi," + to_string(r.c_multi) + "\n";
  s += "bottleneck," + to_string(r.c_bottle) + "\n";
  s += "locomt," + to_string(r.c_locomt) + "\n";
  s += "gap_self_locomt," + to_string(r.gap) + "\n";
  return s;
}

/// Cost table for the configured layout; exit 0 iff
/// C_locomt <= C_self < C_bottle < C_multi.
inline CommandResult cmd_cost(const RunConfig& cfg, const OutDir& out = {}) {
  const CostQuery q = cost_query(cfg);
  const CostReport r = cost_report(q);
  const std::string csv = cost_csv(r);
  emit(out, "cost.csv", csv);

  auto yn = [](bool b) { return b ? "yes" : "no"; };
  std::ostringstream os;
  os << csv << '\n';
  if (q.bottleneck_tokens < 1) {
    os << "verdict: skipped (ordering needs model.bottleneck_tokens >= 1)\n";
    return {kUsage, os.str()};
  }
  const OrderingVerdict v = verify_ordering(q);
  os << "locomt<=self: " << yn(v.locomt_le_self) << (v.locomt_eq_self ? " (equal)" : "") << '\n';
  os << "self<bottleneck: " << yn(v.self_lt_bottle) << '\n';
  os << "bottleneck<multi: " << yn(v.bottle_lt_multi) << '\n';
  if (v.cross_le_self) os << "cross<=self: " << yn(*v.cross_le_self) << '\n';
  os << "small_bottleneck_regime: " << yn(v.small_bottleneck) << '\n';
  if (v.chain_holds()) {
    os << "verdict: holds\n";
    return {kOk, os.str()};
  }
  os << "verdict: violated";
  if (!v.small_bottleneck) os << " (B is outside the B << L_i regime)";
  os << '\n';
  return {kViolated, os.str()};
}

// ---------------------------------------------------------------------------
// mask

/// Cell codes of a rendered grid.
enum class Cell : std::uint8_t { masked, active, bottleneck };

struct Grid {
  std::string title;
  std::size_t rows = 0, cols = 0;
  std::vector<Cell> cells;

  Cell at(std::size_t r, std::size_t c) const { return cells[r * cols + c]; }

  std::string text() const {
    std::string s;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        switch (at(r, c)) {
          case Cell::masked: s += '.'; break;
          case Cell::active: s += '#'; break;
          case Cell::bottleneck: s += 'B'; break;
        }
      }
      s += '\n';
    }
    return s;
  }

  /// Binary PGM: 0 masked, 255 active, 128 bottleneck.
  std::string pgm() const {
    std::string s = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (Cell c : cells)
      s.push_back(static_cast<char>(c == Cell::masked ? 0 : c == Cell::active ? 255 : 128));
    return s;
  }
};

inline Grid grid_from_mask(std::string title, const Mask& m) {
  Grid g{std::move(title), m.rows(), m.cols(), {}};
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      g.cells.push_back(m(r, c) ? Cell::active : Cell::masked);
  return g;
}

/// Union of the per-modality attention supports of a bottleneck layer on
/// [x_1; ...; x_m; bottleneck]: modality tokens see their own block and the
/// bottleneck; bottleneck rows see everything.
inline Grid bottleneck_grid(std::string title, const ModalityLayout& layout, std::size_t b) {
  const std::size_t n = layout.total() + b;
  Grid g{std::move(title), n, n, std::vector<Cell>(n * n, Cell::masked)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const bool rb = r >= layout.total(), cb = c >= layout.total();
      if (rb || cb) g.cells[r * n + c] = Cell::bottleneck;
      else if (layout.modality_of(r) == layout.modality_of(c)) g.cells[r * n + c] = Cell::active;
    }
  return g;
}

/// Head masks of every fusion layer on the configured token layout.
inline std::vector<Grid> fusion_grids(const RunConfig& cfg) {
  const ModelConfig mc = cfg.model_config();
  const ModalityLayout layout(cfg.lengths);
  std::vector<Grid> grids;
  for (std::size_t f = 0; f < mc.fusion_layers; ++f) {
    const std::string layer = "layer=" + std::to_string(mc.unimodal_layers() + f + 1);
    if (mc.pattern == FusionPattern::bottleneck) {
      grids.push_back(bottleneck_grid(layer + " heads=all view=bottleneck", layout,
                                      mc.bottleneck_tokens));
      continue;
    }
    std::vector<Mask> masks;
    std::vector<std::string> names;
    if (mc.pattern == FusionPattern::locomt) {
      masks = mask_grid(mc.plan[f], layout);
      for (const auto& v : mc.plan[f].views) names.push_back(v.name());
    } else {
      masks = pattern_masks(mc.pattern, mc.heads, layout);
      if (mc.pattern == FusionPattern::multi) names.assign(mc.heads, "multi");
      else
        for (const auto& v : pattern_assignment(mc.pattern, mc.heads, mc.modalities()).views)
          names.push_back(v.name());
    }
    for (std::size_t h = 0; h < masks.size(); ++h)
      grids.push_back(grid_from_mask(
          layer + " head=" + std::to_string(h + 1) + " view=" + names[h], masks[h]));
  }
  return grids;
}

inline CommandResult cmd_mask(const RunConfig& cfg, const OutDir& out = {}) {
  const auto grids = fusion_grids(cfg);
  std::string text;
  for (const auto& g : grids) text += g.title + "\n" + g.text();
  if (grids.empty()) text = "no fusion layers\n";
  emit(out, "masks.txt", text);
  for (std::size_t i = 0; i < grids.size(); ++i)
    emit(out, "mask_" + std::to_string(i + 1) + ".pgm", grids[i].pgm());
  return {kOk, text};
}

// ---------------------------------------------------------------------------
// strategy

inline CommandResult cmd_strategy(Strategy kind, std::size_t heads, std::size_t fusion_layers,
                                  std::uint64_t seed, const OutDir& out = {}) {
  Rng rng = Rng::derive(seed, 3);
  const auto plan = make_strategy(kind, heads, fusion_layers, 2, rng);
  std::string csv = "layer,p_self,p_cross_12\n";
  for (std::size_t l = 0; l < plan.size(); ++l) {
    const auto f = plan[l].frequency(2);
    csv += std::to_string(l + 1) + "," + std::to_string(f.counts[0]) + "," +
           std::to_string(f.counts[1]) + "\n";
  }
  emit(out, "strategy.csv", csv);
  return {kOk, csv};
}

// ---------------------------------------------------------------------------
// gradcheck

inline GradCheckReport run_gradcheck(const ModelConfig& mc, const RunConfig& cfg, bool corrupt) {
  Rng rng = Rng::derive(cfg.seed, 4);
  const ModelParams params = ModelParams::init(mc, rng, cfg.check_init_std);
  DatasetSpec spec = cfg.dataset_spec();
  spec.samples = cfg.check_samples;
  const Dataset data = generate_parity_dataset(spec, cfg.seed);
  GradCheckOptions opt;
  opt.epsilon = cfg.check_epsilon;
  opt.threshold = cfg.check_threshold;
  opt.corrupt = corrupt;
  return gradient_check(mc, params, data.samples, opt);
}

/// Every pattern, plus every allocation strategy when m = 2.
inline std::vector<std::pair<std::string, ModelConfig>> gradcheck_matrix(const RunConfig& cfg) {
  std::vector<std::pair<std::string, ModelConfig>> out;
  for (FusionPattern p : {FusionPattern::locomt, FusionPattern::self, FusionPattern::cross,
                          FusionPattern::multi, FusionPattern::bottleneck}) {
    if (p == FusionPattern::cross && cfg.modalities() < 2) continue;
    RunConfig c = cfg;
    c.pattern = p;
    out.emplace_back(std::string(pattern_name(p)), c.model_config());
  }
  if (cfg.modalities() == 2) {
    for (Strategy s : {Strategy::spread, Strategy::bottleneck, Strategy::alternating,
                       Strategy::random}) {
      RunConfig c = cfg;
      c.pattern = FusionPattern::locomt;
      c.frequency.reset();
      c.layer_frequency.clear();
      c.strategy = s;
      out.emplace_back("locomt/" + std::string(strategy_name(s)), c.model_config());
    }
  }
  return out;
}

inline CommandResult cmd_gradcheck(const RunConfig& cfg, bool corrupt = false, bool matrix = false,
                                   const OutDir& out = {}) {
  std::vector<std::pair<std::string, ModelConfig>> configs;
  if (matrix) configs = gradcheck_matrix(cfg);
  else configs.emplace_back(std::string(pattern_name(cfg.pattern)), cfg.model_config());

  std::string csv = "config,parameter,max_rel_error,analytic,numeric\n";
  bool ok = true;
  double worst = 0.0;
  char buf[256];
  for (const auto& [name, mc] : configs) {
    const GradCheckReport r = run_gradcheck(mc, cfg, corrupt);
    ok = ok && r.passed();
    worst = std::max(worst, r.max_rel_error());
    for (const auto& e : r.entries) {
      std::snprintf(buf, sizeof buf, "%s,%s,%.3e,%.9e,%.9e\n", name.c_str(), e.name.c_str(),
                    e.max_rel_error, e.analytic, e.numeric);
      csv += buf;
    }
  }
  emit(out, "gradcheck.csv", csv);
  std::snprintf(buf, sizeof buf, "max_rel_error=%.3e threshold=%.1e result=%s\n", worst,
                cfg.check_threshold, ok ? "pass" : "fail");
  return {ok ? kOk : kViolated, csv + buf};
}

// ---------------------------------------------------------------------------
// gen-data / train

inline Dataset load_or_generate(const RunConfig& cfg) {
  Dataset ds = cfg.data_file.empty() ? generate_parity_dataset(cfg.dataset_spec(), cfg.seed)
                                     : read_dataset(cfg.data_file);
  if (ds.lengths != cfg.lengths || ds.feature_dims != cfg.feature_dims)
    throw ConfigError("dataset layout does not match model.lengths / model.feature_dims");
  if (ds.samples.size() < cfg.train_samples + cfg.test_samples)
    throw ConfigError("dataset holds " + std::to_string(ds.samples.size()) +
                      " samples, config needs " +
                      std::to_string(cfg.train_samples + cfg.test_samples));
  return ds;
}

inline CommandResult cmd_gen_data(const RunConfig& cfg, const OutDir& out = {}) {
  const Dataset ds = generate_parity_dataset(cfg.dataset_spec(), cfg.seed);
  emit(out, "dataset.lmds", encode_dataset(ds));
  std::vector<std::size_t> hist(2, 0);
  for (const auto& s : ds.samples) ++hist[s.label];
  std::ostringstream os;
  os << "samples=" << ds.samples.size() << " label0=" << hist[0] << " label1=" << hist[1]
     << " seed=" << ds.seed << '\n';
  return {kOk, os.str()};
}

inline CommandResult cmd_train(const RunConfig& cfg, std::size_t threads, const OutDir& out = {}) {
  const ModelConfig mc = cfg.model_config();
  const Dataset ds = load_or_generate(cfg);
  const std::span<const Sample> all(ds.samples);
  TrainOptions opt = cfg.train_options();
  opt.threads = threads;
  const TrainResult r = train_toy(mc, opt, all.subspan(0, cfg.train_samples),
                                  all.subspan(cfg.train_samples, cfg.test_samples), cfg.seed);
  const std::string csv = metrics_csv(r.metrics);
  emit(out, "metrics.csv", csv);
  emit(out, "checkpoint.bin", encode_checkpoint(r.params));
  std::ostringstream os;
  os << csv;
  const auto& test = r.last(cfg.test_samples ? "test" : "train");
  os << "final " << test.split << " accuracy=" << test.accuracy << " loss=" << test.loss << '\n';
  return {kOk, os.str()};
}

}  // namespace locomt::harness
