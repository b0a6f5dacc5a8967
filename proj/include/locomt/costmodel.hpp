// SPDX-License-Identifier: Apache-2.0
//
// Exact attention-cost formulas for the five fusion patterns and a matmul
// FLOP estimator that reproduces the instrumented forward pass.
//
// Two conventions are used and never mixed:
//   * Cost (the C_* values) counts multiplies of the query-key product only,
//     for one layer, as exact rationals.
//   * model_flops counts every matmul of a forward pass with a multiply-add
//     worth 2 FLOPs, as an integer FlopCounter.

#pragma once

#include <boost/rational.hpp>
#include <cstdint>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "locomt/model.hpp"
#include "locomt/numerics.hpp"
#include "locomt/viewconfig.hpp"

namespace locomt {

using Cost = boost::rational<std::int64_t>;

inline std::string to_string(const Cost& c) {
  std::ostringstream os;
  os << c.numerator();
  if (c.denominator() != 1) os << '/' << c.denominator();
  return os.str();
}

struct CostQuery {
  ModalityLayout layout;
  std::int64_t d = 1;
  ViewFrequency frequency;  // [p_0, p_12, p_13, ...]
  std::int64_t bottleneck_tokens = 0;

  std::size_t modalities() const { return layout.modalities(); }
  std::size_t heads() const { return frequency.heads(); }

  void validate() const {
    if (d < 1) throw ConfigError("cost query needs d >= 1");
    if (bottleneck_tokens < 0) throw ConfigError("cost query needs B >= 0");
    const std::size_t m = modalities();
    if (frequency.counts.size() != pair_count(m) + 1)
      throw ConfigError("view frequency has " + std::to_string(frequency.counts.size()) +
                        " entries, expected " + std::to_string(pair_count(m) + 1) +
                        " (p_0 then one per modality pair)");
    if (heads() == 0) throw ConfigError("view frequency assigns no heads (p_0 + sum p_ij = 0)");
  }
};

namespace detail {
inline std::int64_t len(const CostQuery& q, std::size_t k) {
  return static_cast<std::int64_t>(q.layout.length(k));
}
inline std::int64_t sum_squares(const CostQuery& q) {
  std::int64_t s = 0;
  for (std::size_t k = 0; k < q.modalities(); ++k) s += len(q, k) * len(q, k);
  return s;
}
inline std::int64_t pair_products(const CostQuery& q) {
  std::int64_t s = 0;
  for (std::size_t i = 0; i < q.modalities(); ++i)
    for (std::size_t j = i + 1; j < q.modalities(); ++j) s += len(q, i) * len(q, j);
  return s;
}
}  // namespace detail

/// (sum_i L_i^2) d
inline Cost cost_self(const CostQuery& q) { return Cost(detail::sum_squares(q) * q.d); }

/// 2 L_1 L_2 d; two modalities only.
inline Cost cost_cross(const CostQuery& q) {
  if (q.modalities() != 2)
    throw ConfigError("cross-attention cost is defined for two modalities, got m=" +
                      std::to_string(q.modalities()));
  return Cost(2 * detail::len(q, 0) * detail::len(q, 1) * q.d);
}

/// Cross cost for m >= 2 as the view cost with p_0 = 0 and heads spread
/// uniformly over the C(m,2) pairs: (2 / C(m,2)) sum_{i<j} L_i L_j d.
inline Cost cost_cross_uniform(const CostQuery& q) {
  const auto m = q.modalities();
  if (m < 2) throw ConfigError("cross-attention cost needs at least two modalities");
  return Cost(2 * detail::pair_products(q) * q.d, static_cast<std::int64_t>(pair_count(m)));
}

/// (sum_i L_i)^2 d
inline Cost cost_multi(const CostQuery& q) {
  const auto t = static_cast<std::int64_t>(q.layout.total());
  return Cost(t * t * q.d);
}

/// (sum_i (L_i + B)^2) d
inline Cost cost_bottle(const CostQuery& q) {
  std::int64_t s = 0;
  for (std::size_t k = 0; k < q.modalities(); ++k) {
    const std::int64_t l = detail::len(q, k) + q.bottleneck_tokens;
    s += l * l;
  }
  return Cost(s * q.d);
}

/// [(p_0/n_h) sum_i L_i^2 + 2 sum_{i<j} (p_ij/n_h) L_i L_j] d
inline Cost cost_locomt(const CostQuery& q) {
  q.validate();
  const auto nh = static_cast<std::int64_t>(q.heads());
  std::int64_t num = static_cast<std::int64_t>(q.frequency.counts[0]) * detail::sum_squares(q);
  const std::size_t m = q.modalities();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      const auto p = static_cast<std::int64_t>(q.frequency.counts[1 + pair_index(i, j, m)]);
      num += 2 * p * detail::len(q, i) * detail::len(q, j);
    }
  return Cost(num * q.d, nh);
}

/// Closed form of cost_self - cost_locomt:
/// sum_{i<j} (p_ij/n_h) [sum_{k != i,j} L_k^2 + (L_i - L_j)^2] d
inline Cost cost_gap_self_locomt(const CostQuery& q) {
  q.validate();
  const auto nh = static_cast<std::int64_t>(q.heads());
  const std::size_t m = q.modalities();
  const std::int64_t squares = detail::sum_squares(q);
  Cost gap(0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      const auto p = static_cast<std::int64_t>(q.frequency.counts[1 + pair_index(i, j, m)]);
      const std::int64_t li = detail::len(q, i), lj = detail::len(q, j);
      const std::int64_t others = squares - li * li - lj * lj;
      gap += Cost(p * (others + (li - lj) * (li - lj)), nh);
    }
  return gap * q.d;
}

struct CostReport {
  Cost c_self, c_multi, c_bottle, c_locomt, gap;
  std::optional<Cost> c_cross;  // two-modality pattern cost; uniform form for m > 2
};

inline CostReport cost_report(const CostQuery& q) {
  q.validate();
  CostReport r;
  r.c_self = cost_self(q);
  r.c_multi = cost_multi(q);
  r.c_bottle = cost_bottle(q);
  r.c_locomt = cost_locomt(q);
  r.gap = cost_gap_self_locomt(q);
  if (q.modalities() == 2) r.c_cross = cost_cross(q);
  else if (q.modalities() > 2) r.c_cross = cost_cross_uniform(q);
  return r;
}

/// Which links of C_LoCoMT <= C_self < C_bottle < C_multi (and, for m = 2,
/// C_cross <= C_self) hold for a query.
struct OrderingVerdict {
  bool locomt_le_self = false;
  bool locomt_eq_self = false;
  bool self_lt_bottle = false;
  bool bottle_lt_multi = false;
  std::optional<bool> cross_le_self;
  /// B <= floor(min_i L_i / 4): the few-bottleneck-token regime in which the
  /// bottleneck cost is expected to stay below the multimodal cost.
  bool small_bottleneck = false;

  bool chain_holds() const { return locomt_le_self && self_lt_bottle && bottle_lt_multi; }
};

inline bool small_bottleneck_regime(const CostQuery& q) {
  std::size_t min_len = q.layout.length(0);
  for (auto l : q.layout.lengths()) min_len = std::min(min_len, l);
  return q.bottleneck_tokens >= 1 &&
         static_cast<std::size_t>(q.bottleneck_tokens) <= min_len / 4;
}

inline OrderingVerdict verify_ordering(const CostQuery& q) {
  if (q.bottleneck_tokens < 1) throw ConfigError("ordering check needs B >= 1");
  const CostReport r = cost_report(q);
  OrderingVerdict v;
  v.locomt_le_self = r.c_locomt <= r.c_self;
  v.locomt_eq_self = r.c_locomt == r.c_self;
  v.self_lt_bottle = r.c_self < r.c_bottle;
  v.bottle_lt_multi = r.c_bottle < r.c_multi;
  if (q.modalities() == 2) v.cross_le_self = *r.c_cross <= r.c_self;
  v.small_bottleneck = small_bottleneck_regime(q);
  return v;
}

// ---------------------------------------------------------------------------
// Whole-model FLOP estimate

namespace detail {

/// FLOPs of one transformer block over `rows` tokens whose heads together
/// allow `pairs` (query, key) entries.
inline void block_flops(FlopCounter& c, std::uint64_t rows, std::uint64_t pairs,
                        const ModelConfig& cfg) {
  const std::uint64_t d = cfg.d, dk = cfg.d / cfg.heads, h = cfg.heads, ff = cfg.ffn_dim;
  c[FlopKind::projection] += 3 * h * 2 * rows * d * dk;  // Q, K, V
  c[FlopKind::projection] += 2 * rows * (h * dk) * d;    // W_O
  c[FlopKind::score] += 2 * dk * pairs;
  c[FlopKind::mix] += 2 * dk * pairs;
  c[FlopKind::ffn] += 2 * rows * d * ff + 2 * rows * ff * d;
}

/// Allowed (query, key) pairs of one head, from the block structure alone.
inline std::uint64_t view_pairs(const AttentionView& v, const ModalityLayout& layout) {
  if (v.is_self()) {
    std::uint64_t s = 0;
    for (auto l : layout.lengths()) s += std::uint64_t{l} * l;
    return s;
  }
  return 2ull * layout.length(v.first) * layout.length(v.second);
}

inline std::uint64_t fusion_pairs(const ModelConfig& cfg, std::size_t fusion_index,
                                  const ModalityLayout& layout) {
  const std::uint64_t t = layout.total();
  std::uint64_t n = 0;
  switch (cfg.pattern) {
    case FusionPattern::multi: return cfg.heads * t * t;
    case FusionPattern::locomt:
      for (const auto& v : cfg.plan[fusion_index].views) n += view_pairs(v, layout);
      return n;
    default:
      for (const auto& v : pattern_assignment(cfg.pattern, cfg.heads, cfg.modalities()).views)
        n += view_pairs(v, layout);
      return n;
  }
}

}  // namespace detail

/// Matmul FLOPs of forward() on `batch` samples, by role.
inline FlopCounter model_flops(const ModelConfig& cfg, std::size_t batch = 1) {
  cfg.validate();
  const ModalityLayout layout = cfg.layout();
  const std::uint64_t total = layout.total();
  FlopCounter c;
  for (std::size_t k = 0; k < cfg.modalities(); ++k)
    c[FlopKind::embed] += 2ull * cfg.lengths[k] * cfg.feature_dims[k] * cfg.d;

  const std::uint64_t self_pairs = cfg.heads * detail::view_pairs(AttentionView::self_view(), layout);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (l < cfg.unimodal_layers()) {
      detail::block_flops(c, total, self_pairs, cfg);
    } else if (cfg.pattern != FusionPattern::bottleneck) {
      detail::block_flops(c, total, detail::fusion_pairs(cfg, l - cfg.unimodal_layers(), layout),
                          cfg);
    } else {
      for (std::size_t k = 0; k < cfg.modalities(); ++k) {
        const std::uint64_t rows = layout.length(k) + cfg.bottleneck_tokens;
        detail::block_flops(c, rows, cfg.heads * rows * rows, cfg);
      }
    }
  }
  c[FlopKind::head] += 2ull * cfg.d * cfg.classes;
  for (auto& v : c.by_kind) v *= batch;
  return c;
}

/// Runs forward() under a FlopScope and returns what was counted.
inline FlopCounter measured_flops(const ModelConfig& cfg, const ModelParams& params,
                                  std::span<const Sample> batch) {
  FlopCounter c;
  FlopScope scope(c);
  (void)forward(cfg, params, batch);
  return c;
}

}  // namespace locomt
