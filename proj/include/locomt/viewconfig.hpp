// SPDX-License-Identifier: Apache-2.0
//
// Modality layouts, attention views, per-head view assignments and the
// layer-wise allocation strategies.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "locomt/numerics.hpp"

namespace locomt {

/// Raised for configurations that violate a structural constraint.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Token counts per modality, packed back to back.
class ModalityLayout {
 public:
  ModalityLayout() = default;
  explicit ModalityLayout(std::vector<std::size_t> lengths) : lengths_(std::move(lengths)) {
    if (lengths_.empty()) throw ConfigError("layout needs at least one modality");
    offsets_.reserve(lengths_.size() + 1);
    offsets_.push_back(0);
    for (std::size_t len : lengths_) {
      if (len == 0) throw ConfigError("every modality needs at least one token");
      offsets_.push_back(offsets_.back() + len);
    }
  }

  std::size_t modalities() const { return lengths_.size(); }
  std::size_t length(std::size_t k) const { return lengths_.at(k); }
  std::size_t offset(std::size_t k) const { return offsets_.at(k); }
  std::size_t total() const { return offsets_.empty() ? 0 : offsets_.back(); }
  const std::vector<std::size_t>& lengths() const { return lengths_; }
  const std::vector<std::size_t>& offsets() const { return offsets_; }

  std::size_t modality_of(std::size_t token) const {
    if (token >= total()) {
      throw std::out_of_range("token index " + std::to_string(token) + " outside layout of " +
                              std::to_string(total()) + " tokens");
    }
    auto it = std::upper_bound(offsets_.begin(), offsets_.end(), token);
    return static_cast<std::size_t>(it - offsets_.begin()) - 1;
  }

  /// Same layout with `extra` tokens added to every modality.
  ModalityLayout grown(std::size_t extra) const {
    std::vector<std::size_t> l = lengths_;
    for (auto& v : l) v += extra;
    return ModalityLayout(std::move(l));
  }

  friend bool operator==(const ModalityLayout&, const ModalityLayout&) = default;

 private:
  std::vector<std::size_t> lengths_;
  std::vector<std::size_t> offsets_;
};

/// Either self-attention or cross-attention between modalities `first` <
/// `second` (0-based). Printed 1-based, e.g. "cross(1,2)".
struct AttentionView {
  enum class Kind : std::uint8_t { self, cross };

  Kind kind = Kind::self;
  std::size_t first = 0;
  std::size_t second = 0;

  static AttentionView self_view() { return {}; }
  static AttentionView cross_view(std::size_t i, std::size_t j) {
    if (i == j) throw ConfigError("cross view needs two distinct modalities");
    return {Kind::cross, std::min(i, j), std::max(i, j)};
  }

  bool is_self() const { return kind == Kind::self; }

  std::string name() const {
    if (is_self()) return "self";
    return "cross(" + std::to_string(first + 1) + "," + std::to_string(second + 1) + ")";
  }

  friend auto operator<=>(const AttentionView&, const AttentionView&) = default;
};

inline std::size_t pair_count(std::size_t m) { return m * (m - 1) / 2; }

/// Position of cross pair (i, j), i < j, in lexicographic pair order.
inline std::size_t pair_index(std::size_t i, std::size_t j, std::size_t m) {
  return i * m - i * (i + 1) / 2 + (j - i - 1);
}

/// [self, cross(1,2), cross(1,3), ..., cross(m-1,m)].
inline std::vector<AttentionView> enumerate_views(std::size_t m) {
  if (m == 0) throw ConfigError("enumerate_views: need m >= 1");
  std::vector<AttentionView> views{AttentionView::self_view()};
  views.reserve(pair_count(m) + 1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) views.push_back(AttentionView::cross_view(i, j));
  return views;
}

/// Position of `view` within enumerate_views(m).
inline std::size_t view_index(const AttentionView& view, std::size_t m) {
  if (view.is_self()) return 0;
  if (view.second >= m) throw ConfigError("view " + view.name() + " outside " +
                                          std::to_string(m) + " modalities");
  return 1 + pair_index(view.first, view.second, m);
}

/// Half-open range of key indices.
struct KeyRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool empty() const { return begin == end; }
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t k) const { return k >= begin && k < end; }
  friend bool operator==(const KeyRange&, const KeyRange&) = default;
};

/// Keys query `q` may attend to under `view`. Queries outside a cross pair
/// get the empty range.
inline KeyRange allowed_keys(const AttentionView& view, const ModalityLayout& layout,
                             std::size_t q) {
  const std::size_t mq = layout.modality_of(q);
  auto block = [&](std::size_t k) {
    return KeyRange{layout.offset(k), layout.offset(k) + layout.length(k)};
  };
  if (view.is_self()) return block(mq);
  if (view.second >= layout.modalities()) {
    throw ConfigError("view " + view.name() + " outside layout of " +
                      std::to_string(layout.modalities()) + " modalities");
  }
  if (mq == view.first) return block(view.second);
  if (mq == view.second) return block(view.first);
  return {};
}

/// Head counts per view, indexed like enumerate_views(m): [p_0, p_12, p_13, ...].
struct ViewFrequency {
  std::vector<std::size_t> counts;

  std::size_t heads() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  std::size_t self_heads() const { return counts.empty() ? 0 : counts[0]; }
  std::size_t modalities() const {
    // counts.size() == C(m,2) + 1
    std::size_t m = 1;
    while (pair_count(m) + 1 < counts.size()) ++m;
    return m;
  }

  friend bool operator==(const ViewFrequency&, const ViewFrequency&) = default;
};

/// One view per head, in canonical order (self heads first, then cross
/// heads in pair order).
struct ViewAssignment {
  std::vector<AttentionView> views;

  std::size_t heads() const { return views.size(); }

  static ViewAssignment from_frequency(const ViewFrequency& f, std::size_t m) {
    if (f.counts.size() != pair_count(m) + 1) {
      throw ConfigError("frequency has " + std::to_string(f.counts.size()) +
                        " entries, expected " + std::to_string(pair_count(m) + 1) + " for m=" +
                        std::to_string(m));
    }
    const auto all = enumerate_views(m);
    ViewAssignment a;
    for (std::size_t v = 0; v < all.size(); ++v)
      a.views.insert(a.views.end(), f.counts[v], all[v]);
    if (a.views.empty()) throw ConfigError("frequency assigns no heads");
    return a;
  }

  static ViewAssignment uniform(AttentionView view, std::size_t heads) {
    return {std::vector<AttentionView>(heads, view)};
  }

  ViewFrequency frequency(std::size_t m) const {
    ViewFrequency f{std::vector<std::size_t>(pair_count(m) + 1, 0)};
    for (const auto& v : views) ++f.counts[view_index(v, m)];
    return f;
  }

  void canonicalize() { std::stable_sort(views.begin(), views.end()); }

  friend bool operator==(const ViewAssignment&, const ViewAssignment&) = default;
};

/// View assignments for the fusion layers at the top of an L-layer stack;
/// the first L - L_f layers are unimodal (all heads self).
struct LayerPlan {
  std::size_t total_layers = 0;
  std::vector<ViewAssignment> fusion;

  std::size_t fusion_layers() const { return fusion.size(); }
  std::size_t unimodal_layers() const { return total_layers - fusion.size(); }

  void validate(std::size_t heads) const {
    if (fusion.size() > total_layers) {
      throw ConfigError("plan has " + std::to_string(fusion.size()) +
                        " fusion layers but only " + std::to_string(total_layers) + " layers");
    }
    for (const auto& a : fusion) {
      if (a.heads() != heads) {
        throw ConfigError("fusion layer assignment has " + std::to_string(a.heads()) +
                          " heads, expected " + std::to_string(heads));
      }
    }
  }

  friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

/// Boolean grid of allowed (query, key) pairs for a single view.
inline Mask view_mask(const AttentionView& view, const ModalityLayout& layout) {
  const std::size_t n = layout.total();
  Mask mask(n, n);
  for (std::size_t q = 0; q < n; ++q) {
    const KeyRange r = allowed_keys(view, layout, q);
    for (std::size_t k = r.begin; k < r.end; ++k) mask.set(q, k);
  }
  return mask;
}

/// One mask per head.
inline std::vector<Mask> mask_grid(const ViewAssignment& assignment, const ModalityLayout& layout) {
  std::vector<Mask> masks;
  masks.reserve(assignment.heads());
  for (const auto& v : assignment.views) masks.push_back(view_mask(v, layout));
  return masks;
}

// ---------------------------------------------------------------------------
// Layer-wise allocation strategies (two modalities: one self and one cross view)

enum class Strategy { spread, bottleneck, alternating, random };

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::spread: return "spread";
    case Strategy::bottleneck: return "bottleneck";
    case Strategy::alternating: return "alternating";
    case Strategy::random: return "random";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  for (Strategy k : {Strategy::spread, Strategy::bottleneck, Strategy::alternating,
                     Strategy::random})
    if (strategy_name(k) == s) return k;
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

/// Self-head count p_0 for each fusion layer.
inline std::vector<std::size_t> strategy_self_heads(Strategy kind, std::size_t heads,
                                                    std::size_t fusion_layers, Rng& rng) {
  if (heads == 0 || fusion_layers == 0) throw ConfigError("strategy needs n_h >= 1 and L_f >= 1");
  const std::size_t step = heads / fusion_layers;
  auto decreasing = [&](std::size_t layer) {  // layer is 1-based
    const std::size_t drop = layer * step;
    return drop >= heads ? std::size_t{0} : heads - drop;
  };
  std::vector<std::size_t> p0(fusion_layers);
  switch (kind) {
    case Strategy::spread:
      for (std::size_t l = 1; l <= fusion_layers; ++l) p0[l - 1] = decreasing(l);
      break;
    case Strategy::bottleneck: {
      const std::size_t half = (fusion_layers + 1) / 2;
      for (std::size_t l = 1; l <= fusion_layers; ++l)
        p0[l - 1] = l <= half ? decreasing(l) : decreasing(fusion_layers + 1 - l);
      break;
    }
    case Strategy::alternating:
      for (std::size_t l = 1; l <= fusion_layers; ++l) p0[l - 1] = (l % 2 == 1) ? heads : 0;
      break;
    case Strategy::random:
      for (auto& v : p0) v = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(heads)));
      break;
  }
  return p0;
}

/// Fusion-layer assignments for a strategy. Only defined for m = 2.
inline std::vector<ViewAssignment> make_strategy(Strategy kind, std::size_t heads,
                                                 std::size_t fusion_layers, std::size_t m,
                                                 Rng& rng) {
  if (m != 2) {
    throw ConfigError("allocation strategy '" + std::string(strategy_name(kind)) +
                      "' is only defined for two modalities, got m=" + std::to_string(m));
  }
  std::vector<ViewAssignment> plan;
  for (std::size_t p0 : strategy_self_heads(kind, heads, fusion_layers, rng))
    plan.push_back(ViewAssignment::from_frequency({{p0, heads - p0}}, 2));
  return plan;
}

}  // namespace locomt
