// SPDX-License-Identifier: Apache-2.0
//
// View-restricted multi-head attention and the transformer blocks built on
// it: the per-head view layer, the self/cross/multi baseline patterns and
// bottleneck-token fusion.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "locomt/numerics.hpp"
#include "locomt/tape.hpp"
#include "locomt/viewconfig.hpp"

namespace locomt {

/// Weights of one pre-norm transformer layer. Per-head projections are d x d_k
/// with d_k = d_v = d / n_h.
struct LayerParams {
  std::vector<Tensor> w_q, w_k, w_v;
  Tensor w_o;                  // (n_h * d_v) x d
  Tensor w_1, b_1, w_2, b_2;   // d x d_ff, 1 x d_ff, d_ff x d, 1 x d
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  std::size_t heads() const { return w_q.size(); }
  std::size_t model_dim() const { return w_o.cols(); }
  std::size_t head_dim() const { return w_q.empty() ? 0 : w_q[0].cols(); }
  std::size_t ffn_dim() const { return w_1.cols(); }

  static LayerParams init(std::size_t d, std::size_t heads, std::size_t d_ff, Rng& rng,
                          double stddev = 0.02) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("model dim " + std::to_string(d) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    const std::size_t dk = d / heads;
    LayerParams p;
    for (std::size_t h = 0; h < heads; ++h) {
      p.w_q.push_back(rand_normal(rng, {d, dk}, stddev));
      p.w_k.push_back(rand_normal(rng, {d, dk}, stddev));
      p.w_v.push_back(rand_normal(rng, {d, dk}, stddev));
    }
    p.w_o = rand_normal(rng, {heads * dk, d}, stddev);
    p.w_1 = rand_normal(rng, {d, d_ff}, stddev);
    p.b_1 = Tensor({1, d_ff});
    p.w_2 = rand_normal(rng, {d_ff, d}, stddev);
    p.b_2 = Tensor({1, d});
    p.ln1_gain = Tensor({1, d}, 1.0);
    p.ln1_bias = Tensor({1, d});
    p.ln2_gain = Tensor({1, d}, 1.0);
    p.ln2_bias = Tensor({1, d});
    return p;
  }

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t h = 0; h < self.w_q.size(); ++h) {
      const std::string hs = std::to_string(h);
      f(prefix + "w_q." + hs, self.w_q[h]);
      f(prefix + "w_k." + hs, self.w_k[h]);
      f(prefix + "w_v." + hs, self.w_v[h]);
    }
    f(prefix + "w_o", self.w_o);
    f(prefix + "w_1", self.w_1);
    f(prefix + "b_1", self.b_1);
    f(prefix + "w_2", self.w_2);
    f(prefix + "b_2", self.b_2);
    f(prefix + "ln1_gain", self.ln1_gain);
    f(prefix + "ln1_bias", self.ln1_bias);
    f(prefix + "ln2_gain", self.ln2_gain);
    f(prefix + "ln2_bias", self.ln2_bias);
  }

  /// Number of scalars in a layer of the given size.
  static std::size_t census(std::size_t d, std::size_t heads, std::size_t d_ff) {
    const std::size_t dk = d / heads;
    return 3 * heads * d * dk + heads * dk * d + d * d_ff + d_ff + d_ff * d + d + 4 * d;
  }
};

/// Learned bottleneck tokens, B x d.
struct BottleneckState {
  Tensor tokens;

  std::size_t count() const { return tokens.rows(); }

  static BottleneckState init(std::size_t count, std::size_t d, Rng& rng, double stddev = 0.02) {
    if (count == 0) throw ConfigError("bottleneck fusion needs B >= 1");
    return {rand_normal(rng, {count, d}, stddev)};
  }
};

/// LayerParams placed on a tape.
struct LayerVars {
  std::vector<Var> w_q, w_k, w_v;
  Var w_o, w_1, b_1, w_2, b_2, ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  std::size_t heads() const { return w_q.size(); }
};

/// Records `params` as leaves; gradients flow into `grads` when non-null.
inline LayerVars bind(Tape& tape, const LayerParams& params, LayerParams* grads = nullptr) {
  auto leaf = [&](const Tensor& t, Tensor* g) { return tape.parameter(t, g); };
  auto sink = [&](auto member) -> Tensor* { return grads ? &(grads->*member) : nullptr; };
  LayerVars v;
  for (std::size_t h = 0; h < params.heads(); ++h) {
    v.w_q.push_back(leaf(params.w_q[h], grads ? &grads->w_q[h] : nullptr));
    v.w_k.push_back(leaf(params.w_k[h], grads ? &grads->w_k[h] : nullptr));
    v.w_v.push_back(leaf(params.w_v[h], grads ? &grads->w_v[h] : nullptr));
  }
  v.w_o = leaf(params.w_o, sink(&LayerParams::w_o));
  v.w_1 = leaf(params.w_1, sink(&LayerParams::w_1));
  v.b_1 = leaf(params.b_1, sink(&LayerParams::b_1));
  v.w_2 = leaf(params.w_2, sink(&LayerParams::w_2));
  v.b_2 = leaf(params.b_2, sink(&LayerParams::b_2));
  v.ln1_gain = leaf(params.ln1_gain, sink(&LayerParams::ln1_gain));
  v.ln1_bias = leaf(params.ln1_bias, sink(&LayerParams::ln1_bias));
  v.ln2_gain = leaf(params.ln2_gain, sink(&LayerParams::ln2_gain));
  v.ln2_bias = leaf(params.ln2_bias, sink(&LayerParams::ln2_bias));
  return v;
}

/// One attention head: project, then attend under `mask`, scaled by 1/sqrt(d_k).
inline Var attention_head(Var x, Var w_q, Var w_k, Var w_v, const Mask& mask) {
  Var q = ops::matmul(x, w_q, FlopKind::projection);
  Var k = ops::matmul(x, w_k, FlopKind::projection);
  Var v = ops::matmul(x, w_v, FlopKind::projection);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  return ops::masked_attention(q, k, v, mask, scale);
}

/// [h_1; ...; h_{n_h}] W_O with one mask per head.
inline Var multi_head_attention(Var x, const LayerVars& p, std::span<const Mask> head_masks) {
  if (head_masks.size() != p.heads()) {
    throw ConfigError("got " + std::to_string(head_masks.size()) + " head masks for " +
                      std::to_string(p.heads()) + " heads");
  }
  std::vector<Var> heads;
  heads.reserve(p.heads());
  for (std::size_t h = 0; h < p.heads(); ++h)
    heads.push_back(attention_head(x, p.w_q[h], p.w_k[h], p.w_v[h], head_masks[h]));
  return ops::matmul(ops::concat_cols(heads), p.w_o, FlopKind::projection);
}

/// Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(.)) with GELU.
inline Var transformer_block(Var x, const LayerVars& p, std::span<const Mask> head_masks) {
  Var attn = multi_head_attention(ops::layer_norm(x, p.ln1_gain, p.ln1_bias), p, head_masks);
  Var mid = ops::add(x, attn);
  Var hidden = ops::gelu(ops::add_row(
      ops::matmul(ops::layer_norm(mid, p.ln2_gain, p.ln2_bias), p.w_1, FlopKind::ffn), p.b_1));
  Var ffn = ops::add_row(ops::matmul(hidden, p.w_2, FlopKind::ffn), p.b_2);
  return ops::add(mid, ffn);
}

// ---------------------------------------------------------------------------
// Fusion patterns

enum class FusionPattern { locomt, self, cross, multi, bottleneck };

inline std::string_view pattern_name(FusionPattern p) {
  switch (p) {
    case FusionPattern::locomt: return "locomt";
    case FusionPattern::self: return "self";
    case FusionPattern::cross: return "cross";
    case FusionPattern::multi: return "multi";
    case FusionPattern::bottleneck: return "bottleneck";
  }
  return "?";
}

inline FusionPattern parse_pattern(std::string_view s) {
  for (FusionPattern p : {FusionPattern::locomt, FusionPattern::self, FusionPattern::cross,
                          FusionPattern::multi, FusionPattern::bottleneck})
    if (pattern_name(p) == s) return p;
  throw ConfigError("unknown fusion pattern '" + std::string(s) + "'");
}

/// Head assignment realizing a baseline pattern on the packed sequence:
/// self puts every head on the self view; cross cycles heads over the
/// modality pairs in pair order (all heads on cross(1,2) when m = 2).
inline ViewAssignment pattern_assignment(FusionPattern pattern, std::size_t heads, std::size_t m) {
  switch (pattern) {
    case FusionPattern::self:
      return ViewAssignment::uniform(AttentionView::self_view(), heads);
    case FusionPattern::cross: {
      if (m < 2) throw ConfigError("cross pattern needs at least two modalities");
      const auto views = enumerate_views(m);
      ViewAssignment a;
      for (std::size_t h = 0; h < heads; ++h) a.views.push_back(views[1 + h % pair_count(m)]);
      a.canonicalize();
      return a;
    }
    default:
      throw ConfigError("pattern '" + std::string(pattern_name(pattern)) +
                        "' is not expressible as a view assignment");
  }
}

/// Per-head masks for a packed-sequence pattern (everything but bottleneck).
inline std::vector<Mask> pattern_masks(FusionPattern pattern, std::size_t heads,
                                       const ModalityLayout& layout) {
  if (pattern == FusionPattern::multi)
    return std::vector<Mask>(heads, Mask(layout.total(), layout.total(), true));
  return mask_grid(pattern_assignment(pattern, heads, layout.modalities()), layout);
}

/// Block with per-head views on the packed sequence.
inline Var locomt_layer(Var x, const LayerVars& p, const ViewAssignment& assignment,
                        const ModalityLayout& layout) {
  if (assignment.heads() != p.heads()) {
    throw ConfigError("assignment has " + std::to_string(assignment.heads()) +
                      " heads but the layer has " + std::to_string(p.heads()));
  }
  if (x.value().rows() != layout.total()) {
    throw DimensionError("input has " + std::to_string(x.value().rows()) +
                         " rows, layout expects " + std::to_string(layout.total()));
  }
  const auto masks = mask_grid(assignment, layout);
  return transformer_block(x, p, masks);
}

/// Block with a baseline pattern (self, cross or multi) on the packed sequence.
inline Var pattern_layer(Var x, const LayerVars& p, FusionPattern pattern,
                         const ModalityLayout& layout) {
  if (x.value().rows() != layout.total()) {
    throw DimensionError("input has " + std::to_string(x.value().rows()) +
                         " rows, layout expects " + std::to_string(layout.total()));
  }
  const auto masks = pattern_masks(pattern, p.heads(), layout);
  return transformer_block(x, p, masks);
}

struct BottleneckOutput {
  std::vector<Var> modalities;
  Var bottleneck;
};

/// Bottleneck fusion: each modality runs full self-attention over
/// [x_k; bottleneck] with shared weights, keeps its own updated rows, and
/// the bottleneck becomes the mean of the per-modality updated copies.
inline BottleneckOutput bottleneck_layer(std::span<const Var> xs, Var bottleneck,
                                         const LayerVars& p) {
  if (xs.empty()) throw ConfigError("bottleneck layer needs at least one modality");
  const std::size_t b = bottleneck.value().rows();
  BottleneckOutput out;
  std::vector<Var> copies;
  for (const Var& x : xs) {
    const std::size_t len = x.value().rows();
    std::vector<Var> parts{x, bottleneck};
    Var joined = ops::concat_rows(parts);
    const std::vector<Mask> masks(p.heads(), Mask(len + b, len + b, true));
    Var y = transformer_block(joined, p, masks);
    out.modalities.push_back(ops::slice_rows(y, 0, len));
    copies.push_back(ops::slice_rows(y, len, len + b));
  }
  out.bottleneck = ops::mean_of(copies);
  return out;
}

// ---------------------------------------------------------------------------
// Tensor-level conveniences (no gradients)

/// Output of a single view-restricted head, total x d_v.
inline Tensor restricted_attention_head(const Tensor& x, const Tensor& w_q, const Tensor& w_k,
                                        const Tensor& w_v, const AttentionView& view,
                                        const ModalityLayout& layout) {
  if (x.rows() != layout.total()) {
    throw DimensionError("input has " + std::to_string(x.rows()) + " rows, layout expects " +
                         std::to_string(layout.total()));
  }
  Tape tape;
  Var out = attention_head(tape.constant(x), tape.constant(w_q), tape.constant(w_k),
                           tape.constant(w_v), view_mask(view, layout));
  return out.value();
}

inline Tensor locomt_layer(const Tensor& x, const LayerParams& params,
                           const ViewAssignment& assignment, const ModalityLayout& layout) {
  Tape tape;
  return locomt_layer(tape.constant(x), bind(tape, params), assignment, layout).value();
}

inline Tensor pattern_layer(const Tensor& x, const LayerParams& params, FusionPattern pattern,
                            const ModalityLayout& layout) {
  Tape tape;
  return pattern_layer(tape.constant(x), bind(tape, params), pattern, layout).value();
}

inline std::pair<std::vector<Tensor>, BottleneckState> bottleneck_layer(
    const std::vector<Tensor>& xs, const BottleneckState& state, const LayerParams& params) {
  Tape tape;
  std::vector<Var> in;
  for (const auto& x : xs) in.push_back(tape.constant(x));
  auto r = bottleneck_layer(in, tape.constant(state.tokens), bind(tape, params));
  std::vector<Tensor> ys;
  for (const Var& v : r.modalities) ys.push_back(v.value());
  return {std::move(ys), BottleneckState{r.bottleneck.value()}};
}

}  // namespace locomt
