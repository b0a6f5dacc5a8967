// SPDX-License-Identifier: Apache-2.0
//
// Toy multimodal classifier: per-modality linear embedding with a prepended
// CLS token, L - L_f unimodal layers, L_f fusion layers, and a linear head on
// the mean of the modality CLS outputs.

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "locomt/attention.hpp"
#include "locomt/io.hpp"
#include "locomt/numerics.hpp"
#include "locomt/tape.hpp"
#include "locomt/viewconfig.hpp"

namespace locomt {

struct ModelConfig {
  std::vector<std::size_t> lengths;       // tokens per modality, CLS excluded
  std::vector<std::size_t> feature_dims;  // raw feature width per modality
  std::size_t d = 16;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t fusion_layers = 1;
  std::size_t ffn_dim = 64;
  std::size_t classes = 2;
  FusionPattern pattern = FusionPattern::locomt;
  std::vector<ViewAssignment> plan;  // one per fusion layer, locomt only
  std::size_t bottleneck_tokens = 0;

  std::size_t modalities() const { return lengths.size(); }
  std::size_t unimodal_layers() const { return layers - fusion_layers; }

  /// Packed layout including one CLS token per modality.
  ModalityLayout layout() const { return ModalityLayout(lengths).grown(1); }

  bool uses_bottleneck() const {
    return pattern == FusionPattern::bottleneck && fusion_layers > 0;
  }

  // Cost queries need no per-head split, so `split_heads` can be relaxed for them.
  void validate(bool split_heads = true) const {
    const std::size_t m = modalities();
    if (m == 0) throw ConfigError("model needs at least one modality");
    if (feature_dims.size() != m)
      throw ConfigError("feature_dims has " + std::to_string(feature_dims.size()) +
                        " entries for " + std::to_string(m) + " modalities");
    for (std::size_t k = 0; k < m; ++k)
      if (lengths[k] == 0 || feature_dims[k] == 0)
        throw ConfigError("modality lengths and feature dims must be positive");
    if (d == 0 || heads == 0 || (split_heads && d % heads != 0))
      throw ConfigError("d=" + std::to_string(d) + " must be a positive multiple of heads=" +
                        std::to_string(heads));
    if (layers == 0) throw ConfigError("model needs at least one layer");
    if (fusion_layers > layers)
      throw ConfigError("fusion_layers=" + std::to_string(fusion_layers) + " exceeds layers=" +
                        std::to_string(layers));
    if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
    if (classes < 2) throw ConfigError("need at least two classes");
    if (pattern == FusionPattern::locomt) {
      if (plan.size() != fusion_layers)
        throw ConfigError("locomt plan has " + std::to_string(plan.size()) +
                          " layer assignments, expected " + std::to_string(fusion_layers));
      for (const auto& a : plan) {
        if (a.heads() != heads)
          throw ConfigError("plan assignment has " + std::to_string(a.heads()) +
                            " heads, expected " + std::to_string(heads));
        for (const auto& v : a.views)
          if (!v.is_self() && v.second >= m)
            throw ConfigError("view " + v.name() + " refers to a missing modality");
      }
    }
    if (pattern == FusionPattern::cross && fusion_layers > 0 && m < 2)
      throw ConfigError("cross pattern needs at least two modalities");
    if (uses_bottleneck() && bottleneck_tokens == 0)
      throw ConfigError("bottleneck pattern needs bottleneck_tokens >= 1");
  }
};

/// One example: a [L_k x feature_dims[k]] matrix per modality and a label.
struct Sample {
  std::vector<Tensor> inputs;
  std::size_t label = 0;
};

struct ModalityParams {
  Tensor embed;  // feature_dim x d
  Tensor cls;    // 1 x d
  Tensor pos;    // (L_k + 1) x d
};

struct ModelParams {
  std::vector<ModalityParams> modalities;
  std::vector<LayerParams> layers;
  Tensor bottleneck;  // B x d, empty unless bottleneck fusion is used
  Tensor head_w;      // d x classes
  Tensor head_b;      // 1 x classes

  static ModelParams init(const ModelConfig& cfg, Rng& rng, double stddev = 0.02) {
    cfg.validate();
    ModelParams p;
    for (std::size_t k = 0; k < cfg.modalities(); ++k) {
      p.modalities.push_back({rand_normal(rng, {cfg.feature_dims[k], cfg.d}, stddev),
                              rand_normal(rng, {1, cfg.d}, stddev),
                              rand_normal(rng, {cfg.lengths[k] + 1, cfg.d}, stddev)});
    }
    for (std::size_t l = 0; l < cfg.layers; ++l)
      p.layers.push_back(LayerParams::init(cfg.d, cfg.heads, cfg.ffn_dim, rng, stddev));
    if (cfg.uses_bottleneck())
      p.bottleneck = BottleneckState::init(cfg.bottleneck_tokens, cfg.d, rng, stddev).tokens;
    p.head_w = rand_normal(rng, {cfg.d, cfg.classes}, stddev);
    p.head_b = Tensor({1, cfg.classes});
    return p;
  }

  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

  /// Same structure, all zeros.
  ModelParams zeros() const {
    ModelParams z = *this;
    z.visit([](const std::string&, Tensor& t) { t.fill(0.0); });
    return z;
  }

  std::size_t size() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  ModelParams& operator+=(const ModelParams& o) {
    std::vector<const Tensor*> rhs;
    o.visit([&](const std::string&, const Tensor& t) { rhs.push_back(&t); });
    std::size_t i = 0;
    visit([&](const std::string&, Tensor& t) { t += *rhs[i++]; });
    return *this;
  }

  ModelParams& operator*=(double s) {
    visit([&](const std::string&, Tensor& t) { t *= s; });
    return *this;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    std::vector<std::pair<std::string, const Tensor*>> x, y;
    a.visit([&](const std::string& n, const Tensor& t) { x.emplace_back(n, &t); });
    b.visit([&](const std::string& n, const Tensor& t) { y.emplace_back(n, &t); });
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i].first != y[i].first || !(*x[i].second == *y[i].second)) return false;
    return true;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t k = 0; k < self.modalities.size(); ++k) {
      const std::string p = "modality" + std::to_string(k) + ".";
      f(p + "embed", self.modalities[k].embed);
      f(p + "cls", self.modalities[k].cls);
      f(p + "pos", self.modalities[k].pos);
    }
    for (std::size_t l = 0; l < self.layers.size(); ++l)
      LayerParams::visit(self.layers[l], "layer" + std::to_string(l) + ".", f);
    if (!self.bottleneck.empty()) f(std::string("bottleneck"), self.bottleneck);
    f(std::string("head.w"), self.head_w);
    f(std::string("head.b"), self.head_b);
  }
};

/// Scalar parameter count implied by a configuration.
inline std::size_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  std::size_t n = 0;
  for (std::size_t k = 0; k < cfg.modalities(); ++k)
    n += cfg.feature_dims[k] * cfg.d + cfg.d + (cfg.lengths[k] + 1) * cfg.d;
  n += cfg.layers * LayerParams::census(cfg.d, cfg.heads, cfg.ffn_dim);
  if (cfg.uses_bottleneck()) n += cfg.bottleneck_tokens * cfg.d;
  n += cfg.d * cfg.classes + cfg.classes;
  return n;
}

/// Per-layer head masks on the packed layout. Bottleneck fusion layers run on
/// per-modality sequences and get an empty entry.
inline std::vector<std::vector<Mask>> layer_masks(const ModelConfig& cfg) {
  const ModalityLayout layout = cfg.layout();
  std::vector<std::vector<Mask>> masks;
  const auto self_masks = pattern_masks(FusionPattern::self, cfg.heads, layout);
  for (std::size_t l = 0; l < cfg.unimodal_layers(); ++l) masks.push_back(self_masks);
  for (std::size_t f = 0; f < cfg.fusion_layers; ++f) {
    switch (cfg.pattern) {
      case FusionPattern::locomt: masks.push_back(mask_grid(cfg.plan[f], layout)); break;
      case FusionPattern::bottleneck: masks.emplace_back(); break;
      default: masks.push_back(pattern_masks(cfg.pattern, cfg.heads, layout)); break;
    }
  }
  return masks;
}

/// Values recorded for one sample.
struct SampleTrace {
  Var logits;            // 1 x classes
  std::vector<Var> cls;  // per-modality CLS output, 1 x d each
  Var packed_input;      // embedded sequence, total x d
};

/// Packed embedding: for modality k, [cls_k; X_k W_k] + pos_k, blocks stacked.
inline Var embed(Tape& tape, const ModelConfig& cfg, const ModelParams& params,
                 ModelParams* grads, const Sample& sample) {
  if (sample.inputs.size() != cfg.modalities())
    throw DimensionError("sample has " + std::to_string(sample.inputs.size()) +
                         " modalities, model expects " + std::to_string(cfg.modalities()));
  std::vector<Var> blocks;
  for (std::size_t k = 0; k < cfg.modalities(); ++k) {
    const Tensor& x = sample.inputs[k];
    if (x.rows() != cfg.lengths[k] || x.cols() != cfg.feature_dims[k])
      throw DimensionError("modality " + std::to_string(k) + " input " + shape_string(x.shape()) +
                           ", expected [" + std::to_string(cfg.lengths[k]) + "x" +
                           std::to_string(cfg.feature_dims[k]) + "]");
    const ModalityParams& mp = params.modalities[k];
    ModalityParams* mg = grads ? &grads->modalities[k] : nullptr;
    Var w = tape.parameter(mp.embed, mg ? &mg->embed : nullptr);
    Var cls = tape.parameter(mp.cls, mg ? &mg->cls : nullptr);
    Var pos = tape.parameter(mp.pos, mg ? &mg->pos : nullptr);
    Var tokens = ops::matmul(tape.constant(x), w, FlopKind::embed);
    std::vector<Var> parts{cls, tokens};
    blocks.push_back(ops::add(ops::concat_rows(parts), pos));
  }
  return ops::concat_rows(blocks);
}

inline Tensor embed(const ModelConfig& cfg, const ModelParams& params, const Sample& sample) {
  Tape tape;
  return embed(tape, cfg, params, nullptr, sample).value();
}

/// Records the forward pass of one sample. `masks` comes from layer_masks(cfg).
inline SampleTrace trace_sample(Tape& tape, const ModelConfig& cfg, const ModelParams& params,
                                ModelParams* grads, const Sample& sample,
                                const std::vector<std::vector<Mask>>& masks) {
  const ModalityLayout layout = cfg.layout();
  SampleTrace trace;
  Var x = embed(tape, cfg, params, grads, sample);
  trace.packed_input = x;

  const std::size_t first_fusion = cfg.unimodal_layers();
  std::vector<Var> streams;  // per-modality sequences during bottleneck fusion
  Var bottleneck{};
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerVars p = bind(tape, params.layers[l], grads ? &grads->layers[l] : nullptr);
    if (l >= first_fusion && cfg.pattern == FusionPattern::bottleneck) {
      if (l == first_fusion) {
        for (std::size_t k = 0; k < layout.modalities(); ++k)
          streams.push_back(
              ops::slice_rows(x, layout.offset(k), layout.offset(k) + layout.length(k)));
        bottleneck = tape.parameter(params.bottleneck, grads ? &grads->bottleneck : nullptr);
      }
      auto r = bottleneck_layer(streams, bottleneck, p);
      streams = std::move(r.modalities);
      bottleneck = r.bottleneck;
      if (l + 1 == cfg.layers) x = ops::concat_rows(streams);
    } else {
      x = transformer_block(x, p, masks[l]);
    }
  }

  for (std::size_t k = 0; k < layout.modalities(); ++k)
    trace.cls.push_back(ops::slice_rows(x, layout.offset(k), layout.offset(k) + 1));
  Var pooled = ops::mean_of(trace.cls);
  Var w = tape.parameter(params.head_w, grads ? &grads->head_w : nullptr);
  Var b = tape.parameter(params.head_b, grads ? &grads->head_b : nullptr);
  trace.logits = ops::add_row(ops::matmul(pooled, w, FlopKind::head), b);
  return trace;
}

struct ClassifierOutput {
  Tensor logits;                            // batch x classes
  std::vector<std::vector<Mask>> masks;     // per layer, per head
};

/// Logits for every sample in `batch`.
inline ClassifierOutput forward(const ModelConfig& cfg, const ModelParams& params,
                                std::span<const Sample> batch) {
  cfg.validate();
  ClassifierOutput out;
  out.masks = layer_masks(cfg);
  out.logits = Tensor({std::max<std::size_t>(batch.size(), 1), cfg.classes});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tape tape;
    const auto trace = trace_sample(tape, cfg, params, nullptr, batch[i], out.masks);
    const Tensor& l = trace.logits.value();
    for (std::size_t c = 0; c < cfg.classes; ++c) out.logits(i, c) = l[c];
  }
  return out;
}

/// CLS output rows per modality for one sample.
inline std::vector<Tensor> cls_outputs(const ModelConfig& cfg, const ModelParams& params,
                                       const Sample& sample) {
  Tape tape;
  const auto trace = trace_sample(tape, cfg, params, nullptr, sample, layer_masks(cfg));
  std::vector<Tensor> out;
  for (const Var& v : trace.cls) out.push_back(v.value());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers and floats little-endian):
//   "LCMTCKPT"  u32 version(=1)  u32 tensor_count
//   per tensor: u32 name_len, name bytes, u32 rank, u64 dims[rank], f64 data[prod(dims)]

inline constexpr std::string_view kCheckpointMagic = "LCMTCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const ModelParams& params) {
  std::string out(kCheckpointMagic);
  io::put_u32(out, kCheckpointVersion);
  std::uint32_t count = 0;
  params.visit([&](const std::string&, const Tensor&) { ++count; });
  io::put_u32(out, count);
  params.visit([&](const std::string& name, const Tensor& t) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) io::put_u64(out, dim);
    for (double v : t.data()) io::put_f64(out, v);
  });
  return out;
}

/// Fills `params` (already shaped for the target config) from checkpoint bytes.
inline void decode_checkpoint(std::string_view bytes, ModelParams& params) {
  io::Reader in(bytes);
  if (in.take(kCheckpointMagic.size()) != kCheckpointMagic)
    throw io::FormatError("not a checkpoint (bad magic)");
  if (const auto v = in.u32(); v != kCheckpointVersion)
    throw io::FormatError("unsupported checkpoint version " + std::to_string(v));
  std::map<std::string, Tensor> stored;
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(in.take(in.u32()));
    Shape shape(in.u32());
    for (auto& d : shape) d = in.u64();
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = in.f64();
    stored.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!in.done()) throw io::FormatError("trailing bytes after checkpoint");
  std::size_t used = 0;
  params.visit([&](const std::string& name, Tensor& t) {
    auto it = stored.find(name);
    if (it == stored.end()) throw io::FormatError("checkpoint lacks tensor " + name);
    if (it->second.shape() != t.shape())
      throw io::FormatError("tensor " + name + " has shape " + shape_string(it->second.shape()) +
                            ", expected " + shape_string(t.shape()));
    t = it->second;
    ++used;
  });
  if (used != stored.size()) throw io::FormatError("checkpoint has unexpected tensors");
}

}  // namespace locomt
