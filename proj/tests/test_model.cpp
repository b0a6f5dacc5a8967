// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "locomt/model.hpp"
#include "oracles.hpp"

using namespace locomt;

namespace {

ModelConfig make_config(FusionPattern pattern, std::size_t fusion,
                        std::vector<ViewFrequency> freqs = {}) {
  ModelConfig c;
  c.lengths = {3, 4};
  c.feature_dims = {2, 5};
  c.d = 8;
  c.heads = 2;
  c.layers = 2;
  c.fusion_layers = fusion;
  c.ffn_dim = 32;
  c.pattern = pattern;
  c.bottleneck_tokens = 2;
  if (pattern == FusionPattern::locomt) {
    if (freqs.empty()) freqs.assign(fusion, ViewFrequency{{1, 1}});
    for (const auto& f : freqs) c.plan.push_back(ViewAssignment::from_frequency(f, 2));
  }
  return c;
}

Sample random_sample(const ModelConfig& c, Rng& rng, std::size_t label = 0) {
  Sample s;
  for (std::size_t k = 0; k < c.modalities(); ++k)
    s.inputs.push_back(rand_normal(rng, {c.lengths[k], c.feature_dims[k]}));
  s.label = label;
  return s;
}

}  // namespace

TEST(Embed, PackedRowCount) {
  ModelConfig c = make_config(FusionPattern::self, 0);
  c.lengths = {3, 5};
  Rng rng(1);
  const ModelParams p = ModelParams::init(c, rng);
  EXPECT_EQ(embed(c, p, random_sample(c, rng)).rows(), 10u);
  EXPECT_EQ(c.layout().total(), 10u);
}

TEST(Embed, ZeroInputsLeaveClsAndPositions) {
  const ModelConfig c = make_config(FusionPattern::self, 0);
  Rng rng(2);
  ModelParams p = ModelParams::init(c, rng, 0.5);
  for (auto& m : p.modalities) m.embed.fill(0.0);
  Sample s;
  for (std::size_t k = 0; k < 2; ++k) s.inputs.emplace_back(Shape{c.lengths[k], c.feature_dims[k]});
  const Tensor e = embed(c, p, s);
  const ModalityLayout layout = c.layout();
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t t = 0; t < layout.length(k); ++t)
      for (std::size_t j = 0; j < c.d; ++j) {
        const double want = p.modalities[k].pos(t, j) + (t == 0 ? p.modalities[k].cls[j] : 0.0);
        EXPECT_EQ(e(layout.offset(k) + t, j), want);
      }
}

TEST(Embed, TokenPermutationPermutesOnlyNonPositionalPart) {
  const ModelConfig c = make_config(FusionPattern::self, 0);
  Rng rng(3);
  const ModelParams p = ModelParams::init(c, rng, 0.5);
  const Sample s = random_sample(c, rng);
  Sample perm = s;
  const std::vector<std::size_t> order{2, 0, 3, 1};  // modality 1 has 4 tokens
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t f = 0; f < 5; ++f) perm.inputs[1](t, f) = s.inputs[1](order[t], f);
  const Tensor a = embed(c, p, s), b = embed(c, p, perm);
  const std::size_t off = c.layout().offset(1);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < c.d; ++j) {
      const double pa = a(off + 1 + order[t], j) - p.modalities[1].pos(1 + order[t], j);
      const double pb = b(off + 1 + t, j) - p.modalities[1].pos(1 + t, j);
      EXPECT_NEAR(pa, pb, 1e-14);
    }
  EXPECT_EQ(a.row(0)[0], b.row(0)[0]);
}

TEST(Embed, ShapeMismatchThrows) {
  const ModelConfig c = make_config(FusionPattern::self, 0);
  Rng rng(4);
  const ModelParams p = ModelParams::init(c, rng);
  Sample s = random_sample(c, rng);
  s.inputs[1] = Tensor({4, 4});
  EXPECT_THROW(embed(c, p, s), DimensionError);
  s.inputs.pop_back();
  EXPECT_THROW(embed(c, p, s), DimensionError);
}

TEST(Forward, AllSelfLocomtEqualsSelfPattern) {
  Rng rng(5);
  const ModelConfig loc = make_config(FusionPattern::locomt, 2, {{{2, 0}}, {{2, 0}}});
  ModelConfig self = make_config(FusionPattern::self, 2);
  const ModelParams p = ModelParams::init(loc, rng, 0.3);
  std::vector<Sample> batch{random_sample(loc, rng), random_sample(loc, rng)};
  EXPECT_LE(oracle::rel_error(forward(loc, p, batch).logits, forward(self, p, batch).logits),
            1e-10);
}

TEST(Forward, MatchesOracleStack) {
  // Unimodal self layer followed by a mixed fusion layer, against the dense
  // oracle applied to the embedded sequence.
  Rng rng(6);
  const ModelConfig c = make_config(FusionPattern::locomt, 1);
  const ModelParams p = ModelParams::init(c, rng, 0.3);
  const Sample s = random_sample(c, rng);
  const std::vector<std::size_t> lengths = c.layout().lengths();
  Tensor x = embed(c, p, s);
  x = oracle::encoder_layer(x, p.layers[0], ViewAssignment::uniform(AttentionView::self_view(), 2),
                            lengths);
  x = oracle::encoder_layer(x, p.layers[1], c.plan[0], lengths);
  Tensor pooled({1, c.d});
  for (std::size_t j = 0; j < c.d; ++j) pooled[j] = 0.5 * (x(0, j) + x(lengths[0], j));
  Tensor logits = oracle::mm(pooled, p.head_w);
  for (std::size_t k = 0; k < c.classes; ++k) logits[k] += p.head_b[k];
  const std::vector<Sample> one{s};
  EXPECT_LE(oracle::rel_error(forward(c, p, one).logits, logits), 1e-10);
}

TEST(Forward, BatchOrderInvariance) {
  Rng rng(7);
  for (FusionPattern pat : {FusionPattern::locomt, FusionPattern::multi, FusionPattern::bottleneck}) {
    const ModelConfig c = make_config(pat, 1);
    const ModelParams p = ModelParams::init(c, rng, 0.3);
    std::vector<Sample> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(random_sample(c, rng));
    const Tensor a = forward(c, p, batch).logits;
    std::vector<Sample> rev(batch.rbegin(), batch.rend());
    const Tensor b = forward(c, p, rev).logits;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < c.classes; ++k) EXPECT_NEAR(a(i, k), b(3 - i, k), 1e-12);
  }
}

TEST(Forward, LateFusionHasOnlySelfMasksAndMultiAllIsDense) {
  const ModelConfig late = make_config(FusionPattern::multi, 0);
  const auto masks = layer_masks(late);
  ASSERT_EQ(masks.size(), 2u);
  for (const auto& layer : masks)
    for (const auto& m : layer) EXPECT_EQ(m.count(), 4u * 4 + 5 * 5);
  const ModelConfig all = make_config(FusionPattern::multi, 2);
  for (const auto& layer : layer_masks(all))
    for (const auto& m : layer) EXPECT_EQ(m.count(), 9u * 9);
}

TEST(Forward, ModalitiesStayIndependentWithoutCrossHeads) {
  Rng rng(8);
  const ModelConfig c = make_config(FusionPattern::locomt, 1, {{{2, 0}}});
  const ModelParams p = ModelParams::init(c, rng, 0.3);
  const Sample s = random_sample(c, rng);
  Sample t = s;
  for (double& v : t.inputs[1].data()) v += rng.normal();
  const auto a = cls_outputs(c, p, s), b = cls_outputs(c, p, t);
  EXPECT_LE(max_abs_diff(a[0], b[0]), 1e-12);
  EXPECT_GT(max_abs_diff(a[1], b[1]), 1e-6);
}

TEST(Forward, CrossHeadCouplesModalities) {
  Rng rng(9);
  for (FusionPattern pat : {FusionPattern::locomt, FusionPattern::cross, FusionPattern::multi,
                            FusionPattern::bottleneck}) {
    // Bottleneck tokens carry information across only from the second fusion layer on.
    const ModelConfig c = make_config(pat, 2);
    const ModelParams p = ModelParams::init(c, rng, 0.3);
    const Sample s = random_sample(c, rng);
    Sample t = s;
    for (double& v : t.inputs[1].data()) v += rng.normal();
    EXPECT_GT(max_abs_diff(cls_outputs(c, p, s)[0], cls_outputs(c, p, t)[0]), 1e-8)
        << pattern_name(pat);
  }
}

TEST(Params, CensusMatchesTensorSizes) {
  for (FusionPattern pat : {FusionPattern::locomt, FusionPattern::bottleneck, FusionPattern::multi}) {
    const ModelConfig c = make_config(pat, 1);
    Rng rng(10);
    EXPECT_EQ(count_params(c), ModelParams::init(c, rng).size());
  }
  ModelConfig c = make_config(FusionPattern::multi, 1);
  const std::size_t base = count_params(c);
  c.classes = 5;
  EXPECT_EQ(count_params(c), base + 3 * (c.d + 1));
  c.classes = 2;
  c.layers = 3;
  EXPECT_EQ(count_params(c), base + LayerParams::census(c.d, c.heads, c.ffn_dim));
}

TEST(Params, ValidateRejectsBadConfigs) {
  ModelConfig c = make_config(FusionPattern::locomt, 1);
  c.plan.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = make_config(FusionPattern::multi, 3);
  EXPECT_THROW(c.validate(), ConfigError);
  c = make_config(FusionPattern::bottleneck, 1);
  c.bottleneck_tokens = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = make_config(FusionPattern::self, 1);
  c.d = 7;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const ModelConfig c = make_config(FusionPattern::bottleneck, 1);
  Rng rng(11);
  const ModelParams p = ModelParams::init(c, rng);
  const std::string bytes = encode_checkpoint(p);
  ModelParams q = p.zeros();
  decode_checkpoint(bytes, q);
  EXPECT_EQ(q, p);
  EXPECT_EQ(bytes.substr(0, 8), "LCMTCKPT");
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3), q), io::FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad, q), io::FormatError);
  ModelParams other = ModelParams::init(make_config(FusionPattern::multi, 1), rng);
  EXPECT_THROW(decode_checkpoint(bytes, other), io::FormatError);
}
