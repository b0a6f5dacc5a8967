// SPDX-License-Identifier: Apache-2.0
//
// Cross-entropy loss, model gradients, momentum SGD with a warm-up + cosine
// schedule, finite-difference gradient checking and the toy training loop.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "locomt/model.hpp"
#include "locomt/numerics.hpp"
#include "locomt/tape.hpp"

namespace locomt {

/// Mean cross-entropy of logits [N x C]; writes d(loss)/d(logits) into
/// `grad` when given.
inline double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels,
                            Tensor* grad = nullptr) {
  Tape tape;
  Var l = tape.parameter(logits, grad);
  if (grad) *grad = Tensor{};
  Var loss = ops::cross_entropy(l, labels);
  if (grad) tape.backward(loss, Tensor({1, 1}, 1.0));
  return loss.value()[0];
}

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
}

inline std::size_t argmax_row(const Tensor& t, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < t.cols(); ++c)
    if (t(r, c) > t(r, best)) best = c;
  return best;
}

}  // namespace detail

/// Parameter gradients of one sample given d(objective)/d(logits).
inline ModelParams gradients_from_logits(const ModelConfig& cfg, const ModelParams& params,
                                         const Sample& sample, const Tensor& dlogits) {
  ModelParams grads = params.zeros();
  Tape tape;
  const auto trace = trace_sample(tape, cfg, params, &grads, sample, layer_masks(cfg));
  tape.backward(trace.logits, dlogits);
  return grads;
}

struct BatchGradients {
  double loss = 0.0;     // mean cross-entropy
  ModelParams grads;     // gradient of the mean loss
  Tensor logits;         // batch x classes
};

/// Exact reverse-mode gradients of the mean cross-entropy over `batch`.
/// Per-sample gradients are reduced in sample order, so the result does not
/// depend on `threads`.
inline BatchGradients compute_gradients(const ModelConfig& cfg, const ModelParams& params,
                                        std::span<const Sample> batch, std::size_t threads = 1) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("compute_gradients: empty batch");
  const auto masks = layer_masks(cfg);
  std::vector<ModelParams> per_sample(batch.size());
  std::vector<double> losses(batch.size());
  BatchGradients out;
  out.logits = Tensor({batch.size(), cfg.classes});
  detail::parallel_for(batch.size(), threads, [&](std::size_t i) {
    ModelParams g = params.zeros();
    Tape tape;
    const auto trace = trace_sample(tape, cfg, params, &g, batch[i], masks);
    const std::size_t label = batch[i].label;
    Var loss = ops::cross_entropy(trace.logits, std::span<const std::size_t>(&label, 1));
    tape.backward(loss, Tensor({1, 1}, 1.0));
    losses[i] = loss.value()[0];
    for (std::size_t c = 0; c < cfg.classes; ++c) out.logits(i, c) = trace.logits.value()[c];
    per_sample[i] = std::move(g);
  });
  out.grads = std::move(per_sample[0]);
  out.loss = losses[0];
  for (std::size_t i = 1; i < batch.size(); ++i) {
    out.grads += per_sample[i];
    out.loss += losses[i];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.grads *= inv;
  out.loss *= inv;
  return out;
}

/// Mean cross-entropy without gradients.
inline double batch_loss(const ModelConfig& cfg, const ModelParams& params,
                         std::span<const Sample> batch) {
  const Tensor logits = forward(cfg, params, batch).logits;
  std::vector<std::size_t> labels;
  for (const auto& s : batch) labels.push_back(s.label);
  return cross_entropy(logits, labels);
}

// ---------------------------------------------------------------------------
// Optimizer

/// Linear ramp 0 -> base over `warmup` steps, then cosine decay to 0 at `total`.
struct CosineSchedule {
  double base_lr = 0.05;
  std::size_t warmup = 0;
  std::size_t total = 1;

  double at(std::size_t step) const {
    if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total) return 0.0;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

struct OptimizerState {
  ModelParams velocity;
  std::size_t step = 0;
  CosineSchedule schedule;
  double momentum = 0.9;

  static OptimizerState create(const ModelParams& params, CosineSchedule schedule,
                               double momentum = 0.9) {
    return {params.zeros(), 0, schedule, momentum};
  }
};

/// v <- momentum * v + g;  p <- p - lr(t) * v;  t <- t + 1. Returns lr(t).
inline double sgd_step(OptimizerState& state, ModelParams& params, const ModelParams& grads) {
  const double lr = state.schedule.at(state.step);
  std::vector<const Tensor*> g;
  grads.visit([&](const std::string&, const Tensor& t) { g.push_back(&t); });
  std::vector<Tensor*> v;
  state.velocity.visit([&](const std::string&, Tensor& t) { v.push_back(&t); });
  std::size_t i = 0;
  params.visit([&](const std::string&, Tensor& p) {
    Tensor& vel = *v[i];
    const Tensor& grad = *g[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      vel[k] = state.momentum * vel[k] + grad[k];
      p[k] -= lr * vel[k];
    }
    ++i;
  });
  ++state.step;
  return lr;
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`
/// (disabled when `max_norm` is 0). Returns the norm before rescaling.
inline double clip_gradients(ModelParams& grads, double max_norm) {
  double sq = 0.0;
  grads.visit([&](const std::string&, const Tensor& t) {
    for (double v : t.data()) sq += v * v;
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    grads.visit([&](const std::string&, Tensor& t) {
      for (std::size_t k = 0; k < t.size(); ++k) t[k] *= scale;
    });
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double threshold = 1e-4;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() < threshold; }
};

struct GradCheckOptions {
  double epsilon = 1e-4;
  double threshold = 1e-4;
  /// Denominator floor for the relative error: entries where both gradients
  /// are below it are compared on an absolute scale of floor * threshold.
  double floor = 1e-6;
  /// Negative control: perturb one analytic gradient entry before comparing.
  bool corrupt = false;
};

/// Compares reverse-mode gradients of the mean loss against central
/// differences for every scalar parameter. The fourth-order stencil at step
/// epsilon keeps truncation error well below the threshold for small entries.
inline GradCheckReport gradient_check(const ModelConfig& cfg, const ModelParams& params,
                                      std::span<const Sample> batch,
                                      const GradCheckOptions& opt = {}) {
  ModelParams analytic = compute_gradients(cfg, params, batch).grads;
  if (opt.corrupt) {
    analytic.visit([done = false](const std::string&, Tensor& t) mutable {
      if (!done) t[0] += 1e-2 * (1.0 + std::abs(t[0]));
      done = true;
    });
  }
  std::vector<const Tensor*> a;
  analytic.visit([&](const std::string&, const Tensor& t) { a.push_back(&t); });

  GradCheckReport report;
  report.threshold = opt.threshold;
  ModelParams probe = params;
  std::size_t idx = 0;
  probe.visit([&](const std::string& name, Tensor& t) {
    GradCheckEntry e{name};
    const Tensor& ga = *a[idx++];
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double saved = t[k];
      auto loss_at = [&](double offset) {
        t[k] = saved + offset;
        return batch_loss(cfg, probe, batch);
      };
      const double h = opt.epsilon;
      const double near = loss_at(h) - loss_at(-h);
      const double far = loss_at(2 * h) - loss_at(-2 * h);
      t[k] = saved;
      const double numeric = (8.0 * near - far) / (12.0 * h);
      const double den = std::max({std::abs(ga[k]), std::abs(numeric), opt.floor});
      const double rel = std::abs(ga[k] - numeric) / den;
      if (rel >= e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_index = k;
        e.analytic = ga[k];
        e.numeric = numeric;
      }
    }
    report.entries.push_back(std::move(e));
  });
  return report;
}

// ---------------------------------------------------------------------------
// Toy training loop

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double base_lr = 0.05;
  double warmup_fraction = 0.1;
  double momentum = 0.9;
  double init_std = 0.02;
  double clip_norm = 1.0;  // global gradient-norm cap, 0 disables
  std::size_t threads = 1;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  ModelParams params;

  const EpochMetrics& last(std::string_view split) const {
    for (auto it = metrics.rbegin(); it != metrics.rend(); ++it)
      if (it->split == split) return *it;
    throw std::out_of_range("no metrics for split " + std::string(split));
  }
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline Evaluation evaluate(const ModelConfig& cfg, const ModelParams& params,
                           std::span<const Sample> data) {
  if (data.empty()) return {};
  const Tensor logits = forward(cfg, params, data).logits;
  std::vector<std::size_t> labels;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    labels.push_back(data[i].label);
    if (detail::argmax_row(logits, i) == data[i].label) ++correct;
  }
  return {cross_entropy(logits, labels),
          static_cast<double>(correct) / static_cast<double>(data.size())};
}

inline std::string metrics_csv(std::span<const EpochMetrics> rows) {
  std::string out = "epoch,split,loss,accuracy,lr\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.12f,%.6f,%.12f\n", r.epoch, r.split.c_str(), r.loss,
                  r.accuracy, r.lr);
    out += buf;
  }
  return out;
}

/// Trains from a seeded initialization; per epoch records the running train
/// loss/accuracy and the held-out loss/accuracy. Deterministic in `seed`.
inline TrainResult train_toy(const ModelConfig& cfg, const TrainOptions& opt,
                             std::span<const Sample> train, std::span<const Sample> test,
                             std::uint64_t seed) {
  cfg.validate();
  if (train.empty() || opt.batch == 0) throw std::invalid_argument("train_toy: no training data");
  Rng init_rng = Rng::derive(seed, 1);
  Rng shuffle_rng = Rng::derive(seed, 2);
  TrainResult result;
  result.params = ModelParams::init(cfg, init_rng, opt.init_std);

  const std::size_t steps_per_epoch = (train.size() + opt.batch - 1) / opt.batch;
  CosineSchedule schedule;
  schedule.base_lr = opt.base_lr;
  schedule.total = std::max<std::size_t>(opt.epochs * steps_per_epoch, 1);
  schedule.warmup = static_cast<std::size_t>(
      std::llround(opt.warmup_fraction * static_cast<double>(schedule.total)));
  auto state = OptimizerState::create(result.params, schedule, opt.momentum);

  std::vector<std::size_t> order(train.size());
  std::vector<Sample> batch;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i-- > 1;)
      std::swap(order[i], order[static_cast<std::size_t>(
                              shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + opt.batch); ++i)
        batch.push_back(train[order[i]]);
      auto g = compute_gradients(cfg, result.params, batch, opt.threads);
      clip_gradients(g.grads, opt.clip_norm);
      loss_sum += g.loss * static_cast<double>(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i)
        if (detail::argmax_row(g.logits, i) == batch[i].label) ++correct;
      lr = sgd_step(state, result.params, g.grads);
    }
    const double n = static_cast<double>(train.size());
    result.metrics.push_back({epoch, "train", loss_sum / n, static_cast<double>(correct) / n, lr});
    const Evaluation ev = evaluate(cfg, result.params, test);
    result.metrics.push_back({epoch, "test", ev.loss, ev.accuracy, lr});
  }
  return result;
}

}  // namespace locomt
