// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over rank-2 tensors. A Tape records
// every intermediate value together with a closure that pushes the output
// gradient back to its inputs.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "locomt/numerics.hpp"

namespace locomt {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, nullptr, {}); }

  /// Leaf whose gradient is added into `*sink` by backward(); a null sink
  /// makes it a constant.
  Var parameter(Tensor value, Tensor* sink) {
    return push(std::move(value), sink != nullptr, sink, {});
  }

  /// Intermediate produced from `inputs`; `fn` runs only when some input
  /// needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> inputs, Backward fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_[v.id].needs_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : Backward{});
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the gradient of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.empty()) n.grad = g;
    else n.grad += g;
  }

  /// Reverse sweep from `root` seeded with d(objective)/d(root) = `seed`.
  void backward(Var root, const Tensor& seed) {
    value(root).require_same_shape(seed, "backward seed");
    accumulate(root, seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.sink) {
        if (n.sink->empty()) *n.sink = n.grad;
        else *n.sink += n.grad;
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Tensor* sink = nullptr;
    Backward backward;
  };

  Var push(Tensor value, bool needs, Tensor* sink, Backward fn) {
    nodes_.push_back(Node{std::move(value), {}, needs, sink, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace ops {

inline Var matmul(Var a, Var b, FlopKind kind = FlopKind::other) {
  Tape& t = *a.tape;
  return t.record(locomt::matmul(a.value(), b.value(), kind), {a, b},
                  [a, b](Tape& tp, const Tensor& g) {
                    if (tp.needs_grad(a)) tp.accumulate(a, detail::gemm(g, false, b.value(), true));
                    if (tp.needs_grad(b)) tp.accumulate(b, detail::gemm(a.value(), true, g, false));
                  });
}

inline Var add(Var a, Var b) {
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

/// x + bias, with a 1xN bias broadcast over rows.
inline Var add_row(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_row: bias " + shape_string(bv.shape()) + " for input " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  return x.tape->record(std::move(out), {x, bias}, [x, bias](Tape& tp, const Tensor& g) {
    tp.accumulate(x, g);
    if (tp.needs_grad(bias)) {
      Tensor gb({1, g.cols()});
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
      tp.accumulate(bias, gb);
    }
  });
}

inline Var scale(Var x, double s) {
  return x.tape->record(x.value() * s, {x},
                        [x, s](Tape& tp, const Tensor& g) { tp.accumulate(x, g * s); });
}

/// Exact GELU: x * Phi(x).
inline Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  return x.tape->record(std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor dx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * xv[i] * xv[i]) * std::numbers::inv_sqrtpi /
                         std::numbers::sqrt2;
      dx[i] = g[i] * (cdf + xv[i] * pdf);
    }
    tp.accumulate(x, dx);
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer normalization with 1xN gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t n = xv.cols();
  if (gain.value().size() != n || bias.value().size() != n)
    throw DimensionError("layer_norm: gain/bias width does not match " + shape_string(xv.shape()));
  Tensor normed(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += xv(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) normed(r, c) = (xv(r, c) - mean) * inv_std[r];
  }
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = gv[c] * normed(r, c) + bv[c];

  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, normed = std::move(normed), inv_std = std::move(inv_std)](
          Tape& tp, const Tensor& g) {
        const std::size_t rows = g.rows();
        const std::size_t n = g.cols();
        const Tensor& gv = gain.value();
        if (tp.needs_grad(gain) || tp.needs_grad(bias)) {
          Tensor dg({1, n}), db({1, n});
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) {
              dg[c] += g(r, c) * normed(r, c);
              db[c] += g(r, c);
            }
          tp.accumulate(gain, dg);
          tp.accumulate(bias, db);
        }
        if (tp.needs_grad(x)) {
          Tensor dx({rows, n});
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dn = 0.0, mean_dn_n = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double dn = g(r, c) * gv[c];
              mean_dn += dn;
              mean_dn_n += dn * normed(r, c);
            }
            mean_dn /= static_cast<double>(n);
            mean_dn_n /= static_cast<double>(n);
            for (std::size_t c = 0; c < n; ++c) {
              const double dn = g(r, c) * gv[c];
              dx(r, c) = inv_std[r] * (dn - mean_dn - normed(r, c) * mean_dn_n);
            }
          }
          tp.accumulate(x, dx);
        }
      });
}

/// softmax(scale * q k^T restricted to mask) v. Score and mix products are
/// evaluated only on allowed pairs and counted as 2*d_k and 2*d_v FLOPs per
/// pair. Rows with no allowed key produce zeros.
inline Var masked_attention(Var q, Var k, Var v, const Mask& mask, double scale) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t nq = qv.rows(), nk = kv.rows(), dk = qv.cols(), dv = vv.cols();
  if (kv.cols() != dk || vv.rows() != nk || mask.rows() != nq || mask.cols() != nk) {
    throw DimensionError("masked_attention: q " + shape_string(qv.shape()) + ", k " +
                         shape_string(kv.shape()) + ", v " + shape_string(vv.shape()) +
                         ", mask " + std::to_string(mask.rows()) + "x" +
                         std::to_string(mask.cols()));
  }
  Tensor scores({nq, nk});
  std::uint64_t pairs = 0;
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < nk; ++j) {
      if (!mask(i, j)) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < dk; ++c) s += qv(i, c) * kv(j, c);
      scores(i, j) = s * scale;
      ++pairs;
    }
  count_flops(FlopKind::score, 2 * pairs * dk);
  Tensor probs = softmax_rows(scores, mask);
  Tensor out({nq, dv});
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < nk; ++j) {
      if (!mask(i, j)) continue;
      const double p = probs(i, j);
      for (std::size_t c = 0; c < dv; ++c) out(i, c) += p * vv(j, c);
    }
  count_flops(FlopKind::mix, 2 * pairs * dv);

  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, mask, scale, probs = std::move(probs)](Tape& tp, const Tensor& g) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        const std::size_t nq = qv.rows(), nk = kv.rows(), dk = qv.cols(), dv = vv.cols();
        Tensor dq({nq, dk}), dkey({nk, dk}), dval({nk, dv});
        std::vector<double> dp(nk);
        for (std::size_t i = 0; i < nq; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < nk; ++j) {
            dp[j] = 0.0;
            if (!mask(i, j)) continue;
            const double p = probs(i, j);
            double s = 0.0;
            for (std::size_t c = 0; c < dv; ++c) {
              s += g(i, c) * vv(j, c);
              dval(j, c) += p * g(i, c);
            }
            dp[j] = s;
            dot += p * s;
          }
          for (std::size_t j = 0; j < nk; ++j) {
            if (!mask(i, j)) continue;
            const double ds = probs(i, j) * (dp[j] - dot) * scale;
            for (std::size_t c = 0; c < dk; ++c) {
              dq(i, c) += ds * kv(j, c);
              dkey(j, c) += ds * qv(i, c);
            }
          }
        }
        tp.accumulate(q, dq);
        tp.accumulate(k, dkey);
        tp.accumulate(v, dval);
      });
}

/// Column-wise concatenation [a_1 | a_2 | ...].
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.value().cols();
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, off + c) = pv(r, c);
    off += pv.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [ins](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : ins) {
      const std::size_t w = p.value().cols();
      if (tp.needs_grad(p)) {
        Tensor gp({g.rows(), w});
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gp(r, c) = g(r, off + c);
        tp.accumulate(p, gp);
      }
      off += w;
    }
  });
}

/// Row-wise concatenation [a_1; a_2; ...].
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape->record(Tensor({rows, cols}, std::move(data)), parts,
                               [ins](Tape& tp, const Tensor& g) {
                                 std::size_t off = 0;
                                 for (const Var& p : ins) {
                                   const std::size_t h = p.value().rows();
                                   if (tp.needs_grad(p)) {
                                     const auto cols = g.cols();
                                     std::vector<double> d(g.data().begin() + off * cols,
                                                           g.data().begin() + (off + h) * cols);
                                     tp.accumulate(p, Tensor({h, cols}, std::move(d)));
                                   }
                                   off += h;
                                 }
                               });
}

/// Rows [begin, end).
inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (begin >= end || end > xv.rows())
    throw DimensionError("slice_rows: bad range for " + shape_string(xv.shape()));
  const std::size_t cols = xv.cols();
  std::vector<double> d(xv.data().begin() + begin * cols, xv.data().begin() + end * cols);
  return x.tape->record(Tensor({end - begin, cols}, std::move(d)), {x},
                        [x, begin](Tape& tp, const Tensor& g) {
                          Tensor full(x.value().shape());
                          for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t c = 0; c < g.cols(); ++c) full(begin + r, c) = g(r, c);
                          tp.accumulate(x, full);
                        });
}

/// Element-wise arithmetic mean of equally shaped inputs.
inline Var mean_of(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("mean_of: nothing to average");
  Tensor out = parts[0].value();
  for (std::size_t i = 1; i < parts.size(); ++i) out += parts[i].value();
  const double w = 1.0 / static_cast<double>(parts.size());
  out *= w;
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [ins, w](Tape& tp, const Tensor& g) {
    const Tensor gw = g * w;
    for (const Var& p : ins) tp.accumulate(p, gw);
  });
}

/// Mean softmax cross-entropy of logits [N x C] against `labels`; returns a
/// 1x1 value.
inline Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& lv = logits.value();
  if (labels.size() != lv.rows()) throw DimensionError("cross_entropy: label count mismatch");
  Tensor probs(lv.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (labels[r] >= lv.cols()) throw std::out_of_range("cross_entropy: label out of range");
    double mx = lv(r, 0);
    for (std::size_t c = 1; c < lv.cols(); ++c) mx = std::max(mx, lv(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < lv.cols(); ++c) sum += std::exp(lv(r, c) - mx);
    for (std::size_t c = 0; c < lv.cols(); ++c) probs(r, c) = std::exp(lv(r, c) - mx) / sum;
    loss += (mx + std::log(sum)) - lv(r, labels[r]);
  }
  const double n = static_cast<double>(lv.rows());
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.tape->record(Tensor({1, 1}, {loss / n}), {logits},
                             [logits, lab, n, probs = std::move(probs)](Tape& tp, const Tensor& g) {
                               Tensor d = probs;
                               for (std::size_t r = 0; r < d.rows(); ++r) d(r, lab[r]) -= 1.0;
                               d *= g[0] / n;
                               tp.accumulate(logits, d);
                             });
}

}  // namespace ops
}  // namespace locomt
