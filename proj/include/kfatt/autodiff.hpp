// Reverse-mode differentiation over a small fixed op set.
//
// A Tape records nodes in creation order, so parents always precede children
// and backward() is a single reverse sweep. Leaves are constants, owned
// variables, or parameters that live outside the tape; gradients of the
// latter are accumulated straight into caller-owned buffers, which lets many
// tapes (one per training example) feed one gradient vector without copies.
//
// The two fusion kernels are single composite nodes with hand-written
// backward passes rather than chains of primitive ops.

#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kfatt/attention.hpp"
#include "kfatt/numerics.hpp"

namespace kfatt::ad {

using NodeId = std::size_t;

enum class Op {
  constant,
  variable,
  parameter,
  identity,
  matmul,
  matmul_nt,
  add,
  add_row,
  sub,
  mul,
  scale,
  exp,
  log,
  sigmoid,
  softplus,
  relu,
  clamp,
  softmax_rows,
  concat_cols,
  concat_rows,
  gather_rows,
  slice_rows,
  segment_mean,
  sum,
  mean,
  kfatt_base,
  kfatt_freq,
  bce,
  bce_logits,
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, NodeId)>;

  struct Node {
    Op op = Op::constant;
    std::vector<NodeId> parents;
    Tensor value;
    const Tensor* external = nullptr;
    Tensor* external_grad = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  // -- leaves ---------------------------------------------------------------

  NodeId constant(Tensor v) { return push(Op::constant, {}, std::move(v), false, {}); }

  /// Trainable leaf owned by the tape; read its gradient with grad().
  NodeId variable(Tensor v) { return push(Op::variable, {}, std::move(v), true, {}); }

  /// Trainable leaf backed by external storage. `grad` must outlive the tape
  /// and have the shape of `value`; backward() adds into it.
  NodeId parameter(const Tensor& value, Tensor& grad) {
    if (grad.shape() != value.shape()) throw Error("parameter: gradient buffer shape mismatch");
    Node n;
    n.op = Op::parameter;
    n.external = &value;
    n.external_grad = &grad;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return nodes_.size() - 1;
  }

  /// Non-trainable leaf that reads external storage without copying it.
  NodeId view(const Tensor& value) {
    Node n;
    n.op = Op::constant;
    n.external = &value;
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return nodes_.size() - 1;
  }

  // -- inspection -----------------------------------------------------------

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Tensor& value(NodeId id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  /// Gradient of the last backward() loss w.r.t. node `id`; zeros if the node
  /// was not reached.
  Tensor grad(NodeId id) const {
    const Node& n = nodes_.at(id);
    if (n.external_grad) return *n.external_grad;
    if (grads_[id].empty()) return Tensor(value(id).shape());
    return grads_[id];
  }

  /// Ids of every trainable leaf, in creation order.
  std::vector<NodeId> trainable() const {
    std::vector<NodeId> ids;
    for (NodeId i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::variable || nodes_[i].op == Op::parameter) ids.push_back(i);
    return ids;
  }

  void backward(NodeId loss) {
    if (value(loss).size() != 1) throw Error("loss must be scalar");
    for (NodeId i = 0; i < grads_.size(); ++i)
      if (!nodes_[i].external_grad) grads_[i] = Tensor();
    grad_ref(loss)[0] += 1.0;
    for (NodeId i = loss + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.backward || grads_[i].empty()) continue;
      n.backward(*this, i);
    }
  }

  // -- ops ------------------------------------------------------------------

  NodeId identity(NodeId a) {
    return push(Op::identity, {a}, value(a), req(a), [](Tape& t, NodeId id) {
      t.accumulate(t.parent(id, 0), t.grads_[id]);
    });
  }

  NodeId matmul(NodeId a, NodeId b) {
    return push(Op::matmul, {a, b}, kfatt::matmul(value(a), value(b)), req(a) || req(b), [](Tape& t, NodeId id) {
      const NodeId a = t.parent(id, 0), b = t.parent(id, 1);
      const Tensor& g = t.grads_[id];
      if (t.req(a)) t.accumulate(a, kfatt::matmul_nt(g, t.value(b)));
      if (t.req(b)) t.accumulate(b, kfatt::matmul_tn(t.value(a), g));
    });
  }

  /// a * b^T
  NodeId matmul_nt(NodeId a, NodeId b) {
    return push(Op::matmul_nt, {a, b}, kfatt::matmul_nt(value(a), value(b)), req(a) || req(b),
                [](Tape& t, NodeId id) {
                  const NodeId a = t.parent(id, 0), b = t.parent(id, 1);
                  const Tensor& g = t.grads_[id];
                  if (t.req(a)) t.accumulate(a, kfatt::matmul(g, t.value(b)));
                  if (t.req(b)) t.accumulate(b, kfatt::matmul_tn(g, t.value(a)));
                });
  }

  NodeId add(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "add");
    Tensor v = value(a);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += value(b)[i];
    return push(Op::add, {a, b}, std::move(v), req(a) || req(b), [](Tape& t, NodeId id) {
      t.accumulate(t.parent(id, 0), t.grads_[id]);
      t.accumulate(t.parent(id, 1), t.grads_[id]);
    });
  }

  /// Matrix plus a row vector broadcast over its rows.
  NodeId add_row(NodeId a, NodeId row) {
    const Tensor& x = value(a);
    const Tensor& r = value(row);
    if (r.size() != x.cols()) throw Error("add_row: shape mismatch " + shape_str(x.shape()) + " + " + shape_str(r.shape()));
    Tensor v = x;
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) v.at(i, j) += r[j];
    return push(Op::add_row, {a, row}, std::move(v), req(a) || req(row), [](Tape& t, NodeId id) {
      const Tensor& g = t.grads_[id];
      t.accumulate(t.parent(id, 0), g);
      const NodeId r = t.parent(id, 1);
      if (!t.req(r)) return;
      Tensor gr(t.value(r).shape());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g.at(i, j);
      t.accumulate(r, gr);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "sub");
    Tensor v = value(a);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= value(b)[i];
    return push(Op::sub, {a, b}, std::move(v), req(a) || req(b), [](Tape& t, NodeId id) {
      t.accumulate(t.parent(id, 0), t.grads_[id]);
      t.accumulate_scaled(t.parent(id, 1), t.grads_[id], -1.0);
    });
  }

  /// Elementwise product.
  NodeId mul(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "mul");
    Tensor v = value(a);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= value(b)[i];
    return push(Op::mul, {a, b}, std::move(v), req(a) || req(b), [](Tape& t, NodeId id) {
      const NodeId a = t.parent(id, 0), b = t.parent(id, 1);
      const Tensor& g = t.grads_[id];
      if (t.req(a)) {
        Tensor ga = g;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= t.value(b)[i];
        t.accumulate(a, ga);
      }
      if (t.req(b)) {
        Tensor gb = g;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= t.value(a)[i];
        t.accumulate(b, gb);
      }
    });
  }

  NodeId scale(NodeId a, double c) {
    Tensor v = value(a);
    for (auto& x : v.data()) x *= c;
    return push(Op::scale, {a}, std::move(v), req(a), [c](Tape& t, NodeId id) {
      t.accumulate_scaled(t.parent(id, 0), t.grads_[id], c);
    });
  }

  NodeId exp(NodeId a) {
    return unary(Op::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
  }
  NodeId log(NodeId a) {
    return unary(Op::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
  }
  NodeId sigmoid(NodeId a) {
    return unary(Op::sigmoid, a, [](double x) { return kfatt::sigmoid(x); },
                 [](double, double y) { return y * (1.0 - y); });
  }
  NodeId softplus(NodeId a) {
    return unary(Op::softplus, a, [](double x) { return kfatt::softplus(x); },
                 [](double x, double) { return kfatt::sigmoid(x); });
  }
  NodeId relu(NodeId a) {
    return unary(Op::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
  }
  NodeId clamp(NodeId a, double lo, double hi) {
    return unary(Op::clamp, a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
  }

  NodeId softmax_rows(NodeId a) {
    return push(Op::softmax_rows, {a}, kfatt::softmax_rows(value(a)), req(a), [](Tape& t, NodeId id) {
      const Tensor& y = t.value(id);
      const Tensor& g = t.grads_[id];
      Tensor gx(y.shape());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) s += g.at(r, j) * y.at(r, j);
        for (std::size_t j = 0; j < y.cols(); ++j) gx.at(r, j) = y.at(r, j) * (g.at(r, j) - s);
      }
      t.accumulate(t.parent(id, 0), gx);
    });
  }

  /// Horizontal concatenation of matrices with equal row counts.
  NodeId concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw Error("concat_cols: no inputs");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    bool rg = false;
    for (NodeId p : parts) {
      if (value(p).rows() != rows) throw Error("concat_cols: row count mismatch");
      cols += value(p).cols();
      rg = rg || req(p);
    }
    Tensor v({rows, cols});
    std::size_t off = 0;
    for (NodeId p : parts) {
      const Tensor& x = value(p);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) v.at(i, off + j) = x.at(i, j);
      off += x.cols();
    }
    return push(Op::concat_cols, parts, std::move(v), rg, [](Tape& t, NodeId id) {
      const Tensor& g = t.grads_[id];
      std::size_t off = 0;
      for (NodeId p : t.nodes_[id].parents) {
        const Tensor& x = t.value(p);
        if (t.req(p)) {
          Tensor gp(x.shape());
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) gp.at(i, j) = g.at(i, off + j);
          t.accumulate(p, gp);
        }
        off += x.cols();
      }
    });
  }

  /// Vertical concatenation of matrices with equal column counts.
  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw Error("concat_rows: no inputs");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    bool rg = false;
    for (NodeId p : parts) {
      if (value(p).cols() != cols) throw Error("concat_rows: column count mismatch");
      rows += value(p).rows();
      rg = rg || req(p);
    }
    std::vector<double> data;
    data.reserve(rows * cols);
    for (NodeId p : parts) data.insert(data.end(), value(p).data().begin(), value(p).data().end());
    return push(Op::concat_rows, parts, Tensor({rows, cols}, std::move(data)), rg, [](Tape& t, NodeId id) {
      const Tensor& g = t.grads_[id];
      std::size_t off = 0;
      for (NodeId p : t.nodes_[id].parents) {
        const std::size_t n = t.value(p).size();
        if (t.req(p)) {
          Tensor gp(t.value(p).shape());
          std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(off), n, gp.data().begin());
          t.accumulate(p, gp);
        }
        off += n;
      }
    });
  }

  /// Rows `ids` of `table`, stacked. Backward scatters into the table.
  NodeId gather_rows(NodeId table, std::vector<std::size_t> ids) {
    const Tensor& tab = value(table);
    const std::size_t cols = tab.cols();
    Tensor v({ids.size(), cols});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= tab.rows())
        throw Error("gather_rows: index " + std::to_string(ids[i]) + " out of range " + std::to_string(tab.rows()));
      std::copy_n(tab.row_span(ids[i]).begin(), cols, v.row_span(i).begin());
    }
    return push(Op::gather_rows, {table}, std::move(v), req(table), [ids = std::move(ids)](Tape& t, NodeId id) {
      const NodeId tb = t.parent(id, 0);
      const Tensor& g = t.grads_[id];
      Tensor& gt = t.grad_ref(tb);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        auto dst = gt.row_span(ids[i]);
        auto src = g.row_span(i);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    });
  }

  /// Rows [begin, end) of a matrix.
  NodeId slice_rows(NodeId a, std::size_t begin, std::size_t end) {
    const Tensor& x = value(a);
    if (begin > end || end > x.rows()) throw Error("slice_rows: range out of bounds");
    const std::size_t cols = x.cols();
    std::vector<double> data(x.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                             x.data().begin() + static_cast<std::ptrdiff_t>(end * cols));
    return push(Op::slice_rows, {a}, Tensor({end - begin, cols}, std::move(data)), req(a),
                [begin](Tape& t, NodeId id) {
                  const Tensor& g = t.grads_[id];
                  Tensor& ga = t.grad_ref(t.parent(id, 0));
                  const std::size_t off = begin * g.cols();
                  for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
                });
  }

  /// Mean of the rows of `a` sharing each segment id; output has `segments` rows.
  NodeId segment_mean(NodeId a, std::vector<std::size_t> segment, std::size_t segments) {
    const Tensor& x = value(a);
    if (segment.size() != x.rows()) throw Error("segment_mean: one segment id per row required");
    std::vector<double> counts(segments, 0.0);
    for (std::size_t s : segment) {
      if (s >= segments) throw Error("segment_mean: segment id out of range");
      counts[s] += 1.0;
    }
    for (double c : counts)
      if (c == 0.0) throw Error("segment_mean: empty segment");
    Tensor v({segments, x.cols()});
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t j = 0; j < x.cols(); ++j) v.at(segment[r], j) += x.at(r, j);
    for (std::size_t s = 0; s < segments; ++s)
      for (std::size_t j = 0; j < x.cols(); ++j) v.at(s, j) /= counts[s];
    return push(Op::segment_mean, {a}, std::move(v), req(a),
                [segment = std::move(segment), counts = std::move(counts)](Tape& t, NodeId id) {
                  const Tensor& g = t.grads_[id];
                  Tensor& ga = t.grad_ref(t.parent(id, 0));
                  for (std::size_t r = 0; r < segment.size(); ++r)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      ga.at(r, j) += g.at(segment[r], j) / counts[segment[r]];
                });
  }

  NodeId sum(NodeId a) {
    double s = 0.0;
    for (double x : value(a).data()) s += x;
    return push(Op::sum, {a}, Tensor::scalar(s), req(a), [](Tape& t, NodeId id) {
      const NodeId a = t.parent(id, 0);
      t.accumulate(a, Tensor(t.value(a).shape(), t.grads_[id][0]));
    });
  }

  NodeId mean(NodeId a) {
    const double n = static_cast<double>(value(a).size());
    double s = 0.0;
    for (double x : value(a).data()) s += x;
    return push(Op::mean, {a}, Tensor::scalar(s / n), req(a), [n](Tape& t, NodeId id) {
      const NodeId a = t.parent(id, 0);
      t.accumulate(a, Tensor(t.value(a).shape(), t.grads_[id][0] / n));
    });
  }

  /// Precision-weighted fusion of a prior (mean 1 x d, precision 1 element)
  /// with the rows of `values` (T x d) weighted by `precisions` (T elements).
  /// Output is 1 x d.
  NodeId kfatt_base(NodeId prior_mean, NodeId prior_precision, NodeId values, NodeId precisions) {
    const Tensor& mu = value(prior_mean);
    const Tensor& vals = value(values);
    const Tensor& prec = value(precisions);
    if (value(prior_precision).size() != 1) throw Error("kfatt_base: prior precision must be a single element");
    if (prec.size() != vals.rows()) throw Error("kfatt_base: one precision per value row required");
    if (vals.size() > 0 && vals.cols() != mu.size()) throw Error("kfatt_base: value width does not match prior mean");
    Fusion f = detail::fuse(mu.data(), Shape{1, mu.size()}, value(prior_precision)[0], vals.rows(),
                            [&](std::size_t r) { return vals.row_span(r); }, prec.data());
    const bool rg = req(prior_mean) || req(prior_precision) || req(values) || req(precisions);
    return push(Op::kfatt_base, {prior_mean, prior_precision, values, precisions}, std::move(f.estimate), rg,
                [](Tape& t, NodeId id) {
                  const auto& ps = t.nodes_[id].parents;
                  const Tensor& w = t.value(ps[3]);
                  double total = t.value(ps[1])[0];
                  for (double p : w.data()) total += p;
                  t.fusion_backward(id, ps[0], ps[1], ps[2], total, w.data(), nullptr);
                });
  }

  /// Frequency-capped fusion. `group_means` is M x d, `system_precisions` and
  /// `random_sigmas` have M elements, `counts` gives n_m. Output is 1 x d.
  NodeId kfatt_freq(NodeId prior_mean, NodeId prior_precision, NodeId group_means, NodeId system_precisions,
                    NodeId random_sigmas, std::vector<double> counts) {
    const Tensor& mu = value(prior_mean);
    const Tensor& means = value(group_means);
    const Tensor& sp = value(system_precisions);
    const Tensor& rs = value(random_sigmas);
    const std::size_t m = means.rows();
    if (value(prior_precision).size() != 1) throw Error("kfatt_freq: prior precision must be a single element");
    if (sp.size() != m || rs.size() != m || counts.size() != m)
      throw Error("kfatt_freq: one precision, random sigma and count per group required");
    if (m > 0 && means.cols() != mu.size()) throw Error("kfatt_freq: group width does not match prior mean");
    for (double n : counts)
      if (!(n >= 1.0)) throw Error("kfatt_freq: empty group");
    std::vector<double> w(m);
    for (std::size_t i = 0; i < m; ++i) w[i] = capped_weight(sp[i], rs[i], counts[i]);
    Fusion f = detail::fuse(mu.data(), Shape{1, mu.size()}, value(prior_precision)[0], m,
                            [&](std::size_t r) { return means.row_span(r); }, w);
    const bool rg = req(prior_mean) || req(prior_precision) || req(group_means) || req(system_precisions) ||
                    req(random_sigmas);
    return push(Op::kfatt_freq, {prior_mean, prior_precision, group_means, system_precisions, random_sigmas},
                std::move(f.estimate), rg, [counts = std::move(counts)](Tape& t, NodeId id) {
                  const auto& ps = t.nodes_[id].parents;
                  const Tensor& sp = t.value(ps[3]);
                  const Tensor& rs = t.value(ps[4]);
                  const std::size_t m = counts.size();
                  std::vector<double> w(m);
                  double total = t.value(ps[1])[0];
                  for (std::size_t i = 0; i < m; ++i) total += (w[i] = capped_weight(sp[i], rs[i], counts[i]));
                  std::vector<double> gw(m);
                  t.fusion_backward(id, ps[0], ps[1], ps[2], total, w, &gw);
                  // chain through w = n p / (n + p s^2)
                  Tensor gp(sp.shape()), gs(rs.shape());
                  for (std::size_t i = 0; i < m; ++i) {
                    const double n = counts[i], p = sp[i], s = rs[i];
                    const double den = n + p * s * s;
                    gp[i] = gw[i] * n * n / (den * den);
                    gs[i] = gw[i] * (-2.0 * n * p * p * s) / (den * den);
                  }
                  if (t.req(ps[3])) t.accumulate(ps[3], gp);
                  if (t.req(ps[4])) t.accumulate(ps[4], gs);
                });
  }

  /// Binary cross-entropy of a probability against label y.
  NodeId bce(NodeId p, double y) {
    const double x = value(p).item();
    const double v = -(y * std::log(x) + (1.0 - y) * std::log(1.0 - x));
    return push(Op::bce, {p}, Tensor::scalar(v), req(p), [y](Tape& t, NodeId id) {
      const NodeId p = t.parent(id, 0);
      const double x = t.value(p).item();
      t.accumulate(p, Tensor(t.value(p).shape(), t.grads_[id][0] * (x - y) / (x * (1.0 - x))));
    });
  }

  /// Binary cross-entropy of sigmoid(z) against y, evaluated as softplus(z) - y z.
  NodeId bce_logits(NodeId z, double y) {
    const double x = value(z).item();
    return push(Op::bce_logits, {z}, Tensor::scalar(kfatt::softplus(x) - y * x), req(z), [y](Tape& t, NodeId id) {
      const NodeId z = t.parent(id, 0);
      const double x = t.value(z).item();
      t.accumulate(z, Tensor(t.value(z).shape(), t.grads_[id][0] * (kfatt::sigmoid(x) - y)));
    });
  }

 private:
  NodeId push(Op op, std::vector<NodeId> parents, Tensor value, bool requires_grad, Backward bw) {
    for (NodeId p : parents)
      if (p >= nodes_.size()) throw Error("tape: parent id out of range");
    Node n;
    n.op = op;
    n.parents = std::move(parents);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return nodes_.size() - 1;
  }

  template <class F, class DF>
  NodeId unary(Op op, NodeId a, F f, DF df) {
    Tensor v = value(a);
    for (auto& x : v.data()) x = f(x);
    return push(op, {a}, std::move(v), req(a), [df](Tape& t, NodeId id) {
      const NodeId a = t.parent(id, 0);
      const Tensor& x = t.value(a);
      const Tensor& y = t.value(id);
      Tensor g = t.grads_[id];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= df(x[i], y[i]);
      t.accumulate(a, g);
    });
  }

  bool req(NodeId id) const { return nodes_[id].requires_grad; }
  NodeId parent(NodeId id, std::size_t k) const { return nodes_[id].parents[k]; }

  Tensor& grad_ref(NodeId id) {
    Node& n = nodes_[id];
    if (n.external_grad) return *n.external_grad;
    if (grads_[id].empty()) grads_[id] = Tensor(value(id).shape());
    return grads_[id];
  }

  void accumulate(NodeId id, const Tensor& g) { accumulate_scaled(id, g, 1.0); }

  void accumulate_scaled(NodeId id, const Tensor& g, double c) {
    if (!req(id)) return;
    Tensor& dst = grad_ref(id);
    if (dst.size() != g.size()) throw Error("tape: gradient shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += c * g[i];
  }

  // Shared backward of y = (p_q mu + sum_r w_r x_r) / total. Optionally
  // returns dL/dw_r in `gw` instead of accumulating into a weights node.
  void fusion_backward(NodeId id, NodeId mu, NodeId prior_prec, NodeId rows, double total,
                       std::span<const double> w, std::vector<double>* gw) {
    const Tensor& g = grads_[id];
    const Tensor& y = value(id);
    const Tensor& m = value(mu);
    const Tensor& x = value(rows);
    const double pq = value(prior_prec)[0];
    const std::size_t d = y.size();
    if (req(mu)) {
      Tensor gm(m.shape());
      for (std::size_t i = 0; i < d; ++i) gm[i] = g[i] * pq / total;
      accumulate(mu, gm);
    }
    if (req(prior_prec)) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += g[i] * (m[i] - y[i]);
      accumulate(prior_prec, Tensor(value(prior_prec).shape(), s / total));
    }
    if (req(rows)) {
      Tensor gx(x.shape());
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t i = 0; i < d; ++i) gx.at(r, i) = g[i] * w[r] / total;
      accumulate(rows, gx);
    }
    std::vector<double> local;
    if (!gw) {
      const NodeId weights = nodes_[id].parents[3];
      if (!req(weights)) return;
      local.resize(w.size());
      gw = &local;
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += g[i] * (x.at(r, i) - y[i]);
      (*gw)[r] = s / total;
    }
    if (!local.empty()) {
      const NodeId weights = nodes_[id].parents[3];
      accumulate(weights, Tensor(value(weights).shape(), local));
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// ---------------------------------------------------------------------------
// Declarative front end: a straight-line program over named tensors.

struct ExprStep {
  std::string op;                 // op tag
  std::vector<std::string> args;  // names of earlier results or inputs
  std::string out;                // name of this result
  std::vector<double> attrs;      // op-specific constants
};

struct Expression {
  std::vector<ExprStep> steps;
  std::string output;
};

struct ForwardResult {
  Tape tape;
  NodeId output = 0;
  std::map<std::string, NodeId> names;
  const Tensor& value() const { return tape.value(output); }
};

/// Evaluates `expr` on a fresh tape. Every input becomes a trainable leaf
/// unless `constants` names it.
///
/// Supported tags: identity matmul matmul_nt add add_row sub mul scale exp log
/// sigmoid softplus relu softmax concat_cols concat_rows gather sum mean
/// kfatt_base kfatt_freq bce bce_logits.
inline ForwardResult forward(const Expression& expr, const std::map<std::string, Tensor>& inputs,
                             const std::set<std::string>& constants = {}) {
  ForwardResult r;
  Tape& t = r.tape;
  for (const auto& [name, v] : inputs) r.names[name] = constants.count(name) ? t.constant(v) : t.variable(v);
  auto arg = [&](const ExprStep& s, std::size_t i) {
    if (i >= s.args.size()) throw Error("expression step '" + s.out + "' (" + s.op + "): missing argument");
    auto it = r.names.find(s.args[i]);
    if (it == r.names.end()) throw Error("expression step '" + s.out + "': unknown name '" + s.args[i] + "'");
    return it->second;
  };
  auto attr = [](const ExprStep& s, std::size_t i) {
    if (i >= s.attrs.size()) throw Error("expression step '" + s.out + "' (" + s.op + "): missing attribute");
    return s.attrs[i];
  };
  auto all_args = [&](const ExprStep& s) {
    std::vector<NodeId> ids;
    for (std::size_t i = 0; i < s.args.size(); ++i) ids.push_back(arg(s, i));
    return ids;
  };
  for (const auto& s : expr.steps) {
    const std::string_view op = s.op;
    NodeId id;
    if (op == "identity") id = t.identity(arg(s, 0));
    else if (op == "matmul") id = t.matmul(arg(s, 0), arg(s, 1));
    else if (op == "matmul_nt") id = t.matmul_nt(arg(s, 0), arg(s, 1));
    else if (op == "add") id = t.add(arg(s, 0), arg(s, 1));
    else if (op == "add_row") id = t.add_row(arg(s, 0), arg(s, 1));
    else if (op == "sub") id = t.sub(arg(s, 0), arg(s, 1));
    else if (op == "mul") id = t.mul(arg(s, 0), arg(s, 1));
    else if (op == "scale") id = t.scale(arg(s, 0), attr(s, 0));
    else if (op == "exp") id = t.exp(arg(s, 0));
    else if (op == "log") id = t.log(arg(s, 0));
    else if (op == "sigmoid") id = t.sigmoid(arg(s, 0));
    else if (op == "softplus") id = t.softplus(arg(s, 0));
    else if (op == "relu") id = t.relu(arg(s, 0));
    else if (op == "softmax") id = t.softmax_rows(arg(s, 0));
    else if (op == "concat_cols") id = t.concat_cols(all_args(s));
    else if (op == "concat_rows") id = t.concat_rows(all_args(s));
    else if (op == "gather") {
      std::vector<std::size_t> ids;
      for (double a : s.attrs) ids.push_back(static_cast<std::size_t>(a));
      id = t.gather_rows(arg(s, 0), std::move(ids));
    } else if (op == "sum") id = t.sum(arg(s, 0));
    else if (op == "mean") id = t.mean(arg(s, 0));
    else if (op == "kfatt_base") id = t.kfatt_base(arg(s, 0), arg(s, 1), arg(s, 2), arg(s, 3));
    else if (op == "kfatt_freq") id = t.kfatt_freq(arg(s, 0), arg(s, 1), arg(s, 2), arg(s, 3), arg(s, 4), s.attrs);
    else if (op == "bce") id = t.bce(arg(s, 0), attr(s, 0));
    else if (op == "bce_logits") id = t.bce_logits(arg(s, 0), attr(s, 0));
    else throw Error("unsupported op '" + s.op + "'");
    r.names[s.out] = id;
  }
  auto it = r.names.find(expr.output);
  if (it == r.names.end()) throw Error("expression output '" + expr.output + "' is undefined");
  r.output = it->second;
  return r;
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw Error("adam: learning rate must be positive");
  }

  /// One update of every parameter from its gradient.
  void step(std::span<Tensor> params, std::span<const Tensor> grads) {
    if (params.size() != grads.size()) throw Error("adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
      }
    }
    if (m_.size() != params.size()) throw Error("adam: parameter count changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = params[k];
      const Tensor& g = grads[k];
      if (p.shape() != g.shape() || p.shape() != m_[k].shape())
        throw Error("adam: shape mismatch for parameter " + std::to_string(k) + " " + shape_str(p.shape()) + " vs " +
                    shape_str(g.shape()));
      for (std::size_t i = 0; i < p.size(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        p[i] -= cfg_.lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.eps);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace kfatt::ad
