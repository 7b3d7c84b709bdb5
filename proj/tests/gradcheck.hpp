// Finite-difference gradient checks shared by the unit tests and the
// acceptance suite.

#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "kfatt/autodiff.hpp"
#include "kfatt/behavior_model.hpp"

namespace kfatt::gradcheck {

using ad::NodeId;

using Builder = std::function<NodeId(ad::Tape&, const std::vector<NodeId>&)>;
using Sampler = std::function<std::vector<Tensor>(Rng&)>;

inline constexpr int kInstances = 50;

// Reduces an op output to a scalar with fixed random weights so every output
// element contributes a distinct amount to the loss.
inline double scalar_loss(const std::vector<Tensor>& inputs, const Builder& f, const Tensor& weights) {
  ad::Tape t;
  std::vector<NodeId> ids;
  for (const auto& x : inputs) ids.push_back(t.constant(x));
  const NodeId out = f(t, ids);
  return t.value(t.sum(t.mul(out, t.constant(weights)))).item();
}

// Worst relative error between backward() and central differences over
// kInstances draws from `sample`.
inline double worst_gradient_error(const Sampler& sample, const Builder& f, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int n = 0; n < kInstances; ++n) {
    const std::vector<Tensor> inputs = sample(rng);
    ad::Tape t;
    std::vector<NodeId> ids;
    for (const auto& x : inputs) ids.push_back(t.variable(x));
    const NodeId out = f(t, ids);
    const Tensor w = rng.normal_tensor(t.value(out).shape());
    t.backward(t.sum(t.mul(out, t.constant(w))));
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const Tensor analytic = t.grad(ids[k]);
      const Tensor numeric = finite_diff_grad(
          [&](const Tensor& xk) {
            auto moved = inputs;
            moved[k] = xk;
            return scalar_loss(moved, f, w);
          },
          inputs[k]);
      for (std::size_t i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, relative_error(analytic[i], numeric[i]));
    }
  }
  return worst;
}

inline Tensor away_from(Tensor x, double point, double margin) {
  for (auto& v : x.data())
    if (std::abs(v - point) < margin) v = point + (v < point ? -margin : margin);
  return x;
}

inline Tensor positive(Rng& rng, Shape s, double lo = 0.2, double hi = 2.0) { return rng.uniform_tensor(std::move(s), lo, hi); }

inline std::size_t dim(Rng& rng, std::size_t hi = 4) { return 1 + rng.index(hi); }

struct OpCase {
  std::string name;
  Sampler sample;
  Builder build;
};

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> c;
  auto unary = [&](std::string name, std::function<NodeId(ad::Tape&, NodeId)> op,
                   std::function<Tensor(Rng&, Shape)> gen) {
    c.push_back({name, [gen](Rng& r) { return std::vector<Tensor>{gen(r, {dim(r), dim(r)})}; },
                 [op](ad::Tape& t, const std::vector<NodeId>& x) { return op(t, x[0]); }});
  };
  auto normal = [](Rng& r, Shape s) { return r.normal_tensor(std::move(s)); };

  unary("identity", [](ad::Tape& t, NodeId a) { return t.identity(a); }, normal);
  unary("scale", [](ad::Tape& t, NodeId a) { return t.scale(a, -1.7); }, normal);
  unary("exp", [](ad::Tape& t, NodeId a) { return t.exp(a); }, normal);
  unary("log", [](ad::Tape& t, NodeId a) { return t.log(a); }, [](Rng& r, Shape s) { return positive(r, s); });
  unary("sigmoid", [](ad::Tape& t, NodeId a) { return t.sigmoid(a); }, normal);
  unary("softplus", [](ad::Tape& t, NodeId a) { return t.softplus(a); }, normal);
  unary("relu", [](ad::Tape& t, NodeId a) { return t.relu(a); },
        [](Rng& r, Shape s) { return away_from(r.normal_tensor(std::move(s)), 0.0, 0.05); });
  unary("clamp", [](ad::Tape& t, NodeId a) { return t.clamp(a, -1.0, 1.0); },
        [](Rng& r, Shape s) { return away_from(away_from(r.normal_tensor(std::move(s), 1.5), 1.0, 0.05), -1.0, 0.05); });
  unary("softmax_rows", [](ad::Tape& t, NodeId a) { return t.softmax_rows(a); }, normal);
  unary("sum", [](ad::Tape& t, NodeId a) { return t.sum(a); }, normal);
  unary("mean", [](ad::Tape& t, NodeId a) { return t.mean(a); }, normal);

  c.push_back({"matmul",
               [](Rng& r) {
                 const auto m = dim(r), k = dim(r), n = dim(r);
                 return std::vector<Tensor>{r.normal_tensor({m, k}), r.normal_tensor({k, n})};
               },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.matmul(x[0], x[1]); }});
  c.push_back({"matmul_nt",
               [](Rng& r) {
                 const auto m = dim(r), k = dim(r), n = dim(r);
                 return std::vector<Tensor>{r.normal_tensor({m, k}), r.normal_tensor({n, k})};
               },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.matmul_nt(x[0], x[1]); }});
  auto binary = [&](std::string name, std::function<NodeId(ad::Tape&, NodeId, NodeId)> op) {
    c.push_back({name,
                 [](Rng& r) {
                   const Shape s{dim(r), dim(r)};
                   return std::vector<Tensor>{r.normal_tensor(s), r.normal_tensor(s)};
                 },
                 [op](ad::Tape& t, const std::vector<NodeId>& x) { return op(t, x[0], x[1]); }});
  };
  binary("add", [](ad::Tape& t, NodeId a, NodeId b) { return t.add(a, b); });
  binary("sub", [](ad::Tape& t, NodeId a, NodeId b) { return t.sub(a, b); });
  binary("mul", [](ad::Tape& t, NodeId a, NodeId b) { return t.mul(a, b); });
  c.push_back({"add_row",
               [](Rng& r) {
                 const auto m = dim(r), n = dim(r);
                 return std::vector<Tensor>{r.normal_tensor({m, n}), r.normal_tensor({1, n})};
               },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.add_row(x[0], x[1]); }});
  c.push_back({"concat_cols",
               [](Rng& r) {
                 const auto m = dim(r);
                 return std::vector<Tensor>{r.normal_tensor({m, dim(r)}), r.normal_tensor({m, dim(r)}),
                                            r.normal_tensor({m, dim(r)})};
               },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.concat_cols({x[0], x[1], x[2]}); }});
  c.push_back({"concat_rows",
               [](Rng& r) {
                 const auto n = dim(r);
                 return std::vector<Tensor>{r.normal_tensor({dim(r), n}), r.normal_tensor({dim(r), n})};
               },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.concat_rows({x[0], x[1]}); }});
  c.push_back({"gather_rows", [](Rng& r) { return std::vector<Tensor>{r.normal_tensor({5, dim(r)})}; },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.gather_rows(x[0], {4, 0, 4, 2, 4}); }});
  c.push_back({"slice_rows", [](Rng& r) { return std::vector<Tensor>{r.normal_tensor({5, dim(r)})}; },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.slice_rows(x[0], 1, 4); }});
  c.push_back({"segment_mean", [](Rng& r) { return std::vector<Tensor>{r.normal_tensor({6, dim(r)})}; },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.segment_mean(x[0], {0, 2, 0, 1, 2, 0}, 3); }});
  c.push_back({"kfatt_base",
               [](Rng& r) {
                 const auto d = dim(r), T = dim(r, 6);
                 return std::vector<Tensor>{r.normal_tensor({1, d}), positive(r, {1, 1}), r.normal_tensor({T, d}),
                                            positive(r, {T})};
               },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.kfatt_base(x[0], x[1], x[2], x[3]); }});
  c.push_back({"kfatt_freq",
               [](Rng& r) {
                 const auto d = dim(r);
                 return std::vector<Tensor>{r.normal_tensor({1, d}), positive(r, {1, 1}), r.normal_tensor({3, d}),
                                            positive(r, {3}), positive(r, {3}, 0.1, 1.5)};
               },
               [](ad::Tape& t, const std::vector<NodeId>& x) {
                 return t.kfatt_freq(x[0], x[1], x[2], x[3], x[4], {1.0, 4.0, 2.0});
               }});
  c.push_back({"bce", [](Rng& r) { return std::vector<Tensor>{positive(r, {1}, 0.05, 0.95)}; },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.bce(x[0], 1.0); }});
  c.push_back({"bce_logits", [](Rng& r) { return std::vector<Tensor>{r.normal_tensor({1}, 2.0)}; },
               [](ad::Tape& t, const std::vector<NodeId>& x) { return t.bce_logits(x[0], 0.0); }});
  return c;
}


/// A small model configuration that keeps full finite differencing cheap.
inline model::ModelConfig tiny_config(model::Kernel k) {
  model::ModelConfig c;
  c.kernel = k;
  c.num_queries = 6;
  c.num_items = 9;
  c.d_model = 4;
  c.heads = 2;
  c.d_k = 3;
  c.d_v = 3;
  c.mlp_hidden = 5;
  c.head_hidden = 3;
  c.max_per_session = 6;
  c.embedding_sd = 0.8;
  return c;
}

/// An impression with `T` clicks over a few sessions. Queries are drawn from
/// a narrow id range so repeated queries form multi-click groups.
inline CtrInstance random_instance(Rng& rng, const model::ModelConfig& c, std::size_t T) {
  CtrInstance inst;
  std::int64_t clock = 0;
  for (std::size_t t = 0; t < T; ++t) {
    clock += rng.uniform() < 0.3 ? 45 : 1 + static_cast<std::int64_t>(rng.index(10));
    inst.history.events.push_back({clock, 1 + rng.index(std::min<std::size_t>(4, c.num_queries)),
                                   1 + rng.index(c.num_items)});
  }
  inst.timestamp = clock + 60;
  inst.query_id = 1 + rng.index(c.num_queries);
  inst.item_id = 1 + rng.index(c.num_items);
  inst.label = static_cast<int>(rng.index(2));
  return inst;
}

/// Step for differencing the full CTR loss. Many parameters of a random
/// model carry gradients of 1e-8 to 1e-10, where a 1e-5 step's rounding
/// noise (about eps * loss / h) alone exceeds the tolerance. The five-point
/// central stencil at 1e-3 keeps rounding near 1e-13 and truncation at O(h^4).
inline constexpr double kModelFdStep = 1e-3;

/// Worst relative error between backward() and central differences of the
/// CTR loss, over every scalar parameter of `m`.
inline double model_gradient_error(model::Model& m, const CtrInstance& inst, double h = kModelFdStep) {
  std::vector<Tensor> grads = m.params().zeros_like();
  m.accumulate_gradient(inst, grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < m.params().size(); ++k) {
    Tensor& p = m.params().value(k);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      auto at = [&](double offset) {
        p[i] = orig + offset;
        return m.loss(inst);
      };
      const double numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
      p[i] = orig;
      worst = std::max(worst, relative_error(grads[k][i], numeric));
    }
  }
  return worst;
}

/// Smallest distance from any ReLU input (to 0) or clamp input (to the logit
/// bounds) in the forward pass of `inst`. Central differences are only a
/// valid reference where no such input sits inside the stencil.
inline double kink_margin(const model::Model& m, const CtrInstance& inst) {
  ad::Tape t;
  model::Binder b(t, m.params());
  (void)m.logit(t, b, inst);
  double margin = std::numeric_limits<double>::infinity();
  for (NodeId i = 0; i < t.size(); ++i) {
    const auto& node = t.node(i);
    if (node.op != ad::Op::relu && node.op != ad::Op::clamp) continue;
    for (double x : t.value(node.parents[0]).data())
      margin = std::min(margin, node.op == ad::Op::relu ? std::abs(x) : kLogitClamp - std::abs(x));
  }
  return margin;
}

// Covers the stencil's reach of 2h for preactivation sensitivities up to 10.
inline constexpr double kKinkMargin = 2e-2;

/// Worst model gradient error over `count` random instances with 1..8 clicks
/// (the first instance always has exactly three). Draws that land within
/// kKinkMargin of a ReLU or clamp kink are replaced.
inline double model_gradient_error(model::Kernel kernel, int count, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int n = 0; n < count;) {
    const auto cfg = tiny_config(kernel);
    model::Model m(cfg, rng());
    const CtrInstance inst = random_instance(rng, cfg, n == 0 ? 3 : 1 + rng.index(8));
    if (kink_margin(m, inst) < kKinkMargin) continue;
    worst = std::max(worst, model_gradient_error(m, inst));
    ++n;
  }
  return worst;
}

}  // namespace kfatt::gradcheck
