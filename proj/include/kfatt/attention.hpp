// Attention kernels viewed as Gaussian sensor fusion.
//
// Each historical click is a noisy measurement of the user's hidden interest
// for the current query, and the query itself supplies a population prior.
// The fused estimate is the MAP solution, a precision-weighted average:
//
//   v = (p_q * mu_q + sum_t p_t * v_t) / (p_q + sum_t p_t)
//
// Precisions (inverse variances) are the canonical representation, so an
// infinitely wide prior is simply precision 0.
//
// The frequency-capped variant treats every click under one deduplicated
// query as a repeated reading of a single sensor. A sensor with system
// precision p and random error s, read n times, contributes its mean reading
// with weight 1 / (1/p + s^2/n), which never exceeds p however large n grows.

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kfatt/numerics.hpp"

namespace kfatt {

/// One click treated as a measurement of the hidden interest.
struct Measurement {
  Tensor value;
  double precision = 0.0;  // 1 / sigma_t^2
};

/// Population prior for a query: N(mean, I / precision).
struct QueryPrior {
  Tensor mean;
  double precision = 0.0;  // 1 / sigma_q^2; 0 encodes an uninformative prior
};

/// All clicks observed under one deduplicated query.
struct DedupGroup {
  Tensor key;
  std::vector<Tensor> values;
  double system_sigma = 1.0;  // distance-driven error of the sensor
  double random_sigma = 0.0;  // spread of repeated readings on the sensor
};

/// Normalized fusion coefficients. Behavior weights are per measurement for
/// the base kernel and per group for the frequency-capped kernel.
struct AttentionWeights {
  double prior_weight = 0.0;
  std::vector<double> behavior_weights;
};

struct Fusion {
  Tensor estimate;
  AttentionWeights weights;
};

inline constexpr double kLogitClamp = 60.0;

/// exp of a clamped attention logit; keeps precisions finite in double.
inline double precision_from_logit(double logit) {
  return std::exp(std::clamp(logit, -kLogitClamp, kLogitClamp));
}

/// Total weight a sensor read `n` times earns under frequency capping.
/// Written in precision form so that system_precision = 0 (sigma_m = inf)
/// is exact: w = n p / (n + p s^2) = 1 / (1/p + s^2/n).
inline double capped_weight(double system_precision, double random_sigma, double n) {
  if (system_precision == 0.0) return 0.0;
  return n * system_precision / (n + system_precision * random_sigma * random_sigma);
}

namespace detail {

inline void check_values(std::span<const Tensor> values, std::size_t d, const char* what) {
  for (const auto& v : values)
    if (v.size() != d)
      throw Error(std::string(what) + ": value dimension " + std::to_string(v.size()) + " does not match " +
                  std::to_string(d));
}

/// Precision-weighted average of the prior mean and `count` values, where
/// row(t) yields the t-th value as a span. Shared by the typed kernels below
/// and the differentiable fusion ops so both evaluate identically.
template <class RowAt>
Fusion fuse(std::span<const double> prior_mean, const Shape& out_shape, double prior_precision, std::size_t count,
            RowAt&& row, std::span<const double> precisions) {
  double total = prior_precision;
  for (double p : precisions) total += p;
  if (!(total > 0.0)) throw Error("degenerate fusion: total precision zero");
  Fusion out;
  out.estimate = Tensor(out_shape);
  auto est = out.estimate.data();
  if (prior_precision != 0.0)
    for (std::size_t i = 0; i < est.size(); ++i) est[i] = prior_precision * prior_mean[i];
  for (std::size_t t = 0; t < count; ++t) {
    const std::span<const double> v = row(t);
    for (std::size_t i = 0; i < est.size(); ++i) est[i] += precisions[t] * v[i];
  }
  for (auto& x : est) x /= total;
  out.weights.prior_weight = prior_precision / total;
  out.weights.behavior_weights.reserve(count);
  for (double p : precisions) out.weights.behavior_weights.push_back(p / total);
  return out;
}

inline Fusion fuse(const Tensor& prior_mean, double prior_precision, std::span<const Tensor> values,
                   std::span<const double> precisions) {
  return fuse(prior_mean.data(), prior_mean.shape(), prior_precision, values.size(),
              [&](std::size_t t) { return values[t].data(); }, precisions);
}

inline Tensor group_mean(const DedupGroup& g) {
  Tensor m(g.values.front().shape());
  for (const auto& v : g.values)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
  for (auto& x : m.data()) x /= static_cast<double>(g.values.size());
  return m;
}

}  // namespace detail

/// Softmax attention over q . k_t. The prior weight is always zero.
inline Fusion vanilla_attention(const Tensor& q, std::span<const Tensor> keys, std::span<const Tensor> values) {
  if (keys.empty() || values.empty()) throw Error("vanilla attention undefined on empty history");
  if (keys.size() != values.size()) throw Error("vanilla attention: keys and values differ in length");
  Tensor logits({keys.size()});
  for (std::size_t t = 0; t < keys.size(); ++t) {
    if (keys[t].size() != q.size()) throw Error("vanilla attention: key dimension mismatch");
    logits[t] = dot(q.data(), keys[t].data());
  }
  detail::check_values(values, values.front().size(), "vanilla attention");
  const Tensor alpha = softmax(logits);
  Fusion out;
  out.estimate = Tensor(values.front().shape());
  for (std::size_t t = 0; t < values.size(); ++t)
    for (std::size_t i = 0; i < out.estimate.size(); ++i) out.estimate[i] += alpha[t] * values[t][i];
  out.weights.behavior_weights.assign(alpha.data().begin(), alpha.data().end());
  return out;
}

/// MAP fusion of the query prior with independent measurements.
inline Fusion kfatt_base(const QueryPrior& prior, std::span<const Measurement> measurements) {
  if (!(prior.precision >= 0.0) || !std::isfinite(prior.precision))
    throw Error("kfatt_base: prior precision must be finite and non-negative");
  std::vector<Tensor> values;
  std::vector<double> precisions;
  values.reserve(measurements.size());
  precisions.reserve(measurements.size());
  for (const auto& m : measurements) {
    if (!(m.precision >= 0.0) || !std::isfinite(m.precision))
      throw Error("kfatt_base: measurement precision must be finite and non-negative");
    values.push_back(m.value);
    precisions.push_back(m.precision);
  }
  detail::check_values(values, prior.mean.size(), "kfatt_base");
  return detail::fuse(prior.mean, prior.precision, values, precisions);
}

/// MAP fusion with frequency capping; one weight per deduplicated query.
inline Fusion kfatt_freq(const QueryPrior& prior, std::span<const DedupGroup> groups) {
  if (!(prior.precision >= 0.0) || !std::isfinite(prior.precision))
    throw Error("kfatt_freq: prior precision must be finite and non-negative");
  std::vector<Tensor> means;
  std::vector<double> weights;
  for (const auto& g : groups) {
    if (g.values.empty()) throw Error("kfatt_freq: empty group");
    if (!(g.system_sigma > 0.0)) throw Error("kfatt_freq: system sigma must be positive");
    if (!(g.random_sigma >= 0.0)) throw Error("kfatt_freq: random sigma must be non-negative");
    detail::check_values(g.values, prior.mean.size(), "kfatt_freq");
    means.push_back(detail::group_mean(g));
    const double p = 1.0 / (g.system_sigma * g.system_sigma);
    weights.push_back(capped_weight(p, g.random_sigma, static_cast<double>(g.values.size())));
  }
  return detail::fuse(prior.mean, prior.precision, means, weights);
}

// ---------------------------------------------------------------------------
// Ablation variants.

enum class KfattMode { base, freq, bs, fs };

inline std::string_view to_string(KfattMode m) {
  switch (m) {
    case KfattMode::base: return "base";
    case KfattMode::freq: return "freq";
    case KfattMode::bs: return "bs";
    case KfattMode::fs: return "fs";
  }
  return "?";
}

/// Runs one of the four kernels on grouped input. For base/bs every click is
/// an independent measurement with precision 1/sigma_m^2 of its group.
///   bs: base with the prior precision pinned to 1.
///   fs: freq with the random error dropped (w_m = 1/sigma_m^2).
inline Fusion kfatt_variant(KfattMode mode, const QueryPrior& prior, std::span<const DedupGroup> groups) {
  switch (mode) {
    case KfattMode::base:
    case KfattMode::bs: {
      std::vector<Measurement> ms;
      for (const auto& g : groups) {
        if (!(g.system_sigma > 0.0)) throw Error("kfatt_variant: system sigma must be positive");
        for (const auto& v : g.values) ms.push_back({v, 1.0 / (g.system_sigma * g.system_sigma)});
      }
      QueryPrior p = prior;
      if (mode == KfattMode::bs) p.precision = 1.0;
      return kfatt_base(p, ms);
    }
    case KfattMode::freq: return kfatt_freq(prior, groups);
    case KfattMode::fs: {
      std::vector<DedupGroup> g(groups.begin(), groups.end());
      for (auto& x : g) x.random_sigma = 0.0;
      return kfatt_freq(prior, g);
    }
  }
  throw Error("kfatt_variant: unknown mode");
}

// ---------------------------------------------------------------------------
// Prior and noise heads: two-layer perceptrons with a ReLU hidden layer.

struct Mlp2 {
  Tensor w1;  // in x hidden
  Tensor b1;  // 1 x hidden
  Tensor w2;  // hidden x out
  Tensor b2;  // 1 x out

  static Mlp2 zeros(std::size_t in, std::size_t hidden, std::size_t out) {
    return {Tensor({in, hidden}), Tensor({1, hidden}), Tensor({hidden, out}), Tensor({1, out})};
  }

  Tensor operator()(const Tensor& x) const {
    if (x.size() != w1.rows())
      throw Error("mlp: input dimension " + std::to_string(x.size()) + " does not match " + std::to_string(w1.rows()));
    Tensor h = matmul(x.reshaped({1, x.size()}), w1);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] = std::max(0.0, h[j] + b1[j]);
    Tensor y = matmul(h, w2);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += b2[j];
    return y;
  }
};

struct PriorHeadParams {
  Mlp2 mean;       // d_q -> hidden -> d_v
  Mlp2 precision;  // d_q -> hidden -> 1
};

/// Query prior from the query vector: mean = MLP_mu(q), precision = softplus(MLP_sigma(q)).
inline QueryPrior prior_head(const Tensor& q, const PriorHeadParams& params) {
  QueryPrior p;
  Tensor m = params.mean(q);
  p.mean = m.reshaped({m.size()});
  p.precision = softplus(params.precision(q).item());
  return p;
}

/// Random error of a deduplicated query's sensor, softplus(MLP(k_m)) >= 0.
inline double noise_head(const Tensor& key, const Mlp2& params) { return softplus(params(key).item()); }

}  // namespace kfatt
