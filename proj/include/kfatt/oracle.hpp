// Numerical certification of the closed-form fusion kernels.
//
// The log-posteriors are written out term by term in sigma form and maximized
// by gradient ascent with a backtracking line search. Nothing here calls the
// fusion code in attention.hpp, so agreement between the two is evidence that
// the closed forms really are the MAP solutions.

#pragma once

#include <chrono>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "kfatt/attention.hpp"
#include "kfatt/numerics.hpp"

namespace kfatt::oracle {

enum class PosteriorMode { base, freq };

/// A proper posterior: every precision strictly positive, every sigma finite.
/// `measurements` is used in base mode and `groups` in freq mode.
struct PosteriorInstance {
  PosteriorMode mode = PosteriorMode::base;
  QueryPrior prior;
  std::vector<Measurement> measurements;
  std::vector<DedupGroup> groups;
};

namespace detail {

inline double prior_variance(const PosteriorInstance& inst) {
  if (!(inst.prior.precision > 0.0)) throw Error("oracle: prior sigma must be positive and finite");
  return 1.0 / inst.prior.precision;
}

inline double measurement_variance(const Measurement& m) {
  if (!(m.precision > 0.0)) throw Error("oracle: measurement sigma must be positive and finite");
  return 1.0 / m.precision;
}

inline void check_group(const DedupGroup& g) {
  if (!(g.system_sigma > 0.0)) throw Error("oracle: system sigma must be positive");
  if (!(g.random_sigma > 0.0)) throw Error("oracle: random sigma must be positive");
  if (g.values.empty()) throw Error("oracle: empty group");
}

// -||a - b||^2 / (2 var)
inline double gauss_term(std::span<const double> a, std::span<const double> b, double var) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return -s / (2.0 * var);
}

}  // namespace detail

/// log p(v_q) + sum_t log p(v_t | v_q), without v_q-independent constants.
inline double log_posterior_base(const PosteriorInstance& inst, const Tensor& vq) {
  const double var_q = detail::prior_variance(inst);
  double f = detail::gauss_term(vq.data(), inst.prior.mean.data(), var_q);
  for (const auto& m : inst.measurements) f += detail::gauss_term(m.value.data(), vq.data(), detail::measurement_variance(m));
  return f;
}

/// d/dv_q of log_posterior_base: -(v_q - mu)/sigma_q^2 + sum_t (v_t - v_q)/sigma_t^2.
inline Tensor grad_log_posterior_base(const PosteriorInstance& inst, const Tensor& vq) {
  const double var_q = detail::prior_variance(inst);
  Tensor g(vq.shape());
  for (std::size_t i = 0; i < vq.size(); ++i) g[i] = -(vq[i] - inst.prior.mean[i]) / var_q;
  for (const auto& m : inst.measurements) {
    const double var = detail::measurement_variance(m);
    for (std::size_t i = 0; i < vq.size(); ++i) g[i] += (m.value[i] - vq[i]) / var;
  }
  return g;
}

/// Joint log-density over (v_q, v_1..v_M):
///   log p(v_q) + sum_m [ log p(v_m | v_q) + sum_t log p(v_mt | v_m) ].
inline double log_posterior_freq(const PosteriorInstance& inst, const Tensor& vq, std::span<const Tensor> vm) {
  if (vm.size() != inst.groups.size()) throw Error("oracle: one v_m per group required");
  double f = detail::gauss_term(vq.data(), inst.prior.mean.data(), detail::prior_variance(inst));
  for (std::size_t m = 0; m < vm.size(); ++m) {
    const auto& g = inst.groups[m];
    detail::check_group(g);
    f += detail::gauss_term(vm[m].data(), vq.data(), g.system_sigma * g.system_sigma);
    for (const auto& v : g.values) f += detail::gauss_term(v.data(), vm[m].data(), g.random_sigma * g.random_sigma);
  }
  return f;
}

struct FreqGradient {
  Tensor vq;
  std::vector<Tensor> vm;
};

inline FreqGradient grad_log_posterior_freq(const PosteriorInstance& inst, const Tensor& vq,
                                            std::span<const Tensor> vm) {
  if (vm.size() != inst.groups.size()) throw Error("oracle: one v_m per group required");
  const double var_q = detail::prior_variance(inst);
  FreqGradient g{Tensor(vq.shape()), {}};
  for (std::size_t i = 0; i < vq.size(); ++i) g.vq[i] = -(vq[i] - inst.prior.mean[i]) / var_q;
  for (std::size_t m = 0; m < vm.size(); ++m) {
    const auto& grp = inst.groups[m];
    detail::check_group(grp);
    const double s2 = grp.system_sigma * grp.system_sigma;
    const double r2 = grp.random_sigma * grp.random_sigma;
    Tensor gm(vq.shape());
    for (std::size_t i = 0; i < vq.size(); ++i) {
      g.vq[i] += (vm[m][i] - vq[i]) / s2;
      gm[i] = -(vm[m][i] - vq[i]) / s2;
      for (const auto& v : grp.values) gm[i] += (v[i] - vm[m][i]) / r2;
    }
    g.vm.push_back(std::move(gm));
  }
  return g;
}

/// Intermediate sensor value at the stationary point, given v_q:
///   v_m = (v_q/sigma_m^2 + n v_bar/sigma'^2) / (1/sigma_m^2 + n/sigma'^2)
inline Tensor stationary_sensor_value(const DedupGroup& g, const Tensor& vq) {
  detail::check_group(g);
  const double a = 1.0 / (g.system_sigma * g.system_sigma);
  const double n = static_cast<double>(g.values.size());
  const double b = n / (g.random_sigma * g.random_sigma);
  Tensor out(vq.shape());
  for (std::size_t i = 0; i < vq.size(); ++i) {
    double bar = 0.0;
    for (const auto& v : g.values) bar += v[i];
    bar /= n;
    out[i] = (a * vq[i] + b * bar) / (a + b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// MAP search.

struct MapOptions {
  std::size_t random_starts = 5;
  std::size_t max_iterations = 10000;
  double grad_tolerance = 1e-9;
  std::uint64_t seed = 0x5eed;
};

struct MapResult {
  Tensor vq;
  std::vector<Tensor> vm;  // freq mode only
  double log_posterior = -std::numeric_limits<double>::infinity();
  double grad_inf_norm = 0.0;
  std::size_t iterations = 0;  // of the winning start
};

namespace detail {

// The search runs over one flat vector: v_q followed by v_1..v_M.
struct FlatProblem {
  const PosteriorInstance& inst;
  std::size_t d;
  std::size_t blocks;

  double value(std::span<const double> x) const {
    Tensor vq = block(x, 0);
    if (inst.mode == PosteriorMode::base) return log_posterior_base(inst, vq);
    std::vector<Tensor> vm;
    for (std::size_t m = 1; m < blocks; ++m) vm.push_back(block(x, m));
    return log_posterior_freq(inst, vq, vm);
  }

  std::vector<double> gradient(std::span<const double> x) const {
    Tensor vq = block(x, 0);
    std::vector<double> g;
    g.reserve(x.size());
    if (inst.mode == PosteriorMode::base) {
      Tensor gq = grad_log_posterior_base(inst, vq);
      g.assign(gq.data().begin(), gq.data().end());
      return g;
    }
    std::vector<Tensor> vm;
    for (std::size_t m = 1; m < blocks; ++m) vm.push_back(block(x, m));
    FreqGradient fg = grad_log_posterior_freq(inst, vq, vm);
    g.insert(g.end(), fg.vq.data().begin(), fg.vq.data().end());
    for (const auto& t : fg.vm) g.insert(g.end(), t.data().begin(), t.data().end());
    return g;
  }

  // Diagonal of the negative Hessian per block, read off the quadratic form.
  std::vector<double> curvature() const {
    std::vector<double> c(blocks);
    c[0] = inst.prior.precision;
    if (inst.mode == PosteriorMode::base) {
      for (const auto& m : inst.measurements) c[0] += m.precision;
      return c;
    }
    for (std::size_t m = 0; m + 1 < blocks; ++m) {
      const auto& g = inst.groups[m];
      const double a = 1.0 / (g.system_sigma * g.system_sigma);
      c[0] += a;
      c[m + 1] = a + static_cast<double>(g.values.size()) / (g.random_sigma * g.random_sigma);
    }
    return c;
  }

  Tensor block(std::span<const double> x, std::size_t b) const {
    return Tensor({d}, std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(b * d),
                                           x.begin() + static_cast<std::ptrdiff_t>((b + 1) * d)));
  }
};

struct AscentOutcome {
  std::vector<double> x;
  double f;
  double grad_inf;
  std::size_t iterations;
  bool converged;
};

// Diagonally preconditioned gradient ascent. The first trial step of each
// iteration is the Barzilai-Borwein length, then Armijo backtracking halves it
// until sufficient increase. When the promised increase falls below the
// resolution of f, the step is accepted if it shrinks the gradient instead.
inline AscentOutcome ascend(const FlatProblem& prob, std::vector<double> x, const MapOptions& opt) {
  const std::vector<double> curv = prob.curvature();
  const std::size_t n = x.size();
  auto precond = [&](const std::vector<double>& g) {
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = g[i] / curv[i / prob.d];
    return s;
  };
  double f = prob.value(x);
  std::vector<double> g = prob.gradient(x);
  double alpha = 1.0;
  std::vector<double> x_prev, g_prev;
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    const double gi = inf_norm(g);
    if (gi <= opt.grad_tolerance) return {x, f, gi, it, true};
    const std::vector<double> dir = precond(g);
    if (!x_prev.empty()) {
      // BB1 step in the preconditioned metric: <s, s_D> / <s, y>, y = -(g - g_prev)
      double ss = 0.0, sy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double s = x[i] - x_prev[i];
        const double y = -(g[i] - g_prev[i]);
        ss += s * s * curv[i / prob.d];
        sy += s * y;
      }
      alpha = (sy > 0.0) ? ss / sy : 1.0;
    }
    const double slope = dot(g, dir);
    std::vector<double> trial(n);
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      for (std::size_t i = 0; i < n; ++i) trial[i] = x[i] + alpha * dir[i];
      const double ft = prob.value(trial);
      const double promised = 1e-4 * alpha * slope;
      if (ft >= f + promised) {
        accepted = true;
        f = ft;
        break;
      }
      if (promised < 1e-15 * (1.0 + std::abs(f))) {
        const auto gt = prob.gradient(trial);
        if (inf_norm(gt) < gi) {
          accepted = true;
          f = ft;
          break;
        }
      }
      alpha *= 0.5;
    }
    if (!accepted) return {x, f, gi, it, false};
    x_prev = x;
    g_prev = g;
    x = trial;
    g = prob.gradient(x);
  }
  const double gi = inf_norm(g);
  return {x, f, gi, opt.max_iterations, gi <= opt.grad_tolerance};
}

}  // namespace detail

/// Numerical MAP estimate: gradient ascent from the prior mean and from
/// `random_starts` perturbed points; the best terminal point wins.
inline MapResult map_argmax(const PosteriorInstance& inst, const MapOptions& opt = {}) {
  const std::size_t d = inst.prior.mean.size();
  if (d == 0) throw Error("oracle: empty prior mean");
  detail::prior_variance(inst);
  if (inst.mode == PosteriorMode::base) {
    for (const auto& m : inst.measurements) {
      detail::measurement_variance(m);
      if (m.value.size() != d) throw Error("oracle: measurement dimension mismatch");
    }
  } else {
    for (const auto& g : inst.groups) {
      detail::check_group(g);
      for (const auto& v : g.values)
        if (v.size() != d) throw Error("oracle: group value dimension mismatch");
    }
  }
  const std::size_t blocks = inst.mode == PosteriorMode::base ? 1 : 1 + inst.groups.size();
  const detail::FlatProblem prob{inst, d, blocks};

  std::vector<double> base_start;
  for (std::size_t b = 0; b < blocks; ++b)
    base_start.insert(base_start.end(), inst.prior.mean.data().begin(), inst.prior.mean.data().end());

  Rng rng(opt.seed);
  MapResult best;
  bool have = false;
  std::string diag;
  for (std::size_t s = 0; s <= opt.random_starts; ++s) {
    std::vector<double> x0 = base_start;
    if (s > 0)
      for (auto& x : x0) x += rng.normal(0.0, 3.0);
    detail::AscentOutcome o = detail::ascend(prob, std::move(x0), opt);
    if (!o.converged) {
      diag += " start " + std::to_string(s) + ": grad_inf=" + std::to_string(o.grad_inf) +
              " after " + std::to_string(o.iterations) + " iterations;";
      continue;
    }
    if (!have || o.f > best.log_posterior) {
      have = true;
      best.vq = prob.block(o.x, 0);
      best.vm.clear();
      for (std::size_t b = 1; b < blocks; ++b) best.vm.push_back(prob.block(o.x, b));
      best.log_posterior = o.f;
      best.grad_inf_norm = o.grad_inf;
      best.iterations = o.iterations;
    }
  }
  if (!have) throw Error("map_argmax: no start converged within " + std::to_string(opt.max_iterations) + " iterations;" + diag);
  if (!diag.empty()) throw Error("map_argmax: some starts failed to converge;" + diag);
  return best;
}

/// Closed-form estimate for the instance (the kernels under test).
inline Tensor closed_form(const PosteriorInstance& inst) {
  if (inst.mode == PosteriorMode::base) return kfatt_base(inst.prior, inst.measurements).estimate;
  return kfatt_freq(inst.prior, inst.groups).estimate;
}

// ---------------------------------------------------------------------------
// Random instances and the certification suite.

struct InstanceSpec {
  std::size_t dim = 4;
  std::size_t max_items = 10;  // T or M
  std::size_t max_group = 5;   // n_m upper bound
  double sigma_lo = 0.1, sigma_hi = 10.0;
  double value_scale = 2.0;
};

inline double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

inline PosteriorInstance random_instance(Rng& rng, PosteriorMode mode, const InstanceSpec& spec) {
  PosteriorInstance inst;
  inst.mode = mode;
  const std::size_t d = spec.dim;
  inst.prior.mean = rng.normal_tensor({d}, spec.value_scale);
  const double sq = log_uniform(rng, spec.sigma_lo, spec.sigma_hi);
  inst.prior.precision = 1.0 / (sq * sq);
  const std::size_t count = rng.index(spec.max_items + 1);
  for (std::size_t i = 0; i < count; ++i) {
    if (mode == PosteriorMode::base) {
      const double s = log_uniform(rng, spec.sigma_lo, spec.sigma_hi);
      inst.measurements.push_back({rng.normal_tensor({d}, spec.value_scale), 1.0 / (s * s)});
    } else {
      DedupGroup g;
      g.key = rng.normal_tensor({d});
      const std::size_t n = 1 + rng.index(spec.max_group);
      for (std::size_t t = 0; t < n; ++t) g.values.push_back(rng.normal_tensor({d}, spec.value_scale));
      g.system_sigma = log_uniform(rng, spec.sigma_lo, spec.sigma_hi);
      g.random_sigma = log_uniform(rng, spec.sigma_lo, spec.sigma_hi);
      inst.groups.push_back(std::move(g));
    }
  }
  return inst;
}

struct CheckRow {
  CheckRow() = default;
  CheckRow(std::string n, double tol) : name(std::move(n)), tolerance(tol) {}

  std::string name;
  std::size_t cases = 0;
  double worst = 0.0;  // worst observed error
  double tolerance = 0.0;
  bool pass = true;
  std::string note;
};

struct CertificationReport {
  std::vector<CheckRow> rows;
  double seconds = 0.0;
  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.pass ? 0 : 1;
    return n;
  }
};

struct CertificationOptions {
  std::size_t instances_per_mode = 200;
  std::size_t degeneration_instances = 100;
  std::uint64_t seed = 2020;
  double map_tolerance = 1e-6;
};

inline void record(CheckRow& row, double err) {
  ++row.cases;
  if (!(err <= row.worst)) row.worst = std::isfinite(err) ? std::max(row.worst, err) : err;
  if (!(err <= row.tolerance)) row.pass = false;
}

/// Runs every closed-form certification and identity check.
inline CertificationReport certify(const CertificationOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  CertificationReport rep;
  Rng root(opt.seed);
  static constexpr std::size_t dims[] = {1, 2, 4, 8};

  CheckRow base_map{"closed form vs MAP (base)", opt.map_tolerance};
  CheckRow freq_map{"closed form vs MAP (freq)", opt.map_tolerance};
  CheckRow curvature{"base curvature = -(total precision)", 1e-4};
  CheckRow stationary{"freq stationarity at closed form", 1e-8};
  CheckRow sensor{"freq v_m matches stationarity formula", 1e-8};
  CheckRow grad_base{"base log-posterior gradient vs finite diff", 1e-6};

  for (std::size_t i = 0; i < opt.instances_per_mode; ++i) {
    Rng rng = root.split(i);
    InstanceSpec spec;
    spec.dim = dims[i % 4];
    MapOptions mo;
    mo.seed = opt.seed * 7919 + i;
    mo.grad_tolerance = 1e-11;

    // base
    {
      PosteriorInstance inst = random_instance(rng, PosteriorMode::base, spec);
      const Tensor cf = closed_form(inst);
      try {
        const MapResult r = map_argmax(inst, mo);
        record(base_map, max_abs_diff(r.vq, cf));
      } catch (const Error& e) {
        record(base_map, std::numeric_limits<double>::infinity());
        base_map.note = e.what();
      }
      double total = inst.prior.precision;
      for (const auto& m : inst.measurements) total += m.precision;
      for (int k = 0; k < 10; ++k) {
        Tensor u = rng.normal_tensor({spec.dim});
        const double un = std::sqrt(squared_norm(u.data()));
        for (auto& x : u.data()) x /= un;
        const double h = 1e-2;
        Tensor xp = cf, xm = cf;
        for (std::size_t j = 0; j < u.size(); ++j) {
          xp[j] += h * u[j];
          xm[j] -= h * u[j];
        }
        const double c = (log_posterior_base(inst, xp) - 2.0 * log_posterior_base(inst, cf) +
                          log_posterior_base(inst, xm)) / (h * h);
        record(curvature, relative_error(c, -total));
      }
      Tensor at = rng.normal_tensor({spec.dim}, 2.0);
      const Tensor fd = finite_diff_grad([&](const Tensor& v) { return log_posterior_base(inst, v); }, at);
      const Tensor an = grad_log_posterior_base(inst, at);
      double worst = 0.0;
      for (std::size_t j = 0; j < fd.size(); ++j) worst = std::max(worst, relative_error(fd[j], an[j], 1e-6));
      record(grad_base, worst);
    }
    // freq
    {
      PosteriorInstance inst = random_instance(rng, PosteriorMode::freq, spec);
      const Tensor cf = closed_form(inst);
      std::vector<Tensor> vm;
      for (const auto& g : inst.groups) vm.push_back(stationary_sensor_value(g, cf));
      const FreqGradient fg = grad_log_posterior_freq(inst, cf, vm);
      double gmax = inf_norm(fg.vq.data());
      for (const auto& t : fg.vm) gmax = std::max(gmax, inf_norm(t.data()));
      record(stationary, gmax);
      try {
        const MapResult r = map_argmax(inst, mo);
        record(freq_map, max_abs_diff(r.vq, cf));
        double worst = 0.0;
        for (std::size_t m = 0; m < vm.size(); ++m) worst = std::max(worst, max_abs_diff(r.vm[m], vm[m]));
        record(sensor, worst);
      } catch (const Error& e) {
        record(freq_map, std::numeric_limits<double>::infinity());
        freq_map.note = e.what();
      }
    }
  }

  // Degeneration identities.
  CheckRow deg_vanilla{"base(no prior, exp-dot precisions) = vanilla", 1e-12};
  CheckRow deg_freq{"freq(n=1, sigma'=0) = base", 1e-12};
  for (std::size_t i = 0; i < opt.degeneration_instances; ++i) {
    Rng rng = root.split(1'000'000 + i);
    const std::size_t d = dims[i % 4];
    const std::size_t T = 1 + rng.index(10);
    const Tensor q = rng.normal_tensor({d});
    std::vector<Tensor> keys, values;
    std::vector<Measurement> ms;
    std::vector<DedupGroup> groups;
    for (std::size_t t = 0; t < T; ++t) {
      keys.push_back(rng.normal_tensor({d}));
      values.push_back(rng.normal_tensor({d}, 2.0));
      const double p = std::exp(dot(q.data(), keys.back().data()));
      ms.push_back({values.back(), p});
      groups.push_back({keys.back(), {values.back()}, 1.0 / std::sqrt(p), 0.0});
    }
    const QueryPrior none{Tensor({d}), 0.0};
    const Fusion van = vanilla_attention(q, keys, values);
    const Fusion base = kfatt_base(none, ms);
    record(deg_vanilla, max_abs_diff(van.estimate, base.estimate));

    QueryPrior prior{rng.normal_tensor({d}), log_uniform(rng, 0.01, 100.0)};
    std::vector<Measurement> ms2;
    for (auto& g : groups) {
      g.system_sigma = log_uniform(rng, 0.1, 10.0);
      ms2.push_back({g.values[0], 1.0 / (g.system_sigma * g.system_sigma)});
    }
    record(deg_freq, max_abs_diff(kfatt_freq(prior, groups).estimate, kfatt_base(prior, ms2).estimate));
  }

  // Frequency cap: w(n) nondecreasing and approaching 1/sigma_m^2.
  CheckRow cap{"capped weight monotone, sup = 1/sigma_m^2", 1e-9};
  for (std::size_t i = 0; i < opt.degeneration_instances; ++i) {
    Rng rng = root.split(2'000'000 + i);
    const double sm = log_uniform(rng, 0.1, 10.0), sr = log_uniform(rng, 0.1, 10.0);
    const double p = 1.0 / (sm * sm);
    double prev = 0.0, worst = 0.0;
    for (double n : {1.0, 10.0, 1000.0, 1e6, 1e12}) {
      const double w = capped_weight(p, sr, n);
      if (w < prev || w > p * (1.0 + 1e-15)) worst = std::numeric_limits<double>::infinity();
      prev = w;
    }
    worst = std::max(worst, std::abs(capped_weight(p, sr, 1e18) - p) / p);
    record(cap, worst);
  }

  rep.rows = {base_map, freq_map, curvature, stationary, sensor, grad_base, deg_vanilla, deg_freq, cap};
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline std::string format_report(const CertificationReport& rep) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-46s %7s %12s %10s  %s\n", "check", "cases", "worst", "tol", "result");
  out += buf;
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof buf, "%-46s %7zu %12.3e %10.1e  %s\n", r.name.c_str(), r.cases, r.worst, r.tolerance,
                  r.pass ? "PASS" : "FAIL");
    out += buf;
    if (!r.note.empty()) out += "    note: " + r.note + "\n";
  }
  std::snprintf(buf, sizeof buf, "failures: %zu   elapsed: %.2fs\n", rep.failures(), rep.seconds);
  out += buf;
  return out;
}

}  // namespace kfatt::oracle
