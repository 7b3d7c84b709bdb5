// Latency and multiply-accumulate benchmarks over history length.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "kfatt/behavior_model.hpp"

namespace kfatt::bench {

/// A history of T clicks split into ceil(T / per_session) sessions of
/// consecutive-minute clicks, sessions an hour apart. Ids are drawn from the
/// model's vocabulary.
inline BehaviorLog synthetic_history(std::size_t T, std::size_t per_session, std::size_t num_queries,
                                     std::size_t num_items, Rng& rng) {
  BehaviorLog log;
  std::int64_t clock = 0;
  for (std::size_t t = 0; t < T; ++t) {
    clock += (t > 0 && t % per_session == 0) ? 60 : 1;
    log.events.push_back({clock, 1 + rng.index(num_queries), 1 + rng.index(num_items)});
  }
  return log;
}

/// Nearest-rank percentile of an unsorted sample, q in [0, 1].
inline double percentile(std::vector<double> xs, double q) {
  if (xs.empty()) throw Error("percentile of empty sample");
  std::sort(xs.begin(), xs.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(xs.size())));
  return xs[std::clamp<std::size_t>(rank, 1, xs.size()) - 1];
}

struct EncoderComparison {
  model::EncoderCost session;  // within-session attention
  model::EncoderCost full;     // one session spanning the whole history
  double attention_ratio() const {
    return static_cast<double>(session.attention_macs) / static_cast<double>(full.attention_macs);
  }
  double total_ratio() const {
    return static_cast<double>(session.attention_macs + session.projection_macs) /
           static_cast<double>(full.attention_macs + full.projection_macs);
  }
};

/// Encoder MACs at history length T, session-restricted versus full.
inline EncoderComparison compare_encoder_cost(model::ModelConfig cfg, std::size_t T, std::uint64_t seed = 7) {
  cfg.kernel = model::Kernel::transformer;
  Rng rng(seed);
  const BehaviorLog log = synthetic_history(T, cfg.max_per_session, cfg.num_queries, cfg.num_items, rng);
  EncoderComparison out;
  cfg.single_session = false;
  model::Model(cfg, seed).encode_history(log, &out.session);
  cfg.single_session = true;
  model::Model(cfg, seed).encode_history(log, &out.full);
  return out;
}

struct BenchConfig {
  std::vector<model::Kernel> kernels{model::Kernel::vanilla, model::Kernel::transformer, model::Kernel::kfatt_base,
                                     model::Kernel::kfatt_freq};
  std::vector<std::size_t> lengths{25, 50, 100, 250};
  std::size_t reps = 200;
  std::uint64_t seed = 7;
};

struct BenchRow {
  std::string kernel;
  std::size_t length = 0;
  std::size_t sessions = 0;
  double p50_us = 0.0;
  double p99_us = 0.0;
  std::uint64_t macs = 0;  // per forward pass
};

/// Times full CTR forward passes on one thread. MACs are counted on a
/// separate untimed pass.
inline std::vector<BenchRow> bench_latency(const model::ModelConfig& base, const BenchConfig& bc) {
  if (bc.reps < 200) throw Error("bench: at least 200 repetitions required");
  std::vector<BenchRow> rows;
  for (model::Kernel k : bc.kernels) {
    model::ModelConfig cfg = base;
    cfg.kernel = k;
    const model::Model m(cfg, bc.seed);
    for (std::size_t T : bc.lengths) {
      if (T == 0) throw Error("bench: lengths must be positive");
      Rng rng = Rng(bc.seed).split(T);
      CtrInstance inst;
      inst.history = synthetic_history(T, cfg.max_per_session, cfg.num_queries, cfg.num_items, rng);
      inst.query_id = 1 + rng.index(cfg.num_queries);
      inst.item_id = 1 + rng.index(cfg.num_items);
      BenchRow row{std::string(model::to_string(k)), T, (T + cfg.max_per_session - 1) / cfg.max_per_session};
      {
        MacScope scope;
        (void)m.predict(inst);
        row.macs = scope.count();
      }
      std::vector<double> us;
      us.reserve(bc.reps);
      volatile double sink = 0.0;
      for (std::size_t r = 0; r < bc.reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        sink = sink + m.predict(inst);
        us.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count());
      }
      row.p50_us = percentile(us, 0.50);
      row.p99_us = percentile(us, 0.99);
      rows.push_back(row);
    }
  }
  return rows;
}

inline std::string format_bench(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  char buf[64];
  for (const auto& r : rows) {
    os << "name=" << r.kernel << " length=" << r.length << " sessions=" << r.sessions;
    std::snprintf(buf, sizeof buf, " p50_us=%.2f p99_us=%.2f", r.p50_us, r.p99_us);
    os << buf << " macs=" << r.macs << '\n';
  }
  return os.str();
}

}  // namespace kfatt::bench
