// Mini-batch training of the behavior model with Adam.
//
// Impressions that share user, timestamp and query form a group; the group is
// the unit of shuffling and batching so its interest estimate is built once.
// Training runs on one thread and visits groups in an order fixed by the seed,
// which makes the loss trajectory reproducible bit for bit.

#pragma once

#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "kfatt/autodiff.hpp"
#include "kfatt/behavior_model.hpp"
#include "kfatt/dataset.hpp"

namespace kfatt {

struct ImpressionGroup {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

/// Maximal runs of consecutive instances with equal (user, timestamp, query).
inline std::vector<ImpressionGroup> group_impressions(const std::vector<CtrInstance>& xs) {
  std::vector<ImpressionGroup> out;
  for (std::size_t i = 0; i < xs.size();) {
    std::size_t j = i + 1;
    while (j < xs.size() && xs[j].user == xs[i].user && xs[j].timestamp == xs[i].timestamp &&
           xs[j].query_id == xs[i].query_id)
      ++j;
    out.push_back({i, j});
    i = j;
  }
  return out;
}

struct TrainConfig {
  double lr = 0.003;
  std::size_t epochs = 4;
  std::size_t batch_size = 32;  // groups per update
  std::uint64_t seed = 1;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;  // mean BCE per impression over the epoch
};

inline std::vector<EpochLog> train(model::Model& m, const std::vector<CtrInstance>& data, const TrainConfig& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (cfg.batch_size == 0) throw Error("train: batch_size must be positive");
  if (data.empty()) throw Error("train: no training instances");
  const auto groups = group_impressions(data);
  ad::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  ad::Adam adam(adam_cfg);
  std::vector<Tensor> grads = m.params().zeros_like();
  std::vector<std::size_t> order(groups.size());
  std::vector<EpochLog> log;
  const Rng root = Rng(cfg.seed).split(0x7472);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = root.split(epoch);
    shuffle.shuffle(order.begin(), order.end());
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      for (auto& g : grads) g.fill(0.0);
      std::size_t batch_n = 0;
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      for (std::size_t k = start; k < stop; ++k) {
        const ImpressionGroup& g = groups[order[k]];
        total += m.accumulate_group_gradient(std::span(data).subspan(g.begin, g.size()), grads);
        batch_n += g.size();
      }
      const double inv = 1.0 / static_cast<double>(batch_n);
      for (auto& g : grads)
        for (auto& x : g.data()) x *= inv;
      adam.step(m.params().values(), grads);
      seen += batch_n;
    }
    log.push_back({epoch, total / static_cast<double>(seen)});
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

}  // namespace kfatt
