// Small tour of the fusion kernels and the behavior model.
//
//   ./build/kfatt_example
#include <cstdio>

#include "kfatt/attention.hpp"
#include "kfatt/behavior_model.hpp"

using namespace kfatt;

namespace {

void print(const char* label, const Fusion& f) {
  std::printf("%-34s estimate=(%.3f, %.3f) prior weight=%.3f\n", label, f.estimate[0], f.estimate[1],
              f.weights.prior_weight);
}

}  // namespace

int main() {
  // Population prior for the current query: interest near the origin.
  const QueryPrior prior{Tensor::vec({0.0, 0.0}), 1.0};

  // Two past queries. The user searched the first one three times and
  // clicked near (2, 1) each time; the second once, clicking near (-1, 3).
  DedupGroup shoes{Tensor::vec({1.0, 0.0}), {Tensor::vec({2.0, 1.0}), Tensor::vec({2.2, 0.9}), Tensor::vec({1.9, 1.1})},
                   /*system_sigma=*/1.0, /*random_sigma=*/0.5};
  DedupGroup boots{Tensor::vec({0.0, 1.0}), {Tensor::vec({-1.0, 3.0})}, 1.0, 0.5};

  std::vector<Measurement> flat;
  for (const auto* g : {&shoes, &boots})
    for (const auto& v : g->values) flat.push_back({v, 1.0});

  print("base (each click counts once)", kfatt_base(prior, flat));
  print("freq (repeats share one sensor)", kfatt_freq(prior, std::vector{shoes, boots}));

  // Ten more repeats of the first query pull the base estimate further, while
  // the frequency-aware weight saturates at 1 / system_sigma^2.
  for (int i = 0; i < 10; ++i) {
    shoes.values.push_back(Tensor::vec({2.0, 1.0}));
    flat.push_back({Tensor::vec({2.0, 1.0}), 1.0});
  }
  print("base after 10 repeats", kfatt_base(prior, flat));
  print("freq after 10 repeats", kfatt_freq(prior, std::vector{shoes, boots}));
  for (double n : {1.0, 3.0, 13.0, 1000.0})
    std::printf("  capped weight at n=%-6g %.4f (cap 1.0)\n", n, capped_weight(1.0, 0.5, n));

  // The same kernels inside the CTR model.
  model::ModelConfig cfg;
  cfg.kernel = model::Kernel::kfatt_freq;
  cfg.num_queries = 20;
  cfg.num_items = 50;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_k = cfg.d_v = 4;
  cfg.mlp_hidden = 16;
  cfg.head_hidden = 8;
  const model::Model m(cfg, /*seed=*/1);

  CtrInstance x;
  x.query_id = 3;
  x.item_id = 17;
  x.history.events = {{0, 3, 12}, {4, 3, 15}, {9, 7, 40}, {300, 3, 17}};
  std::printf("untrained kfatt_freq click probability: %.4f\n", m.predict(x));
  x.history.events.clear();
  std::printf("same impression with no history:        %.4f\n", m.predict(x));
  return 0;
}
