// Synthetic behavior logs with a known latent interest process.
//
// Categories carry latent centroids. Every query and item belongs to one
// category and sits at a random offset from its centroid. A user's interest
// under query q is mu_q + o(u, c), where the per-(user, category) offset o is
// drawn independently for every category, so clicks in one category say
// nothing about another. A click lands on the item nearest that interest
// point after adding observation noise.
//
// Category popularity follows a Zipf law. Each user draws a few preferred
// categories by popularity and keeps a favorite query in each one, which
// produces long runs of repeated queries in the log.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "kfatt/dataset.hpp"
#include "kfatt/numerics.hpp"

namespace kfatt::datagen {

struct GenConfig {
  std::uint64_t seed = 2020;
  std::size_t num_users = 5000;
  std::size_t num_categories = 40;
  std::size_t queries_per_category = 10;
  std::size_t items_per_category = 20;
  std::size_t latent_dim = 8;
  std::size_t min_behaviors = 10;
  std::size_t max_behaviors = 40;
  std::size_t preferred_categories = 4;
  std::size_t occasional_categories = 2;  // drawn uniformly, outside the preferred set
  double occasional_prob = 0.1;           // share of clicks spent on occasional categories
  double new_query_prob = 0.3;
  double skew = 1.2;                 // Zipf exponent over category popularity
  double favorite_query_prob = 0.9;  // chance a click reuses the category's favorite query
  std::size_t train_targets = 2;
  std::size_t negatives = 4;         // negatives per positive
  double session_break_prob = 0.2;
  std::int64_t max_within_gap = 20;  // minutes between clicks of one session
  double between_gap_mean = 720.0;   // mean extra minutes between sessions (on top of 30)
  double category_spread = 1.0;
  double query_spread = 0.5;
  double item_spread = 1.0;
  double user_spread = 0.5;
  double click_noise = 0.3;
  double infreq_quantile = 0.25;
  long long infreq_threshold = -1;   // explicit threshold; -1 uses the quantile

  /// Human-readable problems; empty when the config is usable.
  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    auto need = [&](bool ok, const char* msg) {
      if (!ok) p.emplace_back(msg);
    };
    need(num_users > 0, "num_users must be positive");
    need(num_categories >= 2, "num_categories must be at least 2");
    need(queries_per_category > 0, "queries_per_category must be positive");
    need(items_per_category > negatives, "items_per_category must exceed negatives");
    need(latent_dim > 0, "latent_dim must be positive");
    need(min_behaviors > 0 && min_behaviors <= max_behaviors, "need 0 < min_behaviors <= max_behaviors");
    need(preferred_categories > 0 && preferred_categories + occasional_categories < num_categories,
         "need preferred_categories >= 1 and preferred + occasional < num_categories");
    need(occasional_prob >= 0.0 && occasional_prob <= 1.0, "occasional_prob must be in [0, 1]");
    need(new_query_prob >= 0.0 && new_query_prob <= 1.0, "new_query_prob must be in [0, 1]");
    need(favorite_query_prob >= 0.0 && favorite_query_prob <= 1.0, "favorite_query_prob must be in [0, 1]");
    need(session_break_prob >= 0.0 && session_break_prob <= 1.0, "session_break_prob must be in [0, 1]");
    need(skew >= 0.0, "skew must be non-negative");
    need(max_within_gap >= 1 && max_within_gap < 30, "max_within_gap must be in [1, 30)");
    need(between_gap_mean >= 0.0, "between_gap_mean must be non-negative");
    need(category_spread >= 0.0 && query_spread >= 0.0 && item_spread >= 0.0 && user_spread >= 0.0 &&
             click_noise >= 0.0,
         "spreads and click_noise must be non-negative");
    need(infreq_quantile >= 0.0 && infreq_quantile <= 1.0, "infreq_quantile must be in [0, 1]");
    return p;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid datagen config:";
    for (const auto& s : p) msg += "\n  " + s;
    throw Error(msg);
  }
};

/// Popularity weights proportional to 1 / rank^skew, normalized.
inline std::vector<double> zipf_weights(std::size_t n, double skew) {
  std::vector<double> w(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) total += (w[k] = std::pow(static_cast<double>(k + 1), -skew));
  for (auto& x : w) x /= total;
  return w;
}

class World {
 public:
  explicit World(const GenConfig& cfg)
      : cats_(cfg.num_categories),
        qpc_(cfg.queries_per_category),
        ipc_(cfg.items_per_category),
        dim_(cfg.latent_dim),
        user_spread_(cfg.user_spread),
        offsets_(Rng(cfg.seed).split(1)),
        weights_(zipf_weights(cfg.num_categories, cfg.skew)) {
    Rng rng = Rng(cfg.seed).split(0);
    for (std::size_t c = 0; c < cats_; ++c) centroids_.push_back(rng.normal_tensor({dim_}, cfg.category_spread));
    for (std::size_t c = 0; c < cats_; ++c)
      for (std::size_t j = 0; j < qpc_; ++j) queries_.push_back(jitter(centroids_[c], rng, cfg.query_spread));
    for (std::size_t c = 0; c < cats_; ++c)
      for (std::size_t j = 0; j < ipc_; ++j) items_.push_back(jitter(centroids_[c], rng, cfg.item_spread));
  }

  std::size_t num_categories() const { return cats_; }
  std::size_t num_queries() const { return cats_ * qpc_; }
  std::size_t num_items() const { return cats_ * ipc_; }
  std::size_t queries_per_category() const { return qpc_; }
  std::size_t items_per_category() const { return ipc_; }
  const std::vector<double>& category_weights() const { return weights_; }

  std::size_t query_id(std::size_t category, std::size_t j) const { return 1 + category * qpc_ + j; }
  std::size_t item_id(std::size_t category, std::size_t j) const { return 1 + category * ipc_ + j; }
  std::size_t category_of_query(std::size_t id) const { return (checked(id, num_queries(), "query") - 1) / qpc_; }
  std::size_t category_of_item(std::size_t id) const { return (checked(id, num_items(), "item") - 1) / ipc_; }

  const Tensor& category_centroid(std::size_t c) const { return centroids_.at(c); }
  const Tensor& query_centroid(std::size_t id) const { return queries_[checked(id, num_queries(), "query") - 1]; }
  const Tensor& item_latent(std::size_t id) const { return items_[checked(id, num_items(), "item") - 1]; }

  /// User-specific shift of interest within a category.
  Tensor user_offset(std::size_t user, std::size_t category) const {
    Rng r = offsets_.split(user).split(category);
    return r.normal_tensor({dim_}, user_spread_);
  }

  /// The user's true interest point under a query.
  Tensor interest(std::size_t user, std::size_t query) const {
    Tensor t = user_offset(user, category_of_query(query));
    const Tensor& mu = query_centroid(query);
    for (std::size_t i = 0; i < dim_; ++i) t[i] += mu[i];
    return t;
  }

  /// Item of `category` closest to `point`.
  std::size_t nearest_item(std::size_t category, const Tensor& point) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < ipc_; ++j) {
      const Tensor& x = items_[category * ipc_ + j];
      double d = 0.0;
      for (std::size_t i = 0; i < dim_; ++i) d += (x[i] - point[i]) * (x[i] - point[i]);
      if (d < best_d) best_d = d, best = j;
    }
    return item_id(category, best);
  }

  std::size_t sample_category(Rng& rng) const { return rng.categorical(weights_); }

 private:
  static std::size_t checked(std::size_t id, std::size_t n, const char* what) {
    if (id == 0 || id > n) throw Error(std::string("world: ") + what + " id " + std::to_string(id) + " out of range");
    return id;
  }

  Tensor jitter(const Tensor& base, Rng& rng, double sd) const {
    Tensor t = base;
    for (auto& x : t.data()) x += rng.normal() * sd;
    return t;
  }

  std::size_t cats_, qpc_, ipc_, dim_;
  double user_spread_;
  Rng offsets_;
  std::vector<double> weights_;
  std::vector<Tensor> centroids_, queries_, items_;
};

// ---------------------------------------------------------------------------
// Subset tagging.

struct TrainStats {
  std::vector<std::size_t> category_clicks;  // clicks per category in hist + train
  std::size_t threshold = 0;                 // Infreq iff clicks < threshold
};

/// Value at the given quantile of the sorted counts (lower element).
inline std::size_t quantile_threshold(std::vector<std::size_t> counts, double q) {
  if (counts.empty()) return 0;
  std::sort(counts.begin(), counts.end());
  const auto idx = std::min(counts.size() - 1, static_cast<std::size_t>(std::floor(q * static_cast<double>(counts.size()))));
  return counts[idx];
}

inline TrainStats train_statistics(const Dataset& ds, const std::function<std::size_t(std::size_t)>& category_of_query,
                                   std::size_t num_categories, double quantile, long long explicit_threshold = -1) {
  TrainStats s;
  s.category_clicks.assign(num_categories, 0);
  for (const auto& r : ds.records)
    if (r.label == 1 && r.split != Split::test) ++s.category_clicks[category_of_query(r.query_id)];
  s.threshold = explicit_threshold >= 0 ? static_cast<std::size_t>(explicit_threshold)
                                        : quantile_threshold(s.category_clicks, quantile);
  return s;
}

/// Sets New / Infreq tags on every test record. New: the query's category
/// never occurs among the user's earlier clicks. Infreq: the category's train
/// click count is below the threshold.
inline void tag_subsets(Dataset& ds, const std::function<std::size_t(std::size_t)>& category_of_query,
                        const TrainStats& stats) {
  std::size_t i = 0;
  while (i < ds.records.size()) {
    std::size_t j = i;
    while (j < ds.records.size() && ds.records[j].user == ds.records[i].user) ++j;
    for (std::size_t k = i; k < j; ++k) {
      Record& r = ds.records[k];
      if (r.split != Split::test) {
        r.tags = kTagNone;
        continue;
      }
      const std::size_t cat = category_of_query(r.query_id);
      bool seen = false;
      for (std::size_t h = i; h < j && !seen; ++h) {
        const Record& e = ds.records[h];
        seen = e.label == 1 && e.split != Split::test && e.timestamp < r.timestamp &&
               category_of_query(e.query_id) == cat;
      }
      r.tags = kTagNone;
      if (!seen) r.tags |= kTagNew;
      if (stats.category_clicks[cat] < stats.threshold) r.tags |= kTagInfreq;
    }
    i = j;
  }
}

// ---------------------------------------------------------------------------
// Generation.

namespace detail {

inline std::vector<std::size_t> sample_distinct(Rng& rng, std::vector<double> weights, std::size_t k) {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < k; ++n) {
    const std::size_t c = rng.categorical(weights);
    out.push_back(c);
    weights[c] = 0.0;
  }
  return out;
}

struct UserState {
  std::vector<std::size_t> preferred;
  std::vector<double> preference;  // popularity of each preferred category
  std::vector<std::size_t> occasional;
  std::vector<std::size_t> occasional_favorite;
  std::vector<std::size_t> favorite;
  std::set<std::size_t> seen;      // categories among the user's clicks so far
  std::int64_t clock = 0;
};

inline std::optional<std::size_t> favorite_in(const UserState& st, std::size_t cat) {
  for (std::size_t i = 0; i < st.preferred.size(); ++i)
    if (st.preferred[i] == cat) return st.favorite[i];
  for (std::size_t i = 0; i < st.occasional.size(); ++i)
    if (st.occasional[i] == cat) return st.occasional_favorite[i];
  return std::nullopt;
}

}  // namespace detail

struct Generated {
  World world;
  Dataset dataset;
  TrainStats stats;
};

inline Generated generate(const GenConfig& cfg) {
  cfg.validate();
  World world(cfg);
  Dataset ds;
  ds.meta.num_users = cfg.num_users;
  ds.meta.num_queries = world.num_queries();
  ds.meta.num_items = world.num_items();
  ds.meta.num_categories = world.num_categories();

  const Rng root = Rng(cfg.seed).split(2);
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    Rng rng = root.split(u);
    detail::UserState st;
    st.preferred = detail::sample_distinct(rng, world.category_weights(), cfg.preferred_categories);
    for (std::size_t c : st.preferred) {
      st.preference.push_back(world.category_weights()[c]);
      st.favorite.push_back(world.query_id(c, rng.index(cfg.queries_per_category)));
    }
    {
      std::vector<double> rest(world.num_categories(), 1.0);
      for (std::size_t c : st.preferred) rest[c] = 0.0;
      st.occasional = detail::sample_distinct(rng, rest, cfg.occasional_categories);
      for (std::size_t c : st.occasional)
        st.occasional_favorite.push_back(world.query_id(c, rng.index(cfg.queries_per_category)));
    }
    st.clock = static_cast<std::int64_t>(rng.index(60 * 24 * 30));

    auto pick_query = [&](std::size_t cat, std::size_t favorite) {
      return rng.uniform() < cfg.favorite_query_prob ? favorite
                                                     : world.query_id(cat, rng.index(cfg.queries_per_category));
    };
    auto click = [&](std::size_t query) {
      Tensor p = world.interest(u, query);
      for (auto& x : p.data()) x += rng.normal() * cfg.click_noise;
      return world.nearest_item(world.category_of_query(query), p);
    };
    auto session_gap = [&] {
      return static_cast<std::int64_t>(30 + std::llround(-std::log(1.0 - rng.uniform()) * cfg.between_gap_mean));
    };

    const std::size_t n_hist = cfg.min_behaviors + rng.index(cfg.max_behaviors - cfg.min_behaviors + 1);
    for (std::size_t t = 0; t < n_hist; ++t) {
      if (t > 0)
        st.clock += rng.uniform() < cfg.session_break_prob ? session_gap()
                                                           : 1 + static_cast<std::int64_t>(rng.index(
                                                                     static_cast<std::size_t>(cfg.max_within_gap)));
      std::size_t cat, q;
      if (!st.occasional.empty() && rng.uniform() < cfg.occasional_prob) {
        const std::size_t slot = rng.index(st.occasional.size());
        cat = st.occasional[slot];
        q = pick_query(cat, st.occasional_favorite[slot]);
      } else {
        const std::size_t slot = rng.categorical(st.preference);
        cat = st.preferred[slot];
        q = pick_query(cat, st.favorite[slot]);
      }
      ds.records.push_back({u, st.clock, q, click(q), 1, Split::hist, kTagNone});
      st.seen.insert(cat);
    }

    for (std::size_t k = 0; k <= cfg.train_targets; ++k) {
      const Split split = k < cfg.train_targets ? Split::train : Split::test;
      st.clock += session_gap();
      std::vector<std::size_t> unseen;
      for (std::size_t c = 0; c < world.num_categories(); ++c)
        if (!st.seen.count(c)) unseen.push_back(c);
      std::size_t cat, q;
      if (!unseen.empty() && rng.uniform() < cfg.new_query_prob) {
        cat = unseen[rng.index(unseen.size())];
        q = world.query_id(cat, rng.index(cfg.queries_per_category));
      } else {
        const std::vector<std::size_t> seen(st.seen.begin(), st.seen.end());
        cat = seen[rng.index(seen.size())];
        q = pick_query(cat, detail::favorite_in(st, cat).value_or(world.query_id(cat, rng.index(cfg.queries_per_category))));
      }
      const std::size_t pos = click(q);
      ds.records.push_back({u, st.clock, q, pos, 1, split, kTagNone});
      std::vector<std::size_t> pool;
      for (std::size_t j = 0; j < cfg.items_per_category; ++j)
        if (world.item_id(cat, j) != pos) pool.push_back(world.item_id(cat, j));
      rng.shuffle(pool.begin(), pool.end());
      for (std::size_t n = 0; n < cfg.negatives; ++n) ds.records.push_back({u, st.clock, q, pool[n], 0, split, kTagNone});
      if (split == Split::train) st.seen.insert(cat);
    }
  }

  auto cat_of = [&](std::size_t q) { return world.category_of_query(q); };
  TrainStats stats = train_statistics(ds, cat_of, world.num_categories(), cfg.infreq_quantile, cfg.infreq_threshold);
  tag_subsets(ds, cat_of, stats);
  ds.meta.extra["infreq_threshold"] = std::to_string(stats.threshold);
  return {std::move(world), std::move(ds), std::move(stats)};
}

// ---------------------------------------------------------------------------
// Reference predictors with access to the latent process. They certify that
// the generated task has the intended structure.

inline double squared_distance(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

/// Closeness of the item to the user's true interest point.
inline double ground_truth_score(const World& w, const CtrInstance& inst) {
  return -squared_distance(w.item_latent(inst.item_id), w.interest(inst.user, inst.query_id));
}

/// Closeness of the item to the query's population centroid; ignores the user.
inline double population_prior_score(const World& w, const CtrInstance& inst) {
  return -squared_distance(w.item_latent(inst.item_id), w.query_centroid(inst.query_id));
}

/// Closeness of the item to the mean of the user's earlier clicks in the
/// query's category; constant when there are none.
inline double history_centroid_score(const World& w, const CtrInstance& inst) {
  const std::size_t cat = w.category_of_query(inst.query_id);
  Tensor mean(w.item_latent(inst.item_id).shape());
  std::size_t n = 0;
  for (const auto& e : inst.history.events) {
    if (w.category_of_item(e.item_id) != cat) continue;
    const Tensor& x = w.item_latent(e.item_id);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += x[i];
    ++n;
  }
  if (n == 0) return 0.0;
  for (auto& x : mean.data()) x /= static_cast<double>(n);
  return -squared_distance(w.item_latent(inst.item_id), mean);
}

}  // namespace kfatt::datagen
