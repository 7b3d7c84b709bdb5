// AUC and the All / New / Infreq evaluation table.

#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "kfatt/behavior_model.hpp"
#include "kfatt/dataset.hpp"
#include "kfatt/train.hpp"

namespace kfatt {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;

  void add(double score, int label) {
    scores.push_back(score);
    labels.push_back(label);
  }
  std::size_t n_pos() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
  std::size_t n_neg() const { return labels.size() - n_pos(); }
};

/// half: tied (negative, positive) pairs count 1/2. strict: ties count 0.
enum class TieMode { half, strict };

namespace detail {
inline void check_auc_input(const ScoredSet& s) {
  if (s.scores.size() != s.labels.size()) throw Error("auc: scores and labels differ in length");
  for (int y : s.labels)
    if (y != 0 && y != 1) throw Error("auc: labels must be 0 or 1");
  if (s.n_pos() == 0 || s.n_neg() == 0) throw Error("AUC undefined");
}
}  // namespace detail

/// Mann-Whitney AUC in O(n log n): sort once, then walk runs of equal scores.
inline double auc(const ScoredSet& s, TieMode ties = TieMode::half) {
  detail::check_auc_input(s);
  std::vector<std::size_t> idx(s.scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  double correct = 0.0;
  double neg_below = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) {
      (s.labels[idx[j]] == 1 ? pos : neg) += 1.0;
      ++j;
    }
    correct += pos * neg_below;
    if (ties == TieMode::half) correct += 0.5 * pos * neg;
    neg_below += neg;
    i = j;
  }
  return correct / (static_cast<double>(s.n_pos()) * static_cast<double>(s.n_neg()));
}

/// Direct double loop over (negative, positive) pairs.
inline double auc_bruteforce(const ScoredSet& s, TieMode ties = TieMode::half) {
  detail::check_auc_input(s);
  double correct = 0.0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    if (s.labels[i] != 0) continue;
    for (std::size_t j = 0; j < s.scores.size(); ++j) {
      if (s.labels[j] != 1) continue;
      if (s.scores[i] < s.scores[j]) correct += 1.0;
      else if (s.scores[i] == s.scores[j] && ties == TieMode::half) correct += 0.5;
    }
  }
  return correct / (static_cast<double>(s.n_pos()) * static_cast<double>(s.n_neg()));
}

struct SubsetResult {
  std::string subset;
  std::optional<double> auc;  // empty when a class is missing
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

struct EvalTable {
  std::vector<SubsetResult> rows;  // All, New, Infreq

  const SubsetResult& at(const std::string& subset) const {
    for (const auto& r : rows)
      if (r.subset == subset) return r;
    throw Error("no subset '" + subset + "'");
  }
};

/// AUC per subset for precomputed scores aligned with `test`.
inline EvalTable evaluate_scores(const std::vector<CtrInstance>& test, std::span<const double> scores,
                                 TieMode ties = TieMode::half) {
  if (scores.size() != test.size()) throw Error("evaluate: one score per instance required");
  ScoredSet all, fresh, infreq;
  for (std::size_t i = 0; i < test.size(); ++i) {
    all.add(scores[i], test[i].label);
    if (test[i].is_new()) fresh.add(scores[i], test[i].label);
    if (test[i].is_infreq()) infreq.add(scores[i], test[i].label);
  }
  EvalTable t;
  for (auto [name, set] : {std::pair{"All", &all}, {"New", &fresh}, {"Infreq", &infreq}}) {
    SubsetResult r{name, std::nullopt, set->n_pos(), set->n_neg()};
    if (r.n_pos > 0 && r.n_neg > 0) r.auc = auc(*set, ties);
    t.rows.push_back(r);
  }
  return t;
}

/// Scores every instance. Groups are scored independently on up to `threads`
/// workers, each writing only its own slots, so the result does not depend on
/// the thread count.
inline std::vector<double> score_instances(const model::Model& m, const std::vector<CtrInstance>& xs,
                                           std::size_t threads = 1) {
  const auto groups = group_impressions(xs);
  std::vector<double> out(xs.size());
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t g = first; g < groups.size(); g += stride) {
      const auto p = m.predict_group(std::span(xs).subspan(groups[g].begin, groups[g].size()));
      std::copy(p.begin(), p.end(), out.begin() + static_cast<std::ptrdiff_t>(groups[g].begin));
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, groups.size()));
  if (threads == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  pool.clear();
  return out;
}

inline EvalTable evaluate(const model::Model& m, const std::vector<CtrInstance>& test, std::size_t threads = 1,
                          TieMode ties = TieMode::half) {
  return evaluate_scores(test, score_instances(m, test, threads), ties);
}

inline std::string format_auc(const std::optional<double>& a) {
  if (!a) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *a);
  return buf;
}

/// One "name=.. subset=.. auc=.. n_pos=.. n_neg=.." line per subset.
inline std::string format_metrics(const std::string& name, const EvalTable& t) {
  std::ostringstream os;
  for (const auto& r : t.rows)
    os << "name=" << name << " subset=" << r.subset << " auc=" << format_auc(r.auc) << " n_pos=" << r.n_pos
       << " n_neg=" << r.n_neg << '\n';
  return os.str();
}

}  // namespace kfatt
