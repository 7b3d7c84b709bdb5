// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gradcheck.hpp"
#include "kfatt/bench.hpp"
#include "kfatt/cli.hpp"
#include "kfatt/config.hpp"
#include "kfatt/datagen.hpp"
#include "kfatt/eval.hpp"
#include "kfatt/oracle.hpp"
#include "kfatt/train.hpp"

using namespace kfatt;
namespace fs = std::filesystem;

namespace {

const std::string kConfig = std::string(KFATT_SOURCE_DIR) + "/configs/acceptance.yaml";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("violated: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

const oracle::CheckRow& row_named(const oracle::CertificationReport& rep, const std::string& name) {
  for (const auto& r : rep.rows)
    if (r.name == name) return r;
  throw Error("certification report has no row '" + name + "'");
}

// ---- 1 ---------------------------------------------------------------------

Verdict oracle_certification(const config::RunConfig& c, oracle::CertificationReport& rep) {
  Verdict v;
  const auto t0 = Clock::now();
  rep = oracle::certify(c.verify);
  const double secs = seconds_since(t0);
  for (const char* name : {"closed form vs MAP (base)", "closed form vs MAP (freq)"}) {
    const auto& r = row_named(rep, name);
    v.require(r.pass && r.cases >= 200 && r.tolerance <= 1e-6, name);
    v.note(std::string(name) + " worst=" + fmt("%.2e", r.worst) + " over " + std::to_string(r.cases));
  }
  v.require(rep.failures() == 0, "every certification row passes");
  v.require(secs < 120.0, "runtime under 2 minutes");
  v.note("runtime " + fmt("%.2f", secs) + "s");
  return v;
}

// ---- 2 ---------------------------------------------------------------------

Verdict degeneration(const oracle::CertificationReport& rep) {
  Verdict v;
  for (const char* name : {"base(no prior, exp-dot precisions) = vanilla", "freq(n=1, sigma'=0) = base"}) {
    const auto& r = row_named(rep, name);
    v.require(r.pass && r.cases >= 100 && r.tolerance <= 1e-12, name);
    v.note(std::string(name) + " worst=" + fmt("%.2e", r.worst));
  }
  return v;
}

// ---- 3 ---------------------------------------------------------------------

Verdict frequency_capping() {
  Verdict v;
  Rng rng(303);
  double worst_cap = 0.0, worst_dup = 0.0, worst_double = 0.0;
  bool monotone = true, toward = true;
  for (int trial = 0; trial < 200; ++trial) {
    const double sm = oracle::log_uniform(rng, 0.1, 10.0), sr = oracle::log_uniform(rng, 0.1, 10.0);
    const double cap = 1.0 / (sm * sm);
    double prev = 0.0;
    for (double n : {1.0, 10.0, 1000.0}) {
      const double w = capped_weight(cap, sr, n);
      monotone = monotone && w >= prev && w <= cap * (1.0 + 1e-15);
      prev = w;
      // with no random error a single click already reaches the cap
      worst_cap = std::max(worst_cap, std::abs(capped_weight(cap, 0.0, n) - cap) / cap);
    }
    worst_cap = std::max(worst_cap, std::abs(capped_weight(cap, sr, 1e15) - cap) / cap);

    const std::size_t d = 1 + rng.index(8);
    const QueryPrior prior{rng.normal_tensor({d}), oracle::log_uniform(rng, 0.1, 10.0)};
    std::vector<DedupGroup> groups(2 + rng.index(3));
    for (auto& g : groups) {
      g.key = rng.normal_tensor({d});
      for (std::size_t i = 0, n = 1 + rng.index(4); i < n; ++i) g.values.push_back(rng.normal_tensor({d}, 2.0));
      g.system_sigma = oracle::log_uniform(rng, 0.1, 10.0);
      g.random_sigma = 0.0;
    }
    auto dup = groups;
    const std::size_t target = rng.index(groups.size());
    const auto orig = dup[target].values;
    dup[target].values.insert(dup[target].values.end(), orig.begin(), orig.end());

    worst_dup = std::max(worst_dup, max_abs_diff(kfatt_freq(prior, groups).estimate, kfatt_freq(prior, dup).estimate));

    const Fusion b0 = kfatt_variant(KfattMode::base, prior, groups), b1 = kfatt_variant(KfattMode::base, prior, dup);
    std::size_t start = 0;
    for (std::size_t g = 0; g < target; ++g) start += groups[g].values.size();
    auto group_weight = [&](const Fusion& f, std::size_t n) {
      double s = 0.0;
      for (std::size_t i = start; i < start + n; ++i) s += f.weights.behavior_weights[i];
      return s / f.weights.prior_weight;
    };
    const double w0 = group_weight(b0, orig.size()), w1 = group_weight(b1, 2 * orig.size());
    worst_double = std::max(worst_double, std::abs(w1 - 2.0 * w0) / (2.0 * w0));

    Tensor centre({d});
    for (const auto& x : orig)
      for (std::size_t i = 0; i < d; ++i) centre[i] += x[i] / static_cast<double>(orig.size());
    toward = toward && max_abs_diff(b1.estimate, centre) < max_abs_diff(b0.estimate, centre);
  }
  v.require(monotone, "w_m(n) nondecreasing and bounded by 1/sigma_m^2 at n in {1,10,1000}");
  v.require(worst_cap <= 1e-9, "supremum equals 1/sigma_m^2");
  v.require(worst_dup <= 1e-9, "freq estimate unchanged by duplication");
  v.require(worst_double <= 1e-9, "base group weight doubles");
  v.require(toward, "base estimate moves toward the duplicated group");
  v.note("cap err=" + fmt("%.1e", worst_cap) + " dup shift=" + fmt("%.1e", worst_dup) +
         " doubling err=" + fmt("%.1e", worst_double) + " over 200 groups");
  return v;
}

// ---- 4 ---------------------------------------------------------------------

Verdict gradient_suite() {
  Verdict v;
  double worst_op = 0.0;
  std::string worst_name;
  const auto cases = gradcheck::op_cases();
  for (const auto& c : cases) {
    const double e = gradcheck::worst_gradient_error(c.sample, c.build, std::hash<std::string>{}(c.name));
    if (!(e <= worst_op)) worst_op = e, worst_name = c.name;
    v.require(e <= 1e-4, "op " + c.name);
  }
  v.note(std::to_string(cases.size()) + " ops x " + std::to_string(gradcheck::kInstances) +
         " worst=" + fmt("%.1e", worst_op) + " (" + worst_name + ")");
  for (model::Kernel k : model::kAllKernels) {
    const double e = gradcheck::model_gradient_error(k, gradcheck::kInstances, 4040);
    v.require(e <= 1e-4, "end-to-end loss, kernel " + std::string(model::to_string(k)));
    v.note(std::string(model::to_string(k)) + "=" + fmt("%.1e", e));
  }
  return v;
}

// ---- 5 and 6 -----------------------------------------------------------------

struct Runs {
  std::map<model::Kernel, std::vector<double>> new_auc, infreq_auc;
  double seconds = 0.0;
};

Runs train_and_evaluate(const config::RunConfig& c, const std::vector<std::uint64_t>& seeds) {
  Runs runs;
  const auto t0 = Clock::now();
  auto gen = datagen::generate(c.datagen);
  const auto train_set = instances(gen.dataset, Split::train);
  const auto test_set = instances(gen.dataset, Split::test);
  for (std::uint64_t seed : seeds)
    for (model::Kernel k : {model::Kernel::vanilla, model::Kernel::kfatt_base, model::Kernel::kfatt_freq}) {
      model::ModelConfig mc = cli::detail::model_config(c, gen.dataset.meta);
      mc.kernel = k;
      model::Model m(mc, seed);
      TrainConfig tc = c.train;
      tc.seed = seed;
      train(m, train_set, tc);
      const EvalTable t = evaluate(m, test_set, 1, c.eval.ties);
      runs.new_auc[k].push_back(t.at("New").auc.value());
      runs.infreq_auc[k].push_back(t.at("Infreq").auc.value());
      std::cout << "  seed " << seed << " " << model::to_string(k) << " New=" << fmt("%.4f", runs.new_auc[k].back())
                << " Infreq=" << fmt("%.4f", runs.infreq_auc[k].back()) << " (" << fmt("%.0f", seconds_since(t0))
                << "s)" << std::endl;
    }
  runs.seconds = seconds_since(t0);
  return runs;
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

Verdict new_ordering(const config::RunConfig& c, const Runs& r) {
  using model::Kernel;
  Verdict v;
  const double van = mean(r.new_auc.at(Kernel::vanilla)), base = mean(r.new_auc.at(Kernel::kfatt_base)),
               freq = mean(r.new_auc.at(Kernel::kfatt_freq));
  v.require(c.datagen.num_users == 5000 && c.datagen.num_categories == 40 && c.datagen.new_query_prob == 0.3 &&
                c.datagen.skew == 1.2,
            "dataset shape 5000 users, 40 categories, new-query prob 0.3, skew 1.2");
  v.require(base > van, "mean New AUC kfatt_base > vanilla");
  v.require(freq >= base, "mean New AUC kfatt_freq >= kfatt_base");
  v.require(base - van >= 0.03, "kfatt_base beats vanilla on New by >= 0.03");
  v.require(r.seconds < 900.0, "runtime under 15 minutes");
  v.note("mean New AUC vanilla=" + fmt("%.4f", van) + " kfatt_base=" + fmt("%.4f", base) +
         " kfatt_freq=" + fmt("%.4f", freq) + " over " + std::to_string(r.new_auc.at(Kernel::vanilla).size()) +
         " seeds, " + fmt("%.0f", r.seconds) + "s");
  return v;
}

Verdict infreq_ordering(const Runs& r) {
  using model::Kernel;
  Verdict v;
  const auto& base = r.infreq_auc.at(Kernel::kfatt_base);
  const auto& freq = r.infreq_auc.at(Kernel::kfatt_freq);
  std::size_t wins = 0;
  std::string per_seed;
  for (std::size_t i = 0; i < base.size(); ++i) {
    wins += freq[i] >= base[i];
    per_seed += (i ? " " : "") + fmt("%+.4f", freq[i] - base[i]);
  }
  v.require(wins >= 4, "kfatt_freq >= kfatt_base on Infreq in at least 4 of 5 seeds");
  v.note("freq-base Infreq AUC per seed: " + per_seed + " (" + std::to_string(wins) + "/" +
         std::to_string(base.size()) + ")");
  return v;
}

// ---- 7 ---------------------------------------------------------------------

Verdict cost_law(const config::RunConfig& c) {
  Verdict v;
  model::ModelConfig mc = c.model;
  mc.num_queries = c.datagen.num_categories * c.datagen.queries_per_category;
  mc.num_items = c.datagen.num_categories * c.datagen.items_per_category;
  mc.max_sessions = 10;
  mc.max_per_session = 25;
  const auto cost = bench::compare_encoder_cost(mc, 250, c.bench.seed);
  v.require(cost.attention_ratio() < 0.15, "session-restricted attention MACs < 15% of full at T=250");
  v.note("attention MACs " + std::to_string(cost.session.attention_macs) + " vs " +
         std::to_string(cost.full.attention_macs) + " ratio=" + fmt("%.4f", cost.attention_ratio()) +
         " (with shared projections " + fmt("%.4f", cost.total_ratio()) + ")");
  const auto rows = bench::bench_latency(mc, c.bench);
  std::size_t ok = 0;
  for (const auto& r : rows) ok += r.p99_us >= r.p50_us;
  v.require(!rows.empty() && ok == rows.size(), "p99 >= p50 in every bench row");
  v.note(std::to_string(ok) + "/" + std::to_string(rows.size()) + " bench rows with p99 >= p50");
  return v;
}

// ---- 8 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Verdict reproducibility() {
  Verdict v;
  const fs::path root = fs::temp_directory_path() / "kfatt_acceptance_repro";
  fs::remove_all(root);
  std::vector<std::string> metrics;
  for (const char* run : {"first", "second"}) {
    const std::string out = (root / run).string();
    for (const char* cmd : {"generate", "train", "evaluate"}) {
      std::ostringstream sink, err;
      const int code = cli::run({cmd, "--config", kConfig, "--set", "paths.out_dir=" + out}, sink, err);
      v.require(code == cli::kOk, std::string(cmd) + " exits 0 (" + err.str() + ")");
    }
    metrics.push_back(slurp(fs::path(out) / "metrics.txt"));
  }
  v.require(!metrics[0].empty(), "metrics file written");
  v.require(metrics[0] == metrics[1], "metrics files byte-identical");
  v.note(std::to_string(metrics[0].size()) + " bytes compared");
  fs::remove_all(root);
  return v;
}

}  // namespace

int main() {
  const config::RunConfig c = config::load(kConfig);
  int failures = 0;
  auto report = [&](int n, const Verdict& v) {
    failures += !v.pass;
    std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
  };
  auto guarded = [&](int n, auto&& fn) {
    try {
      report(n, fn());
    } catch (const std::exception& e) {
      report(n, Verdict{false, std::string("exception: ") + e.what()});
    }
  };

  oracle::CertificationReport rep;
  guarded(1, [&] { return oracle_certification(c, rep); });
  guarded(2, [&] { return degeneration(rep); });
  guarded(3, [&] { return frequency_capping(); });
  guarded(4, [&] { return gradient_suite(); });
  Runs runs;
  bool trained = false;
  guarded(5, [&] {
    runs = train_and_evaluate(c, {1, 2, 3, 4, 5});
    trained = true;
    return new_ordering(c, runs);
  });
  guarded(6, [&] { return trained ? infreq_ordering(runs) : Verdict{false, "training runs unavailable"}; });
  guarded(7, [&] { return cost_law(c); });
  guarded(8, [&] { return reproducibility(); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
