// Command-line front end: generate | train | evaluate | verify | bench.
//
// Artifacts (relative to the configured directories):
//   data_dir/dataset.tsv, data_dir/dataset.meta     generate
//   out_dir/model.ckpt, out_dir/train_log.tsv       train
//   out_dir/metrics.txt                             evaluate
//   out_dir/verify.txt                              verify
//   out_dir/bench.txt                               bench
//
// Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage,
// 3 oracle certification failure, 4 artifact digest mismatch.

#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "kfatt/bench.hpp"
#include "kfatt/checkpoint.hpp"
#include "kfatt/config.hpp"
#include "kfatt/datagen.hpp"
#include "kfatt/eval.hpp"
#include "kfatt/oracle.hpp"
#include "kfatt/train.hpp"

namespace kfatt::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kBadConfig = 2, kOracleFailure = 3, kDigestMismatch = 4 };

struct Files {
  std::filesystem::path dataset, meta, checkpoint, train_log, metrics, verify, bench;

  explicit Files(const config::RunConfig& c) {
    const std::filesystem::path data = c.paths.data(), out = c.paths.out_dir;
    dataset = data / "dataset.tsv";
    meta = data / "dataset.meta";
    checkpoint = out / "model.ckpt";
    train_log = out / "train_log.tsv";
    metrics = out / "metrics.txt";
    verify = out / "verify.txt";
    bench = out / "bench.txt";
  }
};

class DigestMismatch : public Error {
  using Error::Error;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
  if (!os) throw Error("write failed: " + p.string());
}

inline model::ModelConfig model_config(const config::RunConfig& c, const DatasetMeta& meta) {
  model::ModelConfig m = c.model;
  m.num_queries = meta.num_queries;
  m.num_items = meta.num_items;
  return m;
}

inline Dataset load_dataset(const Files& f, const config::RunConfig& c, bool force) {
  Dataset ds = read_dataset(f.dataset.string(), f.meta.string());
  if (ds.meta.digest != c.data_digest && !force)
    throw DigestMismatch("dataset digest " + ds.meta.digest + " does not match config datagen digest " +
                         c.data_digest + " (rerun generate or pass --force)");
  return ds;
}

inline std::size_t eval_threads(const config::RunConfig& c) {
  if (c.eval.threads > 0) return c.eval.threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace detail

inline int cmd_generate(const config::RunConfig& c, std::ostream& out) {
  const Files f(c);
  auto gen = datagen::generate(c.datagen);
  gen.dataset.meta.digest = c.data_digest;
  std::filesystem::create_directories(f.dataset.parent_path());
  write_dataset(gen.dataset, f.dataset.string(), f.meta.string());
  std::size_t tests = 0, fresh = 0, infreq = 0;
  for (const auto& r : gen.dataset.records)
    if (r.split == Split::test && r.label == 1) {
      ++tests;
      fresh += (r.tags & kTagNew) ? 1 : 0;
      infreq += (r.tags & kTagInfreq) ? 1 : 0;
    }
  out << "wrote " << gen.dataset.records.size() << " records to " << f.dataset.string() << " (test users " << tests
      << ", new " << fresh << ", infreq " << infreq << ", infreq threshold " << gen.stats.threshold << ")\n";
  return kOk;
}

inline int cmd_train(const config::RunConfig& c, bool force, std::ostream& out) {
  const Files f(c);
  const Dataset ds = detail::load_dataset(f, c, force);
  model::Model m(detail::model_config(c, ds.meta), c.seed);
  TrainConfig tc = c.train;
  tc.seed = c.seed;
  std::ostringstream log;
  log << "# config_digest=" << c.digest << " dataset_digest=" << ds.meta.digest << '\n' << "epoch\tmean_loss\n";
  train(m, instances(ds, Split::train), tc, [&](const EpochLog& e) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu\t%.10f\n", e.epoch, e.mean_loss);
    log << buf;
    out << "epoch " << e.epoch << " loss " << e.mean_loss << '\n';
  });
  std::filesystem::create_directories(f.checkpoint.parent_path());
  save_checkpoint(f.checkpoint.string(), m, {c.digest, ds.meta.digest});
  detail::write_text(f.train_log, log.str());
  out << "wrote " << f.checkpoint.string() << '\n';
  return kOk;
}

inline int cmd_evaluate(const config::RunConfig& c, bool force, std::ostream& out) {
  const Files f(c);
  const Dataset ds = detail::load_dataset(f, c, force);
  const LoadedCheckpoint ck = load_checkpoint(f.checkpoint.string());
  if (ck.info.dataset_digest != ds.meta.digest && !force)
    throw DigestMismatch("checkpoint was trained on dataset " + ck.info.dataset_digest + " but dataset is " +
                         ds.meta.digest + " (pass --force to evaluate anyway)");
  const auto test = instances(ds, Split::test);
  const EvalTable table = evaluate(ck.model, test, detail::eval_threads(c), c.eval.ties);
  std::ostringstream text;
  text << "# config_digest=" << ck.info.config_digest << " dataset_digest=" << ds.meta.digest << '\n'
       << format_metrics(std::string(model::to_string(ck.model.config().kernel)), table);
  detail::write_text(f.metrics, text.str());
  out << text.str();
  return kOk;
}

inline int cmd_verify(const config::RunConfig& c, std::ostream& out) {
  const Files f(c);
  const oracle::CertificationReport rep = oracle::certify(c.verify);
  const std::string text = oracle::format_report(rep);
  detail::write_text(f.verify, "# config_digest=" + c.digest + "\n" + text);
  out << text;
  return rep.failures() == 0 ? kOk : kOracleFailure;
}

inline int cmd_bench(const config::RunConfig& c, std::ostream& out) {
  const Files f(c);
  model::ModelConfig mc = c.model;
  mc.num_queries = c.datagen.num_categories * c.datagen.queries_per_category;
  mc.num_items = c.datagen.num_categories * c.datagen.items_per_category;
  const std::size_t T = mc.max_sessions * mc.max_per_session;
  const bench::EncoderComparison cost = bench::compare_encoder_cost(mc, T, c.bench.seed);
  std::ostringstream text;
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "# config_digest=%s\n# encoder length=%zu session_attention_macs=%llu full_attention_macs=%llu "
                "attention_ratio=%.4f total_ratio=%.4f\n",
                c.digest.c_str(), T, static_cast<unsigned long long>(cost.session.attention_macs),
                static_cast<unsigned long long>(cost.full.attention_macs), cost.attention_ratio(), cost.total_ratio());
  text << buf << bench::format_bench(bench::bench_latency(mc, c.bench));
  detail::write_text(f.bench, text.str());
  out << text.str();
  return kOk;
}

/// Runs one subcommand. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
               const std::map<std::string, std::string>& env = {}) {
  CLI::App app{"Kalman-filtering attention toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  bool force = false;
  const std::pair<const char*, const char*> commands[] = {
      {"generate", "write the synthetic click dataset"},
      {"train", "fit a model and write a checkpoint"},
      {"evaluate", "score the test split and write AUC per subset"},
      {"verify", "certify the fusion kernels against reference computations"},
      {"bench", "measure encoder MACs and forward latency"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "YAML run configuration")->required();
    sub->add_option("--set", sets, "override, section.key=value (repeatable)");
    sub->add_flag("--force", force, "accept artifacts whose digests do not match");
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kBadConfig;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  config::RunConfig c;
  try {
    c = config::load(config_path, sets, env);
  } catch (const config::ConfigError& e) {
    err << e.what() << '\n';
    return kBadConfig;
  }
  try {
    if (cmd == "generate") return cmd_generate(c, out);
    if (cmd == "train") return cmd_train(c, force, out);
    if (cmd == "evaluate") return cmd_evaluate(c, force, out);
    if (cmd == "verify") return cmd_verify(c, out);
    return cmd_bench(c, out);
  } catch (const DigestMismatch& e) {
    err << "error: " << e.what() << '\n';
    return kDigestMismatch;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace kfatt::cli
