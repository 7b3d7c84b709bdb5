// Run configuration: a YAML tree of sections flattened to dotted keys.
//
// Values are resolved in three layers, later layers winning:
//   1. the config file
//   2. environment variables KFATT_<SECTION>__<KEY> (e.g. KFATT_MODEL__KERNEL)
//   3. --set section.key=value arguments
// Every key not mentioned keeps its built-in default. Unknown keys are errors.
//
// The digest is FNV-1a 64 over "key=value\n" lines of the fully resolved
// tree, sorted by key, with values re-rendered canonically. Keys that cannot
// change results (output paths, evaluation thread count) are left out.

#pragma once

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kfatt/bench.hpp"
#include "kfatt/behavior_model.hpp"
#include "kfatt/datagen.hpp"
#include "kfatt/eval.hpp"
#include "kfatt/oracle.hpp"
#include "kfatt/train.hpp"

namespace kfatt::config {

/// A configuration problem; `problems` lists one diagnostic per bad field.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& ps) {
    std::string s = "invalid configuration:";
    for (const auto& p : ps) s += "\n  " + p;
    return s;
  }
  std::vector<std::string> problems_;
};

using Tree = std::map<std::string, std::string>;

struct Paths {
  std::string out_dir = "runs/default";
  std::string data_dir;  // empty: same as out_dir
  std::string data() const { return data_dir.empty() ? out_dir : data_dir; }
};

struct EvalConfig {
  std::size_t threads = 0;  // 0: hardware concurrency
  TieMode ties = TieMode::half;
};

struct RunConfig {
  std::uint64_t seed = 1;  // model initialization and training order
  Paths paths;
  datagen::GenConfig datagen;
  model::ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  bench::BenchConfig bench;
  oracle::CertificationOptions verify;

  std::string digest;       // whole run
  std::string data_digest;  // datagen section only; stamped on datasets
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(std::string s) {
  auto sp = [](unsigned char c) { return std::isspace(c); };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), sp));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), sp).base(), s.end());
  return s;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else if (c != '[' && c != ']') {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

inline std::size_t parse_size(const std::string& s) {
  std::size_t pos = 0;
  if (s.empty() || s[0] == '-') throw Error("expected a non-negative integer, got '" + s + "'");
  const unsigned long long v = std::stoull(s, &pos);
  if (pos != s.size()) throw Error("expected a non-negative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

inline long long parse_int(const std::string& s) {
  std::size_t pos = 0;
  const long long v = std::stoll(s, &pos);
  if (pos != s.size()) throw Error("expected an integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size() || !std::isfinite(v)) throw Error("expected a finite number, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw Error("expected a boolean, got '" + s + "'");
}

inline model::Kernel parse_kernel_value(const std::string& s) {
  if (auto k = model::parse_kernel(s)) return *k;
  std::string names;
  for (auto k : model::kAllKernels) names += (names.empty() ? "" : ", ") + std::string(model::to_string(k));
  throw Error("unknown kernel '" + s + "' (expected one of: " + names + ")");
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool digested = true;
};

template <class T>
Field size_field(T RunConfig::*sec, std::size_t T::*f) {
  return {[=](const RunConfig& c) { return std::to_string(c.*sec.*f); },
          [=](RunConfig& c, const std::string& v) { c.*sec.*f = parse_size(v); }};
}
template <class T>
Field double_field(T RunConfig::*sec, double T::*f) {
  return {[=](const RunConfig& c) { return fmt_double(c.*sec.*f); },
          [=](RunConfig& c, const std::string& v) { c.*sec.*f = parse_double(v); }};
}
template <class T>
Field bool_field(T RunConfig::*sec, bool T::*f) {
  return {[=](const RunConfig& c) { return std::string(c.*sec.*f ? "true" : "false"); },
          [=](RunConfig& c, const std::string& v) { c.*sec.*f = parse_bool(v); }};
}
template <class T, class I>
Field int_field(T RunConfig::*sec, I T::*f) {
  return {[=](const RunConfig& c) { return std::to_string(c.*sec.*f); },
          [=](RunConfig& c, const std::string& v) { c.*sec.*f = static_cast<I>(parse_int(v)); }};
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    using datagen::GenConfig;
    using model::ModelConfig;
    std::map<std::string, Field> t;
    t["seed"] = {[](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_size(v); }};
    t["paths.out_dir"] = {[](const RunConfig& c) { return c.paths.out_dir; },
                          [](RunConfig& c, const std::string& v) { c.paths.out_dir = v; }, false};
    t["paths.data_dir"] = {[](const RunConfig& c) { return c.paths.data_dir; },
                           [](RunConfig& c, const std::string& v) { c.paths.data_dir = v; }, false};

    const auto D = &RunConfig::datagen;
    t["datagen.seed"] = {[](const RunConfig& c) { return std::to_string(c.datagen.seed); },
                         [](RunConfig& c, const std::string& v) { c.datagen.seed = parse_size(v); }};
    t["datagen.num_users"] = size_field(D, &GenConfig::num_users);
    t["datagen.num_categories"] = size_field(D, &GenConfig::num_categories);
    t["datagen.queries_per_category"] = size_field(D, &GenConfig::queries_per_category);
    t["datagen.items_per_category"] = size_field(D, &GenConfig::items_per_category);
    t["datagen.latent_dim"] = size_field(D, &GenConfig::latent_dim);
    t["datagen.min_behaviors"] = size_field(D, &GenConfig::min_behaviors);
    t["datagen.max_behaviors"] = size_field(D, &GenConfig::max_behaviors);
    t["datagen.preferred_categories"] = size_field(D, &GenConfig::preferred_categories);
    t["datagen.occasional_categories"] = size_field(D, &GenConfig::occasional_categories);
    t["datagen.occasional_prob"] = double_field(D, &GenConfig::occasional_prob);
    t["datagen.new_query_prob"] = double_field(D, &GenConfig::new_query_prob);
    t["datagen.skew"] = double_field(D, &GenConfig::skew);
    t["datagen.favorite_query_prob"] = double_field(D, &GenConfig::favorite_query_prob);
    t["datagen.train_targets"] = size_field(D, &GenConfig::train_targets);
    t["datagen.negatives"] = size_field(D, &GenConfig::negatives);
    t["datagen.session_break_prob"] = double_field(D, &GenConfig::session_break_prob);
    t["datagen.max_within_gap"] = int_field(D, &GenConfig::max_within_gap);
    t["datagen.between_gap_mean"] = double_field(D, &GenConfig::between_gap_mean);
    t["datagen.category_spread"] = double_field(D, &GenConfig::category_spread);
    t["datagen.query_spread"] = double_field(D, &GenConfig::query_spread);
    t["datagen.item_spread"] = double_field(D, &GenConfig::item_spread);
    t["datagen.user_spread"] = double_field(D, &GenConfig::user_spread);
    t["datagen.click_noise"] = double_field(D, &GenConfig::click_noise);
    t["datagen.infreq_quantile"] = double_field(D, &GenConfig::infreq_quantile);
    t["datagen.infreq_threshold"] = int_field(D, &GenConfig::infreq_threshold);

    const auto M = &RunConfig::model;
    t["model.kernel"] = {[](const RunConfig& c) { return std::string(model::to_string(c.model.kernel)); },
                         [](RunConfig& c, const std::string& v) { c.model.kernel = parse_kernel_value(v); }};
    t["model.d_model"] = size_field(M, &ModelConfig::d_model);
    t["model.heads"] = size_field(M, &ModelConfig::heads);
    t["model.d_k"] = size_field(M, &ModelConfig::d_k);
    t["model.d_v"] = size_field(M, &ModelConfig::d_v);
    t["model.mlp_hidden"] = size_field(M, &ModelConfig::mlp_hidden);
    t["model.head_hidden"] = size_field(M, &ModelConfig::head_hidden);
    t["model.session_gap"] = int_field(M, &ModelConfig::session_gap);
    t["model.max_sessions"] = size_field(M, &ModelConfig::max_sessions);
    t["model.max_per_session"] = size_field(M, &ModelConfig::max_per_session);
    t["model.single_session"] = bool_field(M, &ModelConfig::single_session);
    t["model.scale_logits"] = bool_field(M, &ModelConfig::scale_logits);
    t["model.embedding_sd"] = double_field(M, &ModelConfig::embedding_sd);
    t["model.ctr_raw_item"] = bool_field(M, &ModelConfig::ctr_raw_item);

    const auto T = &RunConfig::train;
    t["train.lr"] = double_field(T, &TrainConfig::lr);
    t["train.epochs"] = size_field(T, &TrainConfig::epochs);
    t["train.batch_size"] = size_field(T, &TrainConfig::batch_size);

    Field threads = size_field(&RunConfig::eval, &EvalConfig::threads);
    threads.digested = false;
    t["eval.threads"] = threads;
    t["eval.ties"] = {[](const RunConfig& c) { return std::string(c.eval.ties == TieMode::half ? "half" : "strict"); },
                      [](RunConfig& c, const std::string& v) {
                        if (v == "half") c.eval.ties = TieMode::half;
                        else if (v == "strict") c.eval.ties = TieMode::strict;
                        else throw Error("expected 'half' or 'strict', got '" + v + "'");
                      }};

    t["bench.kernels"] = {[](const RunConfig& c) {
                            std::string s;
                            for (auto k : c.bench.kernels) s += (s.empty() ? "" : ",") + std::string(model::to_string(k));
                            return s;
                          },
                          [](RunConfig& c, const std::string& v) {
                            c.bench.kernels.clear();
                            for (const auto& x : split_list(v)) c.bench.kernels.push_back(parse_kernel_value(x));
                          }};
    t["bench.lengths"] = {[](const RunConfig& c) {
                            std::string s;
                            for (auto n : c.bench.lengths) s += (s.empty() ? "" : ",") + std::to_string(n);
                            return s;
                          },
                          [](RunConfig& c, const std::string& v) {
                            c.bench.lengths.clear();
                            for (const auto& x : split_list(v)) c.bench.lengths.push_back(parse_size(x));
                          }};
    t["bench.reps"] = size_field(&RunConfig::bench, &bench::BenchConfig::reps);

    t["verify.instances"] = size_field(&RunConfig::verify, &oracle::CertificationOptions::instances_per_mode);
    t["verify.degeneration_instances"] =
        size_field(&RunConfig::verify, &oracle::CertificationOptions::degeneration_instances);
    t["verify.seed"] = {[](const RunConfig& c) { return std::to_string(c.verify.seed); },
                        [](RunConfig& c, const std::string& v) { c.verify.seed = parse_size(v); }};
    t["verify.map_tolerance"] = double_field(&RunConfig::verify, &oracle::CertificationOptions::map_tolerance);
    return t;
  }();
  return table;
}

inline void flatten(const YAML::Node& node, const std::string& prefix, Tree& out) {
  switch (node.Type()) {
    case YAML::NodeType::Map:
      for (const auto& kv : node) {
        const std::string key = kv.first.as<std::string>();
        flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
      }
      break;
    case YAML::NodeType::Sequence: {
      std::string s;
      for (const auto& item : node) s += (s.empty() ? "" : ",") + item.as<std::string>();
      out[prefix] = s;
      break;
    }
    case YAML::NodeType::Null: out[prefix] = ""; break;
    default: out[prefix] = node.as<std::string>(); break;
  }
}

}  // namespace detail

/// Canonical tree of a resolved config.
inline Tree to_tree(const RunConfig& c) {
  Tree t;
  for (const auto& [k, f] : detail::fields()) t[k] = f.get(c);
  return t;
}

inline std::string digest_of(const Tree& t, const std::string& prefix = "") {
  std::string text;
  for (const auto& [k, v] : t) {
    if (!prefix.empty() && k.rfind(prefix, 0) != 0) continue;
    if (!detail::fields().at(k).digested) continue;
    text += k + "=" + v + "\n";
  }
  return hex64(fnv1a64(text));
}

inline Tree read_yaml_file(const std::string& path) {
  Tree t;
  try {
    const YAML::Node root = YAML::LoadFile(path);
    if (root.IsNull()) return t;
    if (!root.IsMap()) throw ConfigError({path + ": top level must be a mapping"});
    detail::flatten(root, "", t);
  } catch (const YAML::BadFile&) {
    throw ConfigError({"cannot read config file '" + path + "'"});
  } catch (const YAML::Exception& e) {
    throw ConfigError({path + ": " + e.what()});
  }
  return t;
}

/// "section.key=value" to a (key, value) pair.
inline std::pair<std::string, std::string> parse_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError({"override '" + s + "' is not key=value"});
  return {detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1))};
}

/// KFATT_MODEL__KERNEL=x becomes model.kernel=x; other variables are ignored.
inline Tree env_overrides(const std::map<std::string, std::string>& env) {
  static const std::string prefix = "KFATT_";
  Tree t;
  for (const auto& [name, value] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string key;
    const std::string rest = name.substr(prefix.size());
    for (std::size_t i = 0; i < rest.size(); ++i) {
      if (rest.compare(i, 2, "__") == 0) {
        key += '.';
        ++i;
      } else {
        key += static_cast<char>(std::tolower(static_cast<unsigned char>(rest[i])));
      }
    }
    t[key] = value;
  }
  return t;
}

/// Applies `layers` in order on top of the defaults and validates.
inline RunConfig resolve(const std::vector<std::pair<std::string, Tree>>& layers) {
  RunConfig c;
  std::vector<std::string> problems;
  Tree merged;
  for (const auto& [origin, tree] : layers)
    for (const auto& [k, v] : tree) {
      if (!detail::fields().count(k)) {
        problems.push_back(origin + ": unknown key '" + k + "'");
        continue;
      }
      merged[k] = v;
    }
  for (const auto& [k, v] : merged) {
    try {
      detail::fields().at(k).set(c, v);
    } catch (const std::exception& e) {
      const std::string why = dynamic_cast<const Error*>(&e) ? e.what() : "cannot parse '" + v + "'";
      problems.push_back("field '" + k + "': " + why);
    }
  }
  for (const auto& p : c.datagen.problems()) problems.push_back("datagen: " + p);
  const auto& m = c.model;
  if (m.d_model == 0 || m.heads == 0 || m.d_k == 0 || m.d_v == 0 || m.mlp_hidden == 0 || m.head_hidden == 0)
    problems.push_back("model: dimensions must be positive");
  if (m.max_sessions == 0 || m.max_per_session == 0) problems.push_back("model: session caps must be positive");
  if (m.session_gap <= 0) problems.push_back("field 'model.session_gap': must be positive");
  if (!(c.train.lr > 0.0)) problems.push_back("field 'train.lr': must be positive");
  if (c.train.batch_size == 0) problems.push_back("field 'train.batch_size': must be positive");
  if (c.bench.reps < 200) problems.push_back("field 'bench.reps': at least 200 required");
  if (c.bench.lengths.empty() || std::count(c.bench.lengths.begin(), c.bench.lengths.end(), 0u))
    problems.push_back("field 'bench.lengths': need one or more positive lengths");
  if (c.paths.out_dir.empty()) problems.push_back("field 'paths.out_dir': must not be empty");
  if (!problems.empty()) throw ConfigError(problems);

  const Tree canon = to_tree(c);
  c.digest = digest_of(canon);
  c.data_digest = digest_of(canon, "datagen.");
  return c;
}

/// File, then environment, then explicit overrides.
inline RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {},
                      const std::map<std::string, std::string>& env = {}) {
  Tree sets;
  for (const auto& s : overrides) {
    auto [k, v] = parse_assignment(s);
    sets[k] = v;
  }
  return resolve({{path, read_yaml_file(path)}, {"environment", env_overrides(env)}, {"--set", sets}});
}

}  // namespace kfatt::config
