// Behavior logs, CTR instances and the on-disk dataset format.
//
// dataset.tsv holds one record per line, tab-separated:
//
//   user_id  timestamp_minutes  query_id  item_id  label  split  subset_tag
//
// split is "hist" (a past click), "train" or "test" (a scored impression).
// subset_tag is "-" outside the test split, otherwise "all" optionally
// followed by "|new" and/or "|infreq". The history of any impression is
// every click of the same user (label 1, split hist or train) with a strictly
// earlier timestamp. Query and item id 0 are reserved for out-of-vocabulary.
//
// dataset.meta is a sidecar of "key: value" lines with vocabulary sizes and
// the digest of the generating config.

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kfatt/numerics.hpp"

namespace kfatt {

struct Event {
  std::int64_t timestamp = 0;  // minutes
  std::size_t query_id = 0;
  std::size_t item_id = 0;
  bool operator==(const Event&) const = default;
};

/// A user's clicks in nondecreasing time order.
struct BehaviorLog {
  std::vector<Event> events;
};

enum SubsetTag : std::uint8_t { kTagNone = 0, kTagNew = 1, kTagInfreq = 2 };

struct CtrInstance {
  std::size_t user = 0;
  std::int64_t timestamp = 0;
  std::size_t query_id = 0;
  std::size_t item_id = 0;
  int label = 0;
  std::uint8_t tags = kTagNone;
  BehaviorLog history;

  bool is_new() const { return tags & kTagNew; }
  bool is_infreq() const { return tags & kTagInfreq; }
};

enum class Split { hist, train, test };

struct Record {
  std::size_t user = 0;
  std::int64_t timestamp = 0;
  std::size_t query_id = 0;
  std::size_t item_id = 0;
  int label = 0;
  Split split = Split::hist;
  std::uint8_t tags = kTagNone;
};

struct DatasetMeta {
  std::size_t num_users = 0;
  std::size_t num_queries = 0;  // valid ids are 1..num_queries
  std::size_t num_items = 0;    // valid ids are 1..num_items
  std::size_t num_categories = 0;
  std::string digest;           // digest of the generating config
  std::map<std::string, std::string> extra;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<Record> records;
};

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::hist: return "hist";
    case Split::train: return "train";
    case Split::test: return "test";
  }
  return "?";
}

inline std::string tag_string(Split split, std::uint8_t tags) {
  if (split != Split::test) return "-";
  std::string s = "all";
  if (tags & kTagNew) s += "|new";
  if (tags & kTagInfreq) s += "|infreq";
  return s;
}

inline std::string format_record(const Record& r) {
  std::ostringstream os;
  os << r.user << '\t' << r.timestamp << '\t' << r.query_id << '\t' << r.item_id << '\t' << r.label << '\t'
     << to_string(r.split) << '\t' << tag_string(r.split, r.tags);
  return os.str();
}

inline Record parse_record(const std::string& line, std::size_t lineno) {
  std::istringstream is(line);
  std::string f[7];
  for (auto& x : f)
    if (!std::getline(is, x, '\t')) throw Error("dataset line " + std::to_string(lineno) + ": expected 7 fields");
  Record r;
  try {
    r.user = std::stoull(f[0]);
    r.timestamp = std::stoll(f[1]);
    r.query_id = std::stoull(f[2]);
    r.item_id = std::stoull(f[3]);
    r.label = std::stoi(f[4]);
  } catch (const std::exception&) {
    throw Error("dataset line " + std::to_string(lineno) + ": malformed number");
  }
  if (r.label != 0 && r.label != 1) throw Error("dataset line " + std::to_string(lineno) + ": label must be 0 or 1");
  if (f[5] == "hist") r.split = Split::hist;
  else if (f[5] == "train") r.split = Split::train;
  else if (f[5] == "test") r.split = Split::test;
  else throw Error("dataset line " + std::to_string(lineno) + ": unknown split '" + f[5] + "'");
  if (r.split == Split::test) {
    if (f[6].rfind("all", 0) != 0) throw Error("dataset line " + std::to_string(lineno) + ": bad subset tag");
    if (f[6].find("|new") != std::string::npos) r.tags |= kTagNew;
    if (f[6].find("|infreq") != std::string::npos) r.tags |= kTagInfreq;
  }
  return r;
}

inline void write_dataset(const Dataset& ds, const std::string& tsv_path, const std::string& meta_path) {
  {
    std::ofstream out(tsv_path, std::ios::binary);
    if (!out) throw Error("cannot write " + tsv_path);
    for (const auto& r : ds.records) out << format_record(r) << '\n';
  }
  std::ofstream meta(meta_path, std::ios::binary);
  if (!meta) throw Error("cannot write " + meta_path);
  meta << "format: kfatt-dataset\nversion: 1\n"
       << "num_users: " << ds.meta.num_users << '\n'
       << "num_queries: " << ds.meta.num_queries << '\n'
       << "num_items: " << ds.meta.num_items << '\n'
       << "num_categories: " << ds.meta.num_categories << '\n'
       << "config_digest: " << ds.meta.digest << '\n';
  for (const auto& [k, v] : ds.meta.extra) meta << k << ": " << v << '\n';
}

inline DatasetMeta read_meta(const std::string& meta_path) {
  std::ifstream in(meta_path);
  if (!in) throw Error("cannot read " + meta_path);
  DatasetMeta m;
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    const auto c = line.find(": ");
    if (c == std::string::npos) continue;
    kv[line.substr(0, c)] = line.substr(c + 2);
  }
  if (kv["format"] != "kfatt-dataset") throw Error(meta_path + ": not a dataset header");
  auto num = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw Error(meta_path + ": missing " + k);
    return static_cast<std::size_t>(std::stoull(it->second));
  };
  m.num_users = num("num_users");
  m.num_queries = num("num_queries");
  m.num_items = num("num_items");
  m.num_categories = num("num_categories");
  m.digest = kv["config_digest"];
  for (const auto& [k, v] : kv)
    if (k != "format" && k != "version" && k.rfind("num_", 0) != 0 && k != "config_digest") m.extra[k] = v;
  return m;
}

inline Dataset read_dataset(const std::string& tsv_path, const std::string& meta_path) {
  Dataset ds;
  ds.meta = read_meta(meta_path);
  std::ifstream in(tsv_path);
  if (!in) throw Error("cannot read " + tsv_path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    ds.records.push_back(parse_record(line, n));
  }
  return ds;
}

/// Impressions of one split with their histories reconstructed. Records of a
/// user must be contiguous and in time order, as write_dataset emits them.
inline std::vector<CtrInstance> instances(const Dataset& ds, Split split) {
  if (split == Split::hist) throw Error("instances: hist records are not impressions");
  std::vector<CtrInstance> out;
  std::size_t i = 0;
  while (i < ds.records.size()) {
    std::size_t j = i;
    while (j < ds.records.size() && ds.records[j].user == ds.records[i].user) ++j;
    std::vector<Event> clicks;
    for (std::size_t k = i; k < j; ++k) {
      const Record& r = ds.records[k];
      if (k > i && r.timestamp < ds.records[k - 1].timestamp)
        throw Error("dataset: records of user " + std::to_string(r.user) + " are not in time order");
      if (r.label == 1 && r.split != Split::test) clicks.push_back({r.timestamp, r.query_id, r.item_id});
    }
    for (std::size_t k = i; k < j; ++k) {
      const Record& r = ds.records[k];
      if (r.split != split) continue;
      CtrInstance inst;
      inst.user = r.user;
      inst.timestamp = r.timestamp;
      inst.query_id = r.query_id;
      inst.item_id = r.item_id;
      inst.label = r.label;
      inst.tags = r.tags;
      for (const auto& e : clicks)
        if (e.timestamp < r.timestamp) inst.history.events.push_back(e);
      out.push_back(std::move(inst));
    }
    i = j;
  }
  return out;
}

}  // namespace kfatt
