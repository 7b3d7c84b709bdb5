// Session-restricted encoder / fusion decoder behavior model with a small CTR
// head on top.
//
//   history --segment--> sessions --(+position)--> within-session multi-head
//   self-attention --> W^O --> FC+ReLU = H
//   query --> per-head projections --> fusion kernel over (K W^K, H W^V)
//         --> concat heads --> W^O = interest
//   [query, interest, interest * item] --> MLP --> logit
//
// The "vanilla" kernel skips the encoder and position table entirely and
// serves as the plain-attention baseline; "transformer" keeps the encoder and
// uses softmax attention in the decoder.

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kfatt/attention.hpp"
#include "kfatt/autodiff.hpp"
#include "kfatt/dataset.hpp"
#include "kfatt/numerics.hpp"

namespace kfatt::model {

enum class Kernel { vanilla, transformer, kfatt_base, kfatt_freq, kfatt_bs, kfatt_fs };

inline constexpr Kernel kAllKernels[] = {Kernel::vanilla,    Kernel::transformer, Kernel::kfatt_base,
                                         Kernel::kfatt_freq, Kernel::kfatt_bs,    Kernel::kfatt_fs};

inline std::string_view to_string(Kernel k) {
  switch (k) {
    case Kernel::vanilla: return "vanilla";
    case Kernel::transformer: return "transformer";
    case Kernel::kfatt_base: return "kfatt_base";
    case Kernel::kfatt_freq: return "kfatt_freq";
    case Kernel::kfatt_bs: return "kfatt_bs";
    case Kernel::kfatt_fs: return "kfatt_fs";
  }
  return "?";
}

inline std::optional<Kernel> parse_kernel(std::string_view s) {
  for (Kernel k : kAllKernels)
    if (to_string(k) == s) return k;
  return std::nullopt;
}

inline bool uses_encoder(Kernel k) { return k != Kernel::vanilla; }
inline bool uses_prior(Kernel k) { return k != Kernel::vanilla && k != Kernel::transformer; }
inline bool uses_groups(Kernel k) { return k == Kernel::kfatt_freq || k == Kernel::kfatt_fs; }
inline bool uses_noise_head(Kernel k) { return k == Kernel::kfatt_freq; }

struct ModelConfig {
  Kernel kernel = Kernel::kfatt_base;
  std::size_t num_queries = 0;  // ids 1..num_queries, 0 is the OOV bucket
  std::size_t num_items = 0;
  std::size_t d_model = 32;
  std::size_t heads = 2;
  std::size_t d_k = 16;
  std::size_t d_v = 16;
  std::size_t mlp_hidden = 64;
  std::size_t head_hidden = 16;  // hidden width of prior / noise MLPs
  std::int64_t session_gap = 30;  // minutes
  std::size_t max_sessions = 10;
  std::size_t max_per_session = 25;
  bool single_session = false;
  bool scale_logits = true;  // divide decoder logits by sqrt(d_k)
  double embedding_sd = 0.3;
  bool ctr_raw_item = false;  // also feed the raw item embedding to the CTR MLP

  std::size_t position_table_size() const {
    return single_session ? max_sessions * max_per_session : max_per_session;
  }
};

// ---------------------------------------------------------------------------
// Sessions.

struct Session {
  std::vector<Event> events;
  std::int64_t start() const { return events.front().timestamp; }
  std::int64_t end() const { return events.back().timestamp; }
};

/// Splits a time-ordered log wherever adjacent clicks are at least `gap`
/// minutes apart, then keeps the most recent `max_sessions` sessions and the
/// most recent `max_per_session` clicks of each.
inline std::vector<Session> segment_sessions(const BehaviorLog& log, std::int64_t gap, std::size_t max_sessions,
                                             std::size_t max_per_session) {
  std::vector<Session> out;
  for (std::size_t i = 0; i < log.events.size(); ++i) {
    const Event& e = log.events[i];
    if (i > 0 && e.timestamp < log.events[i - 1].timestamp) throw Error("segment_sessions: log not sorted by time");
    if (i == 0 || e.timestamp - log.events[i - 1].timestamp >= gap) out.emplace_back();
    out.back().events.push_back(e);
  }
  if (out.size() > max_sessions) out.erase(out.begin(), out.end() - static_cast<std::ptrdiff_t>(max_sessions));
  for (auto& s : out)
    if (s.events.size() > max_per_session)
      s.events.erase(s.events.begin(), s.events.end() - static_cast<std::ptrdiff_t>(max_per_session));
  return out;
}

/// A history after segmentation and capping, flattened for the model.
struct PreparedHistory {
  std::vector<Event> events;
  std::vector<std::pair<std::size_t, std::size_t>> sessions;  // [begin, end) into events
  std::vector<std::size_t> positions;                         // index within its session
  std::vector<std::size_t> group_of;                          // dedup group per event
  std::vector<double> group_counts;
};

inline PreparedHistory prepare_history(const std::vector<Session>& sessions) {
  PreparedHistory p;
  std::map<std::size_t, std::size_t> group_ids;
  for (const auto& s : sessions) {
    const std::size_t begin = p.events.size();
    for (std::size_t i = 0; i < s.events.size(); ++i) {
      const Event& e = s.events[i];
      p.events.push_back(e);
      p.positions.push_back(i);
      auto [it, fresh] = group_ids.try_emplace(e.query_id, p.group_counts.size());
      if (fresh) p.group_counts.push_back(0.0);
      p.group_of.push_back(it->second);
      p.group_counts[it->second] += 1.0;
    }
    p.sessions.emplace_back(begin, p.events.size());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Parameters.

class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init) {
    if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
    index_[name] = values_.size();
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return values_.size() - 1;
  }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  std::vector<Tensor>& values() { return values_; }
  const std::vector<Tensor>& values() const { return values_; }

  std::vector<Tensor> zeros_like() const {
    std::vector<Tensor> z;
    z.reserve(values_.size());
    for (const auto& v : values_) z.emplace_back(v.shape());
    return z;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

/// Binds store entries to tape leaves on first use. With a gradient vector
/// the leaves are trainable and backward() accumulates into it; without one
/// they are read-only views.
class Binder {
 public:
  Binder(ad::Tape& tape, const ParamStore& store, std::vector<Tensor>* grads = nullptr)
      : tape_(tape), store_(store), grads_(grads), ids_(store.size(), kUnbound) {}

  ad::NodeId operator()(std::size_t index) {
    if (ids_[index] == kUnbound)
      ids_[index] = grads_ ? tape_.parameter(store_.value(index), (*grads_)[index]) : tape_.view(store_.value(index));
    return ids_[index];
  }

 private:
  static constexpr ad::NodeId kUnbound = static_cast<ad::NodeId>(-1);
  ad::Tape& tape_;
  const ParamStore& store_;
  std::vector<Tensor>* grads_;
  std::vector<ad::NodeId> ids_;
};

struct MlpIds {
  std::size_t w1, b1, w2, b2;
};

struct EncoderCost {
  std::uint64_t attention_macs = 0;   // score and mixing products
  std::uint64_t projection_macs = 0;  // Q/K/V, W^O and FC products
};

struct DecodeOptions {
  bool zero_prior = false;  // force the prior precision to 0
};

// ---------------------------------------------------------------------------

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate();
    Rng rng(seed);
    std::uint64_t stream = 0;
    auto init = [&](std::string name, Shape shape, double sd) {
      Rng r = rng.split(stream++);
      return params_.add(std::move(name), r.normal_tensor(std::move(shape), sd));
    };
    build(init);
  }

  /// Rebuilds a model around existing parameters (checkpoint restore).
  Model(const ModelConfig& cfg, ParamStore params) : cfg_(cfg) {
    validate();
    ParamStore fresh;
    auto adopt = [&](std::string name, Shape shape, double) {
      const Tensor& v = params.value(params.index(name));
      if (v.shape() != shape)
        throw Error("parameter '" + name + "' has shape " + shape_str(v.shape()) + ", expected " + shape_str(shape));
      return fresh.add(std::move(name), v);
    };
    build(adopt);
    if (fresh.size() != params.size()) throw Error("checkpoint has parameters this model does not use");
    params_ = std::move(fresh);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  PreparedHistory prepare(const BehaviorLog& log) const {
    if (cfg_.single_session) {
      Session all;
      const std::size_t cap = cfg_.max_sessions * cfg_.max_per_session;
      const std::size_t skip = log.events.size() > cap ? log.events.size() - cap : 0;
      for (std::size_t i = 0; i < log.events.size(); ++i) {
        if (i > 0 && log.events[i].timestamp < log.events[i - 1].timestamp)
          throw Error("behavior log not sorted by time");
        if (i >= skip) all.events.push_back(log.events[i]);
      }
      std::vector<Session> one;
      if (!all.events.empty()) one.push_back(std::move(all));
      return prepare_history(one);
    }
    return prepare_history(segment_sessions(log, cfg_.session_gap, cfg_.max_sessions, cfg_.max_per_session));
  }

  // -- graph construction ---------------------------------------------------

  /// Within-session self-attention over position-encoded K and V (T x d).
  /// Returns H (T x d_model).
  ad::NodeId encode(ad::Tape& t, Binder& b, ad::NodeId K, ad::NodeId V, const PreparedHistory& h,
                    EncoderCost* cost = nullptr) const {
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg_.d_k));
    std::vector<ad::NodeId> heads;
    MacScope proj0;
    std::uint64_t attn = 0;
    for (std::size_t i = 0; i < cfg_.heads; ++i) {
      const ad::NodeId q = t.matmul(K, b(enc_wq_[i]));
      const ad::NodeId k = t.matmul(K, b(enc_wk_[i]));
      const ad::NodeId v = t.matmul(V, b(enc_wv_[i]));
      std::vector<ad::NodeId> parts;
      for (const auto& [s, e] : h.sessions) {
        MacScope a;
        const ad::NodeId scores = t.scale(t.matmul_nt(t.slice_rows(q, s, e), t.slice_rows(k, s, e)), inv);
        parts.push_back(t.matmul(t.softmax_rows(scores), t.slice_rows(v, s, e)));
        attn += a.count();
      }
      heads.push_back(parts.size() == 1 ? parts[0] : t.concat_rows(parts));
    }
    const ad::NodeId mixed = t.matmul(t.concat_cols(heads), b(enc_wo_));
    const ad::NodeId out = t.relu(t.add_row(t.matmul(mixed, b(enc_fc_w_)), b(enc_fc_b_)));
    if (cost) {
      cost->attention_macs += attn;
      cost->projection_macs += proj0.count() - attn;
    }
    return out;
  }

  /// Per-head fusion of the query against keys K and encoded values H.
  /// Returns the interest estimate (1 x d_model). K/H are ignored when the
  /// history is empty.
  ad::NodeId decode(ad::Tape& t, Binder& b, ad::NodeId q, ad::NodeId K, ad::NodeId H, const PreparedHistory& h,
                    const DecodeOptions& opt = {}) const {
    const std::size_t T = h.events.size();
    const Kernel kern = cfg_.kernel;
    if (!uses_prior(kern) && T == 0) throw Error("vanilla attention undefined on empty history");
    const double inv = cfg_.scale_logits ? 1.0 / std::sqrt(static_cast<double>(cfg_.d_k)) : 1.0;
    std::vector<ad::NodeId> heads;
    for (std::size_t i = 0; i < cfg_.heads; ++i) {
      const ad::NodeId qp = t.matmul(q, b(dec_wq_[i]));
      if (!uses_prior(kern)) {
        const ad::NodeId kp = t.matmul(K, b(dec_wk_[i]));
        const ad::NodeId hp = t.matmul(H, b(dec_wv_[i]));
        const ad::NodeId logits = t.scale(t.matmul_nt(qp, kp), inv);
        heads.push_back(t.matmul(t.softmax_rows(logits), hp));
        continue;
      }
      const ad::NodeId mu = mlp(t, b, qp, prior_mean_[i]);
      ad::NodeId pq;
      if (opt.zero_prior) pq = t.constant(Tensor({1, 1}, 0.0));
      else if (kern == Kernel::kfatt_bs) pq = t.constant(Tensor({1, 1}, 1.0));
      else pq = t.softplus(mlp(t, b, qp, prior_prec_[i]));
      if (T == 0) {
        heads.push_back(t.kfatt_base(mu, pq, t.constant(Tensor({0, cfg_.d_v})), t.constant(Tensor({0}))));
        continue;
      }
      const ad::NodeId kp = t.matmul(K, b(dec_wk_[i]));
      const ad::NodeId hp = t.matmul(H, b(dec_wv_[i]));
      if (!uses_groups(kern)) {
        const ad::NodeId logits = t.scale(t.matmul_nt(qp, kp), inv);
        const ad::NodeId prec = t.exp(t.clamp(logits, -kLogitClamp, kLogitClamp));
        heads.push_back(t.kfatt_base(mu, pq, hp, prec));
        continue;
      }
      const std::size_t M = h.group_counts.size();
      const ad::NodeId kg = t.segment_mean(kp, h.group_of, M);
      const ad::NodeId hg = t.segment_mean(hp, h.group_of, M);
      const ad::NodeId logits = t.scale(t.matmul_nt(qp, kg), inv);
      const ad::NodeId sp = t.exp(t.clamp(logits, -kLogitClamp, kLogitClamp));
      const ad::NodeId rs =
          kern == Kernel::kfatt_fs ? t.constant(Tensor({M, 1})) : t.softplus(mlp(t, b, kg, noise_[i]));
      heads.push_back(t.kfatt_freq(mu, pq, hg, sp, rs, h.group_counts));
    }
    return t.matmul(heads.size() == 1 ? heads[0] : t.concat_cols(heads), b(dec_wo_));
  }

  /// Interest estimate for `query_id` given a history.
  ad::NodeId interest(ad::Tape& t, Binder& b, std::size_t query_id, const BehaviorLog& log,
                      const DecodeOptions& opt = {}, EncoderCost* cost = nullptr) const {
    check_query(query_id);
    const PreparedHistory h = prepare(log);
    const ad::NodeId q = t.gather_rows(b(emb_query_), {query_id});
    if (h.events.empty()) return decode(t, b, q, q, q, h, opt);
    std::vector<std::size_t> qids, iids;
    for (const auto& e : h.events) {
      check_query(e.query_id);
      check_item(e.item_id);
      qids.push_back(e.query_id);
      iids.push_back(e.item_id);
    }
    ad::NodeId K = t.gather_rows(b(emb_query_), qids);
    ad::NodeId V = t.gather_rows(b(emb_item_), iids);
    ad::NodeId H = V;
    if (uses_encoder(cfg_.kernel)) {
      for (std::size_t p : h.positions)
        if (p >= cfg_.position_table_size()) throw Error("position " + std::to_string(p) + " beyond position table");
      const ad::NodeId P = t.gather_rows(b(pos_), h.positions);
      K = t.add(K, P);
      V = t.add(V, P);
      H = encode(t, b, K, V, h, cost);
    }
    return decode(t, b, q, K, H, h, opt);
  }

  /// CTR logits (n x 1) for several candidate items scored under one query
  /// and history; the interest estimate is computed once and shared.
  ad::NodeId logits(ad::Tape& t, Binder& b, std::size_t query_id, const BehaviorLog& history,
                    std::span<const std::size_t> items, const DecodeOptions& opt = {}) const {
    if (items.empty()) throw Error("logits: no candidate items");
    for (std::size_t id : items) check_item(id);
    const ad::NodeId vhat = interest(t, b, query_id, history, opt);
    const std::vector<std::size_t> rep(items.size(), 0);
    const ad::NodeId q = t.gather_rows(b(emb_query_), std::vector<std::size_t>(items.size(), query_id));
    const ad::NodeId item = t.gather_rows(b(emb_item_), std::vector<std::size_t>(items.begin(), items.end()));
    const ad::NodeId v = items.size() == 1 ? vhat : t.gather_rows(vhat, rep);
    const ad::NodeId x = cfg_.ctr_raw_item ? t.concat_cols({q, item, v, t.mul(v, item)})
                                           : t.concat_cols({q, v, t.mul(v, item)});
    const ad::NodeId hidden = t.relu(t.add_row(t.matmul(x, b(ctr_w1_)), b(ctr_b1_)));
    return t.add_row(t.matmul(hidden, b(ctr_w2_)), b(ctr_b2_));
  }

  /// CTR logit for one impression.
  ad::NodeId logit(ad::Tape& t, Binder& b, const CtrInstance& inst, const DecodeOptions& opt = {}) const {
    const std::size_t item = inst.item_id;
    return logits(t, b, inst.query_id, inst.history, std::span<const std::size_t>(&item, 1), opt);
  }

  // -- tape-owning conveniences ---------------------------------------------

  double predict(const CtrInstance& inst) const {
    ad::Tape t;
    Binder b(t, params_);
    return sigmoid(t.value(logit(t, b, inst)).item());
  }

  Tensor interest_vector(std::size_t query_id, const BehaviorLog& log, const DecodeOptions& opt = {}) const {
    ad::Tape t;
    Binder b(t, params_);
    return t.value(interest(t, b, query_id, log, opt));
  }

  /// Session encodings H (T x d_model) for a history; requires the encoder.
  Tensor encode_history(const BehaviorLog& log, EncoderCost* cost = nullptr) const {
    if (!uses_encoder(cfg_.kernel)) throw Error("encode_history: kernel has no encoder");
    const PreparedHistory h = prepare(log);
    if (h.events.empty()) return Tensor({0, cfg_.d_model});
    ad::Tape t;
    Binder b(t, params_);
    std::vector<std::size_t> qids, iids;
    for (const auto& e : h.events) {
      qids.push_back(e.query_id);
      iids.push_back(e.item_id);
    }
    const ad::NodeId P = t.gather_rows(b(pos_), h.positions);
    const ad::NodeId K = t.add(t.gather_rows(b(emb_query_), qids), P);
    const ad::NodeId V = t.add(t.gather_rows(b(emb_item_), iids), P);
    return t.value(encode(t, b, K, V, h, cost));
  }

  /// Adds d(BCE)/d(params) for one impression into `grads`; returns the loss.
  double accumulate_gradient(const CtrInstance& inst, std::vector<Tensor>& grads) const {
    ad::Tape t;
    Binder b(t, params_, &grads);
    const ad::NodeId loss = t.bce_logits(logit(t, b, inst), static_cast<double>(inst.label));
    t.backward(loss);
    return t.value(loss).item();
  }

  double loss(const CtrInstance& inst) const {
    ad::Tape t;
    Binder b(t, params_);
    return t.value(t.bce_logits(logit(t, b, inst), static_cast<double>(inst.label))).item();
  }

  /// Click probabilities for impressions that share user, time and query.
  std::vector<double> predict_group(std::span<const CtrInstance> group) const {
    const auto items = group_items(group);
    ad::Tape t;
    Binder b(t, params_);
    const Tensor& z = t.value(logits(t, b, group.front().query_id, group.front().history, items));
    std::vector<double> p;
    for (double x : z.data()) p.push_back(sigmoid(x));
    return p;
  }

  /// Summed BCE over a shared-context group; gradients are added to `grads`.
  double accumulate_group_gradient(std::span<const CtrInstance> group, std::vector<Tensor>& grads) const {
    const auto items = group_items(group);
    ad::Tape t;
    Binder b(t, params_, &grads);
    const ad::NodeId z = logits(t, b, group.front().query_id, group.front().history, items);
    std::vector<ad::NodeId> losses;
    for (std::size_t i = 0; i < group.size(); ++i)
      losses.push_back(t.bce_logits(group.size() == 1 ? z : t.slice_rows(z, i, i + 1),
                                    static_cast<double>(group[i].label)));
    ad::NodeId total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = t.add(total, losses[i]);
    t.backward(total);
    return t.value(total).item();
  }

  // Parameter handles, exposed for tests that inspect or overwrite them.
  std::size_t query_embedding() const { return emb_query_; }
  std::size_t item_embedding() const { return emb_item_; }
  std::size_t position_table() const { return pos_; }
  const std::vector<MlpIds>& prior_mean_heads() const { return prior_mean_; }
  const std::vector<MlpIds>& prior_precision_heads() const { return prior_prec_; }
  const std::vector<MlpIds>& noise_heads() const { return noise_; }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  void validate() const {
    if (cfg_.num_queries == 0 || cfg_.num_items == 0) throw Error("model: vocabulary sizes must be positive");
    if (cfg_.d_model == 0 || cfg_.heads == 0 || cfg_.d_k == 0 || cfg_.d_v == 0 || cfg_.mlp_hidden == 0 ||
        cfg_.head_hidden == 0)
      throw Error("model: dimensions must be positive");
    if (cfg_.max_sessions == 0 || cfg_.max_per_session == 0) throw Error("model: session caps must be positive");
  }

  static std::vector<std::size_t> group_items(std::span<const CtrInstance> group) {
    if (group.empty()) throw Error("empty impression group");
    std::vector<std::size_t> items;
    for (const auto& g : group) {
      if (g.query_id != group.front().query_id || g.user != group.front().user ||
          g.timestamp != group.front().timestamp)
        throw Error("impression group mixes contexts");
      items.push_back(g.item_id);
    }
    return items;
  }

  void check_query(std::size_t id) const {
    if (id > cfg_.num_queries) throw Error("unknown query id " + std::to_string(id));
  }
  void check_item(std::size_t id) const {
    if (id > cfg_.num_items) throw Error("unknown item id " + std::to_string(id));
  }

  template <class Init>
  MlpIds make_mlp(Init& init, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out) {
    return {init(name + ".w1", {in, hidden}, 1.0 / std::sqrt(static_cast<double>(in))),
            init(name + ".b1", {1, hidden}, 0.0),
            init(name + ".w2", {hidden, out}, 1.0 / std::sqrt(static_cast<double>(hidden))),
            init(name + ".b2", {1, out}, 0.0)};
  }

  template <class Init>
  void build(Init& init) {
    const std::size_t d = cfg_.d_model;
    auto sd = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    emb_query_ = init("emb.query", {cfg_.num_queries + 1, d}, cfg_.embedding_sd);
    emb_item_ = init("emb.item", {cfg_.num_items + 1, d}, cfg_.embedding_sd);
    if (uses_encoder(cfg_.kernel)) {
      pos_ = init("enc.position", {cfg_.position_table_size(), d}, 0.1 * cfg_.embedding_sd);
      for (std::size_t i = 0; i < cfg_.heads; ++i) {
        const std::string p = "enc.head" + std::to_string(i);
        enc_wq_.push_back(init(p + ".wq", {d, cfg_.d_k}, sd(d)));
        enc_wk_.push_back(init(p + ".wk", {d, cfg_.d_k}, sd(d)));
        enc_wv_.push_back(init(p + ".wv", {d, cfg_.d_v}, sd(d)));
      }
      enc_wo_ = init("enc.wo", {cfg_.heads * cfg_.d_v, d}, sd(cfg_.heads * cfg_.d_v));
      enc_fc_w_ = init("enc.fc.w", {d, d}, sd(d));
      enc_fc_b_ = init("enc.fc.b", {1, d}, 0.0);
    }
    for (std::size_t i = 0; i < cfg_.heads; ++i) {
      const std::string p = "dec.head" + std::to_string(i);
      dec_wq_.push_back(init(p + ".wq", {d, cfg_.d_k}, sd(d)));
      dec_wk_.push_back(init(p + ".wk", {d, cfg_.d_k}, sd(d)));
      dec_wv_.push_back(init(p + ".wv", {d, cfg_.d_v}, sd(d)));
      if (uses_prior(cfg_.kernel)) {
        prior_mean_.push_back(make_mlp(init, p + ".prior_mean", cfg_.d_k, cfg_.head_hidden, cfg_.d_v));
        if (cfg_.kernel != Kernel::kfatt_bs)
          prior_prec_.push_back(make_mlp(init, p + ".prior_precision", cfg_.d_k, cfg_.head_hidden, 1));
      }
      if (uses_noise_head(cfg_.kernel)) noise_.push_back(make_mlp(init, p + ".noise", cfg_.d_k, cfg_.head_hidden, 1));
    }
    dec_wo_ = init("dec.wo", {cfg_.heads * cfg_.d_v, d}, sd(cfg_.heads * cfg_.d_v));
    const std::size_t ctr_in = (cfg_.ctr_raw_item ? 4 : 3) * d;
    ctr_w1_ = init("ctr.w1", {ctr_in, cfg_.mlp_hidden}, sd(ctr_in));
    ctr_b1_ = init("ctr.b1", {1, cfg_.mlp_hidden}, 0.0);
    ctr_w2_ = init("ctr.w2", {cfg_.mlp_hidden, 1}, sd(cfg_.mlp_hidden));
    ctr_b2_ = init("ctr.b2", {1, 1}, 0.0);
  }

  ad::NodeId mlp(ad::Tape& t, Binder& b, ad::NodeId x, const MlpIds& m) const {
    const ad::NodeId h = t.relu(t.add_row(t.matmul(x, b(m.w1)), b(m.b1)));
    return t.add_row(t.matmul(h, b(m.w2)), b(m.b2));
  }

  ModelConfig cfg_;
  ParamStore params_;
  std::size_t emb_query_ = kNone, emb_item_ = kNone, pos_ = kNone;
  std::vector<std::size_t> enc_wq_, enc_wk_, enc_wv_;
  std::size_t enc_wo_ = kNone, enc_fc_w_ = kNone, enc_fc_b_ = kNone;
  std::vector<std::size_t> dec_wq_, dec_wk_, dec_wv_;
  std::size_t dec_wo_ = kNone;
  std::vector<MlpIds> prior_mean_, prior_prec_, noise_;
  std::size_t ctr_w1_ = kNone, ctr_b1_ = kNone, ctr_w2_ = kNone, ctr_b2_ = kNone;
};

}  // namespace kfatt::model
