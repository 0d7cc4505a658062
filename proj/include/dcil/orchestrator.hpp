/*
 * Copyright 2026 The dcil-sim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Session/round driver for the composite-distillation protocol (DCID), the
// basic decentralized baselines (FedAvg / FedMAX / FedProx local objectives)
// and a centralized upper bound, plus evaluation and communication accounting.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "dcil/data.hpp"
#include "dcil/distillation.hpp"
#include "dcil/error.hpp"
#include "dcil/local_learner.hpp"
#include "dcil/nn.hpp"
#include "dcil/parallel.hpp"
#include "dcil/rng.hpp"

namespace dcil {

enum class Method { dcid, dcil_fedavg, dcil_fedmax, dcil_fedprox, centralized };
enum class PartitionKind { iid, dirichlet };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::dcid: return "dcid";
    case Method::dcil_fedavg: return "dcil_fedavg";
    case Method::dcil_fedmax: return "dcil_fedmax";
    case Method::dcil_fedprox: return "dcil_fedprox";
    case Method::centralized: return "centralized";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::dcid, Method::dcil_fedavg, Method::dcil_fedmax, Method::dcil_fedprox, Method::centralized})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar100
  std::size_t n_classes = 20;
  std::size_t per_class = 100;
  std::size_t dim = 16;
  double spread = 1.0;
  std::size_t n_base = 10;
  std::string cifar_dir;
  std::size_t cifar_pool = 8;
};

struct RunConfig {
  Method method = Method::dcid;
  std::size_t sites = 5;     // M
  std::size_t sessions = 5;  // T
  std::size_t rounds = 3;    // R
  DataConfig data;
  std::vector<std::size_t> hidden{32, 32};
  Activation activation = Activation::relu;
  std::size_t base_epochs = 30;
  double base_lr = 0.1;
  std::size_t base_batch = 128;
  LocalLossConfig local;
  std::size_t anchors_per_class = 20;  // K
  std::size_t shared_per_class = 20;
  double tau1 = 5.0;
  double tau2 = 5.0;
  double distill_lr = 1e-2;
  std::size_t distill_epochs = 5;
  PartitionKind partition = PartitionKind::iid;
  double alpha = 1.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (sites < 1) throw ConfigError("sites must be >= 1");
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
    if (data.source != "synthetic" && data.source != "cifar100")
      throw ConfigError("data.source must be 'synthetic' or 'cifar100'");
    if (data.n_base < 1 || data.n_base > data.n_classes) throw ConfigError("data.n_base must be in [1, n_classes]");
    const std::size_t rest = data.n_classes - data.n_base;
    if (sessions == 0 ? rest != 0 : (rest == 0 || rest % sessions != 0))
      throw ConfigError("data.n_classes - data.n_base must split into `sessions` equal non-empty sessions");
    for (std::size_t h : hidden)
      if (h < 1) throw ConfigError("net.hidden entries must be >= 1");
    if (base_epochs < 1) throw ConfigError("base.epochs must be >= 1");
    if (!(base_lr > 0.0)) throw ConfigError("base.lr must be > 0");
    if (base_batch < 1) throw ConfigError("base.batch must be >= 1");
    local.validate();
    if (!(tau1 > 0.0) || !(tau2 > 0.0)) throw ConfigError("distill.tau1/tau2 must be > 0");
    if (!(distill_lr >= 0.0)) throw ConfigError("distill.lr must be >= 0");
    if (partition == PartitionKind::dirichlet) {
      if (!(alpha > 0.0)) throw ConfigError("partition.alpha must be > 0");
      if (sites < 2) throw ConfigError("dirichlet partition needs sites >= 2");
    }
  }
};

/// Scalars moved between sites and the main site; counted per session.
struct CommLedger {
  std::uint64_t params_up = 0;
  std::uint64_t params_down = 0;
  std::uint64_t shared_samples = 0;
  std::uint64_t logit_scalars = 0;

  std::uint64_t params_transferred() const { return params_up + params_down; }
  bool operator==(const CommLedger&) const = default;
};

struct MetricsRecord {
  std::size_t session = 0;
  std::size_t seen_classes = 0;
  double accuracy = 0.0;
  std::map<int, double> per_class_accuracy;  // keyed by original class id
  CommLedger comm;

  bool operator==(const MetricsRecord&) const = default;
};

struct EvalResult {
  double accuracy = 0.0;
  std::map<int, double> per_class;          // keyed by label
  std::map<int, std::size_t> per_class_count;
};

/// Top-1 accuracy using only the first `seen_classes` logits; ties go to the
/// lowest class.
inline EvalResult evaluate(const ParamVector& params, const Examples& test_pool, std::size_t seen_classes) {
  if (test_pool.empty()) throw InputError("evaluate: empty test pool");
  if (seen_classes < 1 || seen_classes > params.spec().n_classes)
    throw InputError("evaluate: seen_classes must be in [1, n_classes]");
  std::map<int, std::size_t> correct;
  EvalResult r;
  std::size_t hits = 0;
  for (const LabeledExample& ex : test_pool) {
    if (ex.y < 0 || static_cast<std::size_t>(ex.y) >= seen_classes)
      throw InputError("evaluate: test example of an unseen class");
    const auto z = forward(params, ex.x).logits;
    std::size_t best = 0;
    for (std::size_t j = 1; j < seen_classes; ++j)
      if (z[j] > z[best]) best = j;
    ++r.per_class_count[ex.y];
    if (static_cast<int>(best) == ex.y) {
      ++hits;
      ++correct[ex.y];
    }
  }
  for (const auto& [c, n] : r.per_class_count)
    r.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(n);
  r.accuracy = static_cast<double>(hits) / static_cast<double>(test_pool.size());
  return r;
}

struct Summary {
  double average_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::uint64_t params_transferred = 0;
};

inline Summary summarize(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw InputError("summarize: no records");
  Summary s;
  for (const MetricsRecord& r : records) {
    s.average_accuracy += r.accuracy;
    s.params_transferred += r.comm.params_transferred();
  }
  s.average_accuracy /= static_cast<double>(records.size());
  s.final_accuracy = records.back().accuracy;
  return s;
}

/// Receives one token per protocol step, in execution order.
using TraceSink = std::function<void(std::string_view)>;

namespace detail {

struct Prepared {
  SessionSplit split;
  ParamVector base;                    // general model after session 0
  std::vector<AnchorSet> base_anchors;  // per site
};

inline Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.data.source == "cifar100") {
    if (cfg.data.cifar_dir.empty()) throw ConfigError("data.cifar_dir is required for cifar100");
    Dataset ds = load_cifar100_dataset(cfg.data.cifar_dir, cfg.data.cifar_pool);
    if (ds.n_classes != cfg.data.n_classes) throw ConfigError("data.n_classes must be 100 for cifar100");
    return ds;
  }
  return make_synthetic(cfg.data.n_classes, cfg.data.per_class, cfg.data.dim, cfg.data.spread,
                        derive_seed(cfg.seed, {stream::kData}));
}

inline SitePartition partition(const RunConfig& cfg, const Examples& examples, std::size_t session) {
  const std::uint64_t seed = derive_seed(cfg.seed, {stream::kPartition, session});
  return cfg.partition == PartitionKind::iid ? partition_iid(examples, cfg.sites, seed)
                                             : partition_dirichlet(examples, cfg.sites, cfg.alpha, seed);
}

// Plain minibatch SGD on cross-entropy.
inline ParamVector train_supervised(ParamVector params, const Examples& data, double lr, std::size_t epochs,
                                    std::size_t batch_size, std::uint64_t seed) {
  if (data.empty()) return params;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::vector<TrainSample> batch;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
      const std::size_t end = std::min(data.size(), start + batch_size);
      batch.clear();
      for (std::size_t k = start; k < end; ++k) {
        TrainSample s;
        s.x = data[order[k]].x;
        s.label = data[order[k]].y;
        s.ce_weight = 1.0 / static_cast<double>(end - start);
        batch.push_back(s);
      }
      sgd_inplace(params, backward(params, batch, LossSpec{}).grad, lr);
    }
  }
  return params;
}

inline NetSpec net_spec(const RunConfig& cfg, std::size_t input_dim, std::size_t n_classes) {
  NetSpec spec;
  spec.input_dim = input_dim;
  spec.hidden_dims = cfg.hidden;
  spec.n_classes = n_classes;
  spec.activation = cfg.activation;
  return spec;
}

// Base session: the general model is trained centrally on the base classes;
// every site then herds anchors from its share of the base data.
inline Prepared prepare(const RunConfig& cfg) {
  cfg.validate();
  const Dataset ds = load_dataset(cfg);
  Prepared p;
  p.split = split_sessions(ds, cfg.data.n_base, cfg.sessions, derive_seed(cfg.seed, {stream::kSplit}));
  const Session& base = p.split.sessions.front();
  const NetSpec spec = net_spec(cfg, ds.dim, base.classes.size());
  p.base = train_supervised(ParamVector::random(spec, derive_seed(cfg.seed, {stream::kInit})), base.train,
                            cfg.base_lr, cfg.base_epochs, cfg.base_batch, derive_seed(cfg.seed, {stream::kBaseTrain}));
  if (cfg.method != Method::centralized) {
    const SitePartition part = partition(cfg, base.train, 0);
    p.base_anchors.resize(cfg.sites);
    parallel_for(cfg.sites, cfg.threads, [&](std::size_t m) {
      p.base_anchors[m] = anchors_for_shard(p.base, part.shards[m], cfg.anchors_per_class);
    });
  }
  return p;
}

inline MetricsRecord make_record(const Prepared& p, const ParamVector& general, std::size_t session,
                                 const CommLedger& comm) {
  const std::size_t seen = p.split.seen_classes(session);
  const EvalResult ev = evaluate(general, p.split.test_through(session), seen);
  MetricsRecord rec;
  rec.session = session;
  rec.seen_classes = seen;
  rec.accuracy = ev.accuracy;
  for (const auto& [label, acc] : ev.per_class)
    rec.per_class_accuracy[p.split.original_class[static_cast<std::size_t>(label)]] = acc;
  rec.comm = comm;
  return rec;
}

inline LocalVariant local_variant(Method m) {
  switch (m) {
    case Method::dcil_fedmax: return LocalVariant::fedmax;
    case Method::dcil_fedprox: return LocalVariant::fedprox;
    case Method::dcil_fedavg: return LocalVariant::fedavg;
    default: return LocalVariant::dcid;
  }
}

inline void emit(const TraceSink& trace, std::string_view step) {
  if (trace) trace(step);
}

// Shared driver of the decentralized methods. `distill` selects the DCID
// round structure; otherwise rounds follow the basic framework.
inline std::vector<MetricsRecord> run_decentralized(const RunConfig& cfg, bool distill, const TraceSink& trace) {
  Prepared p = prepare(cfg);
  const std::size_t M = cfg.sites;
  std::vector<MetricsRecord> records;
  records.push_back(make_record(p, p.base, 0, CommLedger{}));

  LocalLossConfig local = cfg.local;
  local.variant = local_variant(cfg.method);

  std::vector<SiteState> sites(M);
  for (std::size_t m = 0; m < M; ++m) {
    sites[m].site_id = m;
    sites[m].anchors = p.base_anchors[m];
  }

  ParamVector general = p.base;
  for (std::size_t t = 1; t <= cfg.sessions; ++t) {
    emit(trace, "session");
    const Session& session = p.split.sessions[t];
    const ParamVector previous = general;
    general = expand_head(general, session.classes.size());
    const std::uint64_t P = general.size();

    const SitePartition part = partition(cfg, session.train, t);
    std::vector<std::size_t> counts(M);
    for (std::size_t m = 0; m < M; ++m) {
      sites[m].shard = part.shards[m];
      counts[m] = part.shards[m].size();
    }
    const EnsembleWeights omega = EnsembleWeights::from_counts(counts);

    CommLedger comm;
    SharedDataset shared;
    if (distill) {
      shared = build_shared_dataset(part.shards, cfg.shared_per_class, derive_seed(cfg.seed, {stream::kShared, t}));
      comm.shared_samples = shared.size();
    }

    std::vector<AnchorSet> fresh(M);
    std::vector<ParamVector> local_models(M);
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
      emit(trace, "distribute");
      comm.params_down += M * P;

      parallel_for(M, cfg.threads, [&](std::size_t m) {
        sites[m].params = general;
        local_models[m] = local_update(sites[m], general, previous, local,
                                       derive_seed(cfg.seed, {stream::kLocal, t, r, m}));
      });
      emit(trace, distill ? "did" : "local_update");

      if (distill) {
        std::vector<LogitsTable> z0(M);
        parallel_for(M, cfg.threads, [&](std::size_t m) { z0[m] = compute_logits(local_models[m], shared); });
        emit(trace, "local_outputs");
        parallel_for(M, cfg.threads, [&](std::size_t m) {
          fresh[m] = anchors_for_shard(local_models[m], sites[m].shard, cfg.anchors_per_class);
        });
        emit(trace, "anchors");
        const LogitsTable teacher0 = ensemble_logits(z0, omega);
        emit(trace, "ensemble");

        std::vector<ParamVector> refined(M);
        parallel_for(M, cfg.threads, [&](std::size_t m) {
          refined[m] = dcd_finetune(local_models[m], teacher0, shared, cfg.tau1, cfg.distill_lr, cfg.distill_epochs,
                                    derive_seed(cfg.seed, {stream::kDcd, t, r, m}));
        });
        emit(trace, "dcd");

        const ParamVector averaged = fedavg_aggregate(refined, counts);
        comm.params_up += M * P;
        emit(trace, "fedavg");

        std::vector<LogitsTable> z1(M);
        parallel_for(M, cfg.threads, [&](std::size_t m) { z1[m] = compute_logits(refined[m], shared); });
        emit(trace, "outputs");
        const LogitsTable teacher1 = ensemble_logits(z1, omega);
        emit(trace, "ensemble");

        general = dad_refine(averaged, teacher1, shared, cfg.tau2, cfg.distill_lr, cfg.distill_epochs,
                             derive_seed(cfg.seed, {stream::kDad, t, r}));
        emit(trace, "dad");
        comm.logit_scalars += 2ULL * M * shared.size() * general.spec().n_classes;
      } else {
        parallel_for(M, cfg.threads, [&](std::size_t m) {
          fresh[m] = anchors_for_shard(local_models[m], sites[m].shard, cfg.anchors_per_class);
        });
        emit(trace, "anchors");
        general = fedavg_aggregate(local_models, counts);
        comm.params_up += M * P;
        emit(trace, "fedavg");
      }
    }
    for (std::size_t m = 0; m < M; ++m) sites[m].anchors = update_anchor_set(sites[m].anchors, fresh[m]);
    records.push_back(make_record(p, general, t, comm));
  }
  return records;
}

}  // namespace detail

/// Composite-distillation protocol: per round DID -> local outputs -> anchors
/// -> ensemble -> DCD -> FedAvg -> outputs -> ensemble -> DAD.
inline std::vector<MetricsRecord> run_dcid(const RunConfig& cfg, const TraceSink& trace = {}) {
  if (cfg.method != Method::dcid) throw ConfigError("run_dcid: method must be dcid");
  return detail::run_decentralized(cfg, true, trace);
}

/// Basic decentralized framework: local objective, anchors, weighted averaging.
inline std::vector<MetricsRecord> run_baseline(const RunConfig& cfg, const TraceSink& trace = {}) {
  if (cfg.method != Method::dcil_fedavg && cfg.method != Method::dcil_fedmax && cfg.method != Method::dcil_fedprox)
    throw ConfigError("run_baseline: method must be dcil_fedavg, dcil_fedmax or dcil_fedprox");
  return detail::run_decentralized(cfg, false, trace);
}

/// Upper bound: at every session the model is retrained on all data seen so
/// far with the base-session recipe (base lr, epochs and batch), warm-started
/// from the previous session's model.
inline std::vector<MetricsRecord> run_centralized(const RunConfig& cfg) {
  if (cfg.method != Method::centralized) throw ConfigError("run_centralized: method must be centralized");
  detail::Prepared p = detail::prepare(cfg);
  std::vector<MetricsRecord> records;
  records.push_back(detail::make_record(p, p.base, 0, CommLedger{}));
  ParamVector general = p.base;
  Examples seen = p.split.sessions.front().train;
  for (std::size_t t = 1; t <= cfg.sessions; ++t) {
    const Session& session = p.split.sessions[t];
    seen.insert(seen.end(), session.train.begin(), session.train.end());
    general = expand_head(general, session.classes.size());
    general = detail::train_supervised(general, seen, cfg.base_lr, cfg.base_epochs, cfg.base_batch,
                                       derive_seed(cfg.seed, {stream::kCentral, t}));
    records.push_back(detail::make_record(p, general, t, CommLedger{}));
  }
  return records;
}

inline std::vector<MetricsRecord> run(const RunConfig& cfg, const TraceSink& trace = {}) {
  switch (cfg.method) {
    case Method::dcid: return run_dcid(cfg, trace);
    case Method::centralized: return run_centralized(cfg);
    default: return run_baseline(cfg, trace);
  }
}

}  // namespace dcil
