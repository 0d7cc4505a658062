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

// Collaborative and aggregated distillation over an unlabeled shared dataset,
// plus data-weighted parameter averaging.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "dcil/data.hpp"
#include "dcil/error.hpp"
#include "dcil/local_learner.hpp"
#include "dcil/nn.hpp"
#include "dcil/rng.hpp"

namespace dcil {

/// Unlabeled samples visible to every site and the main site. There is no
/// label field: labels are dropped when the set is built.
struct SharedDataset {
  std::vector<std::vector<double>> samples;
  std::vector<std::size_t> provenance;  // contributing site per sample; bookkeeping only

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Writes `site,x_0..x_{d-1}` rows.
inline void write_csv(std::ostream& os, const SharedDataset& shared) {
  const std::size_t d = shared.empty() ? 0 : shared.samples.front().size();
  os << "site";
  for (std::size_t i = 0; i < d; ++i) os << ",x_" << i;
  os << '\n' << std::setprecision(17);
  for (std::size_t r = 0; r < shared.size(); ++r) {
    os << shared.provenance[r];
    for (double v : shared.samples[r]) os << ',' << v;
    os << '\n';
  }
}

/// Collects `per_class_count` samples of every class present in the shards.
/// Each class's quota is split across the sites holding it in proportion to
/// their holdings (largest remainder); each site draws its share at random.
inline SharedDataset build_shared_dataset(const std::vector<Examples>& shards, std::size_t per_class_count,
                                          std::uint64_t seed) {
  SharedDataset shared;
  if (per_class_count == 0) return shared;
  // class -> per-site indices
  std::map<int, std::vector<std::vector<std::size_t>>> holdings;
  for (std::size_t m = 0; m < shards.size(); ++m)
    for (std::size_t i = 0; i < shards[m].size(); ++i) {
      auto& per_site = holdings[shards[m][i].y];
      per_site.resize(shards.size());
      per_site[m].push_back(i);
    }
  Rng rng(seed);
  for (auto& [label, per_site] : holdings) {
    std::vector<double> w(shards.size());
    std::size_t held = 0;
    for (std::size_t m = 0; m < shards.size(); ++m) {
      w[m] = static_cast<double>(per_site[m].size());
      held += per_site[m].size();
    }
    const std::vector<std::size_t> quota = largest_remainder(w, std::min(per_class_count, held));
    for (std::size_t m = 0; m < shards.size(); ++m) {
      std::vector<std::size_t>& idx = per_site[m];
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t k = 0; k < quota[m]; ++k) {
        shared.samples.push_back(shards[m][idx[k]].x);
        shared.provenance.push_back(m);
      }
    }
  }
  return shared;
}

/// Pre-softmax outputs of one model over the shared dataset, one row per sample.
struct LogitsTable {
  std::vector<std::vector<double>> rows;
  std::string source;

  std::size_t width() const { return rows.empty() ? 0 : rows.front().size(); }
  bool operator==(const LogitsTable&) const = default;
};

inline LogitsTable compute_logits(const ParamVector& params, const SharedDataset& shared, std::string source = {}) {
  LogitsTable t;
  t.source = std::move(source);
  t.rows.reserve(shared.size());
  for (const auto& x : shared.samples) t.rows.push_back(forward(params, x).logits);
  return t;
}

inline void write_csv(std::ostream& os, const LogitsTable& table) {
  const std::size_t w = table.width();
  for (std::size_t i = 0; i < w; ++i) os << (i ? "," : "") << "z_" << i;
  os << '\n' << std::setprecision(17);
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << '\n';
  }
}

/// Non-negative weights summing to one.
class EnsembleWeights {
 public:
  explicit EnsembleWeights(std::vector<double> w) : w_(std::move(w)) {
    if (w_.empty()) throw InputError("EnsembleWeights: no weights");
    double s = 0.0;
    for (double v : w_) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("EnsembleWeights: weights must be finite and >= 0");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw InputError("EnsembleWeights: weights must sum to 1");
  }

  /// omega_m = N_m / N.
  static EnsembleWeights from_counts(const std::vector<std::size_t>& counts) {
    const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    if (total == 0) throw ConfigError("EnsembleWeights: all sample counts are zero");
    std::vector<double> w(counts.size());
    for (std::size_t m = 0; m < counts.size(); ++m)
      w[m] = static_cast<double>(counts[m]) / static_cast<double>(total);
    // Absorb rounding so the sum is 1 to the last ulp.
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    auto big = std::max_element(w.begin(), w.end());
    *big += 1.0 - s;
    return EnsembleWeights(std::move(w));
  }

  static EnsembleWeights uniform(std::size_t n) {
    if (n == 0) throw InputError("EnsembleWeights: no weights");
    return from_counts(std::vector<std::size_t>(n, 1));
  }

  const std::vector<double>& values() const { return w_; }
  std::size_t size() const { return w_.size(); }

 private:
  std::vector<double> w_;
};

/// Row-wise weighted sum of the tables.
inline LogitsTable ensemble_logits(const std::vector<LogitsTable>& tables, const EnsembleWeights& w) {
  if (tables.size() != w.size()) throw InputError("ensemble_logits: one weight per table required");
  const std::size_t rows = tables.front().rows.size();
  const std::size_t width = tables.front().width();
  for (const LogitsTable& t : tables) {
    if (t.rows.size() != rows) throw InputError("ensemble_logits: row count mismatch");
    for (const auto& r : t.rows)
      if (r.size() != width) throw InputError("ensemble_logits: row width mismatch");
  }
  // Accumulated as ref + sum_m w_m (t_m - ref) around the heaviest table, so
  // identical tables and one-hot weights reproduce their input exactly.
  const auto& wv = w.values();
  const std::size_t ref = static_cast<std::size_t>(std::max_element(wv.begin(), wv.end()) - wv.begin());
  LogitsTable out;
  out.source = "ensemble";
  out.rows = tables[ref].rows;
  for (std::size_t m = 0; m < tables.size(); ++m) {
    if (m == ref || wv[m] == 0.0) continue;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < width; ++j) out.rows[r][j] += wv[m] * (tables[m].rows[r][j] - tables[ref].rows[r][j]);
  }
  return out;
}

/// Sum over the shared set of KL(softmax(teacher / tau) || softmax(student / tau)).
inline double distillation_loss(const ParamVector& student, const LogitsTable& teacher, const SharedDataset& shared,
                                double tau) {
  if (teacher.rows.size() != shared.size()) throw InputError("distillation_loss: teacher rows != shared samples");
  double s = 0.0;
  for (std::size_t i = 0; i < shared.size(); ++i) {
    const auto z = forward(student, shared.samples[i]).logits;
    if (teacher.rows[i].size() != z.size()) throw InputError("distillation_loss: teacher width mismatch");
    s += kl_div(softmax_t(teacher.rows[i], tau), softmax_t(z, tau));
  }
  return s;
}

namespace detail {

// Full shared set per batch up to 256 samples, batches of 128 beyond.
inline std::size_t distill_batch_size(std::size_t n) { return n <= 256 ? n : 128; }

// Minimizes the summed distillation loss by shuffled minibatch SGD.
inline ParamVector distill(const ParamVector& init, const LogitsTable& teacher, const SharedDataset& shared, double tau,
                           double lr, std::size_t epochs, std::uint64_t seed, const char* who) {
  if (!(tau > 0.0)) throw ParameterError(std::string(who) + ": temperature must be positive");
  if (!(lr >= 0.0)) throw ParameterError(std::string(who) + ": lr must be >= 0");
  if (shared.empty() || epochs == 0 || lr == 0.0) return init;
  if (teacher.rows.size() != shared.size()) throw InputError(std::string(who) + ": teacher rows != shared samples");
  if (teacher.width() != init.spec().n_classes) throw InputError(std::string(who) + ": teacher width mismatch");

  ParamVector params = init;
  const std::size_t n = shared.size();
  const std::size_t bs = distill_batch_size(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  LossSpec spec;
  spec.temperature = tau;
  std::vector<TrainSample> batch;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += bs) {
      batch.clear();
      for (std::size_t k = start; k < std::min(n, start + bs); ++k) {
        TrainSample s;
        s.x = shared.samples[order[k]];
        s.teacher = teacher.rows[order[k]];
        s.kd_weight = 1.0;
        batch.push_back(s);
      }
      detail::sgd_inplace(params, backward(params, batch, spec).grad, lr);
    }
  }
  return params;
}

}  // namespace detail

/// Collaborative distillation of one local model towards the ensemble teacher.
inline ParamVector dcd_finetune(const ParamVector& site_params, const LogitsTable& teacher, const SharedDataset& shared,
                                double tau1, double lr, std::size_t epochs, std::uint64_t seed) {
  return detail::distill(site_params, teacher, shared, tau1, lr, epochs, seed, "dcd_finetune");
}

/// theta = sum_m (N_m / N) theta_m.
inline ParamVector fedavg_aggregate(const std::vector<ParamVector>& params, const std::vector<std::size_t>& counts) {
  if (params.empty()) throw InputError("fedavg_aggregate: no models");
  if (params.size() != counts.size()) throw InputError("fedavg_aggregate: one count per model required");
  const NetSpec& spec = params.front().spec();
  for (const ParamVector& p : params)
    if (!(p.spec() == spec)) throw InputError("fedavg_aggregate: models have different specs");
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  if (total == 0) throw ConfigError("fedavg_aggregate: all sample counts are zero");

  // ref + sum_m w_m (theta_m - ref) around the largest site: identical
  // models average to themselves bit-exactly.
  const std::size_t ref = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  const auto base = params[ref].values();
  std::vector<double> out(base.begin(), base.end());
  for (std::size_t m = 0; m < params.size(); ++m) {
    if (m == ref || counts[m] == 0) continue;
    const double w = static_cast<double>(counts[m]) / static_cast<double>(total);
    const auto v = params[m].values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * (v[i] - base[i]);
  }
  return ParamVector(spec, std::move(out));
}

/// Aggregated distillation: refines the averaged general model towards the
/// ensemble of the local models on the shared dataset.
inline ParamVector dad_refine(const ParamVector& init_general, const LogitsTable& teacher, const SharedDataset& shared,
                              double tau2, double lr, std::size_t epochs, std::uint64_t seed) {
  return detail::distill(init_general, teacher, shared, tau2, lr, epochs, seed, "dad_refine");
}

}  // namespace dcil
