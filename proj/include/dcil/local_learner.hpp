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

// Per-site incremental training: the composite local objective
//   loss = CE(new data) + lambda * anchor_loss [+ FedMAX term] [+ proximal term],
// herding-based anchor selection, and anchor-set bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dcil/data.hpp"
#include "dcil/error.hpp"
#include "dcil/nn.hpp"
#include "dcil/rng.hpp"

namespace dcil {

enum class AnchorLossKind { replay_ce, logit_kd };
enum class LocalVariant { dcid, fedavg, fedmax, fedprox };

inline constexpr double kAnchorDistillTemperature = 2.0;

/// Stored old-class examples of one site, per class in herding order.
class AnchorSet {
 public:
  AnchorSet() = default;
  explicit AnchorSet(std::map<int, Examples> per_class) : per_class_(std::move(per_class)) {}

  const std::map<int, Examples>& per_class() const { return per_class_; }
  bool empty() const { return size() == 0; }
  bool contains(int label) const { return per_class_.count(label) != 0; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [c, v] : per_class_) n += v.size();
    return n;
  }

  /// All anchors flattened in class order.
  Examples flatten() const {
    Examples out;
    for (const auto& [c, v] : per_class_) out.insert(out.end(), v.begin(), v.end());
    return out;
  }

  bool operator==(const AnchorSet&) const = default;

 private:
  std::map<int, Examples> per_class_;
};

/// Union of two anchor sets over disjoint classes; entries of prev are kept as-is.
inline AnchorSet update_anchor_set(const AnchorSet& prev, const AnchorSet& fresh) {
  std::map<int, Examples> merged = prev.per_class();
  for (const auto& [c, v] : fresh.per_class()) {
    if (merged.count(c)) throw InputError("update_anchor_set: class " + std::to_string(c) + " already has anchors");
    merged.emplace(c, v);
  }
  return AnchorSet(std::move(merged));
}

struct LocalLossConfig {
  LocalVariant variant = LocalVariant::dcid;
  AnchorLossKind anchor_loss = AnchorLossKind::logit_kd;
  double lambda = 5.0;
  double mu = 0.2;     // fedprox only
  double beta = 500.0; // fedmax only
  double lr = 0.2;
  std::size_t epochs = 10;
  std::size_t batch = 16;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("local: lambda must be >= 0");
    if (!(mu >= 0.0)) throw ConfigError("local: mu must be >= 0");
    if (!(beta >= 0.0)) throw ConfigError("local: beta must be >= 0");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("local: lr must be >= 0");
    if (epochs < 1) throw ConfigError("local: epochs must be >= 1");
    if (batch < 1) throw ConfigError("local: batch must be >= 1");
  }
};

struct SiteState {
  std::size_t site_id = 0;
  Examples shard;     // current-session private data
  AnchorSet anchors;  // anchors of previously seen classes
  ParamVector params;
};

/// Mean KL(softmax(features_i) || uniform) over a batch of feature vectors.
inline double fedmax_regularizer(const std::vector<std::vector<double>>& features_batch) {
  if (features_batch.empty()) return 0.0;
  double s = 0.0;
  for (const auto& a : features_batch) s += kl_to_uniform(a);
  return s / static_cast<double>(features_batch.size());
}

/// (mu / 2) * ||params - global||^2.
inline double fedprox_term(const ParamVector& params, const ParamVector& global, double mu) {
  if (!(params.spec() == global.spec())) throw InputError("fedprox_term: spec mismatch");
  if (!(mu >= 0.0)) throw ParameterError("fedprox_term: mu must be >= 0");
  const auto a = params.values(), b = global.values();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return 0.5 * mu * s;
}

/// Mean anchor loss of `params` on the anchor set.
///  replay_ce: cross-entropy on the stored labels.
///  logit_kd:  KL between the old model's softened distribution (T = 2),
///             zero-padded to the current head, and the current model's.
inline double anchor_loss(const ParamVector& params, const ParamVector& old_params, const AnchorSet& anchors,
                          AnchorLossKind kind) {
  if (anchors.empty()) {
    std::clog << "[dcil] warning: anchor_loss on an empty anchor set\n";
    return 0.0;
  }
  const std::size_t n_old = old_params.spec().n_classes;
  if (kind == AnchorLossKind::logit_kd && n_old > params.spec().n_classes)
    throw InputError("anchor_loss: old head is wider than the current head");
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& [c, exs] : anchors.per_class()) {
    for (const LabeledExample& a : exs) {
      const ForwardResult cur = forward(params, a.x);
      if (kind == AnchorLossKind::replay_ce) {
        total += cross_entropy(cur.logits, a.y);
      } else {
        const ForwardResult old = forward(old_params, a.x);
        auto p = softmax_t(old.logits, kAnchorDistillTemperature);
        p.resize(cur.logits.size(), 0.0);
        const auto q = softmax_t(cur.logits, kAnchorDistillTemperature);
        total += kl_div(p, q);
      }
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

/// Greedy herding: at step k picks the unselected example whose feature,
/// averaged with the k-1 already selected features, lies closest to the class
/// feature mean. Ties go to the lowest index. Returns indices in selection order.
inline std::vector<std::size_t> herding_order(const ParamVector& params, const Examples& class_examples, std::size_t K) {
  const std::size_t n = class_examples.size();
  const std::size_t take = std::min(K, n);
  std::vector<std::size_t> order;
  if (take == 0) return order;

  std::vector<std::vector<double>> feat(n);
  for (std::size_t i = 0; i < n; ++i) feat[i] = forward(params, class_examples[i].x).features;
  const std::size_t d = feat[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& f : feat)
    for (std::size_t j = 0; j < d; ++j) mean[j] += f[j];
  for (double& v : mean) v /= static_cast<double>(n);

  std::vector<double> running(d, 0.0);
  std::vector<bool> used(n, false);
  for (std::size_t k = 1; k <= take; ++k) {
    std::size_t best = n;
    double best_dist = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = mean[j] - (feat[i][j] + running[j]) / static_cast<double>(k);
        dist += diff * diff;
      }
      if (best == n || dist < best_dist) {
        best = i;
        best_dist = dist;
      }
    }
    used[best] = true;
    order.push_back(best);
    for (std::size_t j = 0; j < d; ++j) running[j] += feat[best][j];
  }
  return order;
}

inline Examples select_anchors_herding(const ParamVector& params, const Examples& class_examples, std::size_t K) {
  Examples out;
  for (std::size_t i : herding_order(params, class_examples, K)) out.push_back(class_examples[i]);
  return out;
}

/// Herding anchors for every class present in `shard`.
inline AnchorSet anchors_for_shard(const ParamVector& params, const Examples& shard, std::size_t K) {
  std::map<int, Examples> by_class;
  for (const LabeledExample& e : shard) by_class[e.y].push_back(e);
  std::map<int, Examples> out;
  if (K == 0) return AnchorSet{};
  for (const auto& [c, exs] : by_class) out.emplace(c, select_anchors_herding(params, exs, K));
  return AnchorSet(std::move(out));
}

namespace detail {

inline void sgd_inplace(ParamVector& params, const ParamVector& grad, double lr) {
  auto p = params.values();
  const auto g = grad.values();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

}  // namespace detail

/// Local training of one site starting from `general`.
///
/// Runs `cfg.epochs` epochs of shuffled minibatch SGD over the site's shard
/// joined with its anchors. Per batch the loss is the mean CE over shard items
/// plus lambda times the mean anchor loss over anchor items; fedmax adds
/// beta * mean KL(softmax(features) || U) over the whole batch and fedprox adds
/// (mu / 2) * ||theta - general||^2. `previous_general` is the teacher of the
/// logit_kd anchor loss (the general model of the previous session).
inline ParamVector local_update(const SiteState& site, const ParamVector& general, const ParamVector& previous_general,
                                const LocalLossConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (site.shard.empty() || cfg.lr == 0.0) return general;

  const Examples anchors = site.anchors.flatten();
  const std::size_t n_shard = site.shard.size();
  const std::size_t n_total = n_shard + anchors.size();
  const bool kd = cfg.anchor_loss == AnchorLossKind::logit_kd && cfg.lambda != 0.0;

  std::vector<std::vector<double>> teacher;
  if (kd) {
    if (previous_general.spec().n_classes > general.spec().n_classes)
      throw InputError("local_update: teacher head is wider than the general model");
    teacher.reserve(anchors.size());
    for (const LabeledExample& a : anchors) teacher.push_back(forward(previous_general, a.x).logits);
  }

  const double beta = cfg.variant == LocalVariant::fedmax ? cfg.beta : 0.0;
  LossSpec spec;
  spec.temperature = kAnchorDistillTemperature;
  if (cfg.variant == LocalVariant::fedprox && cfg.mu != 0.0) {
    spec.prox_mu = cfg.mu;
    spec.prox_center = &general;
  }

  ParamVector params = general;
  std::vector<std::size_t> stream(n_total);
  std::iota(stream.begin(), stream.end(), 0);
  Rng rng(seed);
  std::vector<TrainSample> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(stream.begin(), stream.end(), rng);
    for (std::size_t start = 0; start < n_total; start += cfg.batch) {
      const std::size_t end = std::min(n_total, start + cfg.batch);
      std::size_t n_new = 0, n_anchor = 0;
      for (std::size_t k = start; k < end; ++k) (stream[k] < n_shard ? n_new : n_anchor)++;
      batch.clear();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = stream[k];
        TrainSample s;
        s.fedmax_weight = beta / static_cast<double>(end - start);
        if (i < n_shard) {
          s.x = site.shard[i].x;
          s.label = site.shard[i].y;
          s.ce_weight = 1.0 / static_cast<double>(n_new);
        } else {
          const std::size_t a = i - n_shard;
          s.x = anchors[a].x;
          s.label = anchors[a].y;
          if (cfg.lambda != 0.0) {
            if (kd) {
              s.teacher = teacher[a];
              s.kd_weight = cfg.lambda / static_cast<double>(n_anchor);
            } else {
              s.ce_weight = cfg.lambda / static_cast<double>(n_anchor);
            }
          }
        }
        batch.push_back(s);
      }
      const LossGrad lg = backward(params, batch, spec);
      detail::sgd_inplace(params, lg.grad, cfg.lr);
    }
  }
  for (double v : params.values())
    if (!std::isfinite(v)) throw InputError("local_update: training diverged (non-finite parameters)");
  return params;
}

}  // namespace dcil
