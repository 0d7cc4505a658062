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

// Random small nets and batches for the gradient checks.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "support/oracles.hpp"

namespace oracle {

enum class LossCase { ce, anchor_kd, replay_ce, distill, fedmax, fedprox, mixed };

inline const std::vector<LossCase>& all_loss_cases() {
  static const std::vector<LossCase> v{LossCase::ce,     LossCase::anchor_kd, LossCase::replay_ce, LossCase::distill,
                                       LossCase::fedmax, LossCase::fedprox,   LossCase::mixed};
  return v;
}

inline std::string name(LossCase c) {
  switch (c) {
    case LossCase::ce: return "ce";
    case LossCase::anchor_kd: return "ce+anchor_kd";
    case LossCase::replay_ce: return "ce+replay_ce";
    case LossCase::distill: return "distill";
    case LossCase::fedmax: return "ce+fedmax";
    case LossCase::fedprox: return "ce+fedprox";
    default: return "mixed";
  }
}

struct GradCase {
  dcil::NetSpec spec;
  std::vector<double> w;
  std::vector<Item> batch;
  double tau = 1.0;
  Prox prox;
};

// Dims <= 8. ReLU nets resample inputs until no hidden unit sits near its kink.
inline GradCase make_case(LossCase kind, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(2, 8), depth(0, 2), cls(2, 6), bsz(1, 5);
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.2, 2.0);
  GradCase g;
  g.spec.input_dim = static_cast<std::size_t>(dim(rng));
  for (int i = depth(rng); i > 0; --i) g.spec.hidden_dims.push_back(static_cast<std::size_t>(dim(rng)));
  g.spec.n_classes = static_cast<std::size_t>(cls(rng));
  g.spec.activation = rng() % 2 ? dcil::Activation::relu : dcil::Activation::tanh;
  g.w.resize(g.spec.param_count());
  for (double& v : g.w) v = u(rng);
  g.tau = kind == LossCase::distill ? 5.0 : (kind == LossCase::ce ? 1.0 : 2.0);
  if (kind == LossCase::fedprox || kind == LossCase::mixed) {
    g.prox.mu = pos(rng);
    g.prox.center.resize(g.w.size());
    for (double& v : g.prox.center) v = u(rng);
  }

  const int n = bsz(rng);
  const std::size_t n_old = g.spec.n_classes > 2 ? g.spec.n_classes - 1 : g.spec.n_classes;
  for (int b = 0; b < n; ++b) {
    Item it;
    for (int tries = 0; tries < 100; ++tries) {
      it.x.assign(g.spec.input_dim, 0.0);
      for (double& v : it.x) v = 2.0 * u(rng);
      if (g.spec.hidden_dims.empty() || g.spec.activation == dcil::Activation::tanh) break;
      if (forward(g.spec, g.w, it.x).min_abs_pre > 1e-3) break;
    }
    it.label = static_cast<int>(rng() % g.spec.n_classes);
    auto teacher = [&](std::size_t width) {
      std::vector<double> t(width);
      for (double& v : t) v = 3.0 * u(rng);
      return t;
    };
    const bool anchor = b % 2 == 1;
    switch (kind) {
      case LossCase::ce: it.ce = pos(rng); break;
      case LossCase::anchor_kd:
        if (anchor) {
          it.teacher = teacher(n_old);
          it.kd = pos(rng);
        } else {
          it.ce = pos(rng);
        }
        break;
      case LossCase::replay_ce: it.ce = anchor ? 5.0 * pos(rng) : pos(rng); break;
      case LossCase::distill:
        it.label = -1;
        it.teacher = teacher(g.spec.n_classes);
        it.kd = 1.0;
        break;
      case LossCase::fedmax:
        it.ce = pos(rng);
        it.fedmax = pos(rng);
        break;
      case LossCase::fedprox: it.ce = pos(rng); break;
      case LossCase::mixed:
        it.ce = pos(rng);
        it.teacher = teacher(n_old);
        it.kd = pos(rng);
        it.fedmax = pos(rng);
        break;
    }
    g.batch.push_back(std::move(it));
  }
  return g;
}

struct GradCheck {
  double grad_rel_err = 0.0;
  double loss_abs_err = 0.0;
};

inline GradCheck check_case(const GradCase& g) {
  const dcil::ParamVector params(g.spec, g.w);
  const dcil::ParamVector center = g.prox.mu != 0.0 ? dcil::ParamVector(g.spec, g.prox.center) : params;
  dcil::LossSpec spec;
  spec.temperature = g.tau;
  spec.prox_mu = g.prox.mu;
  spec.prox_center = g.prox.mu != 0.0 ? &center : nullptr;
  const auto samples = as_samples(g.batch);
  const dcil::LossGrad lg = dcil::backward(params, samples, spec);
  GradCheck r;
  r.grad_rel_err = max_rel_err(to_vec(lg.grad), fd_gradient(g.spec, g.w, g.batch, g.tau, g.prox));
  r.loss_abs_err = std::abs(lg.loss - loss(g.spec, g.w, g.batch, g.tau, g.prox));
  return r;
}

}  // namespace oracle
