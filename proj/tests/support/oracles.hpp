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

// Reference implementations used as test oracles. Written directly from the
// definitions, sharing no code with the library beyond the plain data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <vector>

#include "dcil/local_learner.hpp"
#include "dcil/nn.hpp"

namespace oracle {

struct Pass {
  std::vector<double> features;
  std::vector<double> logits;
  double min_abs_pre = std::numeric_limits<double>::infinity();  // over hidden pre-activations
};

// Layer l of the flat vector: W (out x in, row major) then b (out).
inline Pass forward(const dcil::NetSpec& s, const std::vector<double>& w, const std::vector<double>& x) {
  Pass p;
  std::vector<double> a = x;
  std::size_t off = 0;
  const std::size_t L = s.hidden_dims.size() + 1;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t in = l == 0 ? s.input_dim : s.hidden_dims[l - 1];
    const std::size_t out = l + 1 < L ? s.hidden_dims[l] : s.n_classes;
    std::vector<double> z(out);
    for (std::size_t o = 0; o < out; ++o) {
      double acc = w[off + out * in + o];
      for (std::size_t i = 0; i < in; ++i) acc += w[off + o * in + i] * a[i];
      z[o] = acc;
    }
    off += out * (in + 1);
    if (l + 1 < L) {
      for (double& v : z) {
        p.min_abs_pre = std::min(p.min_abs_pre, std::abs(v));
        v = s.activation == dcil::Activation::relu ? std::max(v, 0.0) : std::tanh(v);
      }
      a = z;
    } else {
      p.features = a;
      p.logits = z;
    }
  }
  return p;
}

inline std::vector<double> softmax(const std::vector<double>& z, double tau) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v / tau);
  double s = 0.0;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] / tau - m);
  for (double& v : p) v /= s;
  return p;
}

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], 1e-12)));
  return s;
}

struct Item {
  std::vector<double> x;
  int label = -1;
  double ce = 0.0;
  std::vector<double> teacher;  // may be narrower than the head
  double kd = 0.0;
  double fedmax = 0.0;
};

struct Prox {
  double mu = 0.0;
  std::vector<double> center;
};

inline double loss(const dcil::NetSpec& s, const std::vector<double>& w, const std::vector<Item>& batch, double tau,
                   const Prox& prox) {
  double total = 0.0;
  for (const Item& it : batch) {
    const Pass p = forward(s, w, it.x);
    if (it.ce != 0.0) total += it.ce * -std::log(softmax(p.logits, 1.0)[static_cast<std::size_t>(it.label)]);
    if (it.kd != 0.0) {
      std::vector<double> t = softmax(it.teacher, tau);
      t.resize(p.logits.size(), 0.0);
      total += it.kd * kl(t, softmax(p.logits, tau));
    }
    if (it.fedmax != 0.0) {
      const std::vector<double> u(p.features.size(), 1.0 / static_cast<double>(p.features.size()));
      total += it.fedmax * kl(softmax(p.features, 1.0), u);
    }
  }
  if (prox.mu != 0.0) {
    double d = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) d += (w[i] - prox.center[i]) * (w[i] - prox.center[i]);
    total += 0.5 * prox.mu * d;
  }
  return total;
}

// Central differences.
inline std::vector<double> fd_gradient(const dcil::NetSpec& s, std::vector<double> w, const std::vector<Item>& batch,
                                       double tau, const Prox& prox, double h = 1e-5) {
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double w0 = w[i];
    w[i] = w0 + h;
    const double up = loss(s, w, batch, tau, prox);
    w[i] = w0 - h;
    const double dn = loss(s, w, batch, tau, prox);
    w[i] = w0;
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor), maximised over entries.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  return worst;
}

inline std::vector<dcil::TrainSample> as_samples(const std::vector<Item>& batch) {
  std::vector<dcil::TrainSample> out;
  for (const Item& it : batch) {
    dcil::TrainSample t;
    t.x = it.x;
    t.label = it.label;
    t.ce_weight = it.ce;
    t.teacher = it.teacher;
    t.kd_weight = it.kd;
    t.fedmax_weight = it.fedmax;
    out.push_back(t);
  }
  return out;
}

// Greedy herding recomputed from scratch at every step: the mean of the
// selected set plus one candidate, compared against the class mean.
inline std::vector<std::size_t> herding(const std::vector<std::vector<double>>& f, std::size_t K) {
  const std::size_t n = f.size(), d = n ? f[0].size() : 0;
  std::vector<double> mu(d, 0.0);
  for (const auto& v : f)
    for (std::size_t j = 0; j < d; ++j) mu[j] += v[j] / static_cast<double>(n);
  std::vector<std::size_t> chosen;
  while (chosen.size() < std::min(K, n)) {
    std::size_t best = n;
    double best_d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      std::vector<double> sum(d, 0.0);
      for (std::size_t c : chosen)
        for (std::size_t j = 0; j < d; ++j) sum[j] += f[c][j];
      const double k = static_cast<double>(chosen.size() + 1);
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double e = mu[j] - (sum[j] + f[i][j]) / k;
        dist += e * e;
      }
      if (best == n || dist < best_d) {
        best = i;
        best_d = dist;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

// sum_m (n_m / N) theta_m, term by term.
inline std::vector<double> weighted_mean(const std::vector<std::vector<double>>& thetas,
                                         const std::vector<std::size_t>& counts) {
  double N = 0.0;
  for (std::size_t c : counts) N += static_cast<double>(c);
  std::vector<double> out(thetas[0].size(), 0.0);
  for (std::size_t m = 0; m < thetas.size(); ++m)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<double>(counts[m]) / N * thetas[m][i];
  return out;
}

inline std::vector<double> to_vec(const dcil::ParamVector& p) { return {p.values().begin(), p.values().end()}; }

}  // namespace oracle
