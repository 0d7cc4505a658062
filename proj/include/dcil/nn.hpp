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

// Small fully-connected classifier with exact analytic gradients.
//
// Parameter layout (flat): for each layer l in order, the row-major weight
// matrix W_l (out x in) followed by its bias b_l (out). The last layer is the
// classification head; its input is the feature vector.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dcil/error.hpp"
#include "dcil/rng.hpp"

namespace dcil {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

struct NetSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t n_classes = 1;
  Activation activation = Activation::relu;

  bool operator==(const NetSpec&) const = default;

  void validate() const {
    if (input_dim < 1) throw ParameterError("NetSpec: input_dim must be >= 1");
    for (std::size_t h : hidden_dims)
      if (h < 1) throw ParameterError("NetSpec: hidden dims must be >= 1");
    if (n_classes < 1) throw ParameterError("NetSpec: n_classes must be >= 1");
  }

  std::size_t layer_count() const { return hidden_dims.size() + 1; }
  std::size_t layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden_dims[l - 1]; }
  std::size_t layer_out(std::size_t l) const { return l < hidden_dims.size() ? hidden_dims[l] : n_classes; }
  /// Width of the vector fed to the classification head.
  std::size_t feature_dim() const { return hidden_dims.empty() ? input_dim : hidden_dims.back(); }

  /// Offset of W_l within the flat vector; b_l starts at offset + out*in.
  std::size_t layer_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < l; ++i) off += layer_out(i) * (layer_in(i) + 1);
    return off;
  }

  std::size_t param_count() const { return layer_offset(layer_count()); }
};

class ParamVector {
 public:
  ParamVector() = default;

  ParamVector(NetSpec spec, std::vector<double> values) : spec_(std::move(spec)), values_(std::move(values)) {
    spec_.validate();
    if (values_.size() != spec_.param_count())
      throw InputError("ParamVector: length " + std::to_string(values_.size()) + " does not match spec (" +
                       std::to_string(spec_.param_count()) + ")");
    for (double v : values_)
      if (!std::isfinite(v)) throw InputError("ParamVector: non-finite entry");
  }

  static ParamVector zeros(const NetSpec& spec) {
    spec.validate();
    return ParamVector(spec, std::vector<double>(spec.param_count(), 0.0));
  }

  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  static ParamVector random(const NetSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::vector<double> v(spec.param_count());
    Rng rng(seed);
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
      const std::size_t in = spec.layer_in(l), out = spec.layer_out(l);
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      const std::size_t off = spec.layer_offset(l);
      for (std::size_t i = 0; i < out * (in + 1); ++i) v[off + i] = dist(rng);
    }
    return ParamVector(spec, std::move(v));
  }

  const NetSpec& spec() const { return spec_; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  bool operator==(const ParamVector&) const = default;

 private:
  NetSpec spec_;
  std::vector<double> values_;
};

struct ForwardResult {
  std::vector<double> features;
  std::vector<double> logits;
};

namespace detail {

inline double activate(Activation a, double z) { return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z); }

// dAct/dz in terms of the pre-activation z and the post-activation y.
inline double activate_grad(Activation a, double z, double y) {
  return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - y * y;
}

// Pre- and post-activations of every layer for one input.
// post[0] = x, post[l + 1] = act(pre[l]); the last entry holds the logits.
struct Tape {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;
};

inline void run_forward(const ParamVector& params, std::span<const double> x, Tape& tape) {
  const NetSpec& spec = params.spec();
  const auto w = params.values();
  const std::size_t layers = spec.layer_count();
  tape.pre.resize(layers);
  tape.post.resize(layers + 1);
  tape.post[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = spec.layer_in(l), out = spec.layer_out(l);
    const double* W = w.data() + spec.layer_offset(l);
    const double* b = W + out * in;
    const double* a = tape.post[l].data();
    std::vector<double>& z = tape.pre[l];
    z.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      const double* row = W + o * in;
      for (std::size_t i = 0; i < in; ++i) s += row[i] * a[i];
      z[o] = s;
    }
    std::vector<double>& y = tape.post[l + 1];
    if (l + 1 == layers) {
      y = z;
    } else {
      y.resize(out);
      for (std::size_t o = 0; o < out; ++o) y[o] = activate(spec.activation, z[o]);
    }
  }
}

inline void softmax_into(std::span<const double> z, double tau, std::vector<double>& out) {
  out.resize(z.size());
  if (z.empty()) return;
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp((z[i] - mx) / tau);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
}

}  // namespace detail

inline ForwardResult forward(const ParamVector& params, std::span<const double> x) {
  if (x.size() != params.spec().input_dim)
    throw InputError("forward: input has " + std::to_string(x.size()) + " entries, expected " +
                     std::to_string(params.spec().input_dim));
  detail::Tape tape;
  detail::run_forward(params, x, tape);
  const std::size_t L = params.spec().layer_count();
  return ForwardResult{std::move(tape.post[L - 1]), std::move(tape.post[L])};
}

/// exp(z / tau) / sum exp(z / tau), computed with max subtraction.
inline std::vector<double> softmax_t(std::span<const double> logits, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("softmax_t: temperature must be positive");
  for (double z : logits)
    if (!std::isfinite(z)) throw InputError("softmax_t: non-finite logit");
  std::vector<double> out;
  detail::softmax_into(logits, tau, out);
  return out;
}

inline constexpr double kKlClamp = 1e-12;

/// KL(p || q); q is clamped at kKlClamp before the log, zero-mass p terms vanish.
inline double kl_div(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InputError("kl_div: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kKlClamp)));
  }
  return std::max(s, 0.0);
}

inline double cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw InputError("cross_entropy: label " + std::to_string(label) + " out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  return std::log(sum) - (logits[static_cast<std::size_t>(label)] - mx);
}

/// KL(softmax(a) || uniform).
inline double kl_to_uniform(std::span<const double> a) {
  if (a.empty()) return 0.0;
  std::vector<double> s;
  detail::softmax_into(a, 1.0, s);
  const double log_n = std::log(static_cast<double>(a.size()));
  double r = 0.0;
  for (double v : s)
    if (v > 0.0) r += v * (std::log(v) + log_n);
  return std::max(r, 0.0);
}

/// One item of a composite loss. A term contributes only when its weight is
/// non-zero:
///
///   ce_weight     * CE(logits, label)
///   kd_weight     * KL(softmax(teacher / T) || softmax(logits / T))
///                   teacher may be narrower than logits; its softmax is
///                   zero-padded to the full head
///   fedmax_weight * KL(softmax(features) || uniform)
///
/// Spans are borrowed; the caller keeps the storage alive.
struct TrainSample {
  std::span<const double> x;
  int label = -1;
  double ce_weight = 0.0;
  std::span<const double> teacher;
  double kd_weight = 0.0;
  double fedmax_weight = 0.0;
};

/// Batch-level part of a composite loss: the distillation temperature T and
/// the proximal term (prox_mu / 2) * ||theta - prox_center||^2.
struct LossSpec {
  double temperature = 1.0;
  double prox_mu = 0.0;
  const ParamVector* prox_center = nullptr;
};

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

namespace detail {

inline void check_loss_inputs(const ParamVector& params, std::span<const TrainSample> batch, const LossSpec& spec) {
  if (batch.empty()) throw InputError("backward: empty batch");
  const NetSpec& net = params.spec();
  bool uses_kd = false;
  for (const TrainSample& s : batch) {
    if (s.x.size() != net.input_dim) throw InputError("backward: input dimension mismatch");
    if (s.ce_weight != 0.0 && (s.label < 0 || static_cast<std::size_t>(s.label) >= net.n_classes))
      throw InputError("backward: label out of range");
    if (s.kd_weight != 0.0) {
      uses_kd = true;
      if (s.teacher.empty() || s.teacher.size() > net.n_classes)
        throw InputError("backward: teacher width must be in [1, n_classes]");
    }
  }
  if (uses_kd && !(spec.temperature > 0.0)) throw ParameterError("backward: temperature must be positive");
  if (spec.prox_mu < 0.0) throw ParameterError("backward: prox_mu must be >= 0");
  if (spec.prox_mu != 0.0) {
    if (spec.prox_center == nullptr) throw InputError("backward: proximal term needs a center");
    if (!(spec.prox_center->spec() == net)) throw InputError("backward: proximal center spec mismatch");
  }
}

// Loss of one sample plus dL/dlogits and dL/dfeatures (the latter only for fedmax).
struct SampleTerms {
  std::vector<double> soft_t, soft_s, scratch;
};

inline double sample_loss_and_heads(const TrainSample& s, const std::vector<double>& features,
                                    const std::vector<double>& logits, double temperature,
                                    std::vector<double>& dlogits, std::vector<double>& dfeatures,
                                    SampleTerms& w) {
  double loss = 0.0;
  std::fill(dlogits.begin(), dlogits.end(), 0.0);
  std::fill(dfeatures.begin(), dfeatures.end(), 0.0);
  if (s.ce_weight != 0.0) {
    softmax_into(logits, 1.0, w.soft_s);
    const auto y = static_cast<std::size_t>(s.label);
    loss += s.ce_weight * -std::log(std::max(w.soft_s[y], 1e-300));
    for (std::size_t j = 0; j < logits.size(); ++j)
      dlogits[j] += s.ce_weight * (w.soft_s[j] - (j == y ? 1.0 : 0.0));
  }
  if (s.kd_weight != 0.0) {
    const std::size_t k = logits.size();
    softmax_into(s.teacher, temperature, w.soft_t);
    w.soft_t.resize(k, 0.0);
    softmax_into(std::span<const double>(logits.data(), k), temperature, w.soft_s);
    loss += s.kd_weight * kl_div(w.soft_t, w.soft_s);
    for (std::size_t j = 0; j < k; ++j) dlogits[j] += s.kd_weight * (w.soft_s[j] - w.soft_t[j]) / temperature;
  }
  if (s.fedmax_weight != 0.0 && !features.empty()) {
    softmax_into(features, 1.0, w.scratch);
    const double log_n = std::log(static_cast<double>(features.size()));
    double neg_h = 0.0;
    for (double v : w.scratch) neg_h += v * std::log(std::max(v, 1e-300));
    loss += s.fedmax_weight * std::max(neg_h + log_n, 0.0);
    for (std::size_t j = 0; j < features.size(); ++j) {
      const double v = w.scratch[j];
      dfeatures[j] += s.fedmax_weight * v * (std::log(std::max(v, 1e-300)) - neg_h);
    }
  }
  return loss;
}

inline double prox_value(const ParamVector& params, const LossSpec& spec) {
  if (spec.prox_mu == 0.0) return 0.0;
  const auto a = params.values();
  const auto c = spec.prox_center->values();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - c[i]) * (a[i] - c[i]);
  return 0.5 * spec.prox_mu * s;
}

}  // namespace detail

/// Value of the composite loss (sum of the per-sample terms plus the proximal term).
inline double composite_loss(const ParamVector& params, std::span<const TrainSample> batch, const LossSpec& spec) {
  detail::check_loss_inputs(params, batch, spec);
  const std::size_t L = params.spec().layer_count();
  detail::Tape tape;
  detail::SampleTerms w;
  std::vector<double> dl(params.spec().n_classes), df(params.spec().feature_dim());
  double loss = 0.0;
  for (const TrainSample& s : batch) {
    detail::run_forward(params, s.x, tape);
    loss += detail::sample_loss_and_heads(s, tape.post[L - 1], tape.post[L], spec.temperature, dl, df, w);
  }
  return loss + detail::prox_value(params, spec);
}

/// Composite loss and its exact gradient with respect to every parameter.
inline LossGrad backward(const ParamVector& params, std::span<const TrainSample> batch, const LossSpec& spec) {
  detail::check_loss_inputs(params, batch, spec);
  const NetSpec& net = params.spec();
  const std::size_t L = net.layer_count();
  const auto wv = params.values();
  std::vector<double> grad(params.size(), 0.0);

  detail::Tape tape;
  detail::SampleTerms terms;
  std::vector<double> dlogits(net.n_classes), dfeat(net.feature_dim());
  std::vector<double> delta, prev;
  double loss = 0.0;

  for (const TrainSample& s : batch) {
    detail::run_forward(params, s.x, tape);
    loss += detail::sample_loss_and_heads(s, tape.post[L - 1], tape.post[L], spec.temperature, dlogits, dfeat, terms);

    // delta holds dL/d(pre-activation) of the current layer.
    delta = dlogits;
    for (std::size_t l = L; l-- > 0;) {
      const std::size_t in = net.layer_in(l), out = net.layer_out(l);
      const std::size_t off = net.layer_offset(l);
      const double* W = wv.data() + off;
      double* gW = grad.data() + off;
      double* gb = gW + out * in;
      const std::vector<double>& a = tape.post[l];
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        gb[o] += d;
        double* grow = gW + o * in;
        for (std::size_t i = 0; i < in; ++i) grow[i] += d * a[i];
      }
      if (l == 0) break;
      prev.assign(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row = W + o * in;
        for (std::size_t i = 0; i < in; ++i) prev[i] += row[i] * d;
      }
      if (l == L - 1)
        for (std::size_t i = 0; i < in; ++i) prev[i] += dfeat[i];
      const std::vector<double>& z = tape.pre[l - 1];
      const std::vector<double>& y = tape.post[l];
      for (std::size_t i = 0; i < in; ++i) prev[i] *= detail::activate_grad(net.activation, z[i], y[i]);
      delta.swap(prev);
    }
  }

  if (spec.prox_mu != 0.0) {
    const auto c = spec.prox_center->values();
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += spec.prox_mu * (wv[i] - c[i]);
    loss += detail::prox_value(params, spec);
  }
  return LossGrad{loss, ParamVector(net, std::move(grad))};
}

/// params - lr * grad.
inline ParamVector sgd_step(const ParamVector& params, const ParamVector& grad, double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("sgd_step: learning rate must be positive");
  if (!(params.spec() == grad.spec())) throw InputError("sgd_step: shape mismatch");
  std::vector<double> out(params.values().begin(), params.values().end());
  const auto g = grad.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lr * g[i];
  return ParamVector(params.spec(), std::move(out));
}

/// Appends n_new zero-initialized classes to the head. Existing entries are
/// copied unchanged, so the logits of the old classes are bit-identical.
inline ParamVector expand_head(const ParamVector& params, std::size_t n_new) {
  if (n_new < 1) throw ParameterError("expand_head: n_new must be >= 1");
  const NetSpec& old_spec = params.spec();
  NetSpec spec = old_spec;
  spec.n_classes += n_new;
  const std::size_t head = old_spec.layer_count() - 1;
  const std::size_t off = old_spec.layer_offset(head);
  const std::size_t in = old_spec.layer_in(head);
  const std::size_t old_out = old_spec.n_classes;
  const auto v = params.values();

  std::vector<double> out(spec.param_count(), 0.0);
  std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(off), out.begin());
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(off),
            v.begin() + static_cast<std::ptrdiff_t>(off + old_out * in), out.begin() + static_cast<std::ptrdiff_t>(off));
  const std::size_t old_bias = off + old_out * in;
  const std::size_t new_bias = off + spec.n_classes * in;
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(old_bias), v.begin() + static_cast<std::ptrdiff_t>(old_bias + old_out),
            out.begin() + static_cast<std::ptrdiff_t>(new_bias));
  return ParamVector(spec, std::move(out));
}

}  // namespace dcil
