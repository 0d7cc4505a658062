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

// Dataset synthesis and loading, class-disjoint session splitting, and
// partitioning of one session's training data across local sites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dcil/error.hpp"
#include "dcil/rng.hpp"

namespace dcil {

struct LabeledExample {
  std::vector<double> x;
  int y = 0;

  bool operator==(const LabeledExample&) const = default;
  auto operator<=>(const LabeledExample&) const = default;
};

using Examples = std::vector<LabeledExample>;

struct Dataset {
  std::size_t dim = 0;
  std::size_t n_classes = 0;
  Examples train;
  Examples test;

  bool operator==(const Dataset&) const = default;
};

/// Gaussian blobs: class c is centred on a seeded random point of the radius-3
/// sphere with isotropic standard deviation `spread`. Each class is split
/// 80/20 into train/test (at least one test example per class).
inline Dataset make_synthetic(std::size_t n_classes, std::size_t per_class, std::size_t dim, double spread,
                              std::uint64_t seed) {
  if (n_classes < 2) throw ParameterError("make_synthetic: n_classes must be >= 2");
  if (per_class < 2) throw ParameterError("make_synthetic: per_class must be >= 2");
  if (dim < 2) throw ParameterError("make_synthetic: dim must be >= 2");
  if (!(spread >= 0.0) || !std::isfinite(spread)) throw ParameterError("make_synthetic: spread must be >= 0");

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * per_class)));
  const std::size_t n_train = per_class - n_test;

  Dataset ds;
  ds.dim = dim;
  ds.n_classes = n_classes;
  ds.train.reserve(n_classes * n_train);
  ds.test.reserve(n_classes * n_test);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> center(dim);
    double norm = 0.0;
    do {
      for (double& v : center) v = normal(rng);
      norm = std::sqrt(std::inner_product(center.begin(), center.end(), center.begin(), 0.0));
    } while (norm < 1e-12);
    for (double& v : center) v *= 3.0 / norm;

    for (std::size_t i = 0; i < per_class; ++i) {
      LabeledExample ex{center, static_cast<int>(c)};
      for (double& v : ex.x) v += spread * normal(rng);
      (i < n_train ? ds.train : ds.test).push_back(std::move(ex));
    }
  }
  return ds;
}

/// Writes a header row (x_0..x_{d-1},y) followed by one example per row.
inline void write_csv(std::ostream& os, std::size_t dim, const Examples& examples) {
  for (std::size_t i = 0; i < dim; ++i) os << "x_" << i << ',';
  os << "y\n";
  os << std::setprecision(17);
  for (const LabeledExample& ex : examples) {
    if (ex.x.size() != dim) throw InputError("write_csv: example width mismatch");
    for (double v : ex.x) os << v << ',';
    os << ex.y << '\n';
  }
}

inline Examples read_csv(std::istream& is, std::size_t* dim_out = nullptr) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("read_csv: missing header");
  const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (cols < 2) throw IoError("read_csv: header needs at least one feature column");
  const std::size_t dim = cols - 1;
  if (dim_out) *dim_out = dim;
  Examples out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    LabeledExample ex;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != cols) throw IoError("read_csv: line " + std::to_string(lineno) + " has wrong column count");
    try {
      for (std::size_t i = 0; i < dim; ++i) ex.x.push_back(std::stod(cells[i]));
      ex.y = std::stoi(cells[dim]);
    } catch (const std::exception&) {
      throw IoError("read_csv: line " + std::to_string(lineno) + " is not numeric");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Reads one CIFAR-100 binary file (train.bin / test.bin): records of
/// 1 coarse-label byte, 1 fine-label byte and 3072 pixel bytes (R, G, B planes
/// of 32x32). Pixels are scaled to [0, 1]; `pool` > 1 mean-pools each plane in
/// pool x pool blocks (pool must divide 32), giving 3 * (32/pool)^2 features.
inline Examples load_cifar100(const std::filesystem::path& path, std::size_t pool = 1) {
  constexpr std::size_t kRecord = 2 + 3072;
  if (pool < 1 || 32 % pool != 0) throw ParameterError("load_cifar100: pool must divide 32");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_cifar100: cannot open " + path.string() + " (offset 0)");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IoError("load_cifar100: " + path.string() + " is empty (offset 0)");
  if (bytes.size() % kRecord != 0) {
    const std::size_t off = (bytes.size() / kRecord) * kRecord;
    throw IoError("load_cifar100: truncated record at byte offset " + std::to_string(off) + " in " + path.string());
  }
  const std::size_t side = 32 / pool;
  const double inv = 1.0 / (255.0 * static_cast<double>(pool * pool));
  Examples out;
  out.reserve(bytes.size() / kRecord);
  for (std::size_t r = 0; r * kRecord < bytes.size(); ++r) {
    const unsigned char* rec = bytes.data() + r * kRecord;
    if (rec[1] >= 100)
      throw IoError("load_cifar100: fine label out of range at byte offset " + std::to_string(r * kRecord + 1));
    LabeledExample ex;
    ex.y = rec[1];
    ex.x.assign(3 * side * side, 0.0);
    const unsigned char* px = rec + 2;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t row = 0; row < 32; ++row)
        for (std::size_t col = 0; col < 32; ++col)
          ex.x[ch * side * side + (row / pool) * side + col / pool] += px[ch * 1024 + row * 32 + col];
    for (double& v : ex.x) v *= inv;
    out.push_back(std::move(ex));
  }
  return out;
}

/// Loads train.bin and test.bin from a CIFAR-100 binary directory.
inline Dataset load_cifar100_dataset(const std::filesystem::path& dir, std::size_t pool = 1) {
  Dataset ds;
  ds.train = load_cifar100(dir / "train.bin", pool);
  ds.test = load_cifar100(dir / "test.bin", pool);
  ds.dim = ds.train.front().x.size();
  ds.n_classes = 100;
  return ds;
}

/// One session of the class-incremental timeline.
struct Session {
  std::vector<int> classes;  // session labels, ascending
  Examples train;
};

/// Classes are relabelled so that session s owns a contiguous label range:
/// the base session gets 0..n_base-1, session 1 the next block, and so on.
/// `original_class[label]` recovers the class id of the source dataset.
/// sessions[0] is the base session; sessions[1..T] are the incremental ones.
struct SessionSplit {
  std::vector<Session> sessions;
  std::map<int, Examples> test_pool;
  std::vector<int> original_class;

  const std::vector<int>& base_classes() const { return sessions.front().classes; }
  std::size_t incremental_sessions() const { return sessions.size() - 1; }

  /// Number of classes seen through session t (inclusive).
  std::size_t seen_classes(std::size_t t) const {
    std::size_t n = 0;
    for (std::size_t s = 0; s <= t; ++s) n += sessions[s].classes.size();
    return n;
  }

  /// Test examples of every class seen through session t.
  Examples test_through(std::size_t t) const {
    Examples out;
    const int limit = static_cast<int>(seen_classes(t));
    for (const auto& [label, exs] : test_pool)
      if (label < limit) out.insert(out.end(), exs.begin(), exs.end());
    return out;
  }
};

inline SessionSplit split_sessions(const Dataset& ds, std::size_t n_base, std::size_t T, std::uint64_t seed) {
  const std::size_t C = ds.n_classes;
  if (n_base < 1 || n_base > C) throw ConfigError("split_sessions: n_base must be in [1, n_classes]");
  const std::size_t rest = C - n_base;
  if (T == 0 ? rest != 0 : (rest == 0 || rest % T != 0))
    throw ConfigError("split_sessions: " + std::to_string(rest) + " non-base classes do not divide into " +
                      std::to_string(T) + " equal sessions");
  const std::size_t per = T == 0 ? 0 : rest / T;

  std::vector<int> order(C);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<int> slot(C);
  for (std::size_t i = 0; i < C; ++i) slot[static_cast<std::size_t>(order[i])] = static_cast<int>(i);

  SessionSplit split;
  split.original_class = order;
  split.sessions.resize(T + 1);
  std::size_t next = 0;
  for (std::size_t s = 0; s <= T; ++s) {
    const std::size_t n = s == 0 ? n_base : per;
    for (std::size_t i = 0; i < n; ++i) split.sessions[s].classes.push_back(static_cast<int>(next++));
  }
  auto session_of = [&](int label) {
    return label < static_cast<int>(n_base) ? std::size_t{0}
                                            : 1 + (static_cast<std::size_t>(label) - n_base) / per;
  };
  for (const LabeledExample& ex : ds.train) {
    if (ex.y < 0 || static_cast<std::size_t>(ex.y) >= C) throw InputError("split_sessions: label out of range");
    LabeledExample r{ex.x, slot[static_cast<std::size_t>(ex.y)]};
    split.sessions[session_of(r.y)].train.push_back(std::move(r));
  }
  for (const LabeledExample& ex : ds.test) {
    if (ex.y < 0 || static_cast<std::size_t>(ex.y) >= C) throw InputError("split_sessions: label out of range");
    const int label = slot[static_cast<std::size_t>(ex.y)];
    split.test_pool[label].push_back(LabeledExample{ex.x, label});
  }
  return split;
}

/// Per-site shards of one session's training set.
struct SitePartition {
  std::vector<Examples> shards;

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s;
    for (const Examples& e : shards) s.push_back(e.size());
    return s;
  }
};

namespace detail {

inline std::map<int, std::vector<std::size_t>> indices_by_class(const Examples& examples) {
  std::map<int, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < examples.size(); ++i) by[examples[i].y].push_back(i);
  return by;
}

}  // namespace detail

/// Within every class the examples are shuffled and dealt round-robin.
inline SitePartition partition_iid(const Examples& examples, std::size_t M, std::uint64_t seed) {
  if (M < 1) throw ConfigError("partition_iid: M must be >= 1");
  SitePartition part;
  part.shards.resize(M);
  Rng rng(seed);
  for (auto& [label, idx] : detail::indices_by_class(examples)) {
    if (idx.size() < M)
      throw ConfigError("partition_iid: class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                        " examples, fewer than " + std::to_string(M) + " sites");
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < idx.size(); ++i) part.shards[i % M].push_back(examples[idx[i]]);
  }
  return part;
}

/// Integer allocation of `total` items proportional to `weights` (largest
/// remainder; ties go to the lower index). The result always sums to total.
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& weights, std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size(), 0);
  if (weights.empty() || total == 0) return out;
  if (!(sum > 0.0)) throw InputError("largest_remainder: weights must have positive sum");
  std::vector<double> frac(weights.size());
  std::size_t given = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double q = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(std::floor(q));
    frac[i] = q - std::floor(q);
    given += out[i];
  }
  // Rounding noise can push the floor sum past total; shave from the largest shares.
  while (given > total) {
    auto it = std::max_element(out.begin(), out.end());
    --*it;
    --given;
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; given < total; k = (k + 1) % order.size(), ++given) ++out[order[k]];
  return out;
}

/// Draws Dirichlet(alpha * 1_M) proportions independently for each class and
/// allocates the class's (shuffled) examples to sites by largest remainder.
inline SitePartition partition_dirichlet(const Examples& examples, std::size_t M, double alpha, std::uint64_t seed) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ParameterError("partition_dirichlet: alpha must be > 0");
  if (M < 2) throw ConfigError("partition_dirichlet: M must be >= 2");
  SitePartition part;
  part.shards.resize(M);
  Rng rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  for (auto& [label, idx] : detail::indices_by_class(examples)) {
    std::vector<double> p(M);
    for (double& v : p) v = gamma(rng);
    if (!(std::accumulate(p.begin(), p.end(), 0.0) > 0.0)) {
      // Every draw underflowed (tiny alpha): the mass collapses onto one site.
      std::fill(p.begin(), p.end(), 0.0);
      p[std::uniform_int_distribution<std::size_t>(0, M - 1)(rng)] = 1.0;
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::vector<std::size_t> counts = largest_remainder(p, idx.size());
    std::size_t pos = 0;
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < counts[m]; ++k) part.shards[m].push_back(examples[idx[pos++]]);
  }
  return part;
}

/// Shannon entropy (nats) of one shard's class distribution; 0 for empty shards.
inline double class_entropy(const Examples& shard) {
  if (shard.empty()) return 0.0;
  std::map<int, std::size_t> counts;
  for (const LabeledExample& e : shard) ++counts[e.y];
  double h = 0.0;
  const double n = static_cast<double>(shard.size());
  for (const auto& [label, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace dcil
