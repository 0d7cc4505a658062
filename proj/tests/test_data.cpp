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


#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <unistd.h>

#include "dcil/data.hpp"

using namespace dcil;

namespace {

Examples sorted(Examples e) {
  std::sort(e.begin(), e.end());
  return e;
}

Examples concat(const SitePartition& p) {
  Examples all;
  for (const Examples& s : p.shards) all.insert(all.end(), s.begin(), s.end());
  return all;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dcil_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Synthetic, SizesAndDeterminism) {
  const Dataset a = make_synthetic(5, 10, 4, 1.0, 3);
  EXPECT_EQ(a.train.size(), 5u * 8);
  EXPECT_EQ(a.test.size(), 5u * 2);
  EXPECT_EQ(a.dim, 4u);
  EXPECT_EQ(a, make_synthetic(5, 10, 4, 1.0, 3));
  EXPECT_NE(a, make_synthetic(5, 10, 4, 1.0, 4));
  // at least one test example even for tiny classes
  EXPECT_EQ(make_synthetic(3, 2, 2, 1.0, 0).test.size(), 3u);
}

TEST(Synthetic, ZeroSpreadPutsPointsOnTheRadiusThreeSphere) {
  const Dataset d = make_synthetic(4, 5, 6, 0.0, 1);
  for (const auto& e : d.train) {
    double n = 0;
    for (double v : e.x) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 3.0, 1e-12);
  }
}

TEST(Synthetic, RejectsDegenerateShapes) {
  EXPECT_THROW(make_synthetic(1, 10, 4, 1.0, 0), ParameterError);
  EXPECT_THROW(make_synthetic(3, 1, 4, 1.0, 0), ParameterError);
  EXPECT_THROW(make_synthetic(3, 10, 4, -1.0, 0), ParameterError);
}

TEST(Csv, HeaderAndRoundTrip) {
  const Dataset d = make_synthetic(3, 5, 2, 1.0, 8);
  std::stringstream ss;
  write_csv(ss, d.dim, d.train);
  std::string header;
  std::getline(ss, header);
  EXPECT_EQ(header, "x_0,x_1,y");
  ss.seekg(0);
  std::size_t dim = 0;
  EXPECT_EQ(read_csv(ss, &dim), d.train);
  EXPECT_EQ(dim, 2u);
}

TEST(Csv, MalformedRowsAreIoErrors) {
  std::stringstream bad("x_0,x_1,y\n1,2\n");
  EXPECT_THROW(read_csv(bad), IoError);
  std::stringstream junk("x_0,y\nabc,1\n");
  EXPECT_THROW(read_csv(junk), IoError);
  std::stringstream empty("");
  EXPECT_THROW(read_csv(empty), IoError);
}

namespace {

// Three records with known bytes.
std::vector<unsigned char> cifar_bytes() {
  std::vector<unsigned char> b;
  for (int r = 0; r < 3; ++r) {
    b.push_back(static_cast<unsigned char>(r));       // coarse
    b.push_back(static_cast<unsigned char>(10 * r));  // fine
    for (int i = 0; i < 3072; ++i) b.push_back(static_cast<unsigned char>((i * 7 + r) % 256));
  }
  return b;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(Cifar, ReadsFineLabelsAndScalesPixels) {
  const auto path = temp_path("cifar.bin");
  write_bytes(path, cifar_bytes());
  const Examples ex = load_cifar100(path, 1);
  ASSERT_EQ(ex.size(), 3u);
  for (int r = 0; r < 3; ++r) {
    EXPECT_EQ(ex[r].y, 10 * r);
    ASSERT_EQ(ex[r].x.size(), 3072u);
    for (int i : {0, 1, 1023, 1024, 3071}) EXPECT_DOUBLE_EQ(ex[r].x[i], ((i * 7 + r) % 256) / 255.0);
  }
  std::filesystem::remove(path);
}

TEST(Cifar, PoolingAveragesBlocks) {
  const auto path = temp_path("cifar_pool.bin");
  const auto bytes = cifar_bytes();
  write_bytes(path, bytes);
  const Examples ex = load_cifar100(path, 4);
  ASSERT_EQ(ex[1].x.size(), 3u * 8 * 8);
  // channel 2, block (row 3, col 5)
  double want = 0;
  for (int r = 12; r < 16; ++r)
    for (int c = 20; c < 24; ++c) want += bytes[3074 + 2 + 2048 + r * 32 + c];
  want /= 16.0 * 255.0;
  EXPECT_NEAR(ex[1].x[2 * 64 + 3 * 8 + 5], want, 1e-15);
  EXPECT_THROW(load_cifar100(path, 3), ParameterError);
  std::filesystem::remove(path);
}

TEST(Cifar, TruncatedFileReportsOffset) {
  const auto path = temp_path("cifar_trunc.bin");
  auto bytes = cifar_bytes();
  bytes.resize(3074 * 2 + 100);
  write_bytes(path, bytes);
  try {
    load_cifar100(path);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("6148"), std::string::npos) << e.what();
  }
  std::filesystem::remove(path);
  EXPECT_THROW(load_cifar100(temp_path("missing.bin")), IoError);
}

TEST(Cifar, FineLabelOutOfRangeIsRejected) {
  const auto path = temp_path("cifar_label.bin");
  auto bytes = cifar_bytes();
  bytes[3074 + 1] = 150;
  write_bytes(path, bytes);
  EXPECT_THROW(load_cifar100(path), IoError);
  std::filesystem::remove(path);
}

TEST(SplitSessions, ContiguousDisjointSessionsCoverAllClasses) {
  const Dataset d = make_synthetic(10, 10, 3, 1.0, 2);
  const SessionSplit s = split_sessions(d, 4, 3, 7);
  ASSERT_EQ(s.sessions.size(), 4u);
  EXPECT_EQ(s.base_classes(), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(s.sessions[1].classes, (std::vector<int>{4, 5}));
  EXPECT_EQ(s.sessions[3].classes, (std::vector<int>{8, 9}));
  EXPECT_EQ(s.seen_classes(0), 4u);
  EXPECT_EQ(s.seen_classes(2), 8u);
  std::vector<int> orig = s.original_class;
  std::sort(orig.begin(), orig.end());
  std::vector<int> all(10);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(orig, all);

  std::size_t n = 0;
  for (std::size_t t = 0; t < s.sessions.size(); ++t)
    for (const auto& e : s.sessions[t].train) {
      EXPECT_TRUE(std::count(s.sessions[t].classes.begin(), s.sessions[t].classes.end(), e.y));
      ++n;
    }
  EXPECT_EQ(n, d.train.size());
  EXPECT_EQ(s.test_through(1).size(), 6u * 2);
}

TEST(SplitSessions, RelabellingKeepsSourceClasses) {
  const Dataset d = make_synthetic(6, 5, 3, 1.0, 5);
  const SessionSplit s = split_sessions(d, 2, 2, 1);
  std::map<std::vector<double>, int> source;
  for (const auto& e : d.train) source[e.x] = e.y;
  for (const auto& sess : s.sessions)
    for (const auto& e : sess.train) EXPECT_EQ(source.at(e.x), s.original_class[static_cast<std::size_t>(e.y)]);
}

TEST(SplitSessions, RejectsUnevenSessions) {
  const Dataset d = make_synthetic(10, 5, 3, 1.0, 5);
  EXPECT_THROW(split_sessions(d, 3, 2, 0), ConfigError);
  EXPECT_THROW(split_sessions(d, 0, 2, 0), ConfigError);
  EXPECT_THROW(split_sessions(d, 4, 0, 0), ConfigError);
  EXPECT_NO_THROW(split_sessions(d, 10, 0, 0));
}

TEST(PartitionIid, BalancedPerClassAndLossless) {
  const Dataset d = make_synthetic(4, 23, 2, 1.0, 1);
  const SitePartition p = partition_iid(d.train, 3, 9);
  EXPECT_EQ(sorted(concat(p)), sorted(d.train));
  for (int c = 0; c < 4; ++c) {
    std::vector<std::size_t> per;
    for (const auto& sh : p.shards)
      per.push_back(static_cast<std::size_t>(std::count_if(sh.begin(), sh.end(), [&](auto& e) { return e.y == c; })));
    EXPECT_LE(*std::max_element(per.begin(), per.end()) - *std::min_element(per.begin(), per.end()), 1u);
  }
  EXPECT_THROW(partition_iid(d.train, 100, 0), ConfigError);
}

TEST(LargestRemainder, SumsToTotalAndStaysProportional) {
  EXPECT_EQ(largest_remainder({1, 1, 1}, 10), (std::vector<std::size_t>{4, 3, 3}));
  EXPECT_EQ(largest_remainder({0.1, 0.6, 0.3}, 7), (std::vector<std::size_t>{1, 4, 2}));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> w(1 + rng() % 8);
    for (double& v : w) v = u(rng);
    const std::size_t total = rng() % 200;
    const auto out = largest_remainder(w, total);
    EXPECT_EQ(std::accumulate(out.begin(), out.end(), std::size_t{0}), total);
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_LT(std::abs(out[i] - total * w[i] / s), 1.0 + 1e-9);
  }
  EXPECT_THROW(largest_remainder({0.0, 0.0}, 3), InputError);
}

TEST(PartitionDirichlet, LosslessAndSeeded) {
  const Dataset d = make_synthetic(5, 30, 2, 1.0, 1);
  const SitePartition p = partition_dirichlet(d.train, 4, 0.5, 3);
  EXPECT_EQ(sorted(concat(p)), sorted(d.train));
  EXPECT_EQ(p.sizes(), partition_dirichlet(d.train, 4, 0.5, 3).sizes());
  EXPECT_THROW(partition_dirichlet(d.train, 4, 0.0, 3), ParameterError);
  EXPECT_THROW(partition_dirichlet(d.train, 1, 1.0, 3), ConfigError);
}

TEST(PartitionDirichlet, ConcentrationLimits) {
  const Dataset d = make_synthetic(10, 100, 2, 1.0, 1);
  const SitePartition flat = partition_dirichlet(d.train, 5, 1e6, 2);
  for (const auto& sh : flat.shards) EXPECT_NEAR(static_cast<double>(sh.size()) / d.train.size(), 0.2, 0.01);
  const SitePartition spiky = partition_dirichlet(d.train, 5, 1e-3, 2);
  for (int c = 0; c < 10; ++c) {
    std::size_t best = 0;
    for (const auto& sh : spiky.shards)
      best = std::max<std::size_t>(best, std::count_if(sh.begin(), sh.end(), [&](auto& e) { return e.y == c; }));
    EXPECT_GE(best, 76u);  // of 80
  }
}

TEST(PartitionDirichlet, SmallerAlphaMeansLowerShardEntropy) {
  const Dataset d = make_synthetic(10, 50, 2, 1.0, 4);
  double prev = -1.0;
  for (double alpha : {0.01, 0.1, 1.0, 10.0, 100.0}) {
    double h = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed)
      for (const auto& sh : partition_dirichlet(d.train, 5, alpha, seed).shards) h += class_entropy(sh);
    EXPECT_GT(h, prev) << "alpha " << alpha;
    prev = h;
  }
}

TEST(ClassEntropy, UniformAndEmpty) {
  Examples e;
  for (int c = 0; c < 4; ++c) e.push_back({{0.0}, c});
  EXPECT_NEAR(class_entropy(e), std::log(4.0), 1e-15);
  EXPECT_EQ(class_entropy({}), 0.0);
  EXPECT_EQ(class_entropy({{{0.0}, 3}, {{1.0}, 3}}), 0.0);
}
