// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "moekit/graph_partition.hpp"
#include "test_util.hpp"

using namespace moekit;

namespace {

CoactivationGraph make_graph(std::int64_t n,
                             std::vector<std::tuple<int, int, double>> edges) {
  CoactivationGraph g;
  g.n_vertices = n;
  for (auto [a, b, w] : edges) {
    g.edges.push_back({static_cast<std::int32_t>(a), static_cast<std::int32_t>(b), w});
  }
  return g;
}

CoactivationGraph clique_pair() {
  CoactivationGraph g;
  g.n_vertices = 8;
  for (int base : {0, 4}) {
    for (int i = 0; i < 4; ++i) {
      for (int j = i + 1; j < 4; ++j) {
        g.edges.push_back({static_cast<std::int32_t>(base + i),
                           static_cast<std::int32_t>(base + j), 1.0});
      }
    }
  }
  return g;
}

CoactivationGraph ring(int n) {
  CoactivationGraph g;
  g.n_vertices = n;
  for (int i = 0; i < n; ++i) {
    const int j = (i + 1) % n;
    g.edges.push_back({static_cast<std::int32_t>(std::min(i, j)),
                       static_cast<std::int32_t>(std::max(i, j)), 1.0});
  }
  return g;
}

// Exhaustive minimum over balanced 2-partitions (small n only).
double brute_force_min_cut_2way(const CoactivationGraph& g) {
  const int n = static_cast<int>(g.n_vertices);
  const int half = n / 2;
  double best = 1e300;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (__builtin_popcount(mask) != half) continue;
    std::vector<std::int32_t> parts(n);
    for (int v = 0; v < n; ++v) parts[v] = (mask >> v) & 1;
    best = std::min(best, edge_cut(g, parts));
  }
  return best;
}

CoactivationGraph random_graph(std::int64_t n, double edge_prob, Rng& rng) {
  CoactivationGraph g;
  g.n_vertices = n;
  for (std::int32_t a = 0; a < n; ++a) {
    for (std::int32_t b = a + 1; b < n; ++b) {
      if (rng.uniform() < edge_prob) {
        g.edges.push_back({a, b, 1.0 + static_cast<double>(rng.below(16))});
      }
    }
  }
  return g;
}

std::vector<std::int32_t> random_balanced_assignment(std::int64_t n, std::int64_t k, Rng& rng) {
  std::vector<std::int32_t> parts(static_cast<std::size_t>(n));
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[i], order[j]);
  }
  for (std::int64_t i = 0; i < n; ++i) {
    parts[order[i]] = static_cast<std::int32_t>(i % k);
  }
  return parts;
}

void expect_valid_partition(const CoactivationGraph& g, const std::vector<std::int32_t>& parts,
                            std::int64_t k, double tol) {
  ASSERT_EQ(parts.size(), static_cast<std::size_t>(g.n_vertices));
  std::vector<std::int64_t> sizes(static_cast<std::size_t>(k), 0);
  for (std::int32_t p : parts) {
    ASSERT_GE(p, 0);
    ASSERT_LT(p, k);
    sizes[p]++;
  }
  const double cap = std::max(std::ceil(double(g.n_vertices) / double(k)),
                              std::floor((1.0 + tol) * double(g.n_vertices) / double(k)));
  for (std::int64_t s : sizes) EXPECT_LE(double(s), cap);
}

}  // namespace

TEST(Partition, SingletonPartsWhenKEqualsN) {
  CoactivationGraph g = ring(6);
  const auto parts = partition_graph(g, 6, 0.1, 1);
  for (int v = 0; v < 6; ++v) EXPECT_EQ(parts[v], v);
}

TEST(Partition, DisjointCliquesSplitExactly) {
  CoactivationGraph g = clique_pair();
  const auto parts = partition_graph(g, 2, 0.10, 3);
  expect_valid_partition(g, parts, 2, 0.10);
  EXPECT_DOUBLE_EQ(edge_cut(g, parts), 0.0);
  EXPECT_DOUBLE_EQ(brute_force_min_cut_2way(g), 0.0);
  // The two cliques must land in different parts, each kept whole.
  for (int i = 1; i < 4; ++i) {
    EXPECT_EQ(parts[i], parts[0]);
    EXPECT_EQ(parts[4 + i], parts[4]);
  }
  EXPECT_NE(parts[0], parts[4]);
}

TEST(Partition, EdgelessGraphStillBalances) {
  CoactivationGraph g;
  g.n_vertices = 8;
  const auto parts = partition_graph(g, 4, 0.10, 5);
  expect_valid_partition(g, parts, 4, 0.10);
  std::vector<int> sizes(4, 0);
  for (auto p : parts) sizes[p]++;
  for (int s : sizes) EXPECT_EQ(s, 2);
}

TEST(Partition, RingOfEightSplitsWithCutTwo) {
  CoactivationGraph g = ring(8);
  const auto parts = partition_graph(g, 2, 0.10, 7);
  expect_valid_partition(g, parts, 2, 0.10);
  std::vector<int> sizes(2, 0);
  for (auto p : parts) sizes[p]++;
  EXPECT_EQ(sizes[0], 4);
  EXPECT_EQ(sizes[1], 4);
  EXPECT_DOUBLE_EQ(edge_cut(g, parts), 2.0);
  EXPECT_DOUBLE_EQ(brute_force_min_cut_2way(g), 2.0);
}

TEST(Partition, DeterministicGivenSeed) {
  Rng rng(11);
  CoactivationGraph g = random_graph(40, 0.2, rng);
  const auto a = partition_graph(g, 4, 0.10, 99);
  const auto b = partition_graph(g, 4, 0.10, 99);
  EXPECT_EQ(a, b);
}

TEST(Partition, BeatsRandomAssignmentsOnRandomGraphs) {
  Rng rng(1234);
  int wins = 0;
  const int cases = 30;
  for (int t = 0; t < cases; ++t) {
    const std::int64_t n = 20 + static_cast<std::int64_t>(rng.below(41));
    const std::int64_t k = (t % 2 == 0) ? 2 : 4;
    CoactivationGraph g = random_graph(n, 0.15 + 0.2 * rng.uniform(), rng);
    const auto parts = partition_graph(g, k, 0.10, 1000 + t);
    expect_valid_partition(g, parts, k, 0.10);
    const double ours = edge_cut(g, parts);
    double random_mean = 0;
    for (int r = 0; r < 20; ++r) {
      random_mean += edge_cut(g, random_balanced_assignment(n, k, rng));
    }
    random_mean /= 20;
    if (ours <= random_mean) ++wins;
  }
  EXPECT_GE(wins, cases - 1);
}

TEST(Partition, WeightedVerticesRespectTheCap) {
  CoactivationGraph g = ring(9);
  g.vertex_weights = {3, 1, 1, 1, 3, 1, 1, 1, 3};
  const auto parts = partition_graph(g, 3, 0.10, 3);
  std::vector<double> load(3, 0.0);
  for (int v = 0; v < 9; ++v) load[parts[v]] += g.vertex_weights[v];
  const double cap = std::max(std::ceil(15.0 / 3.0), std::floor(1.1 * 15.0 / 3.0));
  for (double l : load) EXPECT_LE(l, cap);
}

TEST(Partition, InfeasibleConfigurationsAreRejected) {
  CoactivationGraph g = ring(4);
  EXPECT_ERR(Err::InfeasibleBalance, partition_graph(g, 5, 0.10, 1));
  EXPECT_ERR(Err::InfeasibleBalance, partition_graph(g, 1, 0.10, 1));
  CoactivationGraph heavy = ring(4);
  heavy.vertex_weights = {100, 1, 1, 1};
  EXPECT_ERR(Err::InfeasibleBalance, partition_graph(heavy, 2, 0.10, 1));
}

TEST(Partition, RejectsMalformedGraphs) {
  CoactivationGraph self;
  self.n_vertices = 3;
  self.edges.push_back({1, 1, 1.0});
  EXPECT_ERR(Err::InvalidSpec, partition_graph(self, 2, 0.1, 1));

  CoactivationGraph neg;
  neg.n_vertices = 3;
  neg.edges.push_back({0, 1, -2.0});
  EXPECT_ERR(Err::InvalidSpec, partition_graph(neg, 2, 0.1, 1));
}
