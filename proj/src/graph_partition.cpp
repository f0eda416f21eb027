// SPDX-License-Identifier: Apache-2.0
#include "moekit/graph_partition.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace moekit {

namespace {

struct WorkGraph {
  std::int64_t n = 0;
  std::vector<double> vw;
  std::vector<std::vector<std::pair<std::int32_t, double>>> adj;

  double adjacency(std::int32_t v, std::int32_t u) const {
    for (const auto& [w, wt] : adj[v]) {
      if (w == u) return wt;
    }
    return 0.0;
  }
};

std::vector<std::int32_t> shuffled_order(std::int64_t n, Rng& rng) {
  std::vector<std::int32_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[i], order[j]);
  }
  return order;
}

// Heavy-edge matching; matched pairs must stay well under the balance cap so
// coarse vertices never become unplaceable.
WorkGraph coarsen(const WorkGraph& g, double max_pair_weight, Rng& rng,
                  std::vector<std::int32_t>& fine_to_coarse) {
  const std::int64_t n = g.n;
  std::vector<std::int32_t> match(static_cast<std::size_t>(n), -1);
  const std::vector<std::int32_t> order = shuffled_order(n, rng);
  for (std::int32_t v : order) {
    if (match[v] >= 0) continue;
    std::int32_t best = -1;
    double best_w = 0.0;
    for (const auto& [u, w] : g.adj[v]) {
      if (match[u] >= 0 || u == v) continue;
      if (g.vw[v] + g.vw[u] > max_pair_weight) continue;
      if (w > best_w || (w == best_w && (best == -1 || u < best))) {
        best = u;
        best_w = w;
      }
    }
    if (best >= 0) {
      match[v] = best;
      match[best] = v;
    } else {
      match[v] = v;
    }
  }

  fine_to_coarse.assign(static_cast<std::size_t>(n), -1);
  std::int32_t next = 0;
  for (std::int32_t v = 0; v < n; ++v) {
    if (fine_to_coarse[v] >= 0) continue;
    fine_to_coarse[v] = next;
    if (match[v] != v) fine_to_coarse[match[v]] = next;
    ++next;
  }

  WorkGraph coarse;
  coarse.n = next;
  coarse.vw.assign(static_cast<std::size_t>(next), 0.0);
  for (std::int32_t v = 0; v < n; ++v) coarse.vw[fine_to_coarse[v]] += g.vw[v];

  std::vector<std::map<std::int32_t, double>> acc(static_cast<std::size_t>(next));
  for (std::int32_t v = 0; v < n; ++v) {
    const std::int32_t cv = fine_to_coarse[v];
    for (const auto& [u, w] : g.adj[v]) {
      const std::int32_t cu = fine_to_coarse[u];
      if (cu == cv) continue;
      acc[cv][cu] += w;
    }
  }
  coarse.adj.resize(static_cast<std::size_t>(next));
  for (std::int32_t v = 0; v < next; ++v) {
    coarse.adj[v].assign(acc[v].begin(), acc[v].end());
  }
  return coarse;
}

// Greedy initial assignment: heaviest vertices first, each to the feasible
// part with the strongest attachment, ties to the lightest part.
std::vector<std::int32_t> initial_partition(const WorkGraph& g, std::int64_t k, double cap) {
  std::vector<std::int32_t> part(static_cast<std::size_t>(g.n), -1);
  std::vector<double> load(static_cast<std::size_t>(k), 0.0);
  std::vector<std::int32_t> order(static_cast<std::size_t>(g.n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    if (g.vw[a] != g.vw[b]) return g.vw[a] > g.vw[b];
    return a < b;
  });

  std::vector<double> affinity(static_cast<std::size_t>(k));
  for (std::int32_t v : order) {
    std::fill(affinity.begin(), affinity.end(), 0.0);
    for (const auto& [u, w] : g.adj[v]) {
      if (part[u] >= 0) affinity[part[u]] += w;
    }
    std::int32_t best = -1;
    for (std::int32_t p = 0; p < k; ++p) {
      if (load[p] + g.vw[v] > cap) continue;
      if (best == -1 || affinity[p] > affinity[best] ||
          (affinity[p] == affinity[best] && load[p] < load[best])) {
        best = p;
      }
    }
    if (best == -1) {  // every part is at capacity; take the lightest
      best = static_cast<std::int32_t>(
          std::min_element(load.begin(), load.end()) - load.begin());
    }
    part[v] = best;
    load[best] += g.vw[v];
  }
  return part;
}

// One FM pass: tentative best-gain moves with locking, then rollback to the
// best prefix. Returns the total cut improvement of the kept prefix.
double fm_pass(const WorkGraph& g, std::int64_t k, double cap, std::vector<std::int32_t>& part) {
  const std::int64_t n = g.n;
  std::vector<double> load(static_cast<std::size_t>(k), 0.0);
  for (std::int32_t v = 0; v < n; ++v) load[part[v]] += g.vw[v];

  // conn[v][p] = total edge weight from v into part p
  std::vector<std::vector<double>> conn(static_cast<std::size_t>(n),
                                        std::vector<double>(static_cast<std::size_t>(k), 0.0));
  for (std::int32_t v = 0; v < n; ++v) {
    for (const auto& [u, w] : g.adj[v]) conn[v][part[u]] += w;
  }

  std::vector<std::uint8_t> locked(static_cast<std::size_t>(n), 0);
  struct Move {
    std::int32_t v;
    std::int32_t from, to;
  };
  std::vector<Move> moves;
  double cum_gain = 0.0, best_gain = 0.0;
  std::size_t best_prefix = 0;

  for (std::int64_t step = 0; step < n; ++step) {
    std::int32_t best_v = -1, best_to = -1;
    double best_move_gain = -1e300;
    for (std::int32_t v = 0; v < n; ++v) {
      if (locked[v]) continue;
      const std::int32_t from = part[v];
      for (std::int32_t p = 0; p < k; ++p) {
        if (p == from) continue;
        if (load[p] + g.vw[v] > cap) continue;
        const double gain = conn[v][p] - conn[v][from];
        if (gain > best_move_gain ||
            (gain == best_move_gain && (best_v == -1 || v < best_v))) {
          best_move_gain = gain;
          best_v = v;
          best_to = p;
        }
      }
    }
    if (best_v < 0) break;

    const std::int32_t from = part[best_v];
    part[best_v] = best_to;
    load[from] -= g.vw[best_v];
    load[best_to] += g.vw[best_v];
    locked[best_v] = 1;
    for (const auto& [u, w] : g.adj[best_v]) {
      conn[u][from] -= w;
      conn[u][best_to] += w;
    }
    cum_gain += best_move_gain;
    moves.push_back({best_v, from, best_to});
    if (cum_gain > best_gain + 1e-12) {
      best_gain = cum_gain;
      best_prefix = moves.size();
    }
    // Negative-gain exploration is allowed, but stop once it stops paying off.
    if (moves.size() - best_prefix > 24) break;
  }

  for (std::size_t i = moves.size(); i-- > best_prefix;) {
    part[moves[i].v] = moves[i].from;
  }
  return best_gain;
}

void refine(const WorkGraph& g, std::int64_t k, double cap, std::vector<std::int32_t>& part) {
  for (int pass = 0; pass < 10; ++pass) {
    if (fm_pass(g, k, cap, part) <= 1e-12) break;
  }
}

// Moves vertices out of any over-capacity part, cheapest first. On coarse
// levels oversized contracted vertices may be stuck; those resolve after
// projection, so only the finest level treats a deadlock as an error.
void repair_balance(const WorkGraph& g, std::int64_t k, double cap,
                    std::vector<std::int32_t>& part, bool strict) {
  std::vector<double> load(static_cast<std::size_t>(k), 0.0);
  for (std::int32_t v = 0; v < g.n; ++v) load[part[v]] += g.vw[v];
  for (std::int64_t guard = 0; guard < 4 * g.n + 8; ++guard) {
    std::int32_t worst = static_cast<std::int32_t>(
        std::max_element(load.begin(), load.end()) - load.begin());
    if (load[worst] <= cap) return;
    std::int32_t best_v = -1, best_to = -1;
    double best_cost = 1e300;
    for (std::int32_t v = 0; v < g.n; ++v) {
      if (part[v] != worst) continue;
      for (std::int32_t p = 0; p < k; ++p) {
        if (p == worst || load[p] + g.vw[v] > cap) continue;
        double cost = 0.0;
        for (const auto& [u, w] : g.adj[v]) {
          if (part[u] == worst) cost += w;
          if (part[u] == p) cost -= w;
        }
        if (cost < best_cost || (cost == best_cost && (best_v == -1 || v < best_v))) {
          best_cost = cost;
          best_v = v;
          best_to = p;
        }
      }
    }
    if (best_v < 0) {
      require(!strict, Err::InfeasibleBalance, "cannot rebalance partition under the cap");
      return;
    }
    load[worst] -= g.vw[best_v];
    load[best_to] += g.vw[best_v];
    part[best_v] = best_to;
  }
}

}  // namespace

double edge_cut(const CoactivationGraph& graph, const std::vector<std::int32_t>& parts) {
  double cut = 0.0;
  for (const auto& e : graph.edges) {
    if (parts[e.a] != parts[e.b]) cut += e.weight;
  }
  return cut;
}

std::vector<std::int32_t> partition_graph(const CoactivationGraph& graph, std::int64_t k,
                                          double balance_tol, std::uint64_t seed) {
  const std::int64_t n = graph.n_vertices;
  require(n >= 1, Err::InvalidSpec, "graph has no vertices");
  require(k >= 2 && k <= n, Err::InfeasibleBalance, "need 2 <= k <= n_vertices")
      ;
  require(balance_tol >= 0.0, Err::InvalidSpec, "balance tolerance must be nonnegative");
  require(graph.vertex_weights.empty() ||
              graph.vertex_weights.size() == static_cast<std::size_t>(n),
          Err::ShapeMismatch, "vertex weight list does not match vertex count");

  WorkGraph g;
  g.n = n;
  g.vw.assign(static_cast<std::size_t>(n), 1.0);
  if (!graph.vertex_weights.empty()) {
    for (std::int64_t v = 0; v < n; ++v) {
      require(graph.vertex_weights[v] > 0, Err::InvalidSpec, "vertex weights must be positive");
      g.vw[v] = graph.vertex_weights[v];
    }
  }
  {
    std::vector<std::map<std::int32_t, double>> acc(static_cast<std::size_t>(n));
    for (const auto& e : graph.edges) {
      require(e.a >= 0 && e.a < n && e.b >= 0 && e.b < n, Err::IndexOutOfRange,
              "edge endpoint out of range");
      require(e.a != e.b, Err::InvalidSpec, "self loops are not allowed");
      require(e.weight > 0.0, Err::InvalidSpec, "edge weights must be positive");
      acc[e.a][e.b] += e.weight;
      acc[e.b][e.a] += e.weight;
    }
    g.adj.resize(static_cast<std::size_t>(n));
    for (std::int64_t v = 0; v < n; ++v) g.adj[v].assign(acc[v].begin(), acc[v].end());
  }

  const double total = std::accumulate(g.vw.begin(), g.vw.end(), 0.0);
  const double cap = std::max(std::ceil(total / double(k)),
                              std::floor((1.0 + balance_tol) * total / double(k)));
  for (double w : g.vw) {
    require(w <= cap, Err::InfeasibleBalance, "a single vertex exceeds the balance cap");
  }

  if (k == n) {  // singleton parts
    std::vector<std::int32_t> part(static_cast<std::size_t>(n));
    std::iota(part.begin(), part.end(), 0);
    return part;
  }

  Rng rng = Rng(seed).child({0x9A27u});

  // Coarsening phase.
  std::vector<WorkGraph> levels{g};
  std::vector<std::vector<std::int32_t>> maps;
  const std::int64_t coarse_target = std::max<std::int64_t>(2 * k, 24);
  const double max_pair_weight = std::max(total / (2.0 * double(k)), 2.0);
  while (levels.back().n > coarse_target) {
    std::vector<std::int32_t> fine_to_coarse;
    WorkGraph coarse = coarsen(levels.back(), std::min(cap, max_pair_weight), rng, fine_to_coarse);
    if (coarse.n >= levels.back().n) break;  // matching stalled
    maps.push_back(std::move(fine_to_coarse));
    levels.push_back(std::move(coarse));
  }

  // Initial partition on the coarsest level, then uncoarsen and refine.
  std::vector<std::int32_t> part = initial_partition(levels.back(), k, cap);
  repair_balance(levels.back(), k, cap, part, levels.size() == 1);
  refine(levels.back(), k, cap, part);
  for (std::size_t level = levels.size() - 1; level-- > 0;) {
    const std::vector<std::int32_t>& map = maps[level];
    std::vector<std::int32_t> finer(static_cast<std::size_t>(levels[level].n));
    for (std::int64_t v = 0; v < levels[level].n; ++v) finer[v] = part[map[v]];
    part = std::move(finer);
    repair_balance(levels[level], k, cap, part, level == 0);
    refine(levels[level], k, cap, part);
  }

  // Post-conditions: coverage and balance.
  std::vector<double> load(static_cast<std::size_t>(k), 0.0);
  for (std::int64_t v = 0; v < n; ++v) {
    require(part[v] >= 0 && part[v] < k, Err::PartitionFailure, "vertex left unassigned");
    load[part[v]] += g.vw[v];
  }
  for (double l : load) {
    require(l <= cap + 1e-9, Err::InfeasibleBalance, "refined partition exceeds the cap");
  }
  return part;
}

}  // namespace moekit
