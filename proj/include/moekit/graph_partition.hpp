// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moekit/checkpoint.hpp"
#include "moekit/rng.hpp"

namespace moekit {

// Multilevel k-way partitioning: heavy-edge-matching coarsening, greedy
// initial assignment, boundary Fiduccia-Mattheyses refinement at every
// level. Every vertex lands in exactly one part and no part weight exceeds
// max(ceil(W/k), floor((1 + balance_tol) * W / k)).
std::vector<std::int32_t> partition_graph(const CoactivationGraph& graph, std::int64_t k,
                                          double balance_tol, std::uint64_t seed);

double edge_cut(const CoactivationGraph& graph, const std::vector<std::int32_t>& parts);

}  // namespace moekit
