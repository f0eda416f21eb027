// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "moekit/checkpoint.hpp"
#include "moekit/profiler.hpp"

namespace moekit {

enum class Strategy { importance, graph, uniform, random, upcycle };

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct RecycleConfig {
  Strategy strategy = Strategy::importance;
  std::int64_t d_prime = 32;
  // 1-indexed inclusive; (0, 0) selects the second half of the predecessor,
  // an inverted range (from > to) disables MoE layers entirely.
  std::int64_t moe_from = 0;
  std::int64_t moe_to = 0;
  std::int64_t e_core = 16;
  std::int64_t e_univ = 32;
  std::int64_t slots = 1;
  std::int64_t h_core = 0;  // 0 -> 4 * d_prime
  std::int64_t h_univ = 0;  // 0 -> d_prime
  double t_init = 8.0;
  std::uint64_t seed = 0;
  std::int64_t coact_min_count = 1;  // graph strategy edge threshold
  double balance_tol = 0.10;
};

// Slices every channel axis by the same index set C: embeddings, layer norm
// parameters, attention qkv/proj rows and columns, MLP fc1 columns and fc2
// rows, and head columns. Non-channel axes are untouched.
std::map<std::string, Tensor> select_channels(const DenseCheckpoint& ckpt,
                                              const std::vector<std::int32_t>& channels);

// Builds the recycled successor initialization for the configured strategy.
// importance and graph need an activation profile; the others ignore it.
MoEInitBundle recycle(const DenseCheckpoint& ckpt, const ActivationProfile* profile,
                      const RecycleConfig& cfg);

// Draws `count` distinct indices, each step proportional to the remaining
// weights; if the remaining mass is zero the draw is uniform.
std::vector<std::int32_t> sample_without_replacement(const std::vector<double>& weights,
                                                     std::int64_t count, Rng& rng);

}  // namespace moekit
