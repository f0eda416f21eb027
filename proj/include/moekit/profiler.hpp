// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moekit/checkpoint.hpp"
#include "moekit/dataset.hpp"

namespace moekit {

struct ProfileConfig {
  std::int64_t n_batches = 16;
  std::int64_t batch_size = 32;
  double activity_threshold = 0.0;   // neuron fires when post-gelu output exceeds this
  double min_coact_fraction = 0.01;  // drop edges seen on fewer than this fraction of tokens
  std::uint64_t seed = 0;
};

// Streaming accumulator for per-token activation rows; kept separate from the
// model walk so the counting rules are unit-testable in isolation.
class ProfileAccumulator {
 public:
  ProfileAccumulator(std::int64_t n_layers, std::int64_t channels, std::int64_t hidden,
                     double activity_threshold);

  // channel_row has `channels` entries (MLP input post-LN), hidden_row has
  // `hidden` entries (post-nonlinearity), both for one token.
  void add_token(std::int64_t layer, const float* channel_row, const float* hidden_row);
  void count_token();  // call once per token (not per layer)

  ActivationProfile finish(double min_coact_fraction) const;

 private:
  std::int64_t n_layers_, channels_, hidden_;
  double threshold_;
  std::int64_t n_tokens_ = 0;
  std::vector<std::vector<double>> channel_sum_;
  std::vector<std::vector<double>> neuron_sum_;
  std::vector<std::vector<std::uint32_t>> coact_;  // per layer, dense upper triangle
  std::vector<std::int32_t> active_scratch_;
};

// Runs calibration batches through the predecessor and collects channel,
// neuron, and co-activation statistics.
ActivationProfile profile(const DenseCheckpoint& predecessor, const Dataset& data,
                          const ProfileConfig& cfg);

// Mean over layers of the per-channel activation statistic.
std::vector<double> channel_importance(const ActivationProfile& profile);

// Indices of the d' largest entries, ties to the lower index, ascending.
std::vector<std::int32_t> top_channels(const std::vector<double>& importance,
                                       std::int64_t d_prime);

// P(h | H) for one layer; all-zero stats raise DegenerateDistribution.
std::vector<double> neuron_distribution(const ActivationProfile& profile, std::int64_t layer);

CoactivationGraph build_graph(const ActivationProfile& profile, std::int64_t layer,
                              std::int64_t min_count);

}  // namespace moekit
