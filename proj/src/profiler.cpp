// SPDX-License-Identifier: Apache-2.0
#include "moekit/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moekit/vit.hpp"

namespace moekit {

ProfileAccumulator::ProfileAccumulator(std::int64_t n_layers, std::int64_t channels,
                                       std::int64_t hidden, double activity_threshold)
    : n_layers_(n_layers), channels_(channels), hidden_(hidden), threshold_(activity_threshold) {
  channel_sum_.assign(n_layers_, std::vector<double>(channels_, 0.0));
  neuron_sum_.assign(n_layers_, std::vector<double>(hidden_, 0.0));
  coact_.assign(n_layers_,
                std::vector<std::uint32_t>(static_cast<std::size_t>(hidden_ * hidden_), 0));
  active_scratch_.reserve(static_cast<std::size_t>(hidden_));
}

void ProfileAccumulator::add_token(std::int64_t layer, const float* channel_row,
                                   const float* hidden_row) {
  require(layer >= 0 && layer < n_layers_, Err::IndexOutOfRange, "profile layer out of range");
  auto& cs = channel_sum_[layer];
  for (std::int64_t c = 0; c < channels_; ++c) cs[c] += std::abs(double(channel_row[c]));
  auto& ns = neuron_sum_[layer];
  active_scratch_.clear();
  for (std::int64_t h = 0; h < hidden_; ++h) {
    ns[h] += std::abs(double(hidden_row[h]));
    if (double(hidden_row[h]) > threshold_) active_scratch_.push_back(static_cast<std::int32_t>(h));
  }
  auto& mat = coact_[layer];
  for (std::size_t i = 0; i < active_scratch_.size(); ++i) {
    const std::int64_t a = active_scratch_[i];
    std::uint32_t* row = mat.data() + a * hidden_;
    for (std::size_t j = i + 1; j < active_scratch_.size(); ++j) {
      ++row[active_scratch_[j]];
    }
  }
}

void ProfileAccumulator::count_token() { ++n_tokens_; }

ActivationProfile ProfileAccumulator::finish(double min_coact_fraction) const {
  require(n_tokens_ > 0, Err::EmptyCalibrationSet, "no tokens were profiled");
  ActivationProfile p;
  p.n_layers = n_layers_;
  p.channels = channels_;
  p.hidden = hidden_;
  p.n_tokens = n_tokens_;
  const double inv = 1.0 / double(n_tokens_);
  const std::int64_t min_count =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(min_coact_fraction * n_tokens_)));
  for (std::int64_t l = 0; l < n_layers_; ++l) {
    std::vector<double> cm(channel_sum_[l]);
    for (auto& v : cm) v *= inv;
    std::vector<double> nm(neuron_sum_[l]);
    for (auto& v : nm) v *= inv;
    p.channel_mean_abs.push_back(std::move(cm));
    p.neuron_mean_abs.push_back(std::move(nm));

    std::vector<ActivationProfile::CoactEdge> edges;
    const auto& mat = coact_[l];
    for (std::int64_t a = 0; a < hidden_; ++a) {
      for (std::int64_t b = a + 1; b < hidden_; ++b) {
        const std::uint32_t cnt = mat[static_cast<std::size_t>(a * hidden_ + b)];
        if (cnt >= min_count) {
          edges.push_back({static_cast<std::int32_t>(a), static_cast<std::int32_t>(b),
                           static_cast<std::int64_t>(cnt)});
        }
      }
    }
    p.coactivation.push_back(std::move(edges));
  }
  return p;
}

ActivationProfile profile(const DenseCheckpoint& predecessor, const Dataset& data,
                          const ProfileConfig& cfg) {
  validate_checkpoint(predecessor);
  require(data.size() > 0 && cfg.n_batches > 0 && cfg.batch_size > 0, Err::EmptyCalibrationSet,
          "calibration set is empty");
  require(data.image_size == predecessor.meta.image_size, Err::ShapeMismatch,
          "calibration images do not match the predecessor input size");

  Model model = model_from_checkpoint<float>(predecessor);
  ProfileAccumulator acc(predecessor.meta.n_layers, predecessor.meta.embed_dim,
                         predecessor.meta.mlp_hidden, cfg.activity_threshold);

  Model::Hooks hooks;
  hooks.mlp_probe = [&](std::int64_t layer, const Tensor& mlp_in, const Tensor& act) {
    const std::int64_t rows = mlp_in.shape[0] * mlp_in.shape[1];
    for (std::int64_t r = 0; r < rows; ++r) {
      acc.add_token(layer, mlp_in.ptr() + r * mlp_in.shape[2], act.ptr() + r * act.shape[2]);
      if (layer == 0) acc.count_token();
    }
  };

  std::int64_t cursor = 0;
  for (std::int64_t b = 0; b < cfg.n_batches; ++b) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(cfg.batch_size));
    for (auto& i : idx) {
      i = cursor % data.size();
      ++cursor;
    }
    Tensor images = batch_images(data, idx);
    model.forward(images, false, &hooks);
  }
  return acc.finish(cfg.min_coact_fraction);
}

std::vector<double> channel_importance(const ActivationProfile& p) {
  require(p.n_layers > 0, Err::EmptyCalibrationSet, "profile has no layers");
  std::vector<double> a(static_cast<std::size_t>(p.channels), 0.0);
  for (const auto& layer : p.channel_mean_abs) {
    for (std::size_t c = 0; c < a.size(); ++c) a[c] += layer[c];
  }
  for (auto& v : a) v /= double(p.n_layers);
  return a;
}

std::vector<std::int32_t> top_channels(const std::vector<double>& importance,
                                       std::int64_t d_prime) {
  const std::int64_t d = static_cast<std::int64_t>(importance.size());
  require(d_prime > 0 && d_prime <= d, Err::InvalidTargetDim,
          "target channel count must be in [1, d]");
  std::vector<std::int32_t> idx(static_cast<std::size_t>(d));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int32_t a, std::int32_t b) {
    if (importance[a] != importance[b]) return importance[a] > importance[b];
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(d_prime));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<double> neuron_distribution(const ActivationProfile& p, std::int64_t layer) {
  require(layer >= 0 && layer < p.n_layers, Err::IndexOutOfRange, "layer out of range");
  const auto& stats = p.neuron_mean_abs[layer];
  double total = 0.0;
  for (double v : stats) total += v;
  require(total > 0.0, Err::DegenerateDistribution, "all neuron stats are zero in this layer");
  std::vector<double> prob(stats);
  for (auto& v : prob) v /= total;
  return prob;
}

CoactivationGraph build_graph(const ActivationProfile& p, std::int64_t layer,
                              std::int64_t min_count) {
  require(layer >= 0 && layer < p.n_layers, Err::IndexOutOfRange, "layer out of range");
  CoactivationGraph g;
  g.n_vertices = p.hidden;
  for (const auto& e : p.coactivation[layer]) {
    if (e.count >= min_count) {
      g.edges.push_back({e.a, e.b, static_cast<double>(e.count)});
    }
  }
  return g;
}

}  // namespace moekit
