// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

struct Dataset {
  std::int64_t image_size = 32;
  std::int64_t n_classes = 10;
  std::string split = "train";
  std::vector<std::uint8_t> images;  // [n, 3, H, W], row-major u8 RGB
  std::vector<std::int32_t> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  void validate() const;
};

struct SynthConfig {
  std::uint64_t seed = 7;
  std::int64_t n_classes = 10;
  std::int64_t n = 2048;
  std::int64_t image_size = 32;
  double noise = 0.35;
  std::string split = "train";
};

// Seeded class-pattern generator: each class is a fixed arrangement of soft
// color blobs; items add pixel noise, brightness jitter and a small shift.
Dataset make_synthetic(const SynthConfig& cfg);

// idx-style binary files (big-endian dims), images as u8 [n,3,H,W] and
// labels as i32 [n].
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::int64_t n_classes, const std::string& split);
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Normalized f32 batch in [-1, 1], shape [b, 3, H, W].
Tensor batch_images(const Dataset& ds, const std::vector<std::int64_t>& indices);
std::vector<std::int32_t> batch_labels(const Dataset& ds, const std::vector<std::int64_t>& indices);

// Deterministic per-epoch shuffle.
std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch);

}  // namespace moekit
