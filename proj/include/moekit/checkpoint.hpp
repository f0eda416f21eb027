// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

// Architecture metadata for a dense ViT-style predecessor.
struct CheckpointMeta {
  std::int64_t n_layers = 8;
  std::int64_t embed_dim = 64;
  std::int64_t mlp_hidden = 256;
  std::int64_t n_heads = 4;
  std::int64_t patch_size = 4;
  std::int64_t image_size = 32;
  std::int64_t n_classes = 10;

  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t tokens() const { return grid() * grid() + 1; }  // patches + cls
  bool operator==(const CheckpointMeta&) const = default;
};

struct DenseCheckpoint {
  CheckpointMeta meta;
  std::map<std::string, Tensor> tensors;
};

// Every tensor name the meta implies, with its exact shape.
std::vector<std::pair<std::string, Shape>> implied_tensors(const CheckpointMeta& meta);

// Throws MetaConflict when a tensor implied by meta is missing or misshaped.
void validate_checkpoint(const DenseCheckpoint& ckpt);

// Per-layer activation statistics gathered from calibration batches.
struct ActivationProfile {
  std::int64_t n_layers = 0;
  std::int64_t channels = 0;  // embed dim d
  std::int64_t hidden = 0;    // mlp hidden 4d
  std::int64_t n_tokens = 0;

  // Mean absolute activation per channel (at the MLP input, post-LN) and per
  // hidden neuron (post-nonlinearity).
  std::vector<std::vector<double>> channel_mean_abs;
  std::vector<std::vector<double>> neuron_mean_abs;

  struct CoactEdge {
    std::int32_t a = 0;
    std::int32_t b = 0;  // a < b
    std::int64_t count = 0;
  };
  std::vector<std::vector<CoactEdge>> coactivation;  // per layer, sorted by (a, b)
};

struct CoactivationGraph {
  struct Edge {
    std::int32_t a = 0;
    std::int32_t b = 0;  // a < b, no self loops
    double weight = 0.0;
  };
  std::int64_t n_vertices = 0;
  std::vector<Edge> edges;
  std::vector<double> vertex_weights;  // empty means unit weights
};

// Recycled successor initialization with full provenance.
struct BundleMeta {
  std::int64_t n_layers = 8;
  std::int64_t d_prime = 32;
  std::int64_t n_heads = 4;
  std::int64_t patch_size = 4;
  std::int64_t image_size = 32;
  std::int64_t n_classes = 10;
  std::int64_t moe_from = 0;  // 1-indexed inclusive; 0 means no MoE layers
  std::int64_t moe_to = 0;
  std::int64_t e_core = 16;
  std::int64_t e_univ = 32;
  std::int64_t slots = 1;
  std::int64_t h_core = 128;
  std::int64_t h_univ = 32;
  double t_init = 8.0;
  std::string strategy;
  std::uint64_t seed = 0;
  std::int64_t source_d = 0;       // predecessor channel dim
  std::int64_t source_hidden = 0;  // predecessor mlp hidden

  std::int64_t n_moe_layers() const { return moe_from == 0 ? 0 : moe_to - moe_from + 1; }
  bool is_moe_layer(std::int64_t block_index) const {  // 0-indexed block
    return moe_from != 0 && block_index + 1 >= moe_from && block_index + 1 <= moe_to;
  }
  bool operator==(const BundleMeta&) const = default;
};

struct ExpertStackInit {
  Tensor w1;  // [e, h, d']
  Tensor b1;  // [e, h]
  Tensor w2;  // [e, d', h]
  Tensor b2;  // [e, d']
};

struct LayerProvenance {
  std::int32_t layer = 0;  // 0-indexed block in the predecessor
  std::string strategy;
  std::vector<std::vector<std::int32_t>> core_neurons;  // [e_core][h_core]
  std::vector<std::vector<std::int32_t>> univ_neurons;  // [e_univ][h_univ]
};

struct MoEInitBundle {
  BundleMeta meta;
  std::vector<std::int32_t> channels;  // ascending, size d'
  std::map<std::string, Tensor> dense_tensors;
  std::vector<ExpertStackInit> core_stacks;  // one per MoE layer, in layer order
  std::vector<ExpertStackInit> univ_stacks;
  std::vector<LayerProvenance> provenance;
};

}  // namespace moekit
