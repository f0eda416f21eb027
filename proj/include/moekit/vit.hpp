// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "moekit/checkpoint.hpp"
#include "moekit/mjpk.hpp"
#include "moekit/spheromoe.hpp"

namespace moekit {

enum class RouterKind { sphero, soft };

const char* router_kind_name(RouterKind kind);
RouterKind parse_router_kind(const std::string& name);

struct ModelConfig {
  std::int64_t image_size = 32;
  std::int64_t patch_size = 4;
  std::int64_t d = 64;
  std::int64_t n_layers = 8;
  std::int64_t n_heads = 4;
  std::int64_t n_classes = 10;
  std::int64_t mlp_hidden = 0;  // 0 -> 4*d
  std::int64_t moe_from = 0;    // 1-indexed inclusive; 0 -> fully dense
  std::int64_t moe_to = 0;
  RouterKind router = RouterKind::sphero;
  SpheroMoEConfig moe;

  std::int64_t hidden() const { return mlp_hidden > 0 ? mlp_hidden : 4 * d; }
  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t tokens() const { return grid() * grid() + 1; }
  bool is_moe(std::int64_t block) const {  // 0-indexed
    return moe_from != 0 && block + 1 >= moe_from && block + 1 <= moe_to;
  }
  void validate() const;
};

template <typename T>
struct AttentionT {
  std::int64_t n_heads = 1;
  TensorT<T> qkv_w, qkv_b;    // [3d, d], [3d]
  TensorT<T> proj_w, proj_b;  // [d, d], [d]

  struct Cache {
    TensorT<T> x;
    TensorT<T> q, k, v;  // [b, h, n, dh]
    TensorT<T> attnw;    // [b, h, n, n]
    TensorT<T> merged;   // [b, n, d]
  };

  TensorT<T> forward(const TensorT<T>& x, Cache& cache) const;
  TensorT<T> backward(Cache& cache, const TensorT<T>& gout);
};

template <typename T>
struct MlpT {
  TensorT<T> fc1_w, fc1_b;  // [h, d], [h]
  TensorT<T> fc2_w, fc2_b;  // [d, h], [d]

  struct Cache {
    TensorT<T> x;
    TensorT<T> h_pre;
  };

  TensorT<T> forward(const TensorT<T>& x, Cache& cache) const;
  TensorT<T> backward(Cache& cache, const TensorT<T>& gout);
};

enum class BlockKind { dense, sphero, soft };

template <typename T>
struct BlockT {
  BlockKind kind = BlockKind::dense;
  TensorT<T> ln1_g, ln1_b;
  AttentionT<T> attn;
  TensorT<T> ln2_g, ln2_b;  // dense and soft blocks; sphero holds ln_x in the router
  std::optional<MlpT<T>> mlp;
  std::optional<SpheroMoELayerT<T>> sphero;
  std::optional<SoftMoELayerT<T>> soft;

  struct Cache {
    TensorT<T> x;
    TensorT<T> ln1_out;
    typename AttentionT<T>::Cache attn;
    TensorT<T> x1;
    TensorT<T> ln2_out;
    typename MlpT<T>::Cache mlp;
  };
};

// Dense ViT-style model; blocks in [moe_from, moe_to] swap the MLP for a
// routed expert layer. Forward: patchify, embed, +positional, blocks,
// final norm, mean-pool, linear head.
template <typename T>
class ModelT {
 public:
  ModelConfig cfg;
  TensorT<T> patch_w, patch_b;  // [d, 3*p*p], [d]
  TensorT<T> cls_token;         // [1, 1, d]
  TensorT<T> pos_embed;         // [1, tokens, d]
  std::vector<BlockT<T>> blocks;
  TensorT<T> norm_g, norm_b;
  TensorT<T> head_w, head_b;  // [classes, d], [classes]

  struct Hooks {
    // Dense blocks only: (layer, mlp input post-LN, post-gelu activations).
    std::function<void(std::int64_t, const TensorT<T>&, const TensorT<T>&)> mlp_probe;
    // One trace per MoE block, in block order.
    std::vector<RoutingTraceT<T>>* traces = nullptr;
  };

  TensorT<T> forward(const TensorT<T>& images, bool train_mode, Hooks* hooks = nullptr);
  void backward(const TensorT<T>& glogits);
  void zero_grads();
  void visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn);
  void set_train_step(std::int64_t step);
  std::int64_t param_count();

 private:
  struct ForwardCache {
    TensorT<T> patches;
    TensorT<T> x_final;
    TensorT<T> pooled;
    std::vector<typename BlockT<T>::Cache> block_caches;
    bool valid = false;
  };
  ForwardCache cache_;
};
using Model = ModelT<float>;

struct SuccessorOptions {
  RouterKind router = RouterKind::sphero;
  double t_min = 0.1;
  double t_max = 100.0;
  double noise_mult = 0.1;
  std::int64_t noise_decay_steps = 0;
  double expert_dropout_p = 0.1;
  std::uint64_t seed = 0;
};

template <typename T>
ModelT<T> build_predecessor(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
ModelT<T> model_from_checkpoint(const DenseCheckpoint& ckpt);

DenseCheckpoint model_to_checkpoint(ModelT<float>& model);

template <typename T>
ModelT<T> build_successor(const MoEInitBundle& bundle, const SuccessorOptions& opts);

Archive model_to_archive(ModelT<float>& model);
Model model_from_archive(const Archive& archive);

// Analytic multiply-accumulate count of one forward pass at batch size 1.
// Routed layers are charged for the slot computations they actually run.
double flops_estimate(const ModelConfig& cfg);

// Closed-form parameter count for the same configuration.
std::int64_t param_count_formula(const ModelConfig& cfg);

}  // namespace moekit
