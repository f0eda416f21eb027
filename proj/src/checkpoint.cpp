// SPDX-License-Identifier: Apache-2.0
#include "moekit/checkpoint.hpp"

#include <string>

namespace moekit {

std::vector<std::pair<std::string, Shape>> implied_tensors(const CheckpointMeta& meta) {
  const std::int64_t d = meta.embed_dim;
  const std::int64_t hid = meta.mlp_hidden;
  const std::int64_t patch_in = 3 * meta.patch_size * meta.patch_size;

  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("patch_embed.w", Shape{d, patch_in});
  out.emplace_back("patch_embed.b", Shape{d});
  out.emplace_back("cls_token", Shape{1, 1, d});
  out.emplace_back("pos_embed", Shape{1, meta.tokens(), d});
  for (std::int64_t i = 0; i < meta.n_layers; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.gamma", Shape{d});
    out.emplace_back(p + "ln1.beta", Shape{d});
    out.emplace_back(p + "ln2.gamma", Shape{d});
    out.emplace_back(p + "ln2.beta", Shape{d});
    out.emplace_back(p + "attn.qkv_w", Shape{3 * d, d});
    out.emplace_back(p + "attn.qkv_b", Shape{3 * d});
    out.emplace_back(p + "attn.proj_w", Shape{d, d});
    out.emplace_back(p + "attn.proj_b", Shape{d});
    out.emplace_back(p + "mlp.fc1_w", Shape{hid, d});
    out.emplace_back(p + "mlp.fc1_b", Shape{hid});
    out.emplace_back(p + "mlp.fc2_w", Shape{d, hid});
    out.emplace_back(p + "mlp.fc2_b", Shape{d});
  }
  out.emplace_back("norm.gamma", Shape{d});
  out.emplace_back("norm.beta", Shape{d});
  out.emplace_back("head.w", Shape{meta.n_classes, d});
  out.emplace_back("head.b", Shape{meta.n_classes});
  return out;
}

void validate_checkpoint(const DenseCheckpoint& ckpt) {
  const CheckpointMeta& m = ckpt.meta;
  require(m.n_layers >= 1 && m.embed_dim >= 1 && m.mlp_hidden >= 1 && m.n_heads >= 1 &&
              m.patch_size >= 1 && m.n_classes >= 1,
          Err::MetaConflict, "checkpoint meta has non-positive dimensions");
  require(m.image_size % m.patch_size == 0, Err::MetaConflict,
          "image size must be divisible by patch size");
  require(m.embed_dim % m.n_heads == 0, Err::MetaConflict,
          "embed dim must be divisible by head count");
  for (const auto& [name, shape] : implied_tensors(m)) {
    auto it = ckpt.tensors.find(name);
    require(it != ckpt.tensors.end(), Err::MetaConflict, "checkpoint missing tensor " + name);
    require(it->second.shape == shape, Err::MetaConflict,
            "checkpoint tensor " + name + " has unexpected shape");
  }
}

}  // namespace moekit
