// SPDX-License-Identifier: Apache-2.0
#include "moekit/vit.hpp"

#include <cmath>
#include <cstring>

namespace moekit {

namespace {

const ContractSpec kLinearSpec{"bni", "oi", "bno"};   // x[b,n,i] * w[o,i]
const ContractSpec kScoreSpec{"bhit", "bhjt", "bhij"};
const ContractSpec kApplySpec{"bhij", "bhjt", "bhit"};
const ContractSpec kHeadSpec{"bi", "oi", "bo"};

template <typename T>
TensorT<T> patchify(const TensorT<T>& images, const ModelConfig& cfg) {
  require(images.rank() == 4 && images.shape[1] == 3 && images.shape[2] == cfg.image_size &&
              images.shape[3] == cfg.image_size,
          Err::ShapeMismatch, "images must be [b, 3, H, W] matching the model config");
  const std::int64_t b = images.shape[0];
  const std::int64_t g = cfg.grid(), p = cfg.patch_size;
  const std::int64_t np = g * g, pixels = 3 * p * p;
  TensorT<T> patches({b, np, pixels});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t gy = 0; gy < g; ++gy) {
      for (std::int64_t gx = 0; gx < g; ++gx) {
        T* dst = patches.ptr() + ((bi * np) + gy * g + gx) * pixels;
        for (std::int64_t ch = 0; ch < 3; ++ch) {
          for (std::int64_t py = 0; py < p; ++py) {
            const T* src = images.ptr() +
                           ((bi * 3 + ch) * cfg.image_size + gy * p + py) * cfg.image_size +
                           gx * p;
            std::memcpy(dst + (ch * p + py) * p, src, static_cast<std::size_t>(p) * sizeof(T));
          }
        }
      }
    }
  }
  return patches;
}

}  // namespace

const char* router_kind_name(RouterKind kind) {
  return kind == RouterKind::sphero ? "sphero" : "soft";
}

RouterKind parse_router_kind(const std::string& name) {
  if (name == "sphero") return RouterKind::sphero;
  if (name == "soft") return RouterKind::soft;
  fail(Err::InvalidSpec, "unknown router kind " + name);
}

void ModelConfig::validate() const {
  require(image_size >= 1 && patch_size >= 1 && image_size % patch_size == 0, Err::MetaConflict,
          "image size must be a positive multiple of patch size");
  require(d >= 1 && n_layers >= 1 && n_classes >= 1, Err::MetaConflict,
          "model dimensions must be positive");
  require(n_heads >= 1 && d % n_heads == 0, Err::MetaConflict,
          "embed dim must be divisible by head count");
  if (moe_from != 0) {
    require(moe_from >= 1 && moe_to >= moe_from && moe_to <= n_layers, Err::MetaConflict,
            "moe layer range out of bounds");
    require(moe.d_model == d, Err::MetaConflict, "router dim must match model dim");
    if (router == RouterKind::soft) {
      require(moe.e_univ == 0, Err::MetaConflict, "soft routing is single-path");
    }
  }
}

template <typename T>
TensorT<T> AttentionT<T>::forward(const TensorT<T>& x, Cache& c) const {
  const std::int64_t b = x.shape[0], n = x.shape[1], d = x.shape[2];
  const std::int64_t h = n_heads, dh = d / h;
  c.x = x;
  TensorT<T> qkv = add_bias(batched_contract(x, qkv_w, kLinearSpec), qkv_b);

  c.q = TensorT<T>({b, h, n, dh});
  c.k = TensorT<T>({b, h, n, dh});
  c.v = TensorT<T>({b, h, n, dh});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t t = 0; t < n; ++t) {
      const T* row = qkv.ptr() + (bi * n + t) * 3 * d;
      for (std::int64_t hi = 0; hi < h; ++hi) {
        std::memcpy(c.q.ptr() + ((bi * h + hi) * n + t) * dh, row + hi * dh,
                    static_cast<std::size_t>(dh) * sizeof(T));
        std::memcpy(c.k.ptr() + ((bi * h + hi) * n + t) * dh, row + d + hi * dh,
                    static_cast<std::size_t>(dh) * sizeof(T));
        std::memcpy(c.v.ptr() + ((bi * h + hi) * n + t) * dh, row + 2 * d + hi * dh,
                    static_cast<std::size_t>(dh) * sizeof(T));
      }
    }
  }

  TensorT<T> scores = scale(batched_contract(c.q, c.k, kScoreSpec), 1.0 / std::sqrt(double(dh)));
  c.attnw = softmax_axis(scores, {3}, 1.0);
  TensorT<T> ctx = batched_contract(c.attnw, c.v, kApplySpec);

  c.merged = TensorT<T>({b, n, d});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t hi = 0; hi < h; ++hi) {
      for (std::int64_t t = 0; t < n; ++t) {
        std::memcpy(c.merged.ptr() + (bi * n + t) * d + hi * dh,
                    ctx.ptr() + ((bi * h + hi) * n + t) * dh,
                    static_cast<std::size_t>(dh) * sizeof(T));
      }
    }
  }
  return add_bias(batched_contract(c.merged, proj_w, kLinearSpec), proj_b);
}

template <typename T>
TensorT<T> AttentionT<T>::backward(Cache& c, const TensorT<T>& gout) {
  const std::int64_t b = c.x.shape[0], n = c.x.shape[1], d = c.x.shape[2];
  const std::int64_t h = n_heads, dh = d / h;

  accumulate_grad(proj_b, bias_grad(gout));
  TensorT<T> gmerged, gproj_w;
  batched_contract_backward(c.merged, proj_w, kLinearSpec, gout, gmerged, gproj_w);
  accumulate_grad(proj_w, gproj_w);

  TensorT<T> gctx({b, h, n, dh});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t hi = 0; hi < h; ++hi) {
      for (std::int64_t t = 0; t < n; ++t) {
        std::memcpy(gctx.ptr() + ((bi * h + hi) * n + t) * dh,
                    gmerged.ptr() + (bi * n + t) * d + hi * dh,
                    static_cast<std::size_t>(dh) * sizeof(T));
      }
    }
  }

  TensorT<T> gattnw, gv;
  batched_contract_backward(c.attnw, c.v, kApplySpec, gctx, gattnw, gv);
  TensorT<T> gscores = softmax_axis_backward(c.attnw, gattnw, {3}, 1.0);
  gscores = scale(gscores, 1.0 / std::sqrt(double(dh)));
  TensorT<T> gq, gk;
  batched_contract_backward(c.q, c.k, kScoreSpec, gscores, gq, gk);

  TensorT<T> gqkv({b, n, 3 * d});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t t = 0; t < n; ++t) {
      T* row = gqkv.ptr() + (bi * n + t) * 3 * d;
      for (std::int64_t hi = 0; hi < h; ++hi) {
        std::memcpy(row + hi * dh, gq.ptr() + ((bi * h + hi) * n + t) * dh,
                    static_cast<std::size_t>(dh) * sizeof(T));
        std::memcpy(row + d + hi * dh, gk.ptr() + ((bi * h + hi) * n + t) * dh,
                    static_cast<std::size_t>(dh) * sizeof(T));
        std::memcpy(row + 2 * d + hi * dh, gv.ptr() + ((bi * h + hi) * n + t) * dh,
                    static_cast<std::size_t>(dh) * sizeof(T));
      }
    }
  }

  accumulate_grad(qkv_b, bias_grad(gqkv));
  TensorT<T> gx, gqkv_w;
  batched_contract_backward(c.x, qkv_w, kLinearSpec, gqkv, gx, gqkv_w);
  accumulate_grad(qkv_w, gqkv_w);
  return gx;
}

template <typename T>
TensorT<T> MlpT<T>::forward(const TensorT<T>& x, Cache& c) const {
  c.x = x;
  c.h_pre = add_bias(batched_contract(x, fc1_w, {"bni", "hi", "bnh"}), fc1_b);
  TensorT<T> act = gelu(c.h_pre);
  return add_bias(batched_contract(act, fc2_w, {"bnh", "oh", "bno"}), fc2_b);
}

template <typename T>
TensorT<T> MlpT<T>::backward(Cache& c, const TensorT<T>& gout) {
  accumulate_grad(fc2_b, bias_grad(gout));
  const TensorT<T> act = gelu(c.h_pre);
  TensorT<T> gact, gfc2_w;
  batched_contract_backward(act, fc2_w, ContractSpec{"bnh", "oh", "bno"}, gout, gact, gfc2_w);
  accumulate_grad(fc2_w, gfc2_w);
  TensorT<T> gh = gelu_backward(c.h_pre, gact);
  accumulate_grad(fc1_b, bias_grad(gh));
  TensorT<T> gx, gfc1_w;
  batched_contract_backward(c.x, fc1_w, ContractSpec{"bni", "hi", "bnh"}, gh, gx, gfc1_w);
  accumulate_grad(fc1_w, gfc1_w);
  return gx;
}

template <typename T>
TensorT<T> ModelT<T>::forward(const TensorT<T>& images, bool train_mode, Hooks* hooks) {
  cfg.validate();
  const std::int64_t b = images.shape[0];
  const std::int64_t n = cfg.tokens(), d = cfg.d;

  ForwardCache fc;
  fc.patches = patchify(images, cfg);
  TensorT<T> emb = add_bias(batched_contract(fc.patches, patch_w, kLinearSpec), patch_b);

  TensorT<T> x({b, n, d});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::memcpy(x.ptr() + bi * n * d, cls_token.ptr(), static_cast<std::size_t>(d) * sizeof(T));
    std::memcpy(x.ptr() + (bi * n + 1) * d, emb.ptr() + bi * (n - 1) * d,
                static_cast<std::size_t>((n - 1) * d) * sizeof(T));
    for (std::int64_t t = 0; t < n; ++t) {
      T* px = x.ptr() + (bi * n + t) * d;
      const T* pp = pos_embed.ptr() + t * d;
      for (std::int64_t i = 0; i < d; ++i) px[i] += pp[i];
    }
  }

  fc.block_caches.resize(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    BlockT<T>& blk = blocks[i];
    auto& bc = fc.block_caches[i];
    bc.x = x;
    bc.ln1_out = layer_norm(x, blk.ln1_g, blk.ln1_b, kLayerNormEps);
    TensorT<T> attn_out = blk.attn.forward(bc.ln1_out, bc.attn);
    bc.x1 = add(x, attn_out);

    if (blk.kind == BlockKind::dense) {
      bc.ln2_out = layer_norm(bc.x1, blk.ln2_g, blk.ln2_b, kLayerNormEps);
      TensorT<T> mlp_out = blk.mlp->forward(bc.ln2_out, bc.mlp);
      if (hooks && hooks->mlp_probe) {
        hooks->mlp_probe(static_cast<std::int64_t>(i), bc.ln2_out, gelu(bc.mlp.h_pre));
      }
      x = add(bc.x1, mlp_out);
    } else if (blk.kind == BlockKind::sphero) {
      RoutingTraceT<T> trace;
      RoutingTraceT<T>* tp = (hooks && hooks->traces) ? &trace : nullptr;
      TensorT<T> moe_out = blk.sphero->forward(bc.x1, train_mode, tp);
      if (tp) {
        trace.grid_h = cfg.grid();
        trace.grid_w = cfg.grid();
        trace.prefix_tokens = 1;
        hooks->traces->push_back(std::move(trace));
      }
      x = add(bc.x1, moe_out);
    } else {
      bc.ln2_out = layer_norm(bc.x1, blk.ln2_g, blk.ln2_b, kLayerNormEps);
      RoutingTraceT<T> trace;
      RoutingTraceT<T>* tp = (hooks && hooks->traces) ? &trace : nullptr;
      TensorT<T> moe_out = blk.soft->forward(bc.ln2_out, tp);
      if (tp) {
        trace.grid_h = cfg.grid();
        trace.grid_w = cfg.grid();
        trace.prefix_tokens = 1;
        hooks->traces->push_back(std::move(trace));
      }
      x = add(bc.x1, moe_out);
    }
  }

  fc.x_final = x;
  TensorT<T> xf = layer_norm(x, norm_g, norm_b, kLayerNormEps);
  fc.pooled = reduce_mean(xf, 1);
  TensorT<T> logits = add_bias(batched_contract(fc.pooled, head_w, kHeadSpec), head_b);
  fc.valid = true;
  cache_ = std::move(fc);
  return logits;
}

template <typename T>
void ModelT<T>::backward(const TensorT<T>& glogits) {
  require(cache_.valid, Err::InvalidSpec, "backward without a preceding forward");
  ForwardCache& fc = cache_;
  const std::int64_t b = glogits.shape[0];
  const std::int64_t n = cfg.tokens(), d = cfg.d;

  accumulate_grad(head_b, bias_grad(glogits));
  TensorT<T> gpooled, ghead_w;
  batched_contract_backward(fc.pooled, head_w, kHeadSpec, glogits, gpooled, ghead_w);
  accumulate_grad(head_w, ghead_w);

  TensorT<T> gxf = reduce_mean_backward(gpooled, {b, n, d}, 1);
  TensorT<T> gx, gng, gnb;
  layer_norm_backward(fc.x_final, norm_g, kLayerNormEps, gxf, gx, gng, gnb);
  accumulate_grad(norm_g, gng);
  accumulate_grad(norm_b, gnb);

  for (std::size_t ri = blocks.size(); ri-- > 0;) {
    BlockT<T>& blk = blocks[ri];
    auto& bc = fc.block_caches[ri];

    TensorT<T> gx1 = gx;  // residual branch
    if (blk.kind == BlockKind::dense) {
      TensorT<T> gln2 = blk.mlp->backward(bc.mlp, gx);
      TensorT<T> gfrom_mlp, gg, gb;
      layer_norm_backward(bc.x1, blk.ln2_g, kLayerNormEps, gln2, gfrom_mlp, gg, gb);
      accumulate_grad(blk.ln2_g, gg);
      accumulate_grad(blk.ln2_b, gb);
      add_inplace(gx1, gfrom_mlp);
    } else if (blk.kind == BlockKind::sphero) {
      TensorT<T> gfrom_moe = blk.sphero->backward(gx);
      add_inplace(gx1, gfrom_moe);
    } else {
      TensorT<T> gln2 = blk.soft->backward(gx);
      TensorT<T> gfrom_moe, gg, gb;
      layer_norm_backward(bc.x1, blk.ln2_g, kLayerNormEps, gln2, gfrom_moe, gg, gb);
      accumulate_grad(blk.ln2_g, gg);
      accumulate_grad(blk.ln2_b, gb);
      add_inplace(gx1, gfrom_moe);
    }

    TensorT<T> gln1 = blk.attn.backward(bc.attn, gx1);
    TensorT<T> gfrom_attn, gg1, gb1;
    layer_norm_backward(bc.x, blk.ln1_g, kLayerNormEps, gln1, gfrom_attn, gg1, gb1);
    accumulate_grad(blk.ln1_g, gg1);
    accumulate_grad(blk.ln1_b, gb1);
    gx = gx1;
    add_inplace(gx, gfrom_attn);
  }

  // Embedding backward: positional, cls token, patch projection.
  pos_embed.ensure_grad();
  cls_token.ensure_grad();
  TensorT<T> gemb({b, n - 1, d});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t t = 0; t < n; ++t) {
      const T* pg = gx.ptr() + (bi * n + t) * d;
      T* pp = pos_embed.grad->data() + t * d;
      for (std::int64_t i = 0; i < d; ++i) pp[i] += pg[i];
    }
    const T* g0 = gx.ptr() + bi * n * d;
    for (std::int64_t i = 0; i < d; ++i) (*cls_token.grad)[i] += g0[i];
    std::memcpy(gemb.ptr() + bi * (n - 1) * d, gx.ptr() + (bi * n + 1) * d,
                static_cast<std::size_t>((n - 1) * d) * sizeof(T));
  }
  accumulate_grad(patch_b, bias_grad(gemb));
  TensorT<T> gpatches, gpatch_w;
  batched_contract_backward(fc.patches, patch_w, kLinearSpec, gemb, gpatches, gpatch_w);
  accumulate_grad(patch_w, gpatch_w);
}

template <typename T>
void ModelT<T>::zero_grads() {
  visit_params([](const std::string&, TensorT<T>& p) { p.zero_grad(); });
}

template <typename T>
void ModelT<T>::visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn) {
  fn("patch_embed.w", patch_w);
  fn("patch_embed.b", patch_b);
  fn("cls_token", cls_token);
  fn("pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    BlockT<T>& blk = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    fn(p + "ln1.gamma", blk.ln1_g);
    fn(p + "ln1.beta", blk.ln1_b);
    fn(p + "attn.qkv_w", blk.attn.qkv_w);
    fn(p + "attn.qkv_b", blk.attn.qkv_b);
    fn(p + "attn.proj_w", blk.attn.proj_w);
    fn(p + "attn.proj_b", blk.attn.proj_b);
    if (blk.kind == BlockKind::dense) {
      fn(p + "ln2.gamma", blk.ln2_g);
      fn(p + "ln2.beta", blk.ln2_b);
      fn(p + "mlp.fc1_w", blk.mlp->fc1_w);
      fn(p + "mlp.fc1_b", blk.mlp->fc1_b);
      fn(p + "mlp.fc2_w", blk.mlp->fc2_w);
      fn(p + "mlp.fc2_b", blk.mlp->fc2_b);
    } else if (blk.kind == BlockKind::sphero) {
      blk.sphero->visit_params(p + "moe.", fn);
    } else {
      fn(p + "ln2.gamma", blk.ln2_g);
      fn(p + "ln2.beta", blk.ln2_b);
      blk.soft->visit_params(p + "softmoe.", fn);
    }
  }
  fn("norm.gamma", norm_g);
  fn("norm.beta", norm_b);
  fn("head.w", head_w);
  fn("head.b", head_b);
}

template <typename T>
void ModelT<T>::set_train_step(std::int64_t step) {
  for (auto& blk : blocks) {
    if (blk.kind == BlockKind::sphero) blk.sphero->set_train_step(step);
  }
}

template <typename T>
std::int64_t ModelT<T>::param_count() {
  std::int64_t total = 0;
  visit_params([&](const std::string&, TensorT<T>& p) { total += p.numel(); });
  return total;
}

template <typename T>
ModelT<T> build_predecessor(const ModelConfig& cfg_in, std::uint64_t seed) {
  ModelConfig cfg = cfg_in;
  cfg.moe_from = cfg.moe_to = 0;  // predecessors are fully dense
  cfg.validate();
  const std::int64_t d = cfg.d, hid = cfg.hidden();

  Rng rng(seed);
  const double w_std = 0.02;
  ModelT<T> m;
  m.cfg = cfg;
  m.patch_w = TensorT<T>::randn({d, 3 * cfg.patch_size * cfg.patch_size}, rng, w_std);
  m.patch_b = TensorT<T>::zeros({d});
  m.cls_token = TensorT<T>::randn({1, 1, d}, rng, w_std);
  m.pos_embed = TensorT<T>::randn({1, cfg.tokens(), d}, rng, w_std);
  m.blocks.resize(cfg.n_layers);
  for (auto& blk : m.blocks) {
    blk.kind = BlockKind::dense;
    blk.ln1_g = TensorT<T>::full({d}, T(1));
    blk.ln1_b = TensorT<T>::zeros({d});
    blk.ln2_g = TensorT<T>::full({d}, T(1));
    blk.ln2_b = TensorT<T>::zeros({d});
    blk.attn.n_heads = cfg.n_heads;
    blk.attn.qkv_w = TensorT<T>::randn({3 * d, d}, rng, w_std);
    blk.attn.qkv_b = TensorT<T>::zeros({3 * d});
    blk.attn.proj_w = TensorT<T>::randn({d, d}, rng, w_std);
    blk.attn.proj_b = TensorT<T>::zeros({d});
    blk.mlp.emplace();
    blk.mlp->fc1_w = TensorT<T>::randn({hid, d}, rng, w_std);
    blk.mlp->fc1_b = TensorT<T>::zeros({hid});
    blk.mlp->fc2_w = TensorT<T>::randn({d, hid}, rng, w_std);
    blk.mlp->fc2_b = TensorT<T>::zeros({d});
  }
  m.norm_g = TensorT<T>::full({d}, T(1));
  m.norm_b = TensorT<T>::zeros({d});
  m.head_w = TensorT<T>::zeros({cfg.n_classes, d});
  m.head_b = TensorT<T>::zeros({cfg.n_classes});
  return m;
}

template <typename T>
ModelT<T> model_from_checkpoint(const DenseCheckpoint& ckpt) {
  validate_checkpoint(ckpt);
  ModelConfig cfg;
  cfg.image_size = ckpt.meta.image_size;
  cfg.patch_size = ckpt.meta.patch_size;
  cfg.d = ckpt.meta.embed_dim;
  cfg.mlp_hidden = ckpt.meta.mlp_hidden;
  cfg.n_layers = ckpt.meta.n_layers;
  cfg.n_heads = ckpt.meta.n_heads;
  cfg.n_classes = ckpt.meta.n_classes;

  ModelT<T> m = build_predecessor<T>(cfg, 0);
  m.visit_params([&](const std::string& name, TensorT<T>& p) {
    auto it = ckpt.tensors.find(name);
    require(it != ckpt.tensors.end(), Err::MetaConflict, "checkpoint missing tensor " + name);
    require(it->second.shape == p.shape, Err::MetaConflict, "bad shape for " + name);
    p = it->second.template cast<T>();
  });
  return m;
}

DenseCheckpoint model_to_checkpoint(ModelT<float>& model) {
  DenseCheckpoint ckpt;
  ckpt.meta.n_layers = model.cfg.n_layers;
  ckpt.meta.embed_dim = model.cfg.d;
  ckpt.meta.mlp_hidden = model.cfg.hidden();
  ckpt.meta.n_heads = model.cfg.n_heads;
  ckpt.meta.patch_size = model.cfg.patch_size;
  ckpt.meta.image_size = model.cfg.image_size;
  ckpt.meta.n_classes = model.cfg.n_classes;
  require(model.cfg.moe_from == 0, Err::MetaConflict,
          "only fully dense models serialize as dense checkpoints");
  model.visit_params(
      [&](const std::string& name, Tensor& p) { ckpt.tensors.emplace(name, p); });
  validate_checkpoint(ckpt);
  return ckpt;
}

template <typename T>
ModelT<T> build_successor(const MoEInitBundle& bundle, const SuccessorOptions& opts) {
  const BundleMeta& bm = bundle.meta;
  require(static_cast<std::int64_t>(bundle.channels.size()) == bm.d_prime, Err::MetaConflict,
          "bundle channel set does not match d'");
  require(static_cast<std::int64_t>(bundle.core_stacks.size()) == bm.n_moe_layers() &&
              static_cast<std::int64_t>(bundle.univ_stacks.size()) == bm.n_moe_layers(),
          Err::MetaConflict, "bundle expert stacks do not match the MoE layer range");

  ModelConfig cfg;
  cfg.image_size = bm.image_size;
  cfg.patch_size = bm.patch_size;
  cfg.d = bm.d_prime;
  cfg.n_layers = bm.n_layers;
  cfg.n_heads = bm.n_heads;
  cfg.n_classes = bm.n_classes;
  cfg.moe_from = bm.moe_from;
  cfg.moe_to = bm.moe_to;
  cfg.router = opts.router;
  cfg.moe.e_core = bm.e_core;
  cfg.moe.e_univ = bm.e_univ;
  cfg.moe.slots = bm.slots;
  cfg.moe.d_model = bm.d_prime;
  cfg.moe.h_core = bm.h_core;
  cfg.moe.h_univ = bm.h_univ;
  cfg.moe.t_init = bm.t_init;
  cfg.moe.t_min = opts.t_min;
  cfg.moe.t_max = opts.t_max;
  cfg.moe.noise_mult = opts.noise_mult;
  cfg.moe.noise_decay_steps = opts.noise_decay_steps;
  cfg.moe.expert_dropout_p = opts.expert_dropout_p;

  // Dense-part MLP width comes from the bundle itself.
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    if (!bm.is_moe_layer(i)) {
      auto it = bundle.dense_tensors.find("blocks." + std::to_string(i) + ".mlp.fc1_w");
      require(it != bundle.dense_tensors.end(), Err::MetaConflict,
              "bundle missing dense mlp tensors");
      cfg.mlp_hidden = it->second.shape[0];
      break;
    }
  }
  if (cfg.mlp_hidden == 0) cfg.mlp_hidden = 4 * cfg.d;
  cfg.validate();

  auto dense = [&](const std::string& name, const Shape& shape) {
    auto it = bundle.dense_tensors.find(name);
    require(it != bundle.dense_tensors.end(), Err::MetaConflict, "bundle missing tensor " + name);
    require(it->second.shape == shape, Err::MetaConflict, "bundle tensor " + name + " misshaped");
    return it->second.template cast<T>();
  };

  const std::int64_t d = cfg.d, hid = cfg.hidden();
  ModelT<T> m;
  m.cfg = cfg;
  m.patch_w = dense("patch_embed.w", {d, 3 * cfg.patch_size * cfg.patch_size});
  m.patch_b = dense("patch_embed.b", {d});
  m.cls_token = dense("cls_token", {1, 1, d});
  m.pos_embed = dense("pos_embed", {1, cfg.tokens(), d});
  m.blocks.resize(cfg.n_layers);
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    BlockT<T>& blk = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    blk.ln1_g = dense(p + "ln1.gamma", {d});
    blk.ln1_b = dense(p + "ln1.beta", {d});
    blk.attn.n_heads = cfg.n_heads;
    blk.attn.qkv_w = dense(p + "attn.qkv_w", {3 * d, d});
    blk.attn.qkv_b = dense(p + "attn.qkv_b", {3 * d});
    blk.attn.proj_w = dense(p + "attn.proj_w", {d, d});
    blk.attn.proj_b = dense(p + "attn.proj_b", {d});

    if (!bm.is_moe_layer(i)) {
      blk.kind = BlockKind::dense;
      blk.ln2_g = dense(p + "ln2.gamma", {d});
      blk.ln2_b = dense(p + "ln2.beta", {d});
      blk.mlp.emplace();
      blk.mlp->fc1_w = dense(p + "mlp.fc1_w", {hid, d});
      blk.mlp->fc1_b = dense(p + "mlp.fc1_b", {hid});
      blk.mlp->fc2_w = dense(p + "mlp.fc2_w", {d, hid});
      blk.mlp->fc2_b = dense(p + "mlp.fc2_b", {d});
      continue;
    }

    const std::int64_t mi = i - (bm.moe_from - 1);
    const ExpertStackInit& core = bundle.core_stacks[mi];
    const ExpertStackInit& univ = bundle.univ_stacks[mi];
    if (opts.router == RouterKind::sphero) {
      blk.kind = BlockKind::sphero;
      blk.sphero.emplace(cfg.moe, Rng(opts.seed).child({0xB10Cu, std::uint64_t(i)}).next_u64());
      blk.sphero->router.ln_x_gamma = dense(p + "ln2.gamma", {d});
      blk.sphero->router.ln_x_beta = dense(p + "ln2.beta", {d});
      blk.sphero->core = {core.w1.cast<T>(), core.b1.cast<T>(), core.w2.cast<T>(),
                          core.b2.cast<T>()};
      if (bm.e_univ > 0) {
        blk.sphero->univ = {univ.w1.cast<T>(), univ.b1.cast<T>(), univ.w2.cast<T>(),
                            univ.b2.cast<T>()};
      }
      blk.sphero->core.validate();
    } else {
      blk.kind = BlockKind::soft;
      blk.ln2_g = dense(p + "ln2.gamma", {d});
      blk.ln2_b = dense(p + "ln2.beta", {d});
      blk.soft.emplace(d, bm.e_core, bm.slots,
                       Rng(opts.seed).child({0x50FBu, std::uint64_t(i)}).next_u64());
      blk.soft->experts = {core.w1.cast<T>(), core.b1.cast<T>(), core.w2.cast<T>(),
                           core.b2.cast<T>()};
      blk.soft->experts.validate();
    }
  }
  m.norm_g = dense("norm.gamma", {d});
  m.norm_b = dense("norm.beta", {d});
  m.head_w = dense("head.w", {cfg.n_classes, d});
  m.head_b = dense("head.b", {cfg.n_classes});
  return m;
}

Archive model_to_archive(ModelT<float>& model) {
  Archive a;
  const ModelConfig& cfg = model.cfg;
  a.meta["kind"] = "model";
  a.meta["image_size"] = cfg.image_size;
  a.meta["patch_size"] = cfg.patch_size;
  a.meta["d"] = cfg.d;
  a.meta["n_layers"] = cfg.n_layers;
  a.meta["n_heads"] = cfg.n_heads;
  a.meta["n_classes"] = cfg.n_classes;
  a.meta["mlp_hidden"] = cfg.hidden();
  a.meta["moe_from"] = cfg.moe_from;
  a.meta["moe_to"] = cfg.moe_to;
  a.meta["router"] = router_kind_name(cfg.router);
  a.meta["moe"] = {{"e_core", cfg.moe.e_core},
                   {"e_univ", cfg.moe.e_univ},
                   {"slots", cfg.moe.slots},
                   {"h_core", cfg.moe.h_core},
                   {"h_univ", cfg.moe.h_univ},
                   {"t_init", cfg.moe.t_init},
                   {"t_min", cfg.moe.t_min},
                   {"t_max", cfg.moe.t_max},
                   {"noise_mult", cfg.moe.noise_mult},
                   {"noise_decay_steps", cfg.moe.noise_decay_steps},
                   {"expert_dropout_p", cfg.moe.expert_dropout_p}};
  model.visit_params(
      [&](const std::string& name, Tensor& p) { a.tensors.emplace(name, RawTensor::from(p)); });
  return a;
}

Model model_from_archive(const Archive& a) {
  require(archive_kind(a) == "model", Err::MetaConflict, "archive is not a model");
  const nlohmann::json& meta = a.meta;
  ModelConfig cfg;
  cfg.image_size = meta.at("image_size").get<std::int64_t>();
  cfg.patch_size = meta.at("patch_size").get<std::int64_t>();
  cfg.d = meta.at("d").get<std::int64_t>();
  cfg.n_layers = meta.at("n_layers").get<std::int64_t>();
  cfg.n_heads = meta.at("n_heads").get<std::int64_t>();
  cfg.n_classes = meta.at("n_classes").get<std::int64_t>();
  cfg.mlp_hidden = meta.at("mlp_hidden").get<std::int64_t>();
  cfg.moe_from = meta.at("moe_from").get<std::int64_t>();
  cfg.moe_to = meta.at("moe_to").get<std::int64_t>();
  cfg.router = parse_router_kind(meta.at("router").get<std::string>());
  const nlohmann::json& mj = meta.at("moe");
  cfg.moe.e_core = mj.at("e_core").get<std::int64_t>();
  cfg.moe.e_univ = mj.at("e_univ").get<std::int64_t>();
  cfg.moe.slots = mj.at("slots").get<std::int64_t>();
  cfg.moe.d_model = cfg.d;
  cfg.moe.h_core = mj.at("h_core").get<std::int64_t>();
  cfg.moe.h_univ = mj.at("h_univ").get<std::int64_t>();
  cfg.moe.t_init = mj.at("t_init").get<double>();
  cfg.moe.t_min = mj.at("t_min").get<double>();
  cfg.moe.t_max = mj.at("t_max").get<double>();
  cfg.moe.noise_mult = mj.at("noise_mult").get<double>();
  cfg.moe.noise_decay_steps = mj.at("noise_decay_steps").get<std::int64_t>();
  cfg.moe.expert_dropout_p = mj.at("expert_dropout_p").get<double>();
  cfg.validate();

  Model m;
  m.cfg = cfg;
  const std::int64_t d = cfg.d;
  m.blocks.resize(cfg.n_layers);
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    BlockT<float>& blk = m.blocks[i];
    blk.attn.n_heads = cfg.n_heads;
    if (!cfg.is_moe(i)) {
      blk.kind = BlockKind::dense;
      blk.mlp.emplace();
    } else if (cfg.router == RouterKind::sphero) {
      blk.kind = BlockKind::sphero;
      blk.sphero.emplace(cfg.moe, 0);
    } else {
      blk.kind = BlockKind::soft;
      blk.soft.emplace(d, cfg.moe.e_core, cfg.moe.slots, 0);
    }
  }
  // Give every parameter its stored value (shapes come from the archive).
  m.visit_params([&](const std::string& name, Tensor& p) {
    auto it = a.tensors.find(name);
    require(it != a.tensors.end(), Err::MetaConflict, "model archive missing tensor " + name);
    p = it->second.to_f32();
  });
  return m;
}

double flops_estimate(const ModelConfig& cfg) {
  const double n = static_cast<double>(cfg.tokens());
  const double d = static_cast<double>(cfg.d);
  const double hid = static_cast<double>(cfg.hidden());
  const double np = static_cast<double>(cfg.grid() * cfg.grid());

  double macs = np * 3.0 * cfg.patch_size * cfg.patch_size * d;  // patch embedding
  const double attn = 3.0 * n * d * d + 2.0 * n * n * d + n * d * d;
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    macs += attn;
    if (!cfg.is_moe(i)) {
      macs += 2.0 * n * d * hid;
      continue;
    }
    const double slots = static_cast<double>(cfg.moe.total_slots());
    if (cfg.router == RouterKind::sphero) {
      macs += n * d * d;      // key projection
      macs += slots * n * d;  // similarity logits
    } else {
      macs += n * d * slots;  // phi logits
    }
    macs += slots * n * d;    // dispatch mixing
    macs += 2.0 * cfg.moe.e_core * cfg.moe.slots * cfg.moe.h_core * d;
    macs += 2.0 * cfg.moe.e_univ * cfg.moe.slots * cfg.moe.h_univ * d;
    macs += n * slots * d;    // combine mixing
  }
  macs += d * cfg.n_classes;  // head
  return macs;
}

std::int64_t param_count_formula(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d, hid = cfg.hidden();
  const std::int64_t n = cfg.tokens();
  std::int64_t total = 0;
  total += d * 3 * cfg.patch_size * cfg.patch_size + d;  // patch embed
  total += d;                                            // cls token
  total += n * d;                                        // positional
  const std::int64_t attn = (3 * d * d + 3 * d) + (d * d + d);
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    total += 2 * d + attn;  // ln1 + attention
    if (!cfg.is_moe(i)) {
      total += 2 * d + (hid * d + hid) + (d * hid + d);
      continue;
    }
    const std::int64_t slots = cfg.moe.total_slots();
    if (cfg.router == RouterKind::sphero) {
      total += 2 * d;                 // inherited ln_x
      total += 2 * d;                 // ln_q
      total += slots * d;             // queries
      total += d * d + d;             // key projection
      total += 1;                     // log temperature
      total += cfg.moe.e_core * (cfg.moe.h_core * d + cfg.moe.h_core + d * cfg.moe.h_core + d);
      total += cfg.moe.e_univ * (cfg.moe.h_univ * d + cfg.moe.h_univ + d * cfg.moe.h_univ + d);
    } else {
      total += 2 * d;      // ln2
      total += d * slots;  // phi
      total += cfg.moe.e_core * (cfg.moe.h_core * d + cfg.moe.h_core + d * cfg.moe.h_core + d);
    }
  }
  total += 2 * d;                      // final norm
  total += cfg.n_classes * d + cfg.n_classes;
  return total;
}

#define MOEKIT_INSTANTIATE_VIT(T)                                                  \
  template struct AttentionT<T>;                                                   \
  template struct MlpT<T>;                                                         \
  template class ModelT<T>;                                                        \
  template ModelT<T> build_predecessor<T>(const ModelConfig&, std::uint64_t);      \
  template ModelT<T> model_from_checkpoint<T>(const DenseCheckpoint&);             \
  template ModelT<T> build_successor<T>(const MoEInitBundle&, const SuccessorOptions&);

MOEKIT_INSTANTIATE_VIT(float)
MOEKIT_INSTANTIATE_VIT(double)

#undef MOEKIT_INSTANTIATE_VIT

}  // namespace moekit
