// SPDX-License-Identifier: Apache-2.0
#include "moekit/recycling.hpp"

#include <algorithm>
#include <numeric>

#include "moekit/graph_partition.hpp"

namespace moekit {

namespace {

Tensor take_rows(const Tensor& t, const std::vector<std::int32_t>& rows) {
  const std::int64_t cols = t.shape[1];
  Tensor out({static_cast<std::int64_t>(rows.size()), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < t.shape[0], Err::IndexOutOfRange, "row index out of range");
    std::copy_n(t.ptr() + std::int64_t(rows[r]) * cols, cols, out.ptr() + std::int64_t(r) * cols);
  }
  return out;
}

Tensor take_cols(const Tensor& t, const std::vector<std::int32_t>& cols) {
  const std::int64_t rows = t.shape[0], width = t.shape[1];
  Tensor out({rows, static_cast<std::int64_t>(cols.size())});
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      require(cols[c] >= 0 && cols[c] < width, Err::IndexOutOfRange, "column index out of range");
      out.at(r, static_cast<std::int64_t>(c)) = t.at(r, cols[c]);
    }
  }
  return out;
}

Tensor take_vec(const Tensor& t, const std::vector<std::int32_t>& idx) {
  Tensor out({static_cast<std::int64_t>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < t.numel(), Err::IndexOutOfRange, "index out of range");
    out.at(static_cast<std::int64_t>(i)) = t.at(idx[i]);
  }
  return out;
}

Tensor take_last_axis(const Tensor& t, const std::vector<std::int32_t>& idx) {
  const std::int64_t d = t.shape.back();
  const std::int64_t rows = t.numel() / d;
  Shape shape = t.shape;
  shape.back() = static_cast<std::int64_t>(idx.size());
  Tensor out(shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] >= 0 && idx[i] < d, Err::IndexOutOfRange, "channel index out of range");
      out.ptr()[r * static_cast<std::int64_t>(idx.size()) + static_cast<std::int64_t>(i)] =
          t.ptr()[r * d + idx[i]];
    }
  }
  return out;
}

std::vector<std::int32_t> strided_indices(std::int64_t source, std::int64_t target) {
  std::vector<std::int32_t> idx(static_cast<std::size_t>(target));
  for (std::int64_t i = 0; i < target; ++i) {
    idx[i] = static_cast<std::int32_t>(i * source / target);
  }
  return idx;
}

std::vector<std::int32_t> random_subset(std::int64_t source, std::int64_t target, Rng& rng) {
  std::vector<std::int32_t> all(static_cast<std::size_t>(source));
  std::iota(all.begin(), all.end(), 0);
  for (std::int64_t i = 0; i < target; ++i) {
    const std::int64_t j =
        i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(source - i)));
    std::swap(all[i], all[j]);
  }
  all.resize(static_cast<std::size_t>(target));
  std::sort(all.begin(), all.end());
  return all;
}

// Highest-statistic indices, ties to the lower index, ascending output.
std::vector<std::int32_t> top_by_stat(const std::vector<double>& stat, std::int64_t count) {
  std::vector<std::int32_t> idx(stat.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int32_t a, std::int32_t b) {
    if (stat[a] != stat[b]) return stat[a] > stat[b];
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct NeuronPlan {
  std::string tag;
  std::vector<std::vector<std::int32_t>> core;
  std::vector<std::vector<std::int32_t>> univ;
};

}  // namespace

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::importance: return "importance";
    case Strategy::graph: return "graph";
    case Strategy::uniform: return "uniform";
    case Strategy::random: return "random";
    case Strategy::upcycle: return "upcycle-copy";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "importance") return Strategy::importance;
  if (name == "graph") return Strategy::graph;
  if (name == "uniform") return Strategy::uniform;
  if (name == "random") return Strategy::random;
  if (name == "upcycle-copy" || name == "upcycle") return Strategy::upcycle;
  fail(Err::InvalidSpec, "unknown recycling strategy " + name);
}

std::vector<std::int32_t> sample_without_replacement(const std::vector<double>& weights,
                                                     std::int64_t count, Rng& rng) {
  const std::int64_t n = static_cast<std::int64_t>(weights.size());
  require(count <= n, Err::InsufficientNeurons, "cannot draw more indices than exist");
  std::vector<double> w(weights);
  std::vector<std::int32_t> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t t = 0; t < count; ++t) {
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      if (w[i] > 0.0) total += w[i];
    }
    std::int32_t pick = -1;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        if (w[i] <= 0.0) continue;
        acc += w[i];
        if (r < acc) {
          pick = static_cast<std::int32_t>(i);
          break;
        }
      }
      if (pick < 0) {  // numeric edge: land on the last positive entry
        for (std::int64_t i = n - 1; i >= 0; --i) {
          if (w[i] > 0.0) {
            pick = static_cast<std::int32_t>(i);
            break;
          }
        }
      }
    } else {
      // Remaining mass is zero: fall back to a uniform draw over what's left.
      std::int64_t remaining = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        if (w[i] >= 0.0) ++remaining;
      }
      std::int64_t target = static_cast<std::int64_t>(rng.below(std::uint64_t(remaining)));
      for (std::int64_t i = 0; i < n; ++i) {
        if (w[i] >= 0.0 && target-- == 0) {
          pick = static_cast<std::int32_t>(i);
          break;
        }
      }
    }
    out.push_back(pick);
    w[pick] = -1.0;  // removed from the pool
  }
  return out;
}

std::map<std::string, Tensor> select_channels(const DenseCheckpoint& ckpt,
                                              const std::vector<std::int32_t>& channels) {
  validate_checkpoint(ckpt);
  const std::int64_t d = ckpt.meta.embed_dim;
  for (std::int32_t c : channels) {
    require(c >= 0 && c < d, Err::IndexOutOfRange, "channel index out of range");
  }
  std::vector<std::int32_t> qkv_rows;
  for (int part = 0; part < 3; ++part) {
    for (std::int32_t c : channels) qkv_rows.push_back(c + part * static_cast<std::int32_t>(d));
  }

  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : ckpt.tensors) {
    const auto tail = name.substr(name.rfind('.') + 1);
    if (name == "patch_embed.w") {
      out.emplace(name, take_rows(t, channels));
    } else if (name == "patch_embed.b") {
      out.emplace(name, take_vec(t, channels));
    } else if (name == "cls_token" || name == "pos_embed") {
      out.emplace(name, take_last_axis(t, channels));
    } else if (tail == "gamma" || tail == "beta") {
      out.emplace(name, take_vec(t, channels));
    } else if (name.find(".attn.qkv_w") != std::string::npos) {
      out.emplace(name, take_cols(take_rows(t, qkv_rows), channels));
    } else if (name.find(".attn.qkv_b") != std::string::npos) {
      out.emplace(name, take_vec(t, qkv_rows));
    } else if (name.find(".attn.proj_w") != std::string::npos) {
      out.emplace(name, take_cols(take_rows(t, channels), channels));
    } else if (name.find(".attn.proj_b") != std::string::npos) {
      out.emplace(name, take_vec(t, channels));
    } else if (name.find(".mlp.fc1_w") != std::string::npos) {
      out.emplace(name, take_cols(t, channels));
    } else if (name.find(".mlp.fc1_b") != std::string::npos) {
      out.emplace(name, t);
    } else if (name.find(".mlp.fc2_w") != std::string::npos) {
      out.emplace(name, take_rows(t, channels));
    } else if (name.find(".mlp.fc2_b") != std::string::npos) {
      out.emplace(name, take_vec(t, channels));
    } else if (name == "head.w") {
      out.emplace(name, take_cols(t, channels));
    } else if (name == "head.b") {
      out.emplace(name, t);
    } else {
      fail(Err::MetaConflict, "unrecognized tensor " + name);
    }
  }
  return out;
}

MoEInitBundle recycle(const DenseCheckpoint& ckpt, const ActivationProfile* profile,
                      const RecycleConfig& cfg) {
  validate_checkpoint(ckpt);
  const std::int64_t d = ckpt.meta.embed_dim;
  const std::int64_t hidden = ckpt.meta.mlp_hidden;
  const std::int64_t n_layers = ckpt.meta.n_layers;

  require(cfg.d_prime >= 1 && cfg.d_prime <= d, Err::InvalidTargetDim,
          "d' must be in [1, predecessor d]");
  const bool needs_profile = cfg.strategy == Strategy::importance || cfg.strategy == Strategy::graph;
  require(!needs_profile || profile != nullptr, Err::InvalidSpec,
          "this strategy needs an activation profile");
  if (profile) {
    require(profile->channels == d && profile->hidden == hidden && profile->n_layers == n_layers,
            Err::MetaConflict, "profile does not match the predecessor");
  }

  std::int64_t h_core = cfg.h_core > 0 ? cfg.h_core : 4 * cfg.d_prime;
  std::int64_t h_univ = cfg.h_univ > 0 ? cfg.h_univ : cfg.d_prime;
  std::int64_t h_dense = 4 * cfg.d_prime;
  if (cfg.strategy == Strategy::upcycle) {
    require(cfg.d_prime == d, Err::SizeMismatch, "upcycle-copy requires d' = d");
    require(cfg.h_core == 0 || cfg.h_core == hidden, Err::SizeMismatch,
            "upcycle-copy keeps the full hidden width");
    h_core = hidden;
    h_univ = hidden;
    h_dense = hidden;
  }
  require(h_core <= hidden && h_univ <= hidden && h_dense <= hidden, Err::InsufficientNeurons,
          "expert hidden sizes cannot exceed the predecessor hidden width");
  require(cfg.e_core >= 1 && cfg.e_univ >= 0 && cfg.slots >= 1, Err::InvalidSpec,
          "invalid expert configuration");

  std::int64_t moe_from = cfg.moe_from, moe_to = cfg.moe_to;
  if (moe_from == 0 && moe_to == 0) {
    moe_from = n_layers / 2 + 1;
    moe_to = n_layers;
  }
  const bool has_moe = moe_from >= 1 && moe_to >= moe_from;
  if (has_moe) {
    require(moe_to <= n_layers, Err::InvalidSpec, "moe layer range exceeds the predecessor");
  }

  const Rng root(cfg.seed);

  // Channel selection.
  std::vector<std::int32_t> channels;
  switch (cfg.strategy) {
    case Strategy::importance:
    case Strategy::graph:
      channels = top_channels(channel_importance(*profile), cfg.d_prime);
      break;
    case Strategy::uniform:
      channels = strided_indices(d, cfg.d_prime);
      break;
    case Strategy::random: {
      Rng rng = root.child({0xC4A2u});
      channels = random_subset(d, cfg.d_prime, rng);
      break;
    }
    case Strategy::upcycle:
      channels = strided_indices(d, d);
      break;
  }

  // Dense-part neuron selection (per layer), reducing the MLP width so the
  // successor's dense blocks match a d'-wide model.
  auto dense_neurons = [&](std::int64_t layer) -> std::vector<std::int32_t> {
    switch (cfg.strategy) {
      case Strategy::importance:
      case Strategy::graph:
        return top_by_stat(profile->neuron_mean_abs[layer], h_dense);
      case Strategy::uniform:
        return strided_indices(hidden, h_dense);
      case Strategy::random: {
        Rng rng = root.child({0xD27Au, static_cast<std::uint64_t>(layer)});
        return random_subset(hidden, h_dense, rng);
      }
      case Strategy::upcycle:
        return strided_indices(hidden, hidden);
    }
    return {};
  };

  // Expert neuron selection for one MoE layer.
  auto expert_neurons = [&](std::int64_t layer) -> NeuronPlan {
    NeuronPlan plan;
    plan.tag = strategy_name(cfg.strategy);
    auto fill_path = [&](std::int64_t count, std::int64_t size, bool is_univ,
                         std::vector<std::vector<std::int32_t>>& out_lists, Strategy strat) {
      for (std::int64_t e = 0; e < count; ++e) {
        const std::uint64_t path_tag = is_univ ? 2u : 1u;
        Rng rng = root.child({0xE87Eu, static_cast<std::uint64_t>(layer), path_tag,
                              static_cast<std::uint64_t>(e)});
        switch (strat) {
          case Strategy::importance: {
            const std::vector<double> p = neuron_distribution(*profile, layer);
            out_lists.push_back(sample_without_replacement(p, size, rng));
            break;
          }
          case Strategy::uniform: {
            const std::int64_t offset = e + (is_univ ? cfg.e_core : 0);
            std::vector<std::int32_t> idx(static_cast<std::size_t>(size));
            for (std::int64_t i = 0; i < size; ++i) {
              idx[i] = static_cast<std::int32_t>((i * hidden / size + offset) % hidden);
            }
            out_lists.push_back(std::move(idx));
            break;
          }
          case Strategy::random: {
            std::vector<double> unif(static_cast<std::size_t>(hidden), 1.0);
            out_lists.push_back(sample_without_replacement(unif, size, rng));
            break;
          }
          case Strategy::upcycle: {
            std::vector<std::int32_t> idx(static_cast<std::size_t>(hidden));
            std::iota(idx.begin(), idx.end(), 0);
            out_lists.push_back(std::move(idx));
            break;
          }
          case Strategy::graph:
            break;  // handled below
        }
      }
    };

    if (cfg.strategy != Strategy::graph) {
      fill_path(cfg.e_core, h_core, false, plan.core, cfg.strategy);
      fill_path(cfg.e_univ, h_univ, true, plan.univ, cfg.strategy);
      return plan;
    }

    // Graph strategy: partition the layer's co-activation graph, then build
    // experts as unions of whole parts trimmed to size by neuron importance.
    const CoactivationGraph graph = build_graph(*profile, layer, cfg.coact_min_count);
    const std::int64_t k = std::max<std::int64_t>(2, (hidden + h_univ - 1) / h_univ);
    if (graph.edges.empty()) {
      // Degenerate graph: fall back to importance sampling for this layer.
      plan.tag = "graph:importance-fallback";
      fill_path(cfg.e_core, h_core, false, plan.core, Strategy::importance);
      fill_path(cfg.e_univ, h_univ, true, plan.univ, Strategy::importance);
      return plan;
    }

    std::vector<std::int32_t> parts;
    try {
      parts = partition_graph(graph, k, cfg.balance_tol,
                              root.child({0x6A9Fu, std::uint64_t(layer)}).next_u64());
    } catch (const Error&) {
      plan.tag = "graph:importance-fallback";
      fill_path(cfg.e_core, h_core, false, plan.core, Strategy::importance);
      fill_path(cfg.e_univ, h_univ, true, plan.univ, Strategy::importance);
      return plan;
    }

    std::vector<std::vector<std::int32_t>> groups(static_cast<std::size_t>(k));
    for (std::int64_t v = 0; v < hidden; ++v) groups[parts[v]].push_back(int(v));
    const std::vector<double>& stat = profile->neuron_mean_abs[layer];

    auto assemble = [&](std::int64_t count, std::int64_t size, bool is_univ,
                        std::vector<std::vector<std::int32_t>>& out_lists) {
      for (std::int64_t e = 0; e < count; ++e) {
        Rng rng = root.child({0x6E0Du, static_cast<std::uint64_t>(layer),
                              is_univ ? 2ull : 1ull, static_cast<std::uint64_t>(e)});
        std::vector<std::int32_t> group_order(static_cast<std::size_t>(k));
        std::iota(group_order.begin(), group_order.end(), 0);
        for (std::int64_t i = k - 1; i > 0; --i) {
          const std::int64_t j =
              static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
          std::swap(group_order[i], group_order[j]);
        }
        std::vector<std::int32_t> pool;
        for (std::int32_t gidx : group_order) {
          pool.insert(pool.end(), groups[gidx].begin(), groups[gidx].end());
          if (static_cast<std::int64_t>(pool.size()) >= size) break;
        }
        std::stable_sort(pool.begin(), pool.end(), [&](std::int32_t a, std::int32_t b) {
          if (stat[a] != stat[b]) return stat[a] > stat[b];
          return a < b;
        });
        pool.resize(static_cast<std::size_t>(size));
        out_lists.push_back(std::move(pool));
      }
    };
    assemble(cfg.e_core, h_core, false, plan.core);
    assemble(cfg.e_univ, h_univ, true, plan.univ);
    return plan;
  };

  // Materialize the bundle.
  MoEInitBundle bundle;
  bundle.meta.n_layers = n_layers;
  bundle.meta.d_prime = cfg.d_prime;
  bundle.meta.n_heads = ckpt.meta.n_heads;
  bundle.meta.patch_size = ckpt.meta.patch_size;
  bundle.meta.image_size = ckpt.meta.image_size;
  bundle.meta.n_classes = ckpt.meta.n_classes;
  bundle.meta.moe_from = has_moe ? moe_from : 0;
  bundle.meta.moe_to = has_moe ? moe_to : 0;
  bundle.meta.e_core = cfg.e_core;
  bundle.meta.e_univ = cfg.e_univ;
  bundle.meta.slots = cfg.slots;
  bundle.meta.h_core = h_core;
  bundle.meta.h_univ = h_univ;
  bundle.meta.t_init = cfg.t_init;
  bundle.meta.strategy = strategy_name(cfg.strategy);
  bundle.meta.seed = cfg.seed;
  bundle.meta.source_d = d;
  bundle.meta.source_hidden = hidden;
  bundle.channels = channels;

  std::map<std::string, Tensor> reduced = select_channels(ckpt, channels);
  for (std::int64_t i = 0; i < n_layers; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    const bool moe_layer = has_moe && i + 1 >= moe_from && i + 1 <= moe_to;
    if (moe_layer) {
      // Expert stacks replace this block's MLP.
      reduced.erase(p + "mlp.fc1_w");
      reduced.erase(p + "mlp.fc1_b");
      reduced.erase(p + "mlp.fc2_w");
      reduced.erase(p + "mlp.fc2_b");
      continue;
    }
    // Reduce the dense MLP's neuron axis to the successor width.
    const std::vector<std::int32_t> neurons = dense_neurons(i);
    reduced[p + "mlp.fc1_w"] = take_rows(reduced.at(p + "mlp.fc1_w"), neurons);
    reduced[p + "mlp.fc1_b"] = take_vec(ckpt.tensors.at(p + "mlp.fc1_b"), neurons);
    reduced[p + "mlp.fc2_w"] = take_cols(reduced.at(p + "mlp.fc2_w"), neurons);
  }
  bundle.dense_tensors = std::move(reduced);

  if (has_moe) {
    for (std::int64_t layer = moe_from - 1; layer <= moe_to - 1; ++layer) {
      const std::string p = "blocks." + std::to_string(layer) + ".";
      const Tensor& fc1_w = ckpt.tensors.at(p + "mlp.fc1_w");
      const Tensor& fc1_b = ckpt.tensors.at(p + "mlp.fc1_b");
      const Tensor& fc2_w = ckpt.tensors.at(p + "mlp.fc2_w");
      const Tensor& fc2_b = ckpt.tensors.at(p + "mlp.fc2_b");

      NeuronPlan plan = expert_neurons(layer);

      auto build_stack = [&](const std::vector<std::vector<std::int32_t>>& lists,
                             std::int64_t h) -> ExpertStackInit {
        const std::int64_t e = static_cast<std::int64_t>(lists.size());
        ExpertStackInit st;
        if (e == 0) return st;
        st.w1 = Tensor({e, h, cfg.d_prime});
        st.b1 = Tensor({e, h});
        st.w2 = Tensor({e, cfg.d_prime, h});
        st.b2 = Tensor({e, cfg.d_prime});
        for (std::int64_t ei = 0; ei < e; ++ei) {
          const auto& neurons = lists[ei];
          for (std::int64_t r = 0; r < h; ++r) {
            const std::int32_t src = neurons[r];
            for (std::int64_t c = 0; c < cfg.d_prime; ++c) {
              st.w1.at(ei, r, c) = fc1_w.at(src, channels[c]);
            }
            st.b1.at(ei, r) = fc1_b.at(src);
          }
          for (std::int64_t c = 0; c < cfg.d_prime; ++c) {
            for (std::int64_t r = 0; r < h; ++r) {
              st.w2.at(ei, c, r) = fc2_w.at(channels[c], neurons[r]);
            }
            st.b2.at(ei, c) = fc2_b.at(channels[c]);
          }
        }
        return st;
      };

      bundle.core_stacks.push_back(build_stack(plan.core, h_core));
      bundle.univ_stacks.push_back(build_stack(plan.univ, h_univ));
      LayerProvenance prov;
      prov.layer = static_cast<std::int32_t>(layer);
      prov.strategy = plan.tag;
      prov.core_neurons = std::move(plan.core);
      prov.univ_neurons = std::move(plan.univ);
      bundle.provenance.push_back(std::move(prov));
    }
  }
  return bundle;
}

}  // namespace moekit
