// SPDX-License-Identifier: Apache-2.0
#include "moekit/spheromoe.hpp"

#include <cmath>
#include <cstring>

namespace moekit {

namespace {

const ContractSpec kKeySpec{"bni", "oi", "bno"};
const ContractSpec kSimSpec{"bnd", "kd", "bnk"};
const ContractSpec kMixSpec{"bnk", "bnd", "bkd"};
const ContractSpec kCombineSpec{"bnk", "bkd", "bnd"};
const ContractSpec kFc1Spec{"besd", "ehd", "besh"};
const ContractSpec kFc2Spec{"besh", "edh", "besd"};

// x[b,e,s,h] += bias[e,h]
template <typename T>
void add_expert_bias(TensorT<T>& x, const TensorT<T>& bias) {
  const std::int64_t b = x.shape[0], e = x.shape[1], s = x.shape[2], h = x.shape[3];
  require(bias.shape == Shape({e, h}), Err::ShapeMismatch, "expert bias shape mismatch");
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ei = 0; ei < e; ++ei) {
      const T* pb = bias.ptr() + ei * h;
      for (std::int64_t si = 0; si < s; ++si) {
        T* px = x.ptr() + ((bi * e + ei) * s + si) * h;
        for (std::int64_t i = 0; i < h; ++i) px[i] += pb[i];
      }
    }
  }
}

template <typename T>
TensorT<T> expert_bias_grad(const TensorT<T>& gout) {
  const std::int64_t b = gout.shape[0], e = gout.shape[1], s = gout.shape[2], h = gout.shape[3];
  TensorT<T> g({e, h});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ei = 0; ei < e; ++ei) {
      T* pg = g.ptr() + ei * h;
      for (std::int64_t si = 0; si < s; ++si) {
        const T* po = gout.ptr() + ((bi * e + ei) * s + si) * h;
        for (std::int64_t i = 0; i < h; ++i) pg[i] += po[i];
      }
    }
  }
  return g;
}

// Copy slot rows [first, first+count) of [b, slots, d] into [b, count/s, s, d].
template <typename T>
TensorT<T> take_slot_block(const TensorT<T>& x, std::int64_t first, std::int64_t count,
                           std::int64_t slots_per_expert) {
  const std::int64_t b = x.shape[0], total = x.shape[1], d = x.shape[2];
  TensorT<T> out({b, count / slots_per_expert, slots_per_expert, d});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::memcpy(out.ptr() + bi * count * d, x.ptr() + (bi * total + first) * d,
                static_cast<std::size_t>(count * d) * sizeof(T));
  }
  return out;
}

template <typename T>
void put_slot_block(TensorT<T>& dst, const TensorT<T>& block4, std::int64_t first) {
  const std::int64_t b = dst.shape[0], total = dst.shape[1], d = dst.shape[2];
  const std::int64_t count = block4.shape[1] * block4.shape[2];
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::memcpy(dst.ptr() + (bi * total + first) * d, block4.ptr() + bi * count * d,
                static_cast<std::size_t>(count * d) * sizeof(T));
  }
}

}  // namespace

void SpheroMoEConfig::validate() const {
  require(e_core >= 1 && e_univ >= 0 && slots >= 1, Err::InvalidSpec,
          "expert counts must be positive (core) and nonnegative (universal)");
  require(d_model >= 1 && h_core >= 1 && (e_univ == 0 || h_univ >= 1), Err::InvalidSpec,
          "model and hidden dims must be positive");
  require(std::isfinite(t_min) && std::isfinite(t_max) && t_min > 0 && t_min <= t_max,
          Err::InvalidTemperature, "temperature bounds must satisfy 0 < t_min <= t_max");
  require(std::isfinite(t_init) && t_init >= t_min && t_init <= t_max, Err::InvalidTemperature,
          "t_init must lie within the temperature bounds");
  require(expert_dropout_p >= 0.0 && expert_dropout_p < 1.0, Err::InvalidSpec,
          "expert dropout probability must be in [0, 1)");
  require(noise_mult >= 0.0, Err::InvalidSpec, "noise multiplier must be nonnegative");
}

template <typename T>
void ExpertStackT<T>::validate() const {
  require(w1.rank() == 3, Err::ShapeMismatch, "expert stack w1 must be [e, h, d]");
  const std::int64_t e = w1.shape[0], h = w1.shape[1], d = w1.shape[2];
  require(b1.shape == Shape({e, h}), Err::ShapeMismatch, "expert stack b1 must be [e, h]");
  require(w2.shape == Shape({e, d, h}), Err::ShapeMismatch, "expert stack w2 must be [e, d, h]");
  require(b2.shape == Shape({e, d}), Err::ShapeMismatch, "expert stack b2 must be [e, d]");
}

template <typename T>
void RouterStateT<T>::clamp_temperature(double t_min, double t_max) {
  const double lo = std::log(t_min), hi = std::log(t_max);
  double v = static_cast<double>(log_t.data[0]);
  if (v < lo) v = lo;
  if (v > hi) v = hi;
  log_t.data[0] = static_cast<T>(v);
}

template <typename T>
TensorT<T> parallel_expert_forward(const TensorT<T>& x, const ExpertStackT<T>& stack) {
  TensorT<T> ignored;
  return parallel_expert_forward_cached(x, stack, &ignored);
}

template <typename T>
TensorT<T> parallel_expert_forward_cached(const TensorT<T>& x, const ExpertStackT<T>& stack,
                                          TensorT<T>* h_pre) {
  stack.validate();
  require(x.rank() == 4, Err::ShapeMismatch, "expert input must be [b, e, s, d]");
  require(x.shape[1] == stack.experts() && x.shape[3] == stack.channels(), Err::ShapeMismatch,
          "expert input does not match the stack");
  TensorT<T> h = batched_contract(x, stack.w1, kFc1Spec);
  add_expert_bias(h, stack.b1);
  if (h_pre) *h_pre = h;
  TensorT<T> act = gelu(h);
  TensorT<T> out = batched_contract(act, stack.w2, kFc2Spec);
  add_expert_bias(out, stack.b2);
  return out;
}

template <typename T>
TensorT<T> parallel_expert_backward(const TensorT<T>& x, ExpertStackT<T>& stack,
                                    const TensorT<T>& h_pre, const TensorT<T>& gout) {
  require(gout.same_shape(x), Err::ShapeMismatch, "expert gout must match input shape");
  accumulate_grad(stack.b2, expert_bias_grad(gout));
  const TensorT<T> act = gelu(h_pre);
  TensorT<T> gact, gw2;
  batched_contract_backward(act, stack.w2, kFc2Spec, gout, gact, gw2);
  accumulate_grad(stack.w2, gw2);
  const TensorT<T> gh = gelu_backward(h_pre, gact);
  accumulate_grad(stack.b1, expert_bias_grad(gh));
  TensorT<T> gx, gw1;
  batched_contract_backward(x, stack.w1, kFc1Spec, gh, gx, gw1);
  accumulate_grad(stack.w1, gw1);
  return gx;
}

template <typename T>
TensorT<T> expert_dropout(const TensorT<T>& slot_out, double p, std::int64_t slots_per_expert,
                          Rng& rng, bool train_mode, std::vector<std::uint8_t>* dropped) {
  require(p >= 0.0 && p < 1.0, Err::InvalidSpec, "dropout probability must be in [0, 1)");
  require(slot_out.rank() == 3 && slot_out.shape[1] % slots_per_expert == 0, Err::ShapeMismatch,
          "slot tensor must be [b, e*s, d]");
  const std::int64_t n_experts = slot_out.shape[1] / slots_per_expert;
  if (dropped) dropped->assign(static_cast<std::size_t>(n_experts), 0);
  if (!train_mode || p == 0.0) return slot_out;

  const std::int64_t b = slot_out.shape[0], total = slot_out.shape[1], d = slot_out.shape[2];
  std::vector<T> keep(static_cast<std::size_t>(n_experts));
  const T survivor = static_cast<T>(1.0 / (1.0 - p));
  for (std::int64_t e = 0; e < n_experts; ++e) {
    const bool drop = rng.uniform() < p;
    keep[static_cast<std::size_t>(e)] = drop ? T(0) : survivor;
    if (dropped && drop) (*dropped)[static_cast<std::size_t>(e)] = 1;
  }
  TensorT<T> out(slot_out.shape);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t k = 0; k < total; ++k) {
      const T m = keep[static_cast<std::size_t>(k / slots_per_expert)];
      const T* src = slot_out.ptr() + (bi * total + k) * d;
      T* dst = out.ptr() + (bi * total + k) * d;
      for (std::int64_t i = 0; i < d; ++i) dst[i] = src[i] * m;
    }
  }
  return out;
}

template <typename T>
SpheroMoELayerT<T>::SpheroMoELayerT(const SpheroMoEConfig& config, std::uint64_t rng_seed)
    : cfg(config), rng_seed_(rng_seed) {
  cfg.validate();
  Rng rng = Rng(rng_seed).child({0x9031u});
  const std::int64_t d = cfg.d_model;
  router.queries = TensorT<T>::randn({cfg.total_slots(), d}, rng, 1.0 / std::sqrt(double(d)));
  router.key_w = TensorT<T>::randn({d, d}, rng, 1.0 / std::sqrt(double(d)));
  router.key_b = TensorT<T>::zeros({d});
  router.ln_x_gamma = TensorT<T>::full({d}, T(1));
  router.ln_x_beta = TensorT<T>::zeros({d});
  router.ln_q_gamma = TensorT<T>::full({d}, T(1));
  router.ln_q_beta = TensorT<T>::zeros({d});
  router.log_t = TensorT<T>::full({1}, static_cast<T>(std::log(cfg.t_init)));
}

template <typename T>
double SpheroMoELayerT<T>::current_noise_mult() const {
  if (cfg.noise_mult <= 0.0) return 0.0;
  if (cfg.noise_decay_steps <= 0) return cfg.noise_mult;
  const double frac = 1.0 - double(train_step_) / double(cfg.noise_decay_steps);
  return cfg.noise_mult * std::max(0.0, frac);
}

template <typename T>
double SpheroMoELayerT<T>::temperature_used() const {
  return std::min(cfg.t_max, std::max(cfg.t_min, router.temperature_raw()));
}

template <typename T>
TensorT<T> SpheroMoELayerT<T>::forward(const TensorT<T>& x, bool train_mode,
                                       RoutingTraceT<T>* trace) {
  require(x.rank() == 3 && x.shape[2] == cfg.d_model, Err::ShapeMismatch,
          "router input must be [b, n, d]");
  require(x.shape[1] >= 1, Err::ShapeMismatch, "router needs at least one token");
  const std::int64_t slots_total = cfg.total_slots();
  const std::int64_t core_slots = cfg.core_slots();

  Cache c;
  c.x = x;
  c.x_norm = layer_norm(x, router.ln_x_gamma, router.ln_x_beta, kLayerNormEps);
  c.q_ln = layer_norm(router.queries, router.ln_q_gamma, router.ln_q_beta, kLayerNormEps);
  c.q_norm = l2_normalize(c.q_ln, kL2NormEps);
  c.keys = add_bias(batched_contract(c.x_norm, router.key_w, kKeySpec), router.key_b);
  c.sim = batched_contract(c.keys, c.q_norm, kSimSpec);

  const double noise = train_mode ? current_noise_mult() : 0.0;
  if (noise > 0.0) {
    Rng nrng = Rng(rng_seed_).child({0xA01Eu, static_cast<std::uint64_t>(train_step_)});
    for (auto& v : c.sim.data) v += static_cast<T>(nrng.normal() * noise);
  }
  require(c.sim.all_finite(), Err::NonFiniteLogits, "similarity logits are not finite");

  const double t_raw = router.temperature_raw();
  c.t_used = std::min(cfg.t_max, std::max(cfg.t_min, t_raw));
  c.t_clamped = c.t_used != t_raw;

  c.dispatch = softmax_axis(c.sim, {1}, c.t_used);
  c.combine = softmax_axis(c.sim, {2}, c.t_used);

  TensorT<T> slot_in = batched_contract(c.dispatch, c.x_norm, kMixSpec);  // [b, slots, d]
  c.core_in = take_slot_block(slot_in, 0, core_slots, cfg.slots);
  TensorT<T> core_out = parallel_expert_forward_cached(c.core_in, core, &c.core_pre);

  TensorT<T> slot_raw(slot_in.shape);
  put_slot_block(slot_raw, core_out, 0);
  if (cfg.e_univ > 0) {
    c.univ_in = take_slot_block(slot_in, core_slots, slots_total - core_slots, cfg.slots);
    TensorT<T> univ_out = parallel_expert_forward_cached(c.univ_in, univ, &c.univ_pre);
    put_slot_block(slot_raw, univ_out, core_slots);
  }

  std::vector<std::uint8_t> dropped;
  Rng drng = Rng(rng_seed_).child({0xD309u, static_cast<std::uint64_t>(train_step_)});
  c.slot_out =
      expert_dropout(slot_raw, cfg.expert_dropout_p, cfg.slots, drng, train_mode, &dropped);
  c.drop_scale.assign(static_cast<std::size_t>(cfg.total_experts()),
                      static_cast<T>(1.0 / (1.0 - cfg.expert_dropout_p)));
  if (!train_mode || cfg.expert_dropout_p == 0.0) {
    std::fill(c.drop_scale.begin(), c.drop_scale.end(), T(1));
  }
  for (std::size_t e = 0; e < dropped.size(); ++e) {
    if (dropped[e]) c.drop_scale[e] = T(0);
  }

  TensorT<T> y = batched_contract(c.combine, c.slot_out, kCombineSpec);

  if (trace) {
    trace->sim_logits = c.sim;
    trace->dispatch = c.dispatch;
    trace->combine = c.combine;
    trace->slot_outputs = slot_raw;
    trace->dropped = dropped;
    trace->temperature = c.t_used;
    trace->slots_per_expert = cfg.slots;
    trace->e_core = cfg.e_core;
  }

  c.valid = true;
  cache_ = std::move(c);
  return y;
}

template <typename T>
TensorT<T> SpheroMoELayerT<T>::backward(const TensorT<T>& gy) {
  require(cache_.valid, Err::InvalidSpec, "backward without a preceding forward");
  Cache& c = cache_;
  const std::int64_t core_slots = cfg.core_slots();
  const std::int64_t slots_total = cfg.total_slots();
  const std::int64_t d = cfg.d_model;

  TensorT<T> gcombine, gslot_out;
  batched_contract_backward(c.combine, c.slot_out, kCombineSpec, gy, gcombine, gslot_out);

  // Dropout backward: the same per-expert scaling applies to the gradient.
  const std::int64_t b = gslot_out.shape[0];
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t k = 0; k < slots_total; ++k) {
      const T m = c.drop_scale[static_cast<std::size_t>(k / cfg.slots)];
      T* p = gslot_out.ptr() + (bi * slots_total + k) * d;
      for (std::int64_t i = 0; i < d; ++i) p[i] *= m;
    }
  }

  TensorT<T> gslot_in({b, slots_total, d});
  {
    TensorT<T> gcore_out = take_slot_block(gslot_out, 0, core_slots, cfg.slots);
    TensorT<T> gcore_in = parallel_expert_backward(c.core_in, core, c.core_pre, gcore_out);
    put_slot_block(gslot_in, gcore_in, 0);
  }
  if (cfg.e_univ > 0) {
    TensorT<T> guniv_out =
        take_slot_block(gslot_out, core_slots, slots_total - core_slots, cfg.slots);
    TensorT<T> guniv_in = parallel_expert_backward(c.univ_in, univ, c.univ_pre, guniv_out);
    put_slot_block(gslot_in, guniv_in, core_slots);
  }

  TensorT<T> gdispatch, gx_norm;
  batched_contract_backward(c.dispatch, c.x_norm, kMixSpec, gslot_in, gdispatch, gx_norm);

  double g_t = 0.0;
  TensorT<T> gsim = softmax_axis_backward(c.dispatch, gdispatch, {1}, c.t_used, &c.sim, &g_t);
  add_inplace(gsim, softmax_axis_backward(c.combine, gcombine, {2}, c.t_used, &c.sim, &g_t));

  TensorT<T> gkeys, gq_norm;
  batched_contract_backward(c.keys, c.q_norm, kSimSpec, gsim, gkeys, gq_norm);

  accumulate_grad(router.key_b, bias_grad(gkeys));
  TensorT<T> gx_norm_keys, gkey_w;
  batched_contract_backward(c.x_norm, router.key_w, kKeySpec, gkeys, gx_norm_keys, gkey_w);
  accumulate_grad(router.key_w, gkey_w);
  add_inplace(gx_norm, gx_norm_keys);

  TensorT<T> gq_ln = l2_normalize_backward(c.q_ln, gq_norm, kL2NormEps);
  TensorT<T> gq, gqg, gqb;
  layer_norm_backward(router.queries, router.ln_q_gamma, kLayerNormEps, gq_ln, gq, gqg, gqb);
  accumulate_grad(router.queries, gq);
  accumulate_grad(router.ln_q_gamma, gqg);
  accumulate_grad(router.ln_q_beta, gqb);

  TensorT<T> gx, gxg, gxb;
  layer_norm_backward(c.x, router.ln_x_gamma, kLayerNormEps, gx_norm, gx, gxg, gxb);
  accumulate_grad(router.ln_x_gamma, gxg);
  accumulate_grad(router.ln_x_beta, gxb);

  if (!c.t_clamped) {
    router.log_t.ensure_grad();
    (*router.log_t.grad)[0] += static_cast<T>(g_t * c.t_used);
  }
  return gx;
}

template <typename T>
void SpheroMoELayerT<T>::visit_params(
    const std::string& prefix, const std::function<void(const std::string&, TensorT<T>&)>& fn) {
  fn(prefix + "ln_x.gamma", router.ln_x_gamma);
  fn(prefix + "ln_x.beta", router.ln_x_beta);
  fn(prefix + "ln_q.gamma", router.ln_q_gamma);
  fn(prefix + "ln_q.beta", router.ln_q_beta);
  fn(prefix + "q", router.queries);
  fn(prefix + "key_w", router.key_w);
  fn(prefix + "key_b", router.key_b);
  fn(prefix + "log_t", router.log_t);
  fn(prefix + "core.w1", core.w1);
  fn(prefix + "core.b1", core.b1);
  fn(prefix + "core.w2", core.w2);
  fn(prefix + "core.b2", core.b2);
  if (cfg.e_univ > 0) {
    fn(prefix + "univ.w1", univ.w1);
    fn(prefix + "univ.b1", univ.b1);
    fn(prefix + "univ.w2", univ.w2);
    fn(prefix + "univ.b2", univ.b2);
  }
}

template <typename T>
SoftMoELayerT<T>::SoftMoELayerT(std::int64_t d, std::int64_t n_experts,
                                std::int64_t slots_per_expert, std::uint64_t rng_seed)
    : slots(slots_per_expert) {
  Rng rng = Rng(rng_seed).child({0x50F7u});
  phi = TensorT<T>::randn({d, n_experts * slots_per_expert}, rng, 1.0 / std::sqrt(double(d)));
}

template <typename T>
TensorT<T> soft_moe_forward(const TensorT<T>& x, const TensorT<T>& phi,
                            const ExpertStackT<T>& experts, std::int64_t slots_per_expert,
                            RoutingTraceT<T>* trace) {
  require(x.rank() == 3, Err::ShapeMismatch, "soft moe input must be [b, n, d]");
  require(phi.rank() == 2 && phi.shape[0] == x.shape[2], Err::ShapeMismatch,
          "phi must be [d, slots]");
  const std::int64_t b = x.shape[0], total = phi.shape[1], d = x.shape[2];
  require(total == experts.experts() * slots_per_expert, Err::ShapeMismatch,
          "phi slot count must equal experts * slots");

  TensorT<T> logits = batched_contract(x, phi, {"bnd", "dk", "bnk"});
  TensorT<T> dispatch = softmax_axis(logits, {1}, 1.0);
  TensorT<T> combine = softmax_axis(logits, {2}, 1.0);
  TensorT<T> slot_in = batched_contract(dispatch, x, kMixSpec);
  TensorT<T> slot_in4 =
      reshaped(slot_in, {b, experts.experts(), slots_per_expert, d});
  TensorT<T> out4 = parallel_expert_forward(slot_in4, experts);
  TensorT<T> slot_out = reshaped(out4, {b, total, d});
  TensorT<T> y = batched_contract(combine, slot_out, kCombineSpec);
  if (trace) {
    trace->sim_logits = logits;
    trace->dispatch = dispatch;
    trace->combine = combine;
    trace->slot_outputs = slot_out;
    trace->dropped.assign(static_cast<std::size_t>(experts.experts()), 0);
    trace->temperature = 1.0;
    trace->slots_per_expert = slots_per_expert;
    trace->e_core = experts.experts();
  }
  return y;
}

template <typename T>
TensorT<T> SoftMoELayerT<T>::forward(const TensorT<T>& x, RoutingTraceT<T>* trace) {
  const std::int64_t b = x.shape[0], d = x.shape[2];
  const std::int64_t total = phi.shape[1];
  Cache c;
  c.x = x;
  c.logits = batched_contract(x, phi, {"bnd", "dk", "bnk"});
  c.dispatch = softmax_axis(c.logits, {1}, 1.0);
  c.combine = softmax_axis(c.logits, {2}, 1.0);
  TensorT<T> slot_in = batched_contract(c.dispatch, x, kMixSpec);
  c.slot_in4 = reshaped(slot_in, {b, experts.experts(), slots, d});
  TensorT<T> out4 = parallel_expert_forward_cached(c.slot_in4, experts, &c.h_pre);
  c.slot_out = reshaped(out4, {b, total, d});
  TensorT<T> y = batched_contract(c.combine, c.slot_out, kCombineSpec);
  if (trace) {
    trace->sim_logits = c.logits;
    trace->dispatch = c.dispatch;
    trace->combine = c.combine;
    trace->slot_outputs = c.slot_out;
    trace->dropped.assign(static_cast<std::size_t>(experts.experts()), 0);
    trace->temperature = 1.0;
    trace->slots_per_expert = slots;
    trace->e_core = experts.experts();
  }
  c.valid = true;
  cache_ = std::move(c);
  return y;
}

template <typename T>
TensorT<T> SoftMoELayerT<T>::backward(const TensorT<T>& gy) {
  require(cache_.valid, Err::InvalidSpec, "backward without a preceding forward");
  Cache& c = cache_;
  const std::int64_t b = c.x.shape[0], d = c.x.shape[2];
  const std::int64_t total = phi.shape[1];

  TensorT<T> gcombine, gslot_out;
  batched_contract_backward(c.combine, c.slot_out, kCombineSpec, gy, gcombine, gslot_out);

  TensorT<T> gout4 = reshaped(gslot_out, {b, experts.experts(), slots, d});
  TensorT<T> gslot_in4 = parallel_expert_backward(c.slot_in4, experts, c.h_pre, gout4);
  TensorT<T> gslot_in = reshaped(gslot_in4, {b, total, d});

  TensorT<T> gdispatch, gx;
  batched_contract_backward(c.dispatch, c.x, kMixSpec, gslot_in, gdispatch, gx);

  TensorT<T> glogits = softmax_axis_backward(c.dispatch, gdispatch, {1}, 1.0);
  add_inplace(glogits, softmax_axis_backward(c.combine, gcombine, {2}, 1.0));

  TensorT<T> gx_logits, gphi;
  batched_contract_backward(c.x, phi, ContractSpec{"bnd", "dk", "bnk"}, glogits, gx_logits, gphi);
  accumulate_grad(phi, gphi);
  add_inplace(gx, gx_logits);
  return gx;
}

template <typename T>
void SoftMoELayerT<T>::visit_params(
    const std::string& prefix, const std::function<void(const std::string&, TensorT<T>&)>& fn) {
  fn(prefix + "phi", phi);
  fn(prefix + "experts.w1", experts.w1);
  fn(prefix + "experts.b1", experts.b1);
  fn(prefix + "experts.w2", experts.w2);
  fn(prefix + "experts.b2", experts.b2);
}

std::vector<double> contribution_stats(const RoutingTrace& trace) {
  const Tensor& combine = trace.combine;
  require(combine.rank() == 3, Err::ShapeMismatch, "trace combine must be [b, n, slots]");
  const std::int64_t b = combine.shape[0], n = combine.shape[1], slots = combine.shape[2];
  require(trace.slots_per_expert >= 1 && slots % trace.slots_per_expert == 0, Err::ShapeMismatch,
          "trace slot grouping is inconsistent");
  const std::int64_t n_experts = slots / trace.slots_per_expert;
  std::vector<double> contrib(static_cast<std::size_t>(n_experts), 0.0);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ni = 0; ni < n; ++ni) {
      const float* row = combine.ptr() + (bi * n + ni) * slots;
      for (std::int64_t k = 0; k < slots; ++k) {
        contrib[static_cast<std::size_t>(k / trace.slots_per_expert)] += row[k];
      }
    }
  }
  for (auto& v : contrib) v /= static_cast<double>(b);
  return contrib;
}

Tensor attention_map(const RoutingTrace& trace, std::int64_t expert, std::int64_t slot,
                     std::int64_t batch_index) {
  const Tensor& dispatch = trace.dispatch;
  require(dispatch.rank() == 3, Err::ShapeMismatch, "trace dispatch must be [b, n, slots]");
  const std::int64_t b = dispatch.shape[0], n = dispatch.shape[1], slots = dispatch.shape[2];
  require(batch_index >= 0 && batch_index < b, Err::IndexOutOfRange, "batch index out of range");
  const std::int64_t slot_index = expert * trace.slots_per_expert + slot;
  require(expert >= 0 && slot >= 0 && slot < trace.slots_per_expert && slot_index < slots,
          Err::IndexOutOfRange, "expert/slot out of range");

  std::int64_t gh = trace.grid_h, gw = trace.grid_w, prefix = trace.prefix_tokens;
  if (gh <= 0 || gw <= 0) {
    const std::int64_t root = static_cast<std::int64_t>(std::llround(std::sqrt(double(n))));
    require(root * root == n, Err::NotAGrid, "token count is not a square and no grid is recorded");
    gh = gw = root;
    prefix = 0;
  }
  require(gh * gw + prefix == n, Err::NotAGrid, "grid metadata does not match token count");

  Tensor map({gh, gw});
  for (std::int64_t r = 0; r < gh; ++r) {
    for (std::int64_t c = 0; c < gw; ++c) {
      const std::int64_t tok = prefix + r * gw + c;
      map.at(r, c) = dispatch.at(batch_index, tok, slot_index);
    }
  }
  return map;
}

#define MOEKIT_INSTANTIATE_MOE(T)                                                             \
  template struct ExpertStackT<T>;                                                            \
  template struct RouterStateT<T>;                                                            \
  template TensorT<T> parallel_expert_forward<T>(const TensorT<T>&, const ExpertStackT<T>&);  \
  template TensorT<T> parallel_expert_forward_cached<T>(const TensorT<T>&,                    \
                                                        const ExpertStackT<T>&, TensorT<T>*); \
  template TensorT<T> parallel_expert_backward<T>(const TensorT<T>&, ExpertStackT<T>&,        \
                                                  const TensorT<T>&, const TensorT<T>&);      \
  template TensorT<T> expert_dropout<T>(const TensorT<T>&, double, std::int64_t, Rng&, bool,  \
                                        std::vector<std::uint8_t>*);                          \
  template TensorT<T> soft_moe_forward<T>(const TensorT<T>&, const TensorT<T>&,               \
                                          const ExpertStackT<T>&, std::int64_t,               \
                                          RoutingTraceT<T>*);                                 \
  template class SpheroMoELayerT<T>;                                                          \
  template class SoftMoELayerT<T>;

MOEKIT_INSTANTIATE_MOE(float)
MOEKIT_INSTANTIATE_MOE(double)

#undef MOEKIT_INSTANTIATE_MOE

}  // namespace moekit
