// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moekit/checkpoint.hpp"
#include "moekit/ops.hpp"
#include "moekit/rng.hpp"

namespace moekit {

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kL2NormEps = 1e-6;

struct SpheroMoEConfig {
  std::int64_t e_core = 16;
  std::int64_t e_univ = 32;
  std::int64_t slots = 1;
  std::int64_t d_model = 32;
  std::int64_t h_core = 128;
  std::int64_t h_univ = 32;
  double t_init = 8.0;
  double t_min = 0.1;
  double t_max = 100.0;
  double noise_mult = 0.1;
  std::int64_t noise_decay_steps = 0;  // linear decay horizon; 0 keeps it constant
  double expert_dropout_p = 0.1;

  std::int64_t total_experts() const { return e_core + e_univ; }
  std::int64_t core_slots() const { return e_core * slots; }
  std::int64_t total_slots() const { return total_experts() * slots; }
  void validate() const;
};

template <typename T>
struct ExpertStackT {
  TensorT<T> w1;  // [e, h, d]
  TensorT<T> b1;  // [e, h]
  TensorT<T> w2;  // [e, d, h]
  TensorT<T> b2;  // [e, d]

  std::int64_t experts() const { return w1.rank() == 3 ? w1.shape[0] : 0; }
  std::int64_t hidden() const { return w1.rank() == 3 ? w1.shape[1] : 0; }
  std::int64_t channels() const { return w1.rank() == 3 ? w1.shape[2] : 0; }
  void validate() const;
};
using ExpertStack = ExpertStackT<float>;

template <typename T>
struct RouterStateT {
  TensorT<T> queries;  // [total_slots, d], free parameters (no bias path)
  TensorT<T> key_w;    // [d, d]
  TensorT<T> key_b;    // [d]
  TensorT<T> ln_x_gamma, ln_x_beta;  // inherited pre-MoE layer norm
  TensorT<T> ln_q_gamma, ln_q_beta;
  TensorT<T> log_t;  // [1]; T = exp(log_t), clamped to config bounds

  double temperature_raw() const { return std::exp(static_cast<double>(log_t.data[0])); }
  void clamp_temperature(double t_min, double t_max);
};

template <typename T>
struct RoutingTraceT {
  TensorT<T> sim_logits;    // [b, n, slots], as consumed by both softmaxes
  TensorT<T> dispatch;      // [b, n, slots]; columns sum to 1 over tokens
  TensorT<T> combine;       // [b, n, slots]; rows sum to 1 over slots
  TensorT<T> slot_outputs;  // [b, slots, d], before expert dropout
  std::vector<std::uint8_t> dropped;  // one flag per expert
  double temperature = 0.0;
  std::int64_t slots_per_expert = 1;
  std::int64_t e_core = 0;
  std::int64_t grid_h = 0, grid_w = 0, prefix_tokens = 0;
};
using RoutingTrace = RoutingTraceT<float>;

// Fused per-expert MLP: [b, e, s, d] -> [b, e, s, d] in four batched steps.
template <typename T>
TensorT<T> parallel_expert_forward(const TensorT<T>& x, const ExpertStackT<T>& stack);

template <typename T>
TensorT<T> parallel_expert_forward_cached(const TensorT<T>& x, const ExpertStackT<T>& stack,
                                          TensorT<T>* h_pre);

// Accumulates parameter gradients into the stack's grad buffers; returns gx.
template <typename T>
TensorT<T> parallel_expert_backward(const TensorT<T>& x, ExpertStackT<T>& stack,
                                    const TensorT<T>& h_pre, const TensorT<T>& gout);

// Whole-expert dropout over [b, slots, d] slot outputs; survivors are
// rescaled by 1/(1-p) so the expectation matches the undropped output.
template <typename T>
TensorT<T> expert_dropout(const TensorT<T>& slot_out, double p, std::int64_t slots_per_expert,
                          Rng& rng, bool train_mode, std::vector<std::uint8_t>* dropped = nullptr);

template <typename T>
class SpheroMoELayerT {
 public:
  SpheroMoEConfig cfg;
  RouterStateT<T> router;
  ExpertStackT<T> core;
  ExpertStackT<T> univ;

  SpheroMoELayerT() = default;
  // Fresh router state; expert stacks are installed by the model builder.
  SpheroMoELayerT(const SpheroMoEConfig& cfg, std::uint64_t rng_seed);

  TensorT<T> forward(const TensorT<T>& x, bool train_mode, RoutingTraceT<T>* trace = nullptr);
  // Must follow a forward on the same instance; accumulates parameter grads
  // and returns the gradient w.r.t. the layer input.
  TensorT<T> backward(const TensorT<T>& gy);

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, TensorT<T>&)>& fn);
  void set_train_step(std::int64_t step) { train_step_ = step; }
  double current_noise_mult() const;
  double temperature_used() const;

 private:
  struct Cache {
    TensorT<T> x, x_norm;
    TensorT<T> q_ln, q_norm;
    TensorT<T> keys;
    TensorT<T> sim;  // post-noise logits
    TensorT<T> dispatch, combine;
    TensorT<T> core_in, univ_in;    // [b, e, s, d]
    TensorT<T> core_pre, univ_pre;  // pre-gelu hidden
    TensorT<T> slot_out;            // post-dropout [b, slots, d]
    std::vector<T> drop_scale;      // per expert: 0 or 1/(1-p); eval: 1
    double t_used = 0.0;
    bool t_clamped = false;
    bool valid = false;
  };
  Cache cache_;
  std::uint64_t rng_seed_ = 0;
  std::int64_t train_step_ = 0;
};
using SpheroMoELayer = SpheroMoELayerT<float>;

template <typename T>
class SoftMoELayerT {
 public:
  std::int64_t slots = 1;
  TensorT<T> phi;  // [d, total_slots]
  ExpertStackT<T> experts;

  SoftMoELayerT() = default;
  SoftMoELayerT(std::int64_t d, std::int64_t n_experts, std::int64_t slots_per_expert,
                std::uint64_t rng_seed);

  TensorT<T> forward(const TensorT<T>& x, RoutingTraceT<T>* trace = nullptr);
  TensorT<T> backward(const TensorT<T>& gy);

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, TensorT<T>&)>& fn);

 private:
  struct Cache {
    TensorT<T> x;
    TensorT<T> logits, dispatch, combine;
    TensorT<T> slot_in4, h_pre;
    TensorT<T> slot_out;
    bool valid = false;
  };
  Cache cache_;
};
using SoftMoELayer = SoftMoELayerT<float>;

// Plain Soft MoE dispatch/combine on already-normalized tokens; no
// hypersphere projection, temperature, noise, or dual path.
template <typename T>
TensorT<T> soft_moe_forward(const TensorT<T>& x, const TensorT<T>& phi,
                            const ExpertStackT<T>& experts, std::int64_t slots_per_expert,
                            RoutingTraceT<T>* trace = nullptr);

// Per-expert output contribution: sum over tokens of the expert's slots'
// combine weights, averaged over the batch. Sums to n across experts.
std::vector<double> contribution_stats(const RoutingTrace& trace);

// One slot's dispatch weights over the patch grid, [grid_h, grid_w].
Tensor attention_map(const RoutingTrace& trace, std::int64_t expert, std::int64_t slot,
                     std::int64_t batch_index = 0);

}  // namespace moekit
