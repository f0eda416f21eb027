// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moekit/dataset.hpp"
#include "moekit/vit.hpp"

namespace moekit {

struct TrainSchedule {
  std::int64_t epochs = 50;
  std::int64_t batch_size = 128;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  std::int64_t warmup_epochs = 2;
  bool cosine = true;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double eval_acc = 0.0;
  std::vector<double> temperatures;       // one per MoE layer
  std::vector<double> core_contribution;  // per MoE layer, summed over core experts
  std::vector<double> univ_contribution;
  double wall_seconds = 0.0;  // console-only; not serialized, so logs stay reproducible
};

struct RunLog {
  nlohmann::json header;
  std::vector<EpochRecord> epochs;
};

// Line-delimited JSON records: one header line, one line per epoch.
void write_runlog(const std::string& path, const RunLog& log);
RunLog read_runlog(const std::string& path);

// Decoupled weight decay on matrix-shaped parameters; embeddings and all
// vectors (biases, norms, log-temperature) are exempt.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.05);

  void attach(Model& model);
  void step(double lr);

 private:
  struct Slot {
    Tensor* param = nullptr;
    std::vector<float> m, v;
    bool decay = false;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
};

double lr_at(const TrainSchedule& sched, std::int64_t step, std::int64_t steps_per_epoch);

struct TrainResult {
  RunLog log;
  bool diverged = false;
  std::int64_t diverged_epoch = -1;  // epoch whose step produced a non-finite loss
};

// Full training loop with per-epoch evaluation and telemetry. On divergence
// the model is restored to the last finished epoch's parameters.
TrainResult train_model(Model& model, const Dataset& train, const Dataset& eval_set,
                        const TrainSchedule& sched);

double evaluate(Model& model, const Dataset& data, std::int64_t batch_size = 128);

struct ConvergenceResult {
  std::optional<std::int64_t> epoch_a;
  std::optional<std::int64_t> epoch_b;
  std::optional<double> ratio;  // first-epoch-reaching-target(B) / (A)
};

ConvergenceResult compare_convergence(const RunLog& a, const RunLog& b, double target_acc);

// Throwing variant: TargetNeverReached names the runs that fell short.
double compare_convergence_strict(const RunLog& a, const RunLog& b, double target_acc);

}  // namespace moekit
