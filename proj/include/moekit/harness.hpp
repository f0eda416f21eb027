// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moekit/recycling.hpp"
#include "moekit/train.hpp"

namespace moekit {

struct PretrainResult {
  DenseCheckpoint checkpoint;
  RunLog log;
  bool diverged = false;
};

PretrainResult pretrain(const ModelConfig& cfg, std::uint64_t init_seed, const Dataset& train,
                        const Dataset& eval_set, const TrainSchedule& sched);

struct FinetuneResult {
  Model model;
  RunLog log;
  bool diverged = false;
};

// Builds the successor from the bundle and fine-tunes it. A zero
// noise_decay_steps is resolved to half the schedule's total step count.
FinetuneResult finetune(const MoEInitBundle& bundle, const SuccessorOptions& opts,
                        const Dataset& train, const Dataset& eval_set,
                        const TrainSchedule& sched);

FinetuneResult finetune_model(Model model, const Dataset& train, const Dataset& eval_set,
                              const TrainSchedule& sched);

// Same architecture as the bundle's successor, freshly initialized: the
// from-scratch baseline for convergence and ablation comparisons.
Model build_scratch_successor(const MoEInitBundle& shape_ref, const SuccessorOptions& opts);

struct AblateRow {
  std::string label;
  std::vector<double> accs;  // one per seed
  double mean = 0.0;
  double stddev = 0.0;
};

AblateRow summarize(const std::string& label, const std::vector<double>& accs);
void write_ablation_csv(const std::string& path, const std::vector<AblateRow>& rows);

// Per-expert contribution CSVs and per-expert attention maps (PGM P5,
// min-max scaled per map) for every MoE layer of the model.
std::vector<std::string> inspect(Model& model, const Tensor& images, const std::string& out_dir);

void write_pgm(const std::string& path, const Tensor& map);

}  // namespace moekit
