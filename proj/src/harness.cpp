// SPDX-License-Identifier: Apache-2.0
#include "moekit/harness.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace moekit {

PretrainResult pretrain(const ModelConfig& cfg, std::uint64_t init_seed, const Dataset& train,
                        const Dataset& eval_set, const TrainSchedule& sched) {
  Model model = build_predecessor<float>(cfg, init_seed);
  TrainResult tr = train_model(model, train, eval_set, sched);
  PretrainResult result;
  result.checkpoint = model_to_checkpoint(model);
  result.log = std::move(tr.log);
  result.log.header["phase"] = "pretrain";
  result.diverged = tr.diverged;
  return result;
}

FinetuneResult finetune(const MoEInitBundle& bundle, const SuccessorOptions& opts,
                        const Dataset& train, const Dataset& eval_set,
                        const TrainSchedule& sched) {
  SuccessorOptions resolved = opts;
  if (resolved.noise_decay_steps == 0) {
    const std::int64_t steps_per_epoch =
        std::max<std::int64_t>(1, train.size() / sched.batch_size);
    resolved.noise_decay_steps = std::max<std::int64_t>(1, sched.epochs * steps_per_epoch / 2);
  }
  return finetune_model(build_successor<float>(bundle, resolved), train, eval_set, sched);
}

FinetuneResult finetune_model(Model model, const Dataset& train, const Dataset& eval_set,
                              const TrainSchedule& sched) {
  TrainResult tr = train_model(model, train, eval_set, sched);
  FinetuneResult result{std::move(model), std::move(tr.log), tr.diverged};
  result.log.header["phase"] = "finetune";
  return result;
}

Model build_scratch_successor(const MoEInitBundle& shape_ref, const SuccessorOptions& opts) {
  Model model = build_successor<float>(shape_ref, opts);
  Rng rng(opts.seed + 0x5C8A7C11ull);
  model.visit_params([&](const std::string& name, Tensor& p) {
    const auto tail = name.substr(name.rfind('.') + 1);
    if (tail == "gamma") {
      p = Tensor::full(p.shape, 1.0f);
    } else if (tail == "beta" || tail == "b" || tail == "key_b" || tail == "qkv_b" ||
               tail == "proj_b" || tail == "fc1_b" || tail == "fc2_b" || tail == "b1" ||
               tail == "b2" || tail == "patch_embed.b") {
      p = Tensor::zeros(p.shape);
    } else if (tail == "log_t") {
      // keep the configured starting temperature
    } else if (name == "head.w") {
      p = Tensor::zeros(p.shape);
    } else {
      p = Tensor::randn(p.shape, rng, 0.02);
    }
  });
  // Router queries keep their unit-scale initialization convention.
  for (auto& blk : model.blocks) {
    if (blk.kind == BlockKind::sphero) {
      blk.sphero->router.queries = Tensor::randn(
          blk.sphero->router.queries.shape, rng, 1.0 / std::sqrt(double(model.cfg.d)));
    } else if (blk.kind == BlockKind::soft) {
      blk.soft->phi =
          Tensor::randn(blk.soft->phi.shape, rng, 1.0 / std::sqrt(double(model.cfg.d)));
    }
  }
  return model;
}

AblateRow summarize(const std::string& label, const std::vector<double>& accs) {
  AblateRow row;
  row.label = label;
  row.accs = accs;
  for (double a : accs) row.mean += a;
  row.mean /= double(accs.size());
  double var = 0.0;
  for (double a : accs) var += (a - row.mean) * (a - row.mean);
  row.stddev = accs.size() > 1 ? std::sqrt(var / double(accs.size() - 1)) : 0.0;
  return row;
}

void write_ablation_csv(const std::string& path, const std::vector<AblateRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Err::IoError, "cannot open " + path);
  std::size_t max_seeds = 0;
  for (const auto& r : rows) max_seeds = std::max(max_seeds, r.accs.size());
  out << "strategy,mean_acc,std_acc";
  for (std::size_t i = 0; i < max_seeds; ++i) out << ",acc_seed" << i;
  out << "\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.label;
    std::snprintf(buf, sizeof(buf), ",%.6f,%.6f", r.mean, r.stddev);
    out << buf;
    for (double a : r.accs) {
      std::snprintf(buf, sizeof(buf), ",%.6f", a);
      out << buf;
    }
    out << "\n";
  }
  require(out.good(), Err::IoError, "write failed for " + path);
}

void write_pgm(const std::string& path, const Tensor& map) {
  require(map.rank() == 2, Err::ShapeMismatch, "pgm map must be rank 2");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Err::IoError, "cannot open " + path);
  out << "P5\n" << map.shape[1] << " " << map.shape[0] << "\n255\n";
  float lo = map.data[0], hi = map.data[0];
  for (float v : map.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float span = hi - lo;
  for (float v : map.data) {
    const double scaled = span > 0 ? double(v - lo) / span : 0.0;
    const std::uint8_t byte = static_cast<std::uint8_t>(std::lround(scaled * 255.0));
    out.write(reinterpret_cast<const char*>(&byte), 1);
  }
  require(out.good(), Err::IoError, "write failed for " + path);
}

std::vector<std::string> inspect(Model& model, const Tensor& images, const std::string& out_dir) {
  require(model.cfg.moe_from != 0, Err::InvalidSpec, "inspect needs a model with MoE layers");
  std::filesystem::create_directories(out_dir);

  std::vector<RoutingTrace> traces;
  Model::Hooks hooks;
  hooks.traces = &traces;
  model.forward(images, false, &hooks);

  std::vector<std::string> files;
  char name[128];
  const std::string contrib_path = out_dir + "/contributions.csv";
  std::ofstream csv(contrib_path, std::ios::trunc);
  require(csv.good(), Err::IoError, "cannot open " + contrib_path);
  csv << "layer,expert,path,contribution\n";

  std::int64_t layer = model.cfg.moe_from;  // 1-indexed block numbers in filenames
  for (const RoutingTrace& trace : traces) {
    const std::vector<double> contrib = contribution_stats(trace);
    for (std::size_t e = 0; e < contrib.size(); ++e) {
      const bool core = static_cast<std::int64_t>(e) < trace.e_core;
      char row[96];
      std::snprintf(row, sizeof(row), "%lld,%zu,%s,%.8f\n", static_cast<long long>(layer), e,
                    core ? "core" : "univ", contrib[e]);
      csv << row;
      for (std::int64_t s = 0; s < trace.slots_per_expert; ++s) {
        std::snprintf(name, sizeof(name), "%s/layer%02lld_expert%03zu_slot%lld.pgm",
                      out_dir.c_str(), static_cast<long long>(layer), e,
                      static_cast<long long>(s));
        write_pgm(name, attention_map(trace, static_cast<std::int64_t>(e), s));
        files.emplace_back(name);
      }
    }
    ++layer;
  }
  require(csv.good(), Err::IoError, "write failed for " + contrib_path);
  files.push_back(contrib_path);
  return files;
}

}  // namespace moekit
