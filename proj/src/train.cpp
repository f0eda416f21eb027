// SPDX-License-Identifier: Apache-2.0
#include "moekit/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "moekit/spheromoe.hpp"

namespace moekit {

namespace {

using json = nlohmann::json;

bool wants_decay(const std::string& name, const Tensor& p) {
  if (name == "cls_token" || name == "pos_embed") return false;
  return p.rank() >= 2;
}

std::vector<std::vector<float>> snapshot_params(Model& model) {
  std::vector<std::vector<float>> snap;
  model.visit_params([&](const std::string&, Tensor& p) { snap.push_back(p.data); });
  return snap;
}

void restore_params(Model& model, const std::vector<std::vector<float>>& snap) {
  std::size_t i = 0;
  model.visit_params([&](const std::string&, Tensor& p) { p.data = snap[i++]; });
}

// Per-epoch router telemetry from one eval batch.
void collect_moe_telemetry(Model& model, const Dataset& eval_set, std::int64_t batch_size,
                           EpochRecord& rec) {
  if (model.cfg.moe_from == 0) return;
  for (const auto& blk : model.blocks) {
    if (blk.kind == BlockKind::sphero) rec.temperatures.push_back(blk.sphero->temperature_used());
  }
  const std::int64_t take = std::min<std::int64_t>(batch_size, eval_set.size());
  if (take == 0) return;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(take));
  for (std::int64_t i = 0; i < take; ++i) idx[i] = i;
  std::vector<RoutingTrace> traces;
  Model::Hooks hooks;
  hooks.traces = &traces;
  model.forward(batch_images(eval_set, idx), false, &hooks);
  for (const RoutingTrace& trace : traces) {
    const std::vector<double> contrib = contribution_stats(trace);
    const std::int64_t core = trace.e_core;
    double core_sum = 0.0, univ_sum = 0.0;
    for (std::size_t e = 0; e < contrib.size(); ++e) {
      (static_cast<std::int64_t>(e) < core ? core_sum : univ_sum) += contrib[e];
    }
    rec.core_contribution.push_back(core_sum);
    rec.univ_contribution.push_back(univ_sum);
  }
}

}  // namespace

void TrainSchedule::validate() const {
  require(epochs >= 1 && batch_size >= 1, Err::InvalidSpec, "epochs and batch size must be >= 1");
  require(warmup_epochs >= 0 && warmup_epochs <= epochs, Err::InvalidSpec,
          "warmup must fit inside the schedule");
  require(std::isfinite(base_lr) && base_lr >= 0.0, Err::InvalidSpec, "learning rate must be >= 0");
  require(label_smoothing >= 0.0 && label_smoothing < 1.0, Err::InvalidSpec,
          "label smoothing must be in [0, 1)");
}

void write_runlog(const std::string& path, const RunLog& log) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Err::IoError, "cannot open " + path);
  json header = log.header;
  header["type"] = "header";
  out << header.dump() << "\n";
  for (const EpochRecord& r : log.epochs) {
    json e;
    e["type"] = "epoch";
    e["epoch"] = r.epoch;
    e["train_loss"] = r.train_loss;
    e["eval_acc"] = r.eval_acc;
    e["temperatures"] = r.temperatures;
    e["core_contribution"] = r.core_contribution;
    e["univ_contribution"] = r.univ_contribution;
    out << e.dump() << "\n";
  }
  require(out.good(), Err::IoError, "write failed for " + path);
}

RunLog read_runlog(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Err::IoError, "cannot open " + path);
  RunLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    require(!j.is_discarded(), Err::ParseError, "run log line is not valid JSON");
    const std::string type = j.value("type", "");
    if (type == "header") {
      log.header = j;
    } else if (type == "epoch") {
      EpochRecord r;
      r.epoch = j.at("epoch").get<std::int64_t>();
      r.train_loss = j.at("train_loss").get<double>();
      r.eval_acc = j.at("eval_acc").get<double>();
      r.temperatures = j.value("temperatures", std::vector<double>{});
      r.core_contribution = j.value("core_contribution", std::vector<double>{});
      r.univ_contribution = j.value("univ_contribution", std::vector<double>{});
      log.epochs.push_back(std::move(r));
    } else {
      fail(Err::ParseError, "unknown run log record type");
    }
  }
  return log;
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void AdamW::attach(Model& model) {
  slots_.clear();
  t_ = 0;
  model.visit_params([&](const std::string& name, Tensor& p) {
    Slot s;
    s.param = &p;
    s.m.assign(p.data.size(), 0.0f);
    s.v.assign(p.data.size(), 0.0f);
    s.decay = wants_decay(name, p);
    slots_.push_back(std::move(s));
  });
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (Slot& s : slots_) {
    Tensor& p = *s.param;
    p.ensure_grad();
    const std::vector<float>& g = *p.grad;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double gi = g[i];
      s.m[i] = static_cast<float>(beta1_ * s.m[i] + (1.0 - beta1_) * gi);
      s.v[i] = static_cast<float>(beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi);
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + eps_);
      if (s.decay) update += weight_decay_ * p.data[i];
      p.data[i] = static_cast<float>(p.data[i] - lr * update);
    }
  }
}

double lr_at(const TrainSchedule& sched, std::int64_t step, std::int64_t steps_per_epoch) {
  const std::int64_t warmup_steps = sched.warmup_epochs * steps_per_epoch;
  const std::int64_t total_steps = sched.epochs * steps_per_epoch;
  if (warmup_steps > 0 && step < warmup_steps) {
    return sched.base_lr * double(step + 1) / double(warmup_steps);
  }
  if (!sched.cosine) return sched.base_lr;
  const double progress =
      total_steps > warmup_steps
          ? double(step - warmup_steps) / double(total_steps - warmup_steps)
          : 0.0;
  return sched.base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * std::min(1.0, progress)));
}

TrainResult train_model(Model& model, const Dataset& train, const Dataset& eval_set,
                        const TrainSchedule& sched) {
  sched.validate();
  require(train.size() > 0 && eval_set.size() > 0, Err::EmptyCalibrationSet,
          "training needs non-empty train and eval sets");

  const std::int64_t steps_per_epoch = std::max<std::int64_t>(1, train.size() / sched.batch_size);
  AdamW opt(0.9, 0.999, 1e-8, sched.weight_decay);
  opt.attach(model);

  TrainResult result;
  result.log.header["schedule"] = {{"epochs", sched.epochs},
                                   {"batch_size", sched.batch_size},
                                   {"base_lr", sched.base_lr},
                                   {"weight_decay", sched.weight_decay},
                                   {"warmup_epochs", sched.warmup_epochs},
                                   {"cosine", sched.cosine},
                                   {"label_smoothing", sched.label_smoothing},
                                   {"seed", sched.seed}};
  result.log.header["router"] = router_kind_name(model.cfg.router);
  result.log.header["params"] = model.param_count();

  std::vector<std::vector<float>> last_good = snapshot_params(model);
  std::int64_t global_step = 0;

  for (std::int64_t epoch = 1; epoch <= sched.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::int64_t> order = epoch_order(train.size(), sched.seed, epoch);
    double loss_sum = 0.0;

    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<std::int64_t> idx(order.begin() + s * sched.batch_size,
                                    order.begin() + std::min<std::int64_t>(
                                                        (s + 1) * sched.batch_size, train.size()));
      model.set_train_step(global_step);
      Tensor images = batch_images(train, idx);
      const std::vector<std::int32_t> labels = batch_labels(train, idx);
      Tensor logits = model.forward(images, true);
      const double loss = cross_entropy(logits, labels, sched.label_smoothing);
      if (!std::isfinite(loss)) {
        restore_params(model, last_good);
        result.diverged = true;
        result.diverged_epoch = epoch;
        return result;
      }
      loss_sum += loss;
      model.zero_grads();
      model.backward(cross_entropy_backward(logits, labels, sched.label_smoothing));
      opt.step(lr_at(sched, global_step, steps_per_epoch));
      for (auto& blk : model.blocks) {
        if (blk.kind == BlockKind::sphero) {
          blk.sphero->router.clamp_temperature(blk.sphero->cfg.t_min, blk.sphero->cfg.t_max);
        }
      }
      ++global_step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(steps_per_epoch);
    rec.eval_acc = evaluate(model, eval_set, sched.batch_size);
    collect_moe_telemetry(model, eval_set, sched.batch_size, rec);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(std::move(rec));
    last_good = snapshot_params(model);
  }
  return result;
}

double evaluate(Model& model, const Dataset& data, std::int64_t batch_size) {
  require(data.size() > 0, Err::EmptyCalibrationSet, "evaluation set is empty");
  std::int64_t correct = 0;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const std::int64_t end = std::min(start + batch_size, data.size());
    std::vector<std::int64_t> idx(static_cast<std::size_t>(end - start));
    for (std::int64_t i = start; i < end; ++i) idx[i - start] = i;
    Tensor logits = model.forward(batch_images(data, idx), false);
    const auto labels = batch_labels(data, idx);
    const std::int64_t classes = logits.shape[1];
    for (std::int64_t r = 0; r < logits.shape[0]; ++r) {
      const float* row = logits.ptr() + r * classes;
      std::int64_t best = 0;
      for (std::int64_t c = 1; c < classes; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (best == labels[static_cast<std::size_t>(r)]) ++correct;
    }
  }
  return double(correct) / double(data.size());
}

namespace {

std::optional<std::int64_t> first_epoch_reaching(const RunLog& log, double target) {
  for (const EpochRecord& r : log.epochs) {
    if (r.eval_acc >= target) return r.epoch;
  }
  return std::nullopt;
}

}  // namespace

ConvergenceResult compare_convergence(const RunLog& a, const RunLog& b, double target_acc) {
  ConvergenceResult res;
  res.epoch_a = first_epoch_reaching(a, target_acc);
  res.epoch_b = first_epoch_reaching(b, target_acc);
  if (res.epoch_a && res.epoch_b) {
    res.ratio = double(*res.epoch_b) / double(*res.epoch_a);
  }
  return res;
}

double compare_convergence_strict(const RunLog& a, const RunLog& b, double target_acc) {
  const ConvergenceResult res = compare_convergence(a, b, target_acc);
  std::string missing;
  if (!res.epoch_a) missing += "A";
  if (!res.epoch_b) missing += missing.empty() ? "B" : ", B";
  require(res.ratio.has_value(), Err::TargetNeverReached,
          "target accuracy never reached by run(s): " + missing);
  return *res.ratio;
}

}  // namespace moekit
