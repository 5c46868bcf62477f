#pragma once

// Pretraining and fine-tuning loops, metrics log, evaluation smoothing and
// the pretraining-data ablation presets.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "seqpolicy/checkpoint.hpp"
#include "seqpolicy/datastore.hpp"
#include "seqpolicy/envs.hpp"
#include "seqpolicy/model.hpp"
#include "seqpolicy/optim.hpp"

namespace seqpolicy {

struct TrainConfig {
  ScheduleConfig schedule;
  OptimizerConfig optimizer;
  int64_t steps = 1000;
  uint64_t seed = 0;
  Mode mode = Mode::kPretrain;
  int64_t checkpoint_every = 500;
  std::string checkpoint_dir;  // empty: no periodic checkpoints
  bool prompting = true;

  // Fine-tuning defaults: Adam without decay, constant 1e-5, batch 64.
  static TrainConfig finetune_defaults() {
    TrainConfig c;
    c.mode = Mode::kFinetune;
    c.steps = 10'000;
    c.schedule.constant = true;
    c.schedule.lr_max = 1e-5;
    c.optimizer.weight_decay = 0.0;
    c.optimizer.batch = 64;
    c.prompting = false;
    return c;
  }

  void validate() const {
    schedule.validate();
    optimizer.validate();
    require(steps >= 0, ErrorCode::kConfig, "steps must be >= 0");
    require(mode != Mode::kEval, ErrorCode::kConfig, "training mode must be pretrain or finetune");
    require(checkpoint_every > 0, ErrorCode::kConfig, "checkpoint_every must be positive");
  }
};

struct MetricsRecord {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;                              // mean over masked tokens
  double loss_sum = 0.0;                          // summed over masked tokens
  std::map<std::string, double> loss_by_dataset;  // summed, per dataset
  uint64_t tokens = 0;                            // cumulative non-padding elements
  uint64_t masked = 0;                            // masked targets in this step
};

inline std::string format_metrics(const MetricsRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "step=%" PRId64 " lr=%.9e loss=%.9e loss_sum=%.9e tokens=%" PRIu64 " masked=%" PRIu64, r.step,
                r.lr, r.loss, r.loss_sum, r.tokens, r.masked);
  std::string line = buf;
  for (const auto& [name, v] : r.loss_by_dataset) {
    std::snprintf(buf, sizeof buf, " loss[%s]=%.9e", name.c_str(), v);
    line += buf;
  }
  return line;
}

// Append-only text log, one record per line.
class MetricsLog {
 public:
  void append(MetricsRecord r) {
    text_ += format_metrics(r) + "\n";
    records_.push_back(std::move(r));
  }
  void note(const std::string& line) { text_ += "# " + line + "\n"; }
  const std::vector<MetricsRecord>& records() const { return records_; }
  const std::string& text() const { return text_; }
  void write(const std::string& path) const { write_file(path, text_); }

  // Mean loss over the last `window` records.
  double smoothed_loss(size_t window) const {
    require(!records_.empty(), ErrorCode::kEmptyInput, "no metrics recorded");
    const size_t n = std::min(window, records_.size());
    double sum = 0.0;
    for (size_t i = records_.size() - n; i < records_.size(); ++i) sum += records_[i].loss;
    return sum / static_cast<double>(n);
  }

 private:
  std::vector<MetricsRecord> records_;
  std::string text_;
};

// Final score: the maximum over evaluations of the trailing moving average
// of `window` scores; early evaluations average what exists.
inline double eval_protocol(std::span<const double> scores, size_t window = 5) {
  require(!scores.empty(), ErrorCode::kEmptyInput, "evaluation protocol needs at least one score");
  require(window >= 1, ErrorCode::kDomain, "window must be >= 1");
  double best = -INFINITY;
  for (size_t i = 0; i < scores.size(); ++i) {
    const size_t lo = i + 1 >= window ? i + 1 - window : 0;
    double sum = 0.0;
    for (size_t j = lo; j <= i; ++j) sum += scores[j];
    best = std::max(best, sum / static_cast<double>(i + 1 - lo));
  }
  return best;
}

// One optimizer update per call; owns optimizer state and the
// regularization stream (stochastic depth / dropout).
class Trainer {
 public:
  Trainer(Model<float>& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), reg_rng_(Rng::derive_seed(cfg_.seed, 1)) {
    cfg_.validate();
  }

  MetricsRecord step(const MaskedBatch& batch) {
    const double lr = lr_schedule(step_, cfg_.schedule);
    model_.params().zero_grad();
    const BatchLoss loss = model_.loss(batch, cfg_.mode, &reg_rng_, true);
    if (!(std::isfinite(loss.total.sum)))
      fail(ErrorCode::kNumeric, "non-finite loss at step " + std::to_string(step_));
    optimizer_step(model_.params(), adam_, cfg_.optimizer, lr);
    for (const auto& item : batch.items) tokens_ += item.unpadded_size();
    MetricsRecord r;
    r.step = ++step_;
    r.lr = lr;
    r.loss = loss.total.mean();
    r.loss_sum = loss.total.sum;
    for (const auto& [name, v] : loss.per_dataset) r.loss_by_dataset[name] = v.sum;
    r.tokens = tokens_;
    r.masked = loss.total.count;
    return r;
  }

  int64_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  AdamState<float>& optimizer() { return adam_; }
  Rng& regularization_rng() { return reg_rng_; }
  Model<float>& model() { return model_; }

  Checkpoint checkpoint(const Rng* data_rng = nullptr) const {
    std::map<std::string, std::string> streams{{"regularization", reg_rng_.state()}};
    if (data_rng) streams["data"] = data_rng->state();
    Checkpoint c = make_checkpoint(model_, step_, &adam_, std::move(streams));
    return c;
  }

  // Restores step count, optimizer state and streams from `c`.
  void resume(const Checkpoint& c, Rng* data_rng = nullptr) {
    step_ = c.step;
    if (c.optimizer) adam_ = *c.optimizer;
    if (auto it = c.streams.find("regularization"); it != c.streams.end()) reg_rng_.restore(it->second);
    if (auto it = c.streams.find("data"); data_rng && it != c.streams.end()) data_rng->restore(it->second);
  }

 private:
  Model<float>& model_;
  TrainConfig cfg_;
  Rng reg_rng_;
  AdamState<float> adam_;
  int64_t step_ = 0;
  uint64_t tokens_ = 0;
};

struct TrainResult {
  MetricsLog log;
  int64_t steps = 0;
  double prompted_fraction = 0.0;
  std::vector<std::pair<int64_t, double>> evals;  // (step, score)
  double final_score = 0.0;
};

using StepHook = std::function<void(int64_t step, const MetricsRecord&)>;

// Writes a checkpoint every cfg.checkpoint_every steps when a directory is
// configured; on abort, dumps the last good state before rethrowing.
inline TrainResult pretrain(Model<float>& model, MixtureSampler& sampler, const TrainConfig& cfg,
                            const StepHook& hook = {}) {
  Trainer trainer(model, cfg);
  TrainResult out;
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);
  for (int64_t s = 0; s < cfg.steps; ++s) {
    const MaskedBatch batch = sampler.next_batch(static_cast<size_t>(cfg.optimizer.batch));
    MetricsRecord r;
    try {
      r = trainer.step(batch);
    } catch (const Error&) {
      if (!cfg.checkpoint_dir.empty())
        save_checkpoint(cfg.checkpoint_dir + "/abort.sqpc", trainer.checkpoint(&sampler.rng()));
      throw;
    }
    out.log.append(r);
    if (hook) hook(r.step, r);
    if (!cfg.checkpoint_dir.empty() && (r.step % cfg.checkpoint_every == 0 || r.step == cfg.steps)) {
      const Checkpoint c = trainer.checkpoint(&sampler.rng());
      save_checkpoint(cfg.checkpoint_dir + "/step_" + std::to_string(r.step) + ".sqpc", c);
      save_checkpoint(cfg.checkpoint_dir + "/latest.sqpc", c);
    }
  }
  out.steps = trainer.steps_done();
  out.prompted_fraction = sampler.prompt_stats().prompted_fraction();
  return out;
}

using EvalHook = std::function<double(const Model<float>&, int64_t step)>;

// Fine-tunes on demonstrations of a single task. `evaluate` runs every
// `eval_every` steps (and after the last step); the final score applies
// eval_protocol to those scores.
inline TrainResult finetune(Model<float>& model, std::vector<Episode> demos, const TrainConfig& cfg,
                            size_t seq_len, int64_t eval_every = 100, const EvalHook& evaluate = {},
                            const StepHook& hook = {}) {
  require(!demos.empty(), ErrorCode::kEmptyInput, "fine-tuning needs demonstrations");
  for (const auto& ep : demos)
    require(ep.task_id == demos.front().task_id, ErrorCode::kSchema, "fine-tuning demos must share one task");
  require(cfg.mode == Mode::kFinetune, ErrorCode::kConfig, "fine-tuning config must use finetune mode");
  require(eval_every > 0, ErrorCode::kConfig, "eval_every must be positive");
  TrainResult out;
  if (cfg.steps == 0) return out;

  DatasetManifest manifest;
  manifest.name = "finetune";
  std::vector<Dataset> data;
  data.push_back(Dataset::from_episodes(manifest, std::move(demos)));
  MixtureSampler sampler(std::move(data), seq_len, Rng::derive_seed(cfg.seed, 0), PromptConfig{},
                         cfg.prompting);
  Trainer trainer(model, cfg);
  std::vector<double> scores;
  for (int64_t s = 0; s < cfg.steps; ++s) {
    const MetricsRecord r = trainer.step(sampler.next_batch(static_cast<size_t>(cfg.optimizer.batch)));
    out.log.append(r);
    if (hook) hook(r.step, r);
    if (evaluate && (r.step % eval_every == 0 || r.step == cfg.steps)) {
      const double score = evaluate(model, r.step);
      scores.push_back(score);
      out.evals.emplace_back(r.step, score);
      char buf[96];
      std::snprintf(buf, sizeof buf, "eval step=%" PRId64 " score=%.9e", r.step, score);
      out.log.note(buf);
    }
  }
  out.steps = trainer.steps_done();
  if (!scores.empty()) out.final_score = eval_protocol(scores);
  return out;
}

// ---------------------------------------------------------------------------
// Toy corpus and ablation presets

// Expert episodes for a toy task (or the synthetic text corpus), filtered to
// 80% of the expert return and flattened.
inline Dataset toy_dataset(const std::string& task, size_t episodes, uint64_t seed, double weight = 1.0) {
  std::vector<Episode> eps;
  if (task == "text") {
    eps = synthetic_text_episodes(episodes, seed);
  } else {
    auto env = make_env(task);
    eps = collect_expert_episodes(*env, episodes, seed);
    eps = filter_episodes(std::move(eps), 0.8).kept;
  }
  DatasetManifest m;
  m.name = task;
  m.sample_weight = weight;
  return Dataset::from_episodes(std::move(m), std::move(eps));
}

enum class AblationArm { kAllData, kSameDomain, kNoControl, kScratch };

inline std::string to_string(AblationArm a) {
  switch (a) {
    case AblationArm::kAllData:
      return "all_data";
    case AblationArm::kSameDomain:
      return "same_domain";
    case AblationArm::kNoControl:
      return "no_control";
    case AblationArm::kScratch:
      return "scratch";
  }
  return "?";
}

inline AblationArm ablation_arm_from_name(const std::string& name) {
  for (auto a :
       {AblationArm::kAllData, AblationArm::kSameDomain, AblationArm::kNoControl, AblationArm::kScratch})
    if (to_string(a) == name) return a;
  fail(ErrorCode::kConfig, "unknown ablation preset '" + name + "'");
}

// Pretraining tasks per arm for the GridReach few-shot target. The target
// task itself is held out; same-domain data is GridReach restricted to the
// left goal columns.
inline std::vector<std::string> ablation_tasks(AblationArm arm) {
  switch (arm) {
    case AblationArm::kAllData:
      return {"gridreach_partial", "bandit_a", "bandit_b", "linereacher", "text"};
    case AblationArm::kSameDomain:
      return {"gridreach_partial"};
    case AblationArm::kNoControl:
      return {"text"};
    case AblationArm::kScratch:
      return {};
  }
  return {};
}

}  // namespace seqpolicy
