// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance --only 6   run one

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "seqpolicy/seqpolicy.hpp"

using namespace seqpolicy;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1: codecs -------------------------------------------------------------

Outcome codec_round_trips() {
  const auto t0 = std::chrono::steady_clock::now();
  size_t bad_bins = 0;
  for (int32_t t = 32000; t < 33024; ++t) bad_bins += bin_continuous(unbin_continuous(TokenId(t))).value() != t;

  Rng rng(1);
  double worst_mu = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double x = rng.uniform(-256.0, 256.0);
    const double back = mu_law_expand(mu_law_compand(x));
    worst_mu = std::max(worst_mu, std::abs(back - x) / std::max(std::abs(x), 1e-300));
  }

  size_t bad_discrete = 0;
  const auto scalar = TensorSchema::discrete("d", {1});
  for (int32_t v = 0; v < 1024; ++v) {
    const std::vector<int32_t> in{v};
    bad_discrete += decode_discrete(encode_discrete(in, scalar), scalar) != in;
  }
  for (int i = 0; i < 2000; ++i) {
    const int64_t rows = 1 + static_cast<int64_t>(rng.below(4)), cols = 1 + static_cast<int64_t>(rng.below(5));
    const auto s = TensorSchema::discrete("g", {rows, cols});
    std::vector<int32_t> in;
    for (int64_t k = 0; k < rows * cols; ++k) in.push_back(static_cast<int32_t>(rng.below(1024)));
    bad_discrete += decode_discrete(encode_discrete(in, s), s) != in;
  }

  size_t bad_text = 0;
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    const size_t n = rng.below(40);
    for (size_t k = 0; k < n; ++k) s.push_back(static_cast<char>(rng.below(256)));
    bad_text += decode_text(encode_text(s)) != s;
  }
  const double secs = seconds_since(t0);
  return {bad_bins == 0 && worst_mu <= 1e-9 && bad_discrete == 0 && bad_text == 0 && secs < 5.0,
          fmt("bin mismatches %zu, mu-law worst rel err %.3g, discrete %zu, text %zu, %.2f s", bad_bins, worst_mu,
              bad_discrete, bad_text, secs)};
}

// ---- 2: patch positions ----------------------------------------------------

Outcome patch_worked_example() {
  const Image img{64, 80, 3, std::vector<uint8_t>(64 * 80 * 3, 128)};
  const auto patches = image_to_patches(img);
  const ImagePatch& p = patches.at(1 * 5 + 2);
  const int row = patch_position_index(p.rows, Mode::kEval, nullptr);
  const int col = patch_position_index(p.cols, Mode::kEval, nullptr);
  const int row_q = patch_position_index({0.25, 0.5}, Mode::kEval, nullptr);
  const int col_q = patch_position_index({0.4, 0.6}, Mode::kEval, nullptr);
  return {patches.size() == 20 && row == 48 && col == 64 && row_q == 48 && col_q == 64,
          fmt("%zu patches, patch (1,2) row %d col %d, quoted intervals row %d col %d", patches.size(), row, col,
              row_q, col_q)};
}

// ---- 3: layout identity ----------------------------------------------------

Outcome layout_identity() {
  Rng rng(3);
  size_t bad = 0;
  const size_t cases = 1500;
  for (size_t i = 0; i < cases; ++i) {
    const auto c = fixture::random_layout_case(rng);
    const ElementSequence seq = flatten_episode(c.episode);
    bad += static_cast<int64_t>(seq.size()) != c.T * (c.k + c.m + c.n + 1 + c.A) ||
           static_cast<int64_t>(seq.mask_count()) != c.T * (c.k + c.A);
  }
  return {bad == 0, fmt("%zu random schemas, %zu violations", cases, bad)};
}

// ---- 4: loss and gradients -------------------------------------------------

Outcome loss_and_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(4);
  double worst_loss = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int L = 1 + static_cast<int>(rng.below(6)), V = 2 + static_cast<int>(rng.below(9));
    Mat<double> logits(L, V);
    std::vector<std::vector<double>> rows(static_cast<size_t>(L), std::vector<double>(static_cast<size_t>(V)));
    std::vector<int32_t> targets;
    std::vector<uint8_t> mask;
    std::vector<int> t_int, m_int;
    for (int l = 0; l < L; ++l) {
      for (int v = 0; v < V; ++v) rows[l][v] = logits(l, v) = rng.uniform(-6, 6);
      targets.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(V))));
      mask.push_back(static_cast<uint8_t>(rng.below(2)));
      t_int.push_back(targets.back());
      m_int.push_back(mask.back());
    }
    const double got = masked_nll_loss<double>(logits, targets, mask).sum;
    worst_loss = std::max(worst_loss, std::abs(got - oracle::cross_entropy(rows, t_int, m_int)));
  }

  ModelConfig cfg = ModelConfig::tiny();
  cfg.image_channels = 3;
  Model<double> model(cfg, 5);
  gradcheck::jitter(model, 0.05, 6);
  const auto probe = gradcheck::make_probe(3);
  const auto eval = gradcheck::check(model, probe, Mode::kEval, 0, 8);
  const auto pre = gradcheck::check(model, probe, Mode::kPretrain, 7, 4);
  const auto fine = gradcheck::check(model, probe, Mode::kFinetune, 8, 4);
  const double worst = std::max({eval.worst, pre.worst, fine.worst});
  const std::string where = worst == eval.worst ? eval.where : worst == pre.worst ? pre.where : fine.where;
  const double secs = seconds_since(t0);
  const bool covered = eval.unchecked.empty() && pre.unchecked.empty() && fine.unchecked.empty();
  return {worst_loss <= 1e-10 && worst <= 1.0 && covered && secs < 120.0,
          fmt("loss oracle max diff %.3g; %zu FD probes over %zu tensors, worst ratio %.3f (%s); %.1f s", worst_loss,
              eval.checked + pre.checked + fine.checked, model.params().all().size(), worst, where.c_str(), secs)};
}

// ---- 5: filtering ----------------------------------------------------------

Outcome expert_filtering() {
  const FilterResult res = filter_episodes(fixture::episodes_with_returns(fixture::one_to(20)));
  const auto brute = oracle::brute_expert_return(fixture::one_to(20));
  bool idempotent = true;
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> r(1 + rng.below(200));
    for (auto& v : r) v = std::floor(rng.uniform(-10, 40));
    const FilterResult first = filter_episodes(fixture::episodes_with_returns(r), 0.8);
    const FilterResult second =
        filter_episodes(first.kept, 0.8, ExpertReturn{first.report.expert_return, first.report.window});
    idempotent = idempotent && second.report.kept == first.report.kept;
  }
  const bool ok = res.report.expert_return == 19.5 && brute.value == 19.5 && res.report.window == 2 &&
                  brute.window == 2 && res.report.kept == 5;
  return {ok && idempotent, fmt("expert return %.17g (oracle %.17g), W=%zu, kept %zu, idempotent %s",
                                res.report.expert_return, brute.value, res.report.window, res.report.kept,
                                idempotent ? "yes" : "no")};
}

// ---- 6-8: behavior cloning -------------------------------------------------

constexpr size_t kBcEpisodes = 500;
constexpr size_t kBcLength = 64;
constexpr int64_t kBcSteps = 1000;
constexpr size_t kEvalRollouts = 50;
constexpr uint64_t kEvalSeed = 99;

struct BcRun {
  std::optional<Model<float>> model;
  std::string log;
  double seconds = 0.0;
};

BcRun train_bc(const std::string& task, bool zero_action_inputs) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Dataset> data;
  data.push_back(toy_dataset(task, kBcEpisodes, 7));
  MixtureSampler sampler(std::move(data), kBcLength, 11);
  ModelConfig mc = ModelConfig::tiny();
  mc.zero_action_inputs = zero_action_inputs;
  BcRun run;
  run.model.emplace(mc, 3);
  TrainConfig tc;
  tc.steps = kBcSteps;
  tc.schedule.warmup_steps = 100;
  tc.schedule.lr_max = 1e-3;
  tc.schedule.decay_steps = kBcSteps;
  tc.optimizer.batch = 16;
  run.log = pretrain(*run.model, sampler, tc).log.text();
  run.seconds = seconds_since(t0);
  return run;
}

RolloutConfig bc_rollouts(ActionMode mode) {
  RolloutConfig rc;
  rc.context = kBcLength;
  rc.action_mode = mode;
  return rc;
}

// Trained models are shared between criteria within one pass; a fresh
// cache reruns everything from scratch.
class BcCache {
 public:
  const BcRun& get(const std::string& task, bool zero) {
    auto key = std::make_pair(task, zero);
    auto it = runs_.find(key);
    if (it == runs_.end()) it = runs_.emplace(key, train_bc(task, zero)).first;
    return it->second;
  }

 private:
  std::map<std::pair<std::string, bool>, BcRun> runs_;
};

struct Logged {
  Outcome outcome;
  std::string log;
};

Logged behavior_cloning(BcCache& cache) {
  const auto t0 = std::chrono::steady_clock::now();
  const BcRun& grid = cache.get("gridreach", false);
  const EvalSummary g = evaluate(*grid.model, *make_env("gridreach"), kEvalRollouts,
                                 bc_rollouts(ActionMode::kAutoregressive), kEvalSeed);
  const BcRun& line = cache.get("linereacher", false);
  const auto line_env = make_env("linereacher");
  const EvalSummary l =
      evaluate(*line.model, *line_env, kEvalRollouts, bc_rollouts(ActionMode::kAutoregressive), kEvalSeed);
  const EvalSummary expert = evaluate_expert(*line_env, kEvalRollouts, kEvalSeed);
  const double secs = seconds_since(t0);
  const std::string evals = fmt("# gridreach mean_return=%.17g\n# linereacher mean_final_distance=%.17g\n",
                                g.mean_return, l.mean_final_distance);
  return {{g.mean_return >= 0.9 && l.mean_final_distance <= 2.0 * expert.mean_final_distance && secs <= 900.0,
           fmt("GridReach mean return %.3f over %zu greedy rollouts; LineReacher final distance %.4f vs expert "
               "%.4f (ratio %.2f); %.0f s",
               g.mean_return, kEvalRollouts, l.mean_final_distance, expert.mean_final_distance,
               l.mean_final_distance / expert.mean_final_distance, secs)},
          grid.log + line.log + evals};
}

// Fraction of rollouts whose every action was the task's optimal arm.
double bandit_success(const Model<float>& model, const std::string& task, bool prompted, uint64_t seed,
                      std::string& log) {
  const auto env = make_env(task);
  std::vector<Episode> prompts = collect_expert_episodes(*env, 8, Rng::derive_seed(seed, 1));
  size_t successes = 0;
  const size_t n = 200;
  for (size_t i = 0; i < n; ++i) {
    RolloutConfig rc;
    rc.context = 32;
    rc.temperature = 1.0;
    rc.prompt = prompted ? &prompts[i % prompts.size()] : nullptr;
    rc.prompt_budget = 12;
    auto instance = env->clone();
    Rng rng(Rng::derive_seed(seed, i));
    successes += rollout(model, *instance, rc, rng).success;
  }
  const double rate = static_cast<double>(successes) / static_cast<double>(n);
  log += fmt("# %s prompted=%d success=%.17g\n", task.c_str(), prompted ? 1 : 0, rate);
  return rate;
}

Logged prompt_conditioning() {
  std::vector<Dataset> data;
  data.push_back(toy_dataset("bandit_a", 200, 21));
  data.push_back(toy_dataset("bandit_b", 200, 22));
  MixtureSampler sampler(std::move(data), 24, 23);
  ModelConfig mc = ModelConfig::tiny();
  mc.context = 32;
  Model<float> model(mc, 24);
  TrainConfig tc;
  tc.steps = 300;
  tc.schedule.warmup_steps = 50;
  tc.schedule.lr_max = 1e-3;
  tc.schedule.decay_steps = tc.steps;
  tc.optimizer.batch = 16;
  std::string log = pretrain(model, sampler, tc).log.text();
  const double pa = bandit_success(model, "bandit_a", true, 25, log);
  const double pb = bandit_success(model, "bandit_b", true, 26, log);
  const double ua = bandit_success(model, "bandit_a", false, 27, log);
  const double ub = bandit_success(model, "bandit_b", false, 28, log);
  return {{pa >= 0.8 && pb >= 0.8 && ua <= 0.6 && ub <= 0.6,
           fmt("all-optimal rollouts of 200 per task: prompted A %.1f%% B %.1f%%, unprompted A %.1f%% B %.1f%%",
               100 * pa, 100 * pb, 100 * ua, 100 * ub)},
          log};
}

Logged parallel_sampling(BcCache& cache) {
  const BcRun& ar = cache.get("linereacher", false);
  const BcRun& par = cache.get("linereacher", true);
  const auto env = make_env("linereacher");
  const EvalSummary ar_eval =
      evaluate(*ar.model, *env, kEvalRollouts, bc_rollouts(ActionMode::kAutoregressive), kEvalSeed);
  uint64_t passes = 0, actions = 0;
  double successes = 0;
  for (size_t i = 0; i < kEvalRollouts; ++i) {
    auto instance = env->clone();
    Rng rng(Rng::derive_seed(kEvalSeed, i));
    const RolloutResult r = rollout(*par.model, *instance, bc_rollouts(ActionMode::kParallel), rng);
    passes += r.forward_passes;
    actions += r.actions;
    successes += r.success;
  }
  const double par_rate = successes / static_cast<double>(kEvalRollouts);
  const double gap = 100.0 * std::abs(par_rate - ar_eval.success_rate);
  const std::string log = par.log + fmt("# parallel success=%.17g autoregressive success=%.17g\n", par_rate,
                                        ar_eval.success_rate);
  return {{passes == actions && gap <= 10.0,
           fmt("forward passes %llu for %llu actions; LineReacher success parallel %.1f%% vs autoregressive "
               "%.1f%% (gap %.1f points)",
               static_cast<unsigned long long>(passes), static_cast<unsigned long long>(actions), 100 * par_rate,
               100 * ar_eval.success_rate, gap)},
          log};
}

// ---- 9: scaling direction --------------------------------------------------

ModelConfig sized(int blocks, int heads, int width, int kv, int ff) {
  ModelConfig c;
  c.blocks = blocks;
  c.heads = heads;
  c.width = width;
  c.kv_size = kv;
  c.ff_hidden = ff;
  c.context = 64;
  return c;
}

std::vector<Dataset> toy_mixture(uint64_t seed) {
  std::vector<Dataset> d;
  for (const char* task : {"gridreach", "bandit_a", "bandit_b", "linereacher", "text"})
    d.push_back(toy_dataset(task, 100, Rng::derive_seed(seed, d.size())));
  return d;
}

Outcome scaling_trend() {
  const std::vector<ModelConfig> configs{sized(1, 2, 32, 16, 64), sized(2, 2, 64, 32, 128), ModelConfig::tiny()};
  std::string detail;
  int ordered = 0;
  for (uint64_t seed = 0; seed < 3; ++seed) {
    std::vector<double> losses;
    for (const auto& cfg : configs) {
      MixtureSampler sampler(toy_mixture(seed), 64, Rng::derive_seed(seed, 100));
      Model<float> model(cfg, Rng::derive_seed(seed, 200));
      TrainConfig tc;
      tc.seed = seed;
      tc.steps = 300;
      tc.schedule.warmup_steps = 50;
      tc.schedule.lr_max = 1e-3;
      tc.schedule.decay_steps = tc.steps;
      tc.optimizer.batch = 8;
      losses.push_back(pretrain(model, sampler, tc).log.smoothed_loss(50));
    }
    const bool ok = losses[0] >= losses[1] && losses[1] >= losses[2];
    ordered += ok;
    detail += fmt("%sseed %llu: %.3f/%.3f/%.3f", seed ? "; " : "", static_cast<unsigned long long>(seed), losses[0],
                  losses[1], losses[2]);
  }
  std::string sizes;
  for (const auto& c : configs) sizes += fmt("%s%lld", sizes.empty() ? "" : "<", static_cast<long long>(parameter_count(c)));
  const bool increasing = parameter_count(configs[0]) < parameter_count(configs[1]) &&
                          parameter_count(configs[1]) < parameter_count(configs[2]);
  return {increasing && ordered >= 2,
          fmt("params %s; smoothed loss %s; ordered in %d of 3 seeds", sizes.c_str(), detail.c_str(), ordered)};
}

// ---- 10: fine-tuning ablation ----------------------------------------------

Outcome finetune_ablation() {
  std::vector<Dataset> data;
  for (const auto& task : ablation_tasks(AblationArm::kAllData)) data.push_back(toy_dataset(task, 200, 31));
  MixtureSampler sampler(std::move(data), 64, 32);
  Model<float> pretrained(ModelConfig::tiny(), 33);
  TrainConfig pc;
  pc.steps = 600;
  pc.schedule.warmup_steps = 100;
  pc.schedule.lr_max = 1e-3;
  pc.schedule.decay_steps = pc.steps;
  pc.optimizer.batch = 16;
  pretrain(pretrained, sampler, pc);

  const auto env = make_env("gridreach");
  const std::vector<Episode> demos = collect_expert_episodes(*env, 10, 34);
  TrainConfig fc = TrainConfig::finetune_defaults();
  fc.steps = 500;
  fc.schedule.lr_max = 1e-4;
  fc.optimizer.batch = 16;
  RolloutConfig rc;
  rc.context = 64;
  auto score = [&](Model<float>& m) {
    const EvalHook hook = [&](const Model<float>& current, int64_t step) {
      return evaluate(current, *env, 10, rc, Rng::derive_seed(35, static_cast<uint64_t>(step))).mean_return;
    };
    return finetune(m, demos, fc, 64, 100, hook).final_score;
  };
  Model<float> scratch(ModelConfig::tiny(), 33);
  const double pre_score = score(pretrained);
  const double scratch_score = score(scratch);
  return {pre_score >= scratch_score,
          fmt("GridReach few-shot (10 demos) final score: pretrained on all toy data %.3f, scratch %.3f", pre_score,
              scratch_score)};
}

// ---- 11: determinism -------------------------------------------------------

Outcome determinism(BcCache& first_pass) {
  auto logs = [](BcCache& cache) {
    return behavior_cloning(cache).log + prompt_conditioning().log + parallel_sampling(cache).log;
  };
  const std::string a = logs(first_pass);
  BcCache fresh;
  const std::string b = logs(fresh);
  size_t first_diff = 0;
  while (first_diff < std::min(a.size(), b.size()) && a[first_diff] == b[first_diff]) ++first_diff;
  return {a == b, a == b ? fmt("criteria 6-8 logs identical across two runs (%zu bytes)", a.size())
                         : fmt("logs differ at byte %zu of %zu", first_diff, a.size())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--only", only, "run a single criterion (1-11)")->check(CLI::Range(0, 11));
  CLI11_PARSE(app, argc, argv);

  BcCache cache;
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, codec_round_trips},
      {2, patch_worked_example},
      {3, layout_identity},
      {4, loss_and_gradients},
      {5, expert_filtering},
      {6, [&] { return behavior_cloning(cache).outcome; }},
      {7, [] { return prompt_conditioning().outcome; }},
      {8, [&] { return parallel_sampling(cache).outcome; }},
      {9, scaling_trend},
      {10, finetune_ablation},
      {11, [&] { return determinism(cache); }},
  };
  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (only != 0 && id != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %2d: %s  %s  [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
