// Command-line front end: collect, filter, pretrain, finetune, rollout,
// inspect.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 data error,
// 4 numeric abort.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "seqpolicy/seqpolicy.hpp"

namespace fs = std::filesystem;
using namespace seqpolicy;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kChecksum:
    case ErrorCode::kTruncatedRecord:
    case ErrorCode::kVersionMismatch:
    case ErrorCode::kSchema:
    case ErrorCode::kShape:
    case ErrorCode::kCapacity:
    case ErrorCode::kExhausted:
      return kExitData;
    case ErrorCode::kNumeric:
      return kExitNumeric;
    default:
      return kExitUsage;
  }
}

struct ModelOptions {
  ModelConfig cfg = ModelConfig::tiny();

  void add(CLI::App* app) {
    app->add_option("--blocks", cfg.blocks, "transformer blocks")->capture_default_str();
    app->add_option("--heads", cfg.heads, "attention heads")->capture_default_str();
    app->add_option("--width", cfg.width, "model width")->capture_default_str();
    app->add_option("--ff-hidden", cfg.ff_hidden, "feedforward hidden size")->capture_default_str();
    app->add_option("--kv-size", cfg.kv_size, "key/value size per head")->capture_default_str();
    app->add_option("--context", cfg.context, "maximum sequence length")->capture_default_str();
    app->add_option("--image-channels", cfg.image_channels, "image channels")->capture_default_str();
    app->add_option("--stochastic-depth", cfg.stochastic_depth, "sub-layer skip probability")
        ->capture_default_str();
    app->add_option("--dropout", cfg.dropout, "fine-tuning dropout rate")->capture_default_str();
    app->add_flag("--zero-action-inputs", cfg.zero_action_inputs, "train for single-pass action decoding");
  }
};

struct TrainOptions {
  TrainConfig cfg;
  size_t seq_len = 64;
  std::string out_dir = "run";

  void add(CLI::App* app) {
    app->add_option("--steps", cfg.steps, "optimizer steps")->capture_default_str();
    app->add_option("--batch", cfg.optimizer.batch, "sequences per batch")->capture_default_str();
    app->add_option("--seq-len", seq_len, "elements per training sequence")->capture_default_str();
    app->add_option("--lr", cfg.schedule.lr_max, "peak learning rate")->capture_default_str();
    app->add_option("--lr-start", cfg.schedule.lr_start, "warmup start learning rate")->capture_default_str();
    app->add_option("--warmup-steps", cfg.schedule.warmup_steps, "linear warmup steps")->capture_default_str();
    app->add_option("--decay-steps", cfg.schedule.decay_steps, "cosine decay steps")->capture_default_str();
    app->add_option("--decay-factor", cfg.schedule.decay_factor, "peak / final learning rate")
        ->capture_default_str();
    app->add_option("--beta1", cfg.optimizer.beta1)->capture_default_str();
    app->add_option("--beta2", cfg.optimizer.beta2)->capture_default_str();
    app->add_option("--eps", cfg.optimizer.eps)->capture_default_str();
    app->add_option("--weight-decay", cfg.optimizer.weight_decay, "decoupled weight decay")
        ->capture_default_str();
    app->add_option("--checkpoint-every", cfg.checkpoint_every, "steps between checkpoints")
        ->capture_default_str();
    app->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
  }
};

void log_config(const CLI::App& root, const std::string& out_dir) {
  const std::string resolved = root.config_to_str(true, true);
  std::cerr << "# resolved configuration\n" << resolved;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(out_dir + "/config.ini", resolved);
  }
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw CLI::ValidationError(what, "no such file: " + path);
}

// ---- collect -------------------------------------------------------------

int run_collect(const std::string& env_name, size_t episodes, uint64_t seed, const std::string& out) {
  std::vector<Episode> eps;
  if (env_name == "text") {
    eps = synthetic_text_episodes(episodes, seed);
  } else {
    auto env = make_env(env_name);
    eps = collect_expert_episodes(*env, episodes, seed);
  }
  if (auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
  save_episodes(out, eps);
  std::cout << "wrote " << eps.size() << " episodes to " << out << "\n";
  return 0;
}

// ---- filter --------------------------------------------------------------

std::string format_report(const FilterReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "task=%s expert_return=%.17g window=%zu fraction=%.17g threshold=%.17g kept=%zu dropped=%zu",
                r.task_id.c_str(), r.expert_return, r.window, r.fraction, r.threshold, r.kept, r.dropped);
  return buf;
}

int run_filter(const std::string& manifest_path, double fraction, const std::string& out_dir) {
  require(fraction >= 0.0 && fraction <= 1.0, ErrorCode::kConfig, "fraction must lie in [0, 1]");
  const auto manifests = load_manifest(manifest_path);
  fs::create_directories(out_dir);
  std::vector<DatasetManifest> filtered;
  std::string report;
  for (const auto& m : manifests) {
    std::vector<Episode> episodes = load_manifest_episodes(m);
    std::vector<Episode> kept;
    for (auto& result : filter_by_task(episodes, fraction)) {
      report += "dataset=" + m.name + " " + format_report(result.report) + "\n";
      for (auto& ep : result.kept) kept.push_back(std::move(ep));
    }
    const std::string file = m.name + ".filtered.ep";
    save_episodes(out_dir + "/" + file, kept);
    DatasetManifest out = m;
    out.paths = {file};
    filtered.push_back(std::move(out));
  }
  write_file(out_dir + "/manifest.ini", format_manifest(filtered));
  write_file(out_dir + "/filter_report.txt", report);
  std::cout << report;
  return 0;
}

// ---- pretrain ------------------------------------------------------------

std::vector<Dataset> load_datasets(const std::string& manifest_path, std::optional<AblationArm> preset) {
  auto manifests = load_manifest(manifest_path);
  std::vector<Dataset> out;
  for (const auto& m : manifests) {
    if (preset) {
      const auto tasks = ablation_tasks(*preset);
      if (std::find(tasks.begin(), tasks.end(), m.name) == tasks.end()) continue;
    }
    out.push_back(Dataset::load(m));
  }
  require(!out.empty(), ErrorCode::kConfig, "no dataset selected from the manifest");
  return out;
}

int run_pretrain(const CLI::App& root, const std::string& manifest, const std::string& preset_name,
                 ModelOptions mo, TrainOptions to, uint64_t seed, bool prompting) {
  std::optional<AblationArm> preset;
  if (!preset_name.empty()) preset = ablation_arm_from_name(preset_name);
  require(!preset || *preset != AblationArm::kScratch, ErrorCode::kConfig,
          "the scratch preset has no pretraining stage");
  to.cfg.seed = seed;
  to.cfg.mode = Mode::kPretrain;
  to.cfg.prompting = prompting;
  to.cfg.checkpoint_dir = to.out_dir;
  log_config(root, to.out_dir);
  auto datasets = load_datasets(manifest, preset);
  MixtureSampler sampler(std::move(datasets), to.seq_len, Rng::derive_seed(seed, 0), PromptConfig{}, prompting);
  Model<float> model(mo.cfg, Rng::derive_seed(seed, 2));
  const TrainResult result = pretrain(model, sampler, to.cfg, [](int64_t step, const MetricsRecord& r) {
    if (step % 50 == 0) std::cerr << format_metrics(r) << "\n";
  });
  result.log.write(to.out_dir + "/metrics.log");
  std::cout << "steps=" << result.steps << " final_loss=" << result.log.smoothed_loss(50)
            << " prompted_fraction=" << result.prompted_fraction << "\n";
  return 0;
}

// ---- finetune ------------------------------------------------------------

int run_finetune(const CLI::App& root, const std::string& checkpoint, const std::string& demos_path,
                 const std::string& preset_name, ModelOptions mo, TrainOptions to, uint64_t seed,
                 const std::string& eval_env, int64_t eval_every, size_t eval_rollouts) {
  to.cfg.seed = seed;
  to.cfg.mode = Mode::kFinetune;
  to.cfg.prompting = false;
  to.cfg.checkpoint_dir.clear();
  log_config(root, to.out_dir);
  const bool scratch = preset_name == "scratch";
  if (!preset_name.empty()) ablation_arm_from_name(preset_name);
  std::optional<Model<float>> model;
  if (scratch || checkpoint.empty()) {
    if (!checkpoint.empty()) std::cerr << "warning: preset scratch ignores --checkpoint\n";
    model.emplace(mo.cfg, Rng::derive_seed(seed, 2));
  } else {
    require_file(checkpoint, "--checkpoint");
    Checkpoint c = load_checkpoint(checkpoint);
    c.config.dropout = mo.cfg.dropout;
    model.emplace(c.model());
  }
  require_file(demos_path, "--demos");
  std::vector<Episode> demos = load_episodes(demos_path);
  EvalHook hook;
  if (!eval_env.empty()) {
    auto env = make_env(eval_env);
    RolloutConfig rc;
    rc.context = to.seq_len;
    hook = [env = std::shared_ptr<Environment>(std::move(env)), rc, eval_rollouts, seed](
               const Model<float>& m, int64_t step) {
      const auto summary = evaluate(m, *env, eval_rollouts, rc, Rng::derive_seed(seed, 1000 + step));
      std::cerr << "eval step=" << step << " mean_return=" << summary.mean_return << "\n";
      return summary.mean_return;
    };
  }
  const TrainResult result = finetune(*model, std::move(demos), to.cfg, to.seq_len, eval_every, hook);
  result.log.write(to.out_dir + "/metrics.log");
  save_checkpoint(to.out_dir + "/finetuned.sqpc", make_checkpoint(*model, result.steps));
  std::cout << "steps=" << result.steps << " final_score=" << result.final_score << "\n";
  return 0;
}

// ---- rollout -------------------------------------------------------------

int run_rollout(const CLI::App& root, const std::string& checkpoint, bool expert, const std::string& env_name,
                const std::string& prompt_path, size_t n, double temperature, bool parallel, size_t context,
                const std::string& transcripts, uint64_t seed) {
  log_config(root, "");
  auto env = make_env(env_name);
  if (expert) {
    const EvalSummary s = evaluate_expert(*env, n, seed);
    for (double r : s.returns) std::cout << "return=" << r << "\n";
    std::cout << "mean_return=" << s.mean_return << " success_rate=" << s.success_rate << "\n";
    return 0;
  }
  require(!checkpoint.empty(), ErrorCode::kConfig, "rollout needs --checkpoint or --expert");
  require_file(checkpoint, "--checkpoint");
  const Model<float> model = load_checkpoint(checkpoint).model();
  std::optional<Episode> prompt;
  if (!prompt_path.empty() && fs::exists(prompt_path)) {
    prompt = load_episodes(prompt_path).at(0);
  } else if (dynamic_cast<const TwoTaskBandit*>(env.get())) {
    std::cerr << "warning: no prompt for a task that needs one; rolling out unprompted\n";
  }
  RolloutConfig rc;
  rc.prompt = prompt ? &*prompt : nullptr;
  rc.temperature = temperature;
  rc.context = context;
  rc.action_mode = parallel ? ActionMode::kParallel : ActionMode::kAutoregressive;
  std::vector<Episode> played;
  double total = 0.0;
  size_t successes = 0;
  for (size_t i = 0; i < n; ++i) {
    auto instance = env->clone();
    Rng rng(Rng::derive_seed(seed, i));
    RolloutResult r = rollout(model, *instance, rc, rng);
    std::cout << "return=" << r.total_return << "\n";
    total += r.total_return;
    successes += r.success;
    played.push_back(std::move(r.episode));
  }
  if (!transcripts.empty()) save_episodes(transcripts, played);
  std::cout << "mean_return=" << total / static_cast<double>(n)
            << " success_rate=" << static_cast<double>(successes) / static_cast<double>(n)
            << " prompted=" << (prompt ? 1 : 0) << "\n";
  return 0;
}

// ---- inspect -------------------------------------------------------------

const char* role_name(ElementRole r) {
  switch (r) {
    case ElementRole::kText: return "text";
    case ElementRole::kImagePatch: return "patch";
    case ElementRole::kObservation: return "obs";
    case ElementRole::kSeparator: return "sep";
    case ElementRole::kAction: return "act";
    case ElementRole::kPadding: return "pad";
  }
  return "?";
}

int run_inspect(const std::string& path, size_t max_elements) {
  require_file(path, "episode file");
  const auto episodes = load_episodes(path);
  int violations = 0;
  for (size_t e = 0; e < episodes.size(); ++e) {
    const Episode& ep = episodes[e];
    const ElementSequence seq = flatten_episode(ep);
    seq.check_invariants();
    std::cout << "episode " << e << " task=" << ep.task_id << " T=" << ep.timesteps.size()
              << " L=" << seq.size() << " masked=" << seq.mask_count() << " return=" << ep.total_return();
    if (auto layout = uniform_layout(ep)) {
      std::cout << " k=" << layout->k << " m=" << layout->m << " n=" << layout->n << " A=" << layout->A;
      if (layout->length() != static_cast<int64_t>(seq.size())) {
        std::cout << " LAYOUT-MISMATCH";
        ++violations;
      }
    }
    std::cout << "\n";
    for (size_t i = 0; i < seq.size() && i < max_elements; ++i) {
      const Element& el = seq.elements[i];
      std::cout << "  " << i << " t=" << seq.timesteps[i] << " " << role_name(el.role)
                << " pos=" << seq.local_positions[i] << " mask=" << int(seq.mask[i]);
      if (!el.is_patch()) std::cout << " token=" << el.token.value();
      std::cout << "\n";
    }
    // Token ranges per stream.
    for (const auto& ts : ep.timesteps) {
      for (const auto& [key, value] : ts.observations) {
        const TensorSchema& s = ep.schema.observation(key);
        if (s.modality != Modality::kContinuous) continue;
        for (TokenId t : encode_tokens(value, s))
          if (!t.is_continuous()) ++violations;
      }
      if (ts.action && ep.schema.action->modality == Modality::kContinuous)
        for (TokenId t : encode_tokens(*ts.action, *ep.schema.action))
          if (!t.is_continuous()) ++violations;
    }
  }
  std::cout << "episodes=" << episodes.size() << " violations=" << violations << "\n";
  return violations == 0 ? 0 : kExitData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seqpolicy: tokenized sequence-model policies on toy control tasks"};
  app.set_config("--config", "", "INI/TOML file with option values (flags override it)");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();
  uint64_t seed = 0;
  app.add_option("--seed", seed, "global seed")->envname("SEQPOLICY_SEED")->capture_default_str();

  auto* collect = app.add_subcommand("collect", "write scripted-expert episodes for a toy task");
  std::string collect_env = "gridreach", collect_out = "episodes.ep";
  size_t collect_n = 500;
  collect->add_option("--env", collect_env, "gridreach, gridreach_partial, bandit_a, bandit_b, linereacher, text")
      ->capture_default_str();
  collect->add_option("--episodes", collect_n)->capture_default_str();
  collect->add_option("--out", collect_out)->capture_default_str();

  auto* filter = app.add_subcommand("filter", "drop episodes below a fraction of the expert return");
  std::string filter_manifest, filter_out = "filtered";
  double fraction = 0.8;
  filter->add_option("--manifest", filter_manifest)->required();
  filter->add_option("--fraction", fraction)->capture_default_str();
  filter->add_option("--out-dir", filter_out)->capture_default_str();

  auto* pre = app.add_subcommand("pretrain", "masked-loss training on a dataset mixture");
  std::string pre_manifest, pre_preset;
  bool no_prompting = false;
  ModelOptions pre_model;
  TrainOptions pre_train;
  pre->add_option("--manifest", pre_manifest)->required();
  pre->add_option("--preset", pre_preset, "all_data, same_domain or no_control: keep matching datasets");
  pre->add_flag("--no-prompting", no_prompting, "disable prompt prepending");
  pre_model.add(pre);
  pre_train.add(pre);

  auto* fine = app.add_subcommand("finetune", "fine-tune on demonstrations of one task");
  std::string fine_ckpt, fine_demos, fine_preset, fine_eval_env;
  int64_t eval_every = 100;
  size_t eval_rollouts = 10;
  ModelOptions fine_model;
  TrainOptions fine_train;
  fine_train.cfg = TrainConfig::finetune_defaults();
  fine->add_option("--checkpoint", fine_ckpt, "pretrained checkpoint");
  fine->add_option("--demos", fine_demos, "episode file with the demonstrations")->required();
  fine->add_option("--preset", fine_preset, "scratch ignores --checkpoint");
  fine->add_option("--eval-env", fine_eval_env, "environment scored during fine-tuning");
  fine->add_option("--eval-every", eval_every)->capture_default_str();
  fine->add_option("--eval-rollouts", eval_rollouts)->capture_default_str();
  fine_model.add(fine);
  fine_train.add(fine);

  auto* roll = app.add_subcommand("rollout", "run a checkpoint (or the scripted expert) in an environment");
  std::string roll_ckpt, roll_env = "gridreach", roll_prompt, roll_out;
  bool roll_expert = false, roll_parallel = false;
  size_t roll_n = 50, roll_context = 0;
  double temperature = 0.0;
  roll->add_option("--checkpoint", roll_ckpt);
  roll->add_flag("--expert", roll_expert, "score the scripted expert instead of a checkpoint");
  roll->add_option("--env", roll_env)->capture_default_str();
  roll->add_option("--prompt", roll_prompt, "episode file whose first episode seeds the context");
  roll->add_option("-n,--episodes", roll_n)->capture_default_str();
  roll->add_option("--temperature", temperature, "0 is greedy")->capture_default_str();
  roll->add_flag("--parallel", roll_parallel, "decode each action in one forward pass");
  roll->add_option("--context", roll_context, "context window in elements, 0 for the model's")
      ->capture_default_str();
  roll->add_option("--transcripts", roll_out, "write played episodes here");

  auto* insp = app.add_subcommand("inspect", "dump the token layout of an episode file");
  std::string insp_path;
  size_t max_elements = 64;
  insp->add_option("file", insp_path)->required();
  insp->add_option("--max-elements", max_elements)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*collect) return run_collect(collect_env, collect_n, seed, collect_out);
    if (*filter) {
      require_file(filter_manifest, "--manifest");
      return run_filter(filter_manifest, fraction, filter_out);
    }
    if (*pre) {
      require_file(pre_manifest, "--manifest");
      return run_pretrain(app, pre_manifest, pre_preset, pre_model, pre_train, seed, !no_prompting);
    }
    if (*fine)
      return run_finetune(app, fine_ckpt, fine_demos, fine_preset, fine_model, fine_train, seed, fine_eval_env,
                          eval_every, eval_rollouts);
    if (*roll)
      return run_rollout(app, roll_ckpt, roll_expert, roll_env, roll_prompt, roll_n, temperature, roll_parallel,
                         roll_context, roll_out, seed);
    if (*insp) return run_inspect(insp_path, max_elements);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
