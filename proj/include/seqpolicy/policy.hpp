#pragma once

// Deploying a trained model as a control policy: prompt seeding, sliding
// context window, action decoding and rollouts.

#include <cmath>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include "seqpolicy/envs.hpp"
#include "seqpolicy/model.hpp"
#include "seqpolicy/sequencer.hpp"

namespace seqpolicy {

enum class ActionMode { kAutoregressive, kParallel };

inline std::string to_string(ActionMode m) {
  return m == ActionMode::kParallel ? "parallel" : "autoregressive";
}

struct RolloutConfig {
  const Episode* prompt = nullptr;
  size_t prompt_budget = 1024;  // leading prompt elements kept
  size_t context = 0;           // 0 -> the model's context
  double temperature = 0.0;     // 0 -> greedy
  ActionMode action_mode = ActionMode::kAutoregressive;
  int resample_limit = 16;
};

// Elements the policy conditions on, kept as whole timesteps so that window
// truncation never splits one.
class PolicyContext {
 public:
  struct Block {
    std::vector<Element> elements;
    std::vector<int32_t> local_positions;
  };

  void push(Block block) {
    size_ += block.elements.size();
    blocks_.push_back(std::move(block));
  }

  // Drops the oldest blocks until `extra` more elements fit in `capacity`.
  void make_room(size_t extra, size_t capacity) {
    if (!(extra <= capacity))
      fail(ErrorCode::kCapacity, "one timestep (" + std::to_string(extra) +
                                     " elements) exceeds the context of " + std::to_string(capacity));
    while (size_ + extra > capacity && !blocks_.empty()) {
      size_ -= blocks_.front().elements.size();
      blocks_.pop_front();
    }
  }

  size_t size() const { return size_; }
  size_t blocks() const { return blocks_.size(); }

  // Flattened view followed by `tail`.
  void flatten(const Block& tail, std::vector<Element>& elements, std::vector<int32_t>& positions) const {
    elements.clear();
    positions.clear();
    for (const auto& b : blocks_) {
      elements.insert(elements.end(), b.elements.begin(), b.elements.end());
      positions.insert(positions.end(), b.local_positions.begin(), b.local_positions.end());
    }
    elements.insert(elements.end(), tail.elements.begin(), tail.elements.end());
    positions.insert(positions.end(), tail.local_positions.begin(), tail.local_positions.end());
  }

 private:
  std::deque<Block> blocks_;
  size_t size_ = 0;
};

// Prompt blocks: the first `budget` elements of the demonstration, split at
// its timestep boundaries.
inline std::vector<PolicyContext::Block> prompt_blocks(const Episode& prompt, size_t budget) {
  const ElementSequence seq = flatten_episode(prompt);
  const size_t n = std::min(budget, seq.size());
  std::vector<PolicyContext::Block> out;
  for (size_t i = 0; i < n; ++i) {
    if (i == 0 || seq.timesteps[i] != seq.timesteps[i - 1]) out.emplace_back();
    out.back().elements.push_back(seq.elements[i]);
    out.back().local_positions.push_back(seq.local_positions[i]);
  }
  return out;
}

// Observation elements plus the separator, with training-time positions.
inline PolicyContext::Block observation_block(const ObservationSet& obs, const EpisodeSchema& schema,
                                              int local_position_table) {
  PolicyContext::Block block;
  block.elements = order_observation(obs, schema);
  block.elements.push_back(Element::of_token(ElementRole::kSeparator, kSeparator));
  std::vector<ElementRole> roles;
  for (const auto& e : block.elements) roles.push_back(e.role);
  const std::vector<int32_t> steps(roles.size(), 0);
  block.local_positions = local_position_indices(roles, steps, local_position_table);
  return block;
}

// Draws one token from `logits` restricted to [lo, hi). Greedy when
// temperature is 0. If the restricted distribution is not finite, falls back
// to rejection from the full distribution, at most `resample_limit` times.
template <typename S>
TokenId sample_token(const Eigen::Ref<const RowVec<S>>& logits, std::pair<int32_t, int32_t> range,
                     double temperature, Rng* rng, int resample_limit = 16) {
  const auto [lo, hi] = range;
  require(lo >= 0 && hi <= logits.size() && lo < hi, ErrorCode::kRange, "empty legal token range");
  const auto legal = logits.segment(lo, hi - lo);
  if (temperature <= 0.0) {
    Eigen::Index best = 0;
    const S top = legal.maxCoeff(&best);
    if (std::isfinite(static_cast<double>(top))) return TokenId(lo + static_cast<int32_t>(best));
  } else {
    require(rng != nullptr, ErrorCode::kContract, "temperature sampling needs a random stream");
    const double mx = static_cast<double>(legal.maxCoeff());
    std::vector<double> cdf(static_cast<size_t>(hi - lo));
    double acc = 0.0;
    for (Eigen::Index i = 0; i < legal.size(); ++i) {
      acc += std::exp((static_cast<double>(legal(i)) - mx) / temperature);
      cdf[static_cast<size_t>(i)] = acc;
    }
    if (std::isfinite(acc) && acc > 0) {
      const double u = rng->uniform() * acc;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      return TokenId(lo + static_cast<int32_t>(std::min<ptrdiff_t>(it - cdf.begin(), hi - lo - 1)));
    }
  }
  Rng fallback_stream(0);
  Rng& r = rng ? *rng : fallback_stream;
  for (int attempt = 0; attempt < resample_limit; ++attempt) {
    const auto t = static_cast<int32_t>(r.below(static_cast<uint64_t>(logits.size())));
    if (t >= lo && t < hi && std::isfinite(static_cast<double>(logits(t)))) return TokenId(t);
  }
  fail(ErrorCode::kRange, "no legal action token after " + std::to_string(resample_limit) + " draws");
}

// Samples the action one token at a time; each token sees the ones before
// it. `context` must end with the separator.
template <typename S>
std::vector<TokenId> sample_action_autoregressive(const Model<S>& model, std::vector<Element> context,
                                                  std::vector<int32_t> positions, const TensorSchema& action,
                                                  double temperature, Rng* rng, int resample_limit = 16) {
  require(!context.empty() && context.back().role == ElementRole::kSeparator, ErrorCode::kContract,
          "action sampling context must end with a separator");
  const auto count = action.element_count();
  const auto range = legal_token_range(action);
  const int32_t act_pos = action_position(model.config().local_pos_table);
  std::vector<TokenId> out;
  for (size_t i = 0; i < count; ++i) {
    const auto fw = model.forward(context, positions, Mode::kEval, nullptr, {context.size() - 1});
    const TokenId t = sample_token<S>(fw.logits.row(0), range, temperature, rng, resample_limit);
    out.push_back(t);
    context.push_back(Element::of_token(ElementRole::kAction, t));
    positions.push_back(act_pos);
  }
  return out;
}

// All action tokens from one forward pass over zero-input placeholders.
template <typename S>
std::vector<TokenId> sample_action_parallel(const Model<S>& model, std::vector<Element> context,
                                            std::vector<int32_t> positions, const TensorSchema& action,
                                            double temperature, Rng* rng, int resample_limit = 16) {
  require(model.config().zero_action_inputs, ErrorCode::kConfig,
          "parallel action sampling needs a model trained with zeroed action inputs");
  require(!context.empty() && context.back().role == ElementRole::kSeparator, ErrorCode::kContract,
          "action sampling context must end with a separator");
  const auto count = static_cast<size_t>(action.element_count());
  const auto range = legal_token_range(action);
  const size_t sep = context.size() - 1;
  std::vector<size_t> outputs;
  for (size_t i = 0; i < count; ++i) outputs.push_back(sep + i);
  // The last placeholder is never read by an output position; it is omitted.
  for (size_t i = 0; i + 1 < count; ++i) {
    context.push_back(Element::of_token(ElementRole::kAction, TokenId(0)));
    positions.push_back(action_position(model.config().local_pos_table));
  }
  const auto fw = model.forward(context, positions, Mode::kEval, nullptr, outputs);
  std::vector<TokenId> out;
  for (size_t i = 0; i < count; ++i)
    out.push_back(sample_token<S>(fw.logits.row(static_cast<Eigen::Index>(i)), range, temperature, rng,
                                  resample_limit));
  return out;
}

struct RolloutResult {
  Episode episode;
  double total_return = 0.0;
  bool success = false;
  double final_distance = std::numeric_limits<double>::quiet_NaN();  // LineReacher only
  uint64_t forward_passes = 0;
  uint64_t actions = 0;
};

template <typename S>
RolloutResult rollout(const Model<S>& model, Environment& env, const RolloutConfig& cfg, Rng& rng) {
  const EnvSpec& spec = env.spec();
  require(spec.schema.action.has_value(), ErrorCode::kSchema, "environment has no action schema");
  const TensorSchema& action_schema = *spec.schema.action;
  const size_t capacity = cfg.context ? std::min<size_t>(cfg.context, model.config().context)
                                      : static_cast<size_t>(model.config().context);
  const size_t action_len = static_cast<size_t>(action_schema.element_count());

  PolicyContext ctx;
  if (cfg.prompt) {
    require(cfg.prompt->schema == spec.schema, ErrorCode::kSchema,
            "prompt episode schema differs from the env");
    for (auto& b : prompt_blocks(*cfg.prompt, cfg.prompt_budget)) ctx.push(std::move(b));
  }

  RolloutResult result;
  result.episode.task_id = spec.task_id;
  result.episode.schema = spec.schema;
  const uint64_t passes_before = model.forward_passes();
  ObservationSet obs = env.reset(rng);
  std::vector<Element> elements;
  std::vector<int32_t> positions;
  for (int t = 0; t < spec.horizon; ++t) {
    PolicyContext::Block block = observation_block(obs, spec.schema, model.config().local_pos_table);
    ctx.make_room(block.elements.size() + action_len, capacity);
    ctx.flatten(block, elements, positions);
    const auto tokens = cfg.action_mode == ActionMode::kParallel
                            ? sample_action_parallel(model, elements, positions, action_schema,
                                                     cfg.temperature, &rng, cfg.resample_limit)
                            : sample_action_autoregressive(model, elements, positions, action_schema,
                                                           cfg.temperature, &rng, cfg.resample_limit);
    ++result.actions;
    Value action = decode_tokens(tokens, action_schema);
    for (const TokenId tk : tokens) {
      block.elements.push_back(Element::of_token(ElementRole::kAction, tk));
      block.local_positions.push_back(action_position(model.config().local_pos_table));
    }
    ctx.push(std::move(block));
    EnvStep s = env.step(action);
    result.episode.timesteps.push_back({std::move(obs), std::move(action)});
    result.episode.rewards.push_back(s.reward);
    result.total_return += s.reward;
    obs = std::move(s.observation);
    if (s.done) break;
  }
  result.success = env.success();
  if (const auto* lr = dynamic_cast<const LineReacher*>(&env)) result.final_distance = lr->final_distance();
  result.forward_passes = model.forward_passes() - passes_before;
  return result;
}

struct EvalSummary {
  size_t episodes = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double mean_final_distance = 0.0;  // LineReacher only
  std::vector<double> returns;
};

// Rollout i uses the stream derive_seed(seed, i), so results do not depend
// on how many rollouts run.
template <typename S>
EvalSummary evaluate(const Model<S>& model, const Environment& env, size_t episodes, const RolloutConfig& cfg,
                     uint64_t seed) {
  require(episodes > 0, ErrorCode::kEmptyInput, "evaluation needs at least one rollout");
  EvalSummary out;
  out.episodes = episodes;
  for (size_t i = 0; i < episodes; ++i) {
    auto instance = env.clone();
    Rng rng(Rng::derive_seed(seed, i));
    const RolloutResult r = rollout(model, *instance, cfg, rng);
    out.returns.push_back(r.total_return);
    out.mean_return += r.total_return;
    out.success_rate += r.success ? 1.0 : 0.0;
    if (!std::isnan(r.final_distance)) out.mean_final_distance += r.final_distance;
  }
  const double n = static_cast<double>(episodes);
  out.mean_return /= n;
  out.success_rate /= n;
  out.mean_final_distance /= n;
  return out;
}

// The scripted expert scored with the same seeds as `evaluate`.
inline EvalSummary evaluate_expert(const Environment& env, size_t episodes, uint64_t seed) {
  EvalSummary out;
  out.episodes = episodes;
  for (size_t i = 0; i < episodes; ++i) {
    auto instance = env.clone();
    Rng rng(Rng::derive_seed(seed, i));
    const Episode ep = expert_episode(*instance, rng);
    out.returns.push_back(ep.total_return());
    out.mean_return += ep.total_return();
    out.success_rate += instance->success() ? 1.0 : 0.0;
    if (const auto* lr = dynamic_cast<const LineReacher*>(instance.get()))
      out.mean_final_distance += lr->final_distance();
  }
  const double n = static_cast<double>(std::max<size_t>(1, episodes));
  out.mean_return /= n;
  out.success_rate /= n;
  out.mean_final_distance /= n;
  return out;
}

}  // namespace seqpolicy
