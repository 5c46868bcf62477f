#pragma once

// Toy environments with scripted experts, and expert-data collection.

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "seqpolicy/codec.hpp"
#include "seqpolicy/random.hpp"
#include "seqpolicy/sequencer.hpp"

namespace seqpolicy {

struct EnvSpec {
  std::string task_id;
  EpisodeSchema schema;
  int horizon = 0;
  double reward_low = 0.0;
  double reward_high = 1.0;
};

struct EnvStep {
  ObservationSet observation;
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual ObservationSet reset(Rng& rng) = 0;
  virtual EnvStep step(const Value& action) = 0;
  // Action the scripted expert takes in the current state.
  virtual Value expert_action() const = 0;
  // Task-specific success of the episode played so far.
  virtual bool success() const = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;
};

// 5x5 grid; reach the goal cell. Actions: 0 up, 1 down, 2 left, 3 right.
class GridReach final : public Environment {
 public:
  static constexpr int kSize = 5;
  static constexpr int kHorizon = 20;

  // `max_goal_col` < kSize restricts goals to the left columns.
  explicit GridReach(std::string task_id = "gridreach", int max_goal_col = kSize - 1)
      : max_goal_col_(max_goal_col) {
    spec_.task_id = std::move(task_id);
    spec_.schema.observations = {TensorSchema::discrete("agent", {2}, false, kSize),
                                 TensorSchema::discrete("goal", {2}, false, kSize)};
    spec_.schema.action = TensorSchema::discrete("move", {1}, true, 4);
    spec_.schema.sort();
    spec_.horizon = kHorizon;
  }

  const EnvSpec& spec() const override { return spec_; }

  ObservationSet reset(Rng& rng) override {
    do {
      goal_ = {static_cast<int>(rng.below(kSize)), static_cast<int>(rng.below(max_goal_col_ + 1))};
      agent_ = {static_cast<int>(rng.below(kSize)), static_cast<int>(rng.below(kSize))};
    } while (agent_ == goal_);
    steps_ = 0;
    reached_ = false;
    return observe();
  }

  EnvStep step(const Value& action) override {
    const int a = std::get<DiscreteValue>(action).values.at(0);
    require(a >= 0 && a < 4, ErrorCode::kRange, "GridReach action must be in [0, 4)");
    static constexpr int kDr[4] = {-1, 1, 0, 0};
    static constexpr int kDc[4] = {0, 0, -1, 1};
    agent_[0] = std::clamp(agent_[0] + kDr[a], 0, kSize - 1);
    agent_[1] = std::clamp(agent_[1] + kDc[a], 0, kSize - 1);
    ++steps_;
    EnvStep out;
    reached_ = agent_ == goal_;
    out.reward = reached_ ? 1.0 : 0.0;
    out.done = reached_ || steps_ >= kHorizon;
    out.observation = observe();
    return out;
  }

  // Rows first, then columns.
  Value expert_action() const override {
    int a = 0;
    if (agent_[0] > goal_[0])
      a = 0;
    else if (agent_[0] < goal_[0])
      a = 1;
    else if (agent_[1] > goal_[1])
      a = 2;
    else
      a = 3;
    return DiscreteValue{{a}};
  }

  bool success() const override { return reached_; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<GridReach>(*this); }

 private:
  ObservationSet observe() const {
    return {{"agent", DiscreteValue{{agent_[0], agent_[1]}}}, {"goal", DiscreteValue{{goal_[0], goal_[1]}}}};
  }

  EnvSpec spec_;
  int max_goal_col_;
  std::array<int, 2> agent_{}, goal_{};
  int steps_ = 0;
  bool reached_ = false;
};

// Two tasks with identical observation and action specs and opposite optimal
// arms; nothing in the observation tells them apart.
class TwoTaskBandit final : public Environment {
 public:
  static constexpr int kHorizon = 4;

  explicit TwoTaskBandit(int task) : task_(task) {
    require(task == 0 || task == 1, ErrorCode::kDomain, "bandit task must be 0 or 1");
    spec_.task_id = task == 0 ? "bandit_a" : "bandit_b";
    spec_.schema.observations = {TensorSchema::discrete("cue", {1}, false, 1)};
    spec_.schema.action = TensorSchema::discrete("arm", {1}, true, 2);
    spec_.horizon = kHorizon;
  }

  const EnvSpec& spec() const override { return spec_; }
  int optimal_arm() const { return task_; }

  ObservationSet reset(Rng&) override {
    steps_ = 0;
    all_optimal_ = true;
    return observe();
  }

  EnvStep step(const Value& action) override {
    const int a = std::get<DiscreteValue>(action).values.at(0);
    require(a == 0 || a == 1, ErrorCode::kRange, "bandit arm must be 0 or 1");
    ++steps_;
    all_optimal_ = all_optimal_ && a == task_;
    return {observe(), a == task_ ? 1.0 : 0.0, steps_ >= kHorizon};
  }

  Value expert_action() const override { return DiscreteValue{{task_}}; }
  bool success() const override { return steps_ > 0 && all_optimal_; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<TwoTaskBandit>(*this); }

 private:
  static ObservationSet observe() { return {{"cue", DiscreteValue{{0}}}}; }

  EnvSpec spec_;
  int task_;
  int steps_ = 0;
  bool all_optimal_ = true;
};

// 1-D point moved by a bounded continuous force toward the origin. The
// observation range exceeds [-1, 1], so it is companded before binning.
class LineReacher final : public Environment {
 public:
  static constexpr int kHorizon = 10;
  static constexpr double kStart = 1.5;
  static constexpr double kLimit = 2.0;
  static constexpr double kGain = 0.3;
  static constexpr double kSuccessDistance = 0.05;

  LineReacher() {
    spec_.task_id = "linereacher";
    spec_.schema.observations = {TensorSchema::continuous("offset", {1}, -kLimit, kLimit)};
    spec_.schema.action = TensorSchema::continuous("force", {1}, -1.0, 1.0, true);
    spec_.horizon = kHorizon;
  }

  const EnvSpec& spec() const override { return spec_; }

  ObservationSet reset(Rng& rng) override {
    offset_ = rng.uniform(-kStart, kStart);
    steps_ = 0;
    return observe();
  }

  // Reward 1 at the last step when the point ends within the success
  // distance, so the expert return is 1 regardless of the start.
  EnvStep step(const Value& action) override {
    const double a = std::clamp(std::get<ContinuousValue>(action).values.at(0), -1.0, 1.0);
    offset_ = std::clamp(offset_ - a, -kLimit, kLimit);
    ++steps_;
    const bool done = steps_ >= kHorizon;
    return {observe(), done && success() ? 1.0 : 0.0, done};
  }

  Value expert_action() const override { return ContinuousValue{{std::clamp(kGain * offset_, -1.0, 1.0)}}; }
  bool success() const override { return final_distance() < kSuccessDistance; }
  double final_distance() const { return std::abs(offset_); }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<LineReacher>(*this); }

 private:
  ObservationSet observe() const { return {{"offset", ContinuousValue{{offset_}}}}; }

  EnvSpec spec_;
  double offset_ = 0.0;
  int steps_ = 0;
};

enum class EnvKind { kGridReach, kGridReachPartial, kBanditA, kBanditB, kLineReacher };

inline std::unique_ptr<Environment> make_env(EnvKind kind) {
  switch (kind) {
    case EnvKind::kGridReach:
      return std::make_unique<GridReach>();
    case EnvKind::kGridReachPartial:
      return std::make_unique<GridReach>("gridreach_partial", 2);
    case EnvKind::kBanditA:
      return std::make_unique<TwoTaskBandit>(0);
    case EnvKind::kBanditB:
      return std::make_unique<TwoTaskBandit>(1);
    case EnvKind::kLineReacher:
      return std::make_unique<LineReacher>();
  }
  fail(ErrorCode::kDomain, "unknown environment kind");
}

inline EnvKind env_kind_from_name(const std::string& name) {
  if (name == "gridreach") return EnvKind::kGridReach;
  if (name == "gridreach_partial") return EnvKind::kGridReachPartial;
  if (name == "bandit_a") return EnvKind::kBanditA;
  if (name == "bandit_b") return EnvKind::kBanditB;
  if (name == "linereacher") return EnvKind::kLineReacher;
  fail(ErrorCode::kConfig, "unknown environment '" + name + "'");
}

inline std::unique_ptr<Environment> make_env(const std::string& name) {
  return make_env(env_kind_from_name(name));
}

// Plays the scripted expert for one episode. Each recorded timestep holds
// the observation, the expert action and the reward that action earned.
inline Episode expert_episode(Environment& env, Rng& rng) {
  Episode ep;
  ep.task_id = env.spec().task_id;
  ep.schema = env.spec().schema;
  ObservationSet obs = env.reset(rng);
  for (int t = 0; t < env.spec().horizon; ++t) {
    Value action = env.expert_action();
    EnvStep s = env.step(action);
    ep.timesteps.push_back({std::move(obs), std::move(action)});
    ep.rewards.push_back(s.reward);
    obs = std::move(s.observation);
    if (s.done) break;
  }
  return ep;
}

inline std::vector<Episode> collect_expert_episodes(Environment& env, size_t count, uint64_t seed) {
  Rng rng(seed);
  std::vector<Episode> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) out.push_back(expert_episode(env, rng));
  return out;
}

// Short English-like byte-text documents: a control-free corpus.
inline std::vector<Episode> synthetic_text_episodes(size_t count, uint64_t seed) {
  static const std::vector<std::string> kSubjects = {"the agent", "a robot", "the arm", "my cat",
                                                     "the player"};
  static const std::vector<std::string> kVerbs = {"moves", "reaches", "looks at", "stacks", "follows"};
  static const std::vector<std::string> kObjects = {"the goal", "a red block", "the left wall", "a ball",
                                                    "the light"};
  Rng rng(seed);
  std::vector<Episode> out;
  for (size_t i = 0; i < count; ++i) {
    std::string text;
    const int sentences = 1 + static_cast<int>(rng.below(3));
    for (int s = 0; s < sentences; ++s) {
      if (!text.empty()) text += ' ';
      text += kSubjects[rng.below(kSubjects.size())] + " " + kVerbs[rng.below(kVerbs.size())] + " " +
              kObjects[rng.below(kObjects.size())] + ".";
    }
    Episode ep;
    ep.task_id = "text";
    ep.schema.observations = {TensorSchema::text("text")};
    ep.timesteps.push_back({{{"text", TextValue{text}}}, std::nullopt});
    ep.rewards.push_back(0.0);
    out.push_back(std::move(ep));
  }
  return out;
}

}  // namespace seqpolicy
