#pragma once

// Learning-rate schedule and the Adam family update.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "seqpolicy/error.hpp"
#include "seqpolicy/model.hpp"

namespace seqpolicy {

struct ScheduleConfig {
  int64_t warmup_steps = 15000;
  double lr_start = 1e-7;
  double lr_max = 1e-4;
  int64_t decay_steps = 1'000'000;
  double decay_factor = 10.0;
  bool constant = false;  // fine-tuning: lr_max at every step

  void validate() const {
    require(warmup_steps >= 0 && decay_steps >= 0, ErrorCode::kConfig, "schedule lengths must be >= 0");
    require(lr_start >= 0 && lr_max > 0 && decay_factor >= 1, ErrorCode::kConfig,
            "schedule rates must be positive and decay_factor >= 1");
  }
};

// Linear warmup lr_start -> lr_max, then cosine lr_max -> lr_max/decay_factor,
// then constant.
inline double lr_schedule(int64_t step, const ScheduleConfig& s) {
  require(step >= 0, ErrorCode::kDomain, "lr_schedule step must be >= 0");
  if (s.constant) return s.lr_max;
  if (step < s.warmup_steps)
    return s.lr_start +
           (s.lr_max - s.lr_start) * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const double lr_min = s.lr_max / s.decay_factor;
  if (s.decay_steps == 0) return lr_min;
  const double progress =
      std::min(1.0, static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.decay_steps));
  return lr_min + 0.5 * (s.lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // decoupled; 0 for fine-tuning
  int batch = 16;
  int seq_len = 64;

  void validate() const {
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0 && weight_decay >= 0,
            ErrorCode::kConfig, "invalid optimizer hyperparameters");
    require(batch > 0 && seq_len > 0, ErrorCode::kConfig, "batch and seq_len must be positive");
  }
};

template <typename S>
struct AdamState {
  uint64_t step = 0;
  std::vector<AlignedVector<S>> m, v;
};

// Parameters with a single axis (biases, norm gains) are exempt from decay.
inline bool decays(const std::vector<int64_t>& shape) { return shape.size() >= 2; }

// One AdamW update. Gradients are checked for non-finite entries first; the
// update is not applied if any is found.
template <typename S>
void optimizer_step(ParameterSet<S>& params, AdamState<S>& state, const OptimizerConfig& cfg, double lr) {
  auto& all = params.all();
  for (const auto& p : all)
    for (size_t i = 0; i < p.grad.size(); ++i)
      if (!(std::isfinite(static_cast<double>(p.grad[i]))))
        fail(ErrorCode::kNumeric, "non-finite gradient in '" + p.name + "' at index " + std::to_string(i));
  if (state.m.size() != all.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : all) {
      state.m.emplace_back(p.size(), S(0));
      state.v.emplace_back(p.size(), S(0));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S step_size = static_cast<S>(lr / c1);
  const S inv_sqrt_c2 = static_cast<S>(1.0 / std::sqrt(c2));
  const S eps = static_cast<S>(cfg.eps);
  for (size_t k = 0; k < all.size(); ++k) {
    auto& p = all[k];
    if (!(state.m[k].size() == p.size()))
      fail(ErrorCode::kShape, "optimizer state does not match '" + p.name + "'");
    const S decay = decays(p.shape) ? static_cast<S>(lr * cfg.weight_decay) : S(0);
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(p.size());
    Eigen::Map<Arr> w(p.value.data(), n), m(state.m[k].data(), n), v(state.v[k].data(), n);
    const Eigen::Map<const Arr> g(p.grad.data(), n);
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.square();
    w -= step_size * m / (v.sqrt() * inv_sqrt_c2 + eps) + decay * w;
  }
}

}  // namespace seqpolicy
