#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "seqpolicy/codec.hpp"
#include "seqpolicy/error.hpp"
#include "seqpolicy/random.hpp"

namespace seqpolicy {

enum class Mode { kEval, kPretrain, kFinetune };

inline bool is_training(Mode m) { return m != Mode::kEval; }

inline constexpr int kPatchPositionVocab = 128;
inline constexpr int kLocalPositionTable = 512;

enum class ElementRole : uint8_t {
  kText = 0,
  kImagePatch = 1,
  kObservation = 2,  // discrete or continuous observation token
  kSeparator = 3,
  kAction = 4,
  kPadding = 5,
};

inline bool is_observation_role(ElementRole r) {
  return r == ElementRole::kText || r == ElementRole::kImagePatch || r == ElementRole::kObservation;
}

struct QuantizedInterval {
  int lo = 0;
  int hi = 0;
};

namespace detail {
// Snap products that should be integral but picked up rounding noise.
inline double snap(double x) {
  const double r = std::round(x);
  return std::abs(x - r) < 1e-9 ? r : x;
}
}  // namespace detail

// Normalized [lo, hi] -> closed integer interval [floor(lo V), ceil(hi V)].
inline QuantizedInterval quantize_interval(Interval iv, int vocab = kPatchPositionVocab) {
  require(iv.lo >= 0.0 && iv.hi <= 1.0 && iv.lo < iv.hi, ErrorCode::kDomain,
          "patch interval must satisfy 0 <= lo < hi <= 1");
  QuantizedInterval q;
  q.lo = static_cast<int>(std::floor(detail::snap(iv.lo * vocab)));
  q.hi = std::min(static_cast<int>(std::ceil(detail::snap(iv.hi * vocab))), vocab);
  return q;
}

// Training draws uniformly from the quantized interval; evaluation takes its
// rounded mean. Indices are clamped into the table.
inline int patch_position_index(Interval iv, Mode mode, Rng* rng, int vocab = kPatchPositionVocab) {
  const QuantizedInterval q = quantize_interval(iv, vocab);
  int index;
  if (is_training(mode)) {
    require(rng != nullptr, ErrorCode::kContract, "training-mode patch positions need a stream");
    index = static_cast<int>(rng->uniform_int(q.lo, q.hi));
  } else {
    index = (q.lo + q.hi + 1) / 2;
  }
  return std::min(index, vocab - 1);
}

inline int separator_position(int table = kLocalPositionTable) { return table - 2; }
inline int action_position(int table = kLocalPositionTable) { return table - 1; }

// Observation elements count up from 0 within each timestep; every action
// element shares one index and the separator has its own. Padding gets -1.
inline std::vector<int32_t> local_position_indices(std::span<const ElementRole> roles,
                                                   std::span<const int32_t> timesteps,
                                                   int table = kLocalPositionTable) {
  require(roles.size() == timesteps.size(), ErrorCode::kShape, "roles and timestep ids differ in length");
  std::vector<int32_t> positions(roles.size(), -1);
  int32_t current_step = -1;
  int32_t counter = 0;
  for (size_t i = 0; i < roles.size(); ++i) {
    if (timesteps[i] != current_step) {
      current_step = timesteps[i];
      counter = 0;
    }
    switch (roles[i]) {
      case ElementRole::kSeparator:
        positions[i] = separator_position(table);
        break;
      case ElementRole::kAction:
        positions[i] = action_position(table);
        break;
      case ElementRole::kPadding:
        break;
      default:
        if (!(counter < table - 2))
          fail(ErrorCode::kCapacity,
               "observation longer than the local position table (" + std::to_string(table - 2) + " slots)");
        positions[i] = counter++;
    }
  }
  return positions;
}

}  // namespace seqpolicy
