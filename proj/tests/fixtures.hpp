#pragma once

// Episode builders shared by the unit and acceptance tests.

#include <string>
#include <vector>

#include "seqpolicy/random.hpp"
#include "seqpolicy/sequencer.hpp"

namespace fixture {

using namespace seqpolicy;

// A randomized episode together with the per-timestep counts it was built
// from, so layout identities can be checked against the construction.
struct LayoutCase {
  int64_t k = 0;  // text tokens
  int64_t m = 0;  // image patches
  int64_t n = 0;  // discrete + continuous tokens
  int64_t A = 0;  // action tokens
  int64_t T = 0;
  Episode episode;
};

inline std::string random_key(Rng& rng) {
  std::string key;
  const size_t len = 1 + rng.below(3);
  for (size_t i = 0; i < len; ++i) key.push_back(static_cast<char>('a' + rng.below(6)));
  return key;
}

inline LayoutCase random_layout_case(Rng& rng) {
  LayoutCase c;
  c.T = 1 + static_cast<int64_t>(rng.below(4));
  c.k = static_cast<int64_t>(rng.below(4));
  const int img_rows = static_cast<int>(rng.below(3));
  const int img_cols = 1 + static_cast<int>(rng.below(2));
  const int64_t n_disc = static_cast<int64_t>(rng.below(4));
  const int64_t n_cont = static_cast<int64_t>(rng.below(4));
  c.m = img_rows * img_cols;
  c.n = n_disc + n_cont;
  c.A = 1 + static_cast<int64_t>(rng.below(3));
  const bool continuous_action = rng.bernoulli(0.5);

  // Distinct keys; the prefixes keep them unique across streams.
  const std::string kt = "t" + random_key(rng), ki = "i" + random_key(rng);
  const std::string kd = "d" + random_key(rng), kc = "c" + random_key(rng);
  EpisodeSchema schema;
  if (c.k > 0) schema.observations.push_back(TensorSchema::text(kt));
  if (c.m > 0) schema.observations.push_back(TensorSchema::image(ki, 16 * img_rows, 16 * img_cols, 1));
  if (n_disc > 0) schema.observations.push_back(TensorSchema::discrete(kd, {n_disc}));
  if (n_cont > 0) schema.observations.push_back(TensorSchema::continuous(kc, {n_cont}, -3, 3));
  schema.action = continuous_action ? TensorSchema::continuous("act", {c.A}, -1, 1, true)
                                    : TensorSchema::discrete("act", {c.A}, true);
  schema.sort();

  Episode& ep = c.episode;
  ep.task_id = "layout";
  ep.schema = schema;
  for (int64_t t = 0; t < c.T; ++t) {
    Timestep ts;
    if (c.k > 0) {
      std::string text;
      for (int64_t i = 0; i < c.k; ++i) text.push_back(static_cast<char>('a' + rng.below(26)));
      ts.observations[kt] = TextValue{text};
    }
    if (c.m > 0) {
      Image img{16 * img_rows, 16 * img_cols, 1, {}};
      img.pixels.resize(static_cast<size_t>(img.height * img.width));
      for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.below(256));
      ts.observations[ki] = img;
    }
    if (n_disc > 0) {
      DiscreteValue d;
      for (int64_t i = 0; i < n_disc; ++i) d.values.push_back(static_cast<int32_t>(rng.below(1024)));
      ts.observations[kd] = d;
    }
    if (n_cont > 0) {
      ContinuousValue v;
      for (int64_t i = 0; i < n_cont; ++i) v.values.push_back(rng.uniform(-3, 3));
      ts.observations[kc] = v;
    }
    if (continuous_action) {
      ContinuousValue a;
      for (int64_t i = 0; i < c.A; ++i) a.values.push_back(rng.uniform(-1, 1));
      ts.action = a;
    } else {
      DiscreteValue a;
      for (int64_t i = 0; i < c.A; ++i) a.values.push_back(static_cast<int32_t>(rng.below(1024)));
      ts.action = a;
    }
    ep.timesteps.push_back(std::move(ts));
    ep.rewards.push_back(rng.uniform());
  }
  return c;
}

// One single-timestep episode per return value, in order.
inline std::vector<Episode> episodes_with_returns(const std::vector<double>& returns,
                                                  const std::string& task = "fixture") {
  std::vector<Episode> out;
  for (double r : returns) {
    Episode ep;
    ep.task_id = task;
    ep.schema.observations = {TensorSchema::discrete("obs", {1})};
    ep.schema.action = TensorSchema::discrete("act", {1}, true);
    ep.timesteps.push_back({{{"obs", DiscreteValue{{1}}}}, DiscreteValue{{2}}});
    ep.rewards.push_back(r);
    out.push_back(std::move(ep));
  }
  return out;
}

inline std::vector<double> one_to(int n) {
  std::vector<double> r;
  for (int i = 1; i <= n; ++i) r.push_back(i);
  return r;
}

}  // namespace fixture
