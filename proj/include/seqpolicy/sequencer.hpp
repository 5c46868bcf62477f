#pragma once

// Episodes -> flat element sequences with loss masks, plus training-time
// windowing, prompt prepending and batch assembly.

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seqpolicy/codec.hpp"
#include "seqpolicy/error.hpp"
#include "seqpolicy/positions.hpp"
#include "seqpolicy/random.hpp"

namespace seqpolicy {

struct Element {
  ElementRole role = ElementRole::kPadding;
  TokenId token{};
  std::shared_ptr<const ImagePatch> patch;

  static Element of_token(ElementRole role, TokenId token) { return {role, token, nullptr}; }
  static Element of_patch(ImagePatch patch) {
    return {ElementRole::kImagePatch, TokenId{}, std::make_shared<const ImagePatch>(std::move(patch))};
  }
  static Element padding() { return {}; }

  bool is_patch() const { return role == ElementRole::kImagePatch; }
  bool is_padding() const { return role == ElementRole::kPadding; }

  friend bool operator==(const Element& a, const Element& b) {
    if (a.role != b.role || a.token != b.token) return false;
    if (!a.patch || !b.patch) return !a.patch && !b.patch;
    return a.patch->pixels == b.patch->pixels && a.patch->rows == b.patch->rows &&
           a.patch->cols == b.patch->cols;
  }
};

inline bool role_is_masked(ElementRole r) { return r == ElementRole::kText || r == ElementRole::kAction; }

inline std::optional<TokenId> role_target(const Element& e) {
  switch (e.role) {
    case ElementRole::kText:
    case ElementRole::kSeparator:
    case ElementRole::kAction:
      return e.token;
    default:
      return std::nullopt;
  }
}

struct ElementSequence {
  std::vector<Element> elements;
  std::vector<int32_t> local_positions;
  std::vector<uint8_t> mask;
  std::vector<std::optional<TokenId>> targets;
  std::vector<int32_t> timesteps;  // source timestep per element, -1 for padding
  std::string task_id;
  std::string dataset;
  size_t prompt_length = 0;  // leading elements that came from a prompt

  size_t size() const { return elements.size(); }
  bool empty() const { return elements.empty(); }

  void push(const Element& e, int32_t timestep, int32_t local_position) {
    elements.push_back(e);
    timesteps.push_back(e.is_padding() ? -1 : timestep);
    local_positions.push_back(e.is_padding() ? -1 : local_position);
    mask.push_back(role_is_masked(e.role) ? 1 : 0);
    targets.push_back(role_target(e));
  }

  std::vector<ElementRole> roles() const {
    std::vector<ElementRole> r;
    r.reserve(elements.size());
    for (const auto& e : elements) r.push_back(e.role);
    return r;
  }

  ElementSequence slice(size_t begin, size_t end) const {
    require(begin <= end && end <= size(), ErrorCode::kShape, "slice out of bounds");
    ElementSequence out;
    out.task_id = task_id;
    out.dataset = dataset;
    out.prompt_length = begin < prompt_length ? std::min(end, prompt_length) - begin : 0;
    auto copy = [&](const auto& from, auto& to) {
      to.assign(from.begin() + static_cast<ptrdiff_t>(begin), from.begin() + static_cast<ptrdiff_t>(end));
    };
    copy(elements, out.elements);
    copy(local_positions, out.local_positions);
    copy(mask, out.mask);
    copy(targets, out.targets);
    copy(timesteps, out.timesteps);
    return out;
  }

  void append(const ElementSequence& other) {
    elements.insert(elements.end(), other.elements.begin(), other.elements.end());
    local_positions.insert(local_positions.end(), other.local_positions.begin(), other.local_positions.end());
    mask.insert(mask.end(), other.mask.begin(), other.mask.end());
    targets.insert(targets.end(), other.targets.begin(), other.targets.end());
    timesteps.insert(timesteps.end(), other.timesteps.begin(), other.timesteps.end());
  }

  size_t unpadded_size() const {
    size_t n = size();
    while (n > 0 && elements[n - 1].is_padding()) --n;
    return n;
  }

  void pad_to(size_t length) {
    while (size() < length) push(Element::padding(), -1, -1);
  }

  size_t mask_count() const {
    size_t n = 0;
    for (uint8_t m : mask) n += m;
    return n;
  }

  void check_invariants() const {
    const size_t n = elements.size();
    require(mask.size() == n && targets.size() == n && local_positions.size() == n && timesteps.size() == n,
            ErrorCode::kShape, "element sequence fields differ in length");
    for (size_t i = 0; i < n; ++i) {
      const Element& e = elements[i];
      if (!(mask[i] == (role_is_masked(e.role) ? 1 : 0)))
        fail(ErrorCode::kContract, "mask bit disagrees with element role at " + std::to_string(i));
      if (!(targets[i].has_value() == role_target(e).has_value()))
        fail(ErrorCode::kContract, "target presence disagrees with element role at " + std::to_string(i));
      if (!(e.is_patch() == (e.patch != nullptr)))
        fail(ErrorCode::kContract, "patch payload mismatch at " + std::to_string(i));
    }
  }

  friend bool operator==(const ElementSequence&, const ElementSequence&) = default;
};

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeSchema {
  std::vector<TensorSchema> observations;  // sorted by key
  std::optional<TensorSchema> action;

  const TensorSchema& observation(const std::string& key) const {
    auto it = std::lower_bound(observations.begin(), observations.end(), key,
                               [](const TensorSchema& s, const std::string& k) { return s.key < k; });
    if (!(it != observations.end() && it->key == key))
      fail(ErrorCode::kSchema, "no schema for observation '" + key + "'");
    return *it;
  }

  void sort() {
    std::sort(observations.begin(), observations.end(),
              [](const TensorSchema& a, const TensorSchema& b) { return a.key < b.key; });
  }

  void validate() const {
    for (size_t i = 0; i < observations.size(); ++i) {
      observations[i].validate();
      if (!(!observations[i].is_action))
        fail(ErrorCode::kSchema, "observation '" + observations[i].key + "' is flagged as an action");
      if (i > 0)
        require(observations[i - 1].key < observations[i].key, ErrorCode::kSchema,
                "observation schemas must be unique and sorted by key");
    }
    if (action) {
      action->validate();
      require(action->is_action, ErrorCode::kSchema, "action schema must set is_action");
      require(action->modality == Modality::kDiscrete || action->modality == Modality::kContinuous,
              ErrorCode::kSchema, "actions must be discrete or continuous");
    }
  }

  friend bool operator==(const EpisodeSchema&, const EpisodeSchema&) = default;
};

using ObservationSet = std::map<std::string, Value>;

struct Timestep {
  ObservationSet observations;
  std::optional<Value> action;  // absent on a terminal timestep
  friend bool operator==(const Timestep&, const Timestep&) = default;
};

struct Episode {
  std::string task_id;
  EpisodeSchema schema;
  std::vector<Timestep> timesteps;
  std::vector<double> rewards;  // one per timestep

  double total_return() const {
    double sum = 0.0;
    for (double r : rewards) sum += r;
    return sum;
  }

  void validate() const {
    schema.validate();
    require(rewards.size() == timesteps.size(), ErrorCode::kSchema,
            "episode needs exactly one reward per timestep");
    for (const Timestep& ts : timesteps) {
      require(ts.observations.size() == schema.observations.size(), ErrorCode::kSchema,
              "timestep observation keys do not match the episode schema");
      for (const auto& [key, value] : ts.observations) check_value(value, schema.observation(key));
      if (ts.action) {
        require(schema.action.has_value(), ErrorCode::kSchema, "episode has no action schema");
        check_value(*ts.action, *schema.action);
      }
    }
  }

  friend bool operator==(const Episode&, const Episode&) = default;
};

// Text streams first, then images, then tensors; lexicographic by key within
// each class; codec order within each stream.
inline std::vector<Element> order_observation(const ObservationSet& observations, const EpisodeSchema& schema,
                                              const TextTokenizer& tokenizer = byte_tokenizer()) {
  std::vector<Element> out;
  auto emit_class = [&](auto&& in_class, auto&& emit) {
    for (const auto& [key, value] : observations) {
      const TensorSchema& s = schema.observation(key);
      if (in_class(s.modality)) emit(value, s);
    }
  };
  emit_class([](Modality m) { return m == Modality::kText; },
             [&](const Value& v, const TensorSchema& s) {
               for (TokenId t : encode_tokens(v, s, tokenizer))
                 out.push_back(Element::of_token(ElementRole::kText, t));
             });
  emit_class([](Modality m) { return m == Modality::kImage; },
             [&](const Value& v, const TensorSchema& s) {
               check_value(v, s);
               for (ImagePatch& p : image_to_patches(std::get<Image>(v)))
                 out.push_back(Element::of_patch(std::move(p)));
             });
  emit_class([](Modality m) { return m == Modality::kDiscrete || m == Modality::kContinuous; },
             [&](const Value& v, const TensorSchema& s) {
               for (TokenId t : encode_tokens(v, s))
                 out.push_back(Element::of_token(ElementRole::kObservation, t));
             });
  return out;
}

inline std::vector<Element> encode_action(const Value& action, const EpisodeSchema& schema) {
  require(schema.action.has_value(), ErrorCode::kSchema, "no action schema");
  std::vector<Element> out;
  for (TokenId t : encode_tokens(action, *schema.action))
    out.push_back(Element::of_token(ElementRole::kAction, t));
  return out;
}

// observation ++ [separator] ++ action
inline std::vector<Element> flatten_timestep(const Timestep& ts, const EpisodeSchema& schema,
                                             const TextTokenizer& tokenizer = byte_tokenizer()) {
  std::vector<Element> out = order_observation(ts.observations, schema, tokenizer);
  out.push_back(Element::of_token(ElementRole::kSeparator, kSeparator));
  if (ts.action) {
    auto action = encode_action(*ts.action, schema);
    out.insert(out.end(), action.begin(), action.end());
  }
  return out;
}

struct FlattenOptions {
  const TextTokenizer* tokenizer = &byte_tokenizer();
  int local_position_table = kLocalPositionTable;
};

// Builds the sequence for timesteps [first, last) keeping the episode's
// timestep numbering.
inline ElementSequence flatten_timesteps(const Episode& ep, size_t first, size_t last,
                                         const FlattenOptions& opts = {}) {
  ep.schema.validate();
  ElementSequence seq;
  seq.task_id = ep.task_id;
  std::vector<ElementRole> roles;
  for (size_t t = first; t < last; ++t) {
    for (const Element& e : flatten_timestep(ep.timesteps[t], ep.schema, *opts.tokenizer)) {
      seq.push(e, static_cast<int32_t>(t), -1);
    }
  }
  seq.local_positions = local_position_indices(seq.roles(), seq.timesteps, opts.local_position_table);
  return seq;
}

inline ElementSequence flatten_episode(const Episode& ep, const FlattenOptions& opts = {}) {
  ep.validate();
  return flatten_timesteps(ep, 0, ep.timesteps.size(), opts);
}

// Per-timestep element counts: k text, m patches, n tensor tokens, A action.
struct SequenceLayout {
  int64_t k = 0, m = 0, n = 0, A = 0, T = 0;
  int64_t length() const { return T * (k + m + n + 1 + A); }
  int64_t masked_count() const { return T * (k + A); }
  friend bool operator==(const SequenceLayout&, const SequenceLayout&) = default;
};

// Layout of one timestep, with T = 1.
inline SequenceLayout timestep_layout(const Timestep& ts, const EpisodeSchema& schema,
                                      const TextTokenizer& tokenizer = byte_tokenizer()) {
  SequenceLayout layout;
  layout.T = 1;
  for (const Element& e : flatten_timestep(ts, schema, tokenizer)) {
    switch (e.role) {
      case ElementRole::kText:
        ++layout.k;
        break;
      case ElementRole::kImagePatch:
        ++layout.m;
        break;
      case ElementRole::kObservation:
        ++layout.n;
        break;
      case ElementRole::kAction:
        ++layout.A;
        break;
      default:
        break;
    }
  }
  return layout;
}

// The layout of an episode whose timesteps all share one shape; nullopt when
// the per-step counts vary (e.g. variable-length text or a terminal step).
inline std::optional<SequenceLayout> uniform_layout(const Episode& ep,
                                                    const TextTokenizer& tokenizer = byte_tokenizer()) {
  if (ep.timesteps.empty()) return SequenceLayout{};
  SequenceLayout first = timestep_layout(ep.timesteps.front(), ep.schema, tokenizer);
  for (const Timestep& ts : ep.timesteps)
    if (!(timestep_layout(ts, ep.schema, tokenizer) == first)) return std::nullopt;
  first.T = static_cast<int64_t>(ep.timesteps.size());
  return first;
}

// ---------------------------------------------------------------------------
// Training-time transforms

inline ElementSequence window_at(const ElementSequence& seq, size_t length, size_t start) {
  require(length >= 1, ErrorCode::kDomain, "window length must be at least 1");
  require(start < seq.size() || (seq.empty() && start == 0), ErrorCode::kShape, "window start out of range");
  ElementSequence out = seq.slice(start, std::min(seq.size(), start + length));
  out.pad_to(length);
  return out;
}

// Contiguous window of `length` elements with a uniform start; short
// sequences come back right-padded with mask-0 padding.
inline ElementSequence sample_subsequence(const ElementSequence& seq, size_t length, Rng& rng) {
  require(!seq.empty(), ErrorCode::kEmptyInput, "cannot sample from an empty sequence");
  require(length >= 1, ErrorCode::kDomain, "window length must be at least 1");
  size_t start = 0;
  if (seq.size() > length) start = static_cast<size_t>(rng.below(seq.size() - length + 1));
  return window_at(seq, length, start);
}

struct PromptConfig {
  double probability = 0.25;
  double end_probability = 0.5;
  double budget_fraction = 0.5;  // of the training window
};

enum class PromptChoice { kNone, kEnd, kUniform };

struct PromptStats {
  uint64_t items = 0;
  uint64_t prompted = 0;
  uint64_t end = 0;
  uint64_t uniform = 0;
  uint64_t skipped_no_source = 0;

  double prompted_fraction() const {
    return items == 0 ? 0.0 : static_cast<double>(prompted) / static_cast<double>(items);
  }
};

inline size_t prompt_budget(size_t length, const PromptConfig& cfg = {}) {
  return std::max<size_t>(1, static_cast<size_t>(cfg.budget_fraction * static_cast<double>(length)));
}

// Prepends a prompt cut from `source` and keeps the leftmost `length`
// elements. The prompt is the last `budget` elements (kEnd) or a window at a
// uniform offset (kUniform).
inline ElementSequence prepend_prompt(const ElementSequence& item, const ElementSequence& source,
                                      size_t length, PromptChoice choice, size_t budget, Rng& rng) {
  if (choice == PromptChoice::kNone) return item;
  if (!(source.task_id == item.task_id))
    fail(ErrorCode::kSchema,
         "prompt source task '" + source.task_id + "' differs from item task '" + item.task_id + "'");
  const size_t source_len = source.unpadded_size();
  require(source_len > 0, ErrorCode::kEmptyInput, "prompt source is empty");
  const size_t prompt_len = std::min(budget, source_len);
  size_t start = source_len - prompt_len;
  if (choice == PromptChoice::kUniform) start = static_cast<size_t>(rng.below(source_len - prompt_len + 1));

  ElementSequence out = source.slice(start, start + prompt_len);
  out.prompt_length = prompt_len;
  out.task_id = item.task_id;
  out.dataset = item.dataset;
  out.append(item.slice(0, item.unpadded_size()));
  if (out.size() > length) out = out.slice(0, length);
  out.pad_to(length);
  return out;
}

// With probability cfg.probability prepends a same-task prompt; half of the
// prompts are episode endings, half uniformly placed windows. A missing
// source skips prompting and is counted.
inline ElementSequence apply_prompt(const ElementSequence& item, const ElementSequence* source, size_t length,
                                    Rng& rng, const PromptConfig& cfg = {}, PromptStats* stats = nullptr) {
  if (stats) ++stats->items;
  if (!rng.bernoulli(cfg.probability)) return item;
  if (source == nullptr) {
    if (stats) ++stats->skipped_no_source;
    return item;
  }
  const PromptChoice choice =
      rng.bernoulli(cfg.end_probability) ? PromptChoice::kEnd : PromptChoice::kUniform;
  if (stats) {
    ++stats->prompted;
    ++(choice == PromptChoice::kEnd ? stats->end : stats->uniform);
  }
  return prepend_prompt(item, *source, length, choice, prompt_budget(length, cfg), rng);
}

// Rows of equal length. Targets are pre-shifted: position l is scored against
// element l + 1, and the last position of each row carries no target.
struct MaskedBatch {
  size_t length = 0;
  std::vector<ElementSequence> items;
  std::vector<int32_t> target_ids;  // batch * length, -1 where absent
  std::vector<uint8_t> loss_mask;   // batch * length

  size_t batch_size() const { return items.size(); }
  std::span<const int32_t> targets(size_t b) const {
    return std::span<const int32_t>(target_ids).subspan(b * length, length);
  }
  std::span<const uint8_t> mask(size_t b) const {
    return std::span<const uint8_t>(loss_mask).subspan(b * length, length);
  }
  size_t masked_count() const {
    size_t n = 0;
    for (uint8_t m : loss_mask) n += m;
    return n;
  }
};

inline MaskedBatch assemble_batch(std::vector<ElementSequence> items) {
  require(!items.empty(), ErrorCode::kEmptyInput, "cannot assemble an empty batch");
  MaskedBatch batch;
  batch.length = items.front().size();
  for (const auto& item : items) {
    require(item.size() == batch.length, ErrorCode::kShape, "batch items have ragged lengths");
    item.check_invariants();
  }
  batch.target_ids.assign(items.size() * batch.length, -1);
  batch.loss_mask.assign(items.size() * batch.length, 0);
  for (size_t b = 0; b < items.size(); ++b) {
    for (size_t l = 0; l + 1 < batch.length; ++l) {
      const size_t i = b * batch.length + l;
      if (items[b].targets[l + 1]) batch.target_ids[i] = items[b].targets[l + 1]->value();
      batch.loss_mask[i] = items[b].mask[l + 1];
    }
  }
  batch.items = std::move(items);
  return batch;
}

inline std::vector<ElementSequence> unbatch(const MaskedBatch& batch) { return batch.items; }

}  // namespace seqpolicy
