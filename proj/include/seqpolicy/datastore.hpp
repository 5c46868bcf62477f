#pragma once

// Episode files, expert-return filtering and weighted dataset mixing.
//
// Episode file: a concatenation of records
//
//   record := "SQPE" | u32 version | u32 body_len | body | u32 crc32(body)
//   body   := str task_id | u32 n_obs | schema * n_obs | u8 has_action [schema]
//             | u64 n_steps | step * n_steps
//   schema := str key | u8 modality | u8 is_action | u8 compand | u32 ndim
//             | i64 * ndim | f64 low | f64 high
//   step   := f64 reward | u8 has_action | value per observation schema
//             (schema order) | [action value]
//   value  := text: str | image: u32 h, u32 w, u32 c, bytes
//             | discrete: i32 * count | continuous: f64 * count
//   str    := u32 length | UTF-8 bytes
//
// All integers little-endian. Raw values are stored, never tokens.

#include <glob.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "seqpolicy/binary_io.hpp"
#include "seqpolicy/sequencer.hpp"

namespace seqpolicy {

inline constexpr char kEpisodeMagic[4] = {'S', 'Q', 'P', 'E'};
inline constexpr uint32_t kEpisodeFormatVersion = 1;

namespace detail {

inline void write_schema(ByteWriter& w, const TensorSchema& s) {
  w.str(s.key);
  w.u8(static_cast<uint8_t>(s.modality));
  w.u8(s.is_action ? 1 : 0);
  w.u8(s.compand ? 1 : 0);
  w.u32(static_cast<uint32_t>(s.shape.size()));
  for (int64_t d : s.shape) w.i64(d);
  w.f64(s.low);
  w.f64(s.high);
}

inline TensorSchema read_schema(ByteReader& r) {
  TensorSchema s;
  s.key = r.str();
  const uint8_t modality = r.u8();
  if (!(modality <= 3)) fail(ErrorCode::kSchema, "unknown modality code " + std::to_string(modality));
  s.modality = static_cast<Modality>(modality);
  s.is_action = r.u8() != 0;
  s.compand = r.u8() != 0;
  const uint32_t ndim = r.u32();
  if (!(ndim <= 16)) fail(ErrorCode::kSchema, "implausible tensor rank " + std::to_string(ndim));
  for (uint32_t i = 0; i < ndim; ++i) s.shape.push_back(r.i64());
  s.low = r.f64();
  s.high = r.f64();
  s.validate();
  return s;
}

inline void write_value(ByteWriter& w, const Value& v) {
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, TextValue>) {
          w.str(x.text);
        } else if constexpr (std::is_same_v<T, Image>) {
          w.u32(static_cast<uint32_t>(x.height));
          w.u32(static_cast<uint32_t>(x.width));
          w.u32(static_cast<uint32_t>(x.channels));
          w.bytes(std::span<const uint8_t>(x.pixels));
        } else if constexpr (std::is_same_v<T, DiscreteValue>) {
          for (int32_t e : x.values) w.i32(e);
        } else {
          for (double e : x.values) w.f64(e);
        }
      },
      v);
}

inline Value read_value(ByteReader& r, const TensorSchema& s) {
  switch (s.modality) {
    case Modality::kText:
      return TextValue{r.str()};
    case Modality::kImage: {
      Image img;
      img.height = static_cast<int>(r.u32());
      img.width = static_cast<int>(r.u32());
      img.channels = static_cast<int>(r.u32());
      if (!(img.height == s.shape[0] && img.width == s.shape[1] && img.channels == s.shape[2]))
        fail(ErrorCode::kSchema, "stored image does not match schema '" + s.key + "'");
      auto bytes = r.bytes(static_cast<size_t>(img.height) * img.width * img.channels);
      img.pixels.assign(bytes.begin(), bytes.end());
      return img;
    }
    case Modality::kDiscrete: {
      DiscreteValue d;
      d.values.resize(s.element_count());
      for (auto& e : d.values) e = r.i32();
      return d;
    }
    case Modality::kContinuous: {
      ContinuousValue c;
      c.values.resize(s.element_count());
      for (auto& e : c.values) e = r.f64();
      return c;
    }
  }
  fail(ErrorCode::kSchema, "unknown modality");
}

}  // namespace detail

inline std::string encode_episode(const Episode& ep) {
  ep.validate();
  ByteWriter body;
  body.str(ep.task_id);
  body.u32(static_cast<uint32_t>(ep.schema.observations.size()));
  for (const auto& s : ep.schema.observations) detail::write_schema(body, s);
  body.u8(ep.schema.action ? 1 : 0);
  if (ep.schema.action) detail::write_schema(body, *ep.schema.action);
  body.u64(ep.timesteps.size());
  for (size_t t = 0; t < ep.timesteps.size(); ++t) {
    const Timestep& ts = ep.timesteps[t];
    body.f64(ep.rewards[t]);
    body.u8(ts.action ? 1 : 0);
    for (const auto& s : ep.schema.observations) detail::write_value(body, ts.observations.at(s.key));
    if (ts.action) detail::write_value(body, *ts.action);
  }
  require(body.size() <= UINT32_MAX, ErrorCode::kRange, "episode record exceeds 4 GiB");

  ByteWriter record;
  record.bytes(std::string_view(kEpisodeMagic, 4));
  record.u32(kEpisodeFormatVersion);
  record.u32(static_cast<uint32_t>(body.size()));
  record.bytes(body.data());
  record.u32(crc32_of(body.data()));
  return record.take();
}

// Decodes one record starting at the reader's position. Nothing is returned
// unless the whole record is present and its checksum matches.
inline Episode decode_episode(ByteReader& reader) {
  auto magic = reader.bytes(4);
  require(magic == std::string_view(kEpisodeMagic, 4), ErrorCode::kVersionMismatch,
          "not an episode record (bad magic)");
  const uint32_t version = reader.u32();
  if (!(version == kEpisodeFormatVersion))
    fail(ErrorCode::kVersionMismatch, "episode format version " + std::to_string(version) + ", expected " +
                                          std::to_string(kEpisodeFormatVersion));
  const uint32_t body_len = reader.u32();
  const std::string_view body = reader.bytes(body_len);
  const uint32_t crc = reader.u32();
  require(crc == crc32_of(body), ErrorCode::kChecksum, "episode record checksum mismatch");

  ByteReader r(body);
  Episode ep;
  ep.task_id = r.str();
  const uint32_t n_obs = r.u32();
  for (uint32_t i = 0; i < n_obs; ++i) ep.schema.observations.push_back(detail::read_schema(r));
  if (r.u8()) ep.schema.action = detail::read_schema(r);
  ep.schema.validate();
  const uint64_t steps = r.u64();
  for (uint64_t t = 0; t < steps; ++t) {
    Timestep ts;
    ep.rewards.push_back(r.f64());
    const bool has_action = r.u8() != 0;
    for (const auto& s : ep.schema.observations) ts.observations.emplace(s.key, detail::read_value(r, s));
    if (has_action) {
      require(ep.schema.action.has_value(), ErrorCode::kSchema, "action stored without a schema");
      ts.action = detail::read_value(r, *ep.schema.action);
    }
    ep.timesteps.push_back(std::move(ts));
  }
  require(r.done(), ErrorCode::kSchema, "trailing bytes inside episode record");
  ep.validate();
  return ep;
}

inline void write_episode(const Episode& ep, std::ostream& sink) {
  const std::string bytes = encode_episode(ep);
  sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(sink.good(), ErrorCode::kIo, "failed writing episode record");
}

inline Episode read_episode(std::istream& source) {
  std::string data((std::istreambuf_iterator<char>(source)), std::istreambuf_iterator<char>());
  ByteReader reader(data);
  return decode_episode(reader);
}

inline void save_episodes(const std::string& path, std::span<const Episode> episodes) {
  std::string data;
  for (const Episode& ep : episodes) data += encode_episode(ep);
  write_file(path, data);
}

inline std::vector<Episode> load_episodes(const std::string& path) {
  const std::string data = read_file(path);
  ByteReader reader(data);
  std::vector<Episode> episodes;
  while (!reader.done()) episodes.push_back(decode_episode(reader));
  return episodes;
}

// ---------------------------------------------------------------------------
// Expert return and filtering

struct ExpertReturn {
  double value = 0.0;
  size_t window = 1;
};

// W = max(1, min(1000, floor(N / 10))); the maximum over all length-W
// windows (in collection order) of the mean return.
inline ExpertReturn expert_return(std::span<const double> returns) {
  require(!returns.empty(), ErrorCode::kEmptyInput, "expert return of an empty episode set");
  const size_t n = returns.size();
  const size_t window = std::max<size_t>(1, std::min<size_t>(1000, n / 10));
  std::vector<long double> prefix(n + 1, 0.0L);
  for (size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + returns[i];
  long double best = -INFINITY;
  for (size_t j = 0; j + window <= n; ++j) best = std::max(best, prefix[j + window] - prefix[j]);
  return {static_cast<double>(best / static_cast<long double>(window)), window};
}

struct FilterReport {
  std::string task_id;
  double expert_return = 0.0;
  size_t window = 1;
  double fraction = 0.8;
  double threshold = 0.0;
  size_t kept = 0;
  size_t dropped = 0;
};

struct FilterResult {
  std::vector<Episode> kept;
  FilterReport report;
};

// Keeps episodes whose return reaches fraction * expert return. The expert
// return is computed over `episodes` unless a reference from an earlier pass
// over the full collection is supplied.
inline FilterResult filter_episodes(std::vector<Episode> episodes, double fraction = 0.8,
                                    std::optional<ExpertReturn> reference = std::nullopt) {
  std::vector<double> returns;
  returns.reserve(episodes.size());
  for (const Episode& ep : episodes) returns.push_back(ep.total_return());
  const ExpertReturn expert = reference ? *reference : expert_return(returns);

  FilterResult result;
  result.report.task_id = episodes.empty() ? "" : episodes.front().task_id;
  result.report.expert_return = expert.value;
  result.report.window = expert.window;
  result.report.fraction = fraction;
  result.report.threshold = fraction * expert.value;
  for (size_t i = 0; i < episodes.size(); ++i) {
    if (returns[i] >= result.report.threshold) {
      result.kept.push_back(std::move(episodes[i]));
    } else {
      ++result.report.dropped;
    }
  }
  result.report.kept = result.kept.size();
  return result;
}

// Groups by task id (first-appearance order) and filters each group.
inline std::vector<FilterResult> filter_by_task(const std::vector<Episode>& episodes, double fraction = 0.8) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<Episode>> groups;
  for (const Episode& ep : episodes) {
    auto [it, inserted] = groups.try_emplace(ep.task_id);
    if (inserted) order.push_back(ep.task_id);
    it->second.push_back(ep);
  }
  std::vector<FilterResult> results;
  for (const auto& task : order) results.push_back(filter_episodes(std::move(groups[task]), fraction));
  return results;
}

// ---------------------------------------------------------------------------
// Manifests
//
//   # comment
//   [dataset-name]
//   path = relative/or/absolute/glob*.ep
//   weight = 0.75
//   tasks = task_a, task_b      (optional filter)

struct DatasetManifest {
  std::string name;
  std::vector<std::string> paths;  // globs
  double sample_weight = 1.0;
  std::set<std::string> task_ids;  // empty = all
};

namespace detail {
inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}
}  // namespace detail

inline std::vector<DatasetManifest> parse_manifest(std::string_view text) {
  std::vector<DatasetManifest> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = "manifest line " + std::to_string(lineno);
    std::string s = detail::trim(line.substr(0, line.find('#')));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (!(s.back() == ']' && s.size() > 2)) fail(ErrorCode::kConfig, where + ": malformed section");
      out.push_back({});
      out.back().name = detail::trim(std::string_view(s).substr(1, s.size() - 2));
      continue;
    }
    if (!(!out.empty())) fail(ErrorCode::kConfig, where + ": key outside a [dataset] section");
    const auto eq = s.find('=');
    if (!(eq != std::string::npos)) fail(ErrorCode::kConfig, where + ": expected key = value");
    const std::string key = detail::trim(std::string_view(s).substr(0, eq));
    const std::string value = detail::trim(std::string_view(s).substr(eq + 1));
    DatasetManifest& m = out.back();
    if (key == "path") {
      m.paths.push_back(value);
    } else if (key == "weight") {
      try {
        size_t used = 0;
        m.sample_weight = std::stod(value, &used);
        if (!(used == value.size())) fail(ErrorCode::kConfig, where + ": bad weight");
      } catch (const std::logic_error&) {
        fail(ErrorCode::kConfig, where + ": bad weight '" + value + "'");
      }
    } else if (key == "tasks") {
      std::istringstream items(value);
      std::string task;
      while (std::getline(items, task, ','))
        if (auto t = detail::trim(task); !t.empty()) m.task_ids.insert(t);
    } else {
      fail(ErrorCode::kConfig, where + ": unknown key '" + key + "'");
    }
  }
  for (const auto& m : out) {
    if (!(m.sample_weight > 0 && std::isfinite(m.sample_weight)))
      fail(ErrorCode::kConfig, "dataset '" + m.name + "' needs a positive sample weight");
  }
  return out;
}

inline std::string format_manifest(std::span<const DatasetManifest> manifests) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& m : manifests) {
    out << "[" << m.name << "]\n";
    for (const auto& p : m.paths) out << "path = " << p << "\n";
    out << "weight = " << m.sample_weight << "\n";
    if (!m.task_ids.empty()) {
      out << "tasks = ";
      bool first = true;
      for (const auto& t : m.task_ids) {
        out << (first ? "" : ", ") << t;
        first = false;
      }
      out << "\n";
    }
    out << "\n";
  }
  return out.str();
}

inline std::vector<DatasetManifest> load_manifest(const std::string& path) {
  auto manifests = parse_manifest(read_file(path));
  const auto base = std::filesystem::path(path).parent_path();
  for (auto& m : manifests)
    for (auto& p : m.paths)
      if (std::filesystem::path(p).is_relative()) p = (base / p).string();
  return manifests;
}

inline std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0)
    for (size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  ::globfree(&g);
  if (!(rc == 0 || rc == GLOB_NOMATCH)) fail(ErrorCode::kIo, "glob failed for '" + pattern + "'");
  std::sort(out.begin(), out.end());
  return out;
}

// Every episode named by the manifest's path patterns, in sorted file order.
// A pattern that matches nothing is an error rather than an empty dataset.
inline std::vector<Episode> load_manifest_episodes(const DatasetManifest& manifest) {
  std::vector<Episode> episodes;
  for (const auto& pattern : manifest.paths) {
    const auto files = expand_glob(pattern);
    require(!files.empty(), ErrorCode::kExhausted,
            "dataset '" + manifest.name + "': no file matches '" + pattern + "'");
    for (const auto& file : files)
      for (auto& ep : load_episodes(file)) episodes.push_back(std::move(ep));
  }
  return episodes;
}

// ---------------------------------------------------------------------------
// Mixture sampling

// Episodes of one dataset, pre-flattened, indexed by task.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Episode> episodes;
  std::vector<ElementSequence> sequences;
  std::map<std::string, std::vector<size_t>> by_task;

  static Dataset from_episodes(DatasetManifest manifest, std::vector<Episode> episodes,
                               const FlattenOptions& opts = {}) {
    Dataset d;
    d.manifest = std::move(manifest);
    for (auto& ep : episodes) {
      if (!d.manifest.task_ids.empty() && !d.manifest.task_ids.contains(ep.task_id)) continue;
      ElementSequence seq = flatten_episode(ep, opts);
      if (seq.empty()) continue;
      seq.dataset = d.manifest.name;
      d.by_task[ep.task_id].push_back(d.episodes.size());
      d.sequences.push_back(std::move(seq));
      d.episodes.push_back(std::move(ep));
    }
    return d;
  }

  static Dataset load(const DatasetManifest& manifest, const FlattenOptions& opts = {}) {
    return from_episodes(manifest, load_manifest_episodes(manifest), opts);
  }
};

// Draws dataset d with probability w_d / sum(w), then a uniform episode, a
// uniform window of `length` elements, and optionally a same-task prompt.
class MixtureSampler {
 public:
  MixtureSampler(std::vector<Dataset> datasets, size_t length, uint64_t seed, PromptConfig prompt = {},
                 bool prompting = true)
      : datasets_(std::move(datasets)), length_(length), rng_(seed), prompt_(prompt), prompting_(prompting) {
    require(length >= 1, ErrorCode::kConfig, "sequence length must be positive");
    require(!datasets_.empty(), ErrorCode::kConfig, "mixture needs at least one dataset");
    double total = 0.0;
    for (const auto& d : datasets_) {
      if (!(d.manifest.sample_weight > 0 && std::isfinite(d.manifest.sample_weight)))
        fail(ErrorCode::kConfig, "dataset '" + d.manifest.name + "' weight must be > 0");
      if (!d.sequences.empty()) total += d.manifest.sample_weight;
    }
    require(total > 0, ErrorCode::kExhausted, "every dataset in the mixture is empty");
    double acc = 0.0;
    for (const auto& d : datasets_) {
      if (!d.sequences.empty()) acc += d.manifest.sample_weight / total;
      cumulative_.push_back(acc);
    }
    cumulative_.back() = 1.0;
    draws_.assign(datasets_.size(), 0);
  }

  ElementSequence next() {
    const double u = rng_.uniform();
    size_t d = 0;
    while (d + 1 < cumulative_.size() && (u >= cumulative_[d] || datasets_[d].sequences.empty())) ++d;
    ++draws_[d];
    const Dataset& ds = datasets_[d];
    const size_t e = static_cast<size_t>(rng_.below(ds.sequences.size()));
    ElementSequence item = sample_subsequence(ds.sequences[e], length_, rng_);
    if (!prompting_) return item;

    const ElementSequence* source = nullptr;
    const auto& peers = ds.by_task.at(ds.episodes[e].task_id);
    if (peers.size() > 1) {
      size_t pick = static_cast<size_t>(rng_.below(peers.size() - 1));
      if (peers[pick] == e) pick = peers.size() - 1;
      source = &ds.sequences[peers[pick]];
    }
    return apply_prompt(item, source, length_, rng_, prompt_, &stats_);
  }

  MaskedBatch next_batch(size_t batch_size) {
    std::vector<ElementSequence> items;
    items.reserve(batch_size);
    for (size_t i = 0; i < batch_size; ++i) items.push_back(next());
    return assemble_batch(std::move(items));
  }

  const std::vector<Dataset>& datasets() const { return datasets_; }
  const std::vector<uint64_t>& draws() const { return draws_; }
  const PromptStats& prompt_stats() const { return stats_; }
  size_t length() const { return length_; }
  Rng& rng() { return rng_; }

 private:
  std::vector<Dataset> datasets_;
  size_t length_;
  Rng rng_;
  PromptConfig prompt_;
  bool prompting_;
  std::vector<double> cumulative_;
  std::vector<uint64_t> draws_;
  PromptStats stats_;
};

}  // namespace seqpolicy
