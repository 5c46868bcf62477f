#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "seqpolicy/datastore.hpp"

using namespace seqpolicy;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kIo;
}

Episode rich_episode(uint64_t seed) {
  Rng rng(seed);
  return fixture::random_layout_case(rng).episode;
}

std::vector<double> returns_of(const std::vector<Episode>& eps) {
  std::vector<double> r;
  for (const auto& e : eps) r.push_back(e.total_return());
  return r;
}

}  // namespace

TEST(EpisodeFile, RoundTripIsExact) {
  for (uint64_t seed = 0; seed < 30; ++seed) {
    const Episode ep = rich_episode(seed);
    std::stringstream buf;
    write_episode(ep, buf);
    EXPECT_EQ(read_episode(buf), ep);
  }
  Episode empty;
  empty.task_id = "empty";
  empty.schema.observations = {TensorSchema::discrete("o", {1})};
  const std::string bytes = encode_episode(empty);
  ByteReader r(bytes);
  EXPECT_EQ(decode_episode(r), empty);
}

TEST(EpisodeFile, FileOfManyRecords) {
  const auto dir = oracle::temp_dir("episodes");
  std::vector<Episode> eps;
  for (uint64_t s = 0; s < 5; ++s) eps.push_back(rich_episode(100 + s));
  save_episodes((dir / "a.ep").string(), eps);
  EXPECT_EQ(load_episodes((dir / "a.ep").string()), eps);
  EXPECT_EQ(code_of([&] { load_episodes((dir / "missing.ep").string()); }), ErrorCode::kIo);
}

TEST(EpisodeFile, CorruptedLengthPrefixIsTruncation) {
  std::string bytes = encode_episode(rich_episode(1));
  bytes[10] = static_cast<char>(bytes[10] + 1);  // body_len gains 65536
  ByteReader r(bytes);
  EXPECT_EQ(code_of([&] { decode_episode(r); }), ErrorCode::kTruncatedRecord);
  const std::string cut = encode_episode(rich_episode(1)).substr(0, 40);
  ByteReader r2(cut);
  EXPECT_EQ(code_of([&] { decode_episode(r2); }), ErrorCode::kTruncatedRecord);
}

TEST(EpisodeFile, VersionAndChecksumErrors) {
  std::string bytes = encode_episode(rich_episode(2));
  std::string wrong_version = bytes;
  wrong_version[4] = 7;
  ByteReader r1(wrong_version);
  EXPECT_EQ(code_of([&] { decode_episode(r1); }), ErrorCode::kVersionMismatch);

  // Every single-byte flip inside the body is caught by the checksum.
  for (size_t i = 12; i + 4 < bytes.size(); i += 3) {
    std::string flipped = bytes;
    flipped[i] = static_cast<char>(flipped[i] ^ 0x5A);
    ByteReader r(flipped);
    EXPECT_EQ(code_of([&] { decode_episode(r); }), ErrorCode::kChecksum) << i;
  }
}

TEST(ExpertReturn, OneToTwenty) {
  const auto r = fixture::one_to(20);
  const ExpertReturn e = expert_return(r);
  const auto o = oracle::brute_expert_return(r);
  EXPECT_EQ(e.window, 2u);
  EXPECT_EQ(o.window, 2u);
  EXPECT_DOUBLE_EQ(e.value, 19.5);
  EXPECT_DOUBLE_EQ(o.value, 19.5);
}

TEST(ExpertReturn, SmallAndConstantSets) {
  const std::vector<double> five{3, 9, 1, 4, 2};
  EXPECT_EQ(expert_return(five).window, 1u);
  EXPECT_DOUBLE_EQ(expert_return(five).value, 9.0);
  for (size_t n : {1, 7, 33, 250}) {
    const std::vector<double> c(n, 2.5);
    EXPECT_DOUBLE_EQ(expert_return(c).value, 2.5);
  }
  EXPECT_EQ(code_of([] { expert_return(std::vector<double>{}); }), ErrorCode::kEmptyInput);
}

TEST(ExpertReturn, MatchesBruteForceAndBounds) {
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    std::vector<double> r(1 + rng.below(300));
    for (auto& v : r) v = rng.uniform(-5, 20);
    const ExpertReturn e = expert_return(r);
    const auto o = oracle::brute_expert_return(r);
    EXPECT_EQ(e.window, o.window);
    EXPECT_NEAR(e.value, o.value, 1e-9);
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    EXPECT_GE(e.value, mean - 1e-9);
    EXPECT_LE(e.value, *std::max_element(r.begin(), r.end()) + 1e-9);
  }
  const std::vector<double> big(25000, 1.0);
  EXPECT_EQ(expert_return(big).window, 1000u);
}

TEST(Filter, OneToTwentyKeepsTopFive) {
  const FilterResult res = filter_episodes(fixture::episodes_with_returns(fixture::one_to(20)));
  EXPECT_DOUBLE_EQ(res.report.expert_return, 19.5);
  EXPECT_EQ(res.report.window, 2u);
  EXPECT_DOUBLE_EQ(res.report.threshold, 0.8 * 19.5);
  EXPECT_EQ(res.report.kept, 5u);
  EXPECT_EQ(res.report.dropped, 15u);
  EXPECT_EQ(returns_of(res.kept), (std::vector<double>{16, 17, 18, 19, 20}));
}

TEST(Filter, TrivialFractions) {
  const auto eps = fixture::episodes_with_returns(fixture::one_to(20));
  EXPECT_EQ(filter_episodes(eps, 0.0).report.kept, 20u);
  const auto same = fixture::episodes_with_returns(std::vector<double>(12, 4.0));
  EXPECT_EQ(filter_episodes(same).report.kept, 12u);
}

TEST(Filter, IdempotentAgainstTheCollectionExpertReturn) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> r(1 + rng.below(120));
    for (auto& v : r) v = std::floor(rng.uniform(0, 30));
    const double fraction = rng.uniform(0.0, 1.0);
    const FilterResult first = filter_episodes(fixture::episodes_with_returns(r), fraction);
    EXPECT_EQ(first.report.kept + first.report.dropped, r.size());
    const ExpertReturn reference{first.report.expert_return, first.report.window};
    const FilterResult second = filter_episodes(first.kept, fraction, reference);
    EXPECT_EQ(second.report.kept, first.report.kept);
    EXPECT_EQ(second.report.dropped, 0u);
  }
}

TEST(Filter, PerTaskGrouping) {
  auto a = fixture::episodes_with_returns(fixture::one_to(20), "a");
  auto b = fixture::episodes_with_returns(std::vector<double>(4, 1.0), "b");
  std::vector<Episode> all;
  for (size_t i = 0; i < 20; ++i) {
    all.push_back(a[i]);
    if (i < 4) all.push_back(b[i]);
  }
  const auto results = filter_by_task(all);
  ASSERT_EQ(results.size(), 2u);
  EXPECT_EQ(results[0].report.task_id, "a");
  EXPECT_EQ(results[0].report.kept, 5u);
  EXPECT_EQ(results[1].report.kept, 4u);
}

TEST(Manifest, ParseFormatRoundTrip) {
  const std::string text =
      "# mixture\n[grid]\npath = grid/*.ep\nweight = 0.75\ntasks = gridreach, other\n\n[text]\npath = t.ep\n"
      "weight = 0.25\n";
  const auto m = parse_manifest(text);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].name, "grid");
  EXPECT_EQ(m[0].paths, std::vector<std::string>{"grid/*.ep"});
  EXPECT_DOUBLE_EQ(m[0].sample_weight, 0.75);
  EXPECT_EQ(m[0].task_ids, (std::set<std::string>{"gridreach", "other"}));
  const auto again = parse_manifest(format_manifest(m));
  ASSERT_EQ(again.size(), 2u);
  EXPECT_EQ(again[1].paths, m[1].paths);
  EXPECT_DOUBLE_EQ(again[1].sample_weight, 0.25);
}

TEST(Manifest, Errors) {
  EXPECT_EQ(code_of([] { parse_manifest("[a]\nweight = 0\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_manifest("[a]\ncolour = red\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_manifest("path = x\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_manifest("[a]\nweight = abc\n"); }), ErrorCode::kConfig);
}

TEST(Manifest, RelativePathsAndGlobs) {
  const auto dir = oracle::temp_dir("manifest_glob");
  std::filesystem::create_directories(dir / "parts");
  save_episodes((dir / "parts" / "b.ep").string(), fixture::episodes_with_returns({3, 4}));
  save_episodes((dir / "parts" / "a.ep").string(), fixture::episodes_with_returns({1, 2}));
  write_file((dir / "m.ini").string(), "[grid]\npath = parts/*.ep\n\n[gone]\npath = missing/*.ep\n");
  const auto m = load_manifest((dir / "m.ini").string());
  ASSERT_EQ(m.size(), 2u);
  const auto episodes = load_manifest_episodes(m[0]);
  ASSERT_EQ(episodes.size(), 4u);
  EXPECT_EQ(episodes.front().total_return(), 1.0);
  EXPECT_EQ(episodes.back().total_return(), 4.0);
  EXPECT_EQ(code_of([&] { load_manifest_episodes(m[1]); }), ErrorCode::kExhausted);
}

TEST(Mixture, SingleDatasetAndWeights) {
  auto make = [](const std::string& name, double w) {
    DatasetManifest m;
    m.name = name;
    m.sample_weight = w;
    return Dataset::from_episodes(m, fixture::episodes_with_returns({1, 2, 3}, name));
  };
  {
    MixtureSampler only({make("A", 1.0)}, 4, 1);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(only.next().dataset, "A");
  }
  MixtureSampler mix({make("A", 0.75), make("B", 0.25)}, 4, 2, {}, false);
  int a = 0;
  for (int i = 0; i < 10000; ++i) a += mix.next().dataset == "A";
  EXPECT_NEAR(a / 10000.0, 0.75, 0.02);
  EXPECT_EQ(code_of([&] { MixtureSampler({make("A", 1.0), make("B", 0.0)}, 4, 3); }), ErrorCode::kConfig);

  DatasetManifest empty;
  empty.name = "E";
  EXPECT_EQ(code_of([&] { MixtureSampler({Dataset::from_episodes(empty, {})}, 4, 3); }), ErrorCode::kExhausted);
}

TEST(Mixture, ReproducibleWithSeed) {
  auto data = [] {
    DatasetManifest m;
    m.name = "d";
    std::vector<Episode> eps;
    for (uint64_t s = 0; s < 6; ++s) {
      Episode e = rich_episode(s);
      e.task_id = "same";
      eps.push_back(e);
    }
    // Episodes with differing schemas are fine within one dataset.
    return Dataset::from_episodes(m, eps);
  };
  MixtureSampler x({data()}, 12, 77), y({data()}, 12, 77);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(x.next(), y.next());
  EXPECT_EQ(x.prompt_stats().prompted, y.prompt_stats().prompted);
}
