#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "seqpolicy/datastore.hpp"

using namespace seqpolicy;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int status = -1;
  std::string out;
};

// Runs the CLI with stderr folded into the captured output.
CliRun cli(const std::string& args) {
  const std::string cmd = std::string(SEQPOLICY_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string last_line_with(const std::string& text, const std::string& needle) {
  std::string found;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t end = text.find('\n', pos);
    const std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    if (line.find(needle) != std::string::npos) found = line;
    if (end == std::string::npos) break;
    pos = end + 1;
  }
  return found;
}

fs::path one_to_twenty_manifest(const fs::path& dir) {
  save_episodes((dir / "fixture.ep").string(), fixture::episodes_with_returns(fixture::one_to(20)));
  write_file((dir / "manifest.ini").string(), "[fixture]\npath = " + (dir / "fixture.ep").string() + "\n");
  return dir / "manifest.ini";
}

}  // namespace

TEST(Cli, FilterReportsExpertReturnAndKeptCount) {
  const auto dir = oracle::temp_dir("cli_filter");
  const auto manifest = one_to_twenty_manifest(dir);
  const CliRun r = cli("filter --manifest " + manifest.string() + " --out-dir " + (dir / "out").string());
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_NE(r.out.find("expert_return=19.5 window=2"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("kept=5 dropped=15"), std::string::npos) << r.out;
  EXPECT_EQ(load_episodes((dir / "out" / "fixture.filtered.ep").string()).size(), 5u);

  const CliRun all = cli("filter --manifest " + manifest.string() + " --fraction 0 --out-dir " + (dir / "all").string());
  ASSERT_EQ(all.status, 0) << all.out;
  EXPECT_NE(all.out.find("kept=20 dropped=0"), std::string::npos) << all.out;
}

TEST(Cli, ExitCodes) {
  const auto dir = oracle::temp_dir("cli_exit");
  EXPECT_EQ(cli("filter --manifest " + (dir / "absent.ini").string()).status, 2);
  EXPECT_EQ(cli("frobnicate").status, 2);
  EXPECT_EQ(cli("filter --manifest x --fraction").status, 2);
  write_file((dir / "dangling.ini").string(), "[gone]\npath = nowhere.ep\n");
  EXPECT_EQ(cli("filter --manifest " + (dir / "dangling.ini").string()).status, 3);

  save_episodes((dir / "good.ep").string(), fixture::episodes_with_returns({1, 2, 3}));
  const CliRun good = cli("inspect " + (dir / "good.ep").string());
  EXPECT_EQ(good.status, 0) << good.out;
  EXPECT_NE(good.out.find("episodes=3 violations=0"), std::string::npos) << good.out;

  std::string bytes = read_file((dir / "good.ep").string());
  bytes[20] = static_cast<char>(bytes[20] ^ 0x41);
  write_file((dir / "bad.ep").string(), bytes);
  const CliRun bad = cli("inspect " + (dir / "bad.ep").string());
  EXPECT_EQ(bad.status, 3) << bad.out;
  EXPECT_NE(bad.out.find("checksum"), std::string::npos) << bad.out;
}

TEST(Cli, ExpertRolloutAndMissingPromptWarning) {
  const CliRun grid = cli("rollout --expert --env gridreach -n 5 --seed 3");
  ASSERT_EQ(grid.status, 0) << grid.out;
  EXPECT_NE(grid.out.find("mean_return=1 success_rate=1"), std::string::npos) << grid.out;

  const auto dir = oracle::temp_dir("cli_bandit");
  ASSERT_EQ(cli("collect --env bandit_a --episodes 4 --out " + (dir / "b.ep").string()).status, 0);
  write_file((dir / "m.ini").string(), "[bandit_a]\npath = " + (dir / "b.ep").string() + "\n");
  const std::string common = "pretrain --manifest " + (dir / "m.ini").string() +
                             " --steps 2 --batch 2 --seq-len 16 --blocks 1 --width 32 --heads 2 --kv-size 8"
                             " --ff-hidden 32 --context 64 --out-dir " +
                             (dir / "run").string();
  ASSERT_EQ(cli(common).status, 0);
  const CliRun warn = cli("rollout --checkpoint " + (dir / "run" / "latest.sqpc").string() + " --env bandit_b -n 2");
  EXPECT_EQ(warn.status, 0) << warn.out;
  EXPECT_NE(warn.out.find("warning: no prompt"), std::string::npos) << warn.out;
  EXPECT_NE(warn.out.find("prompted=0"), std::string::npos) << warn.out;
}

TEST(Cli, PretrainSmokeRunIsFastAndReproducible) {
  const auto dir = oracle::temp_dir("cli_pretrain");
  ASSERT_EQ(cli("collect --env gridreach --episodes 30 --seed 1 --out " + (dir / "g.ep").string()).status, 0);
  ASSERT_EQ(cli("collect --env text --episodes 30 --seed 1 --out " + (dir / "t.ep").string()).status, 0);
  write_file((dir / "m.ini").string(), "[gridreach]\npath = " + (dir / "g.ep").string() +
                                           "\nweight = 0.7\n\n[text]\npath = " + (dir / "t.ep").string() +
                                           "\nweight = 0.3\n");
  auto train = [&](const std::string& out) {
    return cli("--seed 9 pretrain --manifest " + (dir / "m.ini").string() + " --steps 50 --batch 4 --seq-len 32" +
               " --out-dir " + (dir / out).string());
  };
  const auto start = std::chrono::steady_clock::now();
  const CliRun a = train("a");
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ASSERT_EQ(a.status, 0) << a.out;
  EXPECT_LT(seconds, 60.0);
  EXPECT_NE(a.out.find("steps=50"), std::string::npos) << a.out;
  EXPECT_TRUE(fs::exists(dir / "a" / "config.ini"));
  EXPECT_TRUE(fs::exists(dir / "a" / "metrics.log"));

  const CliRun b = train("b");
  ASSERT_EQ(b.status, 0) << b.out;
  EXPECT_EQ(last_line_with(a.out, "final_loss="), last_line_with(b.out, "final_loss="));
  EXPECT_EQ(read_file((dir / "a" / "metrics.log").string()), read_file((dir / "b" / "metrics.log").string()));
}

TEST(Cli, ScratchPresetIgnoresCheckpoint) {
  const auto dir = oracle::temp_dir("cli_scratch");
  ASSERT_EQ(cli("collect --env gridreach --episodes 3 --out " + (dir / "d.ep").string()).status, 0);
  const CliRun r = cli("finetune --preset scratch --checkpoint " + (dir / "nothing.sqpc").string() + " --demos " +
                    (dir / "d.ep").string() +
                    " --steps 2 --batch 2 --seq-len 16 --blocks 1 --width 32 --heads 2 --kv-size 8 --ff-hidden 32"
                    " --context 64 --out-dir " +
                    (dir / "ft").string());
  EXPECT_EQ(r.status, 0) << r.out;
  EXPECT_NE(r.out.find("warning: preset scratch ignores --checkpoint"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "ft" / "finetuned.sqpc"));
}

TEST(Cli, ConfigFileValuesYieldToFlags) {
  const auto dir = oracle::temp_dir("cli_config");
  write_file((dir / "c.ini").string(), "[rollout]\nenv = bandit_a\nepisodes = 3\n");
  const CliRun r = cli("--config " + (dir / "c.ini").string() + " rollout --expert --episodes 2");
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_NE(r.out.find("rollout.env=\"bandit_a\""), std::string::npos) << r.out;
  size_t returns = 0;
  for (size_t p = r.out.find("return="); p != std::string::npos; p = r.out.find("return=", p + 1))
    returns += p == 0 || r.out[p - 1] == '\n';
  EXPECT_EQ(returns, 2u);
}
