#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include "test_support.hpp"

using namespace bitemp;
using namespace bitemp::testing;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(BITEMP_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const char* kSmallConfig = R"({
  "generator": {"image_size": 32},
  "dataset_size": 40,
  "dataset_seed": 3,
  "model": {
    "encoder": {"image_size": 32, "backbone_channels": [4, 6, 8], "dim": 8, "heads": 2, "hsa_layers": 1,
                "ffn_dim": 12, "res_width": 6, "pool_heads": 2},
    "decoder": {"dim": 8, "heads": 2, "unimodal_layers": 1, "multimodal_layers": 1, "ffn_dim": 12, "max_len": 16}
  },
  "train": {"epochs": 1, "batch_size": 8, "target_lr": 0.001},
  "loss": {"tau": 0.1},
  "vocab_min_freq": 1
})";

}  // namespace

TEST(Cli, UnknownFlagFails) {
  const auto r = run("train --no-such-flag");
  EXPECT_NE(r.code, 0);
}

TEST(Cli, NoSubcommandFails) { EXPECT_NE(run("").code, 0); }

TEST(Cli, FalseNegativeModeNeedsTheta) {
  const auto dir = temp_dir("cli_theta");
  const auto r = run("train --data " + dir + " --out " + dir + "/run --fn-mode fna");
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("theta"), std::string::npos) << r.out;
}

TEST(Cli, BadConfigKeyIsAConfigError) {
  const auto dir = temp_dir("cli_badcfg");
  std::ofstream(dir + "/c.json") << R"({"trian": {}})";
  const auto r = run("gen-data --out " + dir + "/d --config " + dir + "/c.json");
  EXPECT_EQ(r.code, 3) << r.out;
}

TEST(Cli, MissingCheckpointFails) {
  const auto dir = temp_dir("cli_missing");
  EXPECT_NE(run("caption --checkpoint " + dir + "/none.ckpt --before x --after y").code, 0);
}

TEST(Cli, EndToEndPipeline) {
  const auto dir = temp_dir("cli_e2e");
  std::ofstream(dir + "/cfg.json") << kSmallConfig;
  const std::string cfg = " --config " + dir + "/cfg.json";

  auto r = run("gen-data --out " + dir + "/data" + cfg);
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "duplicates.jsonl", "generator.json"})
    EXPECT_TRUE(std::filesystem::exists(dir + "/data/" + f)) << f;

  r = run("train --data " + dir + "/data --out " + dir + "/run" + cfg);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto ckpt = dir + "/run/best.ckpt";
  ASSERT_TRUE(std::filesystem::exists(ckpt));
  EXPECT_TRUE(std::filesystem::exists(dir + "/run/metrics.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir + "/run/vocab.txt"));

  r = run("eval-retrieval --checkpoint " + ckpt + " --data " + dir + "/data --split test --k 1,5 --out " + dir +
          "/ret.txt");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("R@5: "), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("MRR@1: "), std::string::npos) << r.out;
  EXPECT_TRUE(std::filesystem::exists(dir + "/ret.txt"));

  r = run("eval-caption --checkpoint " + ckpt + " --data " + dir + "/data --split val");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("CIDEr: "), std::string::npos) << r.out;

  r = run("retrieve --checkpoint " + ckpt + " --data " + dir + "/data --split test --top 3 --query \"there is no change\"");
  ASSERT_EQ(r.code, 0) << r.out;
  std::size_t lines = 0;
  for (char c : r.out) lines += c == '\n';
  EXPECT_EQ(lines, 3u) << r.out;

  std::ifstream man(dir + "/data/test.jsonl");
  std::string line;
  std::getline(man, line);
  const auto item = nlohmann::json::parse(line);
  r = run("caption --checkpoint " + ckpt + " --before " + dir + "/data/" + item["before"].get<std::string>() +
          " --after " + dir + "/data/" + item["after"].get<std::string>());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_FALSE(r.out.empty());
}

TEST(Cli, CorruptCheckpointIsAParseError) {
  const auto dir = temp_dir("cli_corrupt");
  std::ofstream(dir + "/bad.ckpt") << "garbage";
  GeneratorConfig g;
  g.image_size = 32;
  const auto items = generate_corpus(1, 1, g);
  write_ppm(dir + "/b.ppm", items[0].pair.before);
  write_ppm(dir + "/a.ppm", items[0].pair.after);
  const auto r = run("caption --checkpoint " + dir + "/bad.ckpt --before " + dir + "/b.ppm --after " + dir + "/a.ppm");
  EXPECT_EQ(r.code, 5) << r.out;
}
