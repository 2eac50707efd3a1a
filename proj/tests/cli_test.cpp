#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cbqa/checkpoint.hpp"
#include "cbqa/digest.hpp"
#include "cli_harness.hpp"

namespace cbqa {
namespace {

using testing::CliRun;
using testing::run_cli;
namespace fs = std::filesystem;

const std::string kData = CBQA_TEST_DATA;

fs::path work_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  return nlohmann::json::parse(in);
}

TEST(Cli, HelpExitsZeroEverywhere) {
  for (const std::string sub : {"", "build-vocab", "corrupt", "mine-ssm", "pretrain", "finetune", "decode", "evaluate",
                                "compare-objectives", "audit", "audit sample", "audit export", "serve"}) {
    const auto r = run_cli(fs::temp_directory_path(), sub + " --help");
    EXPECT_EQ(r.exit_code, 0) << sub << "\n" << r.output;
  }
}

TEST(Cli, EvaluatePrintsScoreAndWritesReport) {
  const auto dir = work_dir("cbqa_cli_eval");
  {
    std::ofstream p(dir / "p.jsonl");
    p << R"({"id":"cap00","prediction":"paris"})" << '\n' << R"({"id":"cap01","prediction":"rome"})" << '\n';
  }
  std::ofstream(dir / "nq.jsonl") << R"({"id":"cap00","question":"q","answers":[["Paris"]]})" << '\n'
                                  << R"({"id":"cap01","question":"q","answers":[["Berlin"]]})" << '\n';
  const auto r = run_cli(dir, "evaluate --mode em --predictions p.jsonl --dataset nq.jsonl");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(r.output, "EM: 50.00\n");
  const auto report = read_json(dir / "p.jsonl.report.json");
  EXPECT_DOUBLE_EQ(report["em_percent"].get<double>(), 50.0);
  EXPECT_EQ(report["manifest_sha256"], sha256_file(dir / "p.jsonl.report.json.manifest.json"));
  const auto manifest = read_json(dir / "p.jsonl.report.json.manifest.json");
  EXPECT_EQ(manifest["subcommand"], "evaluate");
  EXPECT_EQ(manifest["inputs"][0]["sha256"], sha256_file(dir / "p.jsonl"));
}

TEST(Cli, ErrorsAreOneLineWithExitCodes) {
  const auto dir = work_dir("cbqa_cli_errors");
  const std::string vocab_args = "build-vocab --corpus " + kData + "/ssm_corpus.jsonl --size 400 --out v.txt";
  ASSERT_EQ(run_cli(dir, vocab_args).exit_code, 0);

  const auto range = run_cli(dir, "corrupt --vocab v.txt --corpus " + kData + "/ssm_corpus.jsonl --mask-rate 1.5 --out x");
  EXPECT_EQ(range.exit_code, 2);
  EXPECT_EQ(std::count(range.output.begin(), range.output.end(), '\n'), 1);
  EXPECT_EQ(range.output.rfind("error: config: ", 0), 0u) << range.output;

  const auto unknown = run_cli(dir, "corrupt --vocab v.txt --bogus 1");
  EXPECT_EQ(unknown.exit_code, 2);
  EXPECT_NE(unknown.output.find("valid flags: "), std::string::npos);
  EXPECT_NE(unknown.output.find("--mask-rate"), std::string::npos);
  EXPECT_EQ(std::count(unknown.output.begin(), unknown.output.end(), '\n'), 1);

  const auto conflict = run_cli(dir, "pretrain --vocab v.txt --corpus c --sentences s --out-dir o");
  EXPECT_EQ(conflict.exit_code, 2);
  const auto missing = run_cli(dir, "corrupt --vocab v.txt --corpus nowhere.jsonl --out x");
  EXPECT_EQ(missing.exit_code, 1);
  EXPECT_EQ(missing.output.rfind("error: io: ", 0), 0u) << missing.output;
  EXPECT_EQ(run_cli(dir, "no-such-command").exit_code, 2);
}

TEST(Cli, FlagsOverrideConfigOverridePreset) {
  const auto dir = work_dir("cbqa_cli_precedence");
  ASSERT_EQ(run_cli(dir, "build-vocab --corpus " + kData + "/ssm_corpus.jsonl --size 400 --out v.txt").exit_code, 0);
  std::ofstream(dir / "cfg.json") << R"({"steps": 2, "seed": 9, "batch_tokens": 300})";
  const std::string tiny = " --d-model 16 --heads 2 --d-ff 32 --enc-layers 1 --dec-layers 1 --checkpoint-every 1";
  const auto r = run_cli(dir, "--preset paper --config cfg.json pretrain --vocab v.txt --corpus " + kData +
                                  "/ssm_corpus.jsonl --out-dir run --steps 1" + tiny);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const auto config = read_json(dir / "run.manifest.json")["config"];
  EXPECT_EQ(config["steps"], 1);            // flag
  EXPECT_EQ(config["seed"], 9);             // config file
  EXPECT_EQ(config["batch_tokens"], 300);   // config file beats preset
  EXPECT_EQ(config["learning_rate"], 1e-3);
  EXPECT_EQ(config["preset"], "paper");

  const auto preset_only = run_cli(dir, "--preset paper pretrain --vocab v.txt --corpus " + kData +
                                            "/ssm_corpus.jsonl --out-dir run2 --steps 1" + tiny);
  ASSERT_EQ(preset_only.exit_code, 0) << preset_only.output;
  EXPECT_EQ(read_json(dir / "run2.manifest.json")["config"]["batch_tokens"], 196608);

  std::ofstream(dir / "bad.json") << R"({"stepz": 2})";
  EXPECT_EQ(run_cli(dir, "--config bad.json pretrain --vocab v.txt --out-dir x").exit_code, 2);
}

TEST(Cli, DataDirResolvesRelativeInputs) {
  const auto dir = work_dir("cbqa_cli_datadir");
  const auto r = run_cli(dir, "build-vocab --corpus ssm_corpus.jsonl --size 400 --out v.txt", "CBQA_DATA_DIR=" + kData);
  EXPECT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(run_cli(dir, "build-vocab --corpus ssm_corpus.jsonl --size 400 --out v.txt", "CBQA_DATA_DIR=").exit_code,
            0);
}

TEST(Cli, CheckpointsEmbedManifestDigest) {
  const auto dir = work_dir("cbqa_cli_ckpt");
  ASSERT_EQ(run_cli(dir, "build-vocab --corpus " + kData + "/ssm_corpus.jsonl --size 400 --out v.txt").exit_code, 0);
  const auto r = run_cli(dir, "pretrain --objective ssm --vocab v.txt --corpus " + kData +
                                  "/ssm_corpus.jsonl --out-dir run --steps 2 --checkpoint-every 2 --batch-tokens 256"
                                  " --d-model 16 --heads 2 --d-ff 32 --enc-layers 1 --dec-layers 1");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const auto ckpt = load_checkpoint(dir / "run" / "ckpt-00000002.ckpt");
  EXPECT_EQ(ckpt.meta["manifest_sha256"], sha256_file(dir / "run.manifest.json"));
  EXPECT_EQ(ckpt.meta["objective"], "SSM");
}

TEST(Cli, CompareObjectivesEmitsSixRows) {
  const auto dir = work_dir("cbqa_cli_compare");
  ASSERT_EQ(run_cli(dir, "build-vocab --corpus " + kData + "/ssm_corpus.jsonl --qa nq=" + kData +
                             "/capitals.jsonl --size 500 --out v.txt")
                .exit_code,
            0);
  const auto r = run_cli(dir, "compare-objectives --vocab v.txt --corpus " + kData + "/ssm_corpus.jsonl --task nq=" +
                                  kData +
                                  "/capitals.jsonl --blocks 3 --pretrain-block 2 --finetune-steps 2 "
                                  "--probe-checkpoint-every 1 --batch-tokens 200 --finetune-batch-tokens 200 "
                                  "--max-decode-len 4 --d-model 16 --heads 2 --d-ff 32 --enc-layers 1 "
                                  "--dec-layers 1 --out curve.csv");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  std::ifstream csv(dir / "curve.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(csv, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(lines[0], "objective,pretrain_step,max_val_em");
  EXPECT_EQ(lines[1].rfind("SSM,2,", 0), 0u);
  EXPECT_EQ(lines[6].rfind("SC,6,", 0), 0u);
  const auto rows = read_json(dir / "curve.csv.rows.json");
  EXPECT_TRUE(rows["probe_isolation"].get<bool>());
  EXPECT_EQ(rows["rows"].size(), 6u);
}

TEST(Cli, RerunsAreByteIdentical) {
  const auto dir = fs::temp_directory_path() / "cbqa_cli_determinism";
  const auto first = testing::run_full_pipeline(dir, kData);
  const auto second = testing::run_full_pipeline(dir, kData);
  EXPECT_GT(first.size(), 20u);
  EXPECT_EQ(first, second);
  EXPECT_TRUE(first.count("pre/ckpt-00000004.ckpt"));
  EXPECT_TRUE(first.count("audit.tsv.manifest.json"));
}

}  // namespace
}  // namespace cbqa
