#pragma once

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbqa/digest.hpp"

namespace cbqa::testing {

struct CliRun {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

// Runs the cbqa binary inside `dir`; `env` is an optional VAR=value prefix.
inline CliRun run_cli(const std::filesystem::path& dir, const std::string& args, const std::string& env = "") {
  const std::string command =
      "cd '" + dir.string() + "' && " + (env.empty() ? "" : "env '" + env + "' ") + CBQA_CLI + " " + args + " 2>&1";
  FILE* pipe = ::popen(command.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  CliRun r;
  std::array<char, 4096> buf{};
  for (std::size_t n; (n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0;) r.output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// SHA-256 of every file under `dir`, keyed by relative path.
inline std::map<std::string, std::string> tree_digests(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).generic_string()] = sha256_file(e.path());
  return out;
}

// Every offline stage in sequence on the fixture data; throws on a failing
// step. Returns the digests of everything written.
inline std::map<std::string, std::string> run_full_pipeline(const std::filesystem::path& dir,
                                                           const std::string& data_dir) {
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const std::string tiny = " --d-model 16 --heads 2 --d-ff 32 --enc-layers 1 --dec-layers 1 --seed 7";
  const std::vector<std::string> steps = {
      "build-vocab --corpus ssm_corpus.jsonl --qa nq=capitals.jsonl --qa wq=languages.jsonl --size 500 --out v.txt",
      "corrupt --vocab v.txt --corpus ssm_corpus.jsonl --seed 7 --out sc_pairs.jsonl",
      "mine-ssm --corpus ssm_corpus.jsonl --vocab v.txt --seed 7 --out tagged.jsonl --pairs ssm_pairs.jsonl",
      "pretrain --objective ssm --vocab v.txt --sentences tagged.jsonl --out-dir pre --steps 4 --checkpoint-every 2 "
      "--batch-tokens 256" + tiny,
      "pretrain --objective sc --vocab v.txt --corpus ssm_corpus.jsonl --out-dir pre_sc --steps 4 "
      "--checkpoint-every 2 --batch-tokens 256" + tiny,
      "finetune --vocab v.txt --task nq=capitals.jsonl --task wq=languages.jsonl --init pre/ckpt-00000004.ckpt "
      "--out-dir ft --steps 4 --checkpoint-every 2 --batch-tokens 256 --max-decode-len 6 --seed 7",
      "decode --checkpoint ft/ckpt-00000004.ckpt --vocab v.txt --dataset capitals.jsonl --max-decode-len 6 "
      "--out preds.jsonl",
      "evaluate --mode em --predictions preds.jsonl --dataset capitals.jsonl --out report.json",
      "audit sample --report report.json --dataset capitals.jsonl --sample-size 5 --seed 7 --store audit.jsonl",
      "audit export --store audit.jsonl --out audit.tsv",
  };
  for (const auto& s : steps) {
    const auto r = run_cli(dir, s, "CBQA_DATA_DIR=" + data_dir);
    if (r.exit_code != 0) throw std::runtime_error("cbqa " + s + " failed: " + r.output);
  }
  return tree_digests(dir);
}

}  // namespace cbqa::testing
