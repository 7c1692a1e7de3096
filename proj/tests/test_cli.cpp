#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "pluginlm/cli.hpp"

using namespace pluginlm;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string write_config(const std::string& name, const std::string& out_dir,
                         const std::string& method = "plugin",
                         const std::string& extra = "") {
  nlohmann::json j = nlohmann::json::parse(R"({
    "version": 1,
    "dataset": {
      "kind": "synthetic",
      "world": {"content_tokens": 8, "favored": 3, "eos_prob": 0.15, "min_len": 2,
                "max_len": 10, "prompt_tokens": 2, "seed": 5},
      "adaptation_sequences": 100,
      "test_sequences": 16,
      "base_corpus_sequences": 300,
      "corruption": 0.3
    },
    "base": {"kind": "ngram", "order": 2, "lambda": 0.1},
    "reweighter": {"blocks": 1, "embed_dim": 16, "num_heads": 2, "ff_dim": 32,
                   "context_window": 12},
    "train": {"learning_rate": 3e-3, "batch_size": 16, "max_epochs": 3, "patience": 5},
    "decode": {"max_len": 12, "strategy": "greedy"},
    "method": "plugin",
    "seeds": [1],
    "out": ""
  })");
  j["method"] = method;
  j["out"] = out_dir;
  if (!extra.empty()) {
    nlohmann::json patch = nlohmann::json::parse(extra);
    j.merge_patch(patch);
  }
  fs::path path = fs::temp_directory_path() / name;
  std::ofstream f(path, std::ios::binary);
  f << j.dump(2);
  return path.string();
}

}  // namespace

TEST_CASE("config errors exit with code 1") {
  REQUIRE(cli::run({"train", "--config", "/nonexistent/config.json"}) == 1);
  auto bad_method = write_config("cfg_badmethod.json", "/tmp/cli_badmethod", "nonsense");
  REQUIRE(cli::run({"train", "--config", bad_method}) == 1);
  // jsonl dataset pointing nowhere
  auto missing = write_config("cfg_missing.json", "/tmp/cli_missing", "plugin",
                              R"({"dataset": {"kind": "jsonl", "train": "/no/a.jsonl",
                                  "validation": "/no/b.jsonl", "test": "/no/c.jsonl"}})");
  REQUIRE(cli::run({"train", "--config", missing}) == 1);
}

TEST_CASE("eval before train reports a missing checkpoint with exit code 2") {
  fs::remove_all("/tmp/cli_noeval");
  auto cfg = write_config("cfg_noeval.json", "/tmp/cli_noeval");
  REQUIRE(cli::run({"eval", "--config", cfg}) == 2);
}

TEST_CASE("train then eval produces the expected artifacts") {
  fs::remove_all("/tmp/cli_arts");
  auto cfg = write_config("cfg_arts.json", "/tmp/cli_arts");
  REQUIRE(cli::run({"train", "--config", cfg}) == 0);
  REQUIRE(fs::exists("/tmp/cli_arts/train-run-1/model.ckpt"));
  REQUIRE(fs::exists("/tmp/cli_arts/train-run-1/history.csv"));
  REQUIRE(fs::exists("/tmp/cli_arts/train-run-1/run_info.json"));
  REQUIRE(fs::exists("/tmp/cli_arts/train-run-1/vocab.txt"));

  nlohmann::json info = nlohmann::json::parse(read_file("/tmp/cli_arts/train-run-1/run_info.json"));
  REQUIRE(info["seed"] == 1);
  REQUIRE(info.contains("git_describe"));
  REQUIRE(info["config"]["method"] == "plugin");

  REQUIRE(cli::run({"eval", "--config", cfg}) == 0);
  REQUIRE(fs::exists("/tmp/cli_arts/metrics_mean_std.csv"));
  REQUIRE(fs::exists("/tmp/cli_arts/metrics_per_example.csv"));
  std::string table = read_file("/tmp/cli_arts/metrics_mean_std.csv");
  REQUIRE(table.find("bleu") != std::string::npos);
  REQUIRE(table.find("rougeL") != std::string::npos);
}

TEST_CASE("zeroshot training is a configuration echo without checkpoints") {
  fs::remove_all("/tmp/cli_zero");
  auto cfg = write_config("cfg_zero.json", "/tmp/cli_zero", "zeroshot");
  REQUIRE(cli::run({"train", "--config", cfg}) == 0);
  REQUIRE(fs::exists("/tmp/cli_zero/train-run-1/run_info.json"));
  REQUIRE_FALSE(fs::exists("/tmp/cli_zero/train-run-1/model.ckpt"));
  // zeroshot eval needs no checkpoint
  REQUIRE(cli::run({"eval", "--config", cfg}) == 0);
}

TEST_CASE("reruns with identical config and seed emit byte-identical CSVs") {
  fs::remove_all("/tmp/cli_det_a");
  fs::remove_all("/tmp/cli_det_b");
  auto cfg_a = write_config("cfg_det_a.json", "/tmp/cli_det_a");
  auto cfg_b = write_config("cfg_det_b.json", "/tmp/cli_det_b");
  for (const char* verb : {"train", "eval"}) {
    REQUIRE(cli::run({verb, "--config", cfg_a}) == 0);
    REQUIRE(cli::run({verb, "--config", cfg_b}) == 0);
  }
  for (const char* rel :
       {"train-run-1/history.csv", "metrics_mean_std.csv", "metrics_per_example.csv",
        "eval-run-1/generations.csv"}) {
    INFO(rel);
    REQUIRE(read_file(fs::path("/tmp/cli_det_a") / rel) ==
            read_file(fs::path("/tmp/cli_det_b") / rel));
  }
}

TEST_CASE("noise-sim, shift and decode emit their reports") {
  fs::remove_all("/tmp/cli_misc");
  auto cfg = write_config(
      "cfg_misc.json", "/tmp/cli_misc", "plugin",
      R"({"noise": {"kind": "diagonal_param", "strength": 0.4, "estimator_samples": 400,
          "consistency_instances": 5, "grid_resolution": 0.02},
          "dataset": {"base_corpus_sequences": 200, "adaptation_sequences": 80,
                      "test_sequences": 10}})");
  REQUIRE(cli::run({"noise-sim", "--config", cfg, "--seed", "3"}) == 0);
  REQUIRE(fs::exists("/tmp/cli_misc/noise-sim-run-3/consistency_report.csv"));
  REQUIRE(fs::exists("/tmp/cli_misc/noise-sim-run-3/estimator_report.csv"));
  REQUIRE(fs::exists("/tmp/cli_misc/noise-sim-run-3/kl_report.csv"));

  REQUIRE(cli::run({"shift", "--config", cfg, "--seed", "2"}) == 0);
  REQUIRE(fs::exists("/tmp/cli_misc/shift-run-2/shift_report.csv"));

  REQUIRE(cli::run({"decode", "--config", cfg, "--seed", "1"}) == 0);
  REQUIRE(fs::exists("/tmp/cli_misc/decode-run-1/trace.csv"));
  REQUIRE(fs::exists("/tmp/cli_misc/decode-run-1/generations.txt"));
  std::string trace = read_file("/tmp/cli_misc/decode-run-1/trace.csv");
  REQUIRE(trace.rfind("prompt_id,step,token,p_base,p_reweight,p_combined", 0) == 0);
}

TEST_CASE("theory command writes the decay CSV and summary") {
  fs::remove_all("/tmp/cli_theory");
  auto cfg = write_config("cfg_theory.json", "/tmp/cli_theory", "plugin",
                          R"({"theory": {"vocab": 6, "t_max": 200, "trials": 2,
                              "family_seed": 3}})");
  REQUIRE(cli::run({"theory", "--config", cfg, "--seed", "4"}) == 0);
  std::string csv = read_file("/tmp/cli_theory/theory-run-4/decay.csv");
  REQUIRE(csv.rfind("t,mean_excess,std_excess", 0) == 0);
  std::string summary = read_file("/tmp/cli_theory/theory-run-4/summary.txt");
  REQUIRE(summary.find("slope:") != std::string::npos);
  REQUIRE(summary.find("trials: 2") != std::string::npos);
}

TEST_CASE("jsonl datasets flow through the same pipeline") {
  fs::remove_all("/tmp/cli_jsonl");
  fs::create_directories("/tmp/cli_jsonl");
  // a tiny but learnable corpus: prompts name a colour, targets repeat it
  auto write_jsonl = [&](const std::string& name, int n, uint64_t seed) {
    std::ofstream f("/tmp/cli_jsonl/" + name, std::ios::binary);
    Rng rng(seed);
    const char* colours[] = {"red", "green", "blue", "gold"};
    for (int i = 0; i < n; ++i) {
      const char* c = colours[rng.below(4)];
      f << "{\"prompt\":\"say " << c << "\",\"target\":\"" << c << " " << c << "\"}\n";
    }
    return "/tmp/cli_jsonl/" + name;
  };
  write_jsonl("train.jsonl", 60, 1);
  write_jsonl("val.jsonl", 40, 2);
  write_jsonl("test.jsonl", 12, 3);

  auto cfg = write_config(
      "cfg_jsonl.json", "/tmp/cli_jsonl/out", "plugin",
      R"({"dataset": {"kind": "jsonl", "train": "/tmp/cli_jsonl/train.jsonl",
          "validation": "/tmp/cli_jsonl/val.jsonl", "test": "/tmp/cli_jsonl/test.jsonl",
          "hyperval_fraction": 0.4},
          "reweighter": {"context_window": 10}})");
  REQUIRE(cli::run({"train", "--config", cfg}) == 0);
  REQUIRE(cli::run({"eval", "--config", cfg}) == 0);
  REQUIRE(fs::exists("/tmp/cli_jsonl/out/metrics_mean_std.csv"));
}
