#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tslora/cli.hpp"

namespace fs = std::filesystem;
using namespace tslora;

namespace {

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv = {"tslora"};
  for (const std::string& a : args) {
    argv.push_back(a.c_str());
  }
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct TempTree {
  fs::path root;
  TempTree() {
    root = fs::temp_directory_path() /
           ("tslora_cli_" + std::to_string(::getpid()));
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }
  std::string sub(const char* name) const { return (root / name).string(); }
};

}  // namespace

TEST_CASE("cli end-to-end smoke pipeline with exit codes and manifests") {
  TempTree tmp;

  // Corpus + pipeline.
  CHECK(run({"synth", "--regime", "target", "--patients", "14", "--length",
             "144", "--seed", "3", "--out", tmp.sub("s")}) == 0);
  CHECK(fs::exists(tmp.root / "s" / "series.csv"));
  CHECK(run({"prepare", "--input", tmp.sub("s") + "/series.csv", "--seed",
             "4", "--out", tmp.sub("p")}) == 0);
  CHECK(fs::exists(tmp.root / "p" / "MeanBP.tsds"));
  CHECK(fs::exists(tmp.root / "p" / "HeartRate.tsds"));

  // Tiny pretrain.
  CHECK(run({"pretrain", "--data", tmp.sub("p"), "--epochs", "1", "--seed",
             "5", "--out", tmp.sub("m")}) == 0);
  CHECK(fs::exists(tmp.root / "m" / "base.ckpt"));
  CHECK(fs::exists(tmp.root / "m" / "history.csv"));

  // finetune with no rank flag records the defaults r=2, alpha=16.
  CHECK(run({"finetune", "--mode", "lora", "--model", tmp.sub("m") + "/base.ckpt",
             "--data", tmp.sub("p"), "--vital", "MeanBP", "--epochs", "1",
             "--seed", "6", "--out", tmp.sub("f")}) == 0);
  const std::string ft_manifest = slurp(tmp.root / "f" / "manifest.txt");
  CHECK(ft_manifest.find("arg rank 2\n") != std::string::npos);
  CHECK(ft_manifest.find("arg alpha 16\n") != std::string::npos);
  CHECK(fs::exists(tmp.root / "f" / "adapters.bin"));

  // Tiny evaluate exercises the lora_ft setting.
  CHECK(run({"evaluate", "--model", tmp.sub("m") + "/base.ckpt", "--adapters",
             tmp.sub("f") + "/adapters.bin", "--setting", "lora_ft", "--data",
             tmp.sub("p"), "--vital", "MeanBP", "--samples", "2", "--runs",
             "2", "--seed", "7", "--out", tmp.sub("e")}) == 0);
  CHECK(fs::exists(tmp.root / "e" / "report_long.csv"));

  // report merges long CSVs.
  CHECK(run({"report", "--inputs", tmp.sub("e") + "/report_long.csv", "--out",
             tmp.sub("r")}) == 0);
  CHECK(fs::exists(tmp.root / "r" / "report_wide.csv"));
}

TEST_CASE("invalid rank exits 2 and names the flag in the manifest") {
  TempTree tmp;
  CHECK(run({"finetune", "--mode", "lora", "--rank", "0", "--model",
             "missing.ckpt", "--data", tmp.sub("nowhere"), "--out",
             tmp.sub("bad")}) == 2);
  const std::string manifest = slurp(tmp.root / "bad" / "manifest.txt");
  CHECK(manifest.find("status error") != std::string::npos);
  CHECK(manifest.find("--rank") != std::string::npos);
}

TEST_CASE("evaluate records default sampling in the manifest even on failure") {
  TempTree tmp;
  CHECK(run({"evaluate", "--model", "missing.ckpt", "--data",
             tmp.sub("nowhere"), "--out", tmp.sub("ev")}) == 1);
  const std::string manifest = slurp(tmp.root / "ev" / "manifest.txt");
  CHECK(manifest.find("arg samples 20\n") != std::string::npos);
  CHECK(manifest.find("arg runs 10\n") != std::string::npos);
  CHECK(manifest.find("status error") != std::string::npos);
}

TEST_CASE("unknown flags and runtime failures map to exit codes") {
  TempTree tmp;
  CHECK(run({"synth", "--no-such-flag"}) == 2);
  CHECK(run({"prepare", "--input", tmp.sub("does_not_exist.csv"), "--out",
             tmp.sub("p2")}) == 1);
  CHECK(run({"synth", "--length", "10", "--out", tmp.sub("s2")}) == 2);
}

TEST_CASE("synth is deterministic in the seed") {
  TempTree tmp;
  CHECK(run({"synth", "--patients", "4", "--length", "120", "--seed", "11",
             "--out", tmp.sub("a")}) == 0);
  CHECK(run({"synth", "--patients", "4", "--length", "120", "--seed", "11",
             "--out", tmp.sub("b")}) == 0);
  CHECK(slurp(tmp.root / "a" / "series.csv") ==
        slurp(tmp.root / "b" / "series.csv"));
}

TEST_CASE("config file values apply under flags") {
  TempTree tmp;
  {
    std::ofstream cfg(tmp.root / "synth.conf");
    cfg << "# comment\npatients=5\nlength=120\n";
  }
  CHECK(run({"synth", "--config", (tmp.root / "synth.conf").string(),
             "--seed", "2", "--out", tmp.sub("c")}) == 0);
  const std::string manifest = slurp(tmp.root / "c" / "manifest.txt");
  CHECK(manifest.find("arg patients 5\n") != std::string::npos);
  CHECK(manifest.find("arg length 120\n") != std::string::npos);

  // A flag beats the file.
  CHECK(run({"synth", "--config", (tmp.root / "synth.conf").string(),
             "--patients", "3", "--seed", "2", "--out", tmp.sub("d")}) == 0);
  CHECK(slurp(tmp.root / "d" / "manifest.txt").find("arg patients 3\n") !=
        std::string::npos);

  CHECK(run({"synth", "--config", tmp.sub("missing.conf"), "--out",
             tmp.sub("e2")}) == 2);
}

TEST_CASE("ablate accepts the positional rank list form") {
  TempTree tmp;
  // Bad rank list fails fast with exit 2.
  CHECK(run({"ablate", "ranks", "1,x", "--model", "missing.ckpt", "--data",
             tmp.sub("nowhere"), "--out", tmp.sub("ab")}) == 2);
  const std::string manifest = slurp(tmp.root / "ab" / "manifest.txt");
  CHECK(manifest.find("not an integer") != std::string::npos);
}
