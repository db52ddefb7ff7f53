#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "lesion/fsutil.hpp"

using lesion::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run lesion_cli(const std::string& args, const fs::path& scratch) {
  const auto out = scratch / "stdout.txt";
  const auto err = scratch / "stderr.txt";
  const std::string cmd = std::string(LESION_CLI) + " " + args + " >" + out.string() + " 2>" +
                          err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = lesion::read_file(out);
  r.err = lesion::read_file(err);
  return r;
}

}  // namespace

TEST_CASE("usage errors exit 1, help exits 0") {
  TempDir dir("cli_usage");
  CHECK(lesion_cli("--help", dir.path()).code == 0);
  CHECK(lesion_cli("", dir.path()).code == 1);
  CHECK(lesion_cli("no-such-command", dir.path()).code == 1);
  CHECK(lesion_cli("split --task not_a_task", dir.path()).code == 1);
  const auto r = lesion_cli("reproduce table99 --out " + (dir.path() / "o").string(), dir.path());
  CHECK(r.code == 1);
  CHECK(r.err.find("table99") != std::string::npos);
}

TEST_CASE("evaluate without a trained model exits 2 naming train-clf") {
  TempDir dir("cli_eval");
  CHECK(lesion_cli("fixture " + (dir.path() / "fx").string(), dir.path()).code == 0);
  const auto r = lesion_cli("evaluate --config " + (dir.path() / "fx" / "pipeline.json").string() +
                                " --out " + (dir.path() / "empty").string(),
                            dir.path());
  CHECK(r.code == 2);
  CHECK(r.err.find("train-clf") != std::string::npos);
}

TEST_CASE("stage by stage with flag overrides, cache hits and parallel fold jobs") {
  TempDir dir("cli_stages");
  REQUIRE(lesion_cli("fixture " + dir.path().string(), dir.path()).code == 0);
  const auto out = dir.path() / "custom_out";
  const std::string common = " --config " + (dir.path() / "pipeline.json").string() + " --out " +
                             out.string() + " --seed 5 --task mel_vs_nv";

  // Stage order matters: the task plan needs masks.
  CHECK(lesion_cli("train-clf" + common, dir.path()).code == 2);
  for (const char* stage : {"ingest", "split", "train-seg", "segment", "split", "preprocess"}) {
    const auto r = lesion_cli(std::string(stage) + common, dir.path());
    INFO(stage << ": " << r.err);
    REQUIRE(r.code == 0);
  }

  const auto effective = nlohmann::json::parse(lesion::read_file(out / "config.effective.json"));
  CHECK(effective["seed"] == 5);
  CHECK(effective["task"] == "mel_vs_nv");
  CHECK(effective["out"] == out.string());

  const auto trained = lesion_cli("train-clf --parallel-folds 2" + common, dir.path());
  INFO(trained.err);
  REQUIRE(trained.code == 0);
  CHECK(trained.err.find("fold job 4 started") != std::string::npos);
  for (int f = 0; f < 5; ++f)
    CHECK(fs::exists(out / "models" / "mel_vs_nv" / ("fold" + std::to_string(f)) / "model.pt"));
  CHECK(fs::exists(out / "models" / "mel_vs_nv" / "stage.json"));

  REQUIRE(lesion_cli("evaluate" + common, dir.path()).code == 0);
  CHECK(fs::exists(out / "reports" / "mel_vs_nv" / "report.json"));

  const auto again = lesion_cli("split" + common, dir.path());
  CHECK(again.code == 0);
  CHECK(again.out.find("cache hit") != std::string::npos);
  const auto forced = lesion_cli("split --force" + common, dir.path());
  CHECK(forced.out.find("cache hit") == std::string::npos);

  const auto table = lesion_cli("reproduce table1" + common, dir.path());
  REQUIRE(table.code == 0);
  const auto j = nlohmann::json::parse(table.out);
  CHECK(j["rows"]["train"] == 22);
  CHECK(j["rows"]["val"] == 3);
  CHECK(j["rows"]["test"] == 7);
}
