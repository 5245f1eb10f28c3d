#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sys/wait.h>
#include <sstream>
#include <vector>

#include "doctest.h"

#include "iclb/cli.hpp"

using namespace iclb;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "iclb");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

struct Workspace {
  fs::path root;
  fs::path config;
  Workspace() {
    root = fs::temp_directory_path() / ("iclb-cli-" + std::to_string(std::random_device{}()));
    fs::create_directories(root);
    config = root / "tiny.json";
    const nlohmann::json cfg = {
        {"model", {{"dim", 16}, {"heads", 2}, {"depth", 1}, {"head_depth", 2}, {"mlp_ratio", 2}}},
        {"tasks",
         {{"corpus_sizes",
           {{"segmentation", {{"train", 16}, {"test", 4}}},
            {"low_light", {{"train", 8}, {"test", 4}}},
            {"destriping", {{"train", 8}, {"test", 4}}},
            {"denoising", {{"train", 8}, {"test", 4}}},
            {"grayscale", {{"train", 8}, {"test", 4}}},
            {"colorization", {{"train", 8}, {"test", 4}}},
            {"inversion", {{"train", 0}, {"test", 4}}}}}}},
        {"training", {{"epochs", 1}}},
        {"attack", {{"tasks", {"low_light"}}, {"epoch_cap", 1}}},
        {"defense", {{"fractions", {1.0}}, {"epochs", 1}}},
    };
    std::ofstream(config) << cfg.dump(2);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string dir(const std::string& name) const { return (root / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  const Run r = run({"eval"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--checkpoint") != std::string::npos);
  CHECK(run({"report", "--in", "x", "--format", "xml"}).code == 2);
}

TEST_CASE("runtime failures exit with 1 and one error line") {
  Workspace ws;
  const Run r = run({"eval", "--checkpoint", ws.dir("absent.ckpt"), "--out", ws.dir("e")});
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  const Run bad_cfg = run({"gen", "--config", ws.dir("missing.json"), "--out", ws.dir("g")});
  CHECK(bad_cfg.code == 1);
  std::ofstream(ws.root / "bad.json") << R"({"attack": {"epsilonn": 0.1}})";
  const Run unknown = run({"gen", "--config", ws.dir("bad.json"), "--out", ws.dir("g")});
  CHECK(unknown.code == 1);
  CHECK(unknown.err.find("attack.epsilonn") != std::string::npos);
}

TEST_CASE("gen and poison write manifests") {
  Workspace ws;
  REQUIRE(run({"gen", "--config", ws.config.string(), "--seed", "4", "--out", ws.dir("gen")}).code == 0);
  const auto manifest = nlohmann::json::parse(slurp(ws.root / "gen" / "corpus.json"));
  CHECK(manifest["tasks"]["segmentation"]["train"][1] == 16);
  CHECK(fs::exists(ws.root / "gen" / "config.json"));
  REQUIRE(run({"poison", "--config", ws.config.string(), "--out", ws.dir("poison")}).code == 0);
  const auto plan = nlohmann::json::parse(slurp(ws.root / "poison" / "poison_plan.json"));
  CHECK(plan["phases"][0]["poison_counts"]["low_light"] == 2);
}

TEST_CASE("output directory falls back to the environment root") {
  Workspace ws;
  ::setenv(kOutRootEnv, ws.root.c_str(), 1);
  const Run r = run({"gen", "--config", ws.config.string()});
  ::unsetenv(kOutRootEnv);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(ws.root / "gen" / "corpus.json"));
}

TEST_CASE("train, attack, eval and report") {
  Workspace ws;
  const std::string cfg = ws.config.string();
  REQUIRE(run({"train", "--config", cfg, "--out", ws.dir("train")}).code == 0);
  const std::string base = (ws.root / "train" / "baseline.ckpt").string();
  CHECK(fs::exists(base));
  CHECK(fs::exists(ws.root / "train" / "report.csv"));

  const Run atk = run({"attack", "--config", cfg, "--baseline", base, "--out", ws.dir("attack")});
  REQUIRE(atk.code == 0);
  const std::string attacked = (ws.root / "attack" / "attacked.ckpt").string();
  CHECK(fs::exists(attacked));
  CHECK(fs::exists(ws.root / "attack" / "injection.json"));

  SUBCASE("report regeneration is byte identical") {
    const Run csv = run({"report", "--in", ws.dir("attack"), "--format", "csv"});
    REQUIRE(csv.code == 0);
    CHECK(csv.out == slurp(ws.root / "attack" / "report.csv"));
    CHECK(run({"report", "--in", ws.dir("attack"), "--format", "csv"}).out == csv.out);
    const Run json = run({"report", "--in", ws.dir("attack"), "--format", "json"});
    CHECK(nlohmann::json::parse(json.out) == nlohmann::json::parse(slurp(ws.root / "attack" / "report.json")));
  }
  SUBCASE("eval reproduces the attack report") {
    REQUIRE(run({"eval", "--config", cfg, "--checkpoint", attacked, "--baseline", base, "--out", ws.dir("eval")})
                .code == 0);
    const auto a = nlohmann::json::parse(slurp(ws.root / "attack" / "report.json"));
    const auto e = nlohmann::json::parse(slurp(ws.root / "eval" / "report.json"));
    CHECK(a["rows"].size() == e["rows"].size());
  }
  SUBCASE("defenses") {
    REQUIRE(run({"defend-finetune", "--config", cfg, "--checkpoint", attacked, "--baseline", base, "--out",
                 ws.dir("ft")})
                .code == 0);
    CHECK(fs::exists(ws.root / "ft" / "finetune.json"));
    REQUIRE(run({"defend-prompts", "--config", cfg, "--checkpoint", attacked, "--out", ws.dir("pr")}).code == 0);
    CHECK(slurp(ws.root / "pr" / "prompt_sweep.csv").size() > 0);
  }
}

TEST_CASE("the installed executable reports exit codes") {
  const std::string exe = ICLB_CLI_PATH;
  auto status = [](const std::string& cmd) { return WEXITSTATUS(std::system((cmd + " >/dev/null 2>&1").c_str())); };
  CHECK(status(exe + " --help") == 0);
  CHECK(status(exe + " nope") == 2);
  CHECK(status(exe + " eval --checkpoint /nonexistent.ckpt --out /tmp/iclb-cli-none") == 1);
}
