#include <doctest.h>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <regex>

#include "support.hpp"

using namespace nse;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  std::string log = std::string(NSE_TEST_CACHE) + "/cli_output.txt";
  std::string cmd = std::string(NSE_CLI) + " " + args + " > " + log + " 2>&1";
  int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  r.out.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

std::string hash_line(const std::string& out) {
  std::smatch m;
  REQUIRE(std::regex_search(out, m, std::regex("hash ([0-9a-f]{16})")));
  return m[1];
}

// Run directory with the shared small model already in place.
std::string prepared_dir(const std::string& name) {
  const auto& fx = test::trained_small();
  RunConfig config = test::small_run(test::scratch_dir(name));
  RunPaths paths(config.out_dir);
  freeze_config(paths, config);
  load_or_generate_corpus(paths, config);
  fs::create_directories(fs::path(paths.checkpoint()).parent_path());
  save_checkpoint(paths.checkpoint(), fx.model);
  return config.out_dir;
}

}  // namespace

TEST_CASE("usage") {
  CHECK(run("--help").code == 0);
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  Result missing = run("edit --config /nonexistent/config.json");
  CHECK(missing.code == 2);
  CHECK(missing.out.find("config file not found") != std::string::npos);
  CHECK(run("pretrain --preset no-such-preset --out " + test::scratch_dir("cli_badpreset")).code == 2);
}

TEST_CASE("failed memorization gate exits with the gate code, deterministically") {
  std::string dir = test::scratch_dir("cli_gate");
  RunConfig config = test::small_run(dir + "/a");
  config.train.max_steps = 30;
  save_run_config(dir + "/short.json", config);
  Result a = run("pretrain --config " + dir + "/short.json --out " + dir + "/a");
  Result b = run("pretrain --config " + dir + "/short.json --out " + dir + "/b");
  CHECK(a.code == 3);
  CHECK(b.code == 3);
  CHECK(a.out.find("memorization gate failed") != std::string::npos);
  CHECK(hash_line(a.out) == hash_line(b.out));
  // the gate also guards editing
  CHECK(run("precompute-z --out " + dir + "/a").code == 3);
}

TEST_CASE("commands on a pretrained run directory") {
  std::string dir = prepared_dir("cli_run");
  Result cov = run("estimate-cov --out " + dir);
  CHECK(cov.code == 0);
  CHECK(cov.out.find("(cached)") == std::string::npos);
  Result again = run("estimate-cov --out " + dir);
  CHECK(again.code == 0);
  CHECK(again.out.find("(cached)") != std::string::npos);

  Result ev = run("eval --out " + dir + " --limit 3 --json eval/pre.json");
  CHECK(ev.code == 0);
  CHECK(ev.out.find("counterfact") != std::string::npos);
  CHECK(fs::exists(dir + "/eval/pre.json"));
  CHECK(run("eval --out " + dir + " --limit 0").code == 2);
  CHECK(run("eval --out " + dir + " --set nope").code == 2);

  CHECK(run("report --out " + dir).code == 2);
  Result edit = run("edit --out " + dir + " --no-eval");
  CHECK(edit.code == 0);
  CHECK(edit.out.find("round  3") != std::string::npos);
  Result rep = run("report --out " + dir);
  CHECK(rep.code == 0);
  CHECK(rep.out.find("rounds present 3 of 3") != std::string::npos);
}

TEST_CASE("edit without a pretrained model") {
  std::string dir = test::scratch_dir("cli_empty");
  RunConfig config = test::small_run(dir);
  save_run_config(dir + "/config.json", config);
  CHECK(run("edit --out " + dir).code == 2);
  CHECK(run("edit --out " + dir + " --mode bogus").code == 2);
}
