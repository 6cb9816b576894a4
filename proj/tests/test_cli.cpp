#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "json.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <sys/wait.h>

// exercises the installed binary exactly as a user would, via system()

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

const std::string& workdir() {
  static const std::string dir = [] {
    const std::string d = "/tmp/hdt_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

RunResult run_cli(const std::string& args) {
  const std::string& dir = workdir();
  const std::string cmd = "cd " + dir + " && " + HDT_CLI_PATH + " " + args + " > .out.txt 2> .err.txt";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(dir + "/.out.txt");
  r.err = slurp(dir + "/.err.txt");
  return r;
}

bool exists(const std::string& rel) { return fs::exists(workdir() + "/" + rel); }

// pipeline fixtures, built once on first use
const std::string& raw_dataset() {
  static const std::string path = [] {
    const RunResult r = run_cli(
        "gen-data --env chain-dense --quality medium --episodes 12 --seed 3 --out data.jsonl");
    REQUIRE(r.code == 0);
    return std::string("data.jsonl");
  }();
  return path;
}

const std::string& labeled_dataset() {
  static const std::string path = [] {
    const RunResult r =
        run_cli("label --in " + raw_dataset() + " --out labeled.jsonl --method weighted-avg");
    REQUIRE(r.code == 0);
    return std::string("labeled.jsonl");
  }();
  return path;
}

const std::string& train_config() {
  static const std::string path = [] {
    spit(workdir() + "/cfg.json",
         R"({"iterations": 30, "batch": 8, "context": 4, "learning_rate": 1e-3,
             "eval_every": 15, "eval_episodes": 4, "seed": 5, "embed_dim": 16,
             "n_layers": 1, "n_heads": 2, "dropout": 0.0, "max_timestep": 64,
             "bc_hidden": 16})");
    return std::string("cfg.json");
  }();
  return path;
}

// checkpoint for one policy kind, trained tiny
const std::string& checkpoint(const std::string& kind) {
  static std::map<std::string, std::string> done;
  auto it = done.find(kind);
  if (it == done.end()) {
    const RunResult r = run_cli("train --config " + train_config() + " --data " +
                                labeled_dataset() + " --kind " + kind + " --out-dir run_" + kind);
    REQUIRE(r.code == 0);
    it = done.emplace(kind, "run_" + kind + "/checkpoint.json").first;
  }
  return it->second;
}

}  // namespace

TEST_CASE("gen-data writes a summary and is repeatable byte for byte") {
  RunResult r = run_cli(
      "gen-data --env chain-dense --quality expert --episodes 1 --seed 7 --out expert1.jsonl");
  CHECK(r.code == 0);
  CHECK(r.out.find("1 episodes, mean return 50.000000") != std::string::npos);
  const std::string first = slurp(workdir() + "/expert1.jsonl");

  r = run_cli(
      "gen-data --env chain-dense --quality expert --episodes 1 --seed 7 --out expert1.jsonl");
  CHECK(r.code == 0);
  CHECK(slurp(workdir() + "/expert1.jsonl") == first);
}

TEST_CASE("gen-data rejects bad arguments with one-line errors") {
  RunResult r = run_cli("gen-data --env chain-dense --quality expert --episodes 0 --out x.jsonl");
  CHECK(r.code != 0);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK(r.err.find('\n') == r.err.size() - 1);  // exactly one line

  r = run_cli("gen-data --env flat-earth --quality expert --episodes 1 --out x.jsonl");
  CHECK(r.code != 0);
  CHECK(r.err.find("flat-earth") != std::string::npos);

  r = run_cli("gen-data --env chain-dense --quality expert --episodes 1");
  CHECK(r.code != 0);  // --out missing
  CHECK(r.err.rfind("error: ", 0) == 0);
}

TEST_CASE("label is idempotent and parses horizon methods") {
  const std::string& labeled = labeled_dataset();
  RunResult r = run_cli("label --in " + labeled + " --out relabel.jsonl");
  CHECK(r.code == 0);
  CHECK(slurp(workdir() + "/relabel.jsonl") == slurp(workdir() + "/" + labeled));

  r = run_cli("label --in " + raw_dataset() + " --out fh.jsonl --method fixed-horizon:5");
  CHECK(r.code == 0);

  r = run_cli("label --in " + raw_dataset() + " --out bad.jsonl --method sometimes");
  CHECK(r.code != 0);
  CHECK(r.err.find("sometimes") != std::string::npos);
}

TEST_CASE("train writes checkpoint and report under the output directory") {
  const std::string& ckpt = checkpoint("hdt");
  CHECK(exists(ckpt));
  CHECK(exists("run_hdt/report.csv"));
  const std::string report = slurp(workdir() + "/run_hdt/report.csv");
  CHECK(report.rfind("iteration,mean_return,success_rate,loss_low,loss_high\n", 0) == 0);
  CHECK(report.find("\n15,") != std::string::npos);
  CHECK(report.find("\n30,") != std::string::npos);
}

TEST_CASE("train applies config defaults and rejects unknown keys") {
  spit(workdir() + "/mini.json", R"({"iterations": 10, "batch": 4, "context": 4,
       "embed_dim": 8, "n_layers": 1, "n_heads": 1, "dropout": 0.0,
       "max_timestep": 64, "bc_hidden": 8})");
  RunResult r = run_cli("train --config mini.json --data " + labeled_dataset() +
                        " --kind bc --out-dir run_mini");
  CHECK(r.code == 0);
  // eval_every defaults far past 10 iterations: a header-only report
  CHECK(slurp(workdir() + "/run_mini/report.csv") ==
        "iteration,mean_return,success_rate,loss_low,loss_high\n");
  // missing learning_rate falls back to the default
  const auto ck = nlohmann::json::parse(slurp(workdir() + "/run_mini/checkpoint.json"));
  CHECK(ck.at("config").at("learning_rate").get<double>() == 1e-4);

  spit(workdir() + "/typo.json", R"({"iterations": 10, "lr": 1e-3})");
  r = run_cli("train --config typo.json --data " + labeled_dataset() +
              " --kind bc --out-dir run_typo");
  CHECK(r.code != 0);
  CHECK(r.err.find("unknown key 'lr'") != std::string::npos);

  spit(workdir() + "/garbage.json", "{ not json");
  r = run_cli("train --config garbage.json --data " + labeled_dataset() +
              " --kind bc --out-dir run_garbage");
  CHECK(r.code != 0);
  CHECK(r.err.find("not valid JSON") != std::string::npos);
}

TEST_CASE("train refuses sub-goal kinds on unlabeled data") {
  const RunResult r = run_cli("train --config " + train_config() + " --data " + raw_dataset() +
                              " --kind hdt --out-dir run_unlabeled");
  CHECK(r.code != 0);
  CHECK(r.err.find("label") != std::string::npos);
}

TEST_CASE("eval is deterministic and guards desired-return usage") {
  const std::string& hdt = checkpoint("hdt");
  RunResult r =
      run_cli("eval --checkpoint " + hdt + " --episodes 6 --seed 11 --out ev_hdt.csv");
  CHECK(r.code == 0);
  const std::string first = slurp(workdir() + "/ev_hdt.csv");
  r = run_cli("eval --checkpoint " + hdt + " --episodes 6 --seed 11 --out ev_hdt.csv");
  CHECK(r.code == 0);
  CHECK(slurp(workdir() + "/ev_hdt.csv") == first);  // identical CSV on rerun

  const std::string& dt = checkpoint("dt");
  r = run_cli("eval --checkpoint " + dt + " --episodes 6 --seed 11 --out ev_dt.csv");
  CHECK(r.code != 0);
  CHECK(r.err.find("needs --desired-return") != std::string::npos);

  r = run_cli("eval --checkpoint " + dt +
              " --episodes 6 --seed 11 --out ev_dt.csv --desired-return half-max");
  CHECK(r.code == 0);
  CHECK(slurp(workdir() + "/ev_dt.csv").find(",half-max,") != std::string::npos);

  r = run_cli("eval --checkpoint " + dt +
              " --episodes 6 --seed 11 --out ev_dt2.csv --desired-return 12.5");
  CHECK(r.code == 0);
  CHECK(slurp(workdir() + "/ev_dt2.csv").find(",fixed,12.500000,") != std::string::npos);

  r = run_cli("eval --checkpoint " + hdt +
              " --episodes 6 --seed 11 --out ev_bad.csv --desired-return half-max");
  CHECK(r.code != 0);
  CHECK(r.err.find("does not condition on a desired return") != std::string::npos);

  r = run_cli("eval --checkpoint " + dt +
              " --episodes 6 --seed 11 --out ev_bad.csv --desired-return soon");
  CHECK(r.code != 0);
  CHECK(r.err.find("'soon'") != std::string::npos);
}

TEST_CASE("eval rejects an environment the checkpoint does not fit") {
  const RunResult r = run_cli("eval --checkpoint " + checkpoint("hdt") +
                              " --env grid-maze-sparse --episodes 2 --out ev_mismatch.csv");
  CHECK(r.code != 0);
  CHECK(r.err.find("state_dim") != std::string::npos);
}

TEST_CASE("eval writes a step trace when asked") {
  const RunResult r = run_cli("eval --checkpoint " + checkpoint("hdt") +
                              " --episodes 2 --seed 1 --out ev_tr.csv --trace tr.jsonl");
  CHECK(r.code == 0);
  const std::string trace = slurp(workdir() + "/tr.jsonl");
  CHECK(trace.find("\"subgoal\":") != std::string::npos);
  CHECK(trace.find("\"action\":") != std::string::npos);
  // 2 episodes x 50 chain steps
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 100);
}

TEST_CASE("report assembles the three tables from eval CSVs") {
  const std::string& hdt = checkpoint("hdt");
  const std::string& dt = checkpoint("dt");
  auto eval_to = [&](const std::string& ckpt, const std::string& out, const std::string& extra) {
    const RunResult r =
        run_cli("eval --checkpoint " + ckpt + " --episodes 4 --seed 2 --out " + out + " " + extra);
    REQUIRE(r.code == 0);
  };
  eval_to(hdt, "g/hdt.csv", "");
  eval_to(checkpoint("hdt-plus-rtg"), "g/hpr.csv", "--desired-return max-in-dataset");
  eval_to(checkpoint("bc"), "g/bc.csv", "");
  eval_to(checkpoint("dt-no-rtg"), "g/dtnr.csv", "");
  eval_to(dt, "g/dt_h.csv", "--desired-return half-max");
  eval_to(dt, "g/dt_m.csv", "--desired-return max-in-dataset");
  eval_to(dt, "g/dt_f.csv", "--desired-return 10000");

  RunResult r = run_cli(
      "report --out-dir tables g/hdt.csv g/hpr.csv g/bc.csv g/dtnr.csv g/dt_h.csv g/dt_m.csv "
      "g/dt_f.csv");
  CHECK(r.code == 0);
  CHECK(slurp(workdir() + "/tables/table1.csv")
            .rfind("env,setting,desired_return,dt_mean_return,", 0) == 0);
  CHECK(slurp(workdir() + "/tables/table2.csv").rfind("env,hdt_mean_return,", 0) == 0);
  CHECK(slurp(workdir() + "/tables/table3.csv")
            .rfind("env,data_mean_return,data_mean_length,hdt_mean_return,", 0) == 0);

  // an incomplete grid names the hole and leaves no tables behind
  r = run_cli("report --out-dir tables2 g/hdt.csv g/hpr.csv g/bc.csv g/dtnr.csv g/dt_h.csv "
              "g/dt_m.csv");
  CHECK(r.code != 0);
  CHECK(r.err.find("policy 'dt' setting 'fixed'") != std::string::npos);
  CHECK(!exists("tables2/table1.csv"));
  CHECK(!exists("tables2/table2.csv"));
  CHECK(!exists("tables2/table3.csv"));
}

TEST_CASE("top-level usage errors are one line and nonzero") {
  RunResult r = run_cli("");
  CHECK(r.code != 0);
  CHECK(r.err.rfind("error: ", 0) == 0);

  r = run_cli("frobnicate --fast");
  CHECK(r.code != 0);
  CHECK(r.err.rfind("error: ", 0) == 0);

  r = run_cli("--help");
  CHECK(r.code == 0);
  CHECK(r.out.find("gen-data") != std::string::npos);
}
