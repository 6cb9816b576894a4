// Pipeline driver: data generation, sub-goal labeling, training, evaluation
// and report tables, each as a subcommand. Every command is deterministic
// given its flags; errors are a single "error: ..." line on stderr.

#include "CLI11.hpp"

#include "hdt/envs.hpp"
#include "hdt/policies.hpp"
#include "hdt/reports.hpp"
#include "hdt/rollout.hpp"
#include "hdt/subgoal.hpp"
#include "hdt/training.hpp"
#include "hdt/trajectory.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace hdt;

namespace {

const CLI::Validator kPositiveInt(
    [](std::string& s) -> std::string {
      try {
        size_t used = 0;
        if (std::stoll(s, &used) >= 1 && used == s.size()) return {};
      } catch (const std::exception&) {
      }
      return "expected a positive integer, got '" + s + "'";
    },
    "POSITIVE");

std::string single_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

void make_parent_dirs(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

struct GenDataOpts {
  std::string env, quality, out;
  int64_t episodes = 0;
  uint64_t seed = 0;
  uint64_t layout_seed = 0;
};

void run_gen_data(const GenDataOpts& o) {
  const auto env = make_env(o.env, o.layout_seed);
  const Dataset data = generate_dataset(*env, o.quality, o.episodes, o.seed);
  make_parent_dirs(o.out);
  save_dataset(data, o.out);
  std::printf("wrote %s: %lld episodes, mean return %.6f, mean length %.6f, max return %.6f\n",
              o.out.c_str(), static_cast<long long>(data.trajectories.size()),
              data.meta.mean_return, data.meta.mean_length, data.meta.max_return);
}

struct LabelOpts {
  std::string in, out;
  std::string method = "weighted-avg";
};

void run_label(const LabelOpts& o) {
  Dataset data = load_dataset(o.in);
  data = augment_dataset(std::move(data), SubgoalMethod::parse(o.method));
  make_parent_dirs(o.out);
  save_dataset(data, o.out);
  std::printf("wrote %s: %lld episodes labeled with %s\n", o.out.c_str(),
              static_cast<long long>(data.trajectories.size()), o.method.c_str());
}

struct TrainOpts {
  std::string config, data, kind, out_dir;
};

void run_train(const TrainOpts& o) {
  std::ifstream in(o.config);
  if (!in) throw std::runtime_error("config: cannot read '" + o.config + "'");
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const std::exception&) {
    throw std::runtime_error("config: '" + o.config + "' is not valid JSON");
  }
  const TrainConfig cfg = parse_train_config(j);
  const PolicyKind kind = policy_kind_from_name(o.kind);
  const Dataset data = load_dataset(o.data);

  const TrainOutcome out = train(kind, data, cfg);

  fs::create_directories(o.out_dir);
  const std::string ckpt = o.out_dir + "/checkpoint.json";
  const std::string report = o.out_dir + "/report.csv";
  save_checkpoint(ckpt, out.final);
  write_train_report(report, out.report);
  // a divergence abort still leaves the last good state on disk
  if (out.diverged) throw std::runtime_error(out.note + " (kept " + ckpt + ")");

  if (out.report.points.empty()) {
    std::printf("trained %s for %lld iterations: wrote %s and %s\n", o.kind.c_str(),
                static_cast<long long>(cfg.iterations), ckpt.c_str(), report.c_str());
  } else {
    const EvalPoint& last = out.report.points.back();
    std::printf(
        "trained %s for %lld iterations: mean return %.6f, success rate %.6f, "
        "loss_low %.6f, loss_high %.6f; wrote %s and %s\n",
        o.kind.c_str(), static_cast<long long>(cfg.iterations), last.mean_return,
        last.success_rate, last.loss_low, last.loss_high, ckpt.c_str(), report.c_str());
  }
}

struct EvalOpts {
  std::string checkpoint, out, trace;
  std::string env;          // optional override of the checkpoint's env
  uint64_t layout_seed = 0; // likewise
  int64_t episodes = 100;
  uint64_t seed = 0;
  std::string desired;  // max-in-dataset | half-max | a number
  std::string refresh = "every-step";
  double reach_threshold = 0.5;
};

void set_desired_return(RolloutConfig& rc, const std::string& s) {
  if (s == "max-in-dataset") {
    rc.desired_source = DesiredSource::kMaxInDataset;
    return;
  }
  if (s == "half-max") {
    rc.desired_source = DesiredSource::kHalfMax;
    return;
  }
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    rc.desired_source = DesiredSource::kFixed;
    rc.desired_value = v;
  } catch (const std::exception&) {
    throw std::runtime_error("eval: bad --desired-return '" + s +
                             "' (want max-in-dataset, half-max, or a number)");
  }
}

void run_eval(const EvalOpts& o, bool env_given, bool layout_given, bool desired_given) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  Policy& policy = ck.policy;
  if (env_given) policy.ctx.env = o.env;
  if (layout_given) policy.ctx.env_seed = o.layout_seed;

  RolloutConfig rc;
  rc.episodes = o.episodes;
  rc.seed = o.seed;
  rc.subgoal_refresh = subgoal_refresh_from_name(o.refresh);
  rc.reach_threshold = o.reach_threshold;
  const std::string kind = policy_kind_name(policy.kind);
  if (needs_desired_return(policy.kind)) {
    if (!desired_given) {
      throw std::runtime_error("eval: policy '" + kind +
                               "' needs --desired-return "
                               "(max-in-dataset, half-max, or a number)");
    }
    set_desired_return(rc, o.desired);
  } else if (desired_given) {
    throw std::runtime_error("eval: policy '" + kind +
                             "' does not condition on a desired return; drop --desired-return");
  }

  const EvalResult result = evaluate(policy, rc, !o.trace.empty());
  make_parent_dirs(o.out);
  write_eval_csv(o.out, policy, rc, result);
  if (!o.trace.empty()) {
    make_parent_dirs(o.trace);
    write_trace_jsonl(o.trace, result);
  }
  std::printf("evaluated %s on %s: mean return %.6f, success rate %.6f, mean length %.6f\n",
              kind.c_str(), policy.ctx.env.c_str(), result.mean_return(), result.success_rate(),
              result.mean_length());
}

struct ReportOpts {
  std::vector<std::string> inputs;
  std::string out_dir;
};

void run_report(const ReportOpts& o) {
  const std::vector<EvalRow> rows = read_eval_rows(o.inputs);
  fs::create_directories(o.out_dir);
  // stage through temp names so a failure in any table leaves nothing behind
  const std::vector<std::string> names = {"table1.csv", "table2.csv", "table3.csv"};
  std::vector<std::string> tmps;
  try {
    tmps.push_back(o.out_dir + "/.table1.csv.tmp");
    write_table1(tmps.back(), rows);
    tmps.push_back(o.out_dir + "/.table2.csv.tmp");
    write_table2(tmps.back(), rows);
    tmps.push_back(o.out_dir + "/.table3.csv.tmp");
    write_table3(tmps.back(), rows);
  } catch (...) {
    for (const std::string& t : tmps) {
      std::error_code ec;
      fs::remove(t, ec);
    }
    throw;
  }
  for (size_t i = 0; i < names.size(); ++i) {
    fs::rename(tmps[i], o.out_dir + "/" + names[i]);
  }
  std::printf("wrote %s/table1.csv, %s/table2.csv, %s/table3.csv\n", o.out_dir.c_str(),
              o.out_dir.c_str(), o.out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sub-goal-conditioned imitation learning toolkit"};
  app.require_subcommand(1);

  GenDataOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "run a scripted demonstrator, save a dataset");
  gen_cmd->add_option("--env", gen.env, "environment name")->required();
  gen_cmd->add_option("--quality", gen.quality, "demonstrator quality (expert|medium)")
      ->required();
  gen_cmd->add_option("--episodes", gen.episodes, "episode count")
      ->required()
      ->check(kPositiveInt);
  gen_cmd->add_option("--seed", gen.seed, "episode seed")->capture_default_str();
  gen_cmd->add_option("--layout-seed", gen.layout_seed, "environment layout seed")
      ->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "output dataset path")->required();
  gen_cmd->callback([&] { run_gen_data(gen); });

  LabelOpts label;
  auto* label_cmd = app.add_subcommand("label", "add sub-goal labels to a dataset");
  label_cmd->add_option("--in", label.in, "input dataset path")->required();
  label_cmd->add_option("--out", label.out, "output dataset path")->required();
  label_cmd
      ->add_option("--method", label.method,
                   "weighted-avg | final-state | fixed-horizon:<h> | max-reward")
      ->capture_default_str();
  label_cmd->callback([&] { run_label(label); });

  TrainOpts train;
  auto* train_cmd = app.add_subcommand("train", "train a policy on a dataset");
  train_cmd->add_option("--config", train.config, "JSON training config path")->required();
  train_cmd->add_option("--data", train.data, "dataset path")->required();
  train_cmd->add_option("--kind", train.kind, "hdt | dt | dt-no-rtg | hdt-plus-rtg | bc")
      ->required();
  train_cmd->add_option("--out-dir", train.out_dir, "directory for checkpoint.json + report.csv")
      ->required();
  train_cmd->callback([&] { run_train(train); });

  EvalOpts ev;
  auto* eval_cmd = app.add_subcommand("eval", "roll out a checkpoint, save a summary CSV");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint path")->required();
  auto* env_opt = eval_cmd->add_option("--env", ev.env, "override the checkpoint's environment");
  auto* layout_opt =
      eval_cmd->add_option("--layout-seed", ev.layout_seed, "override the layout seed");
  eval_cmd->add_option("--episodes", ev.episodes, "episode count")
      ->capture_default_str()
      ->check(kPositiveInt);
  eval_cmd->add_option("--seed", ev.seed, "evaluation seed")->capture_default_str();
  auto* desired_opt = eval_cmd->add_option(
      "--desired-return", ev.desired, "max-in-dataset | half-max | a number (rtg kinds only)");
  eval_cmd->add_option("--subgoal-refresh", ev.refresh, "every-step | on-reach")
      ->capture_default_str();
  eval_cmd->add_option("--reach-threshold", ev.reach_threshold, "on-reach distance threshold")
      ->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "output summary CSV path")->required();
  eval_cmd->add_option("--trace", ev.trace, "optional per-step JSONL trace path");
  eval_cmd->callback([&] {
    run_eval(ev, env_opt->count() > 0, layout_opt->count() > 0, desired_opt->count() > 0);
  });

  ReportOpts rep;
  auto* report_cmd = app.add_subcommand("report", "build the comparison tables from eval CSVs");
  report_cmd->add_option("--out-dir", rep.out_dir, "directory for table1..3.csv")->required();
  report_cmd->add_option("evals", rep.inputs, "eval summary CSVs")->required();
  report_cmd->callback([&] { run_report(rep); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << single_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << single_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
