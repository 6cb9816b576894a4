#pragma once

#include <string>
#include <vector>

namespace hdt {

// One evaluation summary line. Values stay as the strings the eval step
// wrote: table cells are copied through verbatim, never re-formatted.
struct EvalRow {
  std::string policy, env, desired_source, desired_return, episodes, seed;
  std::string mean_return, success_rate, mean_length;
  std::string data_mean_return, data_mean_length;
};

// Reads and concatenates eval CSVs, validating the header and field count of
// every file.
std::vector<EvalRow> read_eval_rows(const std::vector<std::string>& paths);

// Return-conditioning ablation: one row per env and desired-return setting
// (half-max, max-in-dataset, fixed), comparing dt against dt-no-rtg. The
// single unconditioned dt-no-rtg result repeats on every row of its env.
void write_table1(const std::string& path, const std::vector<EvalRow>& rows);

// Sub-goal vs sub-goal-plus-return conditioning: hdt against hdt-plus-rtg,
// one row per env.
void write_table2(const std::string& path, const std::vector<EvalRow>& rows);

// Headline comparison: hdt, dt at its best desired-return setting, and bc,
// one row per env, with the training-data mean return/length alongside.
void write_table3(const std::string& path, const std::vector<EvalRow>& rows);

// All tables fail on a missing or duplicated input row, naming the env,
// policy and setting, and never write a partial file.

}  // namespace hdt
