#include "hdt/reports.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace hdt {

namespace {

const char* kEvalHeader =
    "policy,env,desired_source,desired_return,episodes,seed,mean_return,success_rate,"
    "mean_length,data_mean_return,data_mean_length";

std::vector<std::string> split(const std::string& s, char d) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == d) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error("report: " + what); }

std::string cell_desc(const std::string& env, const std::string& policy,
                      const std::string& setting) {
  std::string d = "env '" + env + "' policy '" + policy + "'";
  if (!setting.empty()) d += " setting '" + setting + "'";
  return d;
}

// exactly one matching row; setting empty = any desired source
const EvalRow& find_unique(const std::vector<EvalRow>& rows, const std::string& env,
                           const std::string& policy, const std::string& setting) {
  const EvalRow* found = nullptr;
  for (const EvalRow& r : rows) {
    if (r.env != env || r.policy != policy) continue;
    if (!setting.empty() && r.desired_source != setting) continue;
    if (found) fail("duplicate eval rows: " + cell_desc(env, policy, setting));
    found = &r;
  }
  if (!found) fail("missing eval row: " + cell_desc(env, policy, setting));
  return *found;
}

std::vector<std::string> envs_with_any(const std::vector<EvalRow>& rows,
                                       const std::set<std::string>& policies) {
  std::set<std::string> envs;
  for (const EvalRow& r : rows) {
    if (policies.count(r.policy)) envs.insert(r.env);
  }
  return {envs.begin(), envs.end()};  // set iteration = sorted rows
}

void write_whole(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write '" + path + "'");
  out << text;
  if (!out) fail("write to '" + path + "' failed");
}

double num(const EvalRow& r, const std::string& field, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    fail("row for " + cell_desc(r.env, r.policy, r.desired_source) + " has a non-numeric " +
         field + " '" + value + "'");
  }
}

}  // namespace

std::vector<EvalRow> read_eval_rows(const std::vector<std::string>& paths) {
  if (paths.empty()) fail("no eval files given");
  std::vector<EvalRow> rows;
  for (const std::string& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot read '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != kEvalHeader) {
      fail("'" + path + "' is not an eval summary (unexpected header)");
    }
    int64_t n = 1;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      const auto f = split(line, ',');
      if (f.size() != 11) {
        fail("'" + path + "' line " + std::to_string(n) + " has " + std::to_string(f.size()) +
             " fields, expected 11");
      }
      rows.push_back(EvalRow{f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8], f[9], f[10]});
    }
  }
  return rows;
}

void write_table1(const std::string& path, const std::vector<EvalRow>& rows) {
  const auto envs = envs_with_any(rows, {"dt", "dt-no-rtg"});
  if (envs.empty()) fail("no eval rows for table 1 (need dt and dt-no-rtg)");

  std::ostringstream out;
  out << "env,setting,desired_return,dt_mean_return,dt_success_rate,"
         "dt_no_rtg_mean_return,dt_no_rtg_success_rate\n";
  for (const std::string& env : envs) {
    const EvalRow& bare = find_unique(rows, env, "dt-no-rtg", "");
    for (const char* setting : {"half-max", "max-in-dataset", "fixed"}) {
      const EvalRow& dt = find_unique(rows, env, "dt", setting);
      out << env << ',' << setting << ',' << dt.desired_return << ',' << dt.mean_return << ','
          << dt.success_rate << ',' << bare.mean_return << ',' << bare.success_rate << '\n';
    }
  }
  write_whole(path, out.str());
}

void write_table2(const std::string& path, const std::vector<EvalRow>& rows) {
  const auto envs = envs_with_any(rows, {"hdt", "hdt-plus-rtg"});
  if (envs.empty()) fail("no eval rows for table 2 (need hdt and hdt-plus-rtg)");

  std::ostringstream out;
  out << "env,hdt_mean_return,hdt_success_rate,"
         "hdt_plus_rtg_mean_return,hdt_plus_rtg_success_rate\n";
  for (const std::string& env : envs) {
    const EvalRow& hdt = find_unique(rows, env, "hdt", "");
    const EvalRow& plus = find_unique(rows, env, "hdt-plus-rtg", "");
    out << env << ',' << hdt.mean_return << ',' << hdt.success_rate << ',' << plus.mean_return
        << ',' << plus.success_rate << '\n';
  }
  write_whole(path, out.str());
}

void write_table3(const std::string& path, const std::vector<EvalRow>& rows) {
  const auto envs = envs_with_any(rows, {"hdt", "dt", "bc"});
  if (envs.empty()) fail("no eval rows for table 3 (need hdt, dt and bc)");

  std::ostringstream out;
  out << "env,data_mean_return,data_mean_length,hdt_mean_return,hdt_success_rate,"
         "dt_setting,dt_mean_return,dt_success_rate,bc_mean_return,bc_success_rate\n";
  for (const std::string& env : envs) {
    const EvalRow& hdt = find_unique(rows, env, "hdt", "");
    const EvalRow& bc = find_unique(rows, env, "bc", "");

    // dt enters at its strongest desired-return setting; ties resolve by
    // success rate, then mean return, then the fixed setting order below
    const auto rank = [](const std::string& s) -> int {
      if (s == "half-max") return 0;
      if (s == "max-in-dataset") return 1;
      if (s == "fixed") return 2;
      return 3;
    };
    const EvalRow* best = nullptr;
    for (const EvalRow& r : rows) {
      if (r.env != env || r.policy != "dt") continue;
      if (!best) {
        best = &r;
        continue;
      }
      const double sr = num(r, "success_rate", r.success_rate);
      const double sb = num(*best, "success_rate", best->success_rate);
      const double mr = num(r, "mean_return", r.mean_return);
      const double mb = num(*best, "mean_return", best->mean_return);
      if (sr > sb || (sr == sb && mr > mb) ||
          (sr == sb && mr == mb && rank(r.desired_source) < rank(best->desired_source))) {
        best = &r;
      }
    }
    if (!best) fail("missing eval row: " + cell_desc(env, "dt", ""));

    out << env << ',' << hdt.data_mean_return << ',' << hdt.data_mean_length << ','
        << hdt.mean_return << ',' << hdt.success_rate << ',' << best->desired_source << ','
        << best->mean_return << ',' << best->success_rate << ',' << bc.mean_return << ','
        << bc.success_rate << '\n';
  }
  write_whole(path, out.str());
}

}  // namespace hdt
