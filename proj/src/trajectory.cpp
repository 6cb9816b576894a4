#include "hdt/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace hdt {

using ordered_json = nlohmann::ordered_json;

bool Dataset::labeled() const {
  for (const auto& t : trajectories)
    if (!t.labeled()) return false;
  return !trajectories.empty();
}

int64_t Dataset::total_steps() const {
  int64_t n = 0;
  for (const auto& t : trajectories) n += t.horizon() + 1;
  return n;
}

double Dataset::max_return() const {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& t : trajectories) best = std::max(best, t.total_return());
  return best;
}

namespace {

void check_widths(const Trajectory& t, const DatasetMeta& meta, size_t episode) {
  const std::string who = "dataset: episode " + std::to_string(episode + 1);
  const size_t n = t.states.size();
  if (n == 0) throw std::runtime_error(who + " is empty");
  if (t.actions.size() != n || t.rewards.size() != n || t.timesteps.size() != n) {
    throw std::runtime_error(who + " has misaligned sequence lengths");
  }
  if (t.labeled() && t.subgoals.size() != n) {
    throw std::runtime_error(who + " has misaligned subgoal labels");
  }
  for (const auto& s : t.states) {
    if (static_cast<int64_t>(s.size()) != meta.state_dim) {
      throw std::runtime_error(who + " state width " + std::to_string(s.size()) +
                               " != " + std::to_string(meta.state_dim));
    }
  }
  for (const auto& a : t.actions) {
    if (static_cast<int64_t>(a.size()) != meta.action_dim) {
      throw std::runtime_error(who + " action width " + std::to_string(a.size()) +
                               " != " + std::to_string(meta.action_dim));
    }
  }
  for (const auto& sg : t.subgoals) {
    if (static_cast<int64_t>(sg.size()) != meta.state_dim) {
      throw std::runtime_error(who + " subgoal width " + std::to_string(sg.size()) +
                               " != " + std::to_string(meta.state_dim));
    }
  }
}

}  // namespace

Dataset make_dataset(std::vector<Trajectory> trajectories, DatasetMeta meta) {
  if (trajectories.empty()) throw std::runtime_error("dataset: no episodes");
  for (size_t i = 0; i < trajectories.size(); ++i) check_widths(trajectories[i], meta, i);

  Dataset d;
  d.trajectories = std::move(trajectories);
  d.meta = std::move(meta);

  const int64_t ds = d.meta.state_dim;
  d.state_mean.assign(static_cast<size_t>(ds), 0.0);
  d.state_std.assign(static_cast<size_t>(ds), 0.0);
  int64_t n = 0;
  for (const auto& t : d.trajectories)
    for (const auto& s : t.states) {
      for (int64_t j = 0; j < ds; ++j) d.state_mean[static_cast<size_t>(j)] += s[static_cast<size_t>(j)];
      ++n;
    }
  for (auto& m : d.state_mean) m /= static_cast<double>(n);
  for (const auto& t : d.trajectories)
    for (const auto& s : t.states)
      for (int64_t j = 0; j < ds; ++j) {
        const double c = s[static_cast<size_t>(j)] - d.state_mean[static_cast<size_t>(j)];
        d.state_std[static_cast<size_t>(j)] += c * c;
      }
  for (auto& v : d.state_std) {
    v = std::sqrt(v / static_cast<double>(n));
    if (v < 1e-6) v = 1.0;  // constant dimensions pass through unscaled
  }
  return d;
}

Trajectory compute_returns_to_go(Trajectory traj) {
  const size_t n = traj.rewards.size();
  traj.returns_to_go.assign(n, 0.0);
  double acc = 0.0;
  for (size_t t = n; t-- > 0;) {
    acc += traj.rewards[t];
    traj.returns_to_go[t] = acc;
  }
  return traj;
}

namespace {

std::vector<std::vector<double>> parse_matrix(const ordered_json& j) {
  std::vector<std::vector<double>> out;
  out.reserve(j.size());
  for (const auto& row : j) out.push_back(row.get<std::vector<double>>());
  return out;
}

}  // namespace

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("dataset: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset: missing header line");
  DatasetMeta meta;
  try {
    const auto h = ordered_json::parse(line);
    meta.env = h.at("env").get<std::string>();
    meta.state_dim = h.at("state_dim").get<int64_t>();
    meta.action_dim = h.at("action_dim").get<int64_t>();
    meta.seed = h.at("seed").get<uint64_t>();
    meta.env_seed = h.value("env_seed", uint64_t{0});
    if (h.contains("quality")) {
      meta.has_stats = true;
      meta.quality = h.value("quality", "");
      meta.mean_return = h.value("mean_return", 0.0);
      meta.mean_length = h.value("mean_length", 0.0);
      meta.max_return = h.value("max_return", 0.0);
    }
  } catch (const ordered_json::exception& e) {
    throw std::runtime_error(std::string("dataset: malformed header: ") + e.what());
  }

  std::vector<Trajectory> trajs;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Trajectory t;
    try {
      const auto j = ordered_json::parse(line);
      t.states = parse_matrix(j.at("states"));
      t.actions = parse_matrix(j.at("actions"));
      t.rewards = j.at("rewards").get<std::vector<double>>();
      if (j.contains("subgoals")) t.subgoals = parse_matrix(j.at("subgoals"));
    } catch (const ordered_json::exception& e) {
      throw std::runtime_error("dataset: malformed record at line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    t.timesteps.resize(t.states.size());
    for (size_t i = 0; i < t.timesteps.size(); ++i) t.timesteps[i] = static_cast<int64_t>(i);
    if (t.labeled()) t = compute_returns_to_go(std::move(t));
    trajs.push_back(std::move(t));
  }
  return make_dataset(std::move(trajs), std::move(meta));
}

void save_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dataset: cannot write " + path);

  ordered_json h;
  h["env"] = dataset.meta.env;
  h["state_dim"] = dataset.meta.state_dim;
  h["action_dim"] = dataset.meta.action_dim;
  h["seed"] = dataset.meta.seed;
  h["env_seed"] = dataset.meta.env_seed;
  if (dataset.meta.has_stats) {
    h["quality"] = dataset.meta.quality;
    h["mean_return"] = dataset.meta.mean_return;
    h["mean_length"] = dataset.meta.mean_length;
    h["max_return"] = dataset.meta.max_return;
  }
  out << h.dump() << "\n";

  for (const auto& t : dataset.trajectories) {
    ordered_json j;
    j["states"] = t.states;
    j["actions"] = t.actions;
    j["rewards"] = t.rewards;
    if (t.labeled()) j["subgoals"] = t.subgoals;
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error("dataset: write failed for " + path);
}

SubTrajectoryBatch sample_batch(const Dataset& dataset, int64_t B, int64_t K, Prng& rng) {
  if (B < 1 || K < 1) throw std::invalid_argument("sample_batch: B and K must be >= 1");
  if (!dataset.labeled()) {
    throw std::runtime_error("sample_batch: dataset has no subgoal labels");
  }

  // flat index over every timestep of every episode: uniform over timesteps
  // == length-proportional over episodes
  const int64_t total = dataset.total_steps();
  const int64_t ds = dataset.meta.state_dim;
  const int64_t da = dataset.meta.action_dim;

  SubTrajectoryBatch out;
  out.batch = B;
  out.context = K;
  out.states = Tensor({B, K, ds});
  out.actions = Tensor({B, K, da});
  out.subgoals = Tensor({B, K, ds});
  out.returns_to_go = Tensor({B, K, 1});
  out.timesteps.assign(static_cast<size_t>(B * K), 0);
  out.mask = Tensor({B, K});

  const auto& mean = dataset.state_mean;
  const auto& stdv = dataset.state_std;

  for (int64_t b = 0; b < B; ++b) {
    int64_t flat = rng.randint(total);
    size_t ti = 0;
    while (flat > dataset.trajectories[ti].horizon()) {
      flat -= dataset.trajectories[ti].horizon() + 1;
      ++ti;
    }
    const Trajectory& tr = dataset.trajectories[ti];
    const int64_t end = flat;  // window covers [end-K+1, end], clipped at 0
    const int64_t first = std::max<int64_t>(0, end - K + 1);
    const int64_t pad = K - (end - first + 1);
    for (int64_t t = first; t <= end; ++t) {
      const int64_t kk = pad + (t - first);
      const size_t su = static_cast<size_t>(t);
      for (int64_t j = 0; j < ds; ++j) {
        out.states.v[static_cast<size_t>(((b * K) + kk) * ds + j)] =
            (tr.states[su][static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) /
            stdv[static_cast<size_t>(j)];
        out.subgoals.v[static_cast<size_t>(((b * K) + kk) * ds + j)] =
            (tr.subgoals[su][static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) /
            stdv[static_cast<size_t>(j)];
      }
      for (int64_t j = 0; j < da; ++j) {
        out.actions.v[static_cast<size_t>(((b * K) + kk) * da + j)] =
            tr.actions[su][static_cast<size_t>(j)];
      }
      out.returns_to_go.v[static_cast<size_t>((b * K) + kk)] = tr.returns_to_go[su];
      out.timesteps[static_cast<size_t>((b * K) + kk)] = tr.timesteps[su];
      out.mask.v[static_cast<size_t>((b * K) + kk)] = 1.0;
    }
  }
  return out;
}

}  // namespace hdt
