#include "hdt/subgoal.hpp"

#include <limits>
#include <stdexcept>

namespace hdt {

SubgoalMethod SubgoalMethod::parse(const std::string& name) {
  SubgoalMethod m;
  if (name == "weighted-avg") {
    m.kind = Kind::kWeightedAvg;
  } else if (name == "final-state") {
    m.kind = Kind::kFinalState;
  } else if (name == "max-reward") {
    m.kind = Kind::kMaxReward;
  } else if (name.rfind("fixed-horizon:", 0) == 0) {
    m.kind = Kind::kFixedHorizon;
    try {
      m.horizon = std::stoll(name.substr(14));
    } catch (const std::exception&) {
      throw std::invalid_argument("subgoal method: bad horizon in '" + name + "'");
    }
    if (m.horizon < 1) throw std::invalid_argument("subgoal method: horizon must be >= 1");
  } else {
    throw std::invalid_argument("subgoal method: unknown name '" + name + "'");
  }
  return m;
}

std::string SubgoalMethod::name() const {
  switch (kind) {
    case Kind::kWeightedAvg:
      return "weighted-avg";
    case Kind::kFinalState:
      return "final-state";
    case Kind::kFixedHorizon:
      return "fixed-horizon:" + std::to_string(horizon);
    case Kind::kMaxReward:
      return "max-reward";
  }
  return "";
}

double subgoal_weight(const Trajectory& traj, int64_t i, int64_t j) {
  const int64_t T = traj.horizon();
  if (i < 0 || j > T) throw std::out_of_range("subgoal_weight: index out of range");
  if (j <= i) throw std::invalid_argument("subgoal_weight: need j > i");
  double acc = 0.0;
  for (int64_t k = i + 1; k <= j; ++k) acc += traj.rewards[static_cast<size_t>(k)];
  return acc / static_cast<double>(j - i);
}

int64_t select_subgoal(const Trajectory& traj, int64_t i, const SubgoalMethod& method) {
  const int64_t T = traj.horizon();
  if (i < 0 || i > T) throw std::out_of_range("select_subgoal: index out of range");
  if (i == T) return T;
  switch (method.kind) {
    case SubgoalMethod::Kind::kFinalState:
      return T;
    case SubgoalMethod::Kind::kFixedHorizon:
      return std::min(i + method.horizon, T);
    case SubgoalMethod::Kind::kMaxReward: {
      int64_t best = i + 1;
      for (int64_t j = i + 2; j <= T; ++j) {
        if (traj.rewards[static_cast<size_t>(j)] > traj.rewards[static_cast<size_t>(best)]) {
          best = j;
        }
      }
      return best;
    }
    case SubgoalMethod::Kind::kWeightedAvg:
      break;
  }
  // running suffix sum keeps this O(T) with the same addition order as
  // summing (i, j] from scratch, so it agrees bit-for-bit with subgoal_weight
  double acc = 0.0;
  double best_w = -std::numeric_limits<double>::infinity();
  int64_t best_j = T;
  for (int64_t j = i + 1; j <= T; ++j) {
    acc += traj.rewards[static_cast<size_t>(j)];
    const double w = acc / static_cast<double>(j - i);
    if (w > best_w) {
      best_w = w;
      best_j = j;
    }
  }
  return best_w > 0.0 ? best_j : T;
}

Trajectory augment_trajectory(Trajectory traj, const SubgoalMethod& method) {
  const int64_t T = traj.horizon();
  traj.subgoals.resize(static_cast<size_t>(T + 1));
  for (int64_t t = 0; t <= T; ++t) {
    traj.subgoals[static_cast<size_t>(t)] =
        traj.states[static_cast<size_t>(select_subgoal(traj, t, method))];
  }
  return compute_returns_to_go(std::move(traj));
}

Dataset augment_dataset(Dataset dataset, const SubgoalMethod& method) {
  for (auto& t : dataset.trajectories) t = augment_trajectory(std::move(t), method);
  return dataset;
}

}  // namespace hdt
