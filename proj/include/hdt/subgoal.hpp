#pragma once

#include <cstdint>
#include <string>

#include "hdt/trajectory.hpp"

namespace hdt {

// Sub-goal selection method f. weighted-avg is the main algorithm; the other
// three are ablation baselines.
struct SubgoalMethod {
  enum class Kind { kWeightedAvg, kFinalState, kFixedHorizon, kMaxReward };
  Kind kind = Kind::kWeightedAvg;
  int64_t horizon = 0;  // fixed-horizon only, >= 1

  // "weighted-avg", "final-state", "fixed-horizon:<h>", "max-reward"
  static SubgoalMethod parse(const std::string& name);
  std::string name() const;
};

// W(s_j) = (sum of rewards over (i, j]) / (j - i)
double subgoal_weight(const Trajectory& traj, int64_t i, int64_t j);

// weighted-avg: argmax_{j in (i, T]} W(s_j), ties to the smallest j, falling
// back to T when no weight is positive or i == T.
int64_t select_subgoal(const Trajectory& traj, int64_t i, const SubgoalMethod& method);

// fills subgoals (sg_t = s_{select(t)}) and returns_to_go
Trajectory augment_trajectory(Trajectory traj, const SubgoalMethod& method);
Dataset augment_dataset(Dataset dataset, const SubgoalMethod& method);

}  // namespace hdt
