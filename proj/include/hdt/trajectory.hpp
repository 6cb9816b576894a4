#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hdt/rng.hpp"
#include "hdt/tensor.hpp"

namespace hdt {

// One demonstration episode. Indexing follows r_t = R(s_t, a_t): states,
// actions, rewards and timesteps all run 0..T together. subgoals and
// returns_to_go stay empty until the episode is labeled.
struct Trajectory {
  std::vector<std::vector<double>> states;
  std::vector<std::vector<double>> actions;
  std::vector<double> rewards;
  std::vector<int64_t> timesteps;
  std::vector<std::vector<double>> subgoals;
  std::vector<double> returns_to_go;

  int64_t horizon() const { return static_cast<int64_t>(states.size()) - 1; }  // T
  bool labeled() const { return !subgoals.empty(); }
  double total_return() const {
    double s = 0.0;
    for (double r : rewards) s += r;
    return s;
  }
};

struct DatasetMeta {
  std::string env;
  int64_t state_dim = 0;
  int64_t action_dim = 0;
  uint64_t seed = 0;
  uint64_t env_seed = 0;  // environment layout identity (maze carving etc.)
  // set by the data generator; absent in hand-built fixtures
  bool has_stats = false;
  std::string quality;
  double mean_return = 0.0;
  double mean_length = 0.0;
  double max_return = 0.0;
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  std::vector<double> state_mean;
  std::vector<double> state_std;  // floored, always > 0
  DatasetMeta meta;

  bool labeled() const;
  int64_t total_steps() const;  // sum of T_i + 1
  double max_return() const;    // best episode return in the data
};

// Validates widths/lengths against meta and computes normalization
// statistics. Error messages identify episodes by 1-based index.
Dataset make_dataset(std::vector<Trajectory> trajectories, DatasetMeta meta);

Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& dataset, const std::string& path);

Trajectory compute_returns_to_go(Trajectory traj);

// B context windows, each ending at one timestep. Rows are left-padded up to
// K: mask 0 and all-zero channels before the window's first real step.
struct SubTrajectoryBatch {
  int64_t batch = 0;
  int64_t context = 0;
  Tensor states;         // (B, K, state_dim), normalized
  Tensor actions;        // (B, K, action_dim)
  Tensor subgoals;       // (B, K, state_dim), normalized
  Tensor returns_to_go;  // (B, K, 1), raw environment units
  std::vector<int64_t> timesteps;  // B*K row-major, 0 at padding
  Tensor mask;           // (B, K)
};

SubTrajectoryBatch sample_batch(const Dataset& dataset, int64_t B, int64_t K, Prng& rng);

}  // namespace hdt
