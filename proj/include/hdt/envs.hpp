#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hdt/trajectory.hpp"

namespace hdt {

struct EnvSpec {
  std::string name;
  int64_t state_dim = 0;
  int64_t action_dim = 0;
  int64_t horizon = 0;
  uint64_t layout_seed = 0;
};

struct StepOutcome {
  std::vector<double> state;
  double reward = 0.0;
  bool done = false;
};

// Deterministic episodic environment. Dynamics depend only on (layout seed,
// episode seed, action sequence), so replaying logged actions reproduces the
// logged states exactly.
class Env {
 public:
  virtual ~Env() = default;

  const EnvSpec& spec() const { return spec_; }
  int64_t steps_taken() const { return steps_; }
  bool done() const { return done_; }
  bool succeeded() const { return success_; }

  std::vector<double> reset(uint64_t episode_seed);
  StepOutcome step(int64_t action);  // throws if called after done

  // Scripted-demonstrator hooks (privileged: they see the true layout, not
  // the one-hot observation). plan_from_current returns the optimal action
  // sequence from the current position to the current target; subtask_id
  // changes when the target changes (kitchen stages).
  virtual std::vector<int64_t> plan_from_current() const = 0;
  virtual int64_t subtask_id() const { return 0; }

 protected:
  virtual void do_reset(uint64_t episode_seed) = 0;
  virtual double apply(int64_t action) = 0;  // moves, returns reward, sets success_
  virtual std::vector<double> observe() const = 0;

  EnvSpec spec_;
  int64_t steps_ = 0;
  bool done_ = false;
  bool success_ = false;
};

// chain-dense | grid-maze-sparse | kitchen-lite; throws on unknown name.
std::unique_ptr<Env> make_env(const std::string& name, uint64_t layout_seed = 0);

// Plans a bounded script, executes it blindly, and replans when the script
// runs out or the subtask changes (receding horizon). With epsilon = 0 this
// follows the optimal path exactly; epsilon > 0 substitutes a uniform random
// action with that probability, which desynchronizes the current script.
class ScriptedDemonstrator {
 public:
  static constexpr size_t kScriptWindow = 12;

  ScriptedDemonstrator(double epsilon, uint64_t seed);
  void begin_episode();
  int64_t act(Env& env);

 private:
  double epsilon_;
  Prng rng_;
  std::vector<int64_t> plan_;
  size_t cursor_ = 0;
  int64_t plan_subtask_ = -1;
  bool fresh_ = true;
};

double demonstrator_epsilon(const std::string& quality);  // expert -> 0.0, medium -> 0.3

Dataset generate_dataset(Env& env, const std::string& quality, int64_t episodes, uint64_t seed);
// epsilon override for fixtures (1.0 degenerates to a uniform random policy)
Dataset generate_dataset_eps(Env& env, const std::string& quality, double epsilon, int64_t episodes,
                             uint64_t seed);

}  // namespace hdt
