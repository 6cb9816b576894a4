#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hdt/envs.hpp"
#include "hdt/policies.hpp"

namespace hdt {

// where the initial desired return for return-conditioned policies comes from
enum class DesiredSource { kMaxInDataset, kHalfMax, kFixed };

std::string desired_source_name(DesiredSource s);
DesiredSource desired_source_from_name(const std::string& name);

// dt and hdt-plus-rtg condition on returns-to-go; the rest never see them
bool needs_desired_return(PolicyKind kind);

enum class SubgoalRefresh { kEveryStep, kOnReach };

std::string subgoal_refresh_name(SubgoalRefresh r);
SubgoalRefresh subgoal_refresh_from_name(const std::string& name);

struct RolloutConfig {
  int64_t episodes = 100;
  uint64_t seed = 0;
  DesiredSource desired_source = DesiredSource::kMaxInDataset;
  double desired_value = 0.0;  // used only with DesiredSource::kFixed
  SubgoalRefresh subgoal_refresh = SubgoalRefresh::kEveryStep;
  // on-reach: a sub-goal counts as reached when the RMS distance between the
  // normalized current state and normalized sub-goal drops to this or below
  double reach_threshold = 0.5;
};

double resolve_desired_return(const RolloutConfig& config, const PolicyContext& ctx);

struct TraceStep {
  std::vector<double> state;
  std::vector<double> subgoal;  // empty unless the policy plans sub-goals
  bool has_rtg = false;
  double rtg = 0.0;
  int64_t action = 0;
  double reward = 0.0;
};

struct EpisodeTrace {
  int64_t episode = 0;
  uint64_t seed = 0;
  std::vector<TraceStep> steps;
  double total_return = 0.0;
  bool success = false;
};

// One greedy episode: the argmax of the predicted action vector is executed
// (ties break to the lowest index). Returns the episode return. Throws if the
// policy's timestep table cannot cover the env horizon. trace may be null.
double rollout_episode(Policy& policy, Env& env, uint64_t episode_seed, const RolloutConfig& config,
                       EpisodeTrace* trace);

struct EvalResult {
  std::vector<double> returns;
  std::vector<uint8_t> successes;
  std::vector<int64_t> lengths;
  std::vector<EpisodeTrace> traces;  // filled only when requested

  double mean_return() const;
  double success_rate() const;
  double mean_length() const;
};

// Runs config.episodes rollouts on the policy's own environment (name and
// layout seed travel in its context). Episode e resets with a seed derived
// from config.seed and e alone, so different policies evaluated under the
// same config face identical episodes. Episodes run in parallel; results are
// indexed by episode, so the output is identical at any thread count.
// HDT_THREADS caps the worker count.
EvalResult evaluate(Policy& policy, const RolloutConfig& config, bool keep_traces = false);

// single summary row; desired_* columns read "none"/0 for unconditioned kinds
void write_eval_csv(const std::string& path, const Policy& policy, const RolloutConfig& config,
                    const EvalResult& result);

// one JSON object per step, grouped by episode in order
void write_trace_jsonl(const std::string& path, const EvalResult& result);

int eval_thread_count();  // hardware threads, capped by HDT_THREADS

}  // namespace hdt
