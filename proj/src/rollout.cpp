#include "hdt/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <json.hpp>

namespace hdt {

namespace {
constexpr uint64_t kTagEval = 'V';
}

std::string desired_source_name(DesiredSource s) {
  switch (s) {
    case DesiredSource::kMaxInDataset: return "max-in-dataset";
    case DesiredSource::kHalfMax: return "half-max";
    case DesiredSource::kFixed: return "fixed";
  }
  throw std::logic_error("rollout: bad desired source");
}

DesiredSource desired_source_from_name(const std::string& name) {
  if (name == "max-in-dataset") return DesiredSource::kMaxInDataset;
  if (name == "half-max") return DesiredSource::kHalfMax;
  if (name == "fixed") return DesiredSource::kFixed;
  throw std::runtime_error("rollout: unknown desired-return source '" + name + "'");
}

bool needs_desired_return(PolicyKind kind) {
  return kind == PolicyKind::kDt || kind == PolicyKind::kHdtPlusRtg;
}

std::string subgoal_refresh_name(SubgoalRefresh r) {
  return r == SubgoalRefresh::kEveryStep ? "every-step" : "on-reach";
}

SubgoalRefresh subgoal_refresh_from_name(const std::string& name) {
  if (name == "every-step") return SubgoalRefresh::kEveryStep;
  if (name == "on-reach") return SubgoalRefresh::kOnReach;
  throw std::runtime_error("rollout: unknown sub-goal refresh mode '" + name + "'");
}

double resolve_desired_return(const RolloutConfig& config, const PolicyContext& ctx) {
  switch (config.desired_source) {
    case DesiredSource::kMaxInDataset: return ctx.max_return;
    case DesiredSource::kHalfMax: return 0.5 * ctx.max_return;
    case DesiredSource::kFixed: return config.desired_value;
  }
  throw std::logic_error("rollout: bad desired source");
}

namespace {

bool plans_subgoals(PolicyKind kind) {
  return kind == PolicyKind::kHdt || kind == PolicyKind::kHdtPlusRtg;
}

// RMS distance in normalized state units
double normalized_distance(const std::vector<double>& s, const std::vector<double>& sg,
                           const std::vector<double>& stdv) {
  double acc = 0.0;
  for (size_t j = 0; j < s.size(); ++j) {
    const double d = (s[j] - sg[j]) / stdv[j];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(s.size()));
}

int64_t argmax(const std::vector<double>& v) {
  return static_cast<int64_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

double rollout_episode(Policy& policy, Env& env, uint64_t episode_seed, const RolloutConfig& config,
                       EpisodeTrace* trace) {
  const int64_t horizon = env.spec().horizon;
  if (policy.hyper.max_timestep < horizon + 1) {
    throw std::runtime_error("eval: policy max_timestep " +
                             std::to_string(policy.hyper.max_timestep) + " cannot cover horizon " +
                             std::to_string(horizon) + " of '" + env.spec().name + "'");
  }
  const bool with_rtg = needs_desired_return(policy.kind);
  const bool with_sg = plans_subgoals(policy.kind);
  const int64_t da = policy.action_dim();

  History h;
  h.states.push_back(env.reset(episode_seed));
  h.timesteps.push_back(0);
  if (with_rtg) h.rtg.push_back(resolve_desired_return(config, policy.ctx));

  double total = 0.0;
  while (!env.done()) {
    if (with_sg) {
      if (config.subgoal_refresh == SubgoalRefresh::kEveryStep || h.subgoals.empty() ||
          normalized_distance(h.states.back(), h.subgoals.back(), policy.ctx.state_std) <=
              config.reach_threshold) {
        h.subgoals.push_back(predict_subgoal(policy, h));
      } else {
        h.subgoals.push_back(h.subgoals.back());  // keep chasing the current one
      }
    }
    const int64_t a = argmax(predict_action(policy, h));
    const StepOutcome out = env.step(a);
    total += out.reward;

    if (trace) {
      TraceStep row;
      row.state = h.states.back();
      if (with_sg) row.subgoal = h.subgoals.back();
      if (with_rtg) {
        row.has_rtg = true;
        row.rtg = h.rtg.back();
      }
      row.action = a;
      row.reward = out.reward;
      trace->steps.push_back(std::move(row));
    }

    std::vector<double> onehot(static_cast<size_t>(da), 0.0);
    onehot[static_cast<size_t>(a)] = 1.0;
    h.actions.push_back(std::move(onehot));
    h.states.push_back(out.state);
    h.timesteps.push_back(env.steps_taken());
    if (with_rtg) h.rtg.push_back(h.rtg.back() - out.reward);  // on purpose never clamped
  }

  if (trace) {
    trace->seed = episode_seed;
    trace->total_return = total;
    trace->success = env.succeeded();
  }
  return total;
}

double EvalResult::mean_return() const {
  double acc = 0.0;
  for (double r : returns) acc += r;
  return returns.empty() ? 0.0 : acc / static_cast<double>(returns.size());
}

double EvalResult::success_rate() const {
  double acc = 0.0;
  for (uint8_t s : successes) acc += s;
  return successes.empty() ? 0.0 : acc / static_cast<double>(successes.size());
}

double EvalResult::mean_length() const {
  double acc = 0.0;
  for (int64_t l : lengths) acc += static_cast<double>(l);
  return lengths.empty() ? 0.0 : acc / static_cast<double>(lengths.size());
}

int eval_thread_count() {
  int n = 1;
#ifdef _OPENMP
  n = omp_get_max_threads();
#endif
  if (const char* cap = std::getenv("HDT_THREADS")) {
    const int c = std::atoi(cap);
    if (c >= 1) n = std::min(n, c);
  }
  return n;
}

EvalResult evaluate(Policy& policy, const RolloutConfig& config, bool keep_traces) {
  if (policy.ctx.env.empty()) throw std::runtime_error("eval: policy has no environment set");
  if (config.episodes < 1) throw std::invalid_argument("eval: episodes must be positive");

  // fail fast on config problems instead of inside the parallel region
  {
    auto probe = make_env(policy.ctx.env, policy.ctx.env_seed);
    ensure_compatible(policy, probe->spec().state_dim, probe->spec().action_dim);
    if (policy.hyper.max_timestep < probe->spec().horizon + 1) {
      throw std::runtime_error("eval: policy max_timestep " +
                               std::to_string(policy.hyper.max_timestep) +
                               " cannot cover horizon " + std::to_string(probe->spec().horizon) +
                               " of '" + probe->spec().name + "'");
    }
  }

  const int64_t n = config.episodes;
  EvalResult res;
  res.returns.assign(static_cast<size_t>(n), 0.0);
  res.successes.assign(static_cast<size_t>(n), 0);
  res.lengths.assign(static_cast<size_t>(n), 0);
  if (keep_traces) res.traces.assign(static_cast<size_t>(n), EpisodeTrace{});

  std::string failure;
  const int threads = eval_thread_count();
#ifdef _OPENMP
#pragma omp parallel for num_threads(threads) schedule(dynamic)
#endif
  for (int64_t e = 0; e < n; ++e) {
    try {
      auto env = make_env(policy.ctx.env, policy.ctx.env_seed);
      EpisodeTrace trace;
      const double total =
          rollout_episode(policy, *env, derive_seed(config.seed, kTagEval, static_cast<uint64_t>(e)),
                          config, keep_traces ? &trace : nullptr);
      res.returns[static_cast<size_t>(e)] = total;
      res.lengths[static_cast<size_t>(e)] = env->steps_taken();
      res.successes[static_cast<size_t>(e)] = env->succeeded() ? 1 : 0;
      if (keep_traces) {
        trace.episode = e;
        res.traces[static_cast<size_t>(e)] = std::move(trace);
      }
    } catch (const std::exception& ex) {
#ifdef _OPENMP
#pragma omp critical
#endif
      if (failure.empty()) failure = ex.what();
    }
  }
  if (!failure.empty()) throw std::runtime_error(failure);
  return res;
}

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_eval_csv(const std::string& path, const Policy& policy, const RolloutConfig& config,
                    const EvalResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("eval: cannot write '" + path + "'");
  const bool with_rtg = needs_desired_return(policy.kind);
  out << "policy,env,desired_source,desired_return,episodes,seed,mean_return,success_rate,"
         "mean_length,data_mean_return,data_mean_length\n";
  out << policy_kind_name(policy.kind) << ',' << policy.ctx.env << ','
      << (with_rtg ? desired_source_name(config.desired_source) : "none") << ','
      << fmt6(with_rtg ? resolve_desired_return(config, policy.ctx) : 0.0) << ','
      << config.episodes << ',' << config.seed << ',' << fmt6(result.mean_return()) << ','
      << fmt6(result.success_rate()) << ',' << fmt6(result.mean_length()) << ','
      << fmt6(policy.ctx.data_mean_return) << ',' << fmt6(policy.ctx.data_mean_length) << '\n';
  if (!out) throw std::runtime_error("eval: write to '" + path + "' failed");
}

void write_trace_jsonl(const std::string& path, const EvalResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("eval: cannot write '" + path + "'");
  for (const EpisodeTrace& tr : result.traces) {
    for (size_t t = 0; t < tr.steps.size(); ++t) {
      const TraceStep& s = tr.steps[t];
      nlohmann::ordered_json j;
      j["episode"] = tr.episode;
      j["t"] = t;
      j["state"] = s.state;
      if (!s.subgoal.empty()) j["subgoal"] = s.subgoal;
      if (s.has_rtg) j["rtg"] = s.rtg;
      j["action"] = s.action;
      j["reward"] = s.reward;
      out << j.dump() << '\n';
    }
  }
  if (!out) throw std::runtime_error("eval: write to '" + path + "' failed");
}

}  // namespace hdt
