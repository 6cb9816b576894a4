#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdt/policies.hpp"
#include "hdt/trajectory.hpp"

namespace hdt {

struct TrainConfig {
  int64_t iterations = 10000;
  int64_t batch = 64;
  int64_t context = 20;
  double learning_rate = 1e-4;
  int64_t eval_every = 1000;
  int64_t eval_episodes = 10;
  uint64_t seed = 0;
  double clip_norm = 0.25;   // 0 switches clipping off
  int64_t warmup_iters = 100;
  double weight_decay = 1e-4;
  std::string method = "weighted-avg";  // sub-goal labeling, for provenance
  // model sizing
  int64_t embed_dim = 128;
  int64_t n_layers = 3;
  int64_t n_heads = 1;
  double dropout = 0.1;
  int64_t max_timestep = 1024;
  int64_t bc_hidden = 256;

  PolicyHyper hyper() const;
  void validate() const;
};

// Strict parse: unknown keys are rejected by name, missing keys keep the
// defaults above.
TrainConfig parse_train_config(const nlohmann::ordered_json& j);
nlohmann::ordered_json train_config_to_json(const TrainConfig& c);

// Decoupled weight decay, bias-corrected moments (0.9 / 0.999 / 1e-8),
// global-norm gradient clipping and linear learning-rate warmup.
class AdamW {
 public:
  AdamW() = default;
  AdamW(double lr, double weight_decay, double clip_norm, int64_t warmup_iters);

  // One update. params, grads and decay line up index for index; moment
  // buffers are allocated on first use. Returns the pre-clip global gradient
  // norm. Throws on non-finite gradients.
  double step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
              const std::vector<uint8_t>& decay);

  int64_t updates() const { return t_; }

  nlohmann::ordered_json to_json() const;
  static AdamW from_json(const nlohmann::ordered_json& j);

 private:
  double lr_ = 1e-4, wd_ = 0.0, clip_ = 0.0;
  int64_t warmup_ = 0;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Single gradient step on one net (low-level controller / behavior cloner,
// or the high-level mechanism). Returns the batch loss. The two nets share
// no parameters, so running them back to back on one batch is exactly a
// simultaneous update.
double train_step_low(Policy& policy, const SubTrajectoryBatch& batch, AdamW& opt,
                      Prng* dropout_rng);
double train_step_high(Policy& policy, const SubTrajectoryBatch& batch, AdamW& opt,
                       Prng* dropout_rng);

struct EvalPoint {
  int64_t iteration = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double loss_low = 0.0;   // mean batch loss since the previous point
  double loss_high = 0.0;  // 0 for kinds without a high-level net
};

struct TrainReport {
  std::vector<EvalPoint> points;
};

void write_train_report(const std::string& path, const TrainReport& report);

struct Checkpoint {
  Policy policy;
  TrainConfig config;
  int64_t iteration = 0;
  AdamW opt_low, opt_high;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

struct TrainOutcome {
  Checkpoint final;       // last-good state when diverged
  TrainReport report;     // truncated to the last good eval on divergence
  bool diverged = false;
  std::string note;       // single-line divergence reason
};

// Trains kind on dataset. One batch is sampled per iteration and drives the
// high-level update first, then the low-level one. Rollout evaluation runs
// every eval_every iterations (the report gets one row per eval). All
// randomness is derived from config.seed and the absolute iteration number,
// so a run is reproducible and a resumed run is bit-identical to an
// uninterrupted one. Sub-goal-planning kinds require a labeled dataset; the
// others label in memory with final-state, which their losses never read.
TrainOutcome train(PolicyKind kind, const Dataset& dataset, const TrainConfig& config);

// Continues a loaded checkpoint on the same dataset up to `iterations`
// (checkpoint config otherwise applies).
TrainOutcome resume(Checkpoint from, const Dataset& dataset, int64_t iterations);

}  // namespace hdt
