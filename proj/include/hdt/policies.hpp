#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdt/graph.hpp"
#include "hdt/transformer.hpp"

namespace hdt {

// CLI identifiers: hdt, dt, dt-no-rtg, hdt-plus-rtg, bc
enum class PolicyKind { kHdt, kDt, kDtNoRtg, kHdtPlusRtg, kBc };

std::string policy_kind_name(PolicyKind kind);
PolicyKind policy_kind_from_name(const std::string& name);

// model sizing knobs shared by every kind
struct PolicyHyper {
  int64_t embed_dim = 128;
  int64_t n_layers = 3;
  int64_t n_heads = 1;
  int64_t context_K = 20;
  double dropout = 0.1;
  int64_t max_timestep = 1024;
  int64_t bc_hidden = 256;
};

// Normalization statistics and provenance a policy carries from its training
// dataset. Checkpoints persist all of it so evaluation is self-contained.
struct PolicyContext {
  std::vector<double> state_mean, state_std;
  double max_return = 0.0;      // best episode return in the training data
  double data_mean_return = 0.0;
  double data_mean_length = 0.0;
  std::string env;
  uint64_t env_seed = 0;
  std::string quality;
  std::string method;  // sub-goal labeling method

  // returns-to-go enter the model divided by this, so absurd desired returns
  // saturate instead of blowing up activations
  double rtg_scale() const;
};

struct TransformerNet {
  ModelConfig config;
  ModelParams params;
};

// two fully connected layers with a tanh between; maps one state to one action
struct MlpNet {
  int64_t in = 0, hidden = 0, out = 0;
  Tensor w1, b1, w2, b2;

  template <typename F>
  void visit(F&& f) {
    f("w1", w1, true);
    f("b1", b1, false);
    f("w2", w2, true);
    f("b2", b2, false);
  }
};

// A trained agent: which nets exist depends on the kind. hdt and
// hdt-plus-rtg pair a high-level mechanism (layout (s, sg), head = state
// width) with a low-level controller; dt variants are a single controller;
// bc is the MLP.
struct Policy {
  PolicyKind kind = PolicyKind::kHdt;
  PolicyHyper hyper;
  PolicyContext ctx;
  std::optional<TransformerNet> high;
  std::optional<TransformerNet> low;
  std::optional<MlpNet> bc;

  int64_t state_dim() const;
  int64_t action_dim() const;

  template <typename F>
  void visit_params(F&& f) {
    if (high) high->params.visit([&](const std::string& n, Tensor& t, bool d) { f("high." + n, t, d); });
    if (low) low->params.visit([&](const std::string& n, Tensor& t, bool d) { f("low." + n, t, d); });
    if (bc) bc->visit([&](const std::string& n, Tensor& t, bool d) { f("bc." + n, t, d); });
  }
};

std::vector<Modality> low_layout(PolicyKind kind);

Policy make_policy(PolicyKind kind, int64_t state_dim, int64_t action_dim,
                   const PolicyHyper& hyper, uint64_t init_seed);

// Masked-MSE training losses built on g (callers backprop through the
// returned scalar node). Targets: demonstrated actions for the low loss,
// normalized sub-goal states for the high loss; the step mask is replicated
// across target dims, so padded steps contribute zero. params_out receives
// the ids of the net's parameters in visit order.
Graph::Id build_loss_low(Graph& g, Policy& p, const SubTrajectoryBatch& batch,
                         Prng* dropout_rng = nullptr, std::vector<Graph::Id>* params_out = nullptr);
Graph::Id build_loss_high(Graph& g, Policy& p, const SubTrajectoryBatch& batch,
                          Prng* dropout_rng = nullptr, std::vector<Graph::Id>* params_out = nullptr);

// eval-mode conveniences (no dropout, fresh throwaway graph)
double loss_low(Policy& p, const SubTrajectoryBatch& batch);
double loss_high(Policy& p, const SubTrajectoryBatch& batch);

// Rollout-side step history in raw environment units. At decision time t it
// holds states s_0..s_t, executed actions a_0..a_{t-1}, sub-goals sg_0..sg_t
// (hdt family; sg_t set just before predict_action) and rtg_0..rtg_t (dt
// family). Only the channels the policy's layout needs have to be present.
struct History {
  std::vector<std::vector<double>> states;
  std::vector<std::vector<double>> actions;
  std::vector<std::vector<double>> subgoals;
  std::vector<double> rtg;
  std::vector<int64_t> timesteps;
};

// Head output at the latest state-token position, de-normalized back to raw
// state units. Histories longer than K are truncated to the K-suffix.
std::vector<double> predict_subgoal(Policy& p, const History& h);
std::vector<double> predict_action(Policy& p, const History& h);

nlohmann::ordered_json policy_to_json(const Policy& p);
Policy policy_from_json(const nlohmann::ordered_json& j);

// throws a config-mismatch error when the checkpoint does not fit the env
void ensure_compatible(const Policy& p, int64_t state_dim, int64_t action_dim);

}  // namespace hdt
