#include "hdt/policies.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hdt {

using ordered_json = nlohmann::ordered_json;

std::string policy_kind_name(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::kHdt: return "hdt";
    case PolicyKind::kDt: return "dt";
    case PolicyKind::kDtNoRtg: return "dt-no-rtg";
    case PolicyKind::kHdtPlusRtg: return "hdt-plus-rtg";
    case PolicyKind::kBc: return "bc";
  }
  throw std::logic_error("policy: bad kind");
}

PolicyKind policy_kind_from_name(const std::string& name) {
  if (name == "hdt") return PolicyKind::kHdt;
  if (name == "dt") return PolicyKind::kDt;
  if (name == "dt-no-rtg") return PolicyKind::kDtNoRtg;
  if (name == "hdt-plus-rtg") return PolicyKind::kHdtPlusRtg;
  if (name == "bc") return PolicyKind::kBc;
  throw std::runtime_error("policy: unknown kind '" + name + "'");
}

double PolicyContext::rtg_scale() const { return 1.0 / std::max(1.0, std::abs(max_return)); }

int64_t Policy::state_dim() const {
  if (low) return low->config.state_dim;
  if (high) return high->config.state_dim;
  if (bc) return bc->in;
  throw std::logic_error("policy: no nets");
}

int64_t Policy::action_dim() const {
  if (low) return low->config.action_dim;
  if (bc) return bc->out;
  throw std::logic_error("policy: no action net");
}

std::vector<Modality> low_layout(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::kHdt: return {Modality::kSubgoal, Modality::kState, Modality::kAction};
    case PolicyKind::kDt: return {Modality::kReturn, Modality::kState, Modality::kAction};
    case PolicyKind::kDtNoRtg: return {Modality::kState, Modality::kAction};
    case PolicyKind::kHdtPlusRtg:
      return {Modality::kReturn, Modality::kSubgoal, Modality::kState, Modality::kAction};
    case PolicyKind::kBc: return {};
  }
  throw std::logic_error("policy: bad kind");
}

namespace {

ModelConfig base_config(const PolicyHyper& h, int64_t ds, int64_t da) {
  ModelConfig c;
  c.embed_dim = h.embed_dim;
  c.n_layers = h.n_layers;
  c.n_heads = h.n_heads;
  c.context_K = h.context_K;
  c.state_dim = ds;
  c.action_dim = da;
  c.max_timestep = h.max_timestep;
  c.dropout = h.dropout;
  return c;
}

}  // namespace

Policy make_policy(PolicyKind kind, int64_t state_dim, int64_t action_dim,
                   const PolicyHyper& hyper, uint64_t init_seed) {
  Policy p;
  p.kind = kind;
  p.hyper = hyper;
  p.ctx.state_mean.assign(static_cast<size_t>(state_dim), 0.0);
  p.ctx.state_std.assign(static_cast<size_t>(state_dim), 1.0);

  if (kind == PolicyKind::kBc) {
    MlpNet net;
    net.in = state_dim;
    net.hidden = hyper.bc_hidden;
    net.out = action_dim;
    net.w1 = Tensor({net.in, net.hidden});
    net.b1 = Tensor({net.hidden});
    net.w2 = Tensor({net.hidden, net.out});
    net.b2 = Tensor({net.out});
    Prng rng(derive_seed(init_seed, 'B'));
    for (double& v : net.w1.v) v = 0.02 * rng.normal();
    for (double& v : net.w2.v) v = 0.02 * rng.normal();
    p.bc = std::move(net);
    return p;
  }

  if (kind == PolicyKind::kHdt || kind == PolicyKind::kHdtPlusRtg) {
    TransformerNet net;
    net.config = base_config(hyper, state_dim, action_dim);
    net.config.layout = {Modality::kState, Modality::kSubgoal};
    net.config.head_dim = state_dim;  // predicts a state-space vector
    net.config.validate();
    Prng rng(derive_seed(init_seed, 'H'));
    net.params = init_params(net.config, rng);
    p.high = std::move(net);
  }

  TransformerNet net;
  net.config = base_config(hyper, state_dim, action_dim);
  net.config.layout = low_layout(kind);
  net.config.head_dim = action_dim;
  net.config.validate();
  Prng rng(derive_seed(init_seed, 'L'));
  net.params = init_params(net.config, rng);
  p.low = std::move(net);
  return p;
}

namespace {

// step-mask weights replicated across target dims, so the masked-MSE mean
// runs over unmasked steps only
Tensor replicate_mask(const Tensor& mask, int64_t width) {
  Tensor w({mask.dim(0), mask.dim(1), width});
  for (int64_t r = 0; r < mask.size(); ++r)
    for (int64_t c = 0; c < width; ++c) w.v[static_cast<size_t>(r * width + c)] = mask.v[static_cast<size_t>(r)];
  return w;
}

Graph::Id bc_loss(Graph& g, Policy& p, const SubTrajectoryBatch& batch,
                  std::vector<Graph::Id>* params_out) {
  MlpNet& net = *p.bc;
  const int64_t rows = batch.batch * batch.context;

  const Graph::Id w1 = g.param(net.w1), b1 = g.param(net.b1);
  const Graph::Id w2 = g.param(net.w2), b2 = g.param(net.b2);
  if (params_out) *params_out = {w1, b1, w2, b2};

  Tensor x = batch.states;
  x.shape = {rows, net.in};
  Tensor target = batch.actions;
  target.shape = {rows, net.out};

  const Graph::Id hidden = g.tanh_act(g.add_bias(g.matmul(g.constant(x), w1), b1));
  const Graph::Id pred = g.add_bias(g.matmul(hidden, w2), b2);

  Tensor weight = replicate_mask(batch.mask, net.out);
  weight.shape = {rows, net.out};
  return g.mean_squared_error(pred, target, weight);
}

Graph::Id transformer_loss(Graph& g, TransformerNet& net, const PolicyContext& ctx,
                           const SubTrajectoryBatch& batch, const Tensor& target,
                           Prng* dropout_rng, std::vector<Graph::Id>* params_out) {
  TransformerModel model(g, net.config, net.params);
  if (params_out) *params_out = model.param_ids();
  const auto channels = layout_channels(batch, net.config.layout, ctx.rtg_scale());
  const Graph::Id tokens = model.embed_tokens(channels, batch.timesteps);
  const Graph::Id pred = model.predict(tokens, batch.mask, dropout_rng);
  return g.mean_squared_error(pred, target, replicate_mask(batch.mask, target.cols()));
}

}  // namespace

Graph::Id build_loss_low(Graph& g, Policy& p, const SubTrajectoryBatch& batch, Prng* dropout_rng,
                         std::vector<Graph::Id>* params_out) {
  if (p.kind == PolicyKind::kBc) return bc_loss(g, p, batch, params_out);
  return transformer_loss(g, *p.low, p.ctx, batch, batch.actions, dropout_rng, params_out);
}

Graph::Id build_loss_high(Graph& g, Policy& p, const SubTrajectoryBatch& batch, Prng* dropout_rng,
                          std::vector<Graph::Id>* params_out) {
  if (!p.high) {
    throw std::runtime_error("loss: policy '" + policy_kind_name(p.kind) +
                             "' has no high-level mechanism");
  }
  return transformer_loss(g, *p.high, p.ctx, batch, batch.subgoals, dropout_rng, params_out);
}

double loss_low(Policy& p, const SubTrajectoryBatch& batch) {
  Graph g;
  return g.val(build_loss_low(g, p, batch)).v[0];
}

double loss_high(Policy& p, const SubTrajectoryBatch& batch) {
  Graph g;
  return g.val(build_loss_high(g, p, batch)).v[0];
}

namespace {

bool layout_has(const std::vector<Modality>& layout, Modality m) {
  return std::find(layout.begin(), layout.end(), m) != layout.end();
}

// Packs the K-suffix of a rollout history into a single-row batch. The
// current step's action (and, for the high-level model, its sub-goal) is a
// zero placeholder: those tokens sit after the state token, so the
// state-position read never attends to them.
SubTrajectoryBatch window_batch(const Policy& p, const std::vector<Modality>& layout,
                                const History& h, bool current_subgoal_known) {
  if (h.states.empty()) throw std::runtime_error("predict: empty history");
  const int64_t ds = p.state_dim(), da = p.action_dim();
  const int64_t steps = static_cast<int64_t>(h.states.size());

  if (layout_has(layout, Modality::kSubgoal)) {
    const size_t need = h.states.size() - (current_subgoal_known ? 0 : 1);
    if (h.subgoals.size() < need)
      throw std::runtime_error("predict: history is missing sub-goals");
  }
  if (layout_has(layout, Modality::kReturn) && h.rtg.size() < h.states.size())
    throw std::runtime_error("predict: history is missing returns-to-go");
  if (h.actions.size() + 1 < h.states.size())
    throw std::runtime_error("predict: history is missing past actions");

  const int64_t K = p.hyper.context_K;
  const int64_t n = std::min<int64_t>(steps, K);
  const int64_t from = steps - n;
  const int64_t pad = K - n;  // left-padded masked steps, like sampled batches

  SubTrajectoryBatch b;
  b.batch = 1;
  b.context = K;
  b.states = Tensor({1, K, ds});
  b.actions = Tensor({1, K, da});
  b.subgoals = Tensor({1, K, ds});
  b.returns_to_go = Tensor({1, K, 1});
  b.timesteps.assign(static_cast<size_t>(K), 0);
  b.mask = Tensor({1, K});

  const auto& mean = p.ctx.state_mean;
  const auto& stdv = p.ctx.state_std;
  for (int64_t i = pad; i < K; ++i) {
    b.mask.v[static_cast<size_t>(i)] = 1.0;
    const size_t step = static_cast<size_t>(from + (i - pad));
    for (int64_t j = 0; j < ds; ++j) {
      b.states.v[static_cast<size_t>(i * ds + j)] =
          (h.states[step][static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) / stdv[static_cast<size_t>(j)];
      if (step < h.subgoals.size()) {
        b.subgoals.v[static_cast<size_t>(i * ds + j)] =
            (h.subgoals[step][static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) / stdv[static_cast<size_t>(j)];
      }
    }
    if (step < h.actions.size())
      for (int64_t j = 0; j < da; ++j)
        b.actions.v[static_cast<size_t>(i * da + j)] = h.actions[step][static_cast<size_t>(j)];
    if (step < h.rtg.size()) b.returns_to_go.v[static_cast<size_t>(i)] = h.rtg[step];
    b.timesteps[static_cast<size_t>(i)] =
        step < h.timesteps.size() ? h.timesteps[step] : static_cast<int64_t>(step);
  }
  return b;
}

// head output at the latest state-token position
std::vector<double> transformer_predict(TransformerNet& net, const PolicyContext& ctx,
                                        const SubTrajectoryBatch& b) {
  Graph g;
  TransformerModel model(g, net.config, net.params);
  const auto channels = layout_channels(b, net.config.layout, ctx.rtg_scale());
  const Graph::Id out = model.predict(model.embed_tokens(channels, b.timesteps), b.mask);
  const Tensor& o = g.val(out);
  const int64_t w = o.cols();
  std::vector<double> row(static_cast<size_t>(w));
  for (int64_t j = 0; j < w; ++j)
    row[static_cast<size_t>(j)] = o.v[static_cast<size_t>((b.context - 1) * w + j)];
  return row;
}

}  // namespace

std::vector<double> predict_subgoal(Policy& p, const History& h) {
  if (!p.high) {
    throw std::runtime_error("predict: policy '" + policy_kind_name(p.kind) +
                             "' has no high-level mechanism");
  }
  const SubTrajectoryBatch b = window_batch(p, p.high->config.layout, h, false);
  std::vector<double> sg = transformer_predict(*p.high, p.ctx, b);
  for (size_t j = 0; j < sg.size(); ++j) sg[j] = sg[j] * p.ctx.state_std[j] + p.ctx.state_mean[j];
  return sg;
}

std::vector<double> predict_action(Policy& p, const History& h) {
  if (p.kind == PolicyKind::kBc) {
    if (h.states.empty()) throw std::runtime_error("predict: empty history");
    MlpNet& net = *p.bc;
    Graph g;
    Tensor x({1, net.in});
    for (int64_t j = 0; j < net.in; ++j) {
      x.v[static_cast<size_t>(j)] = (h.states.back()[static_cast<size_t>(j)] - p.ctx.state_mean[static_cast<size_t>(j)]) /
                                    p.ctx.state_std[static_cast<size_t>(j)];
    }
    const Graph::Id hidden =
        g.tanh_act(g.add_bias(g.matmul(g.constant(x), g.param(net.w1)), g.param(net.b1)));
    const Graph::Id out = g.add_bias(g.matmul(hidden, g.param(net.w2)), g.param(net.b2));
    return g.val(out).v;
  }
  const SubTrajectoryBatch b = window_batch(p, p.low->config.layout, h, true);
  return transformer_predict(*p.low, p.ctx, b);
}

namespace {

ordered_json tensor_to_json(const Tensor& t) {
  ordered_json j;
  j["shape"] = t.shape;
  j["data"] = t.v;
  return j;
}

Tensor tensor_from_json(const ordered_json& j, const std::string& name) {
  Tensor t(j.at("shape").get<std::vector<int64_t>>());
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<int64_t>(data.size()) != t.size())
    throw std::runtime_error("checkpoint: tensor '" + name + "' has wrong element count");
  t.v = data;
  return t;
}

ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["embed_dim"] = c.embed_dim;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["context_K"] = c.context_K;
  std::vector<std::string> layout;
  for (const Modality m : c.layout) layout.push_back(modality_name(m));
  j["layout"] = layout;
  j["state_dim"] = c.state_dim;
  j["action_dim"] = c.action_dim;
  j["head_dim"] = c.head_dim;
  j["max_timestep"] = c.max_timestep;
  j["dropout"] = c.dropout;
  return j;
}

ModelConfig config_from_json(const ordered_json& j) {
  ModelConfig c;
  c.embed_dim = j.at("embed_dim").get<int64_t>();
  c.n_layers = j.at("n_layers").get<int64_t>();
  c.n_heads = j.at("n_heads").get<int64_t>();
  c.context_K = j.at("context_K").get<int64_t>();
  for (const auto& name : j.at("layout")) c.layout.push_back(modality_from_name(name.get<std::string>()));
  c.state_dim = j.at("state_dim").get<int64_t>();
  c.action_dim = j.at("action_dim").get<int64_t>();
  c.head_dim = j.at("head_dim").get<int64_t>();
  c.max_timestep = j.at("max_timestep").get<int64_t>();
  c.dropout = j.at("dropout").get<double>();
  c.validate();
  return c;
}

ordered_json transformer_to_json(TransformerNet& net) {
  ordered_json j;
  j["config"] = config_to_json(net.config);
  ordered_json params;
  net.params.visit([&](const std::string& n, Tensor& t, bool) { params[n] = tensor_to_json(t); });
  j["params"] = params;
  return j;
}

TransformerNet transformer_from_json(const ordered_json& j) {
  TransformerNet net;
  net.config = config_from_json(j.at("config"));
  Prng rng(0);
  net.params = init_params(net.config, rng);  // shapes only; values overwritten below
  const auto& params = j.at("params");
  net.params.visit([&](const std::string& n, Tensor& t, bool) {
    if (!params.contains(n)) throw std::runtime_error("checkpoint: missing tensor '" + n + "'");
    Tensor loaded = tensor_from_json(params.at(n), n);
    if (loaded.shape != t.shape)
      throw std::runtime_error("checkpoint: tensor '" + n + "' has wrong shape");
    t = std::move(loaded);
  });
  return net;
}

}  // namespace

ordered_json policy_to_json(const Policy& p) {
  Policy& mp = const_cast<Policy&>(p);  // visit() is non-const; values untouched
  ordered_json j;
  j["format"] = 1;
  j["kind"] = policy_kind_name(p.kind);

  ordered_json hyper;
  hyper["embed_dim"] = p.hyper.embed_dim;
  hyper["n_layers"] = p.hyper.n_layers;
  hyper["n_heads"] = p.hyper.n_heads;
  hyper["context_K"] = p.hyper.context_K;
  hyper["dropout"] = p.hyper.dropout;
  hyper["max_timestep"] = p.hyper.max_timestep;
  hyper["bc_hidden"] = p.hyper.bc_hidden;
  j["hyper"] = hyper;

  ordered_json ctx;
  ctx["state_mean"] = p.ctx.state_mean;
  ctx["state_std"] = p.ctx.state_std;
  ctx["max_return"] = p.ctx.max_return;
  ctx["data_mean_return"] = p.ctx.data_mean_return;
  ctx["data_mean_length"] = p.ctx.data_mean_length;
  ctx["env"] = p.ctx.env;
  ctx["env_seed"] = p.ctx.env_seed;
  ctx["quality"] = p.ctx.quality;
  ctx["method"] = p.ctx.method;
  j["context"] = ctx;

  ordered_json nets;
  if (mp.high) nets["high"] = transformer_to_json(*mp.high);
  if (mp.low) nets["low"] = transformer_to_json(*mp.low);
  if (mp.bc) {
    ordered_json b;
    b["in"] = mp.bc->in;
    b["hidden"] = mp.bc->hidden;
    b["out"] = mp.bc->out;
    ordered_json params;
    mp.bc->visit([&](const std::string& n, Tensor& t, bool) { params[n] = tensor_to_json(t); });
    b["params"] = params;
    nets["bc"] = b;
  }
  j["nets"] = nets;
  return j;
}

Policy policy_from_json(const ordered_json& j) {
  try {
    if (j.at("format").get<int64_t>() != 1)
      throw std::runtime_error("checkpoint: unsupported format version");
    Policy p;
    p.kind = policy_kind_from_name(j.at("kind").get<std::string>());

    const auto& hyper = j.at("hyper");
    p.hyper.embed_dim = hyper.at("embed_dim").get<int64_t>();
    p.hyper.n_layers = hyper.at("n_layers").get<int64_t>();
    p.hyper.n_heads = hyper.at("n_heads").get<int64_t>();
    p.hyper.context_K = hyper.at("context_K").get<int64_t>();
    p.hyper.dropout = hyper.at("dropout").get<double>();
    p.hyper.max_timestep = hyper.at("max_timestep").get<int64_t>();
    p.hyper.bc_hidden = hyper.at("bc_hidden").get<int64_t>();

    const auto& ctx = j.at("context");
    p.ctx.state_mean = ctx.at("state_mean").get<std::vector<double>>();
    p.ctx.state_std = ctx.at("state_std").get<std::vector<double>>();
    p.ctx.max_return = ctx.at("max_return").get<double>();
    p.ctx.data_mean_return = ctx.at("data_mean_return").get<double>();
    p.ctx.data_mean_length = ctx.at("data_mean_length").get<double>();
    p.ctx.env = ctx.at("env").get<std::string>();
    p.ctx.env_seed = ctx.at("env_seed").get<uint64_t>();
    p.ctx.quality = ctx.at("quality").get<std::string>();
    p.ctx.method = ctx.at("method").get<std::string>();

    const auto& nets = j.at("nets");
    if (nets.contains("high")) p.high = transformer_from_json(nets.at("high"));
    if (nets.contains("low")) p.low = transformer_from_json(nets.at("low"));
    if (nets.contains("bc")) {
      const auto& b = nets.at("bc");
      MlpNet net;
      net.in = b.at("in").get<int64_t>();
      net.hidden = b.at("hidden").get<int64_t>();
      net.out = b.at("out").get<int64_t>();
      const auto& params = b.at("params");
      net.w1 = tensor_from_json(params.at("w1"), "bc.w1");
      net.b1 = tensor_from_json(params.at("b1"), "bc.b1");
      net.w2 = tensor_from_json(params.at("w2"), "bc.w2");
      net.b2 = tensor_from_json(params.at("b2"), "bc.b2");
      p.bc = std::move(net);
    }
    if (!p.low && !p.bc) throw std::runtime_error("checkpoint: no action net");
    return p;
  } catch (const ordered_json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed: ") + e.what());
  }
}

void ensure_compatible(const Policy& p, int64_t state_dim, int64_t action_dim) {
  if (p.state_dim() != state_dim) {
    throw std::runtime_error("checkpoint: config mismatch: state_dim " +
                             std::to_string(p.state_dim()) + " does not match environment " +
                             std::to_string(state_dim));
  }
  if (p.action_dim() != action_dim) {
    throw std::runtime_error("checkpoint: config mismatch: action_dim " +
                             std::to_string(p.action_dim()) + " does not match environment " +
                             std::to_string(action_dim));
  }
}

}  // namespace hdt
