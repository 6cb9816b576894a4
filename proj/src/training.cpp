#include "hdt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hdt/rollout.hpp"
#include "hdt/subgoal.hpp"

namespace hdt {

namespace {
constexpr uint64_t kTagInit = 'I';
constexpr uint64_t kTagBatch = 'B';
constexpr uint64_t kTagDropLow = 'D';
constexpr uint64_t kTagDropHigh = 'G';
constexpr uint64_t kTagTrainEval = 'W';
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;
}  // namespace

PolicyHyper TrainConfig::hyper() const {
  PolicyHyper h;
  h.embed_dim = embed_dim;
  h.n_layers = n_layers;
  h.n_heads = n_heads;
  h.context_K = context;
  h.dropout = dropout;
  h.max_timestep = max_timestep;
  h.bc_hidden = bc_hidden;
  return h;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::runtime_error("config: " + what); };
  if (iterations < 0) fail("iterations must be >= 0");
  if (batch < 1) fail("batch must be >= 1");
  if (context < 1) fail("context must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (eval_episodes < 1) fail("eval_episodes must be >= 1");
  if (clip_norm < 0.0) fail("clip_norm must be >= 0");
  if (warmup_iters < 0) fail("warmup_iters must be >= 0");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (embed_dim % n_heads != 0) fail("embed_dim must be divisible by n_heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (max_timestep < 1) fail("max_timestep must be >= 1");
  if (bc_hidden < 1) fail("bc_hidden must be >= 1");
  try {
    SubgoalMethod::parse(method);
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

TrainConfig parse_train_config(const nlohmann::ordered_json& j) {
  static const std::set<std::string> known = {
      "iterations",  "batch",        "context",      "learning_rate", "eval_every",
      "eval_episodes", "seed",       "clip_norm",    "warmup_iters",  "weight_decay",
      "method",      "embed_dim",    "n_layers",     "n_heads",       "dropout",
      "max_timestep", "bc_hidden"};
  if (!j.is_object()) throw std::runtime_error("config: top level must be a JSON object");
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) {
      throw std::runtime_error("config: unknown key '" + item.key() + "'");
    }
  }
  TrainConfig c;
  try {
    if (j.contains("iterations")) c.iterations = j.at("iterations").get<int64_t>();
    if (j.contains("batch")) c.batch = j.at("batch").get<int64_t>();
    if (j.contains("context")) c.context = j.at("context").get<int64_t>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<int64_t>();
    if (j.contains("eval_episodes")) c.eval_episodes = j.at("eval_episodes").get<int64_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("clip_norm")) c.clip_norm = j.at("clip_norm").get<double>();
    if (j.contains("warmup_iters")) c.warmup_iters = j.at("warmup_iters").get<int64_t>();
    if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("method")) c.method = j.at("method").get<std::string>();
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<int64_t>();
    if (j.contains("n_layers")) c.n_layers = j.at("n_layers").get<int64_t>();
    if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<int64_t>();
    if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
    if (j.contains("max_timestep")) c.max_timestep = j.at("max_timestep").get<int64_t>();
    if (j.contains("bc_hidden")) c.bc_hidden = j.at("bc_hidden").get<int64_t>();
  } catch (const nlohmann::ordered_json::exception& e) {
    throw std::runtime_error(std::string("config: bad value: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["iterations"] = c.iterations;
  j["batch"] = c.batch;
  j["context"] = c.context;
  j["learning_rate"] = c.learning_rate;
  j["eval_every"] = c.eval_every;
  j["eval_episodes"] = c.eval_episodes;
  j["seed"] = c.seed;
  j["clip_norm"] = c.clip_norm;
  j["warmup_iters"] = c.warmup_iters;
  j["weight_decay"] = c.weight_decay;
  j["method"] = c.method;
  j["embed_dim"] = c.embed_dim;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["dropout"] = c.dropout;
  j["max_timestep"] = c.max_timestep;
  j["bc_hidden"] = c.bc_hidden;
  return j;
}

AdamW::AdamW(double lr, double weight_decay, double clip_norm, int64_t warmup_iters)
    : lr_(lr), wd_(weight_decay), clip_(clip_norm), warmup_(warmup_iters) {}

double AdamW::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                   const std::vector<uint8_t>& decay) {
  if (params.size() != grads.size() || params.size() != decay.size()) {
    throw std::logic_error("optimizer: params/grads/decay size mismatch");
  }
  if (m_.empty()) {
    for (const Tensor& g : grads) {
      m_.push_back(Tensor::zeros_like(g));
      v_.push_back(Tensor::zeros_like(g));
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("optimizer: parameter set changed");

  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double x : g.v) sq += x * x;
  }
  if (!std::isfinite(sq)) throw std::runtime_error("optimizer: non-finite gradient");
  const double norm = std::sqrt(sq);
  const double scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;

  ++t_;
  double lr = lr_;
  if (warmup_ > 0) lr *= std::min(1.0, static_cast<double>(t_) / static_cast<double>(warmup_));
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));

  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (!same_shape(p, g) || !same_shape(p, m_[i])) {
      throw std::logic_error("optimizer: gradient shape mismatch");
    }
    for (size_t k = 0; k < p.v.size(); ++k) {
      const double gk = g.v[k] * scale;
      m_[i].v[k] = kBeta1 * m_[i].v[k] + (1.0 - kBeta1) * gk;
      v_[i].v[k] = kBeta2 * v_[i].v[k] + (1.0 - kBeta2) * gk * gk;
      p.v[k] -= lr * ((m_[i].v[k] / bc1) / (std::sqrt(v_[i].v[k] / bc2) + kEps));
      if (decay[i]) p.v[k] -= lr * wd_ * p.v[k];
    }
  }
  return norm;
}

nlohmann::ordered_json AdamW::to_json() const {
  nlohmann::ordered_json j;
  j["lr"] = lr_;
  j["weight_decay"] = wd_;
  j["clip_norm"] = clip_;
  j["warmup_iters"] = warmup_;
  j["t"] = t_;
  auto dump = [](const std::vector<Tensor>& ts) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const Tensor& t : ts) {
      nlohmann::ordered_json e;
      e["shape"] = t.shape;
      e["data"] = t.v;
      arr.push_back(std::move(e));
    }
    return arr;
  };
  j["m"] = dump(m_);
  j["v"] = dump(v_);
  return j;
}

AdamW AdamW::from_json(const nlohmann::ordered_json& j) {
  AdamW o;
  try {
    o.lr_ = j.at("lr").get<double>();
    o.wd_ = j.at("weight_decay").get<double>();
    o.clip_ = j.at("clip_norm").get<double>();
    o.warmup_ = j.at("warmup_iters").get<int64_t>();
    o.t_ = j.at("t").get<int64_t>();
    auto load = [](const nlohmann::ordered_json& arr) {
      std::vector<Tensor> ts;
      for (const auto& e : arr) {
        Tensor t(e.at("shape").get<std::vector<int64_t>>());
        t.v = e.at("data").get<std::vector<double>>();
        if (static_cast<int64_t>(t.v.size()) != Tensor::count(t.shape)) {
          throw std::runtime_error("checkpoint: optimizer tensor has wrong element count");
        }
        ts.push_back(std::move(t));
      }
      return ts;
    };
    o.m_ = load(j.at("m"));
    o.v_ = load(j.at("v"));
  } catch (const nlohmann::ordered_json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed optimizer state: ") + e.what());
  }
  return o;
}

namespace {

void collect_low(Policy& p, std::vector<Tensor*>& ptrs, std::vector<uint8_t>& decay) {
  if (p.kind == PolicyKind::kBc) {
    p.bc->visit([&](const std::string&, Tensor& t, bool d) {
      ptrs.push_back(&t);
      decay.push_back(d ? 1 : 0);
    });
  } else {
    p.low->params.visit([&](const std::string&, Tensor& t, bool d) {
      ptrs.push_back(&t);
      decay.push_back(d ? 1 : 0);
    });
  }
}

}  // namespace

double train_step_low(Policy& policy, const SubTrajectoryBatch& batch, AdamW& opt,
                      Prng* dropout_rng) {
  Graph g;
  std::vector<Graph::Id> ids;
  const Graph::Id loss = build_loss_low(g, policy, batch, dropout_rng, &ids);
  const double value = g.val(loss).v[0];
  g.backward(loss);
  std::vector<Tensor> grads;
  grads.reserve(ids.size());
  for (const Graph::Id id : ids) grads.push_back(g.grad(id));
  std::vector<Tensor*> ptrs;
  std::vector<uint8_t> decay;
  collect_low(policy, ptrs, decay);
  opt.step(ptrs, grads, decay);
  return value;
}

double train_step_high(Policy& policy, const SubTrajectoryBatch& batch, AdamW& opt,
                       Prng* dropout_rng) {
  Graph g;
  std::vector<Graph::Id> ids;
  const Graph::Id loss = build_loss_high(g, policy, batch, dropout_rng, &ids);
  const double value = g.val(loss).v[0];
  g.backward(loss);
  std::vector<Tensor> grads;
  grads.reserve(ids.size());
  for (const Graph::Id id : ids) grads.push_back(g.grad(id));
  std::vector<Tensor*> ptrs;
  std::vector<uint8_t> decay;
  policy.high->params.visit([&](const std::string&, Tensor& t, bool d) {
    ptrs.push_back(&t);
    decay.push_back(d ? 1 : 0);
  });
  opt.step(ptrs, grads, decay);
  return value;
}

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

bool plans_subgoals(PolicyKind kind) {
  return kind == PolicyKind::kHdt || kind == PolicyKind::kHdtPlusRtg;
}

// shared by fresh runs and resumes
Dataset prepare_dataset(PolicyKind kind, const Dataset& in, const TrainConfig& config) {
  if (in.trajectories.empty()) throw std::runtime_error("train: dataset is empty");
  if (plans_subgoals(kind) && !in.labeled()) {
    throw std::runtime_error("train: dataset has no sub-goal labels; run the label step first");
  }
  int64_t max_t = 0;
  for (const Trajectory& t : in.trajectories) {
    if (!t.timesteps.empty()) max_t = std::max(max_t, t.timesteps.back());
  }
  if (max_t >= config.max_timestep) {
    throw std::runtime_error("train: dataset timesteps reach " + std::to_string(max_t) +
                             " but max_timestep is " + std::to_string(config.max_timestep));
  }
  Dataset d = in;
  if (!d.labeled()) {
    // the sampled sub-goal channel must exist; these kinds never read it
    d = augment_dataset(std::move(d), SubgoalMethod::parse("final-state"));
  }
  return d;
}

void fill_context(Policy& p, const Dataset& d, const TrainConfig& config) {
  p.ctx.state_mean = d.state_mean;
  p.ctx.state_std = d.state_std;
  p.ctx.max_return = d.max_return();
  double ret = 0.0, len = 0.0;
  for (const Trajectory& t : d.trajectories) {
    ret += t.total_return();
    len += static_cast<double>(t.horizon());
  }
  const double n = static_cast<double>(d.trajectories.size());
  p.ctx.data_mean_return = ret / n;
  p.ctx.data_mean_length = len / n;
  p.ctx.env = d.meta.env;
  p.ctx.env_seed = d.meta.env_seed;
  p.ctx.quality = d.meta.quality;
  p.ctx.method = config.method;
}

TrainOutcome run_loop(Checkpoint ck, const Dataset& data, int64_t target) {
  const TrainConfig cfg = ck.config;
  TrainOutcome out;
  Checkpoint last_good = ck;
  TrainReport report;
  double acc_low = 0.0, acc_high = 0.0;
  int64_t acc_n = 0;
  bool failed = false;
  std::string note;

  for (int64_t it = ck.iteration + 1; it <= target; ++it) {
    try {
      Prng batch_rng(derive_seed(cfg.seed, kTagBatch, static_cast<uint64_t>(it)));
      const SubTrajectoryBatch batch = sample_batch(data, cfg.batch, cfg.context, batch_rng);
      if (ck.policy.high) {
        Prng drop(derive_seed(cfg.seed, kTagDropHigh, static_cast<uint64_t>(it)));
        acc_high += train_step_high(ck.policy, batch, ck.opt_high, &drop);
      }
      Prng drop(derive_seed(cfg.seed, kTagDropLow, static_cast<uint64_t>(it)));
      acc_low += train_step_low(ck.policy, batch, ck.opt_low, &drop);
      ++acc_n;
      ck.iteration = it;

      if (it % cfg.eval_every == 0) {
        RolloutConfig rc;
        rc.episodes = cfg.eval_episodes;
        rc.seed = derive_seed(cfg.seed, kTagTrainEval, static_cast<uint64_t>(it));
        rc.desired_source = DesiredSource::kMaxInDataset;
        const EvalResult er = evaluate(ck.policy, rc);
        EvalPoint pt;
        pt.iteration = it;
        pt.mean_return = er.mean_return();
        pt.success_rate = er.success_rate();
        pt.loss_low = acc_n > 0 ? acc_low / static_cast<double>(acc_n) : 0.0;
        pt.loss_high = (ck.policy.high && acc_n > 0) ? acc_high / static_cast<double>(acc_n) : 0.0;
        report.points.push_back(pt);
        acc_low = acc_high = 0.0;
        acc_n = 0;
        last_good = ck;
      }
    } catch (const std::exception& ex) {
      failed = true;
      note = ex.what();
      break;
    }
  }

  if (failed) {
    out.diverged = true;
    out.note = note;
    out.final = std::move(last_good);
    for (const EvalPoint& pt : report.points) {
      if (pt.iteration <= out.final.iteration) out.report.points.push_back(pt);
    }
  } else {
    out.final = std::move(ck);
    out.report = std::move(report);
  }
  return out;
}

}  // namespace

void write_train_report(const std::string& path, const TrainReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("train: cannot write '" + path + "'");
  out << "iteration,mean_return,success_rate,loss_low,loss_high\n";
  for (const EvalPoint& p : report.points) {
    out << p.iteration << ',' << fmt6(p.mean_return) << ',' << fmt6(p.success_rate) << ','
        << fmt6(p.loss_low) << ',' << fmt6(p.loss_high) << '\n';
  }
  if (!out) throw std::runtime_error("train: write to '" + path + "' failed");
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  nlohmann::ordered_json j;
  j["format"] = 1;
  j["iteration"] = c.iteration;
  j["config"] = train_config_to_json(c.config);
  j["policy"] = policy_to_json(c.policy);
  j["opt_low"] = c.opt_low.to_json();
  j["opt_high"] = c.opt_high.to_json();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read '" + path + "'");
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::ordered_json::exception& e) {
    throw std::runtime_error("checkpoint: '" + path + "' is not valid JSON: " + e.what());
  }
  try {
    if (j.at("format").get<int64_t>() != 1) {
      throw std::runtime_error("checkpoint: unsupported format version");
    }
    Checkpoint c;
    c.iteration = j.at("iteration").get<int64_t>();
    c.config = parse_train_config(j.at("config"));
    c.policy = policy_from_json(j.at("policy"));
    c.opt_low = AdamW::from_json(j.at("opt_low"));
    c.opt_high = AdamW::from_json(j.at("opt_high"));
    return c;
  } catch (const nlohmann::ordered_json::exception& e) {
    throw std::runtime_error("checkpoint: '" + path + "' is malformed: " + e.what());
  }
}

TrainOutcome train(PolicyKind kind, const Dataset& dataset, const TrainConfig& config) {
  config.validate();
  const Dataset data = prepare_dataset(kind, dataset, config);

  Checkpoint ck;
  ck.config = config;
  ck.iteration = 0;
  ck.policy = make_policy(kind, data.meta.state_dim, data.meta.action_dim, config.hyper(),
                          derive_seed(config.seed, kTagInit));
  fill_context(ck.policy, data, config);
  ck.opt_low = AdamW(config.learning_rate, config.weight_decay, config.clip_norm,
                     config.warmup_iters);
  ck.opt_high = AdamW(config.learning_rate, config.weight_decay, config.clip_norm,
                      config.warmup_iters);
  return run_loop(std::move(ck), data, config.iterations);
}

TrainOutcome resume(Checkpoint from, const Dataset& dataset, int64_t iterations) {
  if (iterations < from.iteration) {
    throw std::runtime_error("train: checkpoint is already past iteration " +
                             std::to_string(iterations));
  }
  const Dataset data = prepare_dataset(from.policy.kind, dataset, from.config);
  ensure_compatible(from.policy, data.meta.state_dim, data.meta.action_dim);
  return run_loop(std::move(from), data, iterations);
}

}  // namespace hdt
