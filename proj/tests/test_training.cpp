#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hdt/envs.hpp"
#include "hdt/rollout.hpp"
#include "hdt/subgoal.hpp"
#include "hdt/training.hpp"

using namespace hdt;

namespace {

Tensor scalar_tensor(double v) {
  Tensor t({1});
  t.v[0] = v;
  return t;
}

// transparent one-parameter re-implementation used as the optimizer oracle
struct RefAdam {
  double lr, wd, clip;
  int64_t warmup, t = 0;
  std::vector<double> m, v;

  void step(std::vector<double>& p, std::vector<double> g, const std::vector<bool>& decay) {
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    double sq = 0.0;
    for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    if (clip > 0.0 && norm > clip) {
      for (double& x : g) x *= clip / norm;
    }
    ++t;
    double lrt = lr;
    if (warmup > 0) lrt *= std::min(1.0, static_cast<double>(t) / static_cast<double>(warmup));
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t));
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      p[i] -= lrt * ((m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8));
      if (decay[i]) p[i] -= lrt * wd * p[i];
    }
  }
};

Dataset chain_data(const std::string& quality, int64_t episodes, uint64_t seed) {
  auto env = make_env("chain-dense");
  return generate_dataset(*env, quality, episodes, seed);
}

TrainConfig small_config(PolicyKind kind) {
  TrainConfig c;
  c.iterations = 30;
  c.batch = 8;
  c.context = 4;
  c.learning_rate = 1e-3;
  c.eval_every = 10;
  c.eval_episodes = 2;
  c.seed = 7;
  c.warmup_iters = 5;
  c.embed_dim = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.dropout = kind == PolicyKind::kBc ? 0.0 : 0.05;
  c.max_timestep = 64;
  c.bc_hidden = 16;
  return c;
}

std::vector<Tensor> all_params(Policy& p) {
  std::vector<Tensor> out;
  p.visit_params([&](const std::string&, Tensor& t, bool) { out.push_back(t); });
  return out;
}

bool same_params(Policy& a, Policy& b) {
  const auto pa = all_params(a), pb = all_params(b);
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].shape != pb[i].shape || pa[i].v != pb[i].v) return false;
  }
  return true;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("optimizer hand cases") {
  SUBCASE("unit gradient at learning rate 0.1 moves 1.0 to about 0.9") {
    AdamW opt(0.1, 0.0, 0.0, 0);
    Tensor p = scalar_tensor(1.0);
    std::vector<Tensor*> ps = {&p};
    const double norm = opt.step(ps, {scalar_tensor(1.0)}, {1});
    CHECK(norm == 1.0);
    CHECK(p.v[0] == doctest::Approx(0.9).epsilon(1e-7));
  }

  SUBCASE("reported norm is pre-clip; clipping caps the applied gradient") {
    AdamW opt(0.1, 0.0, 0.25, 0);
    Tensor a = scalar_tensor(0.0), b = scalar_tensor(0.0);
    std::vector<Tensor*> ps = {&a, &b};
    // gradient (6, 8) has norm 10, so it is scaled by 0.025
    const double norm = opt.step(ps, {scalar_tensor(6.0), scalar_tensor(8.0)}, {1, 1});
    CHECK(norm == 10.0);
    // first Adam step is sign-like regardless of magnitude
    CHECK(a.v[0] == doctest::Approx(-0.1).epsilon(1e-6));
  }

  SUBCASE("warmup scales the first steps linearly") {
    AdamW opt(0.1, 0.0, 0.0, 10);
    Tensor p = scalar_tensor(1.0);
    std::vector<Tensor*> ps = {&p};
    opt.step(ps, {scalar_tensor(1.0)}, {1});
    CHECK(p.v[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  }

  SUBCASE("decoupled decay only touches flagged tensors") {
    AdamW opt(0.1, 0.5, 0.0, 0);
    Tensor w = scalar_tensor(1.0), b = scalar_tensor(1.0);
    std::vector<Tensor*> ps = {&w, &b};
    opt.step(ps, {scalar_tensor(0.0), scalar_tensor(0.0)}, {1, 0});
    CHECK(w.v[0] == doctest::Approx(0.95));  // 1 - lr * wd
    CHECK(b.v[0] == 1.0);
  }

  SUBCASE("non-finite gradients are rejected") {
    AdamW opt(0.1, 0.0, 0.0, 0);
    Tensor p = scalar_tensor(1.0);
    std::vector<Tensor*> ps = {&p};
    CHECK_THROWS_WITH_AS(opt.step(ps, {scalar_tensor(std::nan(""))}, {1}),
                         doctest::Contains("non-finite"), std::runtime_error);
  }
}

TEST_CASE("optimizer matches a reference re-implementation over random runs") {
  Prng rng(99);
  for (int trial = 0; trial < 4; ++trial) {
    const double lr = 0.05 + 0.1 * rng.uniform01();
    const double wd = trial % 2 ? 0.1 : 0.0;
    const double clip = trial >= 2 ? 0.5 : 0.0;
    const int64_t warmup = trial == 3 ? 7 : 0;

    AdamW opt(lr, wd, clip, warmup);
    RefAdam ref{lr, wd, clip, warmup};

    Tensor w({2, 2});
    Tensor b({3});
    for (auto& x : w.v) x = rng.normal();
    for (auto& x : b.v) x = rng.normal();
    std::vector<double> flat;
    for (double x : w.v) flat.push_back(x);
    for (double x : b.v) flat.push_back(x);

    for (int step = 0; step < 20; ++step) {
      Tensor gw({2, 2});
      Tensor gb({3});
      std::vector<double> gflat;
      for (auto& x : gw.v) {
        x = rng.normal();
        gflat.push_back(x);
      }
      for (auto& x : gb.v) {
        x = rng.normal();
        gflat.push_back(x);
      }
      std::vector<Tensor*> ps = {&w, &b};
      opt.step(ps, {gw, gb}, {1, 0});
      ref.step(flat, gflat, {true, true, true, true, false, false, false});
    }

    for (size_t i = 0; i < 4; ++i) CHECK(w.v[i] == doctest::Approx(flat[i]).epsilon(1e-12));
    for (size_t i = 0; i < 3; ++i) CHECK(b.v[i] == doctest::Approx(flat[4 + i]).epsilon(1e-12));
  }
}

TEST_CASE("config parsing: defaults, rejection, round-trip") {
  const TrainConfig d = parse_train_config(nlohmann::ordered_json::object());
  CHECK(d.learning_rate == 1e-4);
  CHECK(d.iterations == 10000);
  CHECK(d.clip_norm == 0.25);
  CHECK(d.method == "weighted-avg");

  CHECK_THROWS_WITH_AS(parse_train_config({{"lr", 0.01}}), doctest::Contains("'lr'"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_train_config({{"batch", 0}}), doctest::Contains("batch"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_train_config({{"learning_rate", "fast"}}), doctest::Contains("bad value"),
                       std::runtime_error);
  CHECK_THROWS_AS(parse_train_config({{"method", "sometimes"}}), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_train_config(nlohmann::ordered_json::array()),
                       doctest::Contains("object"), std::runtime_error);

  TrainConfig c = small_config(PolicyKind::kHdt);
  c.method = "fixed-horizon:5";
  const TrainConfig back = parse_train_config(train_config_to_json(c));
  CHECK(back.iterations == c.iterations);
  CHECK(back.batch == c.batch);
  CHECK(back.context == c.context);
  CHECK(back.learning_rate == c.learning_rate);
  CHECK(back.eval_every == c.eval_every);
  CHECK(back.eval_episodes == c.eval_episodes);
  CHECK(back.seed == c.seed);
  CHECK(back.clip_norm == c.clip_norm);
  CHECK(back.warmup_iters == c.warmup_iters);
  CHECK(back.weight_decay == c.weight_decay);
  CHECK(back.method == c.method);
  CHECK(back.embed_dim == c.embed_dim);
  CHECK(back.dropout == c.dropout);
}

TEST_CASE("cloning training fits expert chain data") {
  const Dataset data = chain_data("expert", 6, 11);
  TrainConfig cfg = small_config(PolicyKind::kBc);
  cfg.iterations = 250;
  cfg.eval_every = 50;
  cfg.learning_rate = 3e-3;
  const TrainOutcome out = train(PolicyKind::kBc, data, cfg);

  CHECK_FALSE(out.diverged);
  CHECK(out.final.iteration == 250);
  REQUIRE(out.report.points.size() == 5);
  const double first = out.report.points.front().loss_low;
  const double last = out.report.points.back().loss_low;
  CHECK(last < 0.5 * first);
  // expert data is all "step right": the cloner should master the chain
  CHECK(out.report.points.back().mean_return == 50.0);
  CHECK(out.report.points.back().success_rate == 1.0);
  for (const EvalPoint& p : out.report.points) CHECK(p.loss_high == 0.0);
}

TEST_CASE("hierarchical training runs both nets and lowers both losses") {
  const Dataset data = augment_dataset(chain_data("expert", 6, 13), SubgoalMethod::parse("weighted-avg"));
  TrainConfig cfg = small_config(PolicyKind::kHdt);
  cfg.iterations = 120;
  cfg.eval_every = 40;
  cfg.learning_rate = 3e-3;
  cfg.dropout = 0.0;
  const TrainOutcome out = train(PolicyKind::kHdt, data, cfg);

  CHECK_FALSE(out.diverged);
  REQUIRE(out.report.points.size() == 3);
  CHECK(out.report.points.back().loss_low < out.report.points.front().loss_low);
  CHECK(out.report.points.back().loss_high < out.report.points.front().loss_high);
  CHECK(out.report.points.back().loss_high > 0.0);
  CHECK(out.final.policy.ctx.max_return == 50.0);
  CHECK(out.final.policy.ctx.env == "chain-dense");
}

TEST_CASE("training is reproducible run to run") {
  const Dataset data = chain_data("medium", 6, 17);
  TrainConfig cfg = small_config(PolicyKind::kDt);
  cfg.iterations = 20;
  cfg.eval_every = 10;
  const TrainOutcome a = train(PolicyKind::kDt, data, cfg);
  const TrainOutcome b = train(PolicyKind::kDt, data, cfg);

  REQUIRE(a.report.points.size() == b.report.points.size());
  for (size_t i = 0; i < a.report.points.size(); ++i) {
    CHECK(a.report.points[i].mean_return == b.report.points[i].mean_return);
    CHECK(a.report.points[i].success_rate == b.report.points[i].success_rate);
    CHECK(a.report.points[i].loss_low == b.report.points[i].loss_low);
    CHECK(a.report.points[i].loss_high == b.report.points[i].loss_high);
  }
  Policy pa = a.final.policy, pb = b.final.policy;
  CHECK(same_params(pa, pb));

  // a different seed gives a different model
  TrainConfig other = cfg;
  other.seed = 8;
  const TrainOutcome c = train(PolicyKind::kDt, data, other);
  Policy pc = c.final.policy;
  CHECK_FALSE(same_params(pa, pc));
}

TEST_CASE("updating the two nets sequentially equals a simultaneous update") {
  const Dataset data = augment_dataset(chain_data("expert", 4, 19), SubgoalMethod::parse("weighted-avg"));
  TrainConfig cfg = small_config(PolicyKind::kHdt);
  cfg.dropout = 0.0;

  Policy a = make_policy(PolicyKind::kHdt, data.meta.state_dim, data.meta.action_dim, cfg.hyper(), 5);
  Policy b = a;
  Prng rng(23);
  const SubTrajectoryBatch batch = sample_batch(data, cfg.batch, cfg.context, rng);

  // sequential: high first, then low, in place
  AdamW ah(cfg.learning_rate, cfg.weight_decay, cfg.clip_norm, 0);
  AdamW al(cfg.learning_rate, cfg.weight_decay, cfg.clip_norm, 0);
  const double lh = train_step_high(a, batch, ah, nullptr);
  const double ll = train_step_low(a, batch, al, nullptr);

  // simultaneous: both gradients from the same starting point, then applied
  Graph gh;
  std::vector<Graph::Id> idsH;
  const Graph::Id lossH = build_loss_high(gh, b, batch, nullptr, &idsH);
  gh.backward(lossH);
  std::vector<Tensor> gradsH;
  for (const Graph::Id id : idsH) gradsH.push_back(gh.grad(id));

  Graph gl;
  std::vector<Graph::Id> idsL;
  const Graph::Id lossL = build_loss_low(gl, b, batch, nullptr, &idsL);
  gl.backward(lossL);
  std::vector<Tensor> gradsL;
  for (const Graph::Id id : idsL) gradsL.push_back(gl.grad(id));

  CHECK(gh.val(lossH).v[0] == lh);
  CHECK(gl.val(lossL).v[0] == ll);

  std::vector<Tensor*> ptrsH;
  std::vector<uint8_t> decayH;
  b.high->params.visit([&](const std::string&, Tensor& t, bool d) {
    ptrsH.push_back(&t);
    decayH.push_back(d ? 1 : 0);
  });
  std::vector<Tensor*> ptrsL;
  std::vector<uint8_t> decayL;
  b.low->params.visit([&](const std::string&, Tensor& t, bool d) {
    ptrsL.push_back(&t);
    decayL.push_back(d ? 1 : 0);
  });
  AdamW bh(cfg.learning_rate, cfg.weight_decay, cfg.clip_norm, 0);
  AdamW bl(cfg.learning_rate, cfg.weight_decay, cfg.clip_norm, 0);
  bl.step(ptrsL, gradsL, decayL);  // opposite order on purpose
  bh.step(ptrsH, gradsH, decayH);

  CHECK(same_params(a, b));
}

TEST_CASE("a resumed run is bit-identical to an uninterrupted one") {
  const Dataset data = augment_dataset(chain_data("medium", 6, 29), SubgoalMethod::parse("weighted-avg"));
  TrainConfig cfg = small_config(PolicyKind::kHdt);
  cfg.iterations = 30;
  cfg.eval_every = 10;
  cfg.dropout = 0.05;  // dropout streams must survive the round-trip too

  const TrainOutcome full = train(PolicyKind::kHdt, data, cfg);
  REQUIRE(full.report.points.size() == 3);

  TrainConfig half = cfg;
  half.iterations = 10;
  const TrainOutcome part = train(PolicyKind::kHdt, data, half);
  CHECK(part.final.iteration == 10);

  const std::string path = "/tmp/hdt_test_ckpt.json";
  save_checkpoint(path, part.final);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.iteration == 10);
  CHECK(loaded.config.seed == cfg.seed);

  const TrainOutcome rest = resume(std::move(loaded), data, 30);
  CHECK_FALSE(rest.diverged);
  CHECK(rest.final.iteration == 30);

  Policy pf = full.final.policy, pr = rest.final.policy;
  CHECK(same_params(pf, pr));

  // the resumed segment reproduces the tail of the uninterrupted report
  REQUIRE(rest.report.points.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    const EvalPoint& want = full.report.points[i + 1];
    const EvalPoint& got = rest.report.points[i];
    CHECK(got.iteration == want.iteration);
    CHECK(got.mean_return == want.mean_return);
    CHECK(got.success_rate == want.success_rate);
    CHECK(got.loss_low == want.loss_low);
    CHECK(got.loss_high == want.loss_high);
  }
}

TEST_CASE("zero iterations produce an initial checkpoint and an empty report") {
  const Dataset data = chain_data("expert", 4, 31);
  TrainConfig cfg = small_config(PolicyKind::kDt);
  cfg.iterations = 0;
  const TrainOutcome out = train(PolicyKind::kDt, data, cfg);
  CHECK_FALSE(out.diverged);
  CHECK(out.final.iteration == 0);
  CHECK(out.report.points.empty());

  Policy fresh = make_policy(PolicyKind::kDt, data.meta.state_dim, data.meta.action_dim,
                             cfg.hyper(), derive_seed(cfg.seed, 'I'));
  Policy got = out.final.policy;
  CHECK(same_params(got, fresh));

  const std::string path = "/tmp/hdt_test_report.csv";
  write_train_report(path, out.report);
  CHECK(slurp(path) == "iteration,mean_return,success_rate,loss_low,loss_high\n");
}

TEST_CASE("divergence rolls back to the last good checkpoint") {
  // action targets so large the squared loss overflows: training must abort
  // on the non-finite loss and hand back the last good state
  Trajectory t;
  for (int i = 0; i < 4; ++i) {
    t.states.push_back({static_cast<double>(i), 1.0, 0.0});
    t.actions.push_back({1e200, 0.0});
    t.rewards.push_back(i < 3 ? 1.0 : 0.0);
    t.timesteps.push_back(i);
  }
  DatasetMeta meta;
  meta.env = "chain-dense";
  meta.state_dim = 3;
  meta.action_dim = 2;
  const Dataset data = make_dataset({t, t}, meta);

  TrainConfig cfg = small_config(PolicyKind::kBc);
  cfg.iterations = 50;
  cfg.eval_every = 10;
  cfg.max_timestep = 8;
  const TrainOutcome out = train(PolicyKind::kBc, data, cfg);

  CHECK(out.diverged);
  CHECK_FALSE(out.note.empty());
  CHECK(out.final.iteration == 0);
  CHECK(out.report.points.empty());

  // every parameter of the rescued policy is finite
  Policy rescued = out.final.policy;
  rescued.visit_params([](const std::string&, Tensor& t2, bool) {
    for (double v : t2.v) REQUIRE(std::isfinite(v));
  });
}

TEST_CASE("sub-goal planners demand labels; plain kinds fill the channel themselves") {
  const Dataset raw = chain_data("expert", 4, 41);
  CHECK_FALSE(raw.labeled());
  TrainConfig cfg = small_config(PolicyKind::kHdt);
  cfg.iterations = 2;
  cfg.eval_every = 10;

  CHECK_THROWS_WITH_AS(train(PolicyKind::kHdt, raw, cfg), doctest::Contains("label"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(train(PolicyKind::kHdtPlusRtg, raw, cfg), doctest::Contains("label"),
                       std::runtime_error);
  CHECK_NOTHROW(train(PolicyKind::kDt, raw, cfg));
  CHECK_NOTHROW(train(PolicyKind::kDtNoRtg, raw, cfg));
  CHECK_NOTHROW(train(PolicyKind::kBc, raw, cfg));

  const Dataset labeled = augment_dataset(raw, SubgoalMethod::parse("weighted-avg"));
  CHECK_NOTHROW(train(PolicyKind::kHdt, labeled, cfg));
}

TEST_CASE("training rejects what cannot work") {
  const Dataset data = chain_data("expert", 4, 43);
  TrainConfig cfg = small_config(PolicyKind::kDt);

  SUBCASE("empty dataset") {
    Dataset empty;
    CHECK_THROWS_WITH_AS(train(PolicyKind::kDt, empty, cfg), doctest::Contains("empty"),
                         std::runtime_error);
  }

  SUBCASE("timestep table too small") {
    cfg.max_timestep = 50;  // chain timesteps reach exactly 50
    CHECK_THROWS_WITH_AS(train(PolicyKind::kDt, data, cfg), doctest::Contains("max_timestep"),
                         std::runtime_error);
  }

  SUBCASE("resume cannot go backwards") {
    cfg.iterations = 4;
    cfg.eval_every = 10;
    TrainOutcome out = train(PolicyKind::kDt, data, cfg);
    CHECK_THROWS_WITH_AS(resume(std::move(out.final), data, 2), doctest::Contains("past"),
                         std::runtime_error);
  }

  SUBCASE("invalid config values") {
    cfg.batch = 0;
    CHECK_THROWS_AS(train(PolicyKind::kDt, data, cfg), std::runtime_error);
  }
}

TEST_CASE("report files are exact and rewrite byte-identically") {
  TrainReport r;
  r.points.push_back({10, 31.25, 0.4, 0.012345, 0.5});
  r.points.push_back({20, 50.0, 1.0, 0.0001, 0.0});
  const std::string path = "/tmp/hdt_test_report2.csv";
  write_train_report(path, r);
  const std::string text = slurp(path);
  CHECK(text ==
        "iteration,mean_return,success_rate,loss_low,loss_high\n"
        "10,31.250000,0.400000,0.012345,0.500000\n"
        "20,50.000000,1.000000,0.000100,0.000000\n");
  write_train_report(path, r);
  CHECK(slurp(path) == text);
}

TEST_CASE("checkpoint files reject garbage") {
  CHECK_THROWS_WITH_AS(load_checkpoint("/tmp/hdt_does_not_exist.json"),
                       doctest::Contains("cannot read"), std::runtime_error);
  const std::string path = "/tmp/hdt_test_bad_ckpt.json";
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("JSON"), std::runtime_error);
  {
    std::ofstream out(path);
    out << "{\"format\": 1}";
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("malformed"), std::runtime_error);
}

TEST_CASE("resumed checkpoints refuse a mismatched dataset") {
  const Dataset chain = chain_data("expert", 4, 47);
  TrainConfig cfg = small_config(PolicyKind::kDt);
  cfg.iterations = 2;
  cfg.eval_every = 10;
  cfg.max_timestep = 256;  // covers both envs so the width check is what fires
  TrainOutcome out = train(PolicyKind::kDt, chain, cfg);

  auto maze_env = make_env("grid-maze-sparse", 1);
  const Dataset maze = generate_dataset(*maze_env, "expert", 3, 47);
  CHECK_THROWS_WITH_AS(resume(std::move(out.final), maze, 4), doctest::Contains("state_dim"),
                       std::runtime_error);
}
