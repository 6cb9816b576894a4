#include "hdt/envs.hpp"

#include <algorithm>
#include <deque>
#include <limits>
#include <stdexcept>

namespace hdt {

namespace {

constexpr uint64_t kTagEpisode = 'E';
constexpr uint64_t kTagNoise = 'N';
constexpr uint64_t kTagStart = 'S';
constexpr uint64_t kTagCarve = 'M';

// action order for the grid environments: up, down, right, left
constexpr int64_t kDx[4] = {0, 0, 1, -1};
constexpr int64_t kDy[4] = {-1, 1, 0, 0};

std::vector<double> one_hot(int64_t i, int64_t n) {
  std::vector<double> v(static_cast<size_t>(n), 0.0);
  v[static_cast<size_t>(i)] = 1.0;
  return v;
}

// Square grid with blocked cells; positions are (x, y), index y*side + x.
struct GridBoard {
  int64_t side = 0;
  std::vector<uint8_t> open;

  int64_t index(int64_t x, int64_t y) const { return y * side + x; }
  bool open_at(int64_t x, int64_t y) const {
    return x >= 0 && x < side && y >= 0 && y < side && open[static_cast<size_t>(index(x, y))];
  }

  std::vector<int64_t> distances_from(int64_t src) const {
    std::vector<int64_t> dist(static_cast<size_t>(side * side), -1);
    std::deque<int64_t> q;
    dist[static_cast<size_t>(src)] = 0;
    q.push_back(src);
    while (!q.empty()) {
      const int64_t cur = q.front();
      q.pop_front();
      const int64_t x = cur % side, y = cur / side;
      for (int a = 0; a < 4; ++a) {
        const int64_t nx = x + kDx[a], ny = y + kDy[a];
        if (!open_at(nx, ny)) continue;
        const int64_t ni = index(nx, ny);
        if (dist[static_cast<size_t>(ni)] >= 0) continue;
        dist[static_cast<size_t>(ni)] = dist[static_cast<size_t>(cur)] + 1;
        q.push_back(ni);
      }
    }
    return dist;
  }

  // Greedy descent of the target's distance map; action ties broken in the
  // fixed up/down/right/left order, so plans are deterministic.
  std::vector<int64_t> path_actions(int64_t from, const std::vector<int64_t>& dist_to_target) const {
    std::vector<int64_t> plan;
    int64_t cur = from;
    if (dist_to_target[static_cast<size_t>(cur)] < 0) return plan;  // unreachable
    while (dist_to_target[static_cast<size_t>(cur)] > 0) {
      const int64_t x = cur % side, y = cur / side;
      const int64_t want = dist_to_target[static_cast<size_t>(cur)] - 1;
      for (int a = 0; a < 4; ++a) {
        const int64_t nx = x + kDx[a], ny = y + kDy[a];
        if (open_at(nx, ny) && dist_to_target[static_cast<size_t>(index(nx, ny))] == want) {
          plan.push_back(a);
          cur = index(nx, ny);
          break;
        }
      }
    }
    return plan;
  }
};

// one-hot x concatenated with one-hot y
std::vector<double> grid_observation(int64_t side, int64_t pos) {
  std::vector<double> v(static_cast<size_t>(2 * side), 0.0);
  v[static_cast<size_t>(pos % side)] = 1.0;
  v[static_cast<size_t>(side + pos / side)] = 1.0;
  return v;
}

class ChainEnv final : public Env {
 public:
  explicit ChainEnv(uint64_t layout_seed) {
    spec_ = {"chain-dense", 51, 2, 50, layout_seed};
  }

  std::vector<int64_t> plan_from_current() const override {
    return std::vector<int64_t>(static_cast<size_t>(50 - pos_), 1);  // all rightward
  }

 protected:
  void do_reset(uint64_t) override { pos_ = 0; }

  double apply(int64_t action) override {
    double reward = 0.0;
    if (action == 1) {  // right
      if (pos_ < 50) {
        ++pos_;
        reward = 1.0;
      }
    } else if (pos_ > 0) {
      --pos_;
    }
    success_ = pos_ == 50;
    return reward;
  }

  std::vector<double> observe() const override { return one_hot(pos_, 51); }

 private:
  int64_t pos_ = 0;
};

// 15x15 maze carved by seeded recursive backtracking over the 7x7 odd-cell
// rooms. Start cell is drawn per episode; the goal is the open cell farthest
// from it (ties to the smallest index). The goal is NOT in the observation:
// it is a function of the start, so policies must carry it through history.
class MazeEnv final : public Env {
 public:
  explicit MazeEnv(uint64_t layout_seed) {
    spec_ = {"grid-maze-sparse", 30, 4, 150, layout_seed};
    board_.side = 15;
    board_.open.assign(15 * 15, 0);
    carve(layout_seed);
    for (int64_t i = 0; i < 15 * 15; ++i)
      if (board_.open[static_cast<size_t>(i)]) open_cells_.push_back(i);
  }

  std::vector<int64_t> plan_from_current() const override {
    return board_.path_actions(pos_, dist_to_goal_);
  }

 protected:
  void do_reset(uint64_t episode_seed) override {
    Prng rng(derive_seed(episode_seed, kTagStart));
    pos_ = open_cells_[static_cast<size_t>(rng.randint(static_cast<uint64_t>(open_cells_.size())))];
    const auto from_start = board_.distances_from(pos_);
    int64_t best = -1;
    goal_ = pos_;
    for (int64_t i = 0; i < 15 * 15; ++i) {
      if (from_start[static_cast<size_t>(i)] > best) {
        best = from_start[static_cast<size_t>(i)];
        goal_ = i;
      }
    }
    dist_to_goal_ = board_.distances_from(goal_);
  }

  double apply(int64_t action) override {
    const int64_t nx = pos_ % 15 + kDx[action], ny = pos_ / 15 + kDy[action];
    if (board_.open_at(nx, ny)) pos_ = board_.index(nx, ny);  // walls keep position
    success_ = pos_ == goal_;
    return success_ ? 1.0 : 0.0;
  }

  std::vector<double> observe() const override { return grid_observation(15, pos_); }

 private:
  void carve(uint64_t layout_seed) {
    Prng rng(derive_seed(layout_seed, kTagCarve));
    std::vector<std::pair<int64_t, int64_t>> stack{{1, 1}};
    board_.open[static_cast<size_t>(board_.index(1, 1))] = 1;
    while (!stack.empty()) {
      const auto [x, y] = stack.back();
      int64_t cand[4];
      int64_t n = 0;
      for (int a = 0; a < 4; ++a) {
        const int64_t nx = x + 2 * kDx[a], ny = y + 2 * kDy[a];
        if (nx >= 1 && nx <= 13 && ny >= 1 && ny <= 13 &&
            !board_.open[static_cast<size_t>(board_.index(nx, ny))]) {
          cand[n++] = a;
        }
      }
      if (n == 0) {
        stack.pop_back();
        continue;
      }
      const int64_t a = cand[rng.randint(static_cast<uint64_t>(n))];
      board_.open[static_cast<size_t>(board_.index(x + kDx[a], y + kDy[a]))] = 1;
      board_.open[static_cast<size_t>(board_.index(x + 2 * kDx[a], y + 2 * kDy[a]))] = 1;
      stack.emplace_back(x + 2 * kDx[a], y + 2 * kDy[a]);
    }
  }

  GridBoard board_;
  std::vector<int64_t> open_cells_;
  std::vector<int64_t> dist_to_goal_;
  int64_t pos_ = 0;
  int64_t goal_ = 0;
};

// 7x7 kitchen with three fixed counter rows forming a single serpentine
// aisle. Four waypoints at the aisle's far ends must be visited in order;
// the stage counter is internal and NOT observed, so the same cell needs
// different actions depending on progress.
class KitchenEnv final : public Env {
 public:
  explicit KitchenEnv(uint64_t layout_seed) {
    spec_ = {"kitchen-lite", 14, 4, 200, layout_seed};
    board_.side = 7;
    board_.open.assign(7 * 7, 1);
    for (int64_t x = 0; x <= 5; ++x) board_.open[static_cast<size_t>(board_.index(x, 1))] = 0;
    for (int64_t x = 1; x <= 6; ++x) board_.open[static_cast<size_t>(board_.index(x, 3))] = 0;
    for (int64_t x = 0; x <= 5; ++x) board_.open[static_cast<size_t>(board_.index(x, 5))] = 0;
    // All four sit on the middle stretch of the aisle, so consecutive legs
    // re-traverse the same cells in opposite directions: position alone does
    // not determine the right move, progress does.
    waypoints_ = {board_.index(0, 4), board_.index(2, 0), board_.index(2, 4), board_.index(4, 0)};
    for (const int64_t w : waypoints_) dist_to_wp_.push_back(board_.distances_from(w));
  }

  std::vector<int64_t> plan_from_current() const override {
    if (stage_ >= 4) return {};
    return board_.path_actions(pos_, dist_to_wp_[static_cast<size_t>(stage_)]);
  }

  int64_t subtask_id() const override { return stage_; }

 protected:
  void do_reset(uint64_t) override {
    pos_ = board_.index(0, 0);
    stage_ = 0;
  }

  double apply(int64_t action) override {
    const int64_t nx = pos_ % 7 + kDx[action], ny = pos_ / 7 + kDy[action];
    if (board_.open_at(nx, ny)) pos_ = board_.index(nx, ny);
    double reward = 0.0;
    if (stage_ < 4 && pos_ == waypoints_[static_cast<size_t>(stage_)]) {
      reward = 1.0;
      ++stage_;
    }
    success_ = stage_ == 4;
    return reward;
  }

  std::vector<double> observe() const override { return grid_observation(7, pos_); }

 private:
  GridBoard board_;
  std::vector<int64_t> waypoints_;
  std::vector<std::vector<int64_t>> dist_to_wp_;
  int64_t pos_ = 0;
  int64_t stage_ = 0;
};

}  // namespace

std::vector<double> Env::reset(uint64_t episode_seed) {
  steps_ = 0;
  done_ = false;
  success_ = false;
  do_reset(episode_seed);
  return observe();
}

StepOutcome Env::step(int64_t action) {
  if (done_) throw std::runtime_error("env: step after episode end");
  if (action < 0 || action >= spec_.action_dim) throw std::out_of_range("env: action out of range");
  const double reward = apply(action);
  ++steps_;
  done_ = success_ || steps_ >= spec_.horizon;
  return {observe(), reward, done_};
}

std::unique_ptr<Env> make_env(const std::string& name, uint64_t layout_seed) {
  if (name == "chain-dense") return std::make_unique<ChainEnv>(layout_seed);
  if (name == "grid-maze-sparse") return std::make_unique<MazeEnv>(layout_seed);
  if (name == "kitchen-lite") return std::make_unique<KitchenEnv>(layout_seed);
  throw std::runtime_error("env: unknown env '" + name + "'");
}

ScriptedDemonstrator::ScriptedDemonstrator(double epsilon, uint64_t seed)
    : epsilon_(epsilon), rng_(seed) {}

void ScriptedDemonstrator::begin_episode() {
  plan_.clear();
  cursor_ = 0;
  plan_subtask_ = -1;
  fresh_ = true;
}

int64_t ScriptedDemonstrator::act(Env& env) {
  // The script is followed blindly between replans: noise can desynchronize
  // it from the actual position, which is what makes medium data wander.
  if (fresh_ || plan_subtask_ != env.subtask_id() || cursor_ >= plan_.size() ||
      cursor_ >= kScriptWindow) {
    plan_ = env.plan_from_current();
    cursor_ = 0;
    plan_subtask_ = env.subtask_id();
    fresh_ = false;
  }
  int64_t action = cursor_ < plan_.size() ? plan_[cursor_++] : 0;
  if (epsilon_ > 0.0 && rng_.uniform01() < epsilon_) {
    action = static_cast<int64_t>(rng_.randint(static_cast<uint64_t>(env.spec().action_dim)));
  }
  return action;
}

double demonstrator_epsilon(const std::string& quality) {
  if (quality == "expert") return 0.0;
  if (quality == "medium") return 0.3;
  throw std::runtime_error("demonstrator: unknown quality '" + quality + "'");
}

Dataset generate_dataset(Env& env, const std::string& quality, int64_t episodes, uint64_t seed) {
  return generate_dataset_eps(env, quality, demonstrator_epsilon(quality), episodes, seed);
}

Dataset generate_dataset_eps(Env& env, const std::string& quality, double epsilon, int64_t episodes,
                             uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("generate_dataset: episodes must be >= 1");

  std::vector<Trajectory> trajs;
  trajs.reserve(static_cast<size_t>(episodes));
  double sum_return = 0.0, sum_length = 0.0;
  double best = -std::numeric_limits<double>::infinity();

  for (int64_t e = 0; e < episodes; ++e) {
    ScriptedDemonstrator demo(epsilon, derive_seed(seed, kTagNoise, static_cast<uint64_t>(e)));
    std::vector<double> obs = env.reset(derive_seed(seed, kTagEpisode, static_cast<uint64_t>(e)));

    Trajectory t;
    while (!env.done()) {
      t.states.push_back(obs);
      t.timesteps.push_back(static_cast<int64_t>(t.states.size()) - 1);
      const int64_t a = demo.act(env);
      t.actions.push_back(one_hot(a, env.spec().action_dim));
      StepOutcome out = env.step(a);
      t.rewards.push_back(out.reward);
      obs = std::move(out.state);
    }
    // closing row: final state, the demonstrator's would-be action, no reward
    t.states.push_back(obs);
    t.timesteps.push_back(static_cast<int64_t>(t.states.size()) - 1);
    t.actions.push_back(one_hot(demo.act(env), env.spec().action_dim));
    t.rewards.push_back(0.0);

    sum_return += t.total_return();
    sum_length += static_cast<double>(t.horizon());
    best = std::max(best, t.total_return());
    trajs.push_back(std::move(t));
  }

  DatasetMeta meta;
  meta.env = env.spec().name;
  meta.state_dim = env.spec().state_dim;
  meta.action_dim = env.spec().action_dim;
  meta.seed = seed;
  meta.env_seed = env.spec().layout_seed;
  meta.has_stats = true;
  meta.quality = quality;
  meta.mean_return = sum_return / static_cast<double>(episodes);
  meta.mean_length = sum_length / static_cast<double>(episodes);
  meta.max_return = best;
  return make_dataset(std::move(trajs), std::move(meta));
}

}  // namespace hdt
