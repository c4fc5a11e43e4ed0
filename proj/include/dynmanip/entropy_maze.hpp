#pragma once

// Grid-maze imitation toy: a deterministic expert, noisy demonstrations with
// tunable observation and action entropy, a tabular frequency-count student,
// and the divergence / entropy measurements used to compare them.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynmanip/core/parallel.hpp"
#include "dynmanip/core/random.hpp"

namespace dynmanip::maze {

enum class Action : int { Up = 0, Down = 1, Left = 2, Right = 3 };

inline constexpr int kNumActions = 4;
inline constexpr std::array<Action, kNumActions> kActions{Action::Up, Action::Down, Action::Left,
                                                          Action::Right};

inline const char* to_string(Action a) {
  switch (a) {
    case Action::Up: return "Up";
    case Action::Down: return "Down";
    case Action::Left: return "Left";
    case Action::Right: return "Right";
  }
  return "?";
}

using ActionProbs = std::array<double, kNumActions>;

struct Cell {
  int row = 0;
  int col = 0;
  auto operator<=>(const Cell&) const = default;
};

struct MazeState {
  int row = 0;
  int col = 0;
  int nuisance = 1;
  auto operator<=>(const MazeState&) const = default;
  Cell cell() const { return {row, col}; }
};

/// Square grid with the goal fixed in the bottom-right corner.
struct Grid {
  int size = 5;

  Cell goal() const { return {size - 1, size - 1}; }
  bool is_goal(Cell c) const { return c == goal(); }
  bool in_bounds(Cell c) const { return c.row >= 0 && c.col >= 0 && c.row < size && c.col < size; }
  int num_cells() const { return size * size; }
  int num_non_goal_cells() const { return size * size - 1; }

  /// Moving into a wall leaves the position unchanged.
  Cell move(Cell c, Action a) const {
    Cell next = c;
    switch (a) {
      case Action::Up: --next.row; break;
      case Action::Down: ++next.row; break;
      case Action::Left: --next.col; break;
      case Action::Right: ++next.col; break;
    }
    return in_bounds(next) ? next : c;
  }
};

/// Deterministic expert that ignores the nuisance variable.
class ExpertPolicy {
 public:
  ExpertPolicy(Grid grid, std::vector<Action> table) : grid_(grid), table_(std::move(table)) {
    if (static_cast<int>(table_.size()) != grid_.num_cells())
      throw std::invalid_argument("expert table size does not match grid");
  }

  const Grid& grid() const { return grid_; }

  /// nullopt at the goal (terminal).
  std::optional<Action> act(Cell c) const {
    if (!grid_.in_bounds(c)) throw std::out_of_range("cell outside the maze");
    if (grid_.is_goal(c)) return std::nullopt;
    return table_[static_cast<std::size_t>(c.row * grid_.size + c.col)];
  }

  /// Number of steps to the goal following the policy, or nullopt if it
  /// cycles or exits.
  std::optional<int> steps_to_goal(Cell c) const {
    for (int n = 0; n <= grid_.num_cells(); ++n) {
      if (grid_.is_goal(c)) return n;
      const Cell next = grid_.move(c, *act(c));
      if (next == c) return std::nullopt;
      c = next;
    }
    return std::nullopt;
  }

 private:
  Grid grid_;
  std::vector<Action> table_;
};

/// "Down while not on the bottom row, then Right."
inline ExpertPolicy canonical_expert(Grid grid = {}) {
  std::vector<Action> table(static_cast<std::size_t>(grid.num_cells()));
  for (int r = 0; r < grid.size; ++r)
    for (int c = 0; c < grid.size; ++c)
      table[static_cast<std::size_t>(r * grid.size + c)] = r < grid.size - 1 ? Action::Down : Action::Right;
  return ExpertPolicy(grid, std::move(table));
}

struct DemoConfig {
  int n_m_max = 1;
  double eta = 0.0;
  int num_trajectories = 10;
  std::uint64_t seed = 0;
  int max_steps = 200;

  void validate() const {
    if (n_m_max < 1) throw std::invalid_argument("n_m_max must be >= 1");
    if (!(eta >= 0.0 && eta < 1.0)) throw std::invalid_argument("eta must lie in [0, 1)");
    if (num_trajectories < 1) throw std::invalid_argument("num_trajectories must be >= 1");
    if (max_steps < 1) throw std::invalid_argument("max_steps must be > 0");
  }
};

struct Step {
  MazeState state;
  Action action;
};

using Trajectory = std::vector<Step>;

struct MazeDemoSet {
  std::vector<Trajectory> trajectories;
  DemoConfig config;

  std::size_t num_steps() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.size();
    return n;
  }
};

/// Trajectory i draws from the stream derive_seed(seed, {i}); a set of N
/// trajectories is therefore a prefix of any larger set with the same seed,
/// and the stream does not depend on eta or n_m_max.
inline Trajectory generate_trajectory(const ExpertPolicy& expert, const DemoConfig& config,
                                      std::size_t index) {
  const Grid& grid = expert.grid();
  Rng rng = make_rng(config.seed, {index});
  Cell pos;
  do {
    const int k = uniform_int(rng, 0, grid.num_cells() - 1);
    pos = {k / grid.size, k % grid.size};
  } while (grid.is_goal(pos));

  Trajectory traj;
  for (int step = 0; step < config.max_steps && !grid.is_goal(pos); ++step) {
    const int nuisance = uniform_int(rng, 1, config.n_m_max);
    // Every draw is made each step so streams stay aligned across eta values.
    const double u = uniform01(rng);
    const auto random_action = kActions[static_cast<std::size_t>(uniform_int(rng, 0, kNumActions - 1))];
    const Action a = u < config.eta ? random_action : *expert.act(pos);
    traj.push_back({{pos.row, pos.col, nuisance}, a});
    pos = grid.move(pos, a);
  }
  return traj;
}

inline MazeDemoSet generate_demos(const ExpertPolicy& expert, const DemoConfig& config) {
  config.validate();
  MazeDemoSet set;
  set.config = config;
  set.trajectories.reserve(static_cast<std::size_t>(config.num_trajectories));
  for (int i = 0; i < config.num_trajectories; ++i)
    set.trajectories.push_back(generate_trajectory(expert, config, static_cast<std::size_t>(i)));
  return set;
}

/// Tabular frequency-count student over full (row, col, nuisance)
/// observations. Unseen observations fall back to the uniform distribution.
class StudentPolicy {
 public:
  using Counts = std::array<std::uint64_t, kNumActions>;

  void observe(const MazeState& s, Action a) { ++counts_[s][static_cast<std::size_t>(a)]; }

  const Counts* counts(const MazeState& s) const {
    auto it = counts_.find(s);
    return it == counts_.end() ? nullptr : &it->second;
  }

  std::size_t num_states() const { return counts_.size(); }
  const std::map<MazeState, Counts>& table() const { return counts_; }

  ActionProbs probabilities(const MazeState& s) const { return smoothed(s, 0.0); }

  /// Adds `pseudocount` to every action before normalizing; unseen states
  /// are exactly uniform for any pseudocount.
  ActionProbs smoothed(const MazeState& s, double pseudocount) const {
    ActionProbs p;
    p.fill(1.0 / kNumActions);
    const Counts* c = counts(s);
    if (!c) return p;
    double total = 0.0;
    for (auto n : *c) total += static_cast<double>(n);
    const double denom = total + kNumActions * pseudocount;
    for (std::size_t a = 0; a < kNumActions; ++a)
      p[a] = (static_cast<double>((*c)[a]) + pseudocount) / denom;
    return p;
  }

  /// Counts summed over the nuisance variable.
  Counts marginal_counts(Cell cell) const {
    Counts sum{};
    auto it = counts_.lower_bound({cell.row, cell.col, 0});
    for (; it != counts_.end() && it->first.row == cell.row && it->first.col == cell.col; ++it)
      for (std::size_t a = 0; a < kNumActions; ++a) sum[a] += it->second[a];
    return sum;
  }

 private:
  std::map<MazeState, Counts> counts_;
};

inline StudentPolicy fit_student(const MazeDemoSet& demos) {
  if (demos.num_steps() == 0) throw std::invalid_argument("demonstration set is empty");
  StudentPolicy student;
  for (const auto& traj : demos.trajectories)
    for (const auto& step : traj) student.observe(step.state, step.action);
  return student;
}

/// Action distribution that produced the demonstrations at a given state:
/// eta/4 on every action plus (1 - eta) on the expert's choice.
inline ActionProbs generating_distribution(const ExpertPolicy& expert, double eta, const MazeState& state) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in [0, 1]");
  ActionProbs p;
  p.fill(eta / kNumActions);
  if (auto a = expert.act(state.cell())) p[static_cast<std::size_t>(*a)] += 1.0 - eta;
  return p;
}

/// KL(p || q) in nats; terms with p = 0 contribute nothing.
inline double kl_divergence(const ActionProbs& p, const ActionProbs& q) {
  double kl = 0.0;
  for (std::size_t a = 0; a < kNumActions; ++a)
    if (p[a] > 0.0) kl += p[a] * std::log(p[a] / q[a]);
  return kl;
}

/// Which distribution the student is compared against.
enum class KlTarget {
  ExpertPointMass,         // the deterministic expert's own action distribution
  GeneratingDistribution,  // the eta-mixed distribution the demos were drawn from
};

inline constexpr double kDefaultSmoothing = 1e-3;

/// Mean over every non-goal (row, col, nuisance) observation of
/// KL(target || smoothed student), uniformly weighted.
inline double kl_to_student(const ExpertPolicy& expert, double eta, const StudentPolicy& student,
                            double smoothing = kDefaultSmoothing, int n_m_max = 1,
                            KlTarget target = KlTarget::ExpertPointMass) {
  if (!(smoothing > 0.0)) throw std::invalid_argument("smoothing must be > 0");
  if (n_m_max < 1) throw std::invalid_argument("n_m_max must be >= 1");
  const Grid& grid = expert.grid();
  const double target_eta = target == KlTarget::ExpertPointMass ? 0.0 : eta;
  double sum = 0.0;
  long count = 0;
  for (int r = 0; r < grid.size; ++r) {
    for (int c = 0; c < grid.size; ++c) {
      if (grid.is_goal({r, c})) continue;
      for (int n = 1; n <= n_m_max; ++n) {
        const MazeState s{r, c, n};
        sum += kl_divergence(generating_distribution(expert, target_eta, s), student.smoothed(s, smoothing));
        ++count;
      }
    }
  }
  return sum / static_cast<double>(count);
}

/// Argmax over counts; ties go to the first action in kActions order.
inline Action argmax_action(const StudentPolicy::Counts& counts) {
  std::size_t best = 0;
  for (std::size_t a = 1; a < kNumActions; ++a)
    if (counts[a] > counts[best]) best = a;
  return kActions[best];
}

/// Fraction of non-goal cells where the student's nuisance-marginalized
/// argmax equals the expert action.
inline double argmax_match_fraction(const ExpertPolicy& expert, const StudentPolicy& student) {
  const Grid& grid = expert.grid();
  int matches = 0;
  for (int r = 0; r < grid.size; ++r)
    for (int c = 0; c < grid.size; ++c) {
      if (grid.is_goal({r, c})) continue;
      if (argmax_action(student.marginal_counts({r, c})) == *expert.act({r, c})) ++matches;
    }
  return static_cast<double>(matches) / grid.num_non_goal_cells();
}

/// Entropy (nats) of a uniform distribution over (non-goal cell, nuisance).
inline double observation_entropy(int n_m_max, Grid grid = {}) {
  if (n_m_max < 1) throw std::invalid_argument("n_m_max must be >= 1");
  return std::log(static_cast<double>(grid.num_non_goal_cells()) * n_m_max);
}

/// Entropy (nats) of the eta-mixed action distribution; identical at every
/// non-goal state.
inline double action_entropy_given_obs(double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in [0, 1]");
  auto h = [](double p) { return p > 0.0 ? -p * std::log(p) : 0.0; };
  if (eta == 1.0) return std::log(4.0);
  return h(1.0 - 0.75 * eta) + 3.0 * h(eta / 4.0);
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepGrid {
  std::vector<int> n_m_max{1};
  std::vector<double> eta{0.0};
  std::vector<int> demo_counts{10, 20, 30, 40, 50};
  int seeds = 5;
  std::uint64_t base_seed = 0;
  int max_steps = 200;
  double smoothing = kDefaultSmoothing;
  KlTarget kl_target = KlTarget::ExpertPointMass;
};

struct SweepRow {
  int n_m_max = 0;
  double eta = 0.0;
  int demo_count = 0;
  int seed = 0;
  double kl_nats = 0.0;
  double match_fraction = 0.0;
};

struct SweepAggregate {
  int n_m_max = 0;
  double eta = 0.0;
  int demo_count = 0;
  double kl_mean = 0.0;
  double kl_std = 0.0;
  double match_mean = 0.0;
  double match_std = 0.0;
};

struct SweepCellError {
  int n_m_max = 0;
  double eta = 0.0;
  int demo_count = 0;
  std::string message;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SweepAggregate> aggregates;
  std::vector<SweepCellError> errors;

  const SweepAggregate* find(int n_m_max, double eta, int demo_count) const {
    for (const auto& a : aggregates)
      if (a.n_m_max == n_m_max && a.eta == eta && a.demo_count == demo_count) return &a;
    return nullptr;
  }
};

/// Mean and (n-1)-normalized standard deviation.
inline std::pair<double, double> mean_and_sample_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

/// The demo stream for seed index k is derive_seed(base_seed, {k}); it is
/// shared by every (n_m_max, eta, demo_count) cell.
inline std::uint64_t sweep_stream_seed(std::uint64_t base_seed, int seed_index) {
  return derive_seed(base_seed, {static_cast<std::uint64_t>(seed_index)});
}

inline SweepResult run_entropy_sweep(const SweepGrid& grid, const ExpertPolicy& expert = canonical_expert(),
                                     unsigned jobs = 1) {
  struct Cell {
    int n_m_max;
    double eta;
    int demo_count;
  };
  std::vector<Cell> cells;
  for (int nm : grid.n_m_max)
    for (double eta : grid.eta)
      for (int d : grid.demo_counts) cells.push_back({nm, eta, d});

  struct CellOutcome {
    std::vector<SweepRow> rows;
    std::optional<std::string> error;
  };

  auto outcomes = parallel_map(cells.size(), jobs, [&](std::size_t i) {
    const Cell& cell = cells[i];
    CellOutcome out;
    try {
      if (grid.seeds < 1) throw std::invalid_argument("seeds must be >= 1");
      for (int k = 0; k < grid.seeds; ++k) {
        DemoConfig cfg{cell.n_m_max, cell.eta, cell.demo_count, sweep_stream_seed(grid.base_seed, k),
                       grid.max_steps};
        const auto demos = generate_demos(expert, cfg);
        const auto student = fit_student(demos);
        out.rows.push_back({cell.n_m_max, cell.eta, cell.demo_count, k,
                            kl_to_student(expert, cell.eta, student, grid.smoothing, cell.n_m_max, grid.kl_target),
                            argmax_match_fraction(expert, student)});
      }
    } catch (const std::exception& e) {
      out.rows.clear();
      out.error = e.what();
    }
    return out;
  });

  SweepResult result;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& cell = cells[i];
    if (outcomes[i].error) {
      result.errors.push_back({cell.n_m_max, cell.eta, cell.demo_count, *outcomes[i].error});
      continue;
    }
    std::vector<double> kls, matches;
    for (const auto& r : outcomes[i].rows) {
      result.rows.push_back(r);
      kls.push_back(r.kl_nats);
      matches.push_back(r.match_fraction);
    }
    const auto [klm, kls_] = mean_and_sample_std(kls);
    const auto [mm, ms] = mean_and_sample_std(matches);
    result.aggregates.push_back({cell.n_m_max, cell.eta, cell.demo_count, klm, kls_, mm, ms});
  }
  return result;
}

}  // namespace dynmanip::maze
