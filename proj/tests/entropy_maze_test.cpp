#include "dynmanip/entropy_maze.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace dynmanip::maze {
namespace {

TEST(CanonicalExpert, ReachesGoalFromEveryCell) {
  const auto expert = canonical_expert();
  EXPECT_EQ(expert.act({0, 0}), Action::Down);
  EXPECT_EQ(expert.act({4, 0}), Action::Right);
  EXPECT_FALSE(expert.act({4, 4}).has_value());
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) {
      auto steps = expert.steps_to_goal({r, c});
      ASSERT_TRUE(steps.has_value()) << r << "," << c;
      EXPECT_EQ(*steps, (4 - r) + (4 - c));
    }
}

TEST(Grid, WallMovesAreNoOps) {
  Grid g;
  EXPECT_EQ(g.move({0, 2}, Action::Up), (Cell{0, 2}));
  EXPECT_EQ(g.move({2, 4}, Action::Right), (Cell{2, 4}));
  EXPECT_EQ(g.move({2, 2}, Action::Left), (Cell{2, 1}));
}

TEST(GenerateDemos, NoiseFreeDemosFollowExpert) {
  const auto expert = canonical_expert();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto demos = generate_demos(expert, {3, 0.0, 40, seed, 200});
    for (const auto& traj : demos.trajectories) {
      ASSERT_FALSE(traj.empty());
      for (const auto& step : traj) {
        EXPECT_EQ(step.action, *expert.act(step.state.cell()));
        EXPECT_GE(step.state.nuisance, 1);
        EXPECT_LE(step.state.nuisance, 3);
      }
    }
  }
}

TEST(GenerateDemos, RejectsOutOfRangeEta) {
  const auto expert = canonical_expert();
  EXPECT_THROW(generate_demos(expert, {1, 1.0, 1, 0, 10}), std::invalid_argument);
  EXPECT_THROW(generate_demos(expert, {1, -0.1, 1, 0, 10}), std::invalid_argument);
  EXPECT_THROW(generate_demos(expert, {0, 0.1, 1, 0, 10}), std::invalid_argument);
  EXPECT_THROW(generate_demos(expert, {1, 0.1, 1, 0, 0}), std::invalid_argument);
}

TEST(GenerateDemos, TrajectoriesEndAtGoalOrCapAndStayInBounds) {
  const auto expert = canonical_expert();
  const Grid g;
  const auto demos = generate_demos(expert, {4, 0.9, 200, 11, 50});
  for (const auto& traj : demos.trajectories) {
    ASSERT_FALSE(traj.empty());
    ASSERT_LE(traj.size(), 50u);
    for (const auto& s : traj) EXPECT_TRUE(g.in_bounds(s.state.cell()));
    const Cell end = g.move(traj.back().state.cell(), traj.back().action);
    EXPECT_TRUE(g.is_goal(end) || traj.size() == 50u);
  }
}

TEST(GenerateDemos, ReproducibleAndNested) {
  const auto expert = canonical_expert();
  const auto a = generate_demos(expert, {5, 0.6, 30, 99, 200});
  const auto b = generate_demos(expert, {5, 0.6, 30, 99, 200});
  const auto small = generate_demos(expert, {5, 0.6, 10, 99, 200});
  ASSERT_EQ(a.trajectories.size(), b.trajectories.size());
  for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
    ASSERT_EQ(a.trajectories[i].size(), b.trajectories[i].size());
    for (std::size_t j = 0; j < a.trajectories[i].size(); ++j) {
      EXPECT_EQ(a.trajectories[i][j].state, b.trajectories[i][j].state);
      EXPECT_EQ(a.trajectories[i][j].action, b.trajectories[i][j].action);
    }
  }
  for (std::size_t i = 0; i < small.trajectories.size(); ++i)
    EXPECT_EQ(small.trajectories[i].size(), a.trajectories[i].size());
}

// Brute-force frequency count over the generated set, per cell.
TEST(GenerateDemos, EmpiricalFrequenciesMatchNoiseModel) {
  const auto expert = canonical_expert();
  const double eta = 0.9;
  const auto demos = generate_demos(expert, {10, eta, 1000, 5, 200});
  std::map<Cell, std::array<double, 4>> freq;
  for (const auto& traj : demos.trajectories)
    for (const auto& s : traj) freq[s.state.cell()][static_cast<std::size_t>(s.action)] += 1.0;
  ASSERT_EQ(freq.size(), 24u);
  double pooled_total = 0.0, pooled_expert = 0.0;
  for (const auto& [cell, counts] : freq) {
    const double total = counts[0] + counts[1] + counts[2] + counts[3];
    for (std::size_t a = 0; a < 4; ++a) {
      const double expected = eta / 4 + (1 - eta) * (kActions[a] == *expert.act(cell) ? 1.0 : 0.0);
      // Rarely visited cells (top row) get a 4-standard-error allowance.
      const double tol = std::max(0.02, 4.0 * std::sqrt(expected * (1 - expected) / total));
      EXPECT_NEAR(counts[a] / total, expected, tol) << cell.row << "," << cell.col << " a=" << a;
      pooled_total += counts[a];
      if (kActions[a] == *expert.act(cell)) pooled_expert += counts[a];
    }
  }
  EXPECT_NEAR(pooled_expert / pooled_total, eta / 4 + (1 - eta), 0.02);
}

TEST(FitStudent, FrequencyRatiosAndUniformFallback) {
  MazeDemoSet single;
  single.trajectories = {{{{0, 0, 1}, Action::Down}}};
  const auto s1 = fit_student(single);
  EXPECT_DOUBLE_EQ(s1.probabilities({0, 0, 1})[1], 1.0);
  for (double p : s1.probabilities({2, 3, 1})) EXPECT_EQ(p, 0.25);

  MazeDemoSet mix;
  mix.trajectories = {{{{1, 1, 1}, Action::Down}, {{1, 1, 1}, Action::Down}},
                      {{{1, 1, 1}, Action::Right}, {{1, 1, 1}, Action::Down}}};
  const auto p = fit_student(mix).probabilities({1, 1, 1});
  EXPECT_DOUBLE_EQ(p[static_cast<int>(Action::Down)], 0.75);
  EXPECT_DOUBLE_EQ(p[static_cast<int>(Action::Right)], 0.25);
  EXPECT_EQ(p[static_cast<int>(Action::Up)], 0.0);
  EXPECT_EQ(p[static_cast<int>(Action::Left)], 0.0);

  EXPECT_THROW(fit_student(MazeDemoSet{}), std::invalid_argument);
}

TEST(FitStudent, ProbabilitiesSumToOne) {
  const auto expert = canonical_expert();
  const auto student = fit_student(generate_demos(expert, {3, 0.5, 50, 4, 200}));
  for (const auto& [state, counts] : student.table()) {
    for (double sm : {0.0, 1e-3, 1.0}) {
      const auto p = student.smoothed(state, sm);
      EXPECT_NEAR(p[0] + p[1] + p[2] + p[3], 1.0, 1e-12);
    }
  }
}

TEST(FitStudent, NoiseFreeStudentPutsAllMassOnExpert) {
  const auto expert = canonical_expert();
  for (int nm : {1, 4}) {
    const auto student = fit_student(generate_demos(expert, {nm, 0.0, 25, 8, 200}));
    for (const auto& [state, counts] : student.table())
      EXPECT_EQ(student.probabilities(state)[static_cast<std::size_t>(*expert.act(state.cell()))], 1.0);
  }
}

TEST(GeneratingDistribution, ClosedForm) {
  const auto expert = canonical_expert();
  const auto p0 = generating_distribution(expert, 0.0, {0, 0, 1});
  EXPECT_EQ(p0[1], 1.0);
  EXPECT_EQ(p0[0] + p0[2] + p0[3], 0.0);

  const auto p3 = generating_distribution(expert, 0.3, {0, 0, 1});
  EXPECT_NEAR(p3[1], 0.775, 1e-15);
  EXPECT_NEAR(p3[0], 0.075, 1e-15);
  EXPECT_NEAR(p3[2], 0.075, 1e-15);
  EXPECT_NEAR(p3[3], 0.075, 1e-15);

  const auto p1 = generating_distribution(expert, 1.0, {2, 2, 1});
  for (double p : p1) EXPECT_EQ(p, 0.25);
}

TEST(GeneratingDistribution, SumsToOneAndNonNegative) {
  const auto expert = canonical_expert();
  for (int i = 0; i <= 1000; ++i) {
    const double eta = i / 1000.0;
    for (Cell c : {Cell{0, 0}, Cell{4, 1}, Cell{3, 4}}) {
      const auto p = generating_distribution(expert, eta, {c.row, c.col, 1});
      for (double x : p) EXPECT_GE(x, 0.0);
      EXPECT_NEAR(p[0] + p[1] + p[2] + p[3], 1.0, 1e-15);
    }
  }
}

TEST(KlToStudent, ZeroForMatchingStudentAndLn4ForUniform) {
  const auto expert = canonical_expert();
  StudentPolicy exact;
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c)
      if (auto a = expert.act({r, c})) exact.observe({r, c, 1}, *a);
  EXPECT_LT(kl_to_student(expert, 0.0, exact, 1e-12), 1e-10);
  // One count per state: q(expert) = (1 + s) / (1 + 4s).
  EXPECT_NEAR(kl_to_student(expert, 0.0, exact, 1e-3), -std::log(1.001 / 1.004), 1e-15);

  StudentPolicy untrained;
  EXPECT_NEAR(kl_to_student(expert, 0.0, untrained, 1e-3), std::log(4.0), 1e-12);
  EXPECT_NEAR(kl_to_student(expert, 0.0, untrained, 1e-3, 7), std::log(4.0), 1e-12);
  EXPECT_THROW(kl_to_student(expert, 0.0, untrained, 0.0), std::invalid_argument);
}

TEST(KlToStudent, GeneratingTargetAgainstUniformStudent) {
  const auto expert = canonical_expert();
  StudentPolicy untrained;
  const double eta = 0.6;
  // KL(p || uniform) = ln 4 - H(p).
  EXPECT_NEAR(kl_to_student(expert, eta, untrained, 1e-3, 1, KlTarget::GeneratingDistribution),
              std::log(4.0) - action_entropy_given_obs(eta), 1e-12);
}

TEST(KlToStudent, NonNegativeAndFinite) {
  const auto expert = canonical_expert();
  for (double eta : {0.0, 0.3, 0.9})
    for (auto target : {KlTarget::ExpertPointMass, KlTarget::GeneratingDistribution}) {
      const auto student = fit_student(generate_demos(expert, {2, eta, 15, 3, 200}));
      for (double sm : {1e-9, 1e-3, 1.0}) {
        const double kl = kl_to_student(expert, eta, student, sm, 2, target);
        EXPECT_GE(kl, 0.0);
        EXPECT_TRUE(std::isfinite(kl));
      }
    }
}

TEST(KlToStudent, MoreNuisanceValuesYieldLargerDivergence) {
  const auto expert = canonical_expert();
  double kl1 = 0.0, kl3 = 0.0;
  for (int k = 0; k < 5; ++k) {
    const auto seed = sweep_stream_seed(0, k);
    kl1 += kl_to_student(expert, 0.0, fit_student(generate_demos(expert, {1, 0.0, 10, seed, 200})), 1e-3, 1);
    kl3 += kl_to_student(expert, 0.0, fit_student(generate_demos(expert, {3, 0.0, 10, seed, 200})), 1e-3, 3);
  }
  EXPECT_GT(kl3, kl1);
}

TEST(ArgmaxMatch, ExactCopyAndUntrained) {
  const auto expert = canonical_expert();
  const auto student = fit_student(generate_demos(expert, {3, 0.0, 500, 2, 200}));
  EXPECT_EQ(argmax_match_fraction(expert, student), 1.0);

  // Enumerate: with no counts the tie-break picks the first action, so the
  // match fraction is the share of cells whose expert action is first-ordered.
  int coincide = 0;
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c)
      if (auto a = expert.act({r, c}); a && *a == kActions[0]) ++coincide;
  EXPECT_EQ(argmax_match_fraction(expert, StudentPolicy{}), coincide / 24.0);
}

TEST(ArgmaxMatch, LargeNoisyDemoSetRecoversExpert) {
  const auto expert = canonical_expert();
  const auto student = fit_student(generate_demos(expert, {10, 0.9, 1000, sweep_stream_seed(0, 0), 200}));
  EXPECT_EQ(argmax_match_fraction(expert, student), 1.0);
}

TEST(Entropy, ObservationEntropy) {
  EXPECT_NEAR(observation_entropy(1), std::log(24.0), 1e-15);
  EXPECT_NEAR(observation_entropy(1), 3.178, 5e-4);
  EXPECT_NEAR(observation_entropy(10), std::log(240.0), 1e-15);
  EXPECT_NEAR(observation_entropy(2) - observation_entropy(1), std::log(2.0), 1e-12);
  for (int n = 1; n < 50; ++n) EXPECT_GT(observation_entropy(n + 1), observation_entropy(n));
  EXPECT_THROW(observation_entropy(0), std::invalid_argument);
}

TEST(Entropy, ActionEntropyMatchesDirectSummation) {
  const auto expert = canonical_expert();
  EXPECT_EQ(action_entropy_given_obs(0.0), 0.0);
  EXPECT_EQ(action_entropy_given_obs(1.0), std::log(4.0));
  for (int i = 0; i <= 100; ++i) {
    const double eta = i / 100.0;
    double h = 0.0;
    for (double p : generating_distribution(expert, eta, {1, 2, 1}))
      if (p > 0) h -= p * std::log(p);
    EXPECT_NEAR(action_entropy_given_obs(eta), h, 1e-12) << eta;
  }
  EXPECT_NEAR(action_entropy_given_obs(0.3), 0.780, 5e-4);
  for (int i = 0; i < 100; ++i)
    EXPECT_LT(action_entropy_given_obs(i / 100.0), action_entropy_given_obs((i + 1) / 100.0));
}

TEST(Sweep, DeterministicAcrossRunsAndJobCounts) {
  SweepGrid g;
  g.n_m_max = {1, 3};
  g.eta = {0.0, 0.3};
  g.demo_counts = {10, 30};
  g.seeds = 3;
  g.base_seed = 42;
  const auto a = run_entropy_sweep(g, canonical_expert(), 1);
  const auto b = run_entropy_sweep(g, canonical_expert(), 4);
  ASSERT_EQ(a.rows.size(), 2u * 2 * 2 * 3);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].kl_nats, b.rows[i].kl_nats);
    EXPECT_EQ(a.rows[i].match_fraction, b.rows[i].match_fraction);
  }
  ASSERT_EQ(a.aggregates.size(), 8u);
}

TEST(Sweep, BadCellIsReportedWithoutAbortingOthers) {
  SweepGrid g;
  g.n_m_max = {1};
  g.eta = {0.0, 1.0};
  g.demo_counts = {10};
  const auto r = run_entropy_sweep(g);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].eta, 1.0);
  ASSERT_EQ(r.aggregates.size(), 1u);
  EXPECT_EQ(r.aggregates[0].eta, 0.0);
}

TEST(Sweep, LawOfLargeNumbers) {
  SweepGrid g;
  g.demo_counts = {10, 500};
  const auto r = run_entropy_sweep(g);
  EXPECT_LT(r.find(1, 0.0, 500)->kl_mean, r.find(1, 0.0, 10)->kl_mean);
}

TEST(Sweep, SampleStd) {
  const auto [m, s] = mean_and_sample_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
}

}  // namespace
}  // namespace dynmanip::maze
