#include "dynmanip/conveyor_sim.hpp"

#include <gtest/gtest.h>

namespace dynmanip::sim {
namespace {

TEST(ObjectPose, LinearKinematics) {
  const BeltTrajectory tr{Linear{0.1, {1.0, 0.0}}, Vec3(-0.3, 0.05, 0.0), 0.0};
  const auto p = object_pose(tr, 2.0);
  EXPECT_LT((p.position - (tr.start + Vec3(0.2, 0, 0))).norm(), 1e-15);
  EXPECT_EQ(p.velocity, Vec3(0.1, 0, 0));
  EXPECT_THROW(object_pose(tr, -1.0), std::invalid_argument);
}

TEST(ObjectPose, SCurveZeroAtWavelength) {
  const SCurve sc{0.1, 0.04, 0.8};
  const BeltTrajectory tr{sc, Vec3::Zero(), 0.0};
  const auto p = object_pose(tr, sc.wavelength / sc.speed);
  EXPECT_NEAR(p.position.x(), sc.wavelength, 1e-12);
  EXPECT_NEAR(p.position.y(), 0.0, 1e-12);
  EXPECT_NEAR(object_pose(tr, 0.25 * sc.wavelength / sc.speed).position.y(), sc.amplitude, 1e-12);
}

TEST(ObjectPose, RandomCurveDeterministicAndAnchored) {
  const BeltTrajectory a{RandomCurve{5, 0.1, 0.3, 0.04}, Vec3(0.1, 0.2, 0.0), 0.0};
  EXPECT_LT((object_pose(a, 0.0).position - a.start).norm(), 1e-15);
  for (double t = 0; t < 10; t += 0.37) EXPECT_EQ(object_pose(a, t).position, object_pose(a, t).position);
  const BeltTrajectory b{RandomCurve{6, 0.1, 0.3, 0.04}, a.start, 0.0};
  double diff = 0;
  for (double t = 0; t < 10; t += 0.37) diff += std::abs(object_pose(a, t).position.y() - object_pose(b, t).position.y());
  EXPECT_GT(diff, 0.0);
}

TEST(ObjectPose, VelocityIsPositionDerivative) {
  const std::vector<TrajectoryVariant> vs{Linear{0.12, Vec2(0.6, 0.8)}, SCurve{0.1, 0.05, 0.5}, RandomCurve{2, 0.15, 0.2, 0.05}};
  for (const auto& v : vs) {
    const BeltTrajectory tr{v, Vec3(0.0, 0.0, 0.0), 0.0};
    for (double t = 0.1; t < 8; t += 0.29) {
      const double h = 1e-6;
      const Vec3 fd = (object_pose(tr, t + h).position - object_pose(tr, t - h).position) / (2 * h);
      EXPECT_LT((fd - object_pose(tr, t).velocity).norm(), 1e-7) << variant_name(v) << " t=" << t;
    }
    EXPECT_GE(max_path_speed(v) + 1e-12, object_pose(tr, 1.0).velocity.norm());
  }
}

TEST(ObjectPose, VeryLongCorrelationIsNearlyStraight) {
  const BeltTrajectory tr{RandomCurve{1, 0.1, 1000.0, 0.04}, Vec3::Zero(), 0.0};
  for (double t = 0; t <= 15; t += 0.5) EXPECT_LT(std::abs(object_pose(tr, t).position.y()), 1e-4);
}

TEST(Trajectory, Validation) {
  EXPECT_THROW((BeltTrajectory{Linear{-0.1}, Vec3::Zero(), 0}.validate()), std::invalid_argument);
  EXPECT_THROW((BeltTrajectory{Linear{0.1, Vec2(1, 1)}, Vec3::Zero(), 0}.validate()), std::invalid_argument);
  EXPECT_THROW((BeltTrajectory{SCurve{0.1, 0.0, 1.0}, Vec3::Zero(), 0}.validate()), std::invalid_argument);
  EXPECT_THROW((BeltTrajectory{RandomCurve{0, 0.1, 0.0}, Vec3::Zero(), 0}.validate()), std::invalid_argument);
}

SimState one_object_state(double t = 1.0) {
  SimState s;
  SceneObject o;
  o.trajectory = {Linear{0.1}, Vec3(-0.2, 0.03, 0.0), 0.4};
  o.occlusions = {{2.0, 2.5}};
  s.objects.push_back(o);
  s.time = t;
  update_poses(s);
  return s;
}

TEST(SynthObservation, NoiselessTopCentroidIsTopCenter) {
  SimState s = one_object_state();
  Rng rng = make_rng(0);
  const auto obs = synth_observation(s, 0.0, rng);
  ASSERT_FALSE(obs.external[0].occluded);
  const Vec3 c = control::top_centroid(obs.external[0].points);
  EXPECT_LT((c - top_center(s.objects[0], s.poses[0])).norm(), 1e-12);
  EXPECT_EQ(obs.external[0].id, 0);
  EXPECT_THROW(synth_observation(s, -1.0, rng), std::invalid_argument);
}

TEST(SynthObservation, OcclusionHidesOnlyExternalView) {
  SimState s = one_object_state(2.2);
  Rng rng = make_rng(0);
  const auto obs = synth_observation(s, 0.001, rng);
  EXPECT_TRUE(obs.external[0].occluded);
  EXPECT_TRUE(obs.external[0].points.empty());
  EXPECT_FALSE(obs.wrist[0].occluded);
  EXPECT_FALSE(obs.wrist[0].points.empty());
  s.time = 2.5;
  EXPECT_FALSE(synth_observation(s, 0.0, rng).external[0].occluded);
}

TEST(SynthObservation, WristCentroidAtNegativeOffset) {
  SimState s = one_object_state();
  const control::TrackingOffsets off;
  s.effector.position = top_center(s.objects[0], s.poses[0]) + off.position_offset;
  Rng rng = make_rng(0);
  const auto obs = synth_observation(s, 0.0, rng);
  EXPECT_LT((control::top_centroid(obs.wrist[0].points) + off.position_offset).norm(), 1e-12);
}

TEST(SynthObservation, WristFrameRoundTrip) {
  SimState s = one_object_state();
  s.effector.position = Vec3(0.1, -0.2, 0.3);
  s.effector.orientation = Vec3(0.3, -0.2, 1.1);
  Rng a = make_rng(3);
  const auto obs = synth_observation(s, 0.002, a);
  ASSERT_EQ(obs.wrist[0].points.size(), obs.external[0].points.size());
  for (std::size_t i = 0; i < obs.wrist[0].points.size(); ++i)
    EXPECT_LT((wrist_to_world(s.effector, obs.wrist[0].points[i]) - obs.external[0].points[i]).norm(), 1e-9);
}

TEST(Occlusion, EstimateThroughHalfSecondGap) {
  SimState s = one_object_state(0.0);
  s.objects[0].occlusions = {{3.0, 3.5}};
  gp::ObjectStateEstimator est;
  Rng rng = make_rng(4);
  for (int k = 0; k * 0.05 <= 3.5 + 1e-9; ++k) {
    s.time = k * 0.05;
    update_poses(s);
    const auto obs = synth_observation(s, 0.002, rng);
    if (!obs.external[0].occluded) est.observe({s.time, control::top_centroid(obs.external[0].points)});
  }
  const Vec3 truth = top_center(s.objects[0], s.poses[0]);
  EXPECT_LT((est.estimate(3.5).position - truth).head<2>().norm(), 0.01);
  EXPECT_LT((est.estimate(3.5).position - truth).norm(), 0.01);
}

TEST(RunEpisode, PickAtDefaultSpeedNoiseless) {
  WorldConfig w;
  w.point_noise = 0.0;
  const auto r = run_episode(Skill::Pick, w, 1);
  EXPECT_TRUE(r.success) << failure_name(r.failure_reason);
  EXPECT_TRUE(r.finished);
  EXPECT_LT(r.grasp_error, w.tol.grasp);
}

TEST(RunEpisode, TooFastNeverStabilizes) {
  WorldConfig w;
  w.trajectory = Linear{0.5};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = run_episode(Skill::Pick, w, seed);
    EXPECT_FALSE(r.success);
    EXPECT_EQ(r.failure_reason, FailureReason::TrackingNeverStable);
    EXPECT_FALSE(r.first_stable.has_value());
  }
}

TEST(RunEpisode, InsertToleranceIsTwoMillimetres) {
  WorldConfig w;
  w.point_noise = 0.0;
  const auto ok = run_episode(Skill::Insert, w, 1);
  EXPECT_TRUE(ok.success) << failure_name(ok.failure_reason);
  w.lateral_bias = 0.003;
  const auto bad = run_episode(Skill::Insert, w, 1);
  EXPECT_FALSE(bad.success);
  EXPECT_EQ(bad.failure_reason, FailureReason::PlacementMissed);
  EXPECT_GT(bad.placement_error, 0.002);
}

TEST(RunEpisode, AllSkillsSucceedAtLowSpeed) {
  WorldConfig w;
  for (Skill sk : {Skill::Pick, Skill::Put, Skill::Rotate, Skill::Insert}) {
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) ok += run_episode(sk, w, seed).success;
    EXPECT_GE(ok, 8) << skill_name(sk);
  }
}

TEST(RunEpisode, RotateReachesTargetYaw) {
  WorldConfig w;
  w.point_noise = 0.0;
  const auto r = run_episode(Skill::Rotate, w, 2);
  EXPECT_TRUE(r.success) << failure_name(r.failure_reason);
  EXPECT_LT(r.placement_error, w.tol.yaw);
}

TEST(RunEpisode, Deterministic) {
  WorldConfig w;
  const auto a = run_episode(Skill::Put, w, 9), b = run_episode(Skill::Put, w, 9);
  EXPECT_EQ(a.success, b.success);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  EXPECT_EQ(trace_csv(a), trace_csv(b));
}

TEST(RunEpisode, NoOffsetBeforeStableTracking) {
  WorldConfig w;
  for (Skill sk : {Skill::Pick, Skill::Put, Skill::Rotate, Skill::Insert})
    for (double v : {0.05, 0.1, 0.25})
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        w.trajectory = Linear{v};
        const auto r = run_episode(sk, w, seed);
        bool seen_stable = false;
        for (const auto& row : r.trace) {
          EXPECT_TRUE(seen_stable || !row.offset_applied) << skill_name(sk) << " t=" << row.t;
          seen_stable |= row.stable;
        }
      }
}

TEST(RunEpisode, FailureReasonIffNotSuccess) {
  WorldConfig w;
  for (double v : {0.1, 0.25, 0.5})
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      w.trajectory = Linear{v};
      const auto r = run_episode(Skill::Put, w, seed);
      EXPECT_EQ(r.success, r.failure_reason == FailureReason::None);
    }
}

TEST(RunEpisode, HeldObjectFollowsGraspFrame) {
  WorldConfig w;
  const auto r = run_episode(Skill::Rotate, w, 3);
  std::optional<Vec3> rel;
  int held_rows = 0;
  for (const auto& row : r.trace) {
    EXPECT_GE(row.held, -1);
    if (row.held != 0) continue;
    ++held_rows;
    // Rotate spins the effector about z, so compare distances.
    const Vec3 d = row.object - row.effector;
    if (!rel) rel = d;
    EXPECT_NEAR(d.norm(), rel->norm(), 1e-12);
  }
  EXPECT_GT(held_rows, 0);
}

TEST(SkillScript, RejectsInfeasible) {
  WorldConfig w;
  SkillScript s = make_script(Skill::Pick, w);
  s.phases[1].offset.delta_position = Vec3(0, 0, -2.0);
  EXPECT_THROW(run_episode(s, w, 0), std::invalid_argument);
  SkillScript t = make_script(Skill::Pick, w);
  t.phases[0].wait_stable = false;
  EXPECT_THROW(run_episode(t, w, 0), std::invalid_argument);
  SkillScript u = make_script(Skill::Pick, w);
  u.phases[1].frame_object = 1;
  EXPECT_THROW(run_episode(u, w, 0), std::invalid_argument);
}

TEST(SpeedSweep, TrendAndJobsInvariance) {
  const auto rows = speed_sweep(Skill::Pick, {0.05, 0.10, 0.50}, 30, 5);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_LE(std::abs(rows[0].rate() - rows[1].rate()), 0.1);
  EXPECT_EQ(rows[2].successes, 0);
  const auto again = speed_sweep(Skill::Pick, {0.05, 0.10, 0.50}, 30, 5, {}, 3);
  EXPECT_EQ(rates_csv(rows), rates_csv(again));
  EXPECT_THROW(speed_sweep(Skill::Pick, {}, 3, 0), std::invalid_argument);
  EXPECT_THROW(speed_sweep(Skill::Pick, {0.1}, 0, 0), std::invalid_argument);
}

TEST(TrajectoryGeneralization, CurvesMatchLinear) {
  const auto rows = trajectory_generalization(Skill::Pick, {Linear{0.1}, SCurve{0.1}, RandomCurve{4, 0.1, 10000.0}}, 30, 8);
  EXPECT_LE(std::abs(rows[0].rate() - rows[1].rate()), 0.10);
  EXPECT_LE(std::abs(rows[0].rate() - rows[2].rate()), 0.05);
  EXPECT_EQ(rows[1].variant, "scurve");
  EXPECT_EQ(rates_csv(rows), rates_csv(trajectory_generalization(Skill::Pick, {Linear{0.1}, SCurve{0.1}, RandomCurve{4, 0.1, 10000.0}}, 30, 8)));
  EXPECT_THROW(trajectory_generalization(Skill::Pick, {Linear{0.4}}, 3, 0), std::invalid_argument);
}

}  // namespace
}  // namespace dynmanip::sim
