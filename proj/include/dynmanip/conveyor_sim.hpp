#pragma once

// Kinematic conveyor world: parametric belt trajectories, box objects with
// top-surface point observations (external and wrist views, occlusion
// windows), scripted skills run in the tracking frame, and the 20 Hz
// track-then-manipulate episode loop.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "dynmanip/core/csv.hpp"
#include "dynmanip/core/parallel.hpp"
#include "dynmanip/core/random.hpp"
#include "dynmanip/state_estimation.hpp"
#include "dynmanip/tracking_control.hpp"

namespace dynmanip::sim {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using control::EffectorState;
using control::ManipulationOffset;
using control::wrap_angle;

// ---------------------------------------------------------------------------
// Trajectories

struct Linear {
  double speed = 0.1;                   // m/s
  Vec2 direction = Vec2(1.0, 0.0);      // unit
};

/// Forward along +x at `speed`; lateral y = amplitude sin(2 pi x / wavelength).
struct SCurve {
  double speed = 0.1;
  double amplitude = 0.04;   // m
  double wavelength = 0.8;   // m
};

/// Forward along +x at `speed`; lateral y from a Catmull-Rom spline through
/// seeded N(0, amplitude^2) knots spaced `smoothness` apart, shifted so the
/// path starts at zero lateral offset.
struct RandomCurve {
  std::uint64_t seed = 0;
  double speed = 0.1;
  double smoothness = 0.3;   // m, knot spacing
  double amplitude = 0.04;   // m
};

using TrajectoryVariant = std::variant<Linear, SCurve, RandomCurve>;

struct BeltTrajectory {
  TrajectoryVariant variant = Linear{};
  Vec3 start = Vec3::Zero();  // object base center at t = 0
  double yaw = 0.0;           // objects ride the belt without turning

  void validate() const {
    if (!start.allFinite() || !std::isfinite(yaw)) throw std::invalid_argument("trajectory start must be finite");
    std::visit(
        [](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if (!(v.speed >= 0.0)) throw std::invalid_argument("trajectory speed must be >= 0");
          if constexpr (std::is_same_v<T, Linear>) {
            if (!(std::abs(v.direction.norm() - 1.0) < 1e-9)) throw std::invalid_argument("direction must be a unit vector");
          } else if constexpr (std::is_same_v<T, SCurve>) {
            if (!(v.amplitude > 0.0) || !(v.wavelength > 0.0))
              throw std::invalid_argument("s-curve amplitude and wavelength must be > 0");
          } else {
            if (!(v.smoothness > 0.0) || !(v.amplitude > 0.0))
              throw std::invalid_argument("random-curve smoothness and amplitude must be > 0");
          }
        },
        variant);
  }
};

inline std::string_view variant_name(const TrajectoryVariant& v) {
  switch (v.index()) {
    case 0: return "linear";
    case 1: return "scurve";
    default: return "random";
  }
}

inline double nominal_speed(const TrajectoryVariant& v) {
  return std::visit([](const auto& x) { return x.speed; }, v);
}

namespace detail {

inline double curve_knot(const RandomCurve& rc, long k) {
  Rng rng = make_rng(rc.seed, {0x6b6e6f74u, static_cast<std::uint64_t>(k)});
  return normal(rng, 0.0, rc.amplitude);
}

// Catmull-Rom value and derivative with respect to the forward distance.
inline std::pair<double, double> random_lateral(const RandomCurve& rc, double s) {
  const double u = s / rc.smoothness;
  const long k = static_cast<long>(std::floor(u));
  const double f = u - static_cast<double>(k);
  const double p0 = curve_knot(rc, k - 1), p1 = curve_knot(rc, k), p2 = curve_knot(rc, k + 1),
               p3 = curve_knot(rc, k + 2);
  const double a = -0.5 * p0 + 1.5 * p1 - 1.5 * p2 + 0.5 * p3;
  const double b = p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3;
  const double c = -0.5 * p0 + 0.5 * p2;
  const double value = ((a * f + b) * f + c) * f + p1;
  const double slope = ((3.0 * a * f + 2.0 * b) * f + c) / rc.smoothness;
  return {value, slope};
}

}  // namespace detail

struct Pose {
  Vec3 position = Vec3::Zero();
  double yaw = 0.0;
  Vec3 velocity = Vec3::Zero();
};

inline Pose object_pose(const BeltTrajectory& traj, double t) {
  if (!(t >= 0.0)) throw std::invalid_argument("object_pose needs t >= 0");
  Pose p;
  p.yaw = traj.yaw;
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Linear>) {
          p.position = traj.start + Vec3(v.direction.x(), v.direction.y(), 0.0) * (v.speed * t);
          p.velocity = Vec3(v.direction.x(), v.direction.y(), 0.0) * v.speed;
        } else if constexpr (std::is_same_v<T, SCurve>) {
          const double s = v.speed * t, w = 2.0 * std::numbers::pi / v.wavelength;
          p.position = traj.start + Vec3(s, v.amplitude * std::sin(w * s), 0.0);
          p.velocity = Vec3(v.speed, v.amplitude * w * std::cos(w * s) * v.speed, 0.0);
        } else {
          const double s = v.speed * t;
          const auto [y, dy] = detail::random_lateral(v, s);
          const double y0 = detail::random_lateral(v, 0.0).first;
          p.position = traj.start + Vec3(s, y - y0, 0.0);
          p.velocity = Vec3(v.speed, dy * v.speed, 0.0);
        }
      },
      traj.variant);
  return p;
}

/// Upper bound on path speed, used to check against the tracking limit.
inline double max_path_speed(const TrajectoryVariant& v) {
  return std::visit(
      [](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, Linear>) {
          return x.speed;
        } else if constexpr (std::is_same_v<T, SCurve>) {
          const double k = x.amplitude * 2.0 * std::numbers::pi / x.wavelength;
          return x.speed * std::sqrt(1.0 + k * k);
        } else {
          double worst = 0.0;
          for (int i = 0; i <= 400; ++i) worst = std::max(worst, std::abs(detail::random_lateral(x, 0.01 * i * x.smoothness).second));
          return x.speed * std::sqrt(1.0 + worst * worst);
        }
      },
      v);
}

// ---------------------------------------------------------------------------
// Scene

struct Window {
  double t_start = 0.0, t_end = 0.0;
};

struct SceneObject {
  int id = 0;
  Vec2 half_extent = Vec2(0.03, 0.03);          // m, top face
  double top_height = 0.06;                     // m above the base
  Vec3 grasp_point = Vec3(0.0, 0.0, 0.05);      // object frame, from the base center
  BeltTrajectory trajectory;
  std::vector<Window> occlusions;

  // Displacement applied after the object was moved off its belt path
  // (released elsewhere or dropped into a container).
  Vec3 shift = Vec3::Zero();
  double yaw_shift = 0.0;
  std::optional<int> rides_on;                  // carried by another object

  void validate() const {
    if (!grasp_point.allFinite()) throw std::invalid_argument("grasp point must be finite");
    if (!(half_extent.minCoeff() > 0.0) || !(top_height > 0.0)) throw std::invalid_argument("object size must be > 0");
    for (std::size_t i = 0; i < occlusions.size(); ++i) {
      if (!(occlusions[i].t_end > occlusions[i].t_start)) throw std::invalid_argument("occlusion windows must have t_end > t_start");
      if (i > 0 && !(occlusions[i].t_start >= occlusions[i - 1].t_end))
        throw std::invalid_argument("occlusion windows must be ordered and non-overlapping");
    }
    trajectory.validate();
  }

  bool occluded(double t) const {
    for (const auto& w : occlusions)
      if (t >= w.t_start && t < w.t_end) return true;
    return false;
  }
};

enum class GripperMode { Open, Closed, Holding };

struct Gripper {
  GripperMode mode = GripperMode::Open;
  int held = -1;
  Vec3 rel_position = Vec3::Zero();  // object base in effector yaw frame
  double rel_yaw = 0.0;
};

struct SimState {
  double time = 0.0;
  std::vector<SceneObject> objects;
  std::vector<Pose> poses;  // current, same order as objects
  EffectorState effector;
  Gripper gripper;
};

inline Eigen::Matrix3d rotation(const Vec3& euler_xyz) {
  return (Eigen::AngleAxisd(euler_xyz.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(euler_xyz.y(), Vec3::UnitY()) *
          Eigen::AngleAxisd(euler_xyz.x(), Vec3::UnitX()))
      .toRotationMatrix();
}

inline Vec3 rotz(double yaw, const Vec3& v) { return Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * v; }

/// Pose of object i under belt motion, ignoring the gripper.
inline Pose free_pose(const std::vector<SceneObject>& objects, std::size_t i, double t) {
  const SceneObject& o = objects[i];
  const std::size_t base = o.rides_on ? static_cast<std::size_t>(*o.rides_on) : i;
  Pose p = object_pose(objects[base].trajectory, t);
  if (o.rides_on) p.yaw = o.trajectory.yaw;
  p.position += o.shift;
  p.yaw = wrap_angle(p.yaw + o.yaw_shift);
  return p;
}

inline void update_poses(SimState& s) {
  s.poses.resize(s.objects.size());
  for (std::size_t i = 0; i < s.objects.size(); ++i) s.poses[i] = free_pose(s.objects, i, s.time);
  if (s.gripper.mode == GripperMode::Holding) {
    const auto h = static_cast<std::size_t>(s.gripper.held);
    const double eyaw = s.effector.orientation.z();
    s.poses[h].position = s.effector.position + rotz(eyaw, s.gripper.rel_position);
    s.poses[h].yaw = wrap_angle(eyaw + s.gripper.rel_yaw);
    s.poses[h].velocity = s.effector.velocity;
  }
}

inline Vec3 top_center(const SceneObject& o, const Pose& p) { return p.position + Vec3(0.0, 0.0, o.top_height); }
inline Vec3 grasp_world(const SceneObject& o, const Pose& p) { return p.position + rotz(p.yaw, o.grasp_point); }

// ---------------------------------------------------------------------------
// Observations

struct ObjectPoints {
  int id = 0;
  bool occluded = false;
  std::vector<Vec3> points;
};

struct Observation {
  std::vector<ObjectPoints> external;  // world frame
  std::vector<ObjectPoints> wrist;     // effector frame, never occluded
};

inline constexpr int kPointsPerSide = 7;

/// Symmetric grid over each top face plus N(0, noise^2) per coordinate. The
/// wrist view carries the same points in the effector frame.
inline Observation synth_observation(const SimState& s, double noise_std, Rng& rng, int per_side = kPointsPerSide) {
  if (!(noise_std >= 0.0)) throw std::invalid_argument("noise_std must be >= 0");
  if (per_side < 2) throw std::invalid_argument("points per side must be >= 2");
  Observation obs;
  const Eigen::Matrix3d R = rotation(s.effector.orientation);
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const SceneObject& o = s.objects[i];
    const Pose& p = s.poses[i];
    const Vec3 top = top_center(o, p);
    std::vector<Vec3> pts;
    pts.reserve(static_cast<std::size_t>(per_side * per_side));
    for (int a = 0; a < per_side; ++a)
      for (int b = 0; b < per_side; ++b) {
        const double u = o.half_extent.x() * (-1.0 + 2.0 * a / (per_side - 1));
        const double v = o.half_extent.y() * (-1.0 + 2.0 * b / (per_side - 1));
        Vec3 q = top + rotz(p.yaw, Vec3(u, v, 0.0));
        if (noise_std > 0.0)
          for (int k = 0; k < 3; ++k) q[k] += normal(rng, 0.0, noise_std);
        pts.push_back(q);
      }
    ObjectPoints wrist{o.id, false, {}};
    for (const auto& q : pts) wrist.points.push_back(R.transpose() * (q - s.effector.position));
    obs.wrist.push_back(std::move(wrist));
    if (o.occluded(s.time))
      obs.external.push_back({o.id, true, {}});
    else
      obs.external.push_back({o.id, false, std::move(pts)});
  }
  return obs;
}

inline Vec3 wrist_to_world(const EffectorState& e, const Vec3& q) { return rotation(e.orientation) * q + e.position; }

// ---------------------------------------------------------------------------
// Skills

enum class Skill { Pick, Put, Rotate, Insert };

inline std::string_view skill_name(Skill s) {
  switch (s) {
    case Skill::Pick: return "pick";
    case Skill::Put: return "put";
    case Skill::Rotate: return "rotate";
    case Skill::Insert: return "insert";
  }
  return "?";
}

inline Skill parse_skill(std::string_view s) {
  if (s == "pick") return Skill::Pick;
  if (s == "put") return Skill::Put;
  if (s == "rotate") return Skill::Rotate;
  if (s == "insert") return Skill::Insert;
  throw std::invalid_argument("unknown skill '" + std::string(s) + "'");
}

enum class GripperAction { None, Close, Open };

/// One waypoint: an offset in the tracking frame of `frame_object`, or in a
/// dead-reckoned copy of it frozen at the preceding grasp.
struct Phase {
  std::string name;
  int frame_object = 0;
  bool dead_reckon = false;
  bool align_yaw = false;       // orientation preset follows the frame object's yaw
  ManipulationOffset offset;
  bool wait_stable = false;     // completes on stable tracking instead of arrival
  double arrival_tol = 0.003;   // m
  GripperAction action = GripperAction::None;
  double settle_speed = 0.0;    // m/s; if > 0, arrival also needs |v_eff - v_frame| below it
};

inline constexpr double kGraspSettleSpeed = 0.02;  // m/s
inline constexpr double kWorkspaceRadius = 0.5;  // m, bound on waypoint offsets
inline constexpr double kOrientationArrivalTol = 0.01;  // rad

struct SkillScript {
  Skill skill = Skill::Pick;
  std::vector<Phase> phases;

  void validate(std::size_t num_objects) const {
    if (phases.empty()) throw std::invalid_argument("skill script has no phases");
    if (!phases.front().wait_stable || phases.front().offset.delta_position.norm() != 0.0 ||
        phases.front().offset.delta_orientation.norm() != 0.0)
      throw std::invalid_argument("the first phase must wait for stable tracking with a zero offset");
    for (const auto& p : phases) {
      if (!p.offset.within(kWorkspaceRadius)) throw std::invalid_argument("phase '" + p.name + "' offset outside the workspace bound");
      if (p.frame_object < 0 || static_cast<std::size_t>(p.frame_object) >= num_objects)
        throw std::invalid_argument("phase '" + p.name + "' tracks a missing object");
      if (!(p.arrival_tol > 0.0)) throw std::invalid_argument("arrival tolerance must be > 0");
      if (!(p.settle_speed >= 0.0)) throw std::invalid_argument("settle speed must be >= 0");
    }
  }
};

// ---------------------------------------------------------------------------
// World

enum class FailureReason { None, TrackingNeverStable, Timeout, GraspMissed, GraspSlipped, LiftFailed, PlacementMissed, OrientationMissed };

inline std::string_view failure_name(FailureReason r) {
  switch (r) {
    case FailureReason::None: return "none";
    case FailureReason::TrackingNeverStable: return "tracking_never_stable";
    case FailureReason::Timeout: return "timeout";
    case FailureReason::GraspMissed: return "grasp_missed";
    case FailureReason::GraspSlipped: return "grasp_slipped";
    case FailureReason::LiftFailed: return "lift_failed";
    case FailureReason::PlacementMissed: return "placement_missed";
    case FailureReason::OrientationMissed: return "orientation_missed";
  }
  return "?";
}

struct Tolerances {
  double grasp = 0.01;            // m
  double grasp_speed = 0.05;      // m/s relative
  double container = 0.02;        // m, Put
  double insert = 0.002;          // m, Insert
  double yaw = 5.0 * std::numbers::pi / 180.0;
  double lift_height = 0.1;       // m
  double lift_slack = 0.01;       // m
};

struct WorldConfig {
  TrajectoryVariant trajectory = Linear{};
  double point_noise = 0.002;     // m, per-coordinate std of observed points
  std::vector<Window> occlusions; // applied to the manipulated object
  Tolerances tol;
  double lateral_bias = 0.0;      // m, added along +y to the release waypoint
  double start_x = -0.6;          // m, manipulated object base at t = 0
  double start_jitter = 0.02;     // m, uniform +- on x and y
  double container_gap = 0.2;     // m, container trails the object upstream
  double workspace_x_max = 0.6;   // object past this: out of reach
  double max_time = 30.0;         // s
  double dt = 0.05;
  Vec3 home = Vec3(-0.45, 0.2, 0.35);
  double rotate_by = std::numbers::pi / 2.0;
  double max_yaw = std::numbers::pi / 6.0;  // initial object yaw ~ U(-max, max)
  control::EffectorLimits limits;
  control::Gains gains;
  control::TrackingOffsets offsets;
  gp::GpHyperparams gp;
  double history_window = 1.0;
  double stable_tol = control::kStableTolerance;
  double stable_hold = control::kStableHold;

  void validate() const {
    if (!(dt > 0.0) || !(max_time > 0.0)) throw std::invalid_argument("dt and max_time must be > 0");
    if (!(point_noise >= 0.0)) throw std::invalid_argument("point_noise must be >= 0");
    if (!(start_jitter >= 0.0)) throw std::invalid_argument("start_jitter must be >= 0");
    if (!(start_x < workspace_x_max)) throw std::invalid_argument("start_x must lie inside the workspace");
    limits.validate();
    gp.validate();
  }
};

inline double centroid_noise_equivalent(const WorldConfig& w) {
  return w.point_noise / static_cast<double>(kPointsPerSide);
}

/// Object 0 is manipulated; Put and Insert add a container as object 1.
inline std::vector<SceneObject> make_scene(const WorldConfig& w, Skill skill, Rng& rng) {
  std::vector<SceneObject> objs;
  const double jx = w.start_jitter * (2.0 * uniform01(rng) - 1.0);
  const double jy = w.start_jitter * (2.0 * uniform01(rng) - 1.0);
  const double yaw = w.max_yaw * (2.0 * uniform01(rng) - 1.0);
  SceneObject item;
  item.id = 0;
  item.trajectory = {w.trajectory, Vec3(w.start_x + jx, jy, 0.0), skill == Skill::Rotate ? yaw : 0.0};
  item.occlusions = w.occlusions;
  objs.push_back(item);
  if (skill == Skill::Put || skill == Skill::Insert) {
    SceneObject box;
    box.id = 1;
    box.half_extent = skill == Skill::Insert ? Vec2(0.035, 0.035) : Vec2(0.08, 0.08);
    box.top_height = 0.05;
    box.grasp_point = Vec3(0.0, 0.0, 0.04);
    box.trajectory = {w.trajectory, item.trajectory.start - Vec3(w.container_gap, 0.0, 0.0), 0.0};
    objs.push_back(box);
  }
  for (const auto& o : objs) o.validate();
  return objs;
}

/// Offsets are relative to hovering `position_offset` above the top centroid.
inline SkillScript make_script(Skill skill, const WorldConfig& w) {
  const SceneObject item;  // geometry shared by all scenes
  const double hover = w.offsets.position_offset.z();
  const Vec3 to_grasp = item.grasp_point - Vec3(0.0, 0.0, item.top_height) - Vec3(0.0, 0.0, hover);
  SkillScript s;
  s.skill = skill;
  s.phases.push_back({"track", 0, false, skill == Skill::Rotate, {}, true});
  s.phases.push_back({"descend", 0, false, skill == Skill::Rotate, {to_grasp, Vec3::Zero()}, false, 0.003, GripperAction::Close,
                      kGraspSettleSpeed});
  switch (skill) {
    case Skill::Pick:
      s.phases.push_back({"lift", 0, true, false, {to_grasp + Vec3(0, 0, w.tol.lift_height), Vec3::Zero()}, false, 0.003});
      break;
    case Skill::Rotate:
      s.phases.push_back({"rotate", 0, true, false, {to_grasp, Vec3(0, 0, w.rotate_by)}, false, 0.003, GripperAction::Open});
      s.phases.push_back({"retreat", 0, true, false, {Vec3::Zero(), Vec3(0, 0, w.rotate_by)}, false, 0.01});
      break;
    case Skill::Put:
    case Skill::Insert: {
      // Carry the item so its base clears the container rim, then lower it
      // until the base sits 5 mm above the rim.
      const double below = item.grasp_point.z();
      s.phases.push_back({"lift", 0, true, false, {to_grasp + Vec3(0, 0, w.tol.lift_height), Vec3::Zero()}, false, 0.005});
      s.phases.push_back({"track_container", 1, false, false, {Vec3(0, 0, below), Vec3::Zero()}, true});
      s.phases.push_back({"lower", 1, false, false, {Vec3(0, w.lateral_bias, below + 0.005 - hover), Vec3::Zero()}, false, 0.003,
                          GripperAction::Open});
      s.phases.push_back({"retreat", 1, false, false, {Vec3(0, 0, below), Vec3::Zero()}, false, 0.01});
      break;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Episode

struct TraceRow {
  double t = 0.0;
  int phase = 0;
  bool offset_applied = false;
  bool stable = false;
  Vec3 target = Vec3::Zero();
  Vec3 effector = Vec3::Zero();
  double error = 0.0;
  GripperMode gripper = GripperMode::Open;
  int held = -1;
  Vec3 object = Vec3::Zero();  // manipulated object base, true pose
};

struct EpisodeResult {
  Skill skill = Skill::Pick;
  bool success = false;
  FailureReason failure_reason = FailureReason::None;
  bool finished = false;                 // finish flag emitted
  std::optional<double> first_stable;    // s
  double grasp_error = 0.0;              // m, at the closing instant
  double grasp_rel_speed = 0.0;          // m/s
  double placement_error = 0.0;          // m (Put/Insert) or rad (Rotate)
  double duration = 0.0;
  std::vector<TraceRow> trace;
};

inline EpisodeResult run_episode(const SkillScript& script, const WorldConfig& w, std::uint64_t seed) {
  w.validate();
  Rng scene_rng = make_rng(seed, {1});
  Rng noise_rng = make_rng(seed, {2});

  SimState s;
  s.objects = make_scene(w, script.skill, scene_rng);
  script.validate(s.objects.size());
  s.effector.limits = w.limits;
  s.effector.position = w.home;
  std::vector<gp::ObjectStateEstimator> est;
  for (std::size_t i = 0; i < s.objects.size(); ++i) est.emplace_back(w.gp, w.history_window);

  EpisodeResult res;
  res.skill = script.skill;
  control::StabilityMonitor monitor(w.stable_tol, w.stable_hold);
  std::size_t phase = 0;
  bool phase_ever_stable = false;
  struct Frame {
    Vec3 position, velocity;
    double yaw, t0;
  } reckon{};
  std::optional<double> grasp_z;

  auto finish = [&](bool ok, FailureReason why) {
    res.success = ok;
    res.failure_reason = ok ? FailureReason::None : why;
    res.duration = s.time;
    return std::move(res);
  };

  const auto steps = static_cast<long>(std::floor(w.max_time / w.dt + 1e-9));
  for (long k = 0; k <= steps; ++k) {
    s.time = static_cast<double>(k) * w.dt;
    update_poses(s);
    const Observation obs = synth_observation(s, w.point_noise, noise_rng);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      const auto& ext = obs.external[i];
      const bool held = s.gripper.mode == GripperMode::Holding && s.gripper.held == static_cast<int>(i);
      if (!ext.occluded && !held) est[i].observe({s.time, control::top_centroid(ext.points)});
    }

    const Phase& ph = script.phases[phase];
    const auto fo = static_cast<std::size_t>(ph.frame_object);
    Vec3 fpos, fvel;
    double fyaw;
    if (ph.dead_reckon) {
      fpos = reckon.position + reckon.velocity * (s.time - reckon.t0);
      fvel = reckon.velocity;
      fyaw = reckon.yaw;
    } else {
      const auto e = est[fo].estimate(s.time);
      fpos = e.position;
      fvel = e.velocity;
      fyaw = s.poses[fo].yaw;
    }
    control::TrackingOffsets offs = w.offsets;
    if (ph.align_yaw || ph.dead_reckon) offs.orientation_preset.z() += fyaw;
    const auto target = control::compose_target(control::tracking_action(fpos, fvel, offs), ph.offset);
    const double err = (target.position - s.effector.position).norm();
    double ori_err = 0.0;
    for (int a = 0; a < 3; ++a) ori_err = std::max(ori_err, std::abs(wrap_angle(target.orientation[a] - s.effector.orientation[a])));
    const bool stable = monitor.update(s.time, err);
    if (stable && !res.first_stable) res.first_stable = s.time;
    phase_ever_stable |= stable;

    TraceRow row;
    row.t = s.time;
    row.phase = static_cast<int>(phase);
    row.offset_applied = ph.offset.delta_position.norm() != 0.0 || ph.offset.delta_orientation.norm() != 0.0;
    row.stable = stable;
    row.target = target.position;
    row.effector = s.effector.position;
    row.error = err;
    row.gripper = s.gripper.mode;
    row.held = s.gripper.held;
    row.object = s.poses[0].position;
    res.trace.push_back(row);

    const bool settled = ph.settle_speed == 0.0 || (s.effector.velocity - fvel).norm() < ph.settle_speed;
    const bool done = ph.wait_stable ? stable : (err < ph.arrival_tol && ori_err < kOrientationArrivalTol && settled);
    if (done) {
      if (ph.action == GripperAction::Close) {
        const auto& o = s.objects[fo];
        res.grasp_error = (s.effector.position - grasp_world(o, s.poses[fo])).norm();
        res.grasp_rel_speed = (s.effector.velocity - s.poses[fo].velocity).norm();
        if (res.grasp_error >= w.tol.grasp) return finish(false, FailureReason::GraspMissed);
        if (res.grasp_rel_speed >= w.tol.grasp_speed) return finish(false, FailureReason::GraspSlipped);
        const double eyaw = s.effector.orientation.z();
        s.gripper = {GripperMode::Holding, ph.frame_object, rotz(-eyaw, s.poses[fo].position - s.effector.position),
                     wrap_angle(s.poses[fo].yaw - eyaw)};
        grasp_z = s.poses[fo].position.z();
        reckon = {fpos, Vec3(fvel.x(), fvel.y(), 0.0), fyaw, s.time};
      } else if (ph.action == GripperAction::Open && s.gripper.mode == GripperMode::Holding) {
        const auto h = static_cast<std::size_t>(s.gripper.held);
        SceneObject& o = s.objects[h];
        const Pose now = s.poses[h];
        if (script.skill == Skill::Rotate) {
          res.placement_error = std::abs(wrap_angle(now.yaw - (o.trajectory.yaw + w.rotate_by)));
          o.yaw_shift = wrap_angle(now.yaw - o.trajectory.yaw);
          o.shift = Vec3(now.position.x(), now.position.y(), o.trajectory.start.z()) - object_pose(o.trajectory, s.time).position;
        } else {
          const auto c = static_cast<std::size_t>(ph.frame_object);
          const Pose cp = s.poses[c];
          res.placement_error = (now.position - cp.position).head<2>().norm();
          o.rides_on = static_cast<int>(c);
          o.shift = Vec3(now.position.x() - cp.position.x(), now.position.y() - cp.position.y(), 0.005);
          o.yaw_shift = wrap_angle(now.yaw - o.trajectory.yaw);
        }
        s.gripper = {};
        const double limit = script.skill == Skill::Rotate ? w.tol.yaw
                             : script.skill == Skill::Insert ? w.tol.insert
                                                             : w.tol.container;
        if (!(res.placement_error < limit))
          return finish(false, script.skill == Skill::Rotate ? FailureReason::OrientationMissed : FailureReason::PlacementMissed);
      }
      ++phase;
      if (phase == script.phases.size()) {
        res.finished = true;
        if (script.skill == Skill::Pick) {
          const double lifted = s.poses[0].position.z() - grasp_z.value_or(0.0);
          if (!(s.gripper.mode == GripperMode::Holding && lifted >= w.tol.lift_height - w.tol.lift_slack))
            return finish(false, FailureReason::LiftFailed);
        }
        return finish(true, FailureReason::None);
      }
      const Phase& next = script.phases[phase];
      if (next.frame_object != ph.frame_object || next.dead_reckon != ph.dead_reckon) {
        monitor.reset();
        phase_ever_stable = false;
      }
    }

    // Reachability: the object currently framing the skill left the workspace.
    if (!ph.dead_reckon && s.poses[fo].position.x() > w.workspace_x_max)
      return finish(false, phase_ever_stable ? FailureReason::Timeout : FailureReason::TrackingNeverStable);

    s.effector = control::step_effector(s.effector, target, w.gains, w.dt);
  }
  return finish(false, phase_ever_stable ? FailureReason::Timeout : FailureReason::TrackingNeverStable);
}

inline EpisodeResult run_episode(Skill skill, const WorldConfig& w, std::uint64_t seed) {
  return run_episode(make_script(skill, w), w, seed);
}

inline std::string trace_csv(const EpisodeResult& r) {
  csv::Table t({"t", "phase", "offset_applied", "stable", "target_x", "target_y", "target_z", "eff_x", "eff_y", "eff_z",
                "err_norm", "gripper", "held", "obj_x", "obj_y", "obj_z"});
  for (const auto& row : r.trace)
    t.row(row.t, row.phase, row.offset_applied, row.stable, row.target.x(), row.target.y(), row.target.z(), row.effector.x(),
          row.effector.y(), row.effector.z(), row.error, static_cast<int>(row.gripper), row.held, row.object.x(), row.object.y(),
          row.object.z());
  return t.str();
}

// ---------------------------------------------------------------------------
// Sweeps

struct RateRow {
  Skill skill = Skill::Pick;
  std::string variant;
  double speed = 0.0;
  int episodes = 0;
  int successes = 0;
  double rate() const { return episodes ? static_cast<double>(successes) / episodes : 0.0; }
  double standard_error() const {
    const double p = rate();
    return episodes ? std::sqrt(p * (1.0 - p) / episodes) : 0.0;
  }
};

inline TrajectoryVariant with_speed(TrajectoryVariant v, double speed) {
  std::visit([&](auto& x) { x.speed = speed; }, v);
  return v;
}

/// Episode e uses seed derive_seed(seed, {e}) at every speed, so scenes and
/// perception noise are shared across speeds.
inline std::vector<RateRow> speed_sweep(Skill skill, const std::vector<double>& speeds, int episodes, std::uint64_t seed,
                                        const WorldConfig& base = {}, int jobs = 1) {
  if (episodes < 1) throw std::invalid_argument("episodes must be >= 1");
  if (speeds.empty()) throw std::invalid_argument("speed list is empty");
  const std::size_t n = speeds.size() * static_cast<std::size_t>(episodes);
  const auto ok = parallel_map(n, jobs, [&](std::size_t i) {
    WorldConfig w = base;
    w.trajectory = with_speed(base.trajectory, speeds[i / static_cast<std::size_t>(episodes)]);
    return run_episode(skill, w, derive_seed(seed, {i % static_cast<std::size_t>(episodes)})).success;
  });
  std::vector<RateRow> rows;
  for (std::size_t s = 0; s < speeds.size(); ++s) {
    RateRow r{skill, std::string(variant_name(base.trajectory)), speeds[s], episodes, 0};
    for (int e = 0; e < episodes; ++e) r.successes += ok[s * static_cast<std::size_t>(episodes) + static_cast<std::size_t>(e)];
    rows.push_back(r);
  }
  return rows;
}

inline control::TrackingSimConfig tracking_equivalent(const WorldConfig& w) {
  control::TrackingSimConfig c;
  c.limits = w.limits;
  c.gains = w.gains;
  c.dt = w.dt;
  c.centroid_noise = centroid_noise_equivalent(w);
  c.offsets = w.offsets;
  c.gp = w.gp;
  c.history_window = w.history_window;
  c.tol = w.stable_tol;
  c.hold = w.stable_hold;
  return c;
}

inline std::vector<RateRow> trajectory_generalization(Skill skill, const std::vector<TrajectoryVariant>& variants, int episodes,
                                                      std::uint64_t seed, const WorldConfig& base = {}, int jobs = 1) {
  if (episodes < 1) throw std::invalid_argument("episodes must be >= 1");
  if (variants.empty()) throw std::invalid_argument("trajectory list is empty");
  const double limit = control::max_stable_speed(tracking_equivalent(base));
  for (const auto& v : variants) {
    WorldConfig w = base;
    w.trajectory = v;
    if (!(max_path_speed(v) < limit))
      throw std::invalid_argument(std::string(variant_name(v)) + " path speed exceeds the max stable tracking speed");
  }
  const std::size_t n = variants.size() * static_cast<std::size_t>(episodes);
  const auto ok = parallel_map(n, jobs, [&](std::size_t i) {
    WorldConfig w = base;
    w.trajectory = variants[i / static_cast<std::size_t>(episodes)];
    return run_episode(skill, w, derive_seed(seed, {i % static_cast<std::size_t>(episodes)})).success;
  });
  std::vector<RateRow> rows;
  for (std::size_t s = 0; s < variants.size(); ++s) {
    RateRow r{skill, std::string(variant_name(variants[s])), nominal_speed(variants[s]), episodes, 0};
    for (int e = 0; e < episodes; ++e) r.successes += ok[s * static_cast<std::size_t>(episodes) + static_cast<std::size_t>(e)];
    rows.push_back(r);
  }
  return rows;
}

inline std::string rates_csv(const std::vector<RateRow>& rows) {
  csv::Table t({"skill", "variant", "speed", "episodes", "successes", "rate"});
  for (const auto& r : rows) t.row(std::string(skill_name(r.skill)), r.variant, r.speed, r.episodes, r.successes, r.rate());
  return t.str();
}

}  // namespace dynmanip::sim
