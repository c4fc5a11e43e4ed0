#pragma once

// Visual-servo style tracking: top-centroid extraction, the three-part
// tracking action, its sum with manipulation offsets, and a speed- and
// acceleration-limited point-mass effector used to close the loop.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dynmanip/core/random.hpp"
#include "dynmanip/state_estimation.hpp"

namespace dynmanip::control {

using Vec3 = Eigen::Vector3d;

/// Wraps into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(a, two_pi);  // (-2pi, 2pi)
  if (w <= -std::numbers::pi) w += two_pi;
  if (w > std::numbers::pi) w -= two_pi;
  return w;
}

inline Vec3 wrap_euler(const Vec3& e) { return {wrap_angle(e.x()), wrap_angle(e.y()), wrap_angle(e.z())}; }

struct TrackingOffsets {
  Vec3 position_offset = Vec3(0.0, 0.0, 0.15);
  Vec3 orientation_preset = Vec3::Zero();  // Euler xyz, rad
};

struct TrackAction {
  Vec3 position = Vec3::Zero();
  Vec3 orientation = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
};

struct ManipulationOffset {
  Vec3 delta_position = Vec3::Zero();
  Vec3 delta_orientation = Vec3::Zero();

  bool within(double workspace_radius) const {
    return delta_position.allFinite() && delta_orientation.allFinite() && delta_position.norm() <= workspace_radius;
  }

  friend ManipulationOffset operator+(const ManipulationOffset& a, const ManipulationOffset& b) {
    return {a.delta_position + b.delta_position, a.delta_orientation + b.delta_orientation};
  }
};

struct EffectorTarget {
  Vec3 position = Vec3::Zero();
  Vec3 orientation = Vec3::Zero();
  Vec3 feedforward_velocity = Vec3::Zero();
};

struct EffectorLimits {
  double max_speed = 0.3;         // m/s
  double max_accel = 2.0;         // m/s^2
  double max_angular_rate = 1.5;  // rad/s, per Euler axis

  void validate() const {
    if (!(max_speed > 0.0) || !(max_accel > 0.0) || !(max_angular_rate > 0.0))
      throw std::invalid_argument("effector limits must be > 0");
  }
};

struct EffectorState {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 orientation = Vec3::Zero();
  EffectorLimits limits;
};

struct Gains {
  double kp = 4.0;  // 1/s
};

/// (mean x, mean y, max z) of a point set; +z points up.
inline Vec3 top_centroid(std::span<const Vec3> points) {
  if (points.empty()) throw std::invalid_argument("top_centroid of an empty point set");
  double sx = 0.0, sy = 0.0, zmax = points[0].z();
  for (const auto& p : points) {
    sx += p.x();
    sy += p.y();
    zmax = std::max(zmax, p.z());
  }
  const double n = static_cast<double>(points.size());
  return {sx / n, sy / n, zmax};
}

inline TrackAction tracking_action(const Vec3& centroid, const Vec3& velocity, const TrackingOffsets& offsets) {
  return {centroid + offsets.position_offset, offsets.orientation_preset, velocity};
}

/// Componentwise sum; orientation is wrapped, velocity passes through.
inline EffectorTarget compose_target(const TrackAction& track, const ManipulationOffset& manip = {}) {
  return {track.position + manip.delta_position, wrap_euler(track.orientation + manip.delta_orientation),
          track.velocity};
}

inline Vec3 clamp_norm(const Vec3& v, double max_norm) {
  const double n = v.norm();
  return n > max_norm ? Vec3(v * (max_norm / n)) : v;
}

/// One explicit-Euler step of the velocity-feedforward P controller under
/// speed and acceleration limits.
inline EffectorState step_effector(const EffectorState& state, const EffectorTarget& target, const Gains& gains,
                                   double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be > 0");
  const EffectorLimits& lim = state.limits;
  EffectorState next = state;
  const Vec3 commanded = clamp_norm(target.feedforward_velocity + gains.kp * (target.position - state.position),
                                    lim.max_speed);
  next.velocity = state.velocity + clamp_norm(commanded - state.velocity, lim.max_accel * dt);
  // Starting inside the speed ball, the convex step stays inside it.
  next.velocity = clamp_norm(next.velocity, lim.max_speed);
  next.position = state.position + next.velocity * dt;
  const double max_turn = lim.max_angular_rate * dt;
  for (int a = 0; a < 3; ++a) {
    const double err = wrap_angle(target.orientation[a] - state.orientation[a]);
    next.orientation[a] = wrap_angle(state.orientation[a] + std::clamp(err, -max_turn, max_turn));
  }
  return next;
}

struct ErrorSample {
  double t = 0.0;
  double error = 0.0;
};

inline constexpr double kStableTolerance = 0.005;  // m
inline constexpr double kStableHold = 1.0;         // s
inline constexpr double kTimeEpsilon = 1e-9;

/// True iff the trailing run of errors below `tol` spans at least `hold`.
inline bool is_stable_tracking(std::span<const ErrorSample> history, double tol = kStableTolerance,
                               double hold = kStableHold) {
  if (!(tol > 0.0) || !(hold > 0.0)) throw std::invalid_argument("tol and hold must be > 0");
  if (history.empty() || !(history.back().error < tol)) return false;
  std::size_t first = history.size() - 1;
  while (first > 0 && history[first - 1].error < tol) --first;
  return history.back().t - history[first].t >= hold - kTimeEpsilon;
}

/// Streaming form of is_stable_tracking.
class StabilityMonitor {
 public:
  explicit StabilityMonitor(double tol = kStableTolerance, double hold = kStableHold) : tol_(tol), hold_(hold) {
    if (!(tol > 0.0) || !(hold > 0.0)) throw std::invalid_argument("tol and hold must be > 0");
  }

  bool update(double t, double error) {
    if (error < tol_) {
      if (!in_run_) run_start_ = t;
      in_run_ = true;
    } else {
      in_run_ = false;
    }
    stable_ = in_run_ && t - run_start_ >= hold_ - kTimeEpsilon;
    return stable_;
  }

  bool stable() const { return stable_; }
  std::optional<double> run_start() const { return in_run_ ? std::optional<double>(run_start_) : std::nullopt; }
  void reset() {
    in_run_ = false;
    stable_ = false;
  }

 private:
  double tol_, hold_;
  double run_start_ = 0.0;
  bool in_run_ = false;
  bool stable_ = false;
};

// ---------------------------------------------------------------------------
// Closed-loop belt tracking

struct TrackingSimConfig {
  double belt_speed = 0.2;  // m/s along +x
  EffectorLimits limits;
  Gains gains;
  double duration = 10.0;  // s
  double dt = 0.05;        // s (20 Hz)
  double centroid_noise = 0.0005;  // m, per-axis std of observed centroids
  std::uint64_t seed = 0;
  TrackingOffsets offsets;
  Vec3 object_start = Vec3(0.0, 0.0, 0.1);
  Vec3 initial_effector_offset = Vec3(-0.2, 0.2, 0.1);  // from the first tracking target
  gp::GpHyperparams gp;
  double history_window = 1.0;
  double tol = kStableTolerance;
  double hold = kStableHold;
};

struct TrackingTraceRow {
  double t = 0.0;
  Vec3 target = Vec3::Zero();
  Vec3 position = Vec3::Zero();
  double error = 0.0;
};

struct TrackingReport {
  std::vector<TrackingTraceRow> trace;
  bool stable = false;                  // stable at the end of the run
  std::optional<double> settle_time;    // start of the final sub-tolerance run, if stable
  std::optional<double> stable_since;   // first time the monitor declared stability
  double steady_error = 0.0;            // max error over the final `hold` seconds
  double final_error = 0.0;
};

inline TrackingReport simulate_tracking(const TrackingSimConfig& cfg) {
  if (!(cfg.dt > 0.0)) throw std::invalid_argument("dt must be > 0");
  cfg.limits.validate();
  Rng rng = make_rng(cfg.seed, {0x7472u});
  gp::ObjectStateEstimator estimator(cfg.gp, cfg.history_window);
  StabilityMonitor monitor(cfg.tol, cfg.hold);

  EffectorState eff;
  eff.limits = cfg.limits;
  eff.position = cfg.object_start + cfg.offsets.position_offset + cfg.initial_effector_offset;
  eff.orientation = cfg.offsets.orientation_preset;

  TrackingReport report;
  const auto steps = static_cast<long>(std::floor(cfg.duration / cfg.dt + 1e-9));
  for (long k = 0; k <= steps; ++k) {
    const double t = static_cast<double>(k) * cfg.dt;
    const Vec3 truth = cfg.object_start + Vec3(cfg.belt_speed * t, 0.0, 0.0);
    Vec3 observed = truth;
    for (int a = 0; a < 3; ++a) observed[a] += normal(rng, 0.0, 1.0) * cfg.centroid_noise;
    estimator.observe({t, observed});
    const auto est = estimator.estimate(t);
    const EffectorTarget target = compose_target(tracking_action(est.position, est.velocity, cfg.offsets));
    const double err = (target.position - eff.position).norm();
    report.trace.push_back({t, target.position, eff.position, err});
    if (monitor.update(t, err) && !report.stable_since) report.stable_since = t;
    eff = step_effector(eff, target, cfg.gains, cfg.dt);
  }
  report.stable = monitor.stable();
  if (report.stable) report.settle_time = monitor.run_start();
  report.final_error = report.trace.back().error;
  const double t_end = report.trace.back().t;
  for (const auto& row : report.trace)
    if (row.t >= t_end - cfg.hold - kTimeEpsilon) report.steady_error = std::max(report.steady_error, row.error);
  return report;
}

inline constexpr double kStableSpeedHorizon = 8.0;  // s
inline constexpr double kStableSpeedResolution = 0.01;  // m/s

/// Largest belt speed (to `resolution`) for which tracking is stable at the
/// end of a `horizon`-second run, found by bisection on [0, 2 max_speed].
inline double max_stable_speed(TrackingSimConfig base, double horizon = kStableSpeedHorizon,
                               double resolution = kStableSpeedResolution) {
  base.duration = horizon;
  auto stable_at = [&](double v) {
    TrackingSimConfig c = base;
    c.belt_speed = v;
    return simulate_tracking(c).stable;
  };
  double lo = 0.0, hi = 2.0 * base.limits.max_speed;
  if (!stable_at(lo)) return 0.0;
  if (stable_at(hi)) return hi;
  while (hi - lo > resolution) {
    const double mid = 0.5 * (lo + hi);
    (stable_at(mid) ? lo : hi) = mid;
  }
  return lo;
}

}  // namespace dynmanip::control
