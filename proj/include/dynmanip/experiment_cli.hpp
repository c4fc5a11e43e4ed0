#pragma once

// Subcommand front end shared by the dynmanip binary and its tests.
// Config files are JSON objects; unknown keys are errors. Values resolve as
// command-line flags > config file > built-in defaults.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dynmanip/conveyor_sim.hpp"
#include "dynmanip/core/csv.hpp"
#include "dynmanip/core/parallel.hpp"
#include "dynmanip/entropy_maze.hpp"
#include "dynmanip/memory_cell.hpp"
#include "dynmanip/mixture_policy.hpp"
#include "dynmanip/state_estimation.hpp"
#include "dynmanip/tracking_control.hpp"
#include "json.hpp"

#ifndef DYNMANIP_VERSION
#define DYNMANIP_VERSION "0.0.0"
#endif

namespace dynmanip::cli {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // a run or some sweep cells failed
inline constexpr int kExitUsage = 2;    // bad flags or config

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config reading

/// Parses JSON text; syntax errors carry line and column.
inline json parse_config_text(const std::string& text, const std::string& origin) {
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ConfigError(origin + ": top level must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < upto; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::string what = e.what();
    if (const auto p = what.find("parse error"); p != std::string::npos) what = what.substr(p);
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + what);
  }
}

inline json load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

/// Strict view over one JSON object: every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& target) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      target = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + short_message(e.what()));
    }
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    return Reader(j_.at(key), where(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
  }

  std::string where(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  static std::string short_message(std::string w) {
    if (const auto p = w.find("] "); p != std::string::npos) w = w.substr(p + 2);
    return w;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// Shared pieces

struct Common {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  bool gnuplot = false;
  bool seed_flag = false, jobs_flag = false;
};

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Collects output files; the manifest goes first.
class Output {
 public:
  Output(const Common& c, std::string subcommand) : c_(c), sub_(std::move(subcommand)), dir_(c.out_dir) {}

  void manifest(const json& resolved) {
    fs::create_directories(dir_);
    json m;
    m["tool"] = "dynmanip";
    m["version"] = DYNMANIP_VERSION;
    m["subcommand"] = sub_;
    m["config_path"] = c_.config_path;
    m["config"] = resolved;
    m["seed"] = c_.seed;
    m["jobs"] = c_.jobs;
    m["out_dir"] = c_.out_dir;
    m["started_utc"] = utc_now();
    write_text("manifest.json", m.dump(2) + "\n");
  }

  void table(const std::string& name, const csv::Table& t) {
    write_text(name, t.str());
    if (c_.gnuplot) {
      std::string dat = "#";
      for (const auto& h : t.header()) dat += " " + h;
      dat += "\n";
      const std::string body = t.str();
      std::size_t pos = body.find('\n') + 1;
      for (; pos < body.size(); ++pos) dat += body[pos] == ',' ? ' ' : body[pos];
      write_text(fs::path(name).replace_extension(".dat").string(), dat);
    }
  }

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream f(dir_ / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
    f << text;
  }

 private:
  const Common& c_;
  std::string sub_;
  fs::path dir_;
};

inline void read_common(Reader& r, Common& c) {
  std::uint64_t seed = c.seed;
  unsigned jobs = c.jobs;
  r.get("seed", seed);
  r.get("jobs", jobs);
  if (!c.seed_flag) c.seed = seed;
  if (!c.jobs_flag) c.jobs = jobs;
  require(c.jobs >= 1, "jobs must be >= 1");
}

inline sim::TrajectoryVariant read_trajectory(Reader r) {
  std::string type = "linear";
  r.get("type", type);
  sim::TrajectoryVariant v;
  if (type == "linear") {
    sim::Linear l;
    r.get("speed", l.speed);
    if (r.has("direction")) {
      std::vector<double> d;
      r.get("direction", d);
      require(d.size() == 2, r.where("direction") + ": expected [x, y]");
      l.direction = sim::Vec2(d[0], d[1]);
    }
    v = l;
  } else if (type == "scurve") {
    sim::SCurve s;
    r.get("speed", s.speed);
    r.get("amplitude", s.amplitude);
    r.get("wavelength", s.wavelength);
    v = s;
  } else if (type == "random") {
    sim::RandomCurve rc;
    r.get("speed", rc.speed);
    r.get("seed", rc.seed);
    r.get("smoothness", rc.smoothness);
    r.get("amplitude", rc.amplitude);
    v = rc;
  } else {
    throw ConfigError(r.where("type") + ": expected linear, scurve or random");
  }
  r.finish();
  try {
    sim::BeltTrajectory{v, sim::Vec3::Zero(), 0.0}.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
  return v;
}

inline json trajectory_json(const sim::TrajectoryVariant& v) {
  return std::visit(
      [](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, sim::Linear>)
          return {{"type", "linear"}, {"speed", x.speed}, {"direction", {x.direction.x(), x.direction.y()}}};
        else if constexpr (std::is_same_v<T, sim::SCurve>)
          return {{"type", "scurve"}, {"speed", x.speed}, {"amplitude", x.amplitude}, {"wavelength", x.wavelength}};
        else
          return {{"type", "random"}, {"speed", x.speed}, {"seed", x.seed}, {"smoothness", x.smoothness}, {"amplitude", x.amplitude}};
      },
      v);
}

inline std::vector<sim::Window> read_windows(Reader& r, const std::string& key) {
  std::vector<std::vector<double>> raw;
  r.get(key, raw);
  std::vector<sim::Window> out;
  for (const auto& w : raw) {
    require(w.size() == 2, r.where(key) + ": each window is [t_start, t_end]");
    out.push_back({w[0], w[1]});
  }
  return out;
}

inline constexpr double kDeg = std::numbers::pi / 180.0;

inline sim::WorldConfig read_world(Reader r) {
  sim::WorldConfig w;
  if (r.has("trajectory")) w.trajectory = read_trajectory(r.child("trajectory"));
  r.get("point_noise", w.point_noise);
  w.occlusions = read_windows(r, "occlusions");
  r.get("lateral_bias", w.lateral_bias);
  r.get("start_x", w.start_x);
  r.get("start_jitter", w.start_jitter);
  r.get("container_gap", w.container_gap);
  r.get("workspace_x_max", w.workspace_x_max);
  r.get("max_time", w.max_time);
  r.get("dt", w.dt);
  double rotate_deg = w.rotate_by / kDeg, yaw_deg = w.tol.yaw / kDeg;
  r.get("rotate_by_deg", rotate_deg);
  w.rotate_by = rotate_deg * kDeg;
  r.get("max_speed", w.limits.max_speed);
  r.get("max_accel", w.limits.max_accel);
  r.get("max_angular_rate", w.limits.max_angular_rate);
  r.get("kp", w.gains.kp);
  r.get("stable_tol", w.stable_tol);
  r.get("stable_hold", w.stable_hold);
  r.get("history_window", w.history_window);
  if (r.has("tolerances")) {
    Reader t = r.child("tolerances");
    t.get("grasp", w.tol.grasp);
    t.get("grasp_speed", w.tol.grasp_speed);
    t.get("container", w.tol.container);
    t.get("insert", w.tol.insert);
    t.get("yaw_deg", yaw_deg);
    t.get("lift_height", w.tol.lift_height);
    t.get("lift_slack", w.tol.lift_slack);
    t.finish();
  }
  w.tol.yaw = yaw_deg * kDeg;
  r.finish();
  try {
    w.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
  return w;
}

inline json world_json(const sim::WorldConfig& w) {
  json occ = json::array();
  for (const auto& o : w.occlusions) occ.push_back({o.t_start, o.t_end});
  return {{"trajectory", trajectory_json(w.trajectory)},
          {"point_noise", w.point_noise},
          {"occlusions", occ},
          {"lateral_bias", w.lateral_bias},
          {"start_x", w.start_x},
          {"start_jitter", w.start_jitter},
          {"container_gap", w.container_gap},
          {"workspace_x_max", w.workspace_x_max},
          {"max_time", w.max_time},
          {"dt", w.dt},
          {"rotate_by_deg", w.rotate_by / kDeg},
          {"max_speed", w.limits.max_speed},
          {"max_accel", w.limits.max_accel},
          {"max_angular_rate", w.limits.max_angular_rate},
          {"kp", w.gains.kp},
          {"stable_tol", w.stable_tol},
          {"stable_hold", w.stable_hold},
          {"history_window", w.history_window},
          {"tolerances",
           {{"grasp", w.tol.grasp},
            {"grasp_speed", w.tol.grasp_speed},
            {"container", w.tol.container},
            {"insert", w.tol.insert},
            {"yaw_deg", w.tol.yaw / kDeg},
            {"lift_height", w.tol.lift_height},
            {"lift_slack", w.tol.lift_slack}}}};
}

inline gp::GpHyperparams read_gp(Reader r) {
  gp::GpHyperparams h;
  r.get("length_scale", h.length_scale);
  r.get("signal_variance", h.signal_variance);
  r.get("noise_variance", h.noise_variance);
  r.finish();
  try {
    h.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
  return h;
}

inline json gp_json(const gp::GpHyperparams& h) {
  return {{"length_scale", h.length_scale}, {"signal_variance", h.signal_variance}, {"noise_variance", h.noise_variance}};
}

// ---------------------------------------------------------------------------
// Subcommands. Each reads its config, writes the manifest, then results.

inline int maze_sweep(Common& c, const json& cfg, std::ostream& out, std::ostream& err) {
  Reader r(cfg, "");
  read_common(r, c);
  maze::SweepGrid g;
  g.n_m_max = {1, 3, 5};
  g.eta = {0.0};
  r.get("n_m_max", g.n_m_max);
  r.get("eta", g.eta);
  r.get("demo_counts", g.demo_counts);
  r.get("seeds", g.seeds);
  r.get("max_steps", g.max_steps);
  r.get("smoothing", g.smoothing);
  std::string target = "expert";
  r.get("kl_target", target);
  r.finish();
  require(target == "expert" || target == "generating", "kl_target: expected expert or generating");
  g.kl_target = target == "expert" ? maze::KlTarget::ExpertPointMass : maze::KlTarget::GeneratingDistribution;
  require(!g.n_m_max.empty() && !g.eta.empty() && !g.demo_counts.empty(), "n_m_max, eta and demo_counts must be non-empty");
  require(g.seeds >= 1, "seeds must be >= 1");
  g.base_seed = c.seed;

  Output o(c, "maze-sweep");
  o.manifest({{"n_m_max", g.n_m_max}, {"eta", g.eta}, {"demo_counts", g.demo_counts}, {"seeds", g.seeds},
              {"max_steps", g.max_steps}, {"smoothing", g.smoothing}, {"kl_target", target}});
  const auto res = maze::run_entropy_sweep(g, maze::canonical_expert(), c.jobs);
  csv::Table raw({"n_m_max", "eta", "demo_count", "seed", "kl_nats", "match_fraction"});
  for (const auto& row : res.rows) raw.row(row.n_m_max, row.eta, row.demo_count, row.seed, row.kl_nats, row.match_fraction);
  csv::Table agg({"n_m_max", "eta", "demo_count", "kl_mean", "kl_std", "match_mean", "match_std"});
  for (const auto& a : res.aggregates) agg.row(a.n_m_max, a.eta, a.demo_count, a.kl_mean, a.kl_std, a.match_mean, a.match_std);
  o.table("maze_raw.csv", raw);
  o.table("maze_agg.csv", agg);
  for (const auto& e : res.errors)
    err << "maze-sweep: cell n_m_max=" << e.n_m_max << " eta=" << e.eta << " demo_count=" << e.demo_count << " failed: " << e.message
        << "\n";
  out << "maze-sweep: " << res.aggregates.size() << " cells, " << res.errors.size() << " failed\n";
  return res.errors.empty() ? kExitOk : kExitFailure;
}

inline int gp_demo(Common& c, const json& cfg, std::ostream& out, std::ostream&) {
  Reader r(cfg, "");
  read_common(r, c);
  sim::TrajectoryVariant traj = sim::Linear{};
  double duration = 4.0, dt = 0.05, noise = control::TrackingSimConfig{}.centroid_noise, window = 1.0;
  gp::GpHyperparams hyper;
  if (r.has("trajectory")) traj = read_trajectory(r.child("trajectory"));
  r.get("duration", duration);
  r.get("dt", dt);
  r.get("centroid_noise", noise);
  r.get("history_window", window);
  if (r.has("gp")) hyper = read_gp(r.child("gp"));
  std::vector<sim::Window> occl = read_windows(r, "occlusions");
  r.finish();
  require(duration > 0 && dt > 0, "duration and dt must be > 0");
  require(noise >= 0, "centroid_noise must be >= 0");
  require(window > 0, "history_window must be > 0");

  Output o(c, "gp-demo");
  json occ = json::array();
  for (const auto& w : occl) occ.push_back({w.t_start, w.t_end});
  o.manifest({{"trajectory", trajectory_json(traj)}, {"duration", duration}, {"dt", dt}, {"centroid_noise", noise},
              {"history_window", window}, {"gp", gp_json(hyper)}, {"occlusions", occ}});

  sim::SceneObject obj;
  obj.trajectory = {traj, sim::Vec3::Zero(), 0.0};
  obj.occlusions = occl;
  obj.validate();
  gp::ObjectStateEstimator est(hyper, window);
  Rng rng = make_rng(c.seed, {0x6770u});
  csv::Table t({"t", "x_true", "x_pred", "x_var", "vx_true", "vx_pred"});
  const auto steps = static_cast<long>(std::floor(duration / dt + 1e-9));
  for (long k = 0; k <= steps; ++k) {
    const double time = static_cast<double>(k) * dt;
    const auto pose = sim::object_pose(obj.trajectory, time);
    const sim::Vec3 truth = sim::top_center(obj, pose);
    if (!obj.occluded(time)) {
      sim::Vec3 seen = truth;
      for (int a = 0; a < 3; ++a) seen[a] += normal(rng, 0.0, noise);
      est.observe({time, seen});
    }
    if (!est.ready()) continue;
    const auto e = est.estimate(time);
    const auto samples = est.history().samples();
    const double var = gp::gp_fit(samples, hyper).predict(time).variance.x();
    t.row(time, truth.x(), e.position.x(), var, pose.velocity.x(), e.velocity.x());
  }
  o.table("gp_demo.csv", t);
  out << "gp-demo: " << t.size() << " rows\n";
  return kExitOk;
}

inline int tracking_sweep(Common& c, const json& cfg, std::ostream& out, std::ostream& err) {
  Reader r(cfg, "");
  read_common(r, c);
  control::TrackingSimConfig base;
  std::vector<double> speeds{0.2, 0.6};
  bool traces = true, limit = true;
  double horizon = control::kStableSpeedHorizon, resolution = control::kStableSpeedResolution;
  r.get("speeds", speeds);
  r.get("duration", base.duration);
  r.get("dt", base.dt);
  r.get("max_speed", base.limits.max_speed);
  r.get("max_accel", base.limits.max_accel);
  r.get("kp", base.gains.kp);
  r.get("centroid_noise", base.centroid_noise);
  r.get("history_window", base.history_window);
  r.get("tol", base.tol);
  r.get("hold", base.hold);
  r.get("traces", traces);
  r.get("max_stable_speed", limit);
  r.get("horizon", horizon);
  r.get("resolution", resolution);
  if (r.has("gp")) base.gp = read_gp(r.child("gp"));
  r.finish();
  require(!speeds.empty(), "speeds must be a non-empty list");
  require(base.duration > 0 && base.dt > 0, "duration and dt must be > 0");
  require(base.centroid_noise >= 0, "centroid_noise must be >= 0");
  require(resolution > 0 && horizon > 0, "horizon and resolution must be > 0");
  base.seed = c.seed;
  try {
    base.limits.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  Output o(c, "tracking-sweep");
  o.manifest({{"speeds", speeds}, {"duration", base.duration}, {"dt", base.dt}, {"max_speed", base.limits.max_speed},
              {"max_accel", base.limits.max_accel}, {"kp", base.gains.kp}, {"centroid_noise", base.centroid_noise},
              {"history_window", base.history_window}, {"tol", base.tol}, {"hold", base.hold}, {"traces", traces},
              {"max_stable_speed", limit}, {"horizon", horizon}, {"resolution", resolution}, {"gp", gp_json(base.gp)}});

  struct Run {
    std::optional<control::TrackingReport> report;
    std::string error;
  };
  const auto runs = parallel_map(speeds.size(), c.jobs, [&](std::size_t i) {
    Run run;
    try {
      control::TrackingSimConfig cfg_i = base;
      cfg_i.belt_speed = speeds[i];
      run.report = control::simulate_tracking(cfg_i);
    } catch (const std::exception& e) {
      run.error = e.what();
    }
    return run;
  });
  csv::Table sweep({"belt_speed", "stable", "settle_time_s", "steady_err_m"});
  int failed = 0;
  for (std::size_t i = 0; i < speeds.size(); ++i) {
    if (!runs[i].report) {
      err << "tracking-sweep: speed " << speeds[i] << " failed: " << runs[i].error << "\n";
      ++failed;
      continue;
    }
    const auto& rep = *runs[i].report;
    sweep.raw_row({csv::num(speeds[i]), csv::num(rep.stable), rep.settle_time ? csv::num(*rep.settle_time) : std::string(),
                   csv::num(rep.steady_error)});
    if (traces) {
      csv::Table tr({"t", "target_x", "target_y", "target_z", "pos_x", "pos_y", "pos_z", "err_norm"});
      for (const auto& row : rep.trace)
        tr.row(row.t, row.target.x(), row.target.y(), row.target.z(), row.position.x(), row.position.y(), row.position.z(), row.error);
      o.table("tracking_trace_" + csv::num(speeds[i]) + ".csv", tr);
    }
  }
  o.table("tracking_sweep.csv", sweep);
  if (limit) {
    const double v = control::max_stable_speed(base, horizon, resolution);
    csv::Table lim({"max_speed", "horizon_s", "resolution", "max_stable_speed"});
    lim.row(base.limits.max_speed, horizon, resolution, v);
    o.table("tracking_limit.csv", lim);
    out << "tracking-sweep: max_stable_speed " << csv::num(v) << " m/s\n";
  }
  out << "tracking-sweep: " << speeds.size() - static_cast<std::size_t>(failed) << " speeds\n";
  return failed ? kExitFailure : kExitOk;
}

inline std::vector<sim::Skill> read_skills(Reader& r) {
  std::vector<std::string> names{"pick"};
  r.get("skills", names);
  require(!names.empty(), "skills must be non-empty");
  std::vector<sim::Skill> out;
  for (const auto& n : names) {
    try {
      out.push_back(sim::parse_skill(n));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(r.where("skills") + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<std::string> skill_names(const std::vector<sim::Skill>& s) {
  std::vector<std::string> out;
  for (auto k : s) out.emplace_back(sim::skill_name(k));
  return out;
}

inline int speed_sweep(Common& c, const json& cfg, std::ostream& out, std::ostream&) {
  Reader r(cfg, "");
  read_common(r, c);
  const auto skills = read_skills(r);
  std::vector<double> speeds{0.05, 0.10, 0.25, 0.50};
  int episodes = 100;
  r.get("speeds", speeds);
  r.get("episodes", episodes);
  const sim::WorldConfig world = r.has("world") ? read_world(r.child("world")) : sim::WorldConfig{};
  r.finish();
  require(!speeds.empty(), "speeds must be a non-empty list");
  require(episodes >= 1, "episodes must be >= 1");
  for (double v : speeds) require(v >= 0, "speeds must be >= 0");

  Output o(c, "speed-sweep");
  o.manifest({{"skills", skill_names(skills)}, {"speeds", speeds}, {"episodes", episodes}, {"world", world_json(world)}});
  std::vector<sim::RateRow> rows;
  for (auto sk : skills) {
    const auto part = sim::speed_sweep(sk, speeds, episodes, c.seed, world, static_cast<int>(c.jobs));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  o.write_text("speed_sweep.csv", sim::rates_csv(rows));
  out << "speed-sweep: " << rows.size() << " rows\n";
  return kExitOk;
}

inline int motion_sweep(Common& c, const json& cfg, std::ostream& out, std::ostream&) {
  Reader r(cfg, "");
  read_common(r, c);
  const auto skills = read_skills(r);
  int episodes = 100;
  r.get("episodes", episodes);
  std::vector<sim::TrajectoryVariant> variants{sim::Linear{}, sim::SCurve{}, sim::RandomCurve{}};
  if (r.has("trajectories")) {
    const json& arr = r.raw("trajectories");
    require(arr.is_array() && !arr.empty(), "trajectories must be a non-empty array");
    variants.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) variants.push_back(read_trajectory(Reader(arr[i], "trajectories[" + std::to_string(i) + "]")));
  }
  const sim::WorldConfig world = r.has("world") ? read_world(r.child("world")) : sim::WorldConfig{};
  r.finish();
  require(episodes >= 1, "episodes must be >= 1");

  Output o(c, "motion-sweep");
  json tj = json::array();
  for (const auto& v : variants) tj.push_back(trajectory_json(v));
  o.manifest({{"skills", skill_names(skills)}, {"episodes", episodes}, {"trajectories", tj}, {"world", world_json(world)}});
  std::vector<sim::RateRow> rows;
  for (auto sk : skills) {
    const auto part = sim::trajectory_generalization(sk, variants, episodes, c.seed, world, static_cast<int>(c.jobs));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  o.write_text("motion_sweep.csv", sim::rates_csv(rows));
  out << "motion-sweep: " << rows.size() << " rows\n";
  return kExitOk;
}

inline int gmm_demo(Common& c, const json& cfg, std::ostream& out, std::ostream&) {
  Reader r(cfg, "");
  read_common(r, c);
  gmm::TwoTargetConfig t;
  r.get("separation", t.separation);
  r.get("noise", t.noise);
  r.get("episodes", t.episodes);
  r.get("components", t.components);
  r.finish();
  t.seed = c.seed;
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  Output o(c, "gmm-demo");
  o.manifest({{"separation", t.separation}, {"noise", t.noise}, {"episodes", t.episodes}, {"components", t.components}});
  const auto rep = gmm::two_target_demo(t);
  csv::Table tab({"model", "success_rate", "mean_offset_m"});
  for (const auto* m : {&rep.unimodal_outcome, &rep.mixture_outcome}) tab.row(m->model, m->success_rate, m->mean_offset);
  o.table("gmm_demo.csv", tab);
  o.write_text("gmm_mixture.json", gmm::to_json(rep.mixture).dump(2) + "\n");
  out << "gmm-demo: mixture " << csv::num(rep.mixture_outcome.success_rate) << ", unimodal "
      << csv::num(rep.unimodal_outcome.success_rate) << "\n";
  return kExitOk;
}

inline int memory_recite(Common& c, const json& cfg, std::ostream& out, std::ostream&) {
  Reader r(cfg, "");
  read_common(r, c);
  memory::ReciteConfig m;
  r.get("length", m.length);
  r.get("l_m", m.l_m);
  r.get("c", m.c);
  r.get("epochs", m.epochs);
  r.get("step_size", m.step_size);
  r.get("stop_when_perfect", m.stop_when_perfect);
  r.finish();
  m.seed = c.seed;
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  Output o(c, "memory-recite");
  o.manifest({{"length", m.length}, {"l_m", m.l_m}, {"c", m.c}, {"epochs", m.epochs}, {"step_size", m.step_size},
              {"stop_when_perfect", m.stop_when_perfect}});
  const auto res = memory::train_recite(m);
  csv::Table curve({"epoch", "recite_accuracy"});
  for (std::size_t e = 0; e < res.accuracy.size(); ++e) curve.row(e, res.accuracy[e]);
  o.table("recite_curve.csv", curve);
  json p = memory::to_json(res.params);
  p["digits"] = res.digits;
  o.write_text("memory_params.json", p.dump() + "\n");
  out << "memory-recite: final accuracy " << csv::num(res.final_accuracy());
  if (res.perfect_epoch) out << " (perfect at epoch " << *res.perfect_epoch << ")";
  out << "\n";
  return kExitOk;
}

inline int episode(Common& c, const json& cfg, std::ostream& out, std::ostream&) {
  Reader r(cfg, "");
  read_common(r, c);
  std::string skill = "pick";
  bool trace = true;
  r.get("skill", skill);
  r.get("trace", trace);
  const sim::WorldConfig world = r.has("world") ? read_world(r.child("world")) : sim::WorldConfig{};
  r.finish();
  sim::Skill sk;
  try {
    sk = sim::parse_skill(skill);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("skill: ") + e.what());
  }

  Output o(c, "episode");
  o.manifest({{"skill", skill}, {"trace", trace}, {"world", world_json(world)}});
  const auto res = sim::run_episode(sk, world, c.seed);
  csv::Table sum({"skill", "variant", "speed", "success", "failure_reason", "first_stable_s", "grasp_error_m", "placement_error",
                  "duration_s"});
  sum.raw_row({std::string(sim::skill_name(sk)), std::string(sim::variant_name(world.trajectory)),
               csv::num(sim::nominal_speed(world.trajectory)), csv::num(res.success), std::string(sim::failure_name(res.failure_reason)),
               res.first_stable ? csv::num(*res.first_stable) : std::string(), csv::num(res.grasp_error), csv::num(res.placement_error),
               csv::num(res.duration)});
  o.table("episode.csv", sum);
  if (trace) o.write_text("episode_trace.csv", sim::trace_csv(res));
  out << "episode: " << (res.success ? "success" : "failure (" + std::string(sim::failure_name(res.failure_reason)) + ")") << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

using Handler = int (*)(Common&, const json&, std::ostream&, std::ostream&);

struct SubcommandSpec {
  const char* name;
  const char* help;
  Handler run;
};

inline const std::vector<SubcommandSpec>& subcommands() {
  static const std::vector<SubcommandSpec> s{
      {"maze-sweep", "entropy sweep over maze noise knobs and demo counts", maze_sweep},
      {"gp-demo", "GP position/velocity estimates along a belt trajectory", gp_demo},
      {"tracking-sweep", "closed-loop tracking per belt speed and the max stable speed", tracking_sweep},
      {"speed-sweep", "skill success rate per belt speed", speed_sweep},
      {"motion-sweep", "skill success rate per trajectory variant", motion_sweep},
      {"gmm-demo", "two-target mixture vs mean-regression contrast", gmm_demo},
      {"memory-recite", "train the memory cell to recite a digit sequence", memory_recite},
      {"episode", "run a single conveyor episode with a trace", episode},
  };
  return s;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"dynmanip experiment runner", "dynmanip"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DYNMANIP_VERSION);
  Common common;
  const SubcommandSpec* chosen = nullptr;
  for (const auto& spec : subcommands()) {
    CLI::App* sub = app.add_subcommand(spec.name, spec.help);
    sub->add_option("--config", common.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", common.seed, "base seed (overrides the config file)");
    sub->add_option("--jobs", common.jobs, "worker threads (overrides the config file)")->check(CLI::PositiveNumber);
    sub->add_flag("--gnuplot", common.gnuplot, "also write whitespace-separated .dat files");
    sub->callback([&, s = &spec] { chosen = s; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, eo;
    const int code = app.exit(e, o, eo);
    out << o.str();
    err << eo.str();
    return code == 0 ? kExitOk : kExitUsage;
  }
  for (const auto* sub : app.get_subcommands()) {
    common.seed_flag = sub->count("--seed") > 0;
    common.jobs_flag = sub->count("--jobs") > 0;
  }
  try {
    const json cfg = common.config_path.empty() ? json::object() : load_config(common.config_path);
    return chosen->run(common, cfg, out, err);
  } catch (const ConfigError& e) {
    err << chosen->name << ": config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << chosen->name << ": " << e.what() << "\n";
    return kExitFailure;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"dynmanip"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace dynmanip::cli
