#include "dynmanip/experiment_cli.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

namespace dynmanip::cli {
namespace {

const fs::path kConfigs = fs::path(DYNMANIP_SOURCE_DIR) / "configs";

struct CliRun {
  int code;
  std::string out, err;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("dynmanip_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliRun invoke(std::vector<std::string> args) {
    std::ostringstream o, e;
    const int code = cli::run(args, o, e);
    return {code, o.str(), e.str()};
  }

  std::string write_config(const std::string& name, const std::string& text) {
    const auto p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }

  std::string out(const std::string& sub = "o") const { return (dir_ / sub).string(); }

  static std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

TEST_F(CliTest, MazeSweepDefaultWritesParsableCsvs) {
  const auto r = invoke({"maze-sweep", "--out", out()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto raw = csv::read(fs::path(out()) / "maze_raw.csv");
  const auto agg = csv::read(fs::path(out()) / "maze_agg.csv");
  EXPECT_EQ(raw.header, (std::vector<std::string>{"n_m_max", "eta", "demo_count", "seed", "kl_nats", "match_fraction"}));
  EXPECT_EQ(agg.header, (std::vector<std::string>{"n_m_max", "eta", "demo_count", "kl_mean", "kl_std", "match_mean", "match_std"}));
  EXPECT_EQ(raw.rows.size(), 3u * 5u * 5u);
  EXPECT_EQ(agg.rows.size(), 15u);
}

TEST_F(CliTest, ManifestRecordsResolvedRun) {
  const auto r = invoke({"gmm-demo", "--out", out(), "--seed", "42", "--jobs", "2"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const json m = json::parse(slurp(fs::path(out()) / "manifest.json"));
  EXPECT_EQ(m["tool"], "dynmanip");
  EXPECT_EQ(m["subcommand"], "gmm-demo");
  EXPECT_EQ(m["seed"], 42u);
  EXPECT_EQ(m["jobs"], 2u);
  EXPECT_EQ(m["config"]["episodes"], 200);
  EXPECT_TRUE(m.contains("version"));
  EXPECT_TRUE(m.contains("started_utc"));
  EXPECT_EQ(m["out_dir"], out());
}

TEST_F(CliTest, FlagsOverrideConfigOverrideDefaults) {
  const auto cfg = write_config("g.json", R"({"seed": 5, "episodes": 50})");
  ASSERT_EQ(invoke({"gmm-demo", "--config", cfg, "--out", out("a")}).code, kExitOk);
  ASSERT_EQ(invoke({"gmm-demo", "--config", cfg, "--out", out("b"), "--seed", "9"}).code, kExitOk);
  const json a = json::parse(slurp(fs::path(out("a")) / "manifest.json"));
  const json b = json::parse(slurp(fs::path(out("b")) / "manifest.json"));
  EXPECT_EQ(a["seed"], 5u);
  EXPECT_EQ(b["seed"], 9u);
  EXPECT_EQ(a["config"]["episodes"], 50);
  EXPECT_EQ(a["config"]["separation"], 0.2);
}

TEST_F(CliTest, MalformedConfigReportsLineAndColumn) {
  const auto cfg = write_config("bad.json", "{\n  \"seed\": 1,\n  \"eta\": [0.0,, 0.3]\n}\n");
  const auto r = invoke({"maze-sweep", "--config", cfg, "--out", out()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("bad.json:3:"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(fs::path(out()) / "manifest.json"));
}

TEST_F(CliTest, UnknownKeyNamesItsPath) {
  const auto cfg = write_config("k.json", R"({"world": {"tolerances": {"grasp": 0.01, "grip": 1}}})");
  const auto r = invoke({"episode", "--config", cfg, "--out", out()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("world.tolerances.grip: unknown key"), std::string::npos) << r.err;
}

TEST_F(CliTest, WrongTypeNamesItsPath) {
  const auto cfg = write_config("t.json", R"({"world": {"point_noise": "small"}})");
  const auto r = invoke({"speed-sweep", "--config", cfg, "--out", out()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("world.point_noise"), std::string::npos) << r.err;
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(invoke({}).code, kExitUsage);
  EXPECT_EQ(invoke({"no-such-command"}).code, kExitUsage);
  EXPECT_EQ(invoke({"episode", "--jobs", "0"}).code, kExitUsage);
  EXPECT_EQ(invoke({"episode", "--config", (dir_ / "missing.json").string()}).code, kExitUsage);
  const auto empty = write_config("e.json", R"({"speeds": []})");
  const auto r = invoke({"tracking-sweep", "--config", empty, "--out", out()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("speeds"), std::string::npos);
  EXPECT_EQ(invoke({"episode", "--config", write_config("s.json", R"({"skill": "juggle"})"), "--out", out()}).code, kExitUsage);
  EXPECT_EQ(invoke({"episode", "--help"}).code, kExitOk);
}

TEST_F(CliTest, PartialFailureListsCellsAndReturnsOne) {
  const auto cfg = write_config("p.json", R"({"n_m_max": [1], "eta": [0.0, 1.0], "demo_counts": [10], "seeds": 2})");
  const auto r = invoke({"maze-sweep", "--config", cfg, "--out", out()});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.err.find("eta=1 demo_count=10 failed"), std::string::npos) << r.err;
  EXPECT_EQ(csv::read(fs::path(out()) / "maze_agg.csv").rows.size(), 1u);
}

TEST_F(CliTest, ArgmaxPresetReachesPerfectMatch) {
  const auto r = invoke({"maze-sweep", "--config", (kConfigs / "maze-sweep_argmax.json").string(), "--out", out()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto agg = csv::read(fs::path(out()) / "maze_agg.csv");
  EXPECT_EQ(agg.rows.back()[agg.column("demo_count")], "1000");
  EXPECT_EQ(agg.rows.back()[agg.column("match_mean")], "1");
}

TEST_F(CliTest, TrackingPresetBracketsStability) {
  const auto r = invoke({"tracking-sweep", "--config", (kConfigs / "tracking-sweep.json").string(), "--out", out()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto sweep = csv::read(fs::path(out()) / "tracking_sweep.csv");
  ASSERT_EQ(sweep.rows.size(), 2u);
  EXPECT_EQ(sweep.rows[0][sweep.column("stable")], "true");
  EXPECT_EQ(sweep.rows[1][sweep.column("stable")], "false");
  const auto lim = csv::read(fs::path(out()) / "tracking_limit.csv");
  const double v = std::stod(lim.rows[0][lim.column("max_stable_speed")]);
  EXPECT_GE(v, 0.24);
  EXPECT_LE(v, 0.30);
  const auto trace = csv::read(fs::path(out()) / "tracking_trace_0.2.csv");
  EXPECT_EQ(trace.header.size(), 8u);
  EXPECT_EQ(trace.rows.size(), 201u);
}

TEST_F(CliTest, SpeedPresetFailsAtHalfMetrePerSecond) {
  const auto r = invoke({"speed-sweep", "--config", (kConfigs / "speed-sweep.json").string(), "--out", out()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto t = csv::read(fs::path(out()) / "speed_sweep.csv");
  EXPECT_EQ(t.rows.back()[t.column("speed")], "0.5");
  EXPECT_EQ(t.rows.back()[t.column("rate")], "0");
}

TEST_F(CliTest, GmmAndMemoryPresets) {
  ASSERT_EQ(invoke({"gmm-demo", "--config", (kConfigs / "gmm-demo.json").string(), "--out", out("g")}).code, kExitOk);
  const auto g = csv::read(fs::path(out("g")) / "gmm_demo.csv");
  EXPECT_LE(std::stod(g.rows[0][g.column("success_rate")]), 0.05);
  EXPECT_GE(std::stod(g.rows[1][g.column("success_rate")]), 0.95);
  const auto mix = gmm::mixture_from_json(json::parse(slurp(fs::path(out("g")) / "gmm_mixture.json")));
  EXPECT_EQ(mix.size(), 2u);

  ASSERT_EQ(invoke({"memory-recite", "--config", (kConfigs / "memory-recite.json").string(), "--out", out("m")}).code, kExitOk);
  const auto curve = csv::read(fs::path(out("m")) / "recite_curve.csv");
  EXPECT_EQ(curve.rows.back()[curve.column("recite_accuracy")], "1");
  const json p = json::parse(slurp(fs::path(out("m")) / "memory_params.json"));
  const auto params = memory::params_from_json(p);
  EXPECT_EQ(memory::recite_accuracy(params, p["digits"].get<std::vector<int>>()), 1.0);
}

TEST_F(CliTest, EpisodeWritesSummaryAndTrace) {
  const auto r = invoke({"episode", "--config", (kConfigs / "episode.json").string(), "--out", out()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto s = csv::read(fs::path(out()) / "episode.csv");
  ASSERT_EQ(s.rows.size(), 1u);
  EXPECT_EQ(s.rows[0][s.column("skill")], "put");
  const auto t = csv::read(fs::path(out()) / "episode_trace.csv");
  EXPECT_GT(t.rows.size(), 10u);
}

TEST_F(CliTest, GnuplotVariantMatchesCsv) {
  ASSERT_EQ(invoke({"gp-demo", "--out", out(), "--gnuplot"}).code, kExitOk);
  const auto c = csv::read(fs::path(out()) / "gp_demo.csv");
  std::ifstream dat(fs::path(out()) / "gp_demo.dat");
  std::string line;
  std::getline(dat, line);
  EXPECT_EQ(line, "# t x_true x_pred x_var vx_true vx_pred");
  std::size_t n = 0;
  while (std::getline(dat, line)) {
    std::istringstream ss(line);
    std::string cell;
    for (std::size_t k = 0; k < c.header.size(); ++k) {
      ss >> cell;
      EXPECT_EQ(cell, c.rows[n][k]);
    }
    ++n;
  }
  EXPECT_EQ(n, c.rows.size());
}

TEST_F(CliTest, RerunsAndJobCountsGiveIdenticalBytes) {
  const auto cfg = write_config("s.json", R"({"speeds": [0.05, 0.25], "episodes": 6})");
  ASSERT_EQ(invoke({"speed-sweep", "--config", cfg, "--out", out("a")}).code, kExitOk);
  ASSERT_EQ(invoke({"speed-sweep", "--config", cfg, "--out", out("b")}).code, kExitOk);
  ASSERT_EQ(invoke({"speed-sweep", "--config", cfg, "--out", out("c"), "--jobs", "3"}).code, kExitOk);
  const auto a = slurp(fs::path(out("a")) / "speed_sweep.csv");
  EXPECT_EQ(a, slurp(fs::path(out("b")) / "speed_sweep.csv"));
  EXPECT_EQ(a, slurp(fs::path(out("c")) / "speed_sweep.csv"));
}

TEST(ParseConfigText, LineColumnOfSyntaxError) {
  try {
    parse_config_text("{\n  \"a\": 1\n  \"b\": 2\n}", "x.json");
    FAIL();
  } catch (const ConfigError& e) {
    // The column is that of the end of the offending token, as in the parser's own message.
    EXPECT_EQ(std::string(e.what()).rfind("x.json:3:5: parse error at line 3, column 5", 0), 0u) << e.what();
  }
  EXPECT_THROW(parse_config_text("[1, 2]", "x.json"), ConfigError);
}

}  // namespace
}  // namespace dynmanip::cli
