#include <deepmpc/cli.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

using namespace deepmpc;
namespace fs = std::filesystem;

namespace {

const char * minimal_config = R"(seed = 3
[plant]
kind = VanDerPol
[reference]
segments = 1@20; 0@20; -1@20
mask = 0
)";

/// Small enough for the suite: short data, few epochs, short runs.
std::string fast_config(const std::string & out)
{
  return "seed = 11\noutput_dir = " + out + R"(
[plant]
kind = VanDerPol
[excitation]
duration_s = 60
[model]
M = 3
N = 3
d = 1
h_dim = 6
hidden = 12
control_width = 4
[train.single]
epochs = 2
batch_size = 32
[train.multi]
epochs = 2
batch_size = 32
[horizon]
N = 3
max_iters = 20
[reference]
segments = 0.8@5; -0.4@5
mask = 0
[control]
duration_s = 10
warmup_s = 2
[sweep]
seeds = 5
fractions = 0.2, 0.5, 1.0
threads = 1
)";
}

struct TempDir
{
  fs::path path;
  TempDir()
  {
    static int counter = 0;
    path = fs::temp_directory_path()
         / ("deepmpc_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string & name, const std::string & content) const
  {
    const auto p = path / name;
    std::ofstream(p) << content;
    return p.string();
  }
  std::string str(const std::string & name = "") const { return (path / name).string(); }
};

std::string slurp(const std::string & path)
{
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run(std::vector<std::string> args, std::string * out = nullptr, std::string * err = nullptr)
{
  args.insert(args.begin(), "deepmpc");
  std::ostringstream o, e;
  const int code = run_command(args, o, e);
  if (out) *out = o.str();
  if (err) *err = e.str();
  return code;
}

std::string config_error(const std::string & text)
{
  try {
    parse_config_text(text);
  } catch (const ConfigError & e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, MinimalIsValidAndResolved)
{
  const auto c = parse_config_text(minimal_config);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.plant.kind, PlantKind::VanDerPol);
  EXPECT_EQ(c.model.p, 2);
  EXPECT_EQ(c.model.m, 1);
  EXPECT_EQ(c.reference.size(), 3u);
  EXPECT_EQ(c.reference_trajectory().size(), 600u);
  EXPECT_EQ(c.horizon.lower.size(), 1);
  ASSERT_TRUE(c.online.symmetry.has_value());
}

TEST(Config, BoundsBroadcastToInputCount)
{
  const auto c = parse_config_text(R"([plant]
kind = MirrorOscillator
[excitation]
lower = -1
upper = 1
[reference]
segments = 0.5,-0.5@10
mask = 0, 1
)");
  EXPECT_EQ(c.excitation.lower, Vector::Constant(2, -1.0));
  EXPECT_EQ(c.horizon.upper, Vector::Constant(2, 2.0));
  EXPECT_EQ(c.model.p, 6);
}

TEST(Config, DtMismatchIsOneConsolidatedError)
{
  const auto msg = config_error(std::string(minimal_config) + "[horizon]\ndt = 0.2\n[excitation]\ndt = 0.05\n");
  ASSERT_FALSE(msg.empty());
  EXPECT_NE(msg.find("dt mismatch"), std::string::npos);
  EXPECT_NE(msg.find("plant.dt = 0.1"), std::string::npos);
  EXPECT_NE(msg.find("excitation.dt = 0.05"), std::string::npos);
  EXPECT_NE(msg.find("horizon.dt = 0.2"), std::string::npos);
  std::size_t count = 0;
  for (std::size_t pos = 0; (pos = msg.find("dt mismatch", pos)) != std::string::npos; ++pos) ++count;
  EXPECT_EQ(count, 1u);
}

TEST(Config, AllProblemsReportedTogether)
{
  const auto msg = config_error(R"([plant]
kind = VanDerPol
[data]
holdout = 1.5
[horizon]
N = 7
[reference]
segments = 1,2@10
mask = 0
)");
  EXPECT_NE(msg.find("data.holdout"), std::string::npos);
  EXPECT_NE(msg.find("horizon.N = 7"), std::string::npos);
  EXPECT_NE(msg.find("each segment needs 1 values"), std::string::npos);
}

TEST(Config, SyntaxErrorsCarryLineNumbers)
{
  EXPECT_NE(config_error("seed = 1\n[plant]\nkindd = Linear\n").find("config line 3: unknown key 'kindd'"),
            std::string::npos);
  EXPECT_NE(config_error("# comment\n[nowhere]\n").find("config line 2: unknown section [nowhere]"), std::string::npos);
  EXPECT_NE(config_error("seed = 1\nseed = 2\n").find("config line 2: duplicate key"), std::string::npos);
  EXPECT_NE(config_error("[plant]\ndt = abc\n").find("config line 2"), std::string::npos);
  EXPECT_NE(config_error("[plant\n").find("config line 1: unterminated"), std::string::npos);
}

TEST(Config, ColonSeparatorAndComments)
{
  const auto c = parse_config_text("seed: 9   # master seed\n[plant]\nkind: Linear\n[reference]\nsegments: 1@5\n");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.plant.kind, PlantKind::Linear);
}

TEST(Config, SerializeParseRoundTrip)
{
  const std::vector<std::string> texts = {minimal_config, fast_config("/tmp/x"),
                                          std::string(minimal_config) + "[plant.parameters]\nmu = 1.5\n"};
  for (const auto & t : texts) {
    const auto a = parse_config_text(t);
    const auto b = parse_config_text(serialize_config(a));
    EXPECT_TRUE(a == b);
    EXPECT_EQ(serialize_config(b), serialize_config(a));
  }
  EXPECT_EQ(parse_config_text(std::string(minimal_config) + "[plant.parameters]\nmu = 1.5\n").plant.parameters.at("mu"),
            1.5);
}

TEST(Cli, UnknownFlagPrintsUsage)
{
  std::string out, err;
  EXPECT_EQ(run({"control", "--frobnicate"}, &out, &err), 2);
  EXPECT_NE((out + err).find("Usage"), std::string::npos);
  EXPECT_EQ(run({}, &out, &err), 2);
}

TEST(Cli, VersionAndMissingConfig)
{
  std::string out, err;
  EXPECT_EQ(run({"--version"}, &out, &err), 0);
  EXPECT_NE(out.find(version), std::string::npos);
  EXPECT_EQ(run({"train"}, &out, &err), 2);
  EXPECT_NE(err.find("--config"), std::string::npos);
  EXPECT_EQ(run({"--config", "/nonexistent/cfg.ini", "train"}, &out, &err), 3);
}

TEST(Cli, InvalidConfigExitsWithConfigCode)
{
  TempDir t;
  const auto cfg = t.file("bad.ini", std::string(minimal_config) + "[horizon]\ndt = 0.2\n");
  std::string err;
  EXPECT_EQ(run({"--config", cfg, "control"}, nullptr, &err), 2);
  EXPECT_NE(err.find("dt mismatch"), std::string::npos);
}

TEST(Cli, MetricsOfPerfectTrajectory)
{
  TempDir t;
  const auto ref = piecewise_reference({{{0.7}, 10.0}}, {0}, 0.1);
  const TimeSeries s(0.1, 0.0, Matrix::Constant(100, 2, 0.7), Matrix::Zero(100, 1));
  const auto path = t.file("traj.csv", to_csv(s, &ref));
  std::string out;
  EXPECT_EQ(run({"metrics", "--trajectory", path}, &out), 0);
  const auto m = MetricsReport::from_text(out);
  EXPECT_EQ(m.e_mean, 0.0);
  EXPECT_EQ(m.e_max, 0.0);
  EXPECT_EQ(run({"metrics", "--trajectory", t.file("bad.csv", "t,z_1\n0,x\n")}), 3);
}

TEST(Cli, GenerateTrainPredictControl)
{
  TempDir t;
  const auto cfg = t.file("fast.ini", fast_config(t.str("run")));
  ASSERT_EQ(run({"--quiet", "--config", cfg, "generate-data"}), 0);
  EXPECT_TRUE(fs::exists(t.str("run/episode_000.csv")));
  EXPECT_TRUE(fs::exists(t.str("run/episode_000.csv.meta")));
  ASSERT_EQ(run({"--quiet", "--config", cfg, "train", "--data", t.str("run")}), 0);
  ASSERT_TRUE(fs::exists(t.str("run/model.ckpt")));
  EXPECT_NE(slurp(t.str("run/loss_history.csv")).find("single"), std::string::npos);

  ASSERT_EQ(run({"--quiet", "--config", cfg, "--out", t.str("pred"), "predict", "--model", t.str("run/model.ckpt"),
                 "--episode", t.str("run/episode_000.csv")}),
            0);
  const auto pred = slurp(t.str("pred/predictions.csv"));
  EXPECT_EQ(pred.substr(0, pred.find('\n')).find("t,step,t_target"), 0u);

  ASSERT_EQ(run({"--quiet", "--config", cfg, "--out", t.str("ctl"), "control", "--model", t.str("run/model.ckpt")}), 0);
  const auto traj = from_csv(slurp(t.str("ctl/closed_loop.csv")));
  EXPECT_EQ(traj.series.size(), 100u);
  EXPECT_EQ(traj.ref.cols(), 1);
  EXPECT_LE(traj.series.u().cwiseAbs().maxCoeff(), 2.0);

  const auto manifest = slurp(t.str("ctl/manifest.txt"));
  EXPECT_EQ(manifest.rfind("deepmpc-manifest 1\n", 0), 0u);
  EXPECT_NE(manifest.find("command: control"), std::string::npos);
  EXPECT_NE(manifest.find("seed: 11"), std::string::npos);
  EXPECT_NE(manifest.find("artifact closed_loop.csv: "), std::string::npos);
  EXPECT_NE(manifest.find("solver violations: 0"), std::string::npos);
  EXPECT_NE(manifest.find("--- config (as given)\n" + fast_config(t.str("run"))), std::string::npos);
  const auto resolved = manifest.substr(manifest.find("--- config (resolved)\n") + 22);
  auto given = parse_config(cfg);
  given.output_dir = t.str("ctl");
  EXPECT_TRUE(parse_config_text(resolved) == given);

  // Metrics recomputed from the written trajectory agree with metrics.txt.
  std::string out;
  ASSERT_EQ(run({"--config", cfg, "metrics", "--trajectory", t.str("ctl/closed_loop.csv")}, &out), 0);
  EXPECT_EQ(MetricsReport::from_text(out).e_mean, MetricsReport::from_text(slurp(t.str("ctl/metrics.txt"))).e_mean);
}

TEST(Cli, ControlIsDeterministic)
{
  TempDir t;
  const auto cfg = t.file("fast.ini", fast_config(t.str("unused")));
  ASSERT_EQ(run({"--quiet", "--config", cfg, "--out", t.str("a"), "control"}), 0);
  ASSERT_EQ(run({"--quiet", "--config", cfg, "--out", t.str("b"), "control"}), 0);
  EXPECT_EQ(slurp(t.str("a/closed_loop.csv")), slurp(t.str("b/closed_loop.csv")));
  EXPECT_EQ(slurp(t.str("a/model.ckpt")), slurp(t.str("b/model.ckpt")));
  ASSERT_EQ(run({"--quiet", "--config", cfg, "--seed", "12", "--out", t.str("c"), "control"}), 0);
  EXPECT_NE(slurp(t.str("a/model.ckpt")), slurp(t.str("c/model.ckpt")));
}

TEST(Cli, SweepRowsAndAggregates)
{
  TempDir t;
  const auto cfg = t.file("fast.ini", fast_config(t.str("sweep")));
  ASSERT_EQ(run({"--quiet", "--config", cfg, "sweep"}), 0);
  std::istringstream is(slurp(t.str("sweep/sweep.csv")));
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "row,seed,fraction,e_mean,e_max,control_cost,val_rmse,e_mean_std,e_max_std,control_cost_std");
  std::size_t runs = 0, means = 0;
  while (std::getline(is, line)) {
    if (line.rfind("run,", 0) == 0) ++runs;
    if (line.rfind("mean,", 0) == 0) ++means;
  }
  EXPECT_EQ(runs, 15u);
  EXPECT_EQ(means, 3u);
}

TEST(Sweep, AggregatesMatchRowsAndThreadsDoNotMatter)
{
  auto c = parse_config_text(fast_config("/tmp/unused"));
  c.sweep_seeds = 3;
  c.sweep_fractions = {0.5, 1.0};
  const auto a = run_sweep(c, 1);
  const auto b = run_sweep(c, 3);
  ASSERT_EQ(a.rows.size(), 6u);
  EXPECT_EQ(sweep_csv(a), sweep_csv(b));
  for (std::size_t f = 0; f < 2; ++f) {
    std::vector<double> v;
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(a.rows[k * 2 + f].seed, c.seed + k);
      EXPECT_EQ(a.rows[k * 2 + f].fraction, c.sweep_fractions[f]);
      v.push_back(a.rows[k * 2 + f].metrics.e_mean);
    }
    const double m = (v[0] + v[1] + v[2]) / 3.0;
    const double sd = std::sqrt(((v[0] - m) * (v[0] - m) + (v[1] - m) * (v[1] - m) + (v[2] - m) * (v[2] - m)) / 2.0);
    EXPECT_NEAR(a.aggregates[f].e_mean, m, 1e-15 + 1e-12 * m);
    EXPECT_NEAR(a.aggregates[f].e_mean_std, sd, 1e-15 + 1e-12 * sd);
  }
}

TEST(Config, ShippedConfigsAreValid)
{
  std::size_t n = 0;
  for (const auto & e : fs::directory_iterator(DEEPMPC_CONFIG_DIR)) {
    if (e.path().extension() != ".ini") continue;
    SCOPED_TRACE(e.path().string());
    EXPECT_NO_THROW(parse_config(e.path().string()));
    ++n;
  }
  EXPECT_GE(n, 1u);
}
