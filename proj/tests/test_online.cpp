#include "support.hpp"

#include <deepmpc/online.hpp>

#include <gtest/gtest.h>

#include <limits>

using namespace deepmpc;
using namespace testsupport;

namespace {

struct Setup
{
  Plant plant;
  SurrogateModel model;
  ReferenceTrajectory ref;
  HorizonSpec spec;
};

Setup vdp_setup(double duration)
{
  PlantConfig pc;
  pc.kind = PlantKind::VanDerPol;
  Setup s{Plant(pc), init_model(tiny_dims(2, 1), Normalization::identity(2, 1), 5),
          piecewise_reference({{{0.8}, duration / 2}, {{-0.4}, duration / 2}}, {0}, 0.1), HorizonSpec{}};
  s.spec.N = s.model.dims.N;
  return s;
}

OnlineSpec short_intervals(double interval_s, std::size_t epochs)
{
  OnlineSpec o;
  o.interval_s = interval_s;
  o.update.epochs = epochs;
  o.update.batch_size = 16;
  o.seed = 3;
  return o;
}

}  // namespace

TEST(Online, NoUpdatesReproducesClosedLoop)
{
  const auto s = vdp_setup(10.0);
  const auto on = run_online(s.plant, s.model, s.ref, s.spec, short_intervals(2.5, 0), s.plant.default_initial_state(), 10.0);
  const auto cl = run_closed_loop(s.plant, s.model, s.ref, s.spec, s.plant.default_initial_state(), 10.0);
  EXPECT_EQ(on.trajectory.z(), cl.trajectory.z());
  EXPECT_EQ(on.trajectory.u(), cl.trajectory.u());
  EXPECT_EQ(on.metrics.e_mean, cl.metrics.e_mean);
  ASSERT_EQ(on.intervals.size(), 4u);
  for (const auto & r : on.intervals) {
    EXPECT_FALSE(r.updated);
    EXPECT_TRUE(std::isnan(r.train_loss_final));
    EXPECT_EQ(r.model_hash, model_hash(s.model));
  }
}

TEST(Online, SymmetrizedIntervalDoublesTrainingPoints)
{
  const auto s = vdp_setup(50.0);
  const auto on = run_online(s.plant, s.model, s.ref, s.spec, short_intervals(25.0, 1), s.plant.default_initial_state(), 50.0);
  ASSERT_EQ(on.intervals.size(), 2u);
  EXPECT_EQ(on.intervals[0].training_points, 500u);
  EXPECT_TRUE(on.intervals[0].updated);
  EXPECT_TRUE(std::isfinite(on.intervals[0].train_loss_final));
  // No update after the final interval.
  EXPECT_FALSE(on.intervals[1].updated);
  EXPECT_EQ(on.intervals[1].model_hash, model_hash(on.model));
}

TEST(Online, BufferPolicies)
{
  const auto s = vdp_setup(10.0);
  auto o = short_intervals(2.5, 1);
  o.symmetrize = false;
  const auto a = run_online(s.plant, s.model, s.ref, s.spec, o, s.plant.default_initial_state(), 10.0);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(a.intervals[k].training_points, 25u);
  o.buffer = BufferPolicy::SlidingAggregate;
  const auto b = run_online(s.plant, s.model, s.ref, s.spec, o, s.plant.default_initial_state(), 10.0);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(b.intervals[k].training_points, 25u * (k + 1));
}

TEST(Online, ModelIsFrozenWithinIntervals)
{
  const auto s = vdp_setup(10.0);
  std::vector<std::string> hashes;
  OnlineOptions opt;
  opt.on_model = [&](std::size_t i, const std::string & h) {
    EXPECT_EQ(i, hashes.size());
    hashes.push_back(h);
  };
  const auto on = run_online(s.plant, s.model, s.ref, s.spec, short_intervals(2.5, 2), s.plant.default_initial_state(),
                             10.0, opt);
  ASSERT_EQ(hashes.size(), 100u);
  for (const auto & r : on.intervals)
    for (std::size_t i = r.begin; i < r.begin + r.count; ++i) EXPECT_EQ(hashes[i], r.model_hash);
  for (std::size_t k = 0; k + 1 < on.intervals.size(); ++k)
    EXPECT_NE(on.intervals[k].model_hash, on.intervals[k + 1].model_hash);
}

TEST(Online, IntervalMetricsMatchDirectSums)
{
  const auto s = vdp_setup(10.0);
  const auto on = run_online(s.plant, s.model, s.ref, s.spec, short_intervals(2.5, 1), s.plant.default_initial_state(), 10.0);
  const auto & z = on.trajectory.z();
  const auto & u = on.trajectory.u();
  for (const auto & r : on.intervals) {
    double sum = 0.0, worst = 0.0, usq = 0.0;
    for (std::size_t i = r.begin; i < r.begin + r.count; ++i) {
      const double e = std::pow(z(static_cast<Eigen::Index>(i), 0) - s.ref.at(i)(0), 2);
      sum += e;
      worst = std::max(worst, e);
      usq += u.row(static_cast<Eigen::Index>(i)).squaredNorm();
    }
    const double T = 0.1 * static_cast<double>(r.count - 1);
    EXPECT_NEAR(r.metrics.e_mean, 0.1 / T * sum, 1e-12);
    EXPECT_NEAR(r.metrics.e_max, worst, 1e-12);
    EXPECT_NEAR(r.metrics.control_cost, std::sqrt(usq), 1e-12);
  }
}

TEST(Online, PartialTrailingInterval)
{
  const auto s = vdp_setup(6.0);
  const auto on = run_online(s.plant, s.model, s.ref, s.spec, short_intervals(2.5, 0), s.plant.default_initial_state(), 6.0);
  ASSERT_EQ(on.intervals.size(), 3u);
  EXPECT_EQ(on.intervals[2].begin, 50u);
  EXPECT_EQ(on.intervals[2].count, 10u);
}

TEST(Online, DivergingUpdateKeepsPreviousModel)
{
  const auto s = vdp_setup(10.0);
  auto o = short_intervals(2.5, 1);
  o.update.lr = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> failed;
  OnlineOptions opt;
  opt.on_divergence = [&](std::size_t k, const std::string & msg) {
    failed.push_back(k);
    EXPECT_NE(msg.find("diverged"), std::string::npos);
  };
  const auto on = run_online(s.plant, s.model, s.ref, s.spec, o, s.plant.default_initial_state(), 10.0, opt);
  EXPECT_EQ(failed, (std::vector<std::size_t>{0, 1, 2}));
  for (const auto & r : on.intervals) EXPECT_EQ(r.model_hash, model_hash(s.model));
  EXPECT_TRUE(on.trajectory.z().allFinite());
  EXPECT_TRUE(on.intervals[0].diverged);
}

TEST(Online, Validation)
{
  const auto s = vdp_setup(10.0);
  auto o = short_intervals(2.5, 21);
  EXPECT_THROW(run_online(s.plant, s.model, s.ref, s.spec, o, s.plant.default_initial_state(), 10.0), ConfigError);
  o = short_intervals(2.55, 1);
  EXPECT_THROW(run_online(s.plant, s.model, s.ref, s.spec, o, s.plant.default_initial_state(), 10.0), ConfigError);
  o = short_intervals(6.0, 1);
  EXPECT_THROW(run_online(s.plant, s.model, s.ref, s.spec, o, s.plant.default_initial_state(), 10.0), ConfigError);
}

TEST(Online, IntervalCsv)
{
  IntervalReport a, b;
  b.index = 1;
  b.train_loss_final = 0.25;
  const auto csv = interval_csv({a, b});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "interval,e_mean,e_max,control_cost,train_loss_final");
  EXPECT_NE(csv.find(",nan\n"), std::string::npos);
  EXPECT_NE(csv.find(",0.25\n"), std::string::npos);
}
