#include <deepmpc/datagen.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace deepmpc;

namespace {

Plant plant_of(PlantKind k, double dt_plant = 0.01)
{
  PlantConfig c;
  c.kind = k;
  c.dt_plant = dt_plant;
  return Plant(c);
}

ControlVector vec(std::initializer_list<double> v)
{
  ControlVector u(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) u(i++) = x;
  return u;
}

}  // namespace

TEST(Plant, LinearDecayMatchesExponential)
{
  const Plant p = plant_of(PlantKind::Linear);
  const auto y = p.step(vec({1.0}), vec({0.0}));
  EXPECT_NEAR(y(0), std::exp(-0.1), 1e-7);
  EXPECT_NEAR(y(0), 0.904837, 1e-6);
}

TEST(Plant, Rk4OrderFactor)
{
  const double exact = std::exp(-0.1);
  const double e1 = std::abs(plant_of(PlantKind::Linear, 0.1).step(vec({1.0}), vec({0.0}))(0) - exact);
  const double e2 = std::abs(plant_of(PlantKind::Linear, 0.05).step(vec({1.0}), vec({0.0}))(0) - exact);
  EXPECT_GE(e1 / e2, 12.0);
  EXPECT_LE(e1 / e2, 20.0);
}

TEST(Plant, ZeroOrderHoldComposesSubsteps)
{
  const Plant p = plant_of(PlantKind::VanDerPol);
  PlantState y(2);
  y << 0.7, -0.3;
  const auto u = vec({0.4});
  PlantState x = y;
  for (int i = 0; i < 10; ++i) x = p.rk4(x, u, 0.01);
  EXPECT_EQ(p.step(y, u), x);
  PlantState x2 = y;
  for (int i = 0; i < 10; ++i) x2 = p.step(x2, u, 0.01);
  EXPECT_LT((p.step(y, u) - x2).norm(), 1e-15);
}

TEST(Plant, LorenzOriginIsFixed)
{
  const Plant p = plant_of(PlantKind::LorenzControlled);
  PlantState y = PlantState::Zero(3);
  for (int i = 0; i < 50; ++i) y = p.step(y, vec({0.0}));
  EXPECT_EQ(y, PlantState::Zero(3));
  EXPECT_EQ(p.observe(y).size(), 2);
}

TEST(Plant, Observations)
{
  const Plant lin = plant_of(PlantKind::Linear);
  EXPECT_EQ(lin.observe(vec({0.3}))(0), 0.3);
  EXPECT_EQ(lin.m(), 1);
  EXPECT_EQ(lin.p(), 1);

  const Plant vdp = plant_of(PlantKind::VanDerPol);
  EXPECT_EQ(vdp.observe(vec({0.3, -0.2})), vec({0.3, -0.2}));

  const Plant mir = plant_of(PlantKind::MirrorOscillator);
  EXPECT_EQ(mir.m(), 2);
  EXPECT_EQ(mir.p(), 6);
  const auto z = mir.observe(vec({0.5, 2.0, -1.0, 3.0}));
  EXPECT_EQ(z, vec({0.5, -1.0, -0.5, 4.0, 9.0, 13.0}));
}

TEST(Plant, Configuration)
{
  PlantConfig c;
  c.kind = PlantKind::Linear;
  c.dt_plant = 0.03;
  EXPECT_THROW(Plant{c}, ConfigError);
  c.dt_plant = 0.01;
  c.parameters["nope"] = 1.0;
  EXPECT_THROW(Plant{c}, ConfigError);
  c.parameters = {{"dim", 3.0}};
  const Plant p(c);
  EXPECT_EQ(p.m(), 3);
  EXPECT_EQ(p.p(), 3);
  c.kind = PlantKind::MirrorOscillator;
  c.parameters = {{"mu", 1.0}, {"kappa", 0.3}};
  c.m = 1;
  EXPECT_THROW(Plant{c}, ConfigError);
}

TEST(Plant, DivergenceIsReported)
{
  PlantConfig c;
  c.kind = PlantKind::Linear;
  c.parameters = {{"a", -1e4}};
  const Plant p(c);
  PlantState y = vec({1.0});
  EXPECT_THROW(
      {
        for (int i = 0; i < 1000; ++i) y = p.step(y, vec({0.0}));
      },
      DivergenceError);
}

TEST(Plant, MirrorEquivariance)
{
  const Plant p = plant_of(PlantKind::MirrorOscillator);
  const SymmetryMap sym = mirror_symmetry();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(-2.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    PlantState y(4);
    for (int i = 0; i < 4; ++i) y(i) = U(rng);
    const auto u = vec({U(rng), U(rng)});
    const auto a = mirror_state(p.step(y, u));
    const auto b = p.step(mirror_state(y), sym.u_perm.apply(u));
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((p.observe(mirror_state(y)) - sym.z_perm.apply(p.observe(y))).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Plant, VanDerPolLimitCycle)
{
  const Plant p = plant_of(PlantKind::VanDerPol);
  PlantState y = p.default_initial_state();
  std::vector<double> peaks;
  double prev = y(0), prev2 = y(0);
  for (int i = 0; i < 1000; ++i) {
    y = p.step(y, vec({0.0}));
    if (prev > prev2 && prev > y(0)) peaks.push_back(prev);
    prev2 = prev;
    prev = y(0);
    ASSERT_LT(y.norm(), 10.0);
  }
  ASSERT_GE(peaks.size(), 5u);
  for (std::size_t i = peaks.size() - 4; i < peaks.size(); ++i) {
    EXPECT_GT(peaks[i], 1.5);
    EXPECT_NEAR(peaks[i], peaks[i - 1], 1e-2);
  }
}
