#include <deepmpc/core.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace deepmpc;

namespace {

TimeSeries indexed_series(std::size_t n, Eigen::Index p = 1, Eigen::Index m = 1)
{
  Matrix z(static_cast<Eigen::Index>(n), p), u(static_cast<Eigen::Index>(n), m);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    z.row(i).setConstant(static_cast<double>(i));
    u.row(i).setConstant(100.0 + static_cast<double>(i));
  }
  return TimeSeries(0.1, 0.0, z, u);
}

ReferenceTrajectory constant_reference(std::size_t n, std::size_t J, double v)
{
  ReferenceTrajectory r;
  r.dt = 0.1;
  r.targets = Matrix::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(J), v);
  for (std::size_t j = 0; j < J; ++j) r.mask.push_back(j);
  return r;
}

}  // namespace

TEST(TimeSeries, RejectsMismatchedLengths)
{
  EXPECT_THROW(TimeSeries(0.1, 0.0, Matrix::Zero(3, 1), Matrix::Zero(4, 1)), DimensionError);
}

TEST(TimeSeries, SliceKeepsTimeOrigin)
{
  const auto s = indexed_series(10).slice(4, 3);
  EXPECT_EQ(s.size(), 3u);
  EXPECT_DOUBLE_EQ(s.z()(0, 0), 4.0);
  EXPECT_NEAR(s.time(0), 0.4, 1e-12);
  EXPECT_THROW(indexed_series(10).slice(8, 3), IndexError);
}

TEST(DelayWindow, SmallestLegalWindow)
{
  const auto w = build_delay_window(indexed_series(5), 1, 0);
  ASSERT_EQ(w.zu_z.rows(), 2);
  EXPECT_EQ(w.zu_z(0, 0), 0.0);
  EXPECT_EQ(w.zu_z(1, 0), 1.0);
  EXPECT_EQ(w.zu_u(1, 0), 101.0);
  ASSERT_EQ(w.u_recent.rows(), 1);
  EXPECT_EQ(w.u_recent(0, 0), 101.0);
}

TEST(DelayWindow, IndexRanges)
{
  const auto w = build_delay_window(indexed_series(8), 5, 2);
  ASSERT_EQ(w.zu_z.rows(), 6);
  for (Eigen::Index q = 0; q < 6; ++q) EXPECT_EQ(w.zu_z(q, 0), static_cast<double>(q));
  ASSERT_EQ(w.u_recent.rows(), 3);
  for (Eigen::Index q = 0; q < 3; ++q) EXPECT_EQ(w.u_recent(q, 0), 103.0 + static_cast<double>(q));
  EXPECT_TRUE(w.consistent());
}

TEST(DelayWindow, RejectsIllegalIndex)
{
  EXPECT_THROW(build_delay_window(indexed_series(8), 4, 2), IndexError);
  EXPECT_THROW(build_delay_window(indexed_series(8), 8, 0), IndexError);
}

TEST(DelayWindow, LastPairIsSampleKAndPure)
{
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  Matrix z(30, 2), u(30, 1);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = n(rng);
  const TimeSeries s(0.1, 0.0, z, u);
  for (std::size_t d = 0; d < 4; ++d)
    for (std::size_t k = 2 * d + 1; k < s.size(); ++k) {
      const auto a = build_delay_window(s, k, d), b = build_delay_window(s, k, d);
      EXPECT_EQ(a.zu_z.bottomRows(1), z.row(static_cast<Eigen::Index>(k)));
      EXPECT_EQ(a.zu_u.bottomRows(1), u.row(static_cast<Eigen::Index>(k)));
      EXPECT_EQ(a.zu_z, b.zu_z);
      EXPECT_EQ(a.u_recent, b.u_recent);
    }
}

TEST(Metrics, ZeroError)
{
  const auto ref = constant_reference(101, 1, 0.5);
  const TimeSeries s(0.1, 0.0, Matrix::Constant(101, 1, 0.5), Matrix::Zero(101, 1));
  const auto r = compute_metrics(s, ref, 10.0, 4.0);
  EXPECT_EQ(r.e_mean, 0.0);
  EXPECT_EQ(r.e_max, 0.0);
}

TEST(Metrics, ConstantDeviationExample)
{
  // Deviation 0.1 on 3 tracked channels, steps 40..100 inclusive.
  const auto ref = constant_reference(101, 3, 0.0);
  const TimeSeries s(0.1, 0.0, Matrix::Constant(101, 3, 0.1), Matrix::Zero(101, 1));
  const auto r = compute_metrics(s, ref, 10.0, 4.0);
  EXPECT_NEAR(r.e_mean, 0.0061, 1e-12);
  EXPECT_NEAR(r.e_max, 0.01, 1e-15);
}

TEST(Metrics, EmptyRangeIsAnError)
{
  const auto ref = constant_reference(101, 1, 0.0);
  const TimeSeries s(0.1, 0.0, Matrix::Zero(101, 1), Matrix::Zero(101, 1));
  EXPECT_THROW(compute_metrics(s, ref, 10.0, 10.0), IndexError);
}

TEST(Metrics, MaxDominatesMeanAndAppendInvariance)
{
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix z(120, 2), u(120, 1);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = n(rng);
    const TimeSeries s(0.1, 0.0, z, u);
    ReferenceTrajectory ref = constant_reference(120, 1, 0.2);
    ref.mask = {1};
    const double T = 9.0, w = 2.0;
    const auto r = compute_metrics(s, ref, T, w);
    const double steps = 90 - 20 + 1;
    EXPECT_GE(r.e_max, T / (0.1 * steps) * r.e_mean * (1.0 - 1e-12));
    // Samples beyond T/dt do not matter.
    Matrix z2 = z, u2 = u;
    z2.bottomRows(20).setConstant(1e6);
    const auto r2 = compute_metrics(TimeSeries(0.1, 0.0, z2, u2), ref, T, w);
    EXPECT_EQ(r.e_mean, r2.e_mean);
    EXPECT_EQ(r.e_max, r2.e_max);
  }
}

TEST(Metrics, RejectsDtMismatch)
{
  auto ref = constant_reference(101, 1, 0.0);
  ref.dt = 0.2;
  const TimeSeries s(0.1, 0.0, Matrix::Zero(101, 1), Matrix::Zero(101, 1));
  EXPECT_THROW(compute_metrics(s, ref, 5.0, 1.0), DimensionError);
}

TEST(Metrics, TextRoundTrip)
{
  MetricsReport r{0.125, 1.0 / 3.0, 2.5, 4.0, 59.9};
  const auto back = MetricsReport::from_text(r.to_text());
  EXPECT_EQ(back.e_mean, r.e_mean);
  EXPECT_EQ(back.e_max, r.e_max);
  EXPECT_EQ(back.control_cost, r.control_cost);
}

TEST(Csv, RoundTripIsBitExact)
{
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  Matrix z(17, 3), u(17, 2);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng) * 1e3;
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = n(rng) * 1e-3;
  const TimeSeries s(0.1, 0.0, z, u);
  const auto back = from_csv(to_csv(s));
  EXPECT_EQ(back.series.z(), z);
  EXPECT_EQ(back.series.u(), u);
  EXPECT_DOUBLE_EQ(back.series.dt(), 0.1);
  EXPECT_EQ(to_csv(back.series), to_csv(s));
}

TEST(Csv, ReferenceColumns)
{
  const auto ref = piecewise_reference({{{1.0}, 1.0}, {{-1.0}, 1.0}}, {0}, 0.1);
  const TimeSeries s(0.1, 0.0, Matrix::Zero(20, 2), Matrix::Zero(20, 1));
  const auto rec = from_csv(to_csv(s, &ref));
  ASSERT_EQ(rec.ref.cols(), 1);
  EXPECT_EQ(rec.ref(0, 0), 1.0);
  EXPECT_EQ(rec.ref(15, 0), -1.0);
}

TEST(Csv, MalformedInput)
{
  EXPECT_THROW(from_csv("t,z_1,u_1\n0,1\n"), FormatError);
  EXPECT_THROW(from_csv("t,z_1,u_1\n0,1,x\n"), FormatError);
}

TEST(Reference, PiecewiseSegmentsAndClamping)
{
  const auto ref = piecewise_reference({{{1.0}, 20.0}, {{0.0}, 20.0}, {{-1.0}, 20.0}}, {0}, 0.1);
  EXPECT_EQ(ref.size(), 600u);
  EXPECT_EQ(ref.at(0)(0), 1.0);
  EXPECT_EQ(ref.at(199)(0), 1.0);
  EXPECT_EQ(ref.at(200)(0), 0.0);
  EXPECT_EQ(ref.at(599)(0), -1.0);
  EXPECT_EQ(ref.at(10000)(0), -1.0);
}
