/**
 * @file mpc.hpp
 * @brief Receding-horizon control with a learned surrogate.
 */

#pragma once

#include "box_bfgs.hpp"
#include "core.hpp"
#include "plants.hpp"
#include "surrogate.hpp"

#include <chrono>
#include <concepts>
#include <deque>
#include <functional>

namespace deepmpc {

struct HorizonSpec
{
  std::size_t N{5};
  double dt{0.1};
  double alpha{0.0};  ///< control magnitude weight
  double beta{0.01};  ///< control variation weight
  Vector lower{Vector::Constant(1, -2.0)};
  Vector upper{Vector::Constant(1, 2.0)};
  std::size_t max_iters{50};
  double grad_tol{1e-6};

  Eigen::Index m() const { return lower.size(); }

  void validate() const
  {
    if (N < 1) throw ConfigError("horizon: N must be >= 1");
    if (!(dt > 0.0)) throw ConfigError("horizon: dt must be positive");
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("horizon: alpha and beta must be >= 0");
    if (lower.size() < 1 || lower.size() != upper.size() || (lower.array() > upper.array()).any())
      throw ConfigError("horizon: bounds must be well ordered");
  }
};

/**
 * @brief Stage cost of the surrogate-constrained problem:
 * sum_i |pred[i, mask] - ref[i]|^2 + alpha |u_i|^2 + beta |u_i - u_{i-1}|^2
 * with u_{-1} = u_prev. Row i of pred and ref refers to step i+1.
 */
inline double mpc_cost(const Matrix & predicted, const Matrix & ref, const std::vector<std::size_t> & mask,
                       const Matrix & controls, const ControlVector & u_prev, const HorizonSpec & spec)
{
  double c = 0.0;
  for (Eigen::Index i = 0; i < controls.rows(); ++i) {
    for (std::size_t j = 0; j < mask.size(); ++j) {
      const double e = predicted(i, static_cast<Eigen::Index>(mask[j])) - ref(i, static_cast<Eigen::Index>(j));
      c += e * e;
    }
    const Vector u = controls.row(i).transpose();
    const Vector prev = i == 0 ? Vector(u_prev) : Vector(controls.row(i - 1).transpose());
    c += spec.alpha * u.squaredNorm() + spec.beta * (u - prev).squaredNorm();
  }
  return c;
}

namespace detail {

/// d(alpha/beta terms)/du, same shape as controls.
inline Matrix regularizer_gradient(const Matrix & controls, const ControlVector & u_prev, const HorizonSpec & spec)
{
  Matrix g = 2.0 * spec.alpha * controls;
  for (Eigen::Index i = 0; i < controls.rows(); ++i) {
    const Vector prev = i == 0 ? Vector(u_prev) : Vector(controls.row(i - 1).transpose());
    const Vector diff = controls.row(i).transpose() - prev;
    g.row(i) += 2.0 * spec.beta * diff.transpose();
    if (i > 0) g.row(i - 1) -= 2.0 * spec.beta * diff.transpose();
  }
  return g;
}

inline Vector flatten_rows(const Matrix & m)
{
  Vector v(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i) v.segment(i * m.cols(), m.cols()) = m.row(i).transpose();
  return v;
}

inline Matrix unflatten_rows(const Vector & v, Eigen::Index rows, Eigen::Index cols)
{
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) m.row(i) = v.segment(i * cols, cols).transpose();
  return m;
}

}  // namespace detail

/**
 * Anything that predicts N x p observations from N x m controls and
 * back-propagates dL/dprediction to dL/dcontrols, bound to one history.
 */
template<typename T>
concept HorizonPredictor = requires(const T & t, const Matrix & c, Matrix & out) {
  { t.predict(c) } -> std::convertible_to<Matrix>;
  { t.value_and_gradient(c, c, out) } -> std::convertible_to<Matrix>;
};

struct SolveResult
{
  Matrix controls;  ///< N x m
  double cost{0.0};
  double warm_cost{0.0};
  std::size_t iterations{0};
  bool converged{false};
  bool fallback{false};
};

/**
 * @brief Minimize mpc_cost composed with the surrogate over the control box,
 * starting from the warm start. The result is feasible and its cost never
 * exceeds the warm-start cost.
 */
template<HorizonPredictor Predictor>
SolveResult solve_horizon(const Predictor & model, const Matrix & warm_start, const Matrix & ref,
                          const std::vector<std::size_t> & mask, const ControlVector & u_prev, const HorizonSpec & spec)
{
  const Eigen::Index N = warm_start.rows(), m = warm_start.cols();
  if (m != spec.m() || u_prev.size() != m) throw DimensionError("solve_horizon: control dimension mismatch");
  if (ref.rows() != N || ref.cols() != static_cast<Eigen::Index>(mask.size()))
    throw DimensionError("solve_horizon: reference slice must be N x J");
  Vector lo(N * m), hi(N * m);
  for (Eigen::Index i = 0; i < N; ++i) {
    lo.segment(i * m, m) = spec.lower;
    hi.segment(i * m, m) = spec.upper;
  }
  const auto fg = [&](const Vector & x, Vector & g) {
    const Matrix u = detail::unflatten_rows(x, N, m);
    Matrix pred;
    const Matrix du = model.value_and_gradient(
        u,
        [&](const Matrix & z) {
          Matrix dz = Matrix::Zero(z.rows(), z.cols());
          for (std::size_t j = 0; j < mask.size(); ++j) {
            const auto c = static_cast<Eigen::Index>(mask[j]);
            dz.col(c) = 2.0 * (z.col(c) - ref.col(static_cast<Eigen::Index>(j)));
          }
          return dz;
        },
        pred);
    const double cost = mpc_cost(pred, ref, mask, u, u_prev, spec);
    g = detail::flatten_rows(du + detail::regularizer_gradient(u, u_prev, spec));
    return cost;
  };
  BoxBfgsOptions opt;
  opt.max_iters = spec.max_iters;
  opt.grad_tol = spec.grad_tol;
  const BoxBfgsResult r = minimize_box(fg, detail::flatten_rows(warm_start), lo, hi, opt);
  SolveResult out;
  out.controls = detail::unflatten_rows(r.x, N, m);
  out.cost = r.f;
  out.warm_cost = r.f_start;
  out.iterations = r.iterations;
  out.converged = r.converged;
  out.fallback = r.fallback;
  return out;
}

// ---------------------------------------------------------------------------
// Controller state

enum class ControllerPhase
{
  Initializing,
  Active,
};

/**
 * @brief Measurement history, last applied control and warm start.
 *
 * The buffer holds the most recent measured observations paired with the
 * control applied at that sample; the newest entry's control is filled in
 * once it has been chosen.
 */
class ControllerState
{
public:
  ControllerState(std::size_t history, Eigen::Index p, Eigen::Index m, std::size_t N, double dt)
      : history_(history), p_(p), m_(m), dt_(dt), u_prev_(ControlVector::Zero(m)), warm_(Matrix::Zero(static_cast<Eigen::Index>(N), m))
  {}

  ControllerPhase phase() const { return buffer_z_.size() >= history_ && step_ >= history_ ? ControllerPhase::Active : ControllerPhase::Initializing; }
  std::size_t step() const { return step_; }
  const ControlVector & u_prev() const { return u_prev_; }
  const Matrix & warm_start() const { return warm_; }
  std::size_t buffered() const { return buffer_z_.size(); }

  /// Record the measurement at the current step.
  void measure(const Observation & z)
  {
    if (z.size() != p_) throw DimensionError("controller: observation dimension");
    buffer_z_.push_back(z);
    buffer_u_.push_back(u_prev_);
    while (buffer_z_.size() > history_) {
      buffer_z_.pop_front();
      buffer_u_.pop_front();
    }
  }

  /// History segment for the surrogate (last control is a placeholder).
  TimeSeries history() const
  {
    if (buffer_z_.size() < history_) throw IndexError("controller: history buffer not full");
    Matrix z(static_cast<Eigen::Index>(history_), p_), u(static_cast<Eigen::Index>(history_), m_);
    for (std::size_t i = 0; i < history_; ++i) {
      z.row(static_cast<Eigen::Index>(i)) = buffer_z_[i].transpose();
      u.row(static_cast<Eigen::Index>(i)) = buffer_u_[i].transpose();
    }
    return TimeSeries(dt_, 0.0, std::move(z), std::move(u));
  }

  /// Commit the control applied at the current step and advance.
  void apply(const ControlVector & u, const Matrix * solution = nullptr)
  {
    if (!buffer_u_.empty()) buffer_u_.back() = u;
    u_prev_ = u;
    if (solution) {
      // Shift: drop the first entry, repeat the last.
      const Eigen::Index N = solution->rows();
      if (N > 1) warm_.topRows(N - 1) = solution->bottomRows(N - 1);
      warm_.row(N - 1) = solution->row(N - 1);
    }
    ++step_;
  }

private:
  std::size_t history_;
  Eigen::Index p_, m_;
  double dt_;
  std::deque<Observation> buffer_z_;
  std::deque<ControlVector> buffer_u_;
  ControlVector u_prev_;
  Matrix warm_;
  std::size_t step_{0};
};

/// Reference rows for predictions at steps t+1 .. t+N.
inline Matrix reference_slice(const ReferenceTrajectory & ref, std::size_t t, std::size_t N)
{
  Matrix s(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(ref.tracked()));
  for (std::size_t i = 0; i < N; ++i) s.row(static_cast<Eigen::Index>(i)) = ref.at(t + 1 + i).transpose();
  return s;
}

// ---------------------------------------------------------------------------
// Closed loop

/// Binds a surrogate model to a history; overload for other predictor families.
inline BoundSurrogate bind(const SurrogateModel & model, const TimeSeries & history)
{
  return BoundSurrogate(model, history);
}

template<typename Model>
concept ClosedLoopModel = requires(const Model & m, const TimeSeries & h) {
  { m.history() } -> std::convertible_to<std::size_t>;
  { bind(m, h) } -> HorizonPredictor;
};

struct SolveStats
{
  std::size_t solves{0};
  std::size_t fallbacks{0};
  std::size_t iterations{0};
  std::size_t infeasible{0};       ///< returned controls outside the box
  std::size_t cost_increases{0};   ///< returned cost above the warm-start cost
  double solve_seconds{0.0};

  std::size_t violations() const { return infeasible + cost_increases; }

  SolveStats & operator+=(const SolveStats & o)
  {
    solves += o.solves;
    fallbacks += o.fallbacks;
    iterations += o.iterations;
    infeasible += o.infeasible;
    cost_increases += o.cost_increases;
    solve_seconds += o.solve_seconds;
    return *this;
  }
};

struct ClosedLoopOptions
{
  double warmup_s{4.0};  ///< excluded from the metrics sums
  /// Called after every plant step with (step index, applied control).
  std::function<void(std::size_t, const ControlVector &)> on_step;
};

struct ClosedLoopResult
{
  TimeSeries trajectory;
  MetricsReport metrics;
  SolveStats stats;
};

namespace detail {

inline void check_solution(const SolveResult & s, const HorizonSpec & spec, SolveStats & st)
{
  ++st.solves;
  st.iterations += s.iterations;
  if (s.fallback) ++st.fallbacks;
  for (Eigen::Index i = 0; i < s.controls.rows(); ++i)
    if ((s.controls.row(i).transpose().array() < spec.lower.array()).any()
        || (s.controls.row(i).transpose().array() > spec.upper.array()).any())
      ++st.infeasible;
  if (s.cost > s.warm_cost) ++st.cost_increases;
}

/// Metrics over the whole run: T is the time of the last sample.
inline MetricsReport run_metrics(const TimeSeries & traj, const ReferenceTrajectory & ref, double warmup)
{
  const double T = static_cast<double>(traj.size() - 1) * traj.dt();
  return compute_metrics(traj, ref, T, std::min(warmup, T - traj.dt()));
}

}  // namespace detail

/**
 * @brief One controller step: u = 0 while Initializing (the first M+2d+2
 * steps), otherwise solve the horizon problem and take its first entry.
 */
template<ClosedLoopModel Model>
ControlVector control_step(const Model & model, ControllerState & state, const ReferenceTrajectory & ref,
                           const HorizonSpec & spec, SolveStats & stats)
{
  if (state.phase() == ControllerPhase::Initializing) {
    const ControlVector u = ControlVector::Zero(spec.m());
    state.apply(u);
    return u;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto bound = bind(model, state.history());
  const Matrix rs = reference_slice(ref, state.step(), spec.N);
  const SolveResult s = solve_horizon(bound, state.warm_start(), rs, ref.mask, state.u_prev(), spec);
  stats.solve_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail::check_solution(s, spec, stats);
  const ControlVector u = s.controls.row(0).transpose();
  state.apply(u, &s.controls);
  return u;
}

/**
 * @brief Feedback loop against the plant for duration/dt steps.
 *
 * Per step: measure z, choose u (zero during initialization), apply it for
 * one lag time. Returns the (z, u) trajectory and its tracking metrics.
 */
template<ClosedLoopModel Model>
ClosedLoopResult run_closed_loop(const Plant & plant, const Model & model, const ReferenceTrajectory & ref,
                                 const HorizonSpec & spec, const PlantState & y0, double duration,
                                 const ClosedLoopOptions & opt = {})
{
  spec.validate();
  if (std::abs(spec.dt - plant.dt()) > 1e-12) throw ConfigError("closed loop: horizon dt != plant lag time");
  if (spec.m() != plant.m()) throw DimensionError("closed loop: control dimension mismatch");
  ref.validate(plant.p());
  const std::size_t n = detail::step_index(duration, spec.dt);
  if (n < 2) throw ConfigError("closed loop: duration too short");
  ControllerState state(model.history(), plant.p(), plant.m(), spec.N, spec.dt);
  Matrix z(static_cast<Eigen::Index>(n), plant.p()), u(static_cast<Eigen::Index>(n), plant.m());
  ClosedLoopResult res;
  PlantState y = y0;
  for (std::size_t i = 0; i < n; ++i) {
    const Observation zi = plant.observe(y);
    state.measure(zi);
    const ControlVector ui = control_step(model, state, ref, spec, res.stats);
    z.row(static_cast<Eigen::Index>(i)) = zi.transpose();
    u.row(static_cast<Eigen::Index>(i)) = ui.transpose();
    if (i + 1 < n) y = plant.step(y, ui, spec.dt, static_cast<double>(i) * spec.dt);
    if (opt.on_step) opt.on_step(i, ui);
  }
  res.trajectory = TimeSeries(spec.dt, 0.0, std::move(z), std::move(u));
  res.metrics = detail::run_metrics(res.trajectory, ref, opt.warmup_s);
  return res;
}

/// Open-loop run under a fixed control signal (u = 0 gives the uncontrolled baseline).
inline ClosedLoopResult run_open_loop(const Plant & plant, const ReferenceTrajectory & ref, const PlantState & y0,
                                      double duration, double warmup_s = 4.0, const ControlVector * u_const = nullptr)
{
  const std::size_t n = detail::step_index(duration, plant.dt());
  ControlSignal sig;
  sig.dt = plant.dt();
  sig.u = Matrix::Zero(static_cast<Eigen::Index>(n), plant.m());
  if (u_const) sig.u.rowwise() = u_const->transpose();
  ClosedLoopResult res;
  res.trajectory = collect_trajectory(plant, sig, y0);
  res.metrics = detail::run_metrics(res.trajectory, ref, warmup_s);
  return res;
}

}  // namespace deepmpc
