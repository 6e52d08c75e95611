/**
 * @file box_bfgs.hpp
 * @brief Projected quasi-Newton minimization over a box.
 */

#pragma once

#include "core.hpp"

namespace deepmpc {

struct BoxBfgsOptions
{
  std::size_t max_iters{50};
  double grad_tol{1e-6};  ///< on the 2-norm of the projected gradient
  double armijo{1e-4};
  std::size_t max_backtracks{30};
};

struct BoxBfgsResult
{
  Vector x;
  double f{0.0};
  double f_start{0.0};
  std::size_t iterations{0};
  std::size_t evaluations{0};
  bool converged{false};
  bool fallback{false};  ///< non-finite cost met during a line search; x is the start point
};

namespace detail {

inline Vector project(const Vector & x, const Vector & lo, const Vector & hi) { return x.cwiseMax(lo).cwiseMin(hi); }

/// Variables held at a bound with the gradient pushing outward.
inline std::vector<bool> active_set(const Vector & x, const Vector & g, const Vector & lo, const Vector & hi)
{
  std::vector<bool> a(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i)
    a[static_cast<std::size_t>(i)] = (x(i) <= lo(i) && g(i) > 0.0) || (x(i) >= hi(i) && g(i) < 0.0);
  return a;
}

}  // namespace detail

/**
 * @brief Minimize f over lo <= x <= hi.
 *
 * @p fg evaluates the objective and writes its gradient: `double fg(const
 * Vector & x, Vector & g)`. BFGS inverse-Hessian steps restricted to the free
 * variables, a backtracking line search along the projected path, and a
 * curvature-memory reset whenever the active set changes. Curvature pairs
 * from trial points clipped by the projection are skipped. Every accepted
 * step strictly decreases f, so the result is never worse than the start.
 */
template<typename F>
BoxBfgsResult minimize_box(F && fg, const Vector & x0, const Vector & lo, const Vector & hi,
                           const BoxBfgsOptions & opt = {})
{
  const Eigen::Index n = x0.size();
  if (lo.size() != n || hi.size() != n) throw DimensionError("minimize_box: bound dimensions");
  if ((lo.array() > hi.array()).any()) throw DimensionError("minimize_box: lo > hi");

  BoxBfgsResult r;
  Vector x = detail::project(x0, lo, hi);
  Vector g(n);
  double f = fg(x, g);
  ++r.evaluations;
  r.f_start = f;
  r.x = x;
  r.f = f;
  if (!std::isfinite(f) || !g.allFinite()) {
    r.fallback = true;
    return r;
  }

  Matrix Hinv = Matrix::Identity(n, n);
  bool fresh = true;
  std::vector<bool> prev_active = detail::active_set(x, g, lo, hi);
  Vector gt(n);

  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    const Vector pg = detail::project(x - g, lo, hi) - x;
    if (pg.norm() <= opt.grad_tol) {
      r.converged = true;
      break;
    }
    const auto active = detail::active_set(x, g, lo, hi);
    if (active != prev_active) {
      Hinv.setIdentity();
      fresh = true;
    }
    prev_active = active;

    Vector gf = g;
    for (Eigen::Index i = 0; i < n; ++i)
      if (active[static_cast<std::size_t>(i)]) gf(i) = 0.0;
    Vector dir = -(Hinv * gf);
    for (Eigen::Index i = 0; i < n; ++i)
      if (active[static_cast<std::size_t>(i)]) dir(i) = 0.0;
    if (g.dot(dir) >= 0.0) {
      Hinv.setIdentity();
      fresh = true;
      dir = -gf;
    }

    double alpha = fresh ? std::min(1.0, 1.0 / std::max(dir.norm(), 1e-300)) : 1.0;
    bool accepted = false, clipped = false;
    Vector xt, s;
    double ft = 0.0;
    for (std::size_t bt = 0; bt < opt.max_backtracks; ++bt, alpha *= 0.5) {
      const Vector raw = x + alpha * dir;
      xt = detail::project(raw, lo, hi);
      s = xt - x;
      if (s.squaredNorm() == 0.0) break;
      ft = fg(xt, gt);
      ++r.evaluations;
      if (!std::isfinite(ft) || !gt.allFinite()) {
        // Non-finite surrogate cost: return the start point.
        r.fallback = true;
        r.x = detail::project(x0, lo, hi);
        r.f = r.f_start;
        return r;
      }
      if (ft < f && ft <= f + opt.armijo * g.dot(s)) {
        accepted = true;
        clipped = (raw - xt).squaredNorm() > 0.0;
        break;
      }
    }
    ++r.iterations;
    if (!accepted) break;

    const Vector y = gt - g;
    const double sy = s.dot(y);
    if (!clipped && sy > 1e-12 * s.norm() * y.norm()) {
      if (fresh) Hinv *= sy / y.squaredNorm();
      const double rho = 1.0 / sy;
      const Matrix V = Matrix::Identity(n, n) - rho * y * s.transpose();
      Hinv = V.transpose() * Hinv * V + rho * s * s.transpose();
      fresh = false;
    }
    x = xt;
    f = ft;
    g = gt;
  }
  r.x = x;
  r.f = f;
  return r;
}

}  // namespace deepmpc
