/**
 * @file plants.hpp
 * @brief Plant interface (time-T map and observation map) and built-in ODE
 * plants integrated with fixed-step classical RK4.
 */

#pragma once

#include "core.hpp"

#include <map>
#include <string>

namespace deepmpc {

/// Full plant state y.
using PlantState = Eigen::VectorXd;

enum class PlantKind
{
  Linear,
  VanDerPol,
  LorenzControlled,
  MirrorOscillator,
};

inline std::string to_string(PlantKind k)
{
  switch (k) {
    case PlantKind::Linear: return "Linear";
    case PlantKind::VanDerPol: return "VanDerPol";
    case PlantKind::LorenzControlled: return "LorenzControlled";
    case PlantKind::MirrorOscillator: return "MirrorOscillator";
  }
  return "?";
}

inline PlantKind plant_kind_from_string(const std::string & s)
{
  if (s == "Linear") return PlantKind::Linear;
  if (s == "VanDerPol") return PlantKind::VanDerPol;
  if (s == "LorenzControlled") return PlantKind::LorenzControlled;
  if (s == "MirrorOscillator") return PlantKind::MirrorOscillator;
  throw ConfigError("unknown plant kind '" + s + "'");
}

struct PlantConfig
{
  PlantKind kind{PlantKind::Linear};
  /// Plant parameters by name; missing entries take the kind's defaults.
  std::map<std::string, double> parameters;
  double dt_plant{0.01};  ///< RK4 substep
  double dt{0.1};         ///< lag time of the time-T map
  /// Expected dimensions; 0 means "whatever the kind implies".
  Eigen::Index m{0};
  Eigen::Index p{0};
};

/// Names accepted in PlantConfig::parameters per kind, with defaults.
inline std::map<std::string, double> default_parameters(PlantKind kind)
{
  switch (kind) {
    case PlantKind::Linear: return {{"a", 1.0}, {"b", 1.0}, {"dim", 1.0}};
    case PlantKind::VanDerPol: return {{"mu", 1.0}};
    case PlantKind::LorenzControlled: return {{"sigma", 10.0}, {"rho", 28.0}, {"beta", 8.0 / 3.0}};
    case PlantKind::MirrorOscillator: return {{"mu", 1.0}, {"kappa", 0.3}};
  }
  return {};
}

/**
 * @brief Time-T map Phi and observation f behind one value type.
 *
 * Plants:
 *  - Linear:            y' = -a y + b u, z = y (dimension "dim")
 *  - VanDerPol:         y1' = y2, y2' = mu (1 - y1^2) y2 - y1 + u, z = y
 *  - LorenzControlled:  Lorenz-63 with u added to the y2 equation, z = (y1, y3)
 *  - MirrorOscillator:  two coupled Van der Pol oscillators (a1, b1, a2, b2),
 *                       a_i' = b_i, b_i' = mu (1 - a_i^2) b_i - a_i - kappa a_j + u_i,
 *                       z = (a1, a2, a1 + a2, b1^2, b2^2, b1^2 + b2^2)
 */
class Plant
{
public:
  explicit Plant(PlantConfig cfg) : cfg_(std::move(cfg))
  {
    auto params = default_parameters(cfg_.kind);
    for (const auto & [k, v] : cfg_.parameters) {
      if (!params.count(k)) throw ConfigError("plant " + to_string(cfg_.kind) + ": unknown parameter '" + k + "'");
      if (!std::isfinite(v)) throw ConfigError("plant: parameter '" + k + "' not finite");
      params[k] = v;
    }
    cfg_.parameters = params;
    if (!(cfg_.dt_plant > 0.0) || !(cfg_.dt > 0.0)) throw ConfigError("plant: time steps must be positive");
    substeps_ = substeps_for(cfg_.dt);

    switch (cfg_.kind) {
      case PlantKind::Linear: {
        const double dim = params["dim"];
        if (dim < 1 || dim != std::floor(dim)) throw ConfigError("plant Linear: dim must be a positive integer");
        n_ = m_ = p_ = static_cast<Eigen::Index>(dim);
        break;
      }
      case PlantKind::VanDerPol: n_ = 2, m_ = 1, p_ = 2; break;
      case PlantKind::LorenzControlled: n_ = 3, m_ = 1, p_ = 2; break;
      case PlantKind::MirrorOscillator: n_ = 4, m_ = 2, p_ = 6; break;
    }
    if ((cfg_.m != 0 && cfg_.m != m_) || (cfg_.p != 0 && cfg_.p != p_))
      throw ConfigError("plant " + to_string(cfg_.kind) + ": inconsistent dimensions (m = " + std::to_string(m_)
                        + ", p = " + std::to_string(p_) + ")");
    cfg_.m = m_;
    cfg_.p = p_;
    for (const auto & [k, v] : params) {
      if (k == "a") a_ = v;
      else if (k == "b") b_ = v;
      else if (k == "mu") mu_ = v;
      else if (k == "kappa") kappa_ = v;
      else if (k == "sigma") sigma_ = v;
      else if (k == "rho") rho_ = v;
      else if (k == "beta") beta_ = v;
    }
  }

  const PlantConfig & config() const { return cfg_; }
  PlantKind kind() const { return cfg_.kind; }
  Eigen::Index state_dim() const { return n_; }
  Eigen::Index m() const { return m_; }
  Eigen::Index p() const { return p_; }
  double dt() const { return cfg_.dt; }

  /// Right-hand side y' = F(y, u).
  PlantState rhs(const PlantState & y, const ControlVector & u) const
  {
    PlantState dy(n_);
    switch (cfg_.kind) {
      case PlantKind::Linear: dy = -a_ * y + b_ * u; break;
      case PlantKind::VanDerPol:
        dy(0) = y(1);
        dy(1) = mu_ * (1.0 - y(0) * y(0)) * y(1) - y(0) + u(0);
        break;
      case PlantKind::LorenzControlled:
        dy(0) = sigma_ * (y(1) - y(0));
        dy(1) = y(0) * (rho_ - y(2)) - y(1) + u(0);
        dy(2) = y(0) * y(1) - beta_ * y(2);
        break;
      case PlantKind::MirrorOscillator:
        dy(0) = y(1);
        dy(1) = mu_ * (1.0 - y(0) * y(0)) * y(1) - y(0) - kappa_ * y(2) + u(0);
        dy(2) = y(3);
        dy(3) = mu_ * (1.0 - y(2) * y(2)) * y(3) - y(2) - kappa_ * y(0) + u(1);
        break;
    }
    return dy;
  }

  /// One classical RK4 substep of length h.
  PlantState rk4(const PlantState & y, const ControlVector & u, double h) const
  {
    const PlantState k1 = rhs(y, u);
    const PlantState k2 = rhs(y + 0.5 * h * k1, u);
    const PlantState k3 = rhs(y + 0.5 * h * k2, u);
    const PlantState k4 = rhs(y + h * k3, u);
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }

  /**
   * @brief Advance y by dt holding u constant (zero-order hold), using RK4
   * substeps of length dt_plant. @p t is only used for error reporting.
   */
  PlantState step(const PlantState & y, const ControlVector & u, double dt, double t = 0.0) const
  {
    if (y.size() != n_) throw DimensionError("plant step: state dimension mismatch");
    if (u.size() != m_) throw DimensionError("plant step: control dimension mismatch");
    const std::size_t n = dt == cfg_.dt ? substeps_ : substeps_for(dt);
    const double h = dt / static_cast<double>(n);
    PlantState x = y;
    for (std::size_t i = 0; i < n; ++i) {
      x = rk4(x, u, h);
      if (!x.allFinite()) throw DivergenceError("plant " + to_string(cfg_.kind) + " diverged", t + (i + 1) * h);
    }
    return x;
  }

  PlantState step(const PlantState & y, const ControlVector & u) const { return step(y, u, cfg_.dt); }

  Observation observe(const PlantState & y) const
  {
    switch (cfg_.kind) {
      case PlantKind::Linear:
      case PlantKind::VanDerPol: return y;
      case PlantKind::LorenzControlled: {
        Observation z(2);
        z << y(0), y(2);
        return z;
      }
      case PlantKind::MirrorOscillator: {
        Observation z(6);
        const double d1 = y(1) * y(1), d2 = y(3) * y(3);
        z << y(0), y(2), y(0) + y(2), d1, d2, d1 + d2;
        return z;
      }
    }
    return y;
  }

  /// Sensible nonzero starting state for experiments.
  PlantState default_initial_state() const
  {
    PlantState y = PlantState::Zero(n_);
    switch (cfg_.kind) {
      case PlantKind::Linear: y.setOnes(); break;
      case PlantKind::VanDerPol: y << 2.0, 0.0; break;
      case PlantKind::LorenzControlled: y << 1.0, 1.0, 1.0; break;
      case PlantKind::MirrorOscillator: y << 1.5, 0.0, -0.5, 0.5; break;
    }
    return y;
  }

private:
  std::size_t substeps_for(double dt) const
  {
    const double ratio = dt / cfg_.dt_plant;
    const double r = std::round(ratio);
    if (r < 1.0 || std::abs(ratio - r) > 1e-9 * r)
      throw ConfigError("plant: dt_plant = " + detail::fmt_short(cfg_.dt_plant) + " does not divide dt = "
                        + detail::fmt_short(dt));
    return static_cast<std::size_t>(r);
  }

  PlantConfig cfg_;
  std::size_t substeps_{1};
  Eigen::Index n_{1}, m_{1}, p_{1};
  double a_{1}, b_{1}, mu_{1}, kappa_{0.3}, sigma_{10}, rho_{28}, beta_{8.0 / 3.0};
};

inline Plant make_plant(const PlantConfig & config) { return Plant(config); }

/// Reflection symmetry of the MirrorOscillator state: (a1,b1,a2,b2) -> (-a2,-b2,-a1,-b1).
inline PlantState mirror_state(const PlantState & y)
{
  if (y.size() != 4) throw DimensionError("mirror_state: expected a 4-dimensional state");
  PlantState s(4);
  s << -y(2), -y(3), -y(0), -y(1);
  return s;
}

}  // namespace deepmpc
