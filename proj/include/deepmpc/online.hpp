/**
 * @file online.hpp
 * @brief Closed loop with surrogate fine-tuning on interval boundaries.
 */

#pragma once

#include "mpc.hpp"

namespace deepmpc {

enum class BufferPolicy
{
  IntervalOnly,      ///< fine-tune on the interval just finished
  SlidingAggregate,  ///< fine-tune on every interval so far
};

inline std::string to_string(BufferPolicy b) { return b == BufferPolicy::IntervalOnly ? "interval" : "aggregate"; }

inline BufferPolicy buffer_policy_from_string(const std::string & s)
{
  if (s == "interval") return BufferPolicy::IntervalOnly;
  if (s == "aggregate") return BufferPolicy::SlidingAggregate;
  throw ConfigError("unknown buffer policy '" + s + "' (expected interval or aggregate)");
}

struct OnlineSpec
{
  double interval_s{25.0};
  /// Multi-step fine-tuning per update; epochs = 0 disables updates.
  StageConfig update{20, 64, 1e-4, 1e-6};
  bool symmetrize{true};
  std::optional<SymmetryMap> symmetry;  ///< defaults to the sign flip of all channels
  BufferPolicy buffer{BufferPolicy::IntervalOnly};
  double clip{5.0};
  std::uint64_t seed{0};
  double warmup_s{4.0};  ///< for the whole-run metrics only

  std::size_t interval_steps(double dt) const
  {
    const double r = interval_s / dt;
    const double k = std::round(r);
    if (!(k >= 1.0) || std::abs(r - k) > 1e-9 * k) throw ConfigError("online: interval_s must be a multiple of dt");
    return static_cast<std::size_t>(k);
  }

  void validate(double dt) const
  {
    interval_steps(dt);
    if (update.epochs > 20) throw ConfigError("online: at most 20 epochs per update");
    if (update.batch_size == 0) throw ConfigError("online: batch_size must be positive");
    if (!(update.lr > 0.0) || !(update.lr_final >= 0.0)) throw ConfigError("online: learning rates must be positive");
  }
};

struct IntervalReport
{
  std::size_t index{0};
  std::size_t begin{0};  ///< first step of the interval
  std::size_t count{0};
  MetricsReport metrics;
  double train_loss_final{std::numeric_limits<double>::quiet_NaN()};  ///< NaN when no update ran
  std::size_t training_points{0};
  bool updated{false};
  bool diverged{false};
  std::string model_hash;  ///< of the model that controlled this interval
};

struct OnlineResult
{
  TimeSeries trajectory;
  MetricsReport metrics;
  SolveStats stats;
  std::vector<IntervalReport> intervals;
  SurrogateModel model;  ///< after the final update
};

struct OnlineOptions
{
  std::function<void(std::size_t, const ControlVector &)> on_step;
  /// Called with the model hash before every plant step.
  std::function<void(std::size_t, const std::string &)> on_model;
  /// Called when an update fails; the previous model stays in use.
  std::function<void(std::size_t, const std::string &)> on_divergence;
};

inline std::string interval_csv(const std::vector<IntervalReport> & rs)
{
  std::string s = "interval,e_mean,e_max,control_cost,train_loss_final\n";
  for (const auto & r : rs)
    s += std::to_string(r.index) + "," + detail::fmt_double(r.metrics.e_mean) + ","
       + detail::fmt_double(r.metrics.e_max) + "," + detail::fmt_double(r.metrics.control_cost) + ","
       + (std::isnan(r.train_loss_final) ? std::string("nan") : detail::fmt_double(r.train_loss_final)) + "\n";
  return s;
}

namespace detail {

inline ReferenceTrajectory reference_rows(const ReferenceTrajectory & ref, std::size_t begin, std::size_t count)
{
  ReferenceTrajectory r;
  r.dt = ref.dt;
  r.mask = ref.mask;
  r.targets.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(ref.tracked()));
  for (std::size_t i = 0; i < count; ++i) r.targets.row(static_cast<Eigen::Index>(i)) = ref.at(begin + i).transpose();
  return r;
}

/// Metrics of rows [begin, begin + count): T = (count - 1) dt, no warmup.
inline MetricsReport interval_metrics(const TimeSeries & traj, const ReferenceTrajectory & ref, std::size_t begin,
                                      std::size_t count)
{
  const TimeSeries part = traj.slice(begin, count);
  const TimeSeries local(part.dt(), 0.0, part.z(), part.u());
  return compute_metrics(local, reference_rows(ref, begin, count), static_cast<double>(count - 1) * traj.dt(), 0.0);
}

}  // namespace detail

/**
 * @brief Closed loop that fine-tunes the surrogate every interval_s seconds.
 *
 * The plant pauses while the update runs. The measurements of the finished
 * interval (doubled by the symmetry map when enabled) are cut into windows
 * and the model is trained with the multi-step objective. A diverging
 * update leaves the previous model in place.
 */
inline OnlineResult run_online(const Plant & plant, const SurrogateModel & model, const ReferenceTrajectory & ref,
                               const HorizonSpec & spec, const OnlineSpec & ospec, const PlantState & y0,
                               double duration, const OnlineOptions & opt = {})
{
  spec.validate();
  ospec.validate(spec.dt);
  if (std::abs(spec.dt - plant.dt()) > 1e-12) throw ConfigError("online: horizon dt != plant lag time");
  if (spec.m() != plant.m()) throw DimensionError("online: control dimension mismatch");
  ref.validate(plant.p());
  const std::size_t n = detail::step_index(duration, spec.dt);
  const std::size_t K = ospec.interval_steps(spec.dt);
  if (n < 2 * K) throw ConfigError("online: duration must cover at least two intervals");
  const SymmetryMap sym = ospec.symmetry ? *ospec.symmetry
                                         : sign_flip_symmetry(static_cast<std::size_t>(plant.p()),
                                                              static_cast<std::size_t>(plant.m()));

  OnlineResult res;
  res.model = model;
  std::string hash = model_hash(res.model);
  ControllerState state(model.history(), plant.p(), plant.m(), spec.N, spec.dt);
  Matrix z(static_cast<Eigen::Index>(n), plant.p()), u(static_cast<Eigen::Index>(n), plant.m());
  std::vector<TimeSeries> buffer;
  PlantState y = y0;

  const auto close_interval = [&](std::size_t begin, std::size_t count, bool update) {
    IntervalReport rep;
    rep.index = res.intervals.size();
    rep.begin = begin;
    rep.count = count;
    rep.model_hash = hash;
    const TimeSeries data(spec.dt, static_cast<double>(begin) * spec.dt,
                          z.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)),
                          u.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)));
    if (update && ospec.update.epochs > 0) {
      if (ospec.buffer == BufferPolicy::IntervalOnly) buffer.clear();
      buffer.push_back(data);
      const std::vector<TimeSeries> episodes = ospec.symmetrize ? symmetrize_all(buffer, sym) : buffer;
      rep.training_points = total_samples(episodes);
      const WindowedDataset windows(std::make_shared<const std::vector<TimeSeries>>(episodes), model.dims.M,
                                    model.dims.N, model.dims.d);
      if (!windows.empty()) {
        TrainConfig tc;
        tc.single_step = false;
        tc.multi = ospec.update;
        tc.clip = ospec.clip;
        tc.seed = detail::derive_seed(ospec.seed, rep.index);
        try {
          TrainResult tr = train(res.model, windows, nullptr, tc);
          rep.train_loss_final = tr.history.empty() ? loss(tr.model, windows, {}, windows.N())
                                                    : tr.history.back().best_val;
          res.model = std::move(tr.model);
          hash = model_hash(res.model);
          rep.updated = true;
        } catch (const TrainingDivergence & e) {
          rep.diverged = true;
          if (opt.on_divergence) opt.on_divergence(rep.index, e.what());
        }
      }
    }
    res.intervals.push_back(rep);
  };

  for (std::size_t i = 0; i < n; ++i) {
    const Observation zi = plant.observe(y);
    state.measure(zi);
    if (opt.on_model) opt.on_model(i, hash);
    const ControlVector ui = control_step(res.model, state, ref, spec, res.stats);
    z.row(static_cast<Eigen::Index>(i)) = zi.transpose();
    u.row(static_cast<Eigen::Index>(i)) = ui.transpose();
    if (i + 1 < n) y = plant.step(y, ui, spec.dt, static_cast<double>(i) * spec.dt);
    if (opt.on_step) opt.on_step(i, ui);
    if ((i + 1) % K == 0) close_interval(i + 1 - K, K, i + 1 < n);
  }
  if (n % K >= 2) close_interval(n - n % K, n % K, false);
  res.trajectory = TimeSeries(spec.dt, 0.0, std::move(z), std::move(u));
  for (auto & rep : res.intervals)
    rep.metrics = detail::interval_metrics(res.trajectory, ref, rep.begin, rep.count);
  res.metrics = detail::run_metrics(res.trajectory, ref, ospec.warmup_s);
  return res;
}

}  // namespace deepmpc
