/**
 * @file cli.hpp
 * @brief Experiment pipeline driven by an ExperimentConfig, and the
 * `deepmpc` command-line front end.
 */

#pragma once

#include "config.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <filesystem>
#include <iostream>
#include <thread>

namespace deepmpc {

inline constexpr const char * version = "0.1.0";

enum ExitCode : int
{
  exit_ok = 0,
  exit_failure = 1,
  exit_config = 2,
  exit_io = 3,
  exit_divergence = 4,
  exit_solver = 5,
};

// ---------------------------------------------------------------------------
// Pipeline

struct DataSplit
{
  std::vector<TimeSeries> train;
  std::vector<TimeSeries> validation;
};

/// Excitation episodes; episode e uses a seed derived from (seed, e).
inline std::vector<TimeSeries> generate_episodes(const ExperimentConfig & c, std::uint64_t seed)
{
  const Plant plant = c.make_plant();
  std::vector<TimeSeries> out;
  for (std::size_t e = 0; e < c.episodes; ++e) {
    ExcitationSpec es = c.excitation;
    es.seed = detail::derive_seed(seed, 10 + e);
    out.push_back(collect_trajectory(plant, generate_excitation(es), c.initial_state(plant)));
  }
  return out;
}

/// Hold out the tail of each episode, keep `fraction` of the rest, then
/// symmetrize both parts if configured.
inline DataSplit prepare_data(const ExperimentConfig & c, const std::vector<TimeSeries> & episodes, double fraction)
{
  auto [train, val] = holdout_split(episodes, c.holdout);
  DataSplit s{take_fraction(train, fraction), std::move(val)};
  if (c.symmetrize) {
    const SymmetryMap sym = c.symmetry_map(c.make_plant());
    s.train = symmetrize_all(s.train, sym);
    s.validation = symmetrize_all(s.validation, sym);
  }
  return s;
}

struct TrainedSurrogate
{
  TrainResult result;
  double val_rmse_1{std::numeric_limits<double>::quiet_NaN()};
  double val_rmse_N{std::numeric_limits<double>::quiet_NaN()};
};

inline TrainedSurrogate train_surrogate(const ExperimentConfig & c, const DataSplit & data, std::uint64_t seed)
{
  const ModelDims dims = c.model;
  const auto windows = split_windows(data.train, dims.M, dims.N, dims.d);
  const WindowedDataset val(std::make_shared<const std::vector<TimeSeries>>(data.validation), dims.M, dims.N,
                            dims.d);
  TrainConfig tc = c.train;
  tc.seed = detail::derive_seed(seed, 21);
  TrainedSurrogate out;
  out.result = train(init_model(dims, fit_normalization(data.train), detail::derive_seed(seed, 20)), windows,
                     val.empty() ? nullptr : &val, tc);
  if (!val.empty()) {
    out.val_rmse_1 = normalized_rmse(out.result.model, val, 1);
    out.val_rmse_N = normalized_rmse(out.result.model, val, dims.N);
  }
  return out;
}

/// Next-N-step predictions for every window of an episode, next to the truth.
inline std::string prediction_csv(const SurrogateModel & model, const TimeSeries & episode)
{
  const WindowedDataset ds(std::make_shared<const std::vector<TimeSeries>>(std::vector<TimeSeries>{episode}),
                           model.dims.M, model.dims.N, model.dims.d);
  if (ds.empty()) throw DimensionError("predict: episode shorter than M + 2d + 2 + N samples");
  std::ostringstream os;
  os << "t,step,t_target";
  for (Eigen::Index j = 0; j < model.dims.p; ++j) os << ",pred_" << j + 1;
  for (Eigen::Index j = 0; j < model.dims.p; ++j) os << ",true_" << j + 1;
  os << '\n';
  const std::size_t H = model.history();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const WindowSample w = ds.sample(i);
    const Matrix pred = predict(model, w.history, w.controls);
    const double t = episode.time(ds.index(i).start + H - 1);
    for (Eigen::Index k = 0; k < pred.rows(); ++k) {
      os << detail::fmt_double(t) << ',' << k + 1 << ',' << detail::fmt_double(t + static_cast<double>(k + 1) * episode.dt());
      for (Eigen::Index j = 0; j < pred.cols(); ++j) os << ',' << detail::fmt_double(pred(k, j));
      for (Eigen::Index j = 0; j < pred.cols(); ++j) os << ',' << detail::fmt_double(w.targets(k, j));
      os << '\n';
    }
  }
  return os.str();
}

struct SweepRow
{
  std::uint64_t seed{0};
  double fraction{1.0};
  MetricsReport metrics;
  double val_rmse_N{0.0};
  SolveStats stats;
};

struct SweepAggregate
{
  double fraction{1.0};
  std::size_t runs{0};
  double e_mean{0.0}, e_mean_std{0.0};
  double e_max{0.0}, e_max_std{0.0};
  double control_cost{0.0}, control_cost_std{0.0};
};

struct SweepResult
{
  std::vector<SweepRow> rows;  ///< ordered by (seed, fraction)
  std::vector<SweepAggregate> aggregates;
};

/**
 * @brief Train and control for every (seed, fraction) pair. Data come from
 * the master seed; run k trains with seed + k. Runs execute on worker
 * threads and are stored in (seed, fraction) order.
 */
inline SweepResult run_sweep(const ExperimentConfig & c, std::size_t threads = 0)
{
  const auto episodes = generate_episodes(c, c.seed);
  const Plant plant = c.make_plant();
  const ReferenceTrajectory ref = c.reference_trajectory();
  const std::size_t F = c.sweep_fractions.size();
  SweepResult res;
  res.rows.resize(c.sweep_seeds * F);
  std::vector<std::exception_ptr> errors(res.rows.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < res.rows.size(); i = next++) {
      try {
        SweepRow & r = res.rows[i];
        r.seed = c.seed + i / F;
        r.fraction = c.sweep_fractions[i % F];
        const auto trained = train_surrogate(c, prepare_data(c, episodes, r.fraction), r.seed);
        const auto cl = run_closed_loop(plant, trained.result.model, ref, c.horizon, c.initial_state(plant),
                                        c.duration_s, {c.warmup_s, {}});
        r.metrics = cl.metrics;
        r.stats = cl.stats;
        r.val_rmse_N = trained.val_rmse_N;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, res.rows.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto & t : pool) t.join();
  for (const auto & e : errors)
    if (e) std::rethrow_exception(e);

  const auto mean_std = [](const std::vector<double> & v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
  };
  for (std::size_t f = 0; f < F; ++f) {
    std::vector<double> em, ex, cc;
    for (std::size_t i = f; i < res.rows.size(); i += F) {
      em.push_back(res.rows[i].metrics.e_mean);
      ex.push_back(res.rows[i].metrics.e_max);
      cc.push_back(res.rows[i].metrics.control_cost);
    }
    SweepAggregate a;
    a.fraction = c.sweep_fractions[f];
    a.runs = em.size();
    std::tie(a.e_mean, a.e_mean_std) = mean_std(em);
    std::tie(a.e_max, a.e_max_std) = mean_std(ex);
    std::tie(a.control_cost, a.control_cost_std) = mean_std(cc);
    res.aggregates.push_back(a);
  }
  return res;
}

/// Run rows then one `mean` row per fraction; std columns are empty on run rows.
inline std::string sweep_csv(const SweepResult & s)
{
  using detail::fmt_double;
  std::string out = "row,seed,fraction,e_mean,e_max,control_cost,val_rmse,e_mean_std,e_max_std,control_cost_std\n";
  for (const auto & r : s.rows)
    out += "run," + std::to_string(r.seed) + "," + fmt_double(r.fraction) + "," + fmt_double(r.metrics.e_mean) + ","
         + fmt_double(r.metrics.e_max) + "," + fmt_double(r.metrics.control_cost) + "," + fmt_double(r.val_rmse_N)
         + ",,,\n";
  for (const auto & a : s.aggregates)
    out += "mean,," + fmt_double(a.fraction) + "," + fmt_double(a.e_mean) + "," + fmt_double(a.e_max) + ","
         + fmt_double(a.control_cost) + ",," + fmt_double(a.e_mean_std) + "," + fmt_double(a.e_max_std) + ","
         + fmt_double(a.control_cost_std) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace detail {

inline void ensure_dir(const std::string & dir)
{
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

inline std::string join_path(const std::string & dir, const std::string & name)
{
  return (std::filesystem::path(dir) / name).string();
}

/// Raw episodes `episode_NNN.csv` of a data directory, sorted by name.
inline std::vector<std::string> episode_files(const std::string & dir)
{
  std::vector<std::string> out;
  std::error_code ec;
  for (const auto & e : std::filesystem::directory_iterator(dir, ec)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("episode_", 0) == 0 && name.size() > 4 && name.substr(name.size() - 4) == ".csv")
      out.push_back(e.path().string());
  }
  if (ec) throw IoError("cannot list '" + dir + "': " + ec.message());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no episode_*.csv files in '" + dir + "'");
  return out;
}

inline std::string pad3(std::size_t i)
{
  std::string s = std::to_string(i);
  return std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

}  // namespace detail

/// Manifest text: tool version, command, seed, artifact hashes and the config (verbatim and resolved).
inline std::string manifest_text(const std::string & command, const ExperimentConfig * c,
                                 const std::vector<std::pair<std::string, std::string>> & entries)
{
  std::ostringstream os;
  os << "deepmpc-manifest 1\n";
  os << "version: " << version << '\n';
  os << "command: " << command << '\n';
  if (c) os << "seed: " << c->seed << '\n';
  for (const auto & [k, v] : entries) os << k << ": " << v << '\n';
  if (c) {
    os << "--- config (as given)\n" << c->source;
    if (!c->source.empty() && c->source.back() != '\n') os << '\n';
    os << "--- config (resolved)\n" << serialize_config(*c);
  }
  return os.str();
}

struct Artifacts
{
  std::string dir;
  std::vector<std::pair<std::string, std::string>> entries;

  void write(const std::string & name, const std::string & content)
  {
    detail::write_file(detail::join_path(dir, name), content);
    entries.emplace_back("artifact " + name, detail::hex64(detail::fnv1a(content)));
  }
  void note(const std::string & key, const std::string & value) { entries.emplace_back(key, value); }
  void manifest(const std::string & command, const ExperimentConfig * c) const
  {
    detail::write_file(detail::join_path(dir, "manifest.txt"), manifest_text(command, c, entries));
  }
};

// ---------------------------------------------------------------------------
// Command line

namespace detail {

struct CliState
{
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet{false};
  std::string data, model, episode, trajectory;
  std::optional<double> warmup;
};

struct CommandContext
{
  const CliState & cli;
  std::ostream & out;

  bool has_config() const { return !cli.config_path.empty(); }

  ExperimentConfig config() const
  {
    if (!has_config()) throw ConfigError("--config is required for this command");
    ExperimentConfig c = parse_config(cli.config_path);
    if (cli.seed) c.seed = *cli.seed;
    if (!cli.out.empty()) c.output_dir = cli.out;
    return c;
  }

  Artifacts artifacts(const std::string & dir) const
  {
    ensure_dir(dir);
    return Artifacts{dir, {}};
  }

  void log(const std::string & s) const
  {
    if (!cli.quiet) out << s << '\n';
  }
};

inline std::vector<TimeSeries> load_or_generate(const CommandContext & ctx, const ExperimentConfig & c)
{
  if (ctx.cli.data.empty()) return generate_episodes(c, c.seed);
  std::vector<TimeSeries> eps;
  for (const auto & f : episode_files(ctx.cli.data)) eps.push_back(load_episode(f));
  for (const auto & e : eps)
    if (e.p() != c.model.p || e.m() != c.model.m || std::abs(e.dt() - c.plant.dt) > 1e-9)
      throw ConfigError("episode data do not match the configured plant");
  return eps;
}

inline SurrogateModel model_for(const CommandContext & ctx, const ExperimentConfig & c, Artifacts & art)
{
  if (!ctx.cli.model.empty()) {
    SurrogateModel m = load_model(ctx.cli.model);
    if (m.dims.p != c.model.p || m.dims.m != c.model.m)
      throw ConfigError("checkpoint dimensions do not match the configured plant");
    art.note("checkpoint source", ctx.cli.model);
    return m;
  }
  ctx.log("no --model given: training from the configuration");
  auto trained = train_surrogate(c, prepare_data(c, load_or_generate(ctx, c), c.fraction), c.seed);
  art.write("model.ckpt", serialize_model(trained.result.model));
  return trained.result.model;
}

inline void check_stats(const SolveStats & s)
{
  if (s.violations() > 0)
    throw SolverError("solver returned " + std::to_string(s.infeasible) + " infeasible and "
                      + std::to_string(s.cost_increases) + " cost-increasing solutions");
}

inline int cmd_generate(const CommandContext & ctx)
{
  const ExperimentConfig c = ctx.config();
  Artifacts art = ctx.artifacts(c.output_dir);
  const auto eps = generate_episodes(c, c.seed);
  const SymmetryMap sym = c.symmetry_map(c.make_plant());
  for (std::size_t e = 0; e < eps.size(); ++e) {
    const std::string name = "episode_" + pad3(e) + ".csv";
    art.write(name, to_csv(eps[e]));
    write_file(join_path(c.output_dir, name + ".meta"),
               episode_metadata({{"plant", to_string(c.plant.kind)},
                                 {"seed", std::to_string(derive_seed(c.seed, 10 + e))},
                                 {"dt", fmt_short(c.plant.dt)},
                                 {"samples", std::to_string(eps[e].size())}}));
    if (c.symmetrize) {
      const std::string sdir = join_path(c.output_dir, "symmetrized");
      ensure_dir(sdir);
      art.write("symmetrized/" + name, to_csv(apply_symmetry(eps[e], sym)));
    }
  }
  art.manifest("generate-data", &c);
  ctx.log("wrote " + std::to_string(eps.size()) + " episode(s) to " + c.output_dir);
  return exit_ok;
}

inline int cmd_train(const CommandContext & ctx)
{
  const ExperimentConfig c = ctx.config();
  Artifacts art = ctx.artifacts(c.output_dir);
  const auto trained = train_surrogate(c, prepare_data(c, load_or_generate(ctx, c), c.fraction), c.seed);
  const std::string ckpt = serialize_model(trained.result.model);
  art.write("model.ckpt", ckpt);
  art.write("loss_history.csv", loss_history_csv(trained.result.history));
  art.note("checkpoint", model_hash(trained.result.model));
  art.note("val_rmse_1", fmt_double(trained.val_rmse_1));
  art.note("val_rmse_N", fmt_double(trained.val_rmse_N));
  art.manifest("train", &c);
  ctx.log("held-out normalized RMSE: 1-step " + fmt_short(trained.val_rmse_1) + ", " + std::to_string(c.model.N)
          + "-step " + fmt_short(trained.val_rmse_N));
  return exit_ok;
}

inline int cmd_predict(const CommandContext & ctx)
{
  if (ctx.cli.model.empty() || ctx.cli.episode.empty()) throw ConfigError("predict needs --model and --episode");
  const SurrogateModel model = load_model(ctx.cli.model);
  const TimeSeries ep = load_episode(ctx.cli.episode);
  if (ep.p() != model.dims.p || ep.m() != model.dims.m) throw ConfigError("episode does not match the checkpoint");
  std::optional<ExperimentConfig> c;
  if (ctx.has_config()) c = ctx.config();
  Artifacts art = ctx.artifacts(!ctx.cli.out.empty() ? ctx.cli.out : c ? c->output_dir : std::string("out"));
  art.write("predictions.csv", prediction_csv(model, ep));
  art.note("checkpoint", model_hash(model));
  art.manifest("predict", c ? &*c : nullptr);
  ctx.log("wrote " + join_path(art.dir, "predictions.csv"));
  return exit_ok;
}

inline int cmd_control(const CommandContext & ctx)
{
  const ExperimentConfig c = ctx.config();
  Artifacts art = ctx.artifacts(c.output_dir);
  const SurrogateModel model = model_for(ctx, c, art);
  const Plant plant = c.make_plant();
  const ReferenceTrajectory ref = c.reference_trajectory();
  const auto res = run_closed_loop(plant, model, ref, c.horizon, c.initial_state(plant), c.duration_s,
                                   {c.warmup_s, {}});
  art.write("closed_loop.csv", to_csv(res.trajectory, &ref));
  art.write("metrics.txt", res.metrics.to_text());
  art.note("checkpoint", model_hash(model));
  art.note("solves", std::to_string(res.stats.solves));
  art.note("solver violations", std::to_string(res.stats.violations()));
  art.manifest("control", &c);
  ctx.log(res.metrics.to_text());
  check_stats(res.stats);
  return exit_ok;
}

inline int cmd_online(const CommandContext & ctx)
{
  const ExperimentConfig c = ctx.config();
  Artifacts art = ctx.artifacts(c.output_dir);
  const SurrogateModel model = model_for(ctx, c, art);
  const Plant plant = c.make_plant();
  const ReferenceTrajectory ref = c.reference_trajectory();
  OnlineSpec os = c.online;
  os.seed = derive_seed(c.seed, 30);
  os.warmup_s = c.warmup_s;
  OnlineOptions opt;
  opt.on_divergence = [&](std::size_t i, const std::string & msg) {
    ctx.log("interval " + std::to_string(i) + ": update diverged, keeping the previous model (" + msg + ")");
  };
  const auto res = run_online(plant, model, ref, c.horizon, os, c.initial_state(plant), c.duration_s, opt);
  art.write("online.csv", to_csv(res.trajectory, &ref));
  art.write("intervals.csv", interval_csv(res.intervals));
  art.write("metrics.txt", res.metrics.to_text());
  art.write("model_final.ckpt", serialize_model(res.model));
  art.note("checkpoint", model_hash(model));
  for (const auto & r : res.intervals) art.note("interval " + std::to_string(r.index) + " checkpoint", r.model_hash);
  art.note("solver violations", std::to_string(res.stats.violations()));
  art.manifest("online", &c);
  ctx.log(interval_csv(res.intervals));
  check_stats(res.stats);
  return exit_ok;
}

inline int cmd_metrics(const CommandContext & ctx)
{
  if (ctx.cli.trajectory.empty()) throw ConfigError("metrics needs --trajectory");
  const CsvRecord rec = from_csv(read_file(ctx.cli.trajectory));
  if (rec.ref.size() == 0) throw FormatError("trajectory has no ref_ columns");
  std::optional<ExperimentConfig> c;
  if (ctx.has_config()) c = ctx.config();
  ReferenceTrajectory ref;
  ref.dt = rec.series.dt();
  ref.targets = rec.ref;
  if (c) ref.mask = c->mask;
  else
    for (Eigen::Index j = 0; j < rec.ref.cols(); ++j) ref.mask.push_back(static_cast<std::size_t>(j));
  if (ref.mask.size() != static_cast<std::size_t>(rec.ref.cols()))
    throw ConfigError("reference.mask does not match the trajectory's ref_ columns");
  const double warmup = ctx.cli.warmup ? *ctx.cli.warmup : c ? c->warmup_s : 4.0;
  const MetricsReport m = detail::run_metrics(rec.series, ref, warmup);
  ctx.out << m.to_text();
  if (!ctx.cli.out.empty()) {
    Artifacts art = ctx.artifacts(ctx.cli.out);
    art.write("metrics.txt", m.to_text());
    art.note("trajectory", ctx.cli.trajectory);
    art.manifest("metrics", c ? &*c : nullptr);
  }
  return exit_ok;
}

inline int cmd_sweep(const CommandContext & ctx)
{
  const ExperimentConfig c = ctx.config();
  Artifacts art = ctx.artifacts(c.output_dir);
  const SweepResult s = run_sweep(c, c.threads);
  art.write("sweep.csv", sweep_csv(s));
  SolveStats total;
  for (const auto & r : s.rows) total += r.stats;
  art.note("runs", std::to_string(s.rows.size()));
  art.note("solver violations", std::to_string(total.violations()));
  art.manifest("sweep", &c);
  ctx.log(sweep_csv(s));
  check_stats(total);
  return exit_ok;
}

}  // namespace detail

/**
 * @brief Parse @p args (program name first) and run the subcommand.
 *
 * Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
 * 4 divergence, 5 solver failure, 1 anything else.
 */
inline int run_command(const std::vector<std::string> & args, std::ostream & out = std::cout,
                       std::ostream & err = std::cerr)
{
  detail::CliState st;
  CLI::App app{"Surrogate-model predictive control experiments", "deepmpc"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version);
  app.add_option("--config", st.config_path, "experiment config file");
  app.add_option("--seed", st.seed, "override the master seed");
  app.add_option("--out", st.out, "output directory");
  app.add_flag("--quiet", st.quiet, "suppress progress output");

  using Handler = int (*)(const detail::CommandContext &);
  std::vector<std::pair<CLI::App *, Handler>> commands;
  const auto sub = [&](const char * name, const char * help, Handler h) {
    CLI::App * s = app.add_subcommand(name, help);
    s->fallthrough();
    commands.emplace_back(s, h);
    return s;
  };
  sub("generate-data", "excite the plant and write episode files", detail::cmd_generate);
  sub("train", "train a surrogate and write a checkpoint", detail::cmd_train)
      ->add_option("--data", st.data, "directory of episode_*.csv files");
  auto * pr = sub("predict", "multi-step predictions along an episode", detail::cmd_predict);
  pr->add_option("--model", st.model, "checkpoint");
  pr->add_option("--episode", st.episode, "episode CSV");
  auto * ct = sub("control", "closed-loop run", detail::cmd_control);
  ct->add_option("--model", st.model, "checkpoint (default: train from the config)");
  ct->add_option("--data", st.data, "episodes used when training");
  auto * on = sub("online", "closed loop with online model updates", detail::cmd_online);
  on->add_option("--model", st.model, "checkpoint (default: train from the config)");
  on->add_option("--data", st.data, "episodes used when training");
  auto * me = sub("metrics", "tracking metrics of a trajectory CSV", detail::cmd_metrics);
  me->add_option("--trajectory", st.trajectory, "CSV with ref_ columns");
  me->add_option("--warmup", st.warmup, "seconds excluded from the sums");
  sub("sweep", "train and control over seeds and data fractions", detail::cmd_sweep);

  std::vector<const char *> argv;
  for (const auto & a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("deepmpc");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp & e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp & e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion & e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError & e) {
    app.exit(e, out, err);
    err << app.help();
    return exit_config;
  }

  const detail::CommandContext ctx{st, out};
  try {
    for (const auto & [s, h] : commands)
      if (s->parsed()) return h(ctx);
    return exit_config;
  } catch (const ConfigError & e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const DimensionError & e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const IoError & e) {
    err << "I/O error: " << e.what() << '\n';
    return exit_io;
  } catch (const FormatError & e) {
    err << "I/O error: " << e.what() << '\n';
    return exit_io;
  } catch (const DivergenceError & e) {
    err << "divergence: " << e.what() << '\n';
    return exit_divergence;
  } catch (const TrainingDivergence & e) {
    err << "divergence: " << e.what() << '\n';
    return exit_divergence;
  } catch (const SolverError & e) {
    err << "solver failure: " << e.what() << '\n';
    return exit_solver;
  } catch (const std::exception & e) {
    err << "error: " << e.what() << '\n';
    return exit_failure;
  }
}

}  // namespace deepmpc
