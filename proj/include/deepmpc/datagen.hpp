/**
 * @file datagen.hpp
 * @brief Excitation signals, trajectory collection, symmetry augmentation and
 * slicing of trajectories into training windows.
 */

#pragma once

#include "core.hpp"
#include "plants.hpp"

#include <map>
#include <memory>
#include <random>
#include <utility>

namespace deepmpc {

// ---------------------------------------------------------------------------
// Random numbers

namespace detail {

/// Uniform double in [0, 1) from 53 random bits; stable across standard libraries.
inline double uniform01(std::mt19937_64 & rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64 & rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Standard normal via Box-Muller (one value per call).
inline double normal(std::mt19937_64 & rng)
{
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template<typename T>
void shuffle(std::vector<T> & v, std::mt19937_64 & rng)
{
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

/// Derive an independent stream seed from a master seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag)
{
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Natural cubic spline

/**
 * @brief Natural cubic spline through equally spaced knots x_j = j * h.
 */
class NaturalCubicSpline
{
public:
  NaturalCubicSpline(double h, std::vector<double> y) : h_(h), y_(std::move(y))
  {
    const std::size_t n = y_.size();
    if (n < 2) throw DimensionError("spline: need at least two knots");
    second_.assign(n, 0.0);
    if (n > 2) {
      // Tridiagonal system for interior second derivatives (Thomas algorithm).
      const std::size_t k = n - 2;
      std::vector<double> c(k, 0.0), d(k, 0.0);
      for (std::size_t i = 0; i < k; ++i) {
        const double rhs = 6.0 * (y_[i + 2] - 2.0 * y_[i + 1] + y_[i]) / (h_ * h_);
        const double denom = 4.0 - (i > 0 ? c[i - 1] : 0.0);
        c[i] = 1.0 / denom;
        d[i] = (rhs - (i > 0 ? d[i - 1] : 0.0)) / denom;
      }
      for (std::size_t i = k; i-- > 0;) second_[i + 1] = d[i] - (i + 1 < k ? c[i] * second_[i + 2] : 0.0);
    }
  }

  /// Value on segment j at offset t from its left knot, 0 <= t <= h.
  double eval(std::size_t j, double t) const
  {
    if (t == 0.0 && j < y_.size()) return y_[j];
    if (j + 1 >= y_.size()) throw IndexError("spline: segment out of range");
    const double a = y_[j], b = y_[j + 1];
    const double ma = second_[j], mb = second_[j + 1];
    const double slope = (b - a) / h_ - h_ * (2.0 * ma + mb) / 6.0;
    return a + t * (slope + t * (ma / 2.0 + t * (mb - ma) / (6.0 * h_)));
  }

private:
  double h_;
  std::vector<double> y_;
  std::vector<double> second_;
};

// ---------------------------------------------------------------------------
// Excitation

struct ExcitationSpec
{
  double hold_s{0.5};
  Vector lower{Vector::Constant(1, -2.0)};
  Vector upper{Vector::Constant(1, 2.0)};
  double dt{0.1};
  double duration_s{100.0};
  std::uint64_t seed{0};

  Eigen::Index channels() const { return lower.size(); }
  std::size_t steps() const { return detail::step_index(duration_s, dt); }
  std::size_t hold_steps() const { return detail::step_index(hold_s, dt); }

  void validate() const
  {
    if (!(dt > 0.0)) throw ConfigError("excitation: dt must be positive");
    if (lower.size() < 1 || lower.size() != upper.size()) throw ConfigError("excitation: bad bounds");
    if ((lower.array() >= upper.array()).any()) throw ConfigError("excitation: u_min must be < u_max");
    try {
      if (hold_steps() < 1) throw ConfigError("excitation: hold_s must be >= dt");
      steps();
    } catch (const DimensionError &) {
      throw ConfigError("excitation: hold_s and duration_s must be multiples of dt");
    }
    if (duration_s < hold_s) throw ConfigError("excitation: duration_s must be >= hold_s");
  }
};

/// Sampled control signal on the lag-time grid (row i at t = i * dt).
struct ControlSignal
{
  double dt{0.1};
  Matrix u;
  std::size_t size() const { return static_cast<std::size_t>(u.rows()); }
};

/// Anchor values (rows = anchors at j * hold_s, cols = channels), drawn anchor-major.
inline Matrix draw_anchors(const ExcitationSpec & spec)
{
  spec.validate();
  const std::size_t n = spec.steps();
  const std::size_t hs = spec.hold_steps();
  const std::size_t last = n == 0 ? 0 : n - 1;
  const std::size_t anchors = last / hs + 1 + (last % hs != 0 ? 1 : 0);
  const std::size_t count = std::max<std::size_t>(anchors, 2);
  std::mt19937_64 rng(spec.seed);
  Matrix a(static_cast<Eigen::Index>(count), spec.channels());
  for (Eigen::Index j = 0; j < a.rows(); ++j)
    for (Eigen::Index c = 0; c < a.cols(); ++c) a(j, c) = detail::uniform(rng, spec.lower(c), spec.upper(c));
  return a;
}

/**
 * @brief Random yet continuously varying excitation: uniform anchors every
 * hold_s, natural cubic spline onto the dt grid, clamped to the bounds.
 */
inline ControlSignal generate_excitation(const ExcitationSpec & spec)
{
  const Matrix anchors = draw_anchors(spec);
  const std::size_t n = spec.steps();
  const std::size_t hs = spec.hold_steps();
  ControlSignal out;
  out.dt = spec.dt;
  out.u.resize(static_cast<Eigen::Index>(n), spec.channels());
  for (Eigen::Index c = 0; c < anchors.cols(); ++c) {
    std::vector<double> y(static_cast<std::size_t>(anchors.rows()));
    for (Eigen::Index j = 0; j < anchors.rows(); ++j) y[static_cast<std::size_t>(j)] = anchors(j, c);
    const NaturalCubicSpline spline(spec.hold_s, std::move(y));
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t seg = i / hs;
      const double t = static_cast<double>(i - seg * hs) * spec.dt;
      const double v = spline.eval(seg, t);
      out.u(static_cast<Eigen::Index>(i), c) = std::clamp(v, spec.lower(c), spec.upper(c));
    }
  }
  return out;
}

/**
 * @brief Step the plant under zero-order-held controls and record
 * (observe(y_i), u_i) for every lag step.
 */
inline TimeSeries collect_trajectory(const Plant & plant, const ControlSignal & excitation, const PlantState & y0,
                                     double t0 = 0.0)
{
  if (std::abs(excitation.dt - plant.dt()) > 1e-12) throw DimensionError("collect: excitation dt != plant lag time");
  if (excitation.u.cols() != plant.m()) throw DimensionError("collect: control dimension mismatch");
  if (!y0.allFinite()) throw DimensionError("collect: non-finite initial state");
  const auto n = static_cast<Eigen::Index>(excitation.size());
  Matrix z(n, plant.p());
  PlantState y = y0;
  for (Eigen::Index i = 0; i < n; ++i) {
    z.row(i) = plant.observe(y).transpose();
    const ControlVector u = excitation.u.row(i).transpose();
    if (i + 1 < n) y = plant.step(y, u, plant.dt(), t0 + static_cast<double>(i) * plant.dt());
  }
  return TimeSeries(plant.dt(), t0, std::move(z), excitation.u);
}

// ---------------------------------------------------------------------------
// Symmetry

/**
 * @brief Signed channel permutation on controls and observations:
 * mapped[i] = sign[i] * original[source[i]].
 */
struct SignedPermutation
{
  std::vector<std::size_t> source;
  std::vector<double> sign;

  std::size_t size() const { return source.size(); }

  Vector apply(const Eigen::Ref<const Vector> & v) const
  {
    if (static_cast<std::size_t>(v.size()) != source.size()) throw DimensionError("symmetry: dimension mismatch");
    Vector out(v.size());
    for (std::size_t i = 0; i < source.size(); ++i) out(static_cast<Eigen::Index>(i)) = sign[i] * v(static_cast<Eigen::Index>(source[i]));
    return out;
  }

  bool is_involution() const
  {
    if (source.size() != sign.size()) return false;
    for (std::size_t i = 0; i < source.size(); ++i) {
      const std::size_t j = source[i];
      if (j >= source.size() || source[j] != i || sign[i] * sign[j] != 1.0) return false;
    }
    return true;
  }
};

struct SymmetryMap
{
  SignedPermutation u_perm;
  SignedPermutation z_perm;

  bool is_involution() const { return u_perm.is_involution() && z_perm.is_involution(); }

  void validate() const
  {
    if (!is_involution()) throw ConfigError("symmetry map is not an involution");
  }
};

/**
 * Reflection symmetry for two inputs and (lift x3, drag x3) observations:
 * u -> (-u2, -u1), lift -> (-l2, -l1, -l3), drag -> (d2, d1, d3).
 */
inline SymmetryMap mirror_symmetry()
{
  SymmetryMap s;
  s.u_perm = {{1, 0}, {-1.0, -1.0}};
  s.z_perm = {{1, 0, 2, 4, 3, 5}, {-1.0, -1.0, -1.0, 1.0, 1.0, 1.0}};
  return s;
}

/// Sign flip of every channel, for plants that are odd in (y, u).
inline SymmetryMap sign_flip_symmetry(std::size_t p, std::size_t m)
{
  SymmetryMap s;
  for (std::size_t i = 0; i < m; ++i) s.u_perm.source.push_back(i), s.u_perm.sign.push_back(-1.0);
  for (std::size_t i = 0; i < p; ++i) s.z_perm.source.push_back(i), s.z_perm.sign.push_back(-1.0);
  return s;
}

/// Known equivariance of a built-in plant. Controlled Lorenz keeps (y3, z2) and flips the rest.
inline SymmetryMap plant_symmetry(const Plant & plant)
{
  switch (plant.kind()) {
    case PlantKind::MirrorOscillator: return mirror_symmetry();
    case PlantKind::LorenzControlled: return {{{0}, {-1.0}}, {{0, 1}, {-1.0, 1.0}}};
    default:
      return sign_flip_symmetry(static_cast<std::size_t>(plant.p()), static_cast<std::size_t>(plant.m()));
  }
}

inline TimeSeries apply_symmetry(const TimeSeries & data, const SymmetryMap & sym)
{
  if (static_cast<Eigen::Index>(sym.z_perm.size()) != data.p() || static_cast<Eigen::Index>(sym.u_perm.size()) != data.m())
    throw DimensionError("symmetrize: map dimensions do not match data");
  Matrix z(data.z().rows(), data.p()), u(data.u().rows(), data.m());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    z.row(i) = sym.z_perm.apply(data.z().row(i).transpose()).transpose();
    u.row(i) = sym.u_perm.apply(data.u().row(i).transpose()).transpose();
  }
  return TimeSeries(data.dt(), data.t0(), std::move(z), std::move(u));
}

/// Original plus mirrored copy; kept as two episodes so no window spans both.
inline std::pair<TimeSeries, TimeSeries> symmetrize(const TimeSeries & data, const SymmetryMap & sym)
{
  return {data, apply_symmetry(data, sym)};
}

/// Symmetrize every episode, doubling the episode list.
inline std::vector<TimeSeries> symmetrize_all(const std::vector<TimeSeries> & episodes, const SymmetryMap & sym)
{
  std::vector<TimeSeries> out;
  out.reserve(2 * episodes.size());
  for (const auto & e : episodes) {
    auto [a, b] = symmetrize(e, sym);
    out.push_back(std::move(a));
    out.push_back(std::move(b));
  }
  return out;
}

inline std::size_t total_samples(const std::vector<TimeSeries> & episodes)
{
  std::size_t n = 0;
  for (const auto & e : episodes) n += e.size();
  return n;
}

// ---------------------------------------------------------------------------
// Windowed datasets

/// Samples needed before the first prediction: M encoder windows of 2d+2 pairs.
constexpr std::size_t history_length(std::size_t M, std::size_t d) { return M + 2 * d + 2; }

/// One training sample, materialized.
struct WindowSample
{
  TimeSeries history;  ///< M+2d+2 samples; the u of the last sample is controls row 0
  Matrix controls;     ///< N x m, applied at history indices H-1 .. H+N-2
  Matrix targets;      ///< N x p, observations at H .. H+N-1
};

/**
 * @brief Training windows over a set of episodes.
 *
 * Sample s starts at index `start` of episode `episode`; a window never
 * crosses an episode boundary.
 */
class WindowedDataset
{
public:
  struct Index
  {
    std::size_t episode;
    std::size_t start;
  };

  WindowedDataset() = default;

  WindowedDataset(std::shared_ptr<const std::vector<TimeSeries>> episodes, std::size_t M, std::size_t N,
                  std::size_t d)
      : episodes_(std::move(episodes)), M_(M), N_(N), d_(d)
  {
    if (M < 1 || N < 1) throw DimensionError("windows: M and N must be >= 1");
    const std::size_t need = history_length(M, d) + N;
    for (std::size_t e = 0; e < episodes_->size(); ++e) {
      const auto & ep = (*episodes_)[e];
      if (ep.size() < need) continue;
      for (std::size_t s = 0; s + need <= ep.size(); ++s) index_.push_back({e, s});
    }
  }

  std::size_t size() const { return index_.size(); }
  bool empty() const { return index_.empty(); }
  std::size_t M() const { return M_; }
  std::size_t N() const { return N_; }
  std::size_t d() const { return d_; }
  std::size_t history() const { return history_length(M_, d_); }
  const std::vector<TimeSeries> & episodes() const { return *episodes_; }
  const Index & index(std::size_t i) const { return index_[i]; }

  Eigen::Index p() const { return episodes_->empty() ? 0 : episodes_->front().p(); }
  Eigen::Index m() const { return episodes_->empty() ? 0 : episodes_->front().m(); }

  WindowSample sample(std::size_t i) const
  {
    const auto & [e, s] = index_.at(i);
    const auto & ep = (*episodes_)[e];
    const std::size_t H = history();
    WindowSample w;
    w.history = ep.slice(s, H);
    w.controls = ep.u().middleRows(static_cast<Eigen::Index>(s + H - 1), static_cast<Eigen::Index>(N_));
    w.targets = ep.z().middleRows(static_cast<Eigen::Index>(s + H), static_cast<Eigen::Index>(N_));
    return w;
  }

  /// The M encoder windows of sample i (cells at history indices 2d+1 .. 2d+M).
  std::vector<DelayWindow> encoder_windows(std::size_t i) const
  {
    const auto & [e, s] = index_.at(i);
    std::vector<DelayWindow> out;
    for (std::size_t j = 0; j < M_; ++j) out.push_back(build_delay_window((*episodes_)[e], s + 2 * d_ + 1 + j, d_));
    return out;
  }

  /// Same episodes, horizon N'.
  WindowedDataset with_horizon(std::size_t N) const { return WindowedDataset(episodes_, M_, N, d_); }

  /// Keep the first `count` samples.
  WindowedDataset head(std::size_t count) const
  {
    WindowedDataset out = *this;
    out.index_.resize(std::min(count, index_.size()));
    return out;
  }

private:
  std::shared_ptr<const std::vector<TimeSeries>> episodes_ = std::make_shared<std::vector<TimeSeries>>();
  std::size_t M_{1}, N_{1}, d_{0};
  std::vector<Index> index_;
};

inline WindowedDataset split_windows(std::vector<TimeSeries> episodes, std::size_t M, std::size_t N, std::size_t d)
{
  auto shared = std::make_shared<const std::vector<TimeSeries>>(std::move(episodes));
  WindowedDataset ds(shared, M, N, d);
  if (ds.empty()) throw DimensionError("split_windows: series too short for M + 2d + 2 + N samples");
  return ds;
}

inline WindowedDataset split_windows(const TimeSeries & data, std::size_t M, std::size_t N, std::size_t d)
{
  return split_windows(std::vector<TimeSeries>{data}, M, N, d);
}

/// Chronological split: the final `fraction` of every episode is held out.
inline std::pair<std::vector<TimeSeries>, std::vector<TimeSeries>> holdout_split(
    const std::vector<TimeSeries> & episodes, double fraction = 0.1)
{
  std::vector<TimeSeries> train, val;
  for (const auto & e : episodes) {
    const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(e.size())));
    if (n_val == 0 || n_val >= e.size()) {
      train.push_back(e);
      continue;
    }
    train.push_back(e.slice(0, e.size() - n_val));
    val.push_back(e.slice(e.size() - n_val, n_val));
  }
  return {train, val};
}

/// First `fraction` of each episode (used by the data-fraction sweep).
inline std::vector<TimeSeries> take_fraction(const std::vector<TimeSeries> & episodes, double fraction)
{
  std::vector<TimeSeries> out;
  for (const auto & e : episodes) {
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(e.size()))));
    out.push_back(e.slice(0, std::min(n, e.size())));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episode files

inline std::string episode_metadata(const std::map<std::string, std::string> & fields)
{
  std::string out;
  for (const auto & [k, v] : fields) out += k + ": " + v + "\n";
  return out;
}

inline void save_episode(const std::string & csv_path, const TimeSeries & ep,
                         const std::map<std::string, std::string> & meta)
{
  detail::write_file(csv_path, to_csv(ep));
  detail::write_file(csv_path + ".meta", episode_metadata(meta));
}

inline TimeSeries load_episode(const std::string & csv_path) { return from_csv(detail::read_file(csv_path)).series; }

}  // namespace deepmpc
