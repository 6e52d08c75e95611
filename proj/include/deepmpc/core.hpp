/**
 * @file core.hpp
 * @brief Shared domain types: time series, delay windows, references and
 * tracking metrics.
 */

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepmpc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Control input u, one entry per actuator.
using ControlVector = Eigen::VectorXd;
/// Observation z = f(y), one entry per sensor channel.
using Observation = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

struct IndexError : Error
{
  using Error::Error;
};

struct DimensionError : Error
{
  using Error::Error;
};

struct FormatError : Error
{
  using Error::Error;
};

struct IoError : Error
{
  using Error::Error;
};

struct ConfigError : Error
{
  using Error::Error;
};

/// Non-finite values produced by a plant or by training.
struct DivergenceError : Error
{
  DivergenceError(const std::string & what, double t)
      : Error(what + " (t = " + std::to_string(t) + ")"), time(t)
  {}
  double time;
};

struct SolverError : Error
{
  using Error::Error;
};

namespace detail {

inline bool all_finite(const Eigen::Ref<const Matrix> & m)
{
  return m.allFinite();
}

/// Round-trip safe decimal formatting of a double.
inline std::string fmt_double(double v)
{
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Shortest-ish formatting for human-facing files (CSV, reports).
inline std::string fmt_short(double v)
{
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string fmt_hex(double v)
{
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

inline double parse_double(const std::string & s)
{
  if (s.empty()) throw FormatError("empty numeric field");
  char * end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw FormatError("bad numeric field '" + s + "'");
  return v;
}

inline std::string trim(const std::string & s)
{
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string & s, char sep)
{
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

/// 64-bit FNV-1a, used for checkpoint fingerprints in manifests.
inline std::uint64_t fnv1a(const std::string & bytes)
{
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v)
{
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file(const std::string & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string & path, const std::string & content)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// TimeSeries

/**
 * @brief Uniformly sampled record of (observation, control) pairs.
 *
 * Row i of z() and u() is the sample at time t0 + i * dt.
 */
class TimeSeries
{
public:
  TimeSeries() = default;

  TimeSeries(double dt, double t0, Matrix z, Matrix u) : dt_(dt), t0_(t0), z_(std::move(z)), u_(std::move(u))
  {
    if (!(dt_ > 0.0) || !std::isfinite(dt_)) throw DimensionError("TimeSeries: dt must be positive");
    if (z_.rows() != u_.rows()) throw DimensionError("TimeSeries: z and u row counts differ");
    if (z_.rows() < 1) throw DimensionError("TimeSeries: need at least one sample");
    if (z_.cols() < 1 || u_.cols() < 1) throw DimensionError("TimeSeries: p and m must be >= 1");
  }

  double dt() const { return dt_; }
  double t0() const { return t0_; }
  std::size_t size() const { return static_cast<std::size_t>(z_.rows()); }
  Eigen::Index p() const { return z_.cols(); }
  Eigen::Index m() const { return u_.cols(); }
  double time(std::size_t i) const { return t0_ + static_cast<double>(i) * dt_; }

  const Matrix & z() const { return z_; }
  const Matrix & u() const { return u_; }
  Observation z(std::size_t i) const { return z_.row(static_cast<Eigen::Index>(i)).transpose(); }
  ControlVector u(std::size_t i) const { return u_.row(static_cast<Eigen::Index>(i)).transpose(); }

  /// Samples [begin, begin + count) as a new series with shifted t0.
  TimeSeries slice(std::size_t begin, std::size_t count) const
  {
    if (begin + count > size() || count == 0) throw IndexError("TimeSeries::slice out of range");
    const auto b = static_cast<Eigen::Index>(begin);
    const auto c = static_cast<Eigen::Index>(count);
    return TimeSeries(dt_, time(begin), z_.middleRows(b, c), u_.middleRows(b, c));
  }

  bool operator==(const TimeSeries & o) const
  {
    return dt_ == o.dt_ && t0_ == o.t0_ && z_.rows() == o.z_.rows() && z_.cols() == o.z_.cols()
        && u_.cols() == o.u_.cols() && z_ == o.z_ && u_ == o.u_;
  }

private:
  double dt_{1.0};
  double t0_{0.0};
  Matrix z_;
  Matrix u_;
};

/// Concatenate series that share dt and dimensions (t0 of the first is kept).
inline TimeSeries concat(const std::vector<TimeSeries> & parts)
{
  if (parts.empty()) throw DimensionError("concat: no parts");
  Eigen::Index rows = 0;
  for (const auto & s : parts) {
    if (s.p() != parts[0].p() || s.m() != parts[0].m() || s.dt() != parts[0].dt())
      throw DimensionError("concat: incompatible series");
    rows += static_cast<Eigen::Index>(s.size());
  }
  Matrix z(rows, parts[0].p()), u(rows, parts[0].m());
  Eigen::Index r = 0;
  for (const auto & s : parts) {
    z.middleRows(r, s.z().rows()) = s.z();
    u.middleRows(r, s.u().rows()) = s.u();
    r += s.z().rows();
  }
  return TimeSeries(parts[0].dt(), parts[0].t0(), std::move(z), std::move(u));
}

// ---------------------------------------------------------------------------
// Delay windows

/// Number of (z, u) pairs in a delay window with d delays.
constexpr std::size_t zu_length(std::size_t d) { return 2 * d + 2; }
/// Number of recent controls in a delay window with d delays.
constexpr std::size_t u_length(std::size_t d) { return d + 1; }

/**
 * @brief Input of one recurrent cell at index k: the pairs (z, u) at
 * k-2d-1 .. k and the controls at k-d .. k.
 */
struct DelayWindow
{
  std::size_t d{0};
  Matrix zu_z;      ///< (2d+2) x p, oldest first
  Matrix zu_u;      ///< (2d+2) x m, oldest first
  Matrix u_recent;  ///< (d+1) x m, oldest first

  /// Checks lengths and that u_recent is the suffix of the history controls.
  bool consistent() const
  {
    const auto L = static_cast<Eigen::Index>(zu_length(d));
    const auto Lu = static_cast<Eigen::Index>(u_length(d));
    if (zu_z.rows() != L || zu_u.rows() != L || u_recent.rows() != Lu) return false;
    return u_recent == zu_u.bottomRows(Lu);
  }

  bool operator==(const DelayWindow & o) const
  {
    return d == o.d && zu_z == o.zu_z && zu_u == o.zu_u && u_recent == o.u_recent;
  }
};

inline DelayWindow build_delay_window(const TimeSeries & series, std::size_t k, std::size_t d)
{
  const std::size_t L = zu_length(d);
  if (k + 1 < L) throw IndexError("build_delay_window: k = " + std::to_string(k) + " < 2d+1");
  if (k >= series.size()) throw IndexError("build_delay_window: k beyond series length");
  const auto first = static_cast<Eigen::Index>(k + 1 - L);
  DelayWindow w;
  w.d = d;
  w.zu_z = series.z().middleRows(first, static_cast<Eigen::Index>(L));
  w.zu_u = series.u().middleRows(first, static_cast<Eigen::Index>(L));
  w.u_recent = w.zu_u.bottomRows(static_cast<Eigen::Index>(u_length(d)));
  return w;
}

// ---------------------------------------------------------------------------
// Reference and metrics

/**
 * @brief Per-step targets for the tracked observation channels.
 *
 * targets row i is the desired value at time i * dt for the channels listed
 * in mask (zero-based indices into the observation).
 */
struct ReferenceTrajectory
{
  double dt{0.1};
  Matrix targets;
  std::vector<std::size_t> mask;

  std::size_t tracked() const { return mask.size(); }
  std::size_t size() const { return static_cast<std::size_t>(targets.rows()); }

  void validate(Eigen::Index p) const
  {
    if (mask.empty()) throw DimensionError("reference: empty mask");
    if (static_cast<Eigen::Index>(mask.size()) != targets.cols())
      throw DimensionError("reference: mask size does not match target columns");
    for (auto j : mask)
      if (static_cast<Eigen::Index>(j) >= p) throw DimensionError("reference: mask index out of range");
  }

  /// Target row at step i; steps beyond the end repeat the final row.
  Vector at(std::size_t i) const
  {
    const auto r = static_cast<Eigen::Index>(std::min(i, size() - 1));
    return targets.row(r).transpose();
  }
};

/// Piecewise-constant reference: each segment holds its value for duration_s.
struct ReferenceSegment
{
  std::vector<double> values;
  double duration_s{0.0};
};

inline ReferenceTrajectory piecewise_reference(const std::vector<ReferenceSegment> & segments,
                                               std::vector<std::size_t> mask, double dt)
{
  if (segments.empty()) throw ConfigError("reference: no segments");
  std::vector<Vector> rows;
  for (const auto & s : segments) {
    if (s.values.size() != mask.size()) throw ConfigError("reference: segment width does not match mask");
    const auto steps = static_cast<std::size_t>(std::llround(s.duration_s / dt));
    Vector v = Eigen::Map<const Vector>(s.values.data(), static_cast<Eigen::Index>(s.values.size()));
    for (std::size_t i = 0; i < steps; ++i) rows.push_back(v);
  }
  ReferenceTrajectory ref;
  ref.dt = dt;
  ref.mask = std::move(mask);
  ref.targets.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ref.mask.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) ref.targets.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return ref;
}

struct MetricsReport
{
  double e_mean{0.0};
  double e_max{0.0};
  double control_cost{0.0};
  double warmup_s{0.0};
  double horizon_T{0.0};

  std::string to_text() const
  {
    std::ostringstream os;
    os << "e_mean: " << detail::fmt_double(e_mean) << '\n'
       << "e_max: " << detail::fmt_double(e_max) << '\n'
       << "control_cost: " << detail::fmt_double(control_cost) << '\n'
       << "warmup_s: " << detail::fmt_double(warmup_s) << '\n'
       << "horizon_T: " << detail::fmt_double(horizon_T) << '\n';
    return os.str();
  }

  static MetricsReport from_text(const std::string & text)
  {
    MetricsReport r;
    std::istringstream is(text);
    std::string line;
    int seen = 0;
    while (std::getline(is, line)) {
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto c = line.find(':');
      if (c == std::string::npos) throw FormatError("metrics: missing ':' in '" + line + "'");
      const auto key = detail::trim(line.substr(0, c));
      const double v = detail::parse_double(detail::trim(line.substr(c + 1)));
      if (key == "e_mean") r.e_mean = v;
      else if (key == "e_max") r.e_max = v;
      else if (key == "control_cost") r.control_cost = v;
      else if (key == "warmup_s") r.warmup_s = v;
      else if (key == "horizon_T") r.horizon_T = v;
      else throw FormatError("metrics: unknown key '" + key + "'");
      ++seen;
    }
    if (seen != 5) throw FormatError("metrics: expected 5 keys");
    return r;
  }
};

namespace detail {

inline std::size_t step_index(double t, double dt)
{
  const double x = t / dt;
  const double r = std::round(x);
  if (std::abs(x - r) > 1e-9 * std::max(1.0, std::abs(x))) throw DimensionError("time is not a multiple of dt");
  return static_cast<std::size_t>(r);
}

}  // namespace detail

/**
 * @brief Tracking error metrics over the sample range [warmup/dt, T/dt].
 *
 * e_mean = dt/T * sum_i (1/J) sum_j |z_{j,i} - ref_{j,i}|^2, normalized by T
 * even though the sum starts at the warmup index. e_max is the largest
 * per-step mean over the same range. control_cost is the 2-norm of every
 * applied control in the range.
 */
inline MetricsReport compute_metrics(const TimeSeries & achieved, const ReferenceTrajectory & ref, double T,
                                     double warmup)
{
  if (std::abs(achieved.dt() - ref.dt) > 1e-12 * ref.dt) throw DimensionError("compute_metrics: dt mismatch");
  ref.validate(achieved.p());
  if (!(T > 0.0)) throw DimensionError("compute_metrics: T must be positive");
  const std::size_t first = detail::step_index(warmup, achieved.dt());
  const std::size_t last = detail::step_index(T, achieved.dt());
  if (first >= last) throw IndexError("compute_metrics: empty summation range");
  if (last >= achieved.size() || last >= ref.size()) throw IndexError("compute_metrics: T/dt beyond series length");

  const double J = static_cast<double>(ref.tracked());
  double sum = 0.0, worst = 0.0, usq = 0.0;
  for (std::size_t i = first; i <= last; ++i) {
    double e = 0.0;
    for (std::size_t j = 0; j < ref.tracked(); ++j) {
      const double diff = achieved.z()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ref.mask[j]))
                        - ref.targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      e += diff * diff;
    }
    e /= J;
    sum += e;
    worst = std::max(worst, e);
    usq += achieved.u().row(static_cast<Eigen::Index>(i)).squaredNorm();
  }
  MetricsReport r;
  r.e_mean = achieved.dt() / T * sum;
  r.e_max = worst;
  r.control_cost = std::sqrt(usq);
  r.warmup_s = warmup;
  r.horizon_T = T;
  return r;
}

// ---------------------------------------------------------------------------
// CSV

/**
 * Header `t,z_1..z_p,u_1..u_m[,ref_1..ref_J]`. Values use "%.17g" so a
 * written series reads back bit-identical.
 */
inline std::string to_csv(const TimeSeries & s, const ReferenceTrajectory * ref = nullptr)
{
  std::ostringstream os;
  os << 't';
  for (Eigen::Index j = 0; j < s.p(); ++j) os << ",z_" << j + 1;
  for (Eigen::Index j = 0; j < s.m(); ++j) os << ",u_" << j + 1;
  if (ref)
    for (std::size_t j = 0; j < ref->tracked(); ++j) os << ",ref_" << j + 1;
  os << '\n';
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    os << detail::fmt_double(s.time(i));
    for (Eigen::Index j = 0; j < s.p(); ++j) os << ',' << detail::fmt_double(s.z()(r, j));
    for (Eigen::Index j = 0; j < s.m(); ++j) os << ',' << detail::fmt_double(s.u()(r, j));
    if (ref) {
      const Vector v = ref->at(i);
      for (Eigen::Index j = 0; j < v.size(); ++j) os << ',' << detail::fmt_double(v(j));
    }
    os << '\n';
  }
  return os.str();
}

/// Parsed CSV: the series plus any ref_ columns.
struct CsvRecord
{
  TimeSeries series;
  Matrix ref;  ///< empty when the file has no ref_ columns
};

inline CsvRecord from_csv(const std::string & text)
{
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("csv: empty input");
  const auto header = detail::split(detail::trim(line), ',');
  if (header.empty() || header[0] != "t") throw FormatError("csv: header must start with 't'");
  Eigen::Index p = 0, m = 0, J = 0;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const auto & h = header[c];
    const auto expect = [&](const char * prefix, Eigen::Index n) { return h == prefix + std::to_string(n + 1); };
    if (m == 0 && J == 0 && expect("z_", p)) ++p;
    else if (J == 0 && p > 0 && expect("u_", m)) ++m;
    else if (m > 0 && expect("ref_", J)) ++J;
    else throw FormatError("csv: unexpected column '" + h + "'");
  }
  if (p == 0 || m == 0) throw FormatError("csv: need z_ and u_ columns");

  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto cells = detail::split(line, ',');
    if (cells.size() != header.size())
      throw FormatError("csv: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) + " cells");
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto & c : cells) row.push_back(detail::parse_double(c));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError("csv: no data rows");
  const double t0 = rows[0][0];
  const double dt = rows.size() > 1 ? rows[1][0] - rows[0][0] : 1.0;
  const auto n = static_cast<Eigen::Index>(rows.size());
  Matrix z(n, p), u(n, m), ref(J > 0 ? n : 0, J);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto & r = rows[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < p; ++j) z(i, j) = r[static_cast<std::size_t>(1 + j)];
    for (Eigen::Index j = 0; j < m; ++j) u(i, j) = r[static_cast<std::size_t>(1 + p + j)];
    for (Eigen::Index j = 0; j < J; ++j) ref(i, j) = r[static_cast<std::size_t>(1 + p + m + j)];
  }
  // dt is recovered from the time column; the first gap is checked against the rest.
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double expected = t0 + static_cast<double>(i) * dt;
    if (std::abs(rows[i][0] - expected) > 1e-6 * std::max(1.0, std::abs(expected)))
      throw FormatError("csv: non-uniform time column at row " + std::to_string(i));
  }
  // Snap dt to 12 significant digits so 0.1 reads back as 0.1.
  if (rows.size() > 1) {
    const double span = rows.back()[0] - t0;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", span / static_cast<double>(rows.size() - 1));
    return CsvRecord{TimeSeries(std::strtod(buf, nullptr), t0, std::move(z), std::move(u)), std::move(ref)};
  }
  return CsvRecord{TimeSeries(dt, t0, std::move(z), std::move(u)), std::move(ref)};
}

}  // namespace deepmpc
