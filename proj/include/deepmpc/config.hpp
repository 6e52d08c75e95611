/**
 * @file config.hpp
 * @brief Experiment configuration: a strict INI-like text format with dotted
 * section names.
 *
 * @code
 * seed = 7
 * [plant]
 * kind = VanDerPol
 * [plant.parameters]
 * mu = 1.0
 * [reference]
 * segments = 1@20; 0@20; -1@20
 * mask = 0
 * @endcode
 *
 * Both `key = value` and `key: value` are accepted; `#` starts a comment.
 * Vectors are comma separated, and a single value is broadcast to the
 * plant's input count. Reference segments are `v1,v2,...@duration`
 * separated by `;`.
 */

#pragma once

#include "online.hpp"

#include <functional>
#include <set>

namespace deepmpc {

struct ExperimentConfig
{
  std::uint64_t seed{0};
  std::string output_dir{"out"};

  PlantConfig plant;
  std::vector<double> y0;  ///< empty: the plant's default initial state

  ExcitationSpec excitation;
  std::size_t episodes{1};

  bool symmetrize{false};        ///< double the training data with the plant symmetry
  std::string symmetry{"auto"};  ///< auto, mirror, sign_flip
  double holdout{0.1};           ///< final fraction of each episode used for validation
  double fraction{1.0};          ///< leading fraction of the training part used

  ModelDims model;
  TrainConfig train;
  HorizonSpec horizon;
  OnlineSpec online;

  std::vector<ReferenceSegment> reference;
  std::vector<std::size_t> mask{0};
  double duration_s{60.0};
  double warmup_s{4.0};

  std::size_t sweep_seeds{5};
  std::vector<double> sweep_fractions{0.1, 0.5, 1.0};
  std::size_t threads{0};  ///< 0: hardware concurrency

  std::string source;  ///< text the config was parsed from

  Plant make_plant() const { return Plant(plant); }
  PlantState initial_state(const Plant & p) const
  {
    if (y0.empty()) return p.default_initial_state();
    return Eigen::Map<const Vector>(y0.data(), static_cast<Eigen::Index>(y0.size()));
  }
  ReferenceTrajectory reference_trajectory() const { return piecewise_reference(reference, mask, horizon.dt); }
  SymmetryMap symmetry_map(const Plant & p) const
  {
    if (symmetry == "mirror") return mirror_symmetry();
    if (symmetry == "sign_flip")
      return sign_flip_symmetry(static_cast<std::size_t>(p.p()), static_cast<std::size_t>(p.m()));
    return plant_symmetry(p);
  }
};

namespace detail {

struct ConfigField
{
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string &)> set;
};

inline std::string fmt_list(const std::vector<double> & v)
{
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt_double(v[i]);
  return s;
}

inline std::vector<double> parse_list(const std::string & s)
{
  std::vector<double> out;
  for (const auto & part : split(s, ',')) out.push_back(parse_double(trim(part)));
  if (out.empty()) throw FormatError("empty list");
  return out;
}

inline std::uint64_t parse_u64(const std::string & s)
{
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (!s.empty() && s[0] == '-') throw FormatError("negative");
    v = std::stoull(s, &used, 10);
  } catch (const std::exception &) {
    throw FormatError("expected a non-negative integer, got '" + s + "'");
  }
  if (used != s.size()) throw FormatError("expected a non-negative integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string & s)
{
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw FormatError("expected true or false, got '" + s + "'");
}

inline std::string fmt_segments(const std::vector<ReferenceSegment> & segs)
{
  std::string s;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    if (i) s += "; ";
    for (std::size_t j = 0; j < segs[i].values.size(); ++j) s += (j ? "," : "") + fmt_double(segs[i].values[j]);
    s += "@" + fmt_double(segs[i].duration_s);
  }
  return s;
}

inline std::vector<ReferenceSegment> parse_segments(const std::string & s)
{
  std::vector<ReferenceSegment> out;
  for (const auto & part : split(s, ';')) {
    const std::string t = trim(part);
    if (t.empty()) continue;
    const auto at = t.find('@');
    if (at == std::string::npos) throw FormatError("segment '" + t + "' lacks '@duration'");
    ReferenceSegment seg;
    seg.values = parse_list(t.substr(0, at));
    seg.duration_s = parse_double(trim(t.substr(at + 1)));
    out.push_back(std::move(seg));
  }
  if (out.empty()) throw FormatError("no reference segments");
  return out;
}

template<typename T>
ConfigField num_field(std::string sec, std::string key, T & ref)
{
  return {std::move(sec), std::move(key),
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(ref);
            else return std::to_string(ref);
          },
          [&ref](const std::string & v) {
            if constexpr (std::is_floating_point_v<T>) ref = parse_double(v);
            else ref = static_cast<T>(parse_u64(v));
          }};
}

inline ConfigField bool_field(std::string sec, std::string key, bool & ref)
{
  return {std::move(sec), std::move(key), [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref](const std::string & v) { ref = parse_bool(v); }};
}

inline ConfigField vector_field(std::string sec, std::string key, Vector & ref)
{
  return {std::move(sec), std::move(key),
          [&ref] { return fmt_list(std::vector<double>(ref.data(), ref.data() + ref.size())); },
          [&ref](const std::string & v) {
            const auto l = parse_list(v);
            ref = Eigen::Map<const Vector>(l.data(), static_cast<Eigen::Index>(l.size()));
          }};
}

inline ConfigField list_field(std::string sec, std::string key, std::vector<double> & ref, bool allow_empty)
{
  return {std::move(sec), std::move(key), [&ref] { return fmt_list(ref); },
          [&ref, allow_empty](const std::string & v) {
            if (allow_empty && v.empty()) ref.clear();
            else ref = parse_list(v);
          }};
}

inline void stage_fields(std::vector<ConfigField> & f, const std::string & sec, StageConfig & s)
{
  f.push_back(num_field(sec, "epochs", s.epochs));
  f.push_back(num_field(sec, "batch_size", s.batch_size));
  f.push_back(num_field(sec, "lr", s.lr));
  f.push_back(num_field(sec, "lr_final", s.lr_final));
}

/// Every scalar key of the format, in serialization order. Plant parameters
/// live in [plant.parameters] and are handled separately.
inline std::vector<ConfigField> config_fields(ExperimentConfig & c)
{
  std::vector<ConfigField> f;
  f.push_back(num_field("", "seed", c.seed));
  f.push_back({"", "output_dir", [&c] { return c.output_dir; }, [&c](const std::string & v) { c.output_dir = v; }});

  f.push_back({"plant", "kind", [&c] { return to_string(c.plant.kind); },
               [&c](const std::string & v) { c.plant.kind = plant_kind_from_string(v); }});
  f.push_back(num_field("plant", "dt", c.plant.dt));
  f.push_back(num_field("plant", "dt_plant", c.plant.dt_plant));
  f.push_back(list_field("plant", "y0", c.y0, true));

  f.push_back(num_field("excitation", "dt", c.excitation.dt));
  f.push_back(num_field("excitation", "hold_s", c.excitation.hold_s));
  f.push_back(num_field("excitation", "duration_s", c.excitation.duration_s));
  f.push_back(vector_field("excitation", "lower", c.excitation.lower));
  f.push_back(vector_field("excitation", "upper", c.excitation.upper));
  f.push_back(num_field("excitation", "episodes", c.episodes));

  f.push_back(bool_field("data", "symmetrize", c.symmetrize));
  f.push_back({"data", "symmetry", [&c] { return c.symmetry; }, [&c](const std::string & v) { c.symmetry = v; }});
  f.push_back(num_field("data", "holdout", c.holdout));
  f.push_back(num_field("data", "fraction", c.fraction));

  f.push_back(num_field("model", "M", c.model.M));
  f.push_back(num_field("model", "N", c.model.N));
  f.push_back(num_field("model", "d", c.model.d));
  f.push_back(num_field("model", "h_dim", c.model.h_dim));
  f.push_back(num_field("model", "hidden", c.model.hidden));
  f.push_back(num_field("model", "control_width", c.model.control_width));
  f.push_back(bool_field("model", "residual", c.model.residual));

  f.push_back(bool_field("train", "crbm", c.train.crbm_pretrain));
  f.push_back(bool_field("train", "single_step", c.train.single_step));
  f.push_back(bool_field("train", "multi_step", c.train.multi_step));
  f.push_back(num_field("train", "clip", c.train.clip));
  f.push_back(num_field("train.crbm", "epochs", c.train.crbm.epochs));
  f.push_back(num_field("train.crbm", "hidden", c.train.crbm.hidden));
  f.push_back(num_field("train.crbm", "lr", c.train.crbm.lr));
  f.push_back(num_field("train.crbm", "batch_size", c.train.crbm.batch_size));
  stage_fields(f, "train.single", c.train.single);
  stage_fields(f, "train.multi", c.train.multi);

  f.push_back(num_field("horizon", "N", c.horizon.N));
  f.push_back(num_field("horizon", "dt", c.horizon.dt));
  f.push_back(num_field("horizon", "alpha", c.horizon.alpha));
  f.push_back(num_field("horizon", "beta", c.horizon.beta));
  f.push_back(vector_field("horizon", "lower", c.horizon.lower));
  f.push_back(vector_field("horizon", "upper", c.horizon.upper));
  f.push_back(num_field("horizon", "max_iters", c.horizon.max_iters));
  f.push_back(num_field("horizon", "grad_tol", c.horizon.grad_tol));

  f.push_back(num_field("online", "interval_s", c.online.interval_s));
  stage_fields(f, "online", c.online.update);
  f.push_back(bool_field("online", "symmetrize", c.online.symmetrize));
  f.push_back({"online", "buffer", [&c] { return to_string(c.online.buffer); },
               [&c](const std::string & v) { c.online.buffer = buffer_policy_from_string(v); }});
  f.push_back(num_field("online", "clip", c.online.clip));

  f.push_back({"reference", "segments", [&c] { return fmt_segments(c.reference); },
               [&c](const std::string & v) { c.reference = parse_segments(v); }});
  f.push_back({"reference", "mask",
               [&c] {
                 std::string s;
                 for (std::size_t i = 0; i < c.mask.size(); ++i) s += (i ? ", " : "") + std::to_string(c.mask[i]);
                 return s;
               },
               [&c](const std::string & v) {
                 c.mask.clear();
                 for (const auto & part : split(v, ',')) c.mask.push_back(parse_u64(trim(part)));
               }});

  f.push_back(num_field("control", "duration_s", c.duration_s));
  f.push_back(num_field("control", "warmup_s", c.warmup_s));

  f.push_back(num_field("sweep", "seeds", c.sweep_seeds));
  f.push_back(list_field("sweep", "fractions", c.sweep_fractions, false));
  f.push_back(num_field("sweep", "threads", c.threads));
  return f;
}

inline bool close(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)); }

/// Broadcast length-1 bounds to the plant's input count.
inline void broadcast(Vector & v, Eigen::Index m)
{
  if (v.size() == 1 && m > 1) v = Vector::Constant(m, v(0));
}

}  // namespace detail

/**
 * @brief Check cross-field constraints and resolve derived fields (model
 * dimensions from the plant, broadcast bounds). Throws one ConfigError
 * listing every violated constraint.
 */
inline void finalize_config(ExperimentConfig & c)
{
  std::vector<std::string> problems;
  const auto check = [&](bool ok, const std::string & msg) {
    if (!ok) problems.push_back(msg);
  };
  const auto guard = [&](const std::function<void()> & fn) {
    try {
      fn();
    } catch (const Error & e) {
      problems.push_back(e.what());
    }
  };

  std::optional<Plant> plant;
  guard([&] { plant.emplace(c.plant); });
  const Eigen::Index m = plant ? plant->m() : c.excitation.lower.size();
  const Eigen::Index p = plant ? plant->p() : 1;
  if (plant) {
    c.plant.m = plant->m();
    c.plant.p = plant->p();
    c.model.p = p;
    c.model.m = m;
    check(c.y0.empty() || static_cast<Eigen::Index>(c.y0.size()) == plant->state_dim(),
          "plant.y0: expected " + std::to_string(plant->state_dim()) + " values");
  }
  for (Vector * v : {&c.excitation.lower, &c.excitation.upper, &c.horizon.lower, &c.horizon.upper})
    detail::broadcast(*v, m);

  if (!detail::close(c.plant.dt, c.excitation.dt) || !detail::close(c.plant.dt, c.horizon.dt))
    problems.push_back("dt mismatch: plant.dt = " + detail::fmt_short(c.plant.dt)
                       + ", excitation.dt = " + detail::fmt_short(c.excitation.dt)
                       + ", horizon.dt = " + detail::fmt_short(c.horizon.dt) + " must agree");
  check(c.excitation.lower.size() == m && c.excitation.upper.size() == m,
        "excitation bounds: expected " + std::to_string(m) + " values");
  check(c.horizon.lower.size() == m && c.horizon.upper.size() == m,
        "horizon bounds: expected " + std::to_string(m) + " values");
  guard([&] { c.excitation.validate(); });
  guard([&] { c.horizon.validate(); });
  guard([&] { c.model.validate(); });
  guard([&] { c.online.validate(c.horizon.dt); });
  check(c.model.N == c.horizon.N, "horizon.N = " + std::to_string(c.horizon.N) + " must equal model.N = "
                                      + std::to_string(c.model.N));
  check(c.episodes >= 1, "excitation.episodes must be >= 1");
  check(c.holdout > 0.0 && c.holdout < 1.0, "data.holdout must lie in (0, 1)");
  check(c.fraction > 0.0 && c.fraction <= 1.0, "data.fraction must lie in (0, 1]");
  check(c.symmetry == "auto" || c.symmetry == "mirror" || c.symmetry == "sign_flip",
        "data.symmetry must be auto, mirror or sign_flip");
  check(c.sweep_seeds >= 1, "sweep.seeds must be >= 1");
  for (double f : c.sweep_fractions) check(f > 0.0 && f <= 1.0, "sweep.fractions must lie in (0, 1]");
  check(c.duration_s > c.warmup_s, "control.duration_s must exceed control.warmup_s");
  check(c.train.clip > 0.0, "train.clip must be positive");

  check(!c.reference.empty(), "reference.segments: missing");
  check(!c.mask.empty(), "reference.mask: missing");
  for (std::size_t j : c.mask)
    check(static_cast<Eigen::Index>(j) < p, "reference.mask: channel " + std::to_string(j) + " out of range");
  for (const auto & s : c.reference)
    check(s.values.size() == c.mask.size(),
          "reference.segments: each segment needs " + std::to_string(c.mask.size()) + " values");
  if (problems.empty()) guard([&] { c.reference_trajectory(); });
  if (problems.empty() && plant && c.symmetrize) guard([&] { c.symmetry_map(*plant).validate(); });

  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto & pr : problems) msg += "\n  - " + pr;
    throw ConfigError(msg);
  }
  if (plant) c.online.symmetry = c.symmetry_map(*plant);
}

/// Parse config text; syntax errors carry line numbers.
inline ExperimentConfig parse_config_text(const std::string & text)
{
  ExperimentConfig c;
  c.source = text;
  auto fields = detail::config_fields(c);
  std::map<std::string, detail::ConfigField *> by_name;
  std::set<std::string> sections{"plant.parameters"};
  for (auto & f : fields) {
    by_name[f.section + "." + f.key] = &f;
    sections.insert(f.section);
  }

  std::set<std::string> seen;
  std::string section;
  std::istringstream is(text);
  std::string raw;
  std::size_t lineno = 0;
  const auto fail = [&](const std::string & msg) {
    throw ConfigError("config line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = raw;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (!sections.count(section) || section.empty()) fail("unknown section [" + section + "]");
      continue;
    }
    const auto sep = line.find_first_of("=:");
    if (sep == std::string::npos) fail("expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, sep));
    const std::string value = detail::trim(line.substr(sep + 1));
    if (key.empty()) fail("missing key");
    const std::string full = section + "." + key;
    if (!seen.insert(full).second) fail("duplicate key '" + key + "'");
    try {
      if (section == "plant.parameters") {
        c.plant.parameters[key] = detail::parse_double(value);
        continue;
      }
      const auto it = by_name.find(full);
      if (it == by_name.end())
        fail("unknown key '" + key + "'" + (section.empty() ? std::string() : " in [" + section + "]"));
      it->second->set(value);
    } catch (const ConfigError & e) {
      if (std::string(e.what()).rfind("config line", 0) == 0) throw;
      fail(e.what());
    } catch (const Error & e) {
      fail("key '" + key + "': " + e.what());
    }
  }
  finalize_config(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string & path) { return parse_config_text(detail::read_file(path)); }

/// Every key with its current value; parse_config_text reads it back.
inline std::string serialize_config(const ExperimentConfig & config)
{
  ExperimentConfig c = config;
  std::ostringstream os;
  std::string section;
  bool first = true;
  for (const auto & f : detail::config_fields(c)) {
    if (f.section != section || first) {
      if (!f.section.empty()) os << (first ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
      first = false;
    }
    os << f.key << " = " << f.get() << '\n';
    if (f.section == "plant" && f.key == "y0" && !c.plant.parameters.empty()) {
      os << "\n[plant.parameters]\n";
      for (const auto & [k, v] : c.plant.parameters) os << k << " = " << detail::fmt_double(v) << '\n';
      section = "plant.parameters";
    }
  }
  return os.str();
}

inline bool operator==(const ExperimentConfig & a, const ExperimentConfig & b)
{
  return serialize_config(a) == serialize_config(b);
}

}  // namespace deepmpc
