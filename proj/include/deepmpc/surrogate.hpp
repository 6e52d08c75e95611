/**
 * @file surrogate.hpp
 * @brief Recurrent encoder/decoder surrogate of the observation dynamics.
 *
 * Every cell k reads a delay window (2d+2 pairs (z, u) ending at k and the
 * d+1 most recent controls) and is split into three dense sub-networks:
 *
 *   h' = latent([h; zu_history])             latent dynamics (shared)
 *   c  = control(u_recent)                   control influence
 *   z' = output([h'; c]) (+ z_k if residual) next observation
 *
 * The M encoder cells only run the latent net; the N decoder cells run all
 * three and feed their predicted z into the windows of later cells. All
 * network arithmetic happens in normalized units; the public prediction
 * functions take and return raw units.
 */

#pragma once

#include "core.hpp"
#include "datagen.hpp"

#include <functional>
#include <numeric>
#include <optional>
#include <type_traits>

namespace deepmpc {

enum class Activation
{
  Tanh,
  Linear,
};

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "linear"; }

inline Activation activation_from_string(const std::string & s)
{
  if (s == "tanh") return Activation::Tanh;
  if (s == "linear") return Activation::Linear;
  throw FormatError("unknown activation '" + s + "'");
}

struct DenseLayer
{
  Matrix W;  ///< out x in
  Vector b;  ///< out
  Activation act{Activation::Tanh};

  Eigen::Index in() const { return W.cols(); }
  Eigen::Index out() const { return W.rows(); }
};

using LayerStack = std::vector<DenseLayer>;

struct CellWeights
{
  LayerStack latent;
  LayerStack control;
  LayerStack output;

  /// Visit every parameter block in a fixed order.
  template<typename F>
  void for_each(F && f)
  {
    for (auto * s : {&latent, &control, &output})
      for (auto & l : *s) {
        f(l.W);
        f(l.b);
      }
  }

  template<typename F>
  void for_each(F && f) const
  {
    for (const auto * s : {&latent, &control, &output})
      for (const auto & l : *s) {
        f(l.W);
        f(l.b);
      }
  }

  std::size_t parameter_count() const
  {
    std::size_t n = 0;
    for_each([&](const auto & a) { n += static_cast<std::size_t>(a.size()); });
    return n;
  }
};

/// Flatten parameters in for_each order.
inline Vector to_vector(const CellWeights & w)
{
  Vector v(static_cast<Eigen::Index>(w.parameter_count()));
  Eigen::Index o = 0;
  w.for_each([&](const auto & a) {
    v.segment(o, a.size()) = Eigen::Map<const Vector>(a.data(), a.size());
    o += a.size();
  });
  return v;
}

inline void from_vector(const Vector & v, CellWeights & w)
{
  if (static_cast<std::size_t>(v.size()) != w.parameter_count()) throw DimensionError("from_vector: size mismatch");
  Eigen::Index o = 0;
  w.for_each([&](auto & a) {
    Eigen::Map<Vector>(a.data(), a.size()) = v.segment(o, a.size());
    o += a.size();
  });
}

inline CellWeights zeros_like(const CellWeights & w)
{
  CellWeights z = w;
  z.for_each([](auto & a) { a.setZero(); });
  return z;
}

struct ModelDims
{
  std::size_t M{10};
  std::size_t N{5};
  std::size_t d{3};
  std::size_t h_dim{32};
  std::size_t hidden{64};
  std::size_t control_width{16};
  Eigen::Index p{1};
  Eigen::Index m{1};
  bool residual{true};

  std::size_t history() const { return history_length(M, d); }
  Eigen::Index pair_width() const { return p + m; }
  Eigen::Index latent_input() const
  {
    return static_cast<Eigen::Index>(h_dim) + static_cast<Eigen::Index>(zu_length(d)) * pair_width();
  }
  Eigen::Index control_input() const { return static_cast<Eigen::Index>(u_length(d)) * m; }
  Eigen::Index output_input() const { return static_cast<Eigen::Index>(h_dim + control_width); }

  void validate() const
  {
    if (M < 1 || N < 1) throw ConfigError("model: M and N must be >= 1");
    if (h_dim < 1 || hidden < 1 || control_width < 1) throw ConfigError("model: layer sizes must be >= 1");
    if (p < 1 || m < 1) throw ConfigError("model: p and m must be >= 1");
  }

  bool operator==(const ModelDims &) const = default;
};

/// Per-channel affine statistics frozen from training data.
struct Normalization
{
  Vector z_mean, z_std, u_mean, u_std;

  static Normalization identity(Eigen::Index p, Eigen::Index m)
  {
    return {Vector::Zero(p), Vector::Ones(p), Vector::Zero(m), Vector::Ones(m)};
  }

  Matrix normalize_z(const Matrix & z) const  // rows = samples
  {
    return (z.rowwise() - z_mean.transpose()).array().rowwise() / z_std.transpose().array();
  }
  Matrix denormalize_z(const Matrix & z) const
  {
    return (z.array().rowwise() * z_std.transpose().array()).rowwise() + z_mean.transpose().array();
  }
  Matrix normalize_u(const Matrix & u) const
  {
    return (u.rowwise() - u_mean.transpose()).array().rowwise() / u_std.transpose().array();
  }
  Matrix denormalize_u(const Matrix & u) const
  {
    return (u.array().rowwise() * u_std.transpose().array()).rowwise() + u_mean.transpose().array();
  }
};

inline Normalization fit_normalization(const std::vector<TimeSeries> & episodes)
{
  if (episodes.empty()) throw DimensionError("fit_normalization: no data");
  const Matrix z = concat(episodes).z(), u = concat(episodes).u();
  auto stats = [](const Matrix & x, Vector & mean, Vector & sd) {
    mean = x.colwise().mean().transpose();
    sd = ((x.rowwise() - mean.transpose()).array().square().colwise().sum() / static_cast<double>(x.rows()))
             .sqrt()
             .transpose();
    for (Eigen::Index j = 0; j < sd.size(); ++j)
      if (!(sd(j) > 1e-12)) sd(j) = 1.0;
  };
  Normalization n;
  stats(z, n.z_mean, n.z_std);
  stats(u, n.u_mean, n.u_std);
  return n;
}

/**
 * @brief Surrogate model: dimensions, one shared set of cell weights and the
 * normalization statistics. The encoder cell is the latent sub-network of
 * the decoder cell, not a copy of it.
 */
struct SurrogateModel
{
  ModelDims dims;
  CellWeights weights;
  Normalization norm;

  const LayerStack & encoder_cell() const { return weights.latent; }
  const CellWeights & decoder_cell() const { return weights; }
  std::size_t history() const { return dims.history(); }
  Eigen::Index p() const { return dims.p; }
  Eigen::Index m() const { return dims.m; }
};

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

inline DenseLayer glorot_layer(Eigen::Index in, Eigen::Index out, Activation act, std::mt19937_64 & rng,
                               double scale = 1.0)
{
  DenseLayer l;
  l.act = act;
  l.W.resize(out, in);
  l.b = Vector::Zero(out);
  const double limit = scale * std::sqrt(6.0 / static_cast<double>(in + out));
  for (Eigen::Index j = 0; j < in; ++j)
    for (Eigen::Index i = 0; i < out; ++i) l.W(i, j) = uniform(rng, -limit, limit);
  return l;
}

}  // namespace detail

/// Seeded Glorot-uniform weights with zero biases; the linear head is scaled by 0.1.
inline SurrogateModel init_model(const ModelDims & dims, Normalization norm, std::uint64_t seed)
{
  dims.validate();
  if (norm.z_mean.size() != dims.p || norm.u_mean.size() != dims.m)
    throw DimensionError("init_model: normalization dimensions do not match");
  std::mt19937_64 rng(seed);
  const auto H = static_cast<Eigen::Index>(dims.h_dim), W = static_cast<Eigen::Index>(dims.hidden),
             C = static_cast<Eigen::Index>(dims.control_width);
  SurrogateModel model{dims, {}, std::move(norm)};
  auto & w = model.weights;
  w.latent.push_back(detail::glorot_layer(dims.latent_input(), W, Activation::Tanh, rng));
  w.latent.push_back(detail::glorot_layer(W, H, Activation::Tanh, rng));
  w.control.push_back(detail::glorot_layer(dims.control_input(), C, Activation::Tanh, rng));
  w.output.push_back(detail::glorot_layer(dims.output_input(), W, Activation::Tanh, rng));
  w.output.push_back(detail::glorot_layer(W, dims.p, Activation::Linear, rng, 0.1));
  return model;
}

/// Checks the layer shape chain of every sub-network against dims.
inline void validate_shapes(const SurrogateModel & model)
{
  const auto & d = model.dims;
  const auto check = [](const LayerStack & s, Eigen::Index in, Eigen::Index out, const char * name) {
    if (s.empty()) throw FormatError(std::string("shape: empty ") + name + " net");
    Eigen::Index cur = in;
    for (const auto & l : s) {
      if (l.W.cols() != cur || l.b.size() != l.W.rows()) throw FormatError(std::string("shape: ") + name + " chain broken");
      cur = l.W.rows();
    }
    if (cur != out) throw FormatError(std::string("shape: ") + name + " output width");
  };
  check(model.weights.latent, d.latent_input(), static_cast<Eigen::Index>(d.h_dim), "latent");
  check(model.weights.control, d.control_input(), static_cast<Eigen::Index>(d.control_width), "control");
  check(model.weights.output, d.output_input(), d.p, "output");
  const auto & n = model.norm;
  if (n.z_mean.size() != d.p || n.z_std.size() != d.p || n.u_mean.size() != d.m || n.u_std.size() != d.m)
    throw FormatError("shape: normalization dimensions");
}

// ---------------------------------------------------------------------------
// Dense stacks

struct StackCache
{
  std::vector<Matrix> in;
  std::vector<Matrix> out;
};

/// Column-batched forward pass; each column is one sample.
inline Matrix stack_forward(const LayerStack & s, const Matrix & X, StackCache * cache = nullptr)
{
  if (cache) {
    cache->in.resize(s.size());
    cache->out.resize(s.size());
  }
  Matrix a = X;
  for (std::size_t l = 0; l < s.size(); ++l) {
    Matrix z = s[l].W * a;
    z.colwise() += s[l].b;
    if (s[l].act == Activation::Tanh) z = z.array().tanh();
    if (cache) {
      cache->in[l] = std::move(a);
      cache->out[l] = z;
    }
    a = std::move(z);
  }
  return a;
}

/// Reverse pass; accumulates into grad when given and returns dL/dX.
inline Matrix stack_backward(const LayerStack & s, const StackCache & cache, Matrix dY, LayerStack * grad)
{
  for (std::size_t l = s.size(); l-- > 0;) {
    if (s[l].act == Activation::Tanh) dY.array() *= 1.0 - cache.out[l].array().square();
    if (grad) {
      (*grad)[l].W.noalias() += dY * cache.in[l].transpose();
      (*grad)[l].b += dY.rowwise().sum();
    }
    dY = s[l].W.transpose() * dY;
  }
  return dY;
}

// ---------------------------------------------------------------------------
// Cell

struct CellOutput
{
  Vector h;
  Observation z;
};

/**
 * @brief One decoder cell on a single normalized window.
 */
inline CellOutput cell_forward(const CellWeights & w, const ModelDims & dims, const Vector & h,
                               const DelayWindow & window)
{
  if (window.d != dims.d || !window.consistent() || window.zu_z.cols() != dims.p || window.zu_u.cols() != dims.m)
    throw DimensionError("cell_forward: window does not match model dimensions");
  if (h.size() != static_cast<Eigen::Index>(dims.h_dim)) throw DimensionError("cell_forward: latent size");
  const Eigen::Index H = h.size(), P = dims.pair_width();
  Vector x(dims.latent_input());
  x.head(H) = h;
  for (Eigen::Index q = 0; q < window.zu_z.rows(); ++q) {
    x.segment(H + q * P, dims.p) = window.zu_z.row(q).transpose();
    x.segment(H + q * P + dims.p, dims.m) = window.zu_u.row(q).transpose();
  }
  Vector ur(dims.control_input());
  for (Eigen::Index r = 0; r < window.u_recent.rows(); ++r) ur.segment(r * dims.m, dims.m) = window.u_recent.row(r).transpose();
  CellOutput out;
  out.h = stack_forward(w.latent, x);
  const Vector c = stack_forward(w.control, ur);
  Vector xo(dims.output_input());
  xo << out.h, c;
  out.z = stack_forward(w.output, xo);
  if (dims.residual) out.z += window.zu_z.bottomRows(1).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Unrolled sequences

/**
 * @brief Normalized inputs for B sequences (columns).
 *
 * z holds the H measured observations; u holds the controls at indices
 * 0 .. H+N-2, where u[H-1+i] is the control of decoder step i.
 */
struct SequenceBatch
{
  Eigen::Index B{0};
  std::vector<Matrix> z;        ///< H entries, p x B
  std::vector<Matrix> u;        ///< H+N-1 entries, m x B
  std::vector<Matrix> targets;  ///< N entries, p x B (training only)

  std::size_t horizon() const { return u.size() + 1 - z.size(); }
};

struct CellCache
{
  StackCache latent, control, output;
};

struct Unroll
{
  std::vector<StackCache> encoder;
  std::vector<CellCache> decoder;
  std::vector<Matrix> pred;  ///< N entries, p x B, normalized
  Matrix h_encoded;          ///< latent state after the encoder
};

namespace detail {

/// z at sequence index t: measured for t < H, otherwise the prediction for t.
inline const Matrix & z_at(const SequenceBatch & b, const std::vector<Matrix> & pred, std::size_t t)
{
  return t < b.z.size() ? b.z[t] : pred[t - b.z.size()];
}

inline Matrix latent_input(const ModelDims & dims, const Matrix & h, const SequenceBatch & b,
                           const std::vector<Matrix> & pred, std::size_t k)
{
  const std::size_t L = zu_length(dims.d);
  const Eigen::Index H = h.rows(), P = dims.pair_width();
  Matrix x(dims.latent_input(), b.B);
  x.topRows(H) = h;
  for (std::size_t q = 0; q < L; ++q) {
    const std::size_t t = k + 1 - L + q;
    const auto off = H + static_cast<Eigen::Index>(q) * P;
    x.middleRows(off, dims.p) = z_at(b, pred, t);
    x.middleRows(off + dims.p, dims.m) = b.u[t];
  }
  return x;
}

inline Matrix control_input(const ModelDims & dims, const SequenceBatch & b, std::size_t k)
{
  Matrix x(dims.control_input(), b.B);
  for (std::size_t r = 0; r <= dims.d; ++r) x.middleRows(static_cast<Eigen::Index>(r) * dims.m, dims.m) = b.u[k - dims.d + r];
  return x;
}

}  // namespace detail

/// Runs the M encoder cells (latent only) and returns the final latent state.
inline Matrix encode(const SurrogateModel & model, const SequenceBatch & b, std::vector<StackCache> * caches = nullptr)
{
  const auto & dims = model.dims;
  if (b.z.size() != dims.history()) throw DimensionError("encode: history length must be M + 2d + 2");
  Matrix h = Matrix::Zero(static_cast<Eigen::Index>(dims.h_dim), b.B);
  if (caches) caches->resize(dims.M);
  static const std::vector<Matrix> no_pred;
  for (std::size_t j = 0; j < dims.M; ++j) {
    const std::size_t k = 2 * dims.d + 1 + j;
    const Matrix x = detail::latent_input(dims, h, b, no_pred, k);
    h = stack_forward(model.weights.latent, x, caches ? &(*caches)[j] : nullptr);
  }
  return h;
}

/// Runs `steps` free-running decoder cells starting from latent state h.
inline void decode(const SurrogateModel & model, const SequenceBatch & b, const Matrix & h_encoded, std::size_t steps,
                   Unroll & out, bool keep_cache)
{
  const auto & dims = model.dims;
  const std::size_t H = dims.history();
  if (b.u.size() + 1 < H + steps) throw DimensionError("decode: not enough controls");
  out.pred.clear();
  out.pred.reserve(steps);
  if (keep_cache) out.decoder.assign(steps, {});
  Matrix h = h_encoded;
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t k = H - 1 + i;
    CellCache * cc = keep_cache ? &out.decoder[i] : nullptr;
    const Matrix xl = detail::latent_input(dims, h, b, out.pred, k);
    h = stack_forward(model.weights.latent, xl, cc ? &cc->latent : nullptr);
    const Matrix c = stack_forward(model.weights.control, detail::control_input(dims, b, k), cc ? &cc->control : nullptr);
    Matrix xo(dims.output_input(), b.B);
    xo.topRows(h.rows()) = h;
    xo.bottomRows(c.rows()) = c;
    Matrix z = stack_forward(model.weights.output, xo, cc ? &cc->output : nullptr);
    if (dims.residual) z += detail::z_at(b, out.pred, k);
    out.pred.push_back(std::move(z));
  }
}

inline Unroll unroll(const SurrogateModel & model, const SequenceBatch & b, std::size_t steps, bool keep_cache)
{
  Unroll u;
  u.h_encoded = encode(model, b, keep_cache ? &u.encoder : nullptr);
  decode(model, b, u.h_encoded, steps, u, keep_cache);
  return u;
}

/**
 * @brief Reverse accumulation through the decoder given dL/dpred.
 *
 * Accumulates weight gradients into grad (when non-null) and control
 * gradients into du (indexed like b.u, when non-null). Returns dL/dh at
 * the encoder output.
 */
inline Matrix decode_backward(const SurrogateModel & model, const SequenceBatch & b, const Unroll & u,
                              const std::vector<Matrix> & dpred, CellWeights * grad, std::vector<Matrix> * du)
{
  const auto & dims = model.dims;
  const std::size_t H = dims.history(), steps = u.pred.size(), L = zu_length(dims.d);
  const Eigen::Index Hd = static_cast<Eigen::Index>(dims.h_dim), P = dims.pair_width();
  std::vector<Matrix> dz_fb(steps, Matrix::Zero(dims.p, b.B));
  Matrix dh_next = Matrix::Zero(Hd, b.B);
  const auto add_du = [&](std::size_t t, const Matrix & g) {
    if (du && t + 1 >= H) (*du)[t] += g;
  };
  for (std::size_t i = steps; i-- > 0;) {
    const std::size_t k = H - 1 + i;
    const CellCache & cc = u.decoder[i];
    const Matrix dz = dpred[i] + dz_fb[i];
    if (dims.residual && k >= H) dz_fb[k - H] += dz;
    const Matrix dxo = stack_backward(model.weights.output, cc.output, dz, grad ? &grad->output : nullptr);
    const Matrix dh = dxo.topRows(Hd) + dh_next;
    const Matrix dur = stack_backward(model.weights.control, cc.control, dxo.bottomRows(dims.output_input() - Hd),
                                      grad ? &grad->control : nullptr);
    for (std::size_t r = 0; r <= dims.d; ++r) add_du(k - dims.d + r, dur.middleRows(static_cast<Eigen::Index>(r) * dims.m, dims.m));
    const Matrix dxl = stack_backward(model.weights.latent, cc.latent, dh, grad ? &grad->latent : nullptr);
    dh_next = dxl.topRows(Hd);
    for (std::size_t q = 0; q < L; ++q) {
      const std::size_t t = k + 1 - L + q;
      const auto off = Hd + static_cast<Eigen::Index>(q) * P;
      if (t >= H) dz_fb[t - H] += dxl.middleRows(off, dims.p);
      add_du(t, dxl.middleRows(off + dims.p, dims.m));
    }
  }
  return dh_next;
}

inline void encode_backward(const SurrogateModel & model, const Unroll & u, Matrix dh, CellWeights * grad)
{
  const Eigen::Index Hd = static_cast<Eigen::Index>(model.dims.h_dim);
  for (std::size_t j = u.encoder.size(); j-- > 0;) {
    const Matrix dx = stack_backward(model.weights.latent, u.encoder[j], std::move(dh), grad ? &grad->latent : nullptr);
    dh = dx.topRows(Hd);
  }
}

// ---------------------------------------------------------------------------
// Batches from data

/// Normalized batch for dataset samples `ids` with `steps` decoder steps.
inline SequenceBatch make_batch(const SurrogateModel & model, const WindowedDataset & data,
                                const std::vector<std::size_t> & ids, std::size_t steps)
{
  const auto & dims = model.dims;
  if (data.M() != dims.M || data.d() != dims.d) throw DimensionError("make_batch: dataset (M, d) differ from model");
  if (data.p() != dims.p || data.m() != dims.m) throw DimensionError("make_batch: dataset (p, m) differ from model");
  if (steps > data.N()) throw DimensionError("make_batch: dataset horizon too short");
  const std::size_t H = dims.history();
  SequenceBatch b;
  b.B = static_cast<Eigen::Index>(ids.size());
  b.z.assign(H, Matrix(dims.p, b.B));
  b.u.assign(H + steps - 1, Matrix(dims.m, b.B));
  b.targets.assign(steps, Matrix(dims.p, b.B));
  const auto & n = model.norm;
  for (Eigen::Index c = 0; c < b.B; ++c) {
    const auto & [e, s] = data.index(ids[static_cast<std::size_t>(c)]);
    const auto & ep = data.episodes()[e];
    for (std::size_t t = 0; t < H + steps - 1; ++t) {
      const auto r = static_cast<Eigen::Index>(s + t);
      b.u[t].col(c) = (ep.u().row(r).transpose() - n.u_mean).cwiseQuotient(n.u_std);
      if (t < H) b.z[t].col(c) = (ep.z().row(r).transpose() - n.z_mean).cwiseQuotient(n.z_std);
    }
    for (std::size_t i = 0; i < steps; ++i) {
      const auto r = static_cast<Eigen::Index>(s + H + i);
      b.targets[i].col(c) = (ep.z().row(r).transpose() - n.z_mean).cwiseQuotient(n.z_std);
    }
  }
  return b;
}

/// Normalized single-sequence batch from a raw history and raw controls.
inline SequenceBatch make_batch(const SurrogateModel & model, const TimeSeries & history, const Matrix & controls)
{
  const auto & dims = model.dims;
  const std::size_t H = dims.history();
  if (history.size() != H) throw IndexError("predict: history must hold exactly M + 2d + 2 samples");
  if (history.p() != dims.p || history.m() != dims.m) throw DimensionError("predict: history dimensions");
  if (controls.rows() < 1 || controls.cols() != dims.m) throw DimensionError("predict: controls must be N x m");
  const auto steps = static_cast<std::size_t>(controls.rows());
  SequenceBatch b;
  b.B = 1;
  const Matrix zn = model.norm.normalize_z(history.z());
  const Matrix un = model.norm.normalize_u(history.u());
  const Matrix cn = model.norm.normalize_u(controls);
  for (std::size_t t = 0; t < H; ++t) b.z.push_back(zn.row(static_cast<Eigen::Index>(t)).transpose());
  for (std::size_t t = 0; t + 1 < H; ++t) b.u.push_back(un.row(static_cast<Eigen::Index>(t)).transpose());
  for (std::size_t i = 0; i < steps; ++i) b.u.push_back(cn.row(static_cast<Eigen::Index>(i)).transpose());
  return b;
}

// ---------------------------------------------------------------------------
// Prediction

namespace detail {

inline Matrix stack_predictions(const SurrogateModel & model, const std::vector<Matrix> & pred)
{
  Matrix out(static_cast<Eigen::Index>(pred.size()), model.dims.p);
  for (std::size_t i = 0; i < pred.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = pred[i].col(0).transpose();
  return model.norm.denormalize_z(out);
}

}  // namespace detail

/**
 * @brief N-step prediction in raw units.
 *
 * @p history holds the last M+2d+2 samples; its final observation is the
 * current measurement and its final control is ignored (controls row 0
 * takes its place). Returns an N x p matrix of z at H .. H+N-1.
 */
inline Matrix predict(const SurrogateModel & model, const TimeSeries & history, const Matrix & controls)
{
  const SequenceBatch b = make_batch(model, history, controls);
  const Unroll u = unroll(model, b, static_cast<std::size_t>(controls.rows()), false);
  return detail::stack_predictions(model, u.pred);
}

/**
 * @brief Surrogate bound to one history, with the encoder pass cached.
 *
 * This is the interface the receding-horizon solver uses: predict(controls)
 * and gradient(controls, dL/dpred) both in raw units.
 */
class BoundSurrogate
{
public:
  BoundSurrogate(const SurrogateModel & model, const TimeSeries & history)
      : model_(&model), batch_(make_batch(model, history, Matrix::Zero(1, model.dims.m)))
  {
    batch_.u.pop_back();
    h_ = encode(model, batch_);
  }

  Matrix predict(const Matrix & controls) const
  {
    const SequenceBatch b = with_controls(controls);
    Unroll u;
    decode(*model_, b, h_, static_cast<std::size_t>(controls.rows()), u, false);
    return detail::stack_predictions(*model_, u.pred);
  }

  /// Vector-Jacobian product: dL/du (N x m, raw) for a given dL/dz (N x p, raw).
  Matrix gradient(const Matrix & controls, const Matrix & dpred) const
  {
    Matrix unused;
    return value_and_gradient(controls, dpred, unused);
  }

  /// Predictions (into pred) and the gradient for dpred evaluated at those predictions.
  template<typename DPred>
  Matrix value_and_gradient(const Matrix & controls, DPred && dpred_of, Matrix & pred) const
  {
    const auto & dims = model_->dims;
    const SequenceBatch b = with_controls(controls);
    const auto steps = static_cast<std::size_t>(controls.rows());
    Unroll u;
    decode(*model_, b, h_, steps, u, true);
    pred = detail::stack_predictions(*model_, u.pred);
    Matrix dp_raw;
    if constexpr (std::is_same_v<std::decay_t<DPred>, Matrix>) dp_raw = dpred_of;
    else dp_raw = dpred_of(pred);
    std::vector<Matrix> dpred(steps);
    for (std::size_t i = 0; i < steps; ++i)
      dpred[i] = dp_raw.row(static_cast<Eigen::Index>(i)).transpose().cwiseProduct(model_->norm.z_std);
    std::vector<Matrix> du(b.u.size(), Matrix::Zero(dims.m, 1));
    decode_backward(*model_, b, u, dpred, nullptr, &du);
    const std::size_t H = dims.history();
    Matrix g(controls.rows(), dims.m);
    for (std::size_t i = 0; i < steps; ++i)
      g.row(static_cast<Eigen::Index>(i)) = du[H - 1 + i].col(0).cwiseQuotient(model_->norm.u_std).transpose();
    return g;
  }

  std::size_t history() const { return model_->history(); }
  Eigen::Index p() const { return model_->dims.p; }
  Eigen::Index m() const { return model_->dims.m; }

private:
  SequenceBatch with_controls(const Matrix & controls) const
  {
    if (controls.cols() != model_->dims.m || controls.rows() < 1) throw DimensionError("surrogate: controls must be N x m");
    SequenceBatch b = batch_;
    const Matrix cn = model_->norm.normalize_u(controls);
    for (Eigen::Index i = 0; i < cn.rows(); ++i) b.u.push_back(cn.row(i).transpose());
    return b;
  }

  const SurrogateModel * model_;
  SequenceBatch batch_;
  Matrix h_;
};

/// Gradient of sum_i |pred[i, mask] - ref[i]|^2 with respect to the raw controls.
inline Matrix grad_controls(const SurrogateModel & model, const TimeSeries & history, const Matrix & controls,
                            const Matrix & ref, const std::vector<std::size_t> & mask)
{
  if (ref.rows() != controls.rows() || ref.cols() != static_cast<Eigen::Index>(mask.size()))
    throw DimensionError("grad_controls: reference slice must be N x J");
  const BoundSurrogate s(model, history);
  Matrix pred;
  return s.value_and_gradient(
      controls,
      [&](const Matrix & z) {
        Matrix dz = Matrix::Zero(z.rows(), z.cols());
        for (std::size_t j = 0; j < mask.size(); ++j) {
          const auto c = static_cast<Eigen::Index>(mask[j]);
          dz.col(c) = 2.0 * (z.col(c) - ref.col(static_cast<Eigen::Index>(j)));
        }
        return dz;
      },
      pred);
}

// ---------------------------------------------------------------------------
// Loss and weight gradients

namespace detail {

inline std::vector<std::size_t> all_ids(std::size_t n)
{
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

inline double squared_error_sum(const Unroll & u, const SequenceBatch & b)
{
  double s = 0.0;
  for (std::size_t i = 0; i < u.pred.size(); ++i) s += (u.pred[i] - b.targets[i]).squaredNorm();
  return s;
}

}  // namespace detail

/**
 * @brief Mean squared prediction error (normalized units) over samples,
 * decoder steps and channels, for the given sample ids (all when empty).
 */
inline double loss(const SurrogateModel & model, const WindowedDataset & data, std::vector<std::size_t> ids = {},
                   std::size_t steps = 0)
{
  if (steps == 0) steps = data.N();
  if (ids.empty()) ids = detail::all_ids(data.size());
  if (ids.empty()) throw DimensionError("loss: empty batch");
  constexpr std::size_t chunk = 512;
  double sum = 0.0;
  for (std::size_t o = 0; o < ids.size(); o += chunk) {
    const std::vector<std::size_t> part(ids.begin() + static_cast<std::ptrdiff_t>(o),
                                        ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), o + chunk)));
    const SequenceBatch b = make_batch(model, data, part, steps);
    sum += detail::squared_error_sum(unroll(model, b, steps, false), b);
  }
  return sum / static_cast<double>(ids.size() * steps * static_cast<std::size_t>(model.dims.p));
}

struct LossGradient
{
  double loss{0.0};
  CellWeights grad;
};

/// Exact gradient of loss() with respect to every weight (BPTT over encoder and decoder).
inline LossGradient grad_weights(const SurrogateModel & model, const WindowedDataset & data,
                                 std::vector<std::size_t> ids = {}, std::size_t steps = 0)
{
  if (steps == 0) steps = data.N();
  if (ids.empty()) ids = detail::all_ids(data.size());
  if (ids.empty()) throw DimensionError("grad_weights: empty batch");
  const SequenceBatch b = make_batch(model, data, ids, steps);
  const Unroll u = unroll(model, b, steps, true);
  const double denom = static_cast<double>(ids.size() * steps * static_cast<std::size_t>(model.dims.p));
  LossGradient out;
  out.loss = detail::squared_error_sum(u, b) / denom;
  out.grad = zeros_like(model.weights);
  std::vector<Matrix> dpred(steps);
  for (std::size_t i = 0; i < steps; ++i) dpred[i] = 2.0 * (u.pred[i] - b.targets[i]) / denom;
  const Matrix dh = decode_backward(model, b, u, dpred, &out.grad, nullptr);
  encode_backward(model, u, dh, &out.grad);
  return out;
}

/// Normalized RMSE of free-running `steps`-step predictions over the dataset.
inline double normalized_rmse(const SurrogateModel & model, const WindowedDataset & data, std::size_t steps)
{
  return std::sqrt(loss(model, data, {}, steps));
}

// ---------------------------------------------------------------------------
// CRBM pretraining

struct CrbmConfig
{
  std::size_t epochs{10};
  std::size_t hidden{50};
  double lr{1e-3};
  std::size_t batch_size{64};
};

struct CrbmResult
{
  CellWeights weights;
  std::vector<double> reconstruction_error;  ///< per epoch, mean squared
};

/**
 * @brief Conditional RBM pretraining of the latent net's first layer.
 *
 * Visible units: the newest (z, u) pair of the last history window
 * (Gaussian, unit variance in normalized units). Conditioning: the older
 * 2d+1 pairs. Hidden units: binary. Trained with CD-1. Hidden unit j is
 * copied into row j of the first latent layer, with weights and bias halved
 * to turn the sigmoid into the equivalent tanh pre-activation.
 */
inline CrbmResult pretrain_crbm(const SurrogateModel & init, const WindowedDataset & data, const CrbmConfig & cfg,
                                std::uint64_t seed)
{
  CrbmResult res{init.weights, {}};
  if (cfg.epochs == 0) return res;
  if (data.empty()) throw DimensionError("pretrain_crbm: empty dataset");
  const auto & dims = init.dims;
  const std::size_t H = dims.history(), L = zu_length(dims.d);
  const Eigen::Index P = dims.pair_width();
  const Eigen::Index nv = P, nc = static_cast<Eigen::Index>(L - 1) * P, nh = static_cast<Eigen::Index>(cfg.hidden);

  std::mt19937_64 rng(seed);
  Matrix W(nh, nv), Bc(nh, nc), A(nv, nc);
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = 0.01 * detail::normal(rng);
  for (Eigen::Index i = 0; i < Bc.size(); ++i) Bc.data()[i] = 0.01 * detail::normal(rng);
  A.setZero();
  Vector bh = Vector::Zero(nh), bv = Vector::Zero(nv);

  const WindowedDataset one = data.with_horizon(1);
  std::vector<std::size_t> ids = detail::all_ids(one.size());
  const auto sigmoid = [](const Matrix & x) -> Matrix { return (1.0 + (-x.array()).exp()).inverse().matrix(); };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::shuffle(ids, rng);
    double err = 0.0;
    for (std::size_t o = 0; o < ids.size(); o += cfg.batch_size) {
      const std::vector<std::size_t> part(ids.begin() + static_cast<std::ptrdiff_t>(o),
                                          ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), o + cfg.batch_size)));
      const SequenceBatch b = make_batch(init, one, part, 1);
      const auto Bn = b.B;
      Matrix v0(nv, Bn), c(nc, Bn);
      for (std::size_t q = 0; q < L; ++q) {
        const std::size_t t = H - L + q;  // window ending at H-1
        Matrix pair(P, Bn);
        pair.topRows(dims.p) = b.z[t];
        pair.bottomRows(dims.m) = b.u[t];
        if (q + 1 < L) c.middleRows(static_cast<Eigen::Index>(q) * P, P) = pair;
        else v0 = pair;
      }
      Matrix pre0 = W * v0 + Bc * c;
      pre0.colwise() += bh;
      const Matrix h0 = sigmoid(pre0);
      Matrix hs(nh, Bn);
      for (Eigen::Index i = 0; i < hs.size(); ++i) hs.data()[i] = detail::uniform01(rng) < h0.data()[i] ? 1.0 : 0.0;
      Matrix v1 = W.transpose() * hs + A * c;
      v1.colwise() += bv;
      Matrix pre1 = W * v1 + Bc * c;
      pre1.colwise() += bh;
      const Matrix h1 = sigmoid(pre1);
      const double s = cfg.lr / static_cast<double>(Bn);
      W += s * (h0 * v0.transpose() - h1 * v1.transpose());
      Bc += s * (h0 - h1) * c.transpose();
      A += s * (v0 - v1) * c.transpose();
      bh += s * (h0 - h1).rowwise().sum();
      bv += s * (v0 - v1).rowwise().sum();
      err += (v0 - v1).squaredNorm();
    }
    res.reconstruction_error.push_back(err / static_cast<double>(ids.size() * static_cast<std::size_t>(nv)));
  }

  DenseLayer & first = res.weights.latent.front();
  const Eigen::Index Hd = static_cast<Eigen::Index>(dims.h_dim);
  const Eigen::Index rows = std::min<Eigen::Index>(nh, first.out());
  for (Eigen::Index j = 0; j < rows; ++j) {
    first.W.row(j).segment(Hd, nc) = 0.5 * Bc.row(j);
    first.W.row(j).segment(Hd + nc, nv) = 0.5 * W.row(j);
    first.b(j) = 0.5 * bh(j);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct StageConfig
{
  std::size_t epochs{20};
  std::size_t batch_size{64};
  double lr{1e-3};
  double lr_final{1e-5};
};

struct TrainConfig
{
  bool crbm_pretrain{false};
  bool single_step{true};
  bool multi_step{true};
  CrbmConfig crbm;
  StageConfig single{20, 64, 3e-3, 1e-5};
  StageConfig multi{20, 64, 1e-3, 1e-5};
  double clip{5.0};
  std::uint64_t seed{0};
};

struct EpochRecord
{
  std::string stage;
  std::size_t epoch{0};
  double train_loss{0.0};
  double val_loss{0.0};
  double best_val{0.0};
};

struct TrainResult
{
  SurrogateModel model;
  std::vector<EpochRecord> history;
};

struct TrainingDivergence : Error
{
  TrainingDivergence(const std::string & stage_, std::size_t epoch_)
      : Error("training diverged in stage '" + stage_ + "' at epoch " + std::to_string(epoch_)), stage(stage_),
        epoch(epoch_)
  {}
  std::string stage;
  std::size_t epoch;
};

inline std::string loss_history_csv(const std::vector<EpochRecord> & h)
{
  std::string s = "stage,epoch,train_loss,val_loss,best_val\n";
  for (const auto & r : h)
    s += r.stage + "," + std::to_string(r.epoch) + "," + detail::fmt_double(r.train_loss) + ","
       + detail::fmt_double(r.val_loss) + "," + detail::fmt_double(r.best_val) + "\n";
  return s;
}

/// Adaptive-moment optimizer over the flattened parameter vector.
class Adam
{
public:
  explicit Adam(Eigen::Index n) : m_(Vector::Zero(n)), v_(Vector::Zero(n)) {}

  void step(Vector & x, const Vector & g, double lr)
  {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    m_ = b1 * m_ + (1.0 - b1) * g;
    v_ = b2 * v_ + (1.0 - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    x.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
  }

private:
  Vector m_, v_;
  long t_{0};
};

namespace detail {

inline double cosine_lr(const StageConfig & s, std::size_t step, std::size_t total)
{
  if (total <= 1) return s.lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total - 1);
  return s.lr_final + 0.5 * (s.lr - s.lr_final) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

/// Mini-batch Adam with gradient clipping; keeps the best-validation weights.
inline void run_stage(SurrogateModel & model, const WindowedDataset & train, const WindowedDataset * val,
                      std::size_t steps, const StageConfig & sc, double clip, std::mt19937_64 & rng,
                      const std::string & name, std::vector<EpochRecord> & history)
{
  if (sc.epochs == 0 || train.empty()) return;
  const auto evaluate = [&] {
    return (val && !val->empty()) ? loss(model, *val, {}, steps) : loss(model, train, {}, steps);
  };
  double best = evaluate();
  if (!std::isfinite(best)) throw TrainingDivergence(name, 0);
  CellWeights best_weights = model.weights;
  Vector x = to_vector(model.weights);
  Adam opt(x.size());
  std::vector<std::size_t> ids = all_ids(train.size());
  const std::size_t bs = std::max<std::size_t>(1, sc.batch_size);
  const std::size_t per_epoch = (ids.size() + bs - 1) / bs;
  const std::size_t total = per_epoch * sc.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < sc.epochs; ++epoch) {
    shuffle(ids, rng);
    double acc = 0.0;
    for (std::size_t o = 0; o < ids.size(); o += bs) {
      const std::vector<std::size_t> part(ids.begin() + static_cast<std::ptrdiff_t>(o),
                                          ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), o + bs)));
      LossGradient lg = grad_weights(model, train, part, steps);
      if (!std::isfinite(lg.loss)) throw TrainingDivergence(name, epoch);
      Vector g = to_vector(lg.grad);
      const double gn = g.norm();
      if (!std::isfinite(gn)) throw TrainingDivergence(name, epoch);
      if (gn > clip) g *= clip / gn;
      opt.step(x, g, cosine_lr(sc, step++, total));
      from_vector(x, model.weights);
      acc += lg.loss * static_cast<double>(part.size());
    }
    const double vl = evaluate();
    if (!std::isfinite(vl)) throw TrainingDivergence(name, epoch);
    if (vl < best) {
      best = vl;
      best_weights = model.weights;
    }
    history.push_back({name, epoch, acc / static_cast<double>(ids.size()), vl, best});
  }
  model.weights = best_weights;
}

}  // namespace detail

/**
 * @brief Three-stage training: optional CRBM initialization, single-step
 * training with one decoder cell, then free-running training over the
 * dataset's full horizon N.
 *
 * Each supervised stage returns the weights with the best validation loss
 * seen (the starting weights included). Throws TrainingDivergence when a
 * loss turns non-finite.
 */
inline TrainResult train(SurrogateModel model, const WindowedDataset & data, const WindowedDataset * validation,
                         const TrainConfig & cfg)
{
  TrainResult res;
  std::mt19937_64 rng(cfg.seed);
  if (cfg.crbm_pretrain && cfg.crbm.epochs > 0) {
    model.weights = pretrain_crbm(model, data, cfg.crbm, detail::derive_seed(cfg.seed, 1)).weights;
  }
  if (cfg.single_step && cfg.single.epochs > 0) {
    const WindowedDataset one = data.with_horizon(1);
    const std::optional<WindowedDataset> val_one =
        validation ? std::optional<WindowedDataset>(validation->with_horizon(1)) : std::nullopt;
    detail::run_stage(model, one, val_one ? &*val_one : nullptr, 1, cfg.single, cfg.clip, rng, "single_step",
                      res.history);
  }
  if (cfg.multi_step && cfg.multi.epochs > 0) {
    detail::run_stage(model, data, validation, data.N(), cfg.multi, cfg.clip, rng, "multi_step", res.history);
  }
  res.model = std::move(model);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int checkpoint_version = 1;

namespace detail {

inline void write_vector_line(std::ostringstream & os, const Eigen::Ref<const Vector> & v)
{
  for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? " " : "") << fmt_hex(v(i));
  os << '\n';
}

class LineReader
{
public:
  explicit LineReader(const std::string & text) : is_(text) {}

  std::vector<std::string> next(const char * what)
  {
    std::string line;
    while (std::getline(is_, line)) {
      ++lineno_;
      line = trim(line);
      if (line.empty()) continue;
      std::vector<std::string> tok;
      std::istringstream ls(line);
      std::string t;
      while (ls >> t) tok.push_back(t);
      return tok;
    }
    throw FormatError(std::string("checkpoint: truncated file, expected ") + what);
  }

  std::size_t line() const { return lineno_; }

private:
  std::istringstream is_;
  std::size_t lineno_{0};
};

inline Vector parse_values(const std::vector<std::string> & tok, std::size_t from, Eigen::Index n, const LineReader & r)
{
  if (tok.size() != from + static_cast<std::size_t>(n))
    throw FormatError("checkpoint: line " + std::to_string(r.line()) + " has wrong value count");
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = parse_double(tok[from + static_cast<std::size_t>(i)]);
  return v;
}

}  // namespace detail

/**
 * Text container: a header with the format version, dimensions and
 * normalization, then one `layer` record per dense layer followed by its
 * weight rows and bias row. Values are hex floats, so the round trip is
 * bit-exact.
 */
inline std::string serialize_model(const SurrogateModel & model)
{
  const auto & d = model.dims;
  std::ostringstream os;
  os << "deepmpc-checkpoint " << checkpoint_version << '\n';
  os << "M " << d.M << "\nN " << d.N << "\nd " << d.d << "\nh_dim " << d.h_dim << "\nhidden " << d.hidden
     << "\ncontrol_width " << d.control_width << "\np " << d.p << "\nm " << d.m << "\nresidual " << (d.residual ? 1 : 0)
     << '\n';
  const auto vec = [&](const char * name, const Vector & v) {
    os << name << ' ';
    detail::write_vector_line(os, v);
  };
  vec("z_mean", model.norm.z_mean);
  vec("z_std", model.norm.z_std);
  vec("u_mean", model.norm.u_mean);
  vec("u_std", model.norm.u_std);
  const auto stack = [&](const char * name, const LayerStack & s) {
    os << "stack " << name << ' ' << s.size() << '\n';
    for (std::size_t l = 0; l < s.size(); ++l) {
      os << "layer " << l << ' ' << to_string(s[l].act) << ' ' << s[l].W.rows() << ' ' << s[l].W.cols() << '\n';
      for (Eigen::Index r = 0; r < s[l].W.rows(); ++r) detail::write_vector_line(os, s[l].W.row(r).transpose());
      detail::write_vector_line(os, s[l].b);
    }
  };
  stack("latent", model.weights.latent);
  stack("control", model.weights.control);
  stack("output", model.weights.output);
  os << "end\n";
  return os.str();
}

inline SurrogateModel deserialize_model(const std::string & text)
{
  detail::LineReader r(text);
  auto head = r.next("header");
  if (head.size() != 2 || head[0] != "deepmpc-checkpoint") throw FormatError("checkpoint: not a checkpoint file");
  if (head[1] != std::to_string(checkpoint_version))
    throw FormatError("checkpoint: version mismatch (file " + head[1] + ", expected " + std::to_string(checkpoint_version) + ")");
  SurrogateModel model;
  auto & d = model.dims;
  const auto count = [&](const char * key) -> std::size_t {
    auto t = r.next(key);
    if (t.size() != 2 || t[0] != key) throw FormatError(std::string("checkpoint: expected '") + key + "'");
    const double v = detail::parse_double(t[1]);
    if (v < 0 || v != std::floor(v)) throw FormatError(std::string("checkpoint: bad value for ") + key);
    return static_cast<std::size_t>(v);
  };
  d.M = count("M");
  d.N = count("N");
  d.d = count("d");
  d.h_dim = count("h_dim");
  d.hidden = count("hidden");
  d.control_width = count("control_width");
  d.p = static_cast<Eigen::Index>(count("p"));
  d.m = static_cast<Eigen::Index>(count("m"));
  d.residual = count("residual") != 0;
  try {
    d.validate();
  } catch (const ConfigError & e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  const auto vec = [&](const char * key, Eigen::Index n) {
    auto t = r.next(key);
    if (t.empty() || t[0] != key) throw FormatError(std::string("checkpoint: expected '") + key + "'");
    return detail::parse_values(t, 1, n, r);
  };
  model.norm.z_mean = vec("z_mean", d.p);
  model.norm.z_std = vec("z_std", d.p);
  model.norm.u_mean = vec("u_mean", d.m);
  model.norm.u_std = vec("u_std", d.m);
  const auto stack = [&](const char * name, LayerStack & s) {
    auto t = r.next("stack");
    if (t.size() != 3 || t[0] != "stack" || t[1] != name) throw FormatError(std::string("checkpoint: expected stack ") + name);
    const auto n = static_cast<std::size_t>(detail::parse_double(t[2]));
    if (n < 1 || n > 64) throw FormatError("checkpoint: bad layer count");
    for (std::size_t l = 0; l < n; ++l) {
      auto lt = r.next("layer");
      if (lt.size() != 5 || lt[0] != "layer" || lt[1] != std::to_string(l)) throw FormatError("checkpoint: expected layer record");
      DenseLayer layer;
      layer.act = activation_from_string(lt[2]);
      const auto rows = static_cast<Eigen::Index>(detail::parse_double(lt[3]));
      const auto cols = static_cast<Eigen::Index>(detail::parse_double(lt[4]));
      if (rows < 1 || cols < 1 || rows > 1'000'000 || cols > 1'000'000) throw FormatError("checkpoint: bad layer shape");
      layer.W.resize(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i) layer.W.row(i) = detail::parse_values(r.next("weight row"), 0, cols, r).transpose();
      layer.b = detail::parse_values(r.next("bias row"), 0, rows, r);
      s.push_back(std::move(layer));
    }
  };
  stack("latent", model.weights.latent);
  stack("control", model.weights.control);
  stack("output", model.weights.output);
  auto e = r.next("end");
  if (e.size() != 1 || e[0] != "end") throw FormatError("checkpoint: expected 'end'");
  validate_shapes(model);
  return model;
}

inline void save_model(const SurrogateModel & model, const std::string & path)
{
  detail::write_file(path, serialize_model(model));
}

inline SurrogateModel load_model(const std::string & path) { return deserialize_model(detail::read_file(path)); }

/// Fingerprint of the serialized model.
inline std::string model_hash(const SurrogateModel & model) { return detail::hex64(detail::fnv1a(serialize_model(model))); }

}  // namespace deepmpc
