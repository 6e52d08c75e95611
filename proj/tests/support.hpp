// Shared fixtures and independent oracles for the test suites.
#pragma once

#include <deepmpc/surrogate.hpp>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace testsupport {

using deepmpc::Matrix;
using deepmpc::Vector;

inline Matrix random_matrix(std::mt19937_64 & rng, Eigen::Index r, Eigen::Index c, double scale = 1.0)
{
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline deepmpc::TimeSeries random_series(std::mt19937_64 & rng, std::size_t n, Eigen::Index p, Eigen::Index m,
                                         double dt = 0.1)
{
  return deepmpc::TimeSeries(dt, 0.0, random_matrix(rng, static_cast<Eigen::Index>(n), p),
                             random_matrix(rng, static_cast<Eigen::Index>(n), m));
}

inline deepmpc::ModelDims tiny_dims(Eigen::Index p = 2, Eigen::Index m = 1, bool residual = true)
{
  deepmpc::ModelDims d;
  d.M = 2;
  d.N = 3;
  d.d = 1;
  d.h_dim = 4;
  d.hidden = 6;
  d.control_width = 3;
  d.p = p;
  d.m = m;
  d.residual = residual;
  return d;
}

/// Random model with non-trivial normalization.
inline deepmpc::SurrogateModel random_model(std::mt19937_64 & rng, const deepmpc::ModelDims & dims)
{
  deepmpc::Normalization norm;
  norm.z_mean = random_matrix(rng, dims.p, 1, 0.3);
  norm.u_mean = random_matrix(rng, dims.m, 1, 0.3);
  norm.z_std = (random_matrix(rng, dims.p, 1, 0.2).array().abs() + 0.7).matrix();
  norm.u_std = (random_matrix(rng, dims.m, 1, 0.2).array().abs() + 0.7).matrix();
  auto model = deepmpc::init_model(dims, norm, rng());
  // Scale the head up so every path carries signal.
  model.weights.for_each([&](auto & a) { a += 0.3 * random_matrix(rng, a.rows(), a.cols()); });
  return model;
}

// ---------------------------------------------------------------------------
// Naive forward pass written from the architecture description with plain
// loops, independent of the library's batched implementation.

inline Vector naive_dense(const deepmpc::DenseLayer & l, const Vector & x)
{
  Vector y(l.W.rows());
  for (Eigen::Index i = 0; i < l.W.rows(); ++i) {
    double s = l.b(i);
    for (Eigen::Index j = 0; j < l.W.cols(); ++j) s += l.W(i, j) * x(j);
    y(i) = l.act == deepmpc::Activation::Tanh ? std::tanh(s) : s;
  }
  return y;
}

inline Vector naive_stack(const deepmpc::LayerStack & s, Vector x)
{
  for (const auto & l : s) x = naive_dense(l, x);
  return x;
}

/**
 * Naive prediction with one latent-net copy per cell (M encoder cells then N
 * decoder cells). Passing the same stack for every cell gives the shared model.
 */
inline Matrix naive_predict_untied(const deepmpc::SurrogateModel & model, const std::vector<deepmpc::LayerStack> & latent,
                                   const deepmpc::TimeSeries & history, const Matrix & controls)
{
  const auto & dims = model.dims;
  const std::size_t H = dims.M + 2 * dims.d + 2, N = static_cast<std::size_t>(controls.rows());
  const Eigen::Index p = dims.p, m = dims.m;
  std::vector<Vector> Z, U;
  for (std::size_t t = 0; t < H; ++t)
    Z.push_back(((history.z().row(static_cast<Eigen::Index>(t)).transpose() - model.norm.z_mean).array()
                 / model.norm.z_std.array()).matrix());
  for (std::size_t t = 0; t + 1 < H; ++t)
    U.push_back(((history.u().row(static_cast<Eigen::Index>(t)).transpose() - model.norm.u_mean).array()
                 / model.norm.u_std.array()).matrix());
  for (std::size_t i = 0; i < N; ++i)
    U.push_back(((controls.row(static_cast<Eigen::Index>(i)).transpose() - model.norm.u_mean).array()
                 / model.norm.u_std.array()).matrix());

  const auto latent_in = [&](const Vector & h, std::size_t k) {
    Vector x(static_cast<Eigen::Index>(dims.h_dim) + static_cast<Eigen::Index>(2 * dims.d + 2) * (p + m));
    Eigen::Index o = 0;
    for (Eigen::Index i = 0; i < h.size(); ++i) x(o++) = h(i);
    for (std::size_t q = k - 2 * dims.d - 1; q <= k; ++q) {
      for (Eigen::Index i = 0; i < p; ++i) x(o++) = Z[q](i);
      for (Eigen::Index i = 0; i < m; ++i) x(o++) = U[q](i);
    }
    return x;
  };

  Vector h = Vector::Zero(static_cast<Eigen::Index>(dims.h_dim));
  std::size_t cell = 0;
  for (std::size_t j = 0; j < dims.M; ++j) h = naive_stack(latent[cell++], latent_in(h, 2 * dims.d + 1 + j));
  Matrix out(static_cast<Eigen::Index>(N), p);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t k = H - 1 + i;
    h = naive_stack(latent[cell++], latent_in(h, k));
    Vector ur(static_cast<Eigen::Index>(dims.d + 1) * m);
    Eigen::Index o = 0;
    for (std::size_t q = k - dims.d; q <= k; ++q)
      for (Eigen::Index c = 0; c < m; ++c) ur(o++) = U[q](c);
    const Vector c = naive_stack(model.weights.control, ur);
    Vector xo(h.size() + c.size());
    xo << h, c;
    Vector z = naive_stack(model.weights.output, xo);
    if (dims.residual) z += Z[k];
    Z.push_back(z);
    out.row(static_cast<Eigen::Index>(i)) =
        (z.array() * model.norm.z_std.array() + model.norm.z_mean.array()).matrix().transpose();
  }
  return out;
}

inline Matrix naive_predict(const deepmpc::SurrogateModel & model, const deepmpc::TimeSeries & history,
                            const Matrix & controls)
{
  const std::vector<deepmpc::LayerStack> latent(model.dims.M + static_cast<std::size_t>(controls.rows()),
                                                model.weights.latent);
  return naive_predict_untied(model, latent, history, controls);
}

/// Central differences of f at x with step h.
inline Vector central_difference(const std::function<double(const Vector &)> & f, const Vector & x, double h = 1e-5)
{
  Vector g(x.size());
  Vector y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    y(i) = x(i) + h;
    const double fp = f(y);
    y(i) = x(i) - h;
    const double fm = f(y);
    y(i) = x(i);
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Vector & a, const Vector & b)
{
  const double scale = std::max({a.norm(), b.norm(), 1e-300});
  return (a - b).norm() / scale;
}

}  // namespace testsupport
