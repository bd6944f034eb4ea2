#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pointvector/geometry.hpp"
#include "pointvector/params.hpp"
#include "pointvector/tape.hpp"
#include "pointvector/tensor.hpp"

namespace pointvector {

// ---------------------------------------------------------------------------
// Layer descriptors. They only hold ids into a ParamStore.

struct LinearLayer {
  ParamId weight = 0;  // [in][out]
  std::optional<ParamId> bias;  // [out]
  std::size_t in = 0;
  std::size_t out = 0;
};

struct NormLayer {
  ParamId gamma = 0;
  ParamId beta = 0;
  ParamId running_mean = 0;
  ParamId running_var = 0;
  std::size_t channels = 0;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// linear -> batchnorm -> relu
struct DenseUnit {
  LinearLayer linear;
  NormLayer norm;
};

/// Per-channel vector-to-scalar weights [C][m] (groups == channels).
struct GroupedProjection {
  ParamId weight = 0;
  std::optional<ParamId> bias;
  std::size_t channels = 0;
  std::size_t dim = 0;
};

/// Grouped kernel with one independent m-vector per neighbor slot: [C][K][m].
struct SlotKernel {
  ParamId weight = 0;
  std::optional<ParamId> bias;
  std::size_t channels = 0;
  std::size_t slots = 0;
  std::size_t dim = 0;
};

template <class T>
LinearLayer make_linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, bool bias,
                        std::mt19937_64& rng) {
  LinearLayer l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", uniform_init<T>({in, out}, in, rng));
  if (bias) l.bias = store.add(name + ".bias", Tensor<T>({out}));
  return l;
}

template <class T>
NormLayer make_norm(ParamStore<T>& store, const std::string& name, std::size_t channels) {
  NormLayer n;
  n.channels = channels;
  n.gamma = store.add(name + ".gamma", Tensor<T>({channels}, T(1)));
  n.beta = store.add(name + ".beta", Tensor<T>({channels}));
  n.running_mean = store.add(name + ".running_mean", Tensor<T>({channels}), false);
  n.running_var = store.add(name + ".running_var", Tensor<T>({channels}, T(1)), false);
  return n;
}

template <class T>
DenseUnit make_dense(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                     std::mt19937_64& rng) {
  return DenseUnit{make_linear(store, name + ".linear", in, out, true, rng), make_norm(store, name + ".norm", out)};
}

template <class T>
GroupedProjection make_grouped_projection(ParamStore<T>& store, const std::string& name, std::size_t channels,
                                          std::size_t dim, bool bias, std::mt19937_64& rng) {
  GroupedProjection g;
  g.channels = channels;
  g.dim = dim;
  g.weight = store.add(name + ".weight", uniform_init<T>({channels, dim}, dim, rng));
  if (bias) g.bias = store.add(name + ".bias", Tensor<T>({channels}));
  return g;
}

template <class T>
SlotKernel make_slot_kernel(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t slots,
                            std::size_t dim, bool bias, std::mt19937_64& rng) {
  SlotKernel s;
  s.channels = channels;
  s.slots = slots;
  s.dim = dim;
  s.weight = store.add(name + ".weight", uniform_init<T>({channels, slots, dim}, slots * dim, rng));
  if (bias) s.bias = store.add(name + ".bias", Tensor<T>({channels}));
  return s;
}

namespace ops {

template <class T>
Var constant(Tape<T>& tape, Tensor<T> value) {
  return tape.leaf(std::move(value), false);
}

template <class T>
Var constant(Tape<T>& tape, Shape shape, std::span<const double> values) {
  Tensor<T> t(std::move(shape));
  if (values.size() != t.numel()) throw SizeError("constant: value count does not match shape");
  std::copy(values.begin(), values.end(), t.data.begin());
  return tape.leaf(std::move(t), false);
}

/// y = x W + b over the last axis.
template <class T>
Var linear(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  if (wv.rank() != 2) throw SizeError("linear: weight must be rank 2");
  const std::size_t cin = wv.dim(0), cout = wv.dim(1);
  if (xv.last() != cin)
    throw SizeError("linear: input width " + std::to_string(xv.last()) + " != weight rows " + std::to_string(cin));
  if (bias && tape.value(*bias).numel() != cout) throw SizeError("linear: bias length mismatch");
  const std::size_t rows = xv.rows();
  Shape shape = xv.shape;
  if (shape.empty()) shape = {1};
  shape.back() = cout;
  Tensor<T> y(shape);
  const T* __restrict w = wv.data.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* __restrict yr = &y.data[r * cout];
    if (bias) std::copy_n(tape.value(*bias).data.data(), cout, yr);
    const T* __restrict xr = &xv.data[r * cin];
    for (std::size_t i = 0; i < cin; ++i) {
      const T xi = xr[i];
      const T* __restrict wi = w + i * cout;
      for (std::size_t o = 0; o < cout; ++o) yr[o] += xi * wi[o];
    }
  }
  const bool ng = tape.needs_grad(x) || tape.needs_grad(weight) || (bias && tape.needs_grad(*bias));
  return tape.record(std::move(y), ng, [x, weight, bias, rows, cin, cout](Tape<T>& t, std::span<const T> gy) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(weight);
    if (t.needs_grad(x)) {
      std::vector<T> wt(cin * cout);  // transposed, so the row update is an axpy
      for (std::size_t i = 0; i < cin; ++i)
        for (std::size_t o = 0; o < cout; ++o) wt[o * cin + i] = wv.data[i * cout + o];
      T* __restrict gx = t.grad(x).data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* __restrict g = &gy[r * cout];
        T* __restrict gxr = gx + r * cin;
        for (std::size_t o = 0; o < cout; ++o) {
          const T go = g[o];
          const T* __restrict wo = &wt[o * cin];
          for (std::size_t i = 0; i < cin; ++i) gxr[i] += go * wo[i];
        }
      }
    }
    if (t.needs_grad(weight)) {
      T* __restrict gw = t.grad(weight).data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* __restrict g = &gy[r * cout];
        const T* __restrict xr = &xv.data[r * cin];
        for (std::size_t i = 0; i < cin; ++i) {
          const T xi = xr[i];
          T* __restrict gwi = gw + i * cout;
          for (std::size_t o = 0; o < cout; ++o) gwi[o] += xi * g[o];
        }
      }
    }
    if (bias && t.needs_grad(*bias)) {
      auto gb = t.grad(*bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < cout; ++o) gb[o] += gy[r * cout + o];
    }
  });
}

template <class T>
Var linear(Context<T>& ctx, Var x, const LinearLayer& layer) {
  std::optional<Var> b;
  if (layer.bias) b = ctx.param(*layer.bias);
  return linear(ctx.tape, x, ctx.param(layer.weight), b);
}

/// Per-channel normalisation over every axis but the last. Train mode uses
/// batch statistics and updates the running estimates in `store`.
template <class T>
Var batchnorm(Tape<T>& tape, ParamStore<T>& store, Var x, const NormLayer& layer, Mode mode) {
  const auto& xv = tape.value(x);
  const std::size_t c = xv.last();
  if (c != layer.channels)
    throw SizeError("batchnorm: channel count " + std::to_string(c) + " != " + std::to_string(layer.channels));
  const std::size_t rows = xv.rows();
  Var gamma = tape.param(store, layer.gamma);
  Var beta = tape.param(store, layer.beta);
  const auto& g = tape.value(gamma).data;
  const auto& bt = tape.value(beta).data;
  std::vector<double> mean(c, 0.0), invstd(c, 0.0);
  if (mode == Mode::train) {
    if (rows < 2) throw DegenerateStatistics("batchnorm: train mode needs at least 2 samples per channel");
    std::vector<double> var(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < c; ++k) mean[k] += xv.data[r * c + k];
    for (auto& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const double d = xv.data[r * c + k] - mean[k];
        var[k] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(rows);
    auto& rm = store.value(layer.running_mean).data;
    auto& rv = store.value(layer.running_var).data;
    const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
    for (std::size_t k = 0; k < c; ++k) {
      invstd[k] = 1.0 / std::sqrt(var[k] + layer.eps);
      rm[k] = static_cast<T>((1.0 - layer.momentum) * rm[k] + layer.momentum * mean[k]);
      rv[k] = static_cast<T>((1.0 - layer.momentum) * rv[k] + layer.momentum * var[k] * unbias);
    }
  } else {
    const auto& rm = store.value(layer.running_mean).data;
    const auto& rv = store.value(layer.running_var).data;
    for (std::size_t k = 0; k < c; ++k) {
      mean[k] = rm[k];
      invstd[k] = 1.0 / std::sqrt(static_cast<double>(rv[k]) + layer.eps);
    }
  }
  Tensor<T> y(xv.shape);
  Tensor<T> xhat(xv.shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) {
      const double h = (xv.data[r * c + k] - mean[k]) * invstd[k];
      xhat.data[r * c + k] = static_cast<T>(h);
      y.data[r * c + k] = static_cast<T>(g[k] * h + bt[k]);
    }
  const bool ng = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
  const bool train = mode == Mode::train;
  return tape.record(std::move(y), ng,
                     [x, gamma, beta, rows, c, train, invstd = std::move(invstd), xhat = std::move(xhat)](
                         Tape<T>& t, std::span<const T> gy) {
                       std::vector<double> sum_g(c, 0.0), sum_gh(c, 0.0);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t k = 0; k < c; ++k) {
                           sum_g[k] += gy[r * c + k];
                           sum_gh[k] += static_cast<double>(gy[r * c + k]) * xhat.data[r * c + k];
                         }
                       if (t.needs_grad(gamma)) {
                         auto gg = t.grad(gamma);
                         for (std::size_t k = 0; k < c; ++k) gg[k] += static_cast<T>(sum_gh[k]);
                       }
                       if (t.needs_grad(beta)) {
                         auto gb = t.grad(beta);
                         for (std::size_t k = 0; k < c; ++k) gb[k] += static_cast<T>(sum_g[k]);
                       }
                       if (t.needs_grad(x)) {
                         const auto& gam = t.value(gamma).data;
                         auto gx = t.grad(x);
                         const double n = static_cast<double>(rows);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t k = 0; k < c; ++k) {
                             const double scale = gam[k] * invstd[k];
                             double v;
                             if (train)
                               v = scale / n * (n * gy[r * c + k] - sum_g[k] - xhat.data[r * c + k] * sum_gh[k]);
                             else
                               v = scale * gy[r * c + k];
                             gx[r * c + k] += static_cast<T>(v);
                           }
                       }
                     });
}

template <class T>
Var batchnorm(Context<T>& ctx, Var x, const NormLayer& layer) {
  return batchnorm(ctx.tape, ctx.params, x, layer, ctx.mode);
}

struct Activation {
  enum class Kind { relu, leaky_relu } kind = Kind::relu;
  double slope = 0.01;
};

template <class T>
Var activation(Tape<T>& tape, Var x, Activation act) {
  const auto& xv = tape.value(x);
  Tensor<T> y(xv.shape);
  const T slope = act.kind == Activation::Kind::relu ? T(0) : static_cast<T>(act.slope);
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] = xv.data[i] > T(0) ? xv.data[i] : slope * xv.data[i];
  return tape.record(std::move(y), tape.needs_grad(x), [x, slope](Tape<T>& t, std::span<const T> gy) {
    const auto& xv = t.value(x);
    auto gx = t.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += xv.data[i] > T(0) ? gy[i] : slope * gy[i];
  });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  return activation(tape, x, Activation{});
}

template <class T>
Var leaky_relu(Tape<T>& tape, Var x, double slope) {
  return activation(tape, x, Activation{Activation::Kind::leaky_relu, slope});
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.shape != bv.shape) throw SizeError("add: shape " + to_string(av.shape) + " vs " + to_string(bv.shape));
  Tensor<T> y(av.shape);
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] + bv.data[i];
  return tape.record(std::move(y), tape.needs_grad(a) || tape.needs_grad(b), [a, b](Tape<T>& t, std::span<const T> gy) {
    for (Var v : {a, b})
      if (t.needs_grad(v)) {
        auto g = t.grad(v);
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
      }
  });
}

/// relu(main + skip)
template <class T>
Var residual_fuse(Tape<T>& tape, Var main, Var skip) {
  return relu(tape, add(tape, main, skip));
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.shape != bv.shape) throw SizeError("mul: shape " + to_string(av.shape) + " vs " + to_string(bv.shape));
  Tensor<T> y(av.shape);
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] * bv.data[i];
  return tape.record(std::move(y), tape.needs_grad(a) || tape.needs_grad(b), [a, b](Tape<T>& t, std::span<const T> gy) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (t.needs_grad(a)) {
      auto g = t.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * bv.data[i];
    }
    if (t.needs_grad(b)) {
      auto g = t.grad(b);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * av.data[i];
    }
  });
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  double s = 0.0;
  for (T v : xv.data) s += v;
  return tape.record(Tensor<T>({1}, static_cast<T>(s)), tape.needs_grad(x), [x](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad(x);
    for (auto& v : g) v += gy[0];
  });
}

/// Scalar sum_i x_i * coeff_i with constant coefficients.
template <class T>
Var weighted_sum(Tape<T>& tape, Var x, Tensor<T> coeff) {
  const auto& xv = tape.value(x);
  if (coeff.numel() != xv.numel()) throw SizeError("weighted_sum: coefficient count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < xv.numel(); ++i) s += static_cast<double>(xv.data[i]) * coeff.data[i];
  return tape.record(Tensor<T>({1}, static_cast<T>(s)), tape.needs_grad(x),
                     [x, coeff = std::move(coeff)](Tape<T>& t, std::span<const T> gy) {
                       auto g = t.grad(x);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[0] * coeff.data[i];
                     });
}

template <class T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
  Tensor<T> y = reshaped(tape.value(x), std::move(shape));
  return tape.record(std::move(y), tape.needs_grad(x), [x](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
  });
}

/// Concatenates along the last axis; leading extents must agree.
template <class T>
Var concat(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.rows() != bv.rows() || av.rank() != bv.rank())
    throw SizeError("concat: leading shapes differ " + to_string(av.shape) + " vs " + to_string(bv.shape));
  const std::size_t rows = av.rows(), ca = av.last(), cb = bv.last();
  Shape shape = av.shape;
  shape.back() = ca + cb;
  Tensor<T> y(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&av.data[r * ca], ca, &y.data[r * (ca + cb)]);
    std::copy_n(&bv.data[r * cb], cb, &y.data[r * (ca + cb) + ca]);
  }
  return tape.record(std::move(y), tape.needs_grad(a) || tape.needs_grad(b),
                     [a, b, rows, ca, cb](Tape<T>& t, std::span<const T> gy) {
                       if (t.needs_grad(a)) {
                         auto g = t.grad(a);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t k = 0; k < ca; ++k) g[r * ca + k] += gy[r * (ca + cb) + k];
                       }
                       if (t.needs_grad(b)) {
                         auto g = t.grad(b);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t k = 0; k < cb; ++k) g[r * cb + k] += gy[r * (ca + cb) + ca + k];
                       }
                     });
}

/// Rows of x [B][N][C] selected by idx [B][M] -> [B][M][C].
template <class T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::int32_t> idx, std::size_t m) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 3) throw SizeError("gather_rows: input must be [B][N][C]");
  const std::size_t batch = xv.dim(0), n = xv.dim(1), c = xv.dim(2);
  if (idx.size() != batch * m) throw SizeError("gather_rows: index count mismatch");
  Tensor<T> y({batch, m, c});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i) {
      const auto s = static_cast<std::size_t>(idx[b * m + i]);
      if (s >= n) throw SizeError("gather_rows: index out of range");
      std::copy_n(&xv.data[(b * n + s) * c], c, &y.data[(b * m + i) * c]);
    }
  return tape.record(std::move(y), tape.needs_grad(x),
                     [x, idx = std::move(idx), batch, n, m, c](Tape<T>& t, std::span<const T> gy) {
                       auto g = t.grad(x);
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t i = 0; i < m; ++i) {
                           const auto s = static_cast<std::size_t>(idx[b * m + i]);
                           for (std::size_t k = 0; k < c; ++k) g[(b * n + s) * c + k] += gy[(b * m + i) * c + k];
                         }
                     });
}

/// Neighbor features x [B][N][C] -> [B][M][K][C].
template <class T>
Var gather_neighbors(Tape<T>& tape, Var x, const NeighborIndex& nb) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 3 || xv.dim(0) != nb.batch) throw SizeError("gather_neighbors: input must be [B][N][C]");
  const std::size_t n = xv.dim(1), c = xv.dim(2), rows = nb.batch * nb.centers * nb.k;
  Tensor<T> y({nb.batch, nb.centers, nb.k, c});
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t b = r / (nb.centers * nb.k);
    const auto s = static_cast<std::size_t>(nb.indices[r]);
    if (s >= n) throw SizeError("gather_neighbors: index out of range");
    std::copy_n(&xv.data[(b * n + s) * c], c, &y.data[r * c]);
  }
  return tape.record(std::move(y), tape.needs_grad(x),
                     [x, idx = nb.indices, per_batch = nb.centers * nb.k, n, c](Tape<T>& t, std::span<const T> gy) {
                       auto g = t.grad(x);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         const std::size_t base = (r / per_batch * n + static_cast<std::size_t>(idx[r])) * c;
                         for (std::size_t k = 0; k < c; ++k) g[base + k] += gy[r * c + k];
                       }
                     });
}

/// f_neighbor - f_center for x [B][N][C] -> [B][M][K][C].
template <class T>
Var group_relative(Tape<T>& tape, Var x, const NeighborIndex& nb) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 3 || xv.dim(0) != nb.batch || nb.center.size() != nb.batch * nb.centers)
    throw SizeError("group_relative: input must be [B][N][C] matching the neighbor table");
  const std::size_t n = xv.dim(1), c = xv.dim(2);
  Tensor<T> y({nb.batch, nb.centers, nb.k, c});
  for (std::size_t b = 0; b < nb.batch; ++b)
    for (std::size_t i = 0; i < nb.centers; ++i) {
      const auto ci = static_cast<std::size_t>(nb.center[b * nb.centers + i]);
      if (ci >= n) throw SizeError("group_relative: center index out of range");
      const T* fc = &xv.data[(b * n + ci) * c];
      for (std::size_t j = 0; j < nb.k; ++j) {
        const auto s = static_cast<std::size_t>(nb.at(b, i, j));
        if (s >= n) throw SizeError("group_relative: neighbor index out of range");
        const T* fn = &xv.data[(b * n + s) * c];
        T* out = &y.data[((b * nb.centers + i) * nb.k + j) * c];
        for (std::size_t k = 0; k < c; ++k) out[k] = fn[k] - fc[k];
      }
    }
  return tape.record(std::move(y), tape.needs_grad(x), [x, nb, n, c](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad(x);
    for (std::size_t b = 0; b < nb.batch; ++b)
      for (std::size_t i = 0; i < nb.centers; ++i) {
        T* gc = &g[(b * n + static_cast<std::size_t>(nb.center[b * nb.centers + i])) * c];
        for (std::size_t j = 0; j < nb.k; ++j) {
          T* gn = &g[(b * n + static_cast<std::size_t>(nb.at(b, i, j))) * c];
          const T* go = &gy[((b * nb.centers + i) * nb.k + j) * c];
          for (std::size_t k = 0; k < c; ++k) {
            gn[k] += go[k];
            gc[k] -= go[k];
          }
        }
      }
  });
}

enum class Reduction { sum, max };

/// Reduces v [B][M][K][...] over K, skipping padded slots. Sum counts each
/// real neighbor once; max sends gradient to the first maximal slot.
template <class T>
Var neighbor_reduce(Tape<T>& tape, Var v, Reduction mode, std::span<const std::uint8_t> pad = {}) {
  const auto& vv = tape.value(v);
  if (vv.rank() < 3) throw SizeError("neighbor_reduce: input must be [B][M][K][...]");
  const std::size_t outer = vv.dim(0) * vv.dim(1), k = vv.dim(2);
  if (k == 0) throw SizeError("neighbor_reduce: K must be at least 1");
  const std::size_t d = vv.numel() / (outer * k);
  if (!pad.empty() && pad.size() != outer * k) throw SizeError("neighbor_reduce: pad mask length mismatch");
  Shape shape = vv.shape;
  shape.erase(shape.begin() + 2);
  Tensor<T> y(shape);
  std::vector<std::uint32_t> winner;
  std::vector<std::uint8_t> mask(pad.begin(), pad.end());
  for (std::size_t r = 0; r < outer; ++r) {
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) any |= mask.empty() || !mask[r * k + j];
    if (!any) throw EmptyNeighborhood("neighbor_reduce: every entry of neighborhood " + std::to_string(r) + " is padded");
  }
  if (mode == Reduction::sum) {
    for (std::size_t r = 0; r < outer; ++r)
      for (std::size_t j = 0; j < k; ++j) {
        if (!mask.empty() && mask[r * k + j]) continue;
        const T* src = &vv.data[(r * k + j) * d];
        T* dst = &y.data[r * d];
        for (std::size_t e = 0; e < d; ++e) dst[e] += src[e];
      }
  } else {
    winner.assign(outer * d, 0);
    for (std::size_t r = 0; r < outer; ++r) {
      T* dst = &y.data[r * d];
      std::fill_n(dst, d, -std::numeric_limits<T>::infinity());
      for (std::size_t j = 0; j < k; ++j) {
        if (!mask.empty() && mask[r * k + j]) continue;
        const T* src = &vv.data[(r * k + j) * d];
        for (std::size_t e = 0; e < d; ++e)
          if (src[e] > dst[e]) {
            dst[e] = src[e];
            winner[r * d + e] = static_cast<std::uint32_t>(j);
          }
      }
    }
  }
  return tape.record(std::move(y), tape.needs_grad(v),
                     [v, mode, outer, k, d, mask = std::move(mask), winner = std::move(winner)](
                         Tape<T>& t, std::span<const T> gy) {
                       auto g = t.grad(v);
                       if (mode == Reduction::sum) {
                         for (std::size_t r = 0; r < outer; ++r)
                           for (std::size_t j = 0; j < k; ++j) {
                             if (!mask.empty() && mask[r * k + j]) continue;
                             for (std::size_t e = 0; e < d; ++e) g[(r * k + j) * d + e] += gy[r * d + e];
                           }
                       } else {
                         for (std::size_t r = 0; r < outer; ++r)
                           for (std::size_t e = 0; e < d; ++e) g[(r * k + winner[r * d + e]) * d + e] += gy[r * d + e];
                       }
                     });
}

/// out[r][c] = sum_d v[r][c][d] * w[c][d] + bias[c]; channels never mix.
template <class T>
Var grouped_projection(Tape<T>& tape, Var v, Var weight, std::optional<Var> bias) {
  const auto& vv = tape.value(v);
  const auto& wv = tape.value(weight);
  if (wv.rank() != 2 || vv.rank() < 2) throw SizeError("grouped_projection: expected v [...][C][m], w [C][m]");
  const std::size_t c = wv.dim(0), m = wv.dim(1);
  if (vv.dim(vv.rank() - 1) != m)
    throw SizeError("grouped_projection: vector dim " + std::to_string(vv.last()) + " != weight dim " +
                    std::to_string(m));
  if (vv.dim(vv.rank() - 2) != c) throw SizeError("grouped_projection: channel count mismatch");
  if (bias && tape.value(*bias).numel() != c) throw SizeError("grouped_projection: bias length mismatch");
  const std::size_t rows = vv.numel() / (c * m);
  Shape shape(vv.shape.begin(), vv.shape.end() - 1);
  Tensor<T> y(shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc = bias ? tape.value(*bias).data[ch] : T(0);
      for (std::size_t e = 0; e < m; ++e) acc += vv.data[(r * c + ch) * m + e] * wv.data[ch * m + e];
      y.data[r * c + ch] = acc;
    }
  const bool ng = tape.needs_grad(v) || tape.needs_grad(weight) || (bias && tape.needs_grad(*bias));
  return tape.record(std::move(y), ng, [v, weight, bias, rows, c, m](Tape<T>& t, std::span<const T> gy) {
    const auto& vv = t.value(v);
    const auto& wv = t.value(weight);
    if (t.needs_grad(v)) {
      auto g = t.grad(v);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t e = 0; e < m; ++e) g[(r * c + ch) * m + e] += gy[r * c + ch] * wv.data[ch * m + e];
    }
    if (t.needs_grad(weight)) {
      auto g = t.grad(weight);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t e = 0; e < m; ++e) g[ch * m + e] += gy[r * c + ch] * vv.data[(r * c + ch) * m + e];
    }
    if (bias && t.needs_grad(*bias)) {
      auto g = t.grad(*bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) g[ch] += gy[r * c + ch];
    }
  });
}

template <class T>
Var grouped_projection(Context<T>& ctx, Var v, const GroupedProjection& layer) {
  std::optional<Var> b;
  if (layer.bias) b = ctx.param(*layer.bias);
  return grouped_projection(ctx.tape, v, ctx.param(layer.weight), b);
}

/// Fixed grouped kernel over neighbor slots: v [B][M][K][C][m], w [C][K][m]
/// -> [B][M][C]. Padded slots contribute nothing.
template <class T>
Var slot_groupconv(Tape<T>& tape, Var v, Var weight, std::optional<Var> bias, std::span<const std::uint8_t> pad = {}) {
  const auto& vv = tape.value(v);
  const auto& wv = tape.value(weight);
  if (vv.rank() != 5 || wv.rank() != 3) throw SizeError("slot_groupconv: expected v [B][M][K][C][m], w [C][K][m]");
  const std::size_t outer = vv.dim(0) * vv.dim(1), k = vv.dim(2), c = vv.dim(3), m = vv.dim(4);
  if (wv.dim(0) != c || wv.dim(1) != k || wv.dim(2) != m)
    throw SizeError("slot_groupconv: kernel " + to_string(wv.shape) + " does not fit input " + to_string(vv.shape));
  if (!pad.empty() && pad.size() != outer * k) throw SizeError("slot_groupconv: pad mask length mismatch");
  std::vector<std::uint8_t> mask(pad.begin(), pad.end());
  Tensor<T> y({vv.dim(0), vv.dim(1), c});
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc = bias ? tape.value(*bias).data[ch] : T(0);
      for (std::size_t j = 0; j < k; ++j) {
        if (!mask.empty() && mask[r * k + j]) continue;
        for (std::size_t e = 0; e < m; ++e)
          acc += vv.data[((r * k + j) * c + ch) * m + e] * wv.data[(ch * k + j) * m + e];
      }
      y.data[r * c + ch] = acc;
    }
  const bool ng = tape.needs_grad(v) || tape.needs_grad(weight) || (bias && tape.needs_grad(*bias));
  return tape.record(std::move(y), ng,
                     [v, weight, bias, outer, k, c, m, mask = std::move(mask)](Tape<T>& t, std::span<const T> gy) {
                       const auto& vv = t.value(v);
                       const auto& wv = t.value(weight);
                       const bool gv = t.needs_grad(v), gw = t.needs_grad(weight);
                       std::span<T> dv, dw;
                       if (gv) dv = t.grad(v);
                       if (gw) dw = t.grad(weight);
                       for (std::size_t r = 0; r < outer; ++r)
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           const T g = gy[r * c + ch];
                           for (std::size_t j = 0; j < k; ++j) {
                             if (!mask.empty() && mask[r * k + j]) continue;
                             for (std::size_t e = 0; e < m; ++e) {
                               const std::size_t vi = ((r * k + j) * c + ch) * m + e, wi = (ch * k + j) * m + e;
                               if (gv) dv[vi] += g * wv.data[wi];
                               if (gw) dw[wi] += g * vv.data[vi];
                             }
                           }
                         }
                       if (bias && t.needs_grad(*bias)) {
                         auto gb = t.grad(*bias);
                         for (std::size_t r = 0; r < outer; ++r)
                           for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += gy[r * c + ch];
                       }
                     });
}

template <class T>
Var slot_groupconv(Context<T>& ctx, Var v, const SlotKernel& layer, std::span<const std::uint8_t> pad = {}) {
  std::optional<Var> b;
  if (layer.bias) b = ctx.param(*layer.bias);
  return slot_groupconv(ctx.tape, v, ctx.param(layer.weight), b, pad);
}

/// Lifts every scalar zx[r][c] to an m-vector by rotation.
///   m = 3: angles [R][2C] hold alpha in the first C columns and beta in the
///          last C; output (-zx sin a sin b, zx cos a sin b, zx cos b).
///   m = 2: angles [R][C] hold alpha; output (-zx sin a, zx cos a).
///   m = 1: no angles; output zx.
template <class T>
Var rotate_expand(Tape<T>& tape, Var zx, std::optional<Var> angles, std::size_t m) {
  const auto& zv = tape.value(zx);
  const std::size_t rows = zv.rows(), c = zv.last();
  if (m < 1 || m > 3) throw ConfigError("rotate_expand: vector dim must be 1, 2 or 3");
  if (m > 1) {
    if (!angles) throw SizeError("rotate_expand: angles required for m > 1");
    const auto& av = tape.value(*angles);
    if (av.rows() != rows || av.last() != (m - 1) * c) throw SizeError("rotate_expand: angle tensor shape mismatch");
  }
  Shape shape = zv.shape;
  shape.push_back(m);
  Tensor<T> y(shape);
  if (m == 1) {
    y.data = zv.data;
  } else {
    const auto& av = tape.value(*angles);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T z = zv.data[r * c + ch];
        const T a = av.data[r * (m - 1) * c + ch];
        T* o = &y.data[(r * c + ch) * m];
        if (m == 2) {
          o[0] = -z * std::sin(a);
          o[1] = z * std::cos(a);
        } else {
          const T b = av.data[r * 2 * c + c + ch];
          const T sb = std::sin(b);
          o[0] = -z * std::sin(a) * sb;
          o[1] = z * std::cos(a) * sb;
          o[2] = z * std::cos(b);
        }
      }
  }
  const bool ng = tape.needs_grad(zx) || (angles && tape.needs_grad(*angles));
  return tape.record(std::move(y), ng, [zx, angles, rows, c, m](Tape<T>& t, std::span<const T> gy) {
    const auto& zv = t.value(zx);
    if (m == 1) {
      auto g = t.grad(zx);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
      return;
    }
    const auto& av = t.value(*angles);
    std::span<T> gz, ga;
    if (t.needs_grad(zx)) gz = t.grad(zx);
    if (t.needs_grad(*angles)) ga = t.grad(*angles);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T z = zv.data[r * c + ch];
        const std::size_t ai = r * (m - 1) * c + ch;
        const T a = av.data[ai];
        const T sa = std::sin(a), ca = std::cos(a);
        const T* g = &gy[(r * c + ch) * m];
        if (m == 2) {
          if (!gz.empty()) gz[r * c + ch] += -g[0] * sa + g[1] * ca;
          if (!ga.empty()) ga[ai] += -z * (g[0] * ca + g[1] * sa);
        } else {
          const T b = av.data[ai + c];
          const T sb = std::sin(b), cb = std::cos(b);
          if (!gz.empty()) gz[r * c + ch] += -g[0] * sa * sb + g[1] * ca * sb + g[2] * cb;
          if (!ga.empty()) {
            ga[ai] += -z * sb * (g[0] * ca + g[1] * sa);
            ga[ai + c] += z * (-g[0] * sa * cb + g[1] * ca * cb - g[2] * sb);
          }
        }
      }
  });
}

/// d / (|d| + eps) over the last axis.
template <class T>
Var normalize_vectors(Tape<T>& tape, Var d, double eps = 1e-8) {
  const auto& dv = tape.value(d);
  const std::size_t rows = dv.rows(), m = dv.last();
  Tensor<T> y(dv.shape);
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (std::size_t e = 0; e < m; ++e) n2 += static_cast<double>(dv.data[r * m + e]) * dv.data[r * m + e];
    norms[r] = static_cast<T>(std::sqrt(n2));
    const double s = std::sqrt(n2) + eps;
    for (std::size_t e = 0; e < m; ++e) y.data[r * m + e] = static_cast<T>(dv.data[r * m + e] / s);
  }
  return tape.record(std::move(y), tape.needs_grad(d),
                     [d, rows, m, eps, norms = std::move(norms)](Tape<T>& t, std::span<const T> gy) {
                       const auto& dv = t.value(d);
                       auto g = t.grad(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double n = norms[r], s = n + eps;
                         double dot = 0.0;
                         for (std::size_t e = 0; e < m; ++e) dot += static_cast<double>(dv.data[r * m + e]) * gy[r * m + e];
                         const double coef = n > 0.0 ? dot / (n * s * s) : 0.0;
                         for (std::size_t e = 0; e < m; ++e)
                           g[r * m + e] += static_cast<T>(gy[r * m + e] / s - coef * dv.data[r * m + e]);
                       }
                     });
}

/// s [..][C] times v [..][C][m], broadcasting s over the vector axis.
template <class T>
Var scale_vectors(Tape<T>& tape, Var s, Var v) {
  const auto& sv = tape.value(s);
  const auto& vv = tape.value(v);
  const std::size_t m = vv.last();
  if (sv.numel() * m != vv.numel()) throw SizeError("scale_vectors: shapes do not broadcast");
  Tensor<T> y(vv.shape);
  for (std::size_t i = 0; i < sv.numel(); ++i)
    for (std::size_t e = 0; e < m; ++e) y.data[i * m + e] = sv.data[i] * vv.data[i * m + e];
  return tape.record(std::move(y), tape.needs_grad(s) || tape.needs_grad(v), [s, v, m](Tape<T>& t, std::span<const T> gy) {
    const auto& sv = t.value(s);
    const auto& vv = t.value(v);
    if (t.needs_grad(s)) {
      auto g = t.grad(s);
      for (std::size_t i = 0; i < sv.numel(); ++i)
        for (std::size_t e = 0; e < m; ++e) g[i] += gy[i * m + e] * vv.data[i * m + e];
    }
    if (t.needs_grad(v)) {
      auto g = t.grad(v);
      for (std::size_t i = 0; i < sv.numel(); ++i)
        for (std::size_t e = 0; e < m; ++e) g[i * m + e] += gy[i * m + e] * sv.data[i];
    }
  });
}

/// Weighted sum of coarse rows: coarse [B][Mc][C] -> [B][N][C].
template <class T>
Var interpolate(Tape<T>& tape, Var coarse, const geometry::InterpolationWeights& w) {
  const auto& cv = tape.value(coarse);
  if (cv.rank() != 3 || cv.dim(0) != w.batch) throw SizeError("interpolate: coarse features must be [B][M][C]");
  const std::size_t mc = cv.dim(1), c = cv.dim(2);
  Tensor<T> y({w.batch, w.fine, c});
  for (std::size_t b = 0; b < w.batch; ++b)
    for (std::size_t i = 0; i < w.fine; ++i) {
      T* out = &y.data[(b * w.fine + i) * c];
      for (std::size_t j = 0; j < w.k; ++j) {
        const std::size_t slot = (b * w.fine + i) * w.k + j;
        const auto idx = static_cast<std::size_t>(w.indices[slot]);
        if (idx >= mc) throw SizeError("interpolate: index out of range");
        const T wt = static_cast<T>(w.weights[slot]);
        const T* src = &cv.data[(b * mc + idx) * c];
        for (std::size_t k = 0; k < c; ++k) out[k] += wt * src[k];
      }
    }
  return tape.record(std::move(y), tape.needs_grad(coarse), [coarse, w, mc, c](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad(coarse);
    for (std::size_t b = 0; b < w.batch; ++b)
      for (std::size_t i = 0; i < w.fine; ++i)
        for (std::size_t j = 0; j < w.k; ++j) {
          const std::size_t slot = (b * w.fine + i) * w.k + j;
          const T wt = static_cast<T>(w.weights[slot]);
          T* dst = &g[(b * mc + static_cast<std::size_t>(w.indices[slot])) * c];
          for (std::size_t k = 0; k < c; ++k) dst[k] += wt * gy[(b * w.fine + i) * c + k];
        }
  });
}

/// Mean over rows of -sum_k q_k log softmax_k with q = (1-eps) onehot + eps/K.
template <class T>
Var ce_label_smoothing(Tape<T>& tape, Var logits, std::span<const int> labels, double eps) {
  const auto& lv = tape.value(logits);
  const std::size_t s = lv.rows(), k = lv.last();
  if (labels.size() != s) throw SizeError("cross entropy: label count does not match logit rows");
  if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("cross entropy: smoothing must be in [0, 1)");
  std::vector<T> prob(lv.numel());
  double loss = 0.0;
  for (std::size_t r = 0; r < s; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw DataError("cross entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    const T* row = &lv.data[r * k];
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double logz = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) {
      const double logp = row[j] - logz;
      const double q = (1.0 - eps) * (static_cast<std::size_t>(label) == j ? 1.0 : 0.0) + eps / static_cast<double>(k);
      loss -= q * logp;
      prob[r * k + j] = static_cast<T>(std::exp(logp));
    }
  }
  loss /= static_cast<double>(s);
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(Tensor<T>({1}, static_cast<T>(loss)), tape.needs_grad(logits),
                     [logits, s, k, eps, prob = std::move(prob), lab = std::move(lab)](Tape<T>& t,
                                                                                        std::span<const T> gy) {
                       auto g = t.grad(logits);
                       const double scale = gy[0] / static_cast<double>(s);
                       for (std::size_t r = 0; r < s; ++r)
                         for (std::size_t j = 0; j < k; ++j) {
                           const double q = (1.0 - eps) * (static_cast<std::size_t>(lab[r]) == j ? 1.0 : 0.0) +
                                            eps / static_cast<double>(k);
                           g[r * k + j] += static_cast<T>(scale * (prob[r * k + j] - q));
                         }
                     });
}

template <class T>
Var dense_unit(Context<T>& ctx, Var x, const DenseUnit& unit) {
  return relu(ctx.tape, batchnorm(ctx, linear(ctx, x, unit.linear), unit.norm));
}

}  // namespace ops
}  // namespace pointvector
