#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>

#include "pointvector/nnops.hpp"

namespace pointvector {

/// Rotation of (0, zx, 0): first about x by pi/2 - beta, then about z by
/// alpha. Norm equals |zx|.
inline std::array<double, 3> rotate3d(double zx, double alpha, double beta) {
  return {-zx * std::sin(alpha) * std::sin(beta), zx * std::cos(alpha) * std::sin(beta), zx * std::cos(beta)};
}

/// Single-angle restriction of rotate3d: rotation of (0, zx) by alpha.
inline std::array<double, 2> rotate2d(double zx, double alpha) {
  return {-zx * std::sin(alpha), zx * std::cos(alpha)};
}

/// Rot_z(alpha) * Rot_x(pi/2 - beta), row-major.
inline std::array<double, 9> rotation_matrix(double alpha, double beta) {
  const double ca = std::cos(alpha), sa = std::sin(alpha), cb = std::cos(beta), sb = std::sin(beta);
  const std::array<double, 9> rz{ca, -sa, 0, sa, ca, 0, 0, 0, 1};
  const std::array<double, 9> rx{1, 0, 0, 0, sb, -cb, 0, cb, sb};
  std::array<double, 9> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i * 3 + j] += rz[i * 3 + k] * rx[k * 3 + j];
  return r;
}

enum class EncoderKind { rotation, mlp, direction };

inline const char* to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::rotation: return "rotation";
    case EncoderKind::mlp: return "mlp";
    case EncoderKind::direction: return "direction";
  }
  return "?";
}

inline EncoderKind parse_encoder(const std::string& s) {
  if (s == "rotation") return EncoderKind::rotation;
  if (s == "mlp") return EncoderKind::mlp;
  if (s == "direction") return EncoderKind::direction;
  throw ConfigError("unknown encoder '" + s + "' (expected rotation|mlp|direction)");
}

/// Produces per-channel m-vectors from mixed neighbor features.
///   rotation:  zx = Linear(fp); [alpha, beta] = ReLU(BN(Linear(fp))); rotate.
///   mlp:       Linear -> BN -> ReLU -> Linear(C -> C*m).
///   direction: modulus = Linear(fp); unit direction from the mlp branch.
struct VectorEncoder {
  EncoderKind kind = EncoderKind::rotation;
  std::size_t channels = 0;
  std::size_t dim = 3;
  LinearLayer primary;  // zx (rotation), modulus (direction), unused for mlp
  std::optional<LinearLayer> angle;
  std::optional<NormLayer> angle_norm;
  std::optional<DenseUnit> hidden;
  std::optional<LinearLayer> expand;
};

template <class T>
VectorEncoder make_encoder(ParamStore<T>& store, const std::string& name, EncoderKind kind, std::size_t channels,
                           std::size_t dim, std::mt19937_64& rng) {
  if (dim < 1 || dim > 3) throw ConfigError("vector dimension must be 1, 2 or 3, got " + std::to_string(dim));
  VectorEncoder e;
  e.kind = kind;
  e.channels = channels;
  e.dim = dim;
  switch (kind) {
    case EncoderKind::rotation:
      e.primary = make_linear(store, name + ".zx", channels, channels, true, rng);
      if (dim > 1) {
        e.angle = make_linear(store, name + ".angle", channels, (dim - 1) * channels, true, rng);
        e.angle_norm = make_norm(store, name + ".angle_norm", (dim - 1) * channels);
      }
      break;
    case EncoderKind::mlp:
      e.hidden = make_dense(store, name + ".hidden", channels, channels, rng);
      e.expand = make_linear(store, name + ".expand", channels, channels * dim, true, rng);
      break;
    case EncoderKind::direction:
      e.primary = make_linear(store, name + ".modulus", channels, channels, true, rng);
      e.hidden = make_dense(store, name + ".hidden", channels, channels, rng);
      e.expand = make_linear(store, name + ".direction", channels, channels * dim, true, rng);
      break;
  }
  return e;
}

namespace vecenc {

/// fp = relu(rel_feat + Linear(rel_pos)), the mixed relative feature.
template <class T>
Var mix_features(Context<T>& ctx, Var rel_feat, Var rel_pos, const LinearLayer& pos) {
  return ops::relu(ctx.tape, ops::add(ctx.tape, rel_feat, ops::linear(ctx, rel_pos, pos)));
}

namespace detail {
template <class T>
Var split_vectors(Context<T>& ctx, Var flat, std::size_t channels, std::size_t dim) {
  Shape s = ctx.tape.shape(flat);
  s.back() = channels;
  s.push_back(dim);
  return ops::reshape(ctx.tape, flat, s);
}
}  // namespace detail

template <class T>
Var encode_rotation(Context<T>& ctx, Var fp, const VectorEncoder& enc) {
  Var zx = ops::linear(ctx, fp, enc.primary);
  if (enc.dim == 1) return ops::rotate_expand(ctx.tape, zx, std::nullopt, 1);
  Var angles = ops::relu(ctx.tape, ops::batchnorm(ctx, ops::linear(ctx, fp, *enc.angle), *enc.angle_norm));
  return ops::rotate_expand(ctx.tape, zx, angles, enc.dim);
}

template <class T>
Var encode_mlp(Context<T>& ctx, Var fp, const VectorEncoder& enc) {
  Var h = ops::dense_unit(ctx, fp, *enc.hidden);
  return detail::split_vectors(ctx, ops::linear(ctx, h, *enc.expand), enc.channels, enc.dim);
}

template <class T>
Var encode_direction(Context<T>& ctx, Var fp, const VectorEncoder& enc, double eps = 1e-8) {
  Var modulus = ops::linear(ctx, fp, enc.primary);
  Var h = ops::dense_unit(ctx, fp, *enc.hidden);
  Var dir = ops::normalize_vectors(ctx.tape, detail::split_vectors(ctx, ops::linear(ctx, h, *enc.expand), enc.channels, enc.dim), eps);
  return ops::scale_vectors(ctx.tape, modulus, dir);
}

/// fp [..][C] -> vector field [..][C][m].
template <class T>
Var encode(Context<T>& ctx, Var fp, const VectorEncoder& enc) {
  if (ctx.tape.value(fp).last() != enc.channels) throw SizeError("encoder: channel count mismatch");
  switch (enc.kind) {
    case EncoderKind::rotation: return encode_rotation(ctx, fp, enc);
    case EncoderKind::mlp: return encode_mlp(ctx, fp, enc);
    case EncoderKind::direction: return encode_direction(ctx, fp, enc);
  }
  throw ConfigError("unknown encoder kind");
}

}  // namespace vecenc
}  // namespace pointvector
