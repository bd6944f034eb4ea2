#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pointvector/geometry.hpp"
#include "pointvector/nnops.hpp"
#include "pointvector/vecenc.hpp"

namespace pointvector {

/// How VPSA turns the neighbor vector field into per-channel scalars.
enum class Aggregation { sum_groupconv, max_groupconv, sum_fc, max_fc, conv, groupconv };

inline const char* to_string(Aggregation a) {
  switch (a) {
    case Aggregation::sum_groupconv: return "sum_groupconv";
    case Aggregation::max_groupconv: return "max_groupconv";
    case Aggregation::sum_fc: return "sum_fc";
    case Aggregation::max_fc: return "max_fc";
    case Aggregation::conv: return "conv";
    case Aggregation::groupconv: return "groupconv";
  }
  return "?";
}

inline Aggregation parse_aggregation(const std::string& s) {
  for (auto a : {Aggregation::sum_groupconv, Aggregation::max_groupconv, Aggregation::sum_fc, Aggregation::max_fc,
                 Aggregation::conv, Aggregation::groupconv})
    if (s == to_string(a)) return a;
  throw ConfigError("unknown aggregation '" + s +
                    "' (expected sum_groupconv|max_groupconv|sum_fc|max_fc|conv|groupconv)");
}

inline const char* to_string(ops::Reduction r) { return r == ops::Reduction::sum ? "sum" : "max"; }

inline ops::Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return ops::Reduction::sum;
  if (s == "max") return ops::Reduction::max;
  throw ConfigError("unknown reduction '" + s + "' (expected sum|max)");
}

/// Slot-indexed kernels need neighbors in a canonical order.
inline bool uses_slot_kernel(Aggregation a) { return a == Aggregation::conv || a == Aggregation::groupconv; }

struct BlockConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t k_neighbors = 8;
  std::optional<double> radius;  // ball query when set, KNN otherwise
  std::size_t stride = 1;
  ops::Reduction reduction = ops::Reduction::sum;
  std::size_t vector_dim = 3;
  EncoderKind encoder = EncoderKind::rotation;
  Aggregation aggregation = Aggregation::sum_groupconv;
  bool projection_bias = true;
  std::size_t mlp_layers = 1;  // SA / feature propagation depth

  void validate() const {
    if (stride < 1) throw ConfigError("block stride must be at least 1");
    if (k_neighbors < 1) throw ConfigError("block k_neighbors must be at least 1");
    if (in_channels < 1 || out_channels < 1) throw ConfigError("block channel counts must be positive");
    if (vector_dim < 1 || vector_dim > 3) throw ConfigError("vector_dim must be 1, 2 or 3");
    if (radius && !(*radius > 0.0)) throw ConfigError("block radius must be positive");
  }
};

/// Points at one resolution with their feature tensor on the tape.
struct Level {
  std::size_t batch = 0;
  std::size_t points = 0;
  std::size_t channels = 0;
  std::vector<double> positions;  // [B][N][3]
  Var features;                   // [B][N][C]
};

/// Centers and neighbor table of a block.
struct Grouping {
  std::size_t centers = 0;
  std::vector<std::int32_t> center_index;  // [B][M]
  std::vector<double> center_positions;    // [B][M][3]
  NeighborIndex neighbors;
};

inline Grouping build_grouping(const Level& in, std::size_t stride, std::size_t k, std::optional<double> radius,
                               double position_scale, bool canonical_order) {
  if (k > in.points)
    throw SizeError("block needs k=" + std::to_string(k) + " neighbors but the level has " +
                    std::to_string(in.points) + " points");
  Grouping g;
  g.centers = (in.points + stride - 1) / stride;
  g.center_index = stride == 1 ? geometry::all_centers(in.batch, in.points)
                               : geometry::farthest_point_sample(in.positions, in.batch, in.points, g.centers, 0);
  g.center_positions = geometry::gather_positions(in.positions, in.batch, in.points, g.center_index, g.centers);
  if (radius)
    g.neighbors = geometry::ball_query(g.center_index, g.centers, in.positions, in.batch, in.points,
                                       *radius * position_scale, k);
  else
    g.neighbors = geometry::knn(g.center_index, g.centers, in.positions, in.batch, in.points, k);
  if (canonical_order && radius) geometry::sort_by_distance(g.neighbors, in.positions, in.points);
  return g;
}

template <class T>
Var relative_position_tensor(Context<T>& ctx, const Grouping& g, const Level& in) {
  const auto rel = geometry::relative_positions(g.neighbors, in.positions, in.points, ctx.position_scale);
  return ops::constant(ctx.tape, Shape{in.batch, g.centers, g.neighbors.k, 3}, std::span<const double>(rel));
}

// ---------------------------------------------------------------------------
// SA: f_i' = max_j MLP([f_j, p_j - p_i])

struct SaBlock {
  BlockConfig cfg;
  std::vector<DenseUnit> mlp;
};

template <class T>
SaBlock make_sa_block(ParamStore<T>& store, const std::string& name, const BlockConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  SaBlock b;
  b.cfg = cfg;
  std::size_t width = cfg.in_channels + 3;
  for (std::size_t l = 0; l < std::max<std::size_t>(cfg.mlp_layers, 1); ++l) {
    b.mlp.push_back(make_dense(store, name + ".mlp" + std::to_string(l), width, cfg.out_channels, rng));
    width = cfg.out_channels;
  }
  return b;
}

template <class T>
Level sa_block(Context<T>& ctx, const Level& in, const SaBlock& block) {
  const auto& cfg = block.cfg;
  if (in.channels != cfg.in_channels)
    throw SizeError("sa_block: input has " + std::to_string(in.channels) + " channels, block expects " +
                    std::to_string(cfg.in_channels));
  Grouping g = build_grouping(in, cfg.stride, cfg.k_neighbors, cfg.radius, ctx.position_scale, false);
  Var grouped = ops::gather_neighbors(ctx.tape, in.features, g.neighbors);
  Var h = ops::concat(ctx.tape, grouped, relative_position_tensor(ctx, g, in));
  for (const auto& unit : block.mlp) h = ops::dense_unit(ctx, h, unit);
  Level out;
  out.batch = in.batch;
  out.points = g.centers;
  out.channels = cfg.out_channels;
  out.positions = std::move(g.center_positions);
  out.features = ops::neighbor_reduce(ctx.tape, h, ops::Reduction::max, g.neighbors.pad);
  return out;
}

/// SA over the whole cloud: offsets are taken from the centroid and the
/// result has one point per cloud, located at the centroid.
template <class T>
Level global_sa(Context<T>& ctx, const Level& in, const SaBlock& block) {
  const std::size_t b = in.batch, n = in.points;
  std::vector<double> centroid(b * 3, 0.0), rel(b * n * 3);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < 3; ++d) centroid[bi * 3 + d] += in.positions[(bi * n + i) * 3 + d];
    for (std::size_t d = 0; d < 3; ++d) centroid[bi * 3 + d] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < 3; ++d)
        rel[(bi * n + i) * 3 + d] = (in.positions[(bi * n + i) * 3 + d] - centroid[bi * 3 + d]) / ctx.position_scale;
  }
  Var h = ops::concat(ctx.tape, in.features, ops::constant(ctx.tape, Shape{b, n, 3}, std::span<const double>(rel)));
  for (const auto& unit : block.mlp) h = ops::dense_unit(ctx, h, unit);
  h = ops::reshape(ctx.tape, h, Shape{b, 1, n, block.cfg.out_channels});
  Level out;
  out.batch = b;
  out.points = 1;
  out.channels = block.cfg.out_channels;
  out.positions = std::move(centroid);
  out.features = ops::neighbor_reduce(ctx.tape, h, ops::Reduction::max);
  return out;
}

// ---------------------------------------------------------------------------
// VPSA: f_i' = relu(eta(f_i) + H_c(H_p(R_j H_v(fp_j))))

struct VpsaBlock {
  BlockConfig cfg;
  LinearLayer pos;  // relative position -> C_in, mixed into fp
  VectorEncoder encoder;
  std::optional<GroupedProjection> projection;  // sum/max + GroupConv
  std::optional<SlotKernel> slots;              // GroupConv over neighbor slots
  std::optional<LinearLayer> dense;             // FC / Conv
  std::optional<LinearLayer> mix;               // H_c, GroupConv variants only
  NormLayer norm;
  LinearLayer residual;  // eta
};

template <class T>
VpsaBlock make_vpsa_block(ParamStore<T>& store, const std::string& name, const BlockConfig& cfg,
                          std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t c = cfg.in_channels, m = cfg.vector_dim;
  VpsaBlock b;
  b.cfg = cfg;
  b.pos = make_linear(store, name + ".pos", 3, c, true, rng);
  b.encoder = make_encoder(store, name + ".encoder", cfg.encoder, c, m, rng);
  switch (cfg.aggregation) {
    case Aggregation::sum_groupconv:
    case Aggregation::max_groupconv:
      b.projection = make_grouped_projection(store, name + ".project", c, m, cfg.projection_bias, rng);
      break;
    case Aggregation::groupconv:
      b.slots = make_slot_kernel(store, name + ".slots", c, cfg.k_neighbors, m, cfg.projection_bias, rng);
      break;
    case Aggregation::sum_fc:
    case Aggregation::max_fc:
      b.dense = make_linear(store, name + ".fc", c * m, cfg.out_channels, true, rng);
      break;
    case Aggregation::conv:
      b.dense = make_linear(store, name + ".conv", cfg.k_neighbors * c * m, cfg.out_channels, true, rng);
      break;
  }
  if (!b.dense) b.mix = make_linear(store, name + ".mix", c, cfg.out_channels, true, rng);
  b.norm = make_norm(store, name + ".norm", cfg.out_channels);
  b.residual = make_linear(store, name + ".residual", c, cfg.out_channels, true, rng);
  return b;
}

/// Vector field v [B][M][K][C][m] -> [B][M][C'] (C' = C for the GroupConv
/// variants, out_channels for FC/Conv). Padded slots never contribute.
template <class T>
Var aggregation_variant(Context<T>& ctx, Var v, std::span<const std::uint8_t> pad, const VpsaBlock& block) {
  auto& tape = ctx.tape;
  const Shape vs = tape.shape(v);
  if (vs.size() != 5) throw SizeError("aggregation_variant: expected [B][M][K][C][m]");
  const std::size_t b = vs[0], m = vs[1], k = vs[2], c = vs[3], dim = vs[4];
  switch (block.cfg.aggregation) {
    case Aggregation::sum_groupconv:
      return ops::grouped_projection(ctx, ops::neighbor_reduce(tape, v, ops::Reduction::sum, pad), *block.projection);
    case Aggregation::max_groupconv:
      return ops::grouped_projection(ctx, ops::neighbor_reduce(tape, v, ops::Reduction::max, pad), *block.projection);
    case Aggregation::groupconv:
      return ops::slot_groupconv(ctx, v, *block.slots, pad);
    case Aggregation::sum_fc:
    case Aggregation::max_fc: {
      const auto r = block.cfg.aggregation == Aggregation::sum_fc ? ops::Reduction::sum : ops::Reduction::max;
      Var reduced = ops::reshape(tape, ops::neighbor_reduce(tape, v, r, pad), Shape{b, m, c * dim});
      return ops::linear(ctx, reduced, *block.dense);
    }
    case Aggregation::conv: {
      Var masked = v;
      if (!pad.empty()) {
        Tensor<T> keep(vs, T(1));
        const std::size_t slot = c * dim;
        for (std::size_t r = 0; r < pad.size(); ++r)
          if (pad[r]) std::fill_n(keep.data.begin() + static_cast<std::ptrdiff_t>(r * slot), slot, T(0));
        masked = ops::mul(tape, v, ops::constant(tape, std::move(keep)));
      }
      return ops::linear(ctx, ops::reshape(tape, masked, Shape{b, m, k * c * dim}), *block.dense);
    }
  }
  throw ConfigError("unknown aggregation mode");
}

template <class T>
Level vpsa_block(Context<T>& ctx, const Level& in, const VpsaBlock& block) {
  const auto& cfg = block.cfg;
  auto& tape = ctx.tape;
  if (in.channels != cfg.in_channels)
    throw SizeError("vpsa_block: input has " + std::to_string(in.channels) + " channels, block expects " +
                    std::to_string(cfg.in_channels));
  const bool slotted = uses_slot_kernel(cfg.aggregation);
  Grouping g = build_grouping(in, cfg.stride, cfg.k_neighbors, cfg.radius, ctx.position_scale, slotted);
  if (slotted && g.neighbors.k != cfg.k_neighbors) throw SizeError("vpsa_block: slot kernel needs exactly k neighbors");

  Var rel_feat = ops::group_relative(tape, in.features, g.neighbors);
  Var fp = vecenc::mix_features(ctx, rel_feat, relative_position_tensor(ctx, g, in), block.pos);
  Var field = vecenc::encode(ctx, fp, block.encoder);
  Var main = aggregation_variant(ctx, field, g.neighbors.pad, block);
  if (block.mix)
    main = ops::batchnorm(ctx, ops::linear(ctx, main, *block.mix), block.norm);
  else
    main = ops::relu(tape, ops::batchnorm(ctx, main, block.norm));

  Var center = cfg.stride == 1 ? in.features : ops::gather_rows(tape, in.features, g.center_index, g.centers);
  if (tape.shape(main) != Shape{in.batch, g.centers, cfg.out_channels})
    throw ConfigError("vpsa_block: main path width does not match the residual map");
  Var skip = ops::linear(ctx, center, block.residual);

  Level out;
  out.batch = in.batch;
  out.points = g.centers;
  out.channels = cfg.out_channels;
  out.positions = std::move(g.center_positions);
  out.features = ops::residual_fuse(tape, main, skip);
  return out;
}

// ---------------------------------------------------------------------------
// Feature propagation: inverse squared-distance interpolation from the three
// nearest coarse points, concatenated with skip features, then a shared MLP.

struct FpBlock {
  std::size_t coarse_channels = 0;
  std::size_t skip_channels = 0;
  std::size_t out_channels = 0;
  std::vector<DenseUnit> mlp;
};

template <class T>
FpBlock make_fp_block(ParamStore<T>& store, const std::string& name, std::size_t coarse_channels,
                      std::size_t skip_channels, std::size_t out_channels, std::size_t layers, std::mt19937_64& rng) {
  FpBlock b;
  b.coarse_channels = coarse_channels;
  b.skip_channels = skip_channels;
  b.out_channels = out_channels;
  std::size_t width = coarse_channels + skip_channels;
  for (std::size_t l = 0; l < std::max<std::size_t>(layers, 1); ++l) {
    b.mlp.push_back(make_dense(store, name + ".mlp" + std::to_string(l), width, out_channels, rng));
    width = out_channels;
  }
  return b;
}

/// Interpolated coarse features only, [B][N_fine][C_coarse].
template <class T>
Var interpolate_level(Context<T>& ctx, const Level& coarse, const Level& fine) {
  if (coarse.batch != fine.batch) throw SizeError("feature_propagate: batch mismatch");
  auto w = geometry::three_nn_weights(fine.positions, fine.points, coarse.positions, coarse.points, fine.batch);
  return ops::interpolate(ctx.tape, coarse.features, w);
}

template <class T>
Level feature_propagate(Context<T>& ctx, const Level& coarse, const Level& fine, const FpBlock& block) {
  if (coarse.channels != block.coarse_channels || fine.channels != block.skip_channels)
    throw SizeError("feature_propagate: channel counts do not match the block");
  Var h = ops::concat(ctx.tape, fine.features, interpolate_level(ctx, coarse, fine));
  for (const auto& unit : block.mlp) h = ops::dense_unit(ctx, h, unit);
  Level out;
  out.batch = fine.batch;
  out.points = fine.points;
  out.channels = block.out_channels;
  out.positions = fine.positions;
  out.features = h;
  return out;
}

}  // namespace pointvector
