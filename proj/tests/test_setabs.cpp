#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace pointvector;

namespace {

struct Rig {
  ParamStore<double> store;
  Tape<double> tape;
  Context<double> ctx{tape, store};
  std::mt19937_64 rng;
  explicit Rig(std::uint64_t seed) : rng(seed) {}
};

BlockConfig vpsa_cfg(std::size_t c, std::size_t out, std::size_t k, Aggregation agg, std::size_t m = 3) {
  BlockConfig b;
  b.in_channels = c;
  b.out_channels = out;
  b.k_neighbors = k;
  b.aggregation = agg;
  b.vector_dim = m;
  b.reduction = agg == Aggregation::max_groupconv ? ops::Reduction::max : ops::Reduction::sum;
  return b;
}

/// Points reordered by `perm`: new point i is old point perm[i].
PointSetBatch permuted(const PointSetBatch& p, const std::vector<std::size_t>& perm) {
  PointSetBatch q = p;
  for (std::size_t i = 0; i < p.points; ++i) {
    for (int d = 0; d < 3; ++d) q.positions[i * 3 + d] = p.positions[perm[i] * 3 + d];
    for (std::size_t c = 0; c < p.channels; ++c) q.features[i * p.channels + c] = p.features[perm[i] * p.channels + c];
  }
  return q;
}

}  // namespace

TEST(SaBlock, MatchesOracle) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rig r(seed);
    BlockConfig cfg;
    cfg.in_channels = 5;
    cfg.out_channels = 6;
    cfg.k_neighbors = 4;
    cfg.stride = seed % 2 ? 2 : 1;
    cfg.mlp_layers = 2;
    if (seed % 3 == 0) cfg.radius = 0.8;
    auto block = make_sa_block(r.store, "sa", cfg, r.rng);
    pvtest::scramble(r.store, r.rng);
    auto cloud = pvtest::random_cloud(2, 20, 5, r.rng);
    const bool train = seed < 3;
    r.ctx.mode = train ? Mode::train : Mode::eval;
    oracle::SaWeights w;
    for (const auto& u : block.mlp) w.mlp.push_back(pvtest::unit(r.store, u));
    auto out = sa_block(r.ctx, pvtest::make_level(r.ctx, cloud), block);
    auto ref = oracle::naive_sa(pvtest::to_oracle(cloud), w, cfg.stride, 4, cfg.radius, train);
    EXPECT_LT(pvtest::max_abs_diff(r.tape.value(out.features).data, ref), 1e-10) << "seed " << seed;
    EXPECT_EQ(out.points, (20 + cfg.stride - 1) / cfg.stride);
  }
}

TEST(SaBlock, SinglePoint) {
  Rig r(1);
  BlockConfig cfg;
  cfg.in_channels = 2;
  cfg.out_channels = 5;
  cfg.k_neighbors = 1;
  auto block = make_sa_block(r.store, "sa", cfg, r.rng);
  r.ctx.mode = Mode::eval;
  PointSetBatch p;
  p.batch = 1;
  p.points = 1;
  p.channels = 2;
  p.positions = {3, 4, 5};
  p.features = {0.5, -1.5};
  auto out = sa_block(r.ctx, pvtest::make_level(r.ctx, p), block);
  const auto& u = block.mlp[0];
  oracle::Vec x{0.5, -1.5, 0, 0, 0};
  auto ref = oracle::apply_unit(pvtest::unit(r.store, u), x, 1, false);
  EXPECT_LT(pvtest::max_abs_diff(r.tape.value(out.features).data, ref), 1e-14);
}

TEST(SaBlock, KLargerThanCloudThrows) {
  Rig r(2);
  BlockConfig cfg;
  cfg.in_channels = 2;
  cfg.out_channels = 2;
  cfg.k_neighbors = 9;
  auto block = make_sa_block(r.store, "sa", cfg, r.rng);
  auto p = pvtest::random_cloud(1, 8, 2, r.rng);
  EXPECT_THROW(sa_block(r.ctx, pvtest::make_level(r.ctx, p), block), SizeError);
}

TEST(SaBlock, PointPermutationCommutes) {
  Rig r(3);
  BlockConfig cfg;
  cfg.in_channels = 3;
  cfg.out_channels = 4;
  cfg.k_neighbors = 5;
  auto block = make_sa_block(r.store, "sa", cfg, r.rng);
  pvtest::scramble(r.store, r.rng);
  r.ctx.mode = Mode::eval;
  auto p = pvtest::random_cloud(1, 24, 3, r.rng);
  std::vector<std::size_t> perm(24);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), r.rng);
  auto a = r.tape.value(sa_block(r.ctx, pvtest::make_level(r.ctx, p), block).features).data;
  auto b = r.tape.value(sa_block(r.ctx, pvtest::make_level(r.ctx, permuted(p, perm)), block).features).data;
  for (std::size_t i = 0; i < 24; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(b[i * 4 + c], a[perm[i] * 4 + c], 1e-9);
}

TEST(VpsaBlock, MatchesBruteForce) {
  int n = 0;
  for (auto agg : {Aggregation::sum_groupconv, Aggregation::max_groupconv})
    for (std::size_t m : {1u, 2u, 3u})
      for (int variant = 0; variant < 4; ++variant) {
        Rig r(static_cast<std::uint64_t>(100 + n++));
        auto cfg = vpsa_cfg(6, 7, 4, agg, m);
        cfg.stride = variant & 1 ? 2 : 1;
        if (variant & 2) cfg.radius = 0.9;
        auto block = make_vpsa_block(r.store, "v", cfg, r.rng);
        pvtest::scramble(r.store, r.rng);
        auto cloud = pvtest::random_cloud(1, 16, 6, r.rng);
        const bool train = n % 2;
        r.ctx.mode = train ? Mode::train : Mode::eval;
        auto out = vpsa_block(r.ctx, pvtest::make_level(r.ctx, cloud), block);
        auto ref = oracle::brute_force_vpsa(pvtest::to_oracle(cloud), pvtest::vpsa_weights(r.store, block), cfg.stride, 4,
                                            cfg.radius, train);
        EXPECT_LT(pvtest::max_abs_diff(r.tape.value(out.features).data, ref), 1e-10)
            << to_string(agg) << " m=" << m << " variant " << variant;
      }
}

TEST(VpsaBlock, DeadMainPathLeavesResidual) {
  Rig r(4);
  auto block = make_vpsa_block(r.store, "v", vpsa_cfg(4, 4, 3, Aggregation::sum_groupconv), r.rng);
  for (ParamId id : {block.encoder.primary.weight, *block.encoder.primary.bias, block.mix->weight, *block.mix->bias})
    std::fill(r.store.value(id).data.begin(), r.store.value(id).data.end(), 0.0);
  auto p = pvtest::random_cloud(1, 10, 4, r.rng);
  auto out = r.tape.value(vpsa_block(r.ctx, pvtest::make_level(r.ctx, p), block).features).data;
  auto skip = oracle::apply_dense(pvtest::dense(r.store, block.residual), p.features, 10);
  for (double& v : skip) v = std::max(v, 0.0);
  EXPECT_LT(pvtest::max_abs_diff(out, skip), 1e-12);
}

TEST(VpsaBlock, PointPermutationCommutes) {
  for (auto agg : {Aggregation::sum_groupconv, Aggregation::max_groupconv, Aggregation::sum_fc}) {
    Rig r(5);
    auto block = make_vpsa_block(r.store, "v", vpsa_cfg(4, 5, 6, agg), r.rng);
    pvtest::scramble(r.store, r.rng);
    r.ctx.mode = Mode::eval;
    auto p = pvtest::random_cloud(1, 20, 4, r.rng);
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), r.rng);
    auto a = r.tape.value(vpsa_block(r.ctx, pvtest::make_level(r.ctx, p), block).features).data;
    auto b = r.tape.value(vpsa_block(r.ctx, pvtest::make_level(r.ctx, permuted(p, perm)), block).features).data;
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(b[i * 5 + c], a[perm[i] * 5 + c], 1e-9) << to_string(agg);
  }
}

TEST(VpsaBlock, ChannelMismatchThrows) {
  Rig r(6);
  auto block = make_vpsa_block(r.store, "v", vpsa_cfg(4, 4, 3, Aggregation::sum_groupconv), r.rng);
  auto p = pvtest::random_cloud(1, 10, 3, r.rng);
  EXPECT_THROW(vpsa_block(r.ctx, pvtest::make_level(r.ctx, p), block), SizeError);
}

TEST(Aggregation, SumGroupConvIsLinearInRepeatedNeighbors) {
  Rig r(7);
  const std::size_t k = 5, c = 3, m = 3;
  auto block = make_vpsa_block(r.store, "v", vpsa_cfg(c, c, k, Aggregation::sum_groupconv), r.rng);
  pvtest::scramble(r.store, r.rng);
  auto one = pvtest::random_cloud(1, 1, c * m, r.rng).features;
  std::vector<double> rep;
  for (std::size_t j = 0; j < k; ++j) rep.insert(rep.end(), one.begin(), one.end());
  Var vk = ops::constant(r.tape, Shape{1, 1, k, c, m}, std::span<const double>(rep));
  Var v1 = ops::constant(r.tape, Shape{1, 1, 1, c, m}, std::span<const double>(one));
  auto yk = r.tape.value(aggregation_variant(r.ctx, vk, {}, block)).data;
  auto y1 = r.tape.value(aggregation_variant(r.ctx, v1, {}, block)).data;
  const auto& bias = r.store.value(*block.projection->bias).data;
  for (std::size_t ch = 0; ch < c; ++ch) EXPECT_NEAR(yk[ch], k * (y1[ch] - bias[ch]) + bias[ch], 1e-12);
}

TEST(Aggregation, MaxFcZeroWeightsGiveBias) {
  Rig r(8);
  auto block = make_vpsa_block(r.store, "v", vpsa_cfg(3, 4, 2, Aggregation::max_fc), r.rng);
  std::fill(r.store.value(block.dense->weight).data.begin(), r.store.value(block.dense->weight).data.end(), 0.0);
  r.store.value(*block.dense->bias).data = {1, 2, 3, 4};
  auto v = pvtest::random_cloud(1, 2, 9, r.rng).features;
  Var x = ops::constant(r.tape, Shape{1, 1, 2, 3, 3}, std::span<const double>(v));
  EXPECT_EQ(r.tape.value(aggregation_variant(r.ctx, x, {}, block)).data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Aggregation, SumGroupConvIsGroupConvWithIdenticalSlots) {
  for (int trial = 0; trial < 10; ++trial) {
    Rig r(static_cast<std::uint64_t>(200 + trial));
    const std::size_t k = 4, c = 5, m = 3;
    auto sum_block = make_vpsa_block(r.store, "s", vpsa_cfg(c, c, k, Aggregation::sum_groupconv), r.rng);
    auto slot_block = make_vpsa_block(r.store, "g", vpsa_cfg(c, c, k, Aggregation::groupconv), r.rng);
    pvtest::scramble(r.store, r.rng);
    const auto& w = r.store.value(sum_block.projection->weight).data;
    auto& slots = r.store.value(slot_block.slots->weight).data;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t e = 0; e < m; ++e) slots[(ch * k + j) * m + e] = w[ch * m + e];
    r.store.value(*slot_block.slots->bias).data = r.store.value(*sum_block.projection->bias).data;
    auto v = pvtest::random_cloud(1, 3 * k, c * m, r.rng).features;
    Var x = ops::constant(r.tape, Shape{1, 3, k, c, m}, std::span<const double>(v));
    auto a = r.tape.value(aggregation_variant(r.ctx, x, {}, sum_block)).data;
    auto b = r.tape.value(aggregation_variant(r.ctx, x, {}, slot_block)).data;
    EXPECT_LT(pvtest::max_abs_diff(a, b), 1e-10);
  }
}

TEST(Aggregation, ParameterOrdering) {
  auto count = [](Aggregation agg) {
    ParamStore<double> s;
    std::mt19937_64 rng(0);
    make_vpsa_block(s, "v", vpsa_cfg(16, 16, 8, agg), rng);
    return s.param_count();
  };
  const auto conv = count(Aggregation::conv), fc = count(Aggregation::sum_fc), mfc = count(Aggregation::max_fc);
  const auto gc = count(Aggregation::sum_groupconv), mgc = count(Aggregation::max_groupconv);
  EXPECT_EQ(fc, mfc);
  EXPECT_EQ(gc, mgc);
  EXPECT_GT(conv, fc);
  EXPECT_GT(fc, gc);
}

TEST(FeaturePropagate, MatchesOracle) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rig r(300 + seed);
    auto coarse = pvtest::random_cloud(2, 6, 5, r.rng);
    auto fine = pvtest::random_cloud(2, 15, 3, r.rng);
    auto block = make_fp_block(r.store, "fp", 5, 3, 4, 2, r.rng);
    pvtest::scramble(r.store, r.rng);
    const bool train = seed % 2 == 0;
    r.ctx.mode = train ? Mode::train : Mode::eval;
    auto out = feature_propagate(r.ctx, pvtest::make_level(r.ctx, coarse), pvtest::make_level(r.ctx, fine), block);
    std::vector<oracle::Unit> mlp;
    for (const auto& u : block.mlp) mlp.push_back(pvtest::unit(r.store, u));
    auto ref = oracle::naive_fp(pvtest::to_oracle(coarse), pvtest::to_oracle(fine), mlp, train);
    EXPECT_LT(pvtest::max_abs_diff(r.tape.value(out.features).data, ref), 1e-10);
  }
}

TEST(FeaturePropagate, CoincidentAndEquidistantPoints) {
  Rig r(9);
  PointSetBatch coarse;
  coarse.batch = 1;
  coarse.points = 2;
  coarse.channels = 1;
  coarse.positions = {0, 0, 0, 2, 0, 0};
  coarse.features = {4, 8};
  PointSetBatch fine = coarse;
  fine.points = 2;
  fine.positions = {0, 0, 0, 1, 0, 0};
  fine.features = {0, 0};
  auto c = pvtest::make_level(r.ctx, coarse);
  auto f = pvtest::make_level(r.ctx, fine);
  auto v = r.tape.value(interpolate_level(r.ctx, c, f)).data;
  EXPECT_NEAR(v[0], 4.0, 1e-6);
  EXPECT_NEAR(v[1], 6.0, 1e-12);
}
