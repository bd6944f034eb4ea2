#include <gtest/gtest.h>

#include <numbers>

#include "test_support.hpp"

using namespace pointvector;
using std::numbers::pi;

namespace {

void expect_vec(const std::array<double, 3>& a, std::array<double, 3> b) {
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-15) << "component " << i;
}

struct EncoderRig {
  ParamStore<double> store;
  Tape<double> tape;
  Context<double> ctx{tape, store};
  std::mt19937_64 rng{23};
  VectorEncoder enc;
  Var fp;

  EncoderRig(EncoderKind kind, std::size_t m, std::size_t c = 4, std::size_t rows = 12) {
    enc = make_encoder(store, "enc", kind, c, m, rng);
    pvtest::scramble(store, rng);
    auto cloud = pvtest::random_cloud(1, rows, c, rng);
    fp = ops::constant(tape, Shape{rows, c}, std::span<const double>(cloud.features));
  }
  const std::vector<double>& run() { return tape.value(vecenc::encode(ctx, fp, enc)).data; }
};

}  // namespace

TEST(Rotate3d, ClosedFormExamples) {
  expect_vec(rotate3d(1, 0, 0), {0, 0, 1});
  expect_vec(rotate3d(1, 0, pi / 2), {0, 1, 0});
  expect_vec(rotate3d(2, pi / 2, pi / 2), {-2, 0, 0});
}

TEST(Rotate2d, ClosedFormExamples) {
  auto a = rotate2d(1, 0);
  EXPECT_NEAR(a[0], 0, 1e-15);
  EXPECT_NEAR(a[1], 1, 1e-15);
  auto b = rotate2d(1, pi / 2);
  EXPECT_NEAR(b[0], -1, 1e-15);
  EXPECT_NEAR(b[1], 0, 1e-15);
}

TEST(Rotate, IsometryAndOrthogonalMatrix) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> z(-5, 5), ang(-2 * pi, 2 * pi);
  for (int i = 0; i < 1000; ++i) {
    const double zx = z(rng), a = ang(rng), b = ang(rng);
    auto v = rotate3d(zx, a, b);
    EXPECT_NEAR(std::hypot(v[0], v[1], v[2]), std::abs(zx), 1e-12);
    auto w = rotate2d(zx, a);
    EXPECT_NEAR(std::hypot(w[0], w[1]), std::abs(zx), 1e-12);
    auto r = rotation_matrix(a, b);
    for (int p = 0; p < 3; ++p)
      for (int q = 0; q < 3; ++q) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += r[k * 3 + p] * r[k * 3 + q];
        EXPECT_NEAR(s, p == q ? 1.0 : 0.0, 1e-12);
      }
    // R applied to (0, zx, 0) is the closed form
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(r[k * 3 + 1] * zx, v[k], 1e-12);
  }
}

TEST(MixFeatures, ZeroPositionWeightsGiveReluOfRelFeat) {
  ParamStore<double> store;
  Tape<double> tape;
  Context<double> ctx{tape, store};
  std::mt19937_64 rng(2);
  auto pos = make_linear(store, "pos", 3, 3, true, rng);
  std::fill(store.value(pos.weight).data.begin(), store.value(pos.weight).data.end(), 0.0);
  Var rel_feat = ops::constant(tape, Shape{2, 3}, std::span<const double>(std::vector<double>{-1, 2, 0, 3, -4, 5}));
  Var rel_pos = ops::constant(tape, Shape{2, 3}, std::span<const double>(std::vector<double>{7, 8, 9, 1, 2, 3}));
  EXPECT_EQ(tape.value(vecenc::mix_features(ctx, rel_feat, rel_pos, pos)).data,
            (std::vector<double>{0, 2, 0, 3, 0, 5}));
}

TEST(EncodeRotation, ZeroZxGivesZeroField) {
  EncoderRig rig(EncoderKind::rotation, 3);
  std::fill(rig.store.value(rig.enc.primary.weight).data.begin(), rig.store.value(rig.enc.primary.weight).data.end(), 0.0);
  std::fill(rig.store.value(*rig.enc.primary.bias).data.begin(), rig.store.value(*rig.enc.primary.bias).data.end(), 0.0);
  for (double v : rig.run()) EXPECT_EQ(std::abs(v), 0.0);
}

TEST(EncodeRotation, ScalarCaseIsZxExactly) {
  EncoderRig rig(EncoderKind::rotation, 1);
  auto field = rig.run();
  Var zx = ops::linear(rig.ctx, rig.fp, rig.enc.primary);
  EXPECT_EQ(field, rig.tape.value(zx).data);
}

TEST(EncodeRotation, NormsEqualAbsZx) {
  for (std::size_t m : {2u, 3u}) {
    EncoderRig rig(EncoderKind::rotation, m);
    auto field = rig.run();
    auto zx = rig.tape.value(ops::linear(rig.ctx, rig.fp, rig.enc.primary)).data;
    for (std::size_t i = 0; i < zx.size(); ++i) {
      double n2 = 0;
      for (std::size_t e = 0; e < m; ++e) n2 += field[i * m + e] * field[i * m + e];
      EXPECT_NEAR(std::sqrt(n2), std::abs(zx[i]), 1e-9);
    }
  }
}

TEST(EncodeRotation, BadDimensionIsConfigError) {
  ParamStore<double> store;
  std::mt19937_64 rng(0);
  EXPECT_THROW(make_encoder(store, "e", EncoderKind::rotation, 4, 4, rng), ConfigError);
  EXPECT_THROW(make_encoder(store, "f", EncoderKind::rotation, 4, 0, rng), ConfigError);
}

TEST(EncodeMlp, ZeroSecondLayerGivesZeroField) {
  EncoderRig rig(EncoderKind::mlp, 3);
  auto& w = rig.store.value(rig.enc.expand->weight).data;
  std::fill(w.begin(), w.end(), 0.0);
  auto& b = rig.store.value(rig.enc.expand->bias.value()).data;
  std::fill(b.begin(), b.end(), 0.0);
  for (double v : rig.run()) EXPECT_EQ(v, 0.0);
}

TEST(EncodeMlp, MatchesLoopOracle) {
  EncoderRig rig(EncoderKind::mlp, 3, 4, 12);
  auto field = rig.run();
  const auto& s = rig.store;
  const auto fp = rig.tape.value(rig.fp).data;
  auto h = oracle::apply_unit(pvtest::unit(s, *rig.enc.hidden), fp, 12, true);
  auto ref = oracle::apply_dense(pvtest::dense(s, *rig.enc.expand), h, 12);
  EXPECT_LT(pvtest::max_abs_diff(field, ref), 1e-12);
}

TEST(EncodeDirection, ZeroModulusAndUnitNorms) {
  EncoderRig rig(EncoderKind::direction, 3);
  auto field = rig.run();
  auto mod = rig.tape.value(ops::linear(rig.ctx, rig.fp, rig.enc.primary)).data;
  for (std::size_t i = 0; i < mod.size(); ++i)
    EXPECT_NEAR(std::hypot(field[i * 3], field[i * 3 + 1], field[i * 3 + 2]), std::abs(mod[i]), 1e-6);

  EncoderRig zero(EncoderKind::direction, 3);
  std::fill(zero.store.value(zero.enc.primary.weight).data.begin(), zero.store.value(zero.enc.primary.weight).data.end(), 0.0);
  std::fill(zero.store.value(*zero.enc.primary.bias).data.begin(), zero.store.value(*zero.enc.primary.bias).data.end(), 0.0);
  for (double v : zero.run()) EXPECT_EQ(std::abs(v), 0.0);
}

TEST(NormalizeVectors, UnitDirection) {
  Tape<double> t;
  Var d = t.leaf(Tensor<double>({1, 3}, std::vector<double>{3, 0, 0}));
  auto u = t.value(ops::normalize_vectors(t, ops::reshape(t, d, Shape{1, 1, 3}))).data;
  EXPECT_NEAR(u[0], 1.0, 1e-8);
  EXPECT_EQ(u[1], 0.0);
  EXPECT_EQ(u[2], 0.0);
}
