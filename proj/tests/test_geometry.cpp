#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

using namespace pointvector;
using namespace pointvector::geometry;

namespace {

PointSetBatch line_cloud() {
  PointSetBatch p;
  p.batch = 1;
  p.points = 4;
  p.channels = 1;
  p.positions = {0, 0, 0, 1, 0, 0, 2, 0, 0, 10, 0, 0};
  p.features = {0, 1, 2, 3};
  return p;
}

std::vector<std::int32_t> row(const NeighborIndex& nb, std::size_t b, std::size_t i) {
  std::vector<std::int32_t> r;
  for (std::size_t j = 0; j < nb.k; ++j) r.push_back(nb.at(b, i, j));
  return r;
}

}  // namespace

TEST(Fps, FarthestPairFirst) {
  auto p = line_cloud();
  EXPECT_EQ(farthest_point_sample(p, 2), (std::vector<std::int32_t>{0, 3}));
  EXPECT_EQ(farthest_point_sample(p, 3), (std::vector<std::int32_t>{0, 3, 2}));
  EXPECT_EQ(farthest_point_sample(p, 1), (std::vector<std::int32_t>{0}));
}

TEST(Fps, StartIndexIsFirst) {
  auto p = line_cloud();
  EXPECT_EQ(farthest_point_sample(p, 2, 3)[0], 3);
}

TEST(Fps, RejectsBadSizes) {
  auto p = line_cloud();
  EXPECT_THROW(farthest_point_sample(p, 5), SizeError);
  EXPECT_THROW(farthest_point_sample(p, 0), SizeError);
  EXPECT_THROW(farthest_point_sample(std::span<const double>(), 1, 0, 1), SizeError);
}

TEST(Fps, DistinctAndMatchesOracle) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    auto p = pvtest::random_cloud(1, 64, 1, rng);
    auto idx = farthest_point_sample(p, 16);
    EXPECT_EQ(std::set<std::int32_t>(idx.begin(), idx.end()).size(), 16u);
    auto ref = oracle::naive_fps(p.positions, 64, 16);
    EXPECT_EQ(std::vector<int>(idx.begin(), idx.end()), ref);
  }
}

TEST(BallQuery, LineExamples) {
  auto p = line_cloud();
  std::vector<std::int32_t> c{0};
  auto a = ball_query(c, p, 1.5, 2);
  EXPECT_EQ(row(a, 0, 0), (std::vector<std::int32_t>{0, 1}));
  EXPECT_FALSE(a.padded(0, 0, 0));
  EXPECT_FALSE(a.padded(0, 0, 1));

  auto b = ball_query(c, p, 0.5, 2);
  EXPECT_EQ(row(b, 0, 0), (std::vector<std::int32_t>{0, 0}));
  EXPECT_FALSE(b.padded(0, 0, 0));
  EXPECT_TRUE(b.padded(0, 0, 1));

  auto d = ball_query(c, p, 2.5, 3);
  EXPECT_EQ(row(d, 0, 0), (std::vector<std::int32_t>{0, 1, 2}));
}

TEST(BallQuery, CrossCloudEmptyNeighborhoodThrows) {
  auto p = line_cloud();
  std::vector<double> q{100, 0, 0};
  EXPECT_THROW(ball_query_points(q, 1, p.positions, 1, 4, 1.0, 2), EmptyNeighborhood);
}

TEST(BallQuery, RejectsBadArguments) {
  auto p = line_cloud();
  std::vector<std::int32_t> c{0};
  EXPECT_THROW(ball_query(c, p, 0.0, 2), ConfigError);
  EXPECT_THROW(ball_query(c, p, 1.0, 0), SizeError);
}

TEST(BallQuery, RadiusBoundAndOracleOnRandomClouds) {
  std::mt19937_64 rng(5);
  for (std::size_t n : {16u, 128u, 512u}) {
    auto p = pvtest::random_cloud(1, n, 1, rng);
    auto centers = farthest_point_sample(p, 8);
    const double r = 0.4;
    auto nb = ball_query(centers, p, r, 16);
    std::vector<double> q;
    for (auto c : centers)
      for (int d = 0; d < 3; ++d) q.push_back(p.positions[static_cast<std::size_t>(c) * 3 + d]);
    auto [idx, pad] = oracle::naive_ball(q, 8, p.positions, n, r, 16);
    EXPECT_EQ(std::vector<int>(nb.indices.begin(), nb.indices.end()), idx);
    EXPECT_EQ(nb.pad, pad);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 16; ++j) {
        if (nb.padded(0, i, j)) continue;
        EXPECT_LE(squared_distance(p.position(0, static_cast<std::size_t>(centers[i])),
                                   p.position(0, static_cast<std::size_t>(nb.at(0, i, j)))),
                  r * r);
      }
  }
}

TEST(Knn, LineAndTieBreak) {
  auto p = line_cloud();
  std::vector<std::int32_t> c{0};
  EXPECT_EQ(row(knn(c, p, 2), 0, 0), (std::vector<std::int32_t>{0, 1}));

  PointSetBatch t;
  t.batch = 1;
  t.points = 3;
  t.channels = 1;
  t.positions = {0, 0, 0, 1, 0, 0, -1, 0, 0};
  t.features = {0, 0, 0};
  std::vector<double> q{0, 0, 0};
  auto nb = knn_points(q, 1, t.positions, 1, 3, 2);
  EXPECT_EQ(nb.at(0, 0, 1), 1);
}

TEST(Knn, KLargerThanCloudThrows) {
  auto p = line_cloud();
  std::vector<std::int32_t> c{0};
  EXPECT_THROW(knn(c, p, 5), SizeError);
}

TEST(Knn, MatchesOracle) {
  std::mt19937_64 rng(9);
  for (std::size_t n : {100u, 512u}) {
    auto p = pvtest::random_cloud(2, n, 1, rng);
    auto centers = all_centers(2, n);
    auto nb = knn(centers, p, 8);
    for (std::size_t b = 0; b < 2; ++b) {
      std::vector<double> pts(p.positions.begin() + static_cast<std::ptrdiff_t>(b * n * 3),
                              p.positions.begin() + static_cast<std::ptrdiff_t>((b + 1) * n * 3));
      auto ref = oracle::naive_knn(pts, n, pts, n, 8);
      std::vector<int> got(nb.indices.begin() + static_cast<std::ptrdiff_t>(b * n * 8),
                           nb.indices.begin() + static_cast<std::ptrdiff_t>((b + 1) * n * 8));
      EXPECT_EQ(got, ref);
    }
  }
}

TEST(GroupRelative, Examples) {
  PointSetBatch p;
  p.batch = 1;
  p.points = 2;
  p.channels = 2;
  p.positions = {0, 0, 0, 1, 2, 3};
  p.features = {1, 2, 3, 5};
  NeighborIndex nb;
  nb.batch = 1;
  nb.centers = 1;
  nb.k = 2;
  nb.indices = {0, 1};
  nb.pad = {0, 0};
  nb.center = {0};
  auto g = group_relative(p, nb);
  EXPECT_EQ(g.features, (std::vector<double>{0, 0, 2, 3}));
  EXPECT_EQ(g.positions, (std::vector<double>{0, 0, 0, 1, 2, 3}));

  nb.indices = {0, 5};
  EXPECT_THROW(group_relative(p, nb), SizeError);
}

TEST(GroupRelative, MatchesNestedLoop) {
  std::mt19937_64 rng(11);
  auto p = pvtest::random_cloud(2, 32, 5, rng);
  auto nb = knn(all_centers(2, 32), p, 6);
  auto g = group_relative(p, nb);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        const auto s = static_cast<std::size_t>(nb.at(b, i, j));
        const std::size_t r = (b * 32 + i) * 6 + j;
        for (std::size_t c = 0; c < 5; ++c)
          EXPECT_EQ(g.features[r * 5 + c], p.feature(b, s)[c] - p.feature(b, i)[c]);
        for (std::size_t d = 0; d < 3; ++d)
          EXPECT_EQ(g.positions[r * 3 + d], p.position(b, s)[d] - p.position(b, i)[d]);
      }
}

TEST(Interpolation, WeightsSumToOneAndMatchOracle) {
  std::mt19937_64 rng(13);
  auto fine = pvtest::random_cloud(1, 40, 1, rng);
  auto coarse = pvtest::random_cloud(1, 10, 3, rng);
  auto w = three_nn_weights(fine.positions, 40, coarse.positions, 10, 1);
  std::vector<double> mine(40 * 3, 0.0);
  for (std::size_t i = 0; i < 40; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      total += w.weights[i * 3 + j];
      for (std::size_t c = 0; c < 3; ++c)
        mine[i * 3 + c] += w.weights[i * 3 + j] * coarse.features[static_cast<std::size_t>(w.indices[i * 3 + j]) * 3 + c];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  auto ref = oracle::naive_interpolate(fine.positions, 40, coarse.positions, 10, coarse.features, 3);
  EXPECT_LT(pvtest::max_abs_diff(mine, ref), 1e-12);
}

TEST(PointSetBatch, ValidateRejectsBadInput) {
  auto p = line_cloud();
  EXPECT_NO_THROW(p.validate());
  p.labels = std::vector<int>{0, 1, 2, 3};
  EXPECT_THROW(p.validate(3), DataError);
  p.positions[0] = std::nan("");
  EXPECT_THROW(p.validate(), DataError);
  PointSetBatch empty;
  EXPECT_THROW(empty.validate(), SizeError);
}
